"""The linker pipeline: parse, resolve symbols, run the size passes in fixed
order (frame outlining, general outlining, ordering, ICF), resolve fixups,
and emit the final image plus stats and the auxiliary debug file.

The pass schedule is hard-coded: outlining creates atoms and therefore runs
before the ordering stage; ICF runs right after ordering. Identical inputs
and options produce byte-identical image, stats, and aux outputs for any
worker-pool size.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import icf as icf_mod
from . import outline_frame, outline_general
from .icf import IcfMode
from .metadata import (
    AuxRecord, IndexMap, LayoutAtom, compose, unique_atom_names, write_aux,
)
from .objfmt import (
    Fixup, FixupKind, FunctionAtom, ObjectFile, Scope, validate, write_sof,
)
from .outline_general import OutlineConfig

__all__ = [
    "LinkError", "UndefinedSymbol", "DuplicateGlobal", "RelocationOverflow",
    "LinkOptions", "LinkStats", "LinkResult", "link",
    "write_image", "read_image", "Image", "TEXT_BASE",
]

TEXT_BASE = 0x10000
IMAGE_MAGIC = b"SIMG"
IMAGE_VERSION = 1


class LinkError(ValueError):
    pass


class UndefinedSymbol(LinkError):
    pass


class DuplicateGlobal(LinkError):
    pass


class RelocationOverflow(LinkError):
    pass


@dataclass(frozen=True)
class LinkOptions:
    outline: bool = False
    frame_outline: bool = True        # --no-frame-outline disables
    outline_config: OutlineConfig = field(default_factory=OutlineConfig)
    icf: IcfMode = IcfMode.NONE
    icf_iterate: bool = True
    icf_max_iters: int = 5
    jobs: int = 1

    def canonical(self) -> str:
        oc = self.outline_config
        return (f"outline={int(self.outline)};frame={int(self.frame_outline)};"
                f"maxlen={oc.max_len};minlen={oc.min_len};"
                f"minfreq={oc.min_freq};minprofit={oc.min_profit};"
                f"icf={self.icf.value};iterate={int(self.icf_iterate)};"
                f"maxiters={self.icf_max_iters}")


@dataclass
class PassStats:
    bytes_saved: int = 0
    atoms_created: int = 0
    sites_rewritten: int = 0
    candidates_considered: int = 0
    decisions_accepted: int = 0
    atoms_folded: int = 0
    iterations: int = 0
    seconds: float = 0.0


@dataclass
class LinkStats:
    text_bytes_before: int = 0
    text_bytes_after: int = 0
    atoms_in: int = 0
    atoms_out: int = 0
    frame: PassStats = field(default_factory=PassStats)
    general: PassStats = field(default_factory=PassStats)
    icf: PassStats = field(default_factory=PassStats)
    icf_mode: str = "none"
    total_seconds: float = 0.0

    def savings_total(self) -> int:
        return (self.frame.bytes_saved + self.general.bytes_saved
                + self.icf.bytes_saved)

    def to_json(self) -> str:
        # wall-clock excluded: stats files must be byte-identical across runs
        def pass_dict(p: PassStats, keys: tuple[str, ...]) -> dict:
            return {k: getattr(p, k) for k in keys}

        data = {
            "text_bytes_before": self.text_bytes_before,
            "text_bytes_after": self.text_bytes_after,
            "atoms_in": self.atoms_in,
            "atoms_out": self.atoms_out,
            "savings_total": self.savings_total(),
            "passes": {
                "frame_outline": pass_dict(
                    self.frame, ("bytes_saved", "atoms_created",
                                 "sites_rewritten")),
                "general_outline": pass_dict(
                    self.general, ("bytes_saved", "atoms_created",
                                   "sites_rewritten", "candidates_considered",
                                   "decisions_accepted")),
                "icf": {**pass_dict(self.icf, ("bytes_saved", "atoms_folded",
                                               "iterations")),
                        "mode": self.icf_mode},
            },
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def human_text(self) -> str:
        lines = [
            f"text bytes: {self.text_bytes_before} -> {self.text_bytes_after} "
            f"(saved {self.savings_total()})",
            f"atoms: {self.atoms_in} -> {self.atoms_out}",
            f"frame outline: saved {self.frame.bytes_saved} B, "
            f"{self.frame.atoms_created} helpers, "
            f"{self.frame.sites_rewritten} sites, "
            f"{self.frame.seconds * 1000:.1f} ms",
            f"general outline: saved {self.general.bytes_saved} B, "
            f"{self.general.atoms_created} atoms, "
            f"{self.general.sites_rewritten} sites, "
            f"{self.general.candidates_considered} windows, "
            f"{self.general.decisions_accepted} decisions, "
            f"{self.general.seconds * 1000:.1f} ms",
            f"icf ({self.icf_mode}): saved {self.icf.bytes_saved} B, "
            f"{self.icf.atoms_folded} folded, {self.icf.iterations} iters, "
            f"{self.icf.seconds * 1000:.1f} ms",
            f"total link time: {self.total_seconds * 1000:.1f} ms "
            f"(passes {self.pass_seconds() * 1000:.1f} ms, "
            f"{self.pass_fraction() * 100:.1f}%)",
        ]
        return "\n".join(lines) + "\n"

    def pass_seconds(self) -> float:
        return self.frame.seconds + self.general.seconds + self.icf.seconds

    def pass_fraction(self) -> float:
        return self.pass_seconds() / self.total_seconds if self.total_seconds else 0.0


@dataclass
class Image:
    uuid: bytes
    text_base: int
    text: bytes
    entries: dict[str, int]
    atoms: list[LayoutAtom]
    symbols: list[tuple[str, Scope, int]]


@dataclass
class LinkResult:
    image: Image
    image_bytes: bytes
    stats: LinkStats
    aux_bytes: bytes
    aux_records: list[AuxRecord]
    atoms: list[FunctionAtom]            # final laid-out atoms
    layout: list[LayoutAtom]


def _resolve_symbols(files: list[ObjectFile]) -> tuple[
        list[FunctionAtom], list[bool], list[tuple[str, Scope, str]]]:
    """Clone atoms under program-unique names, rewrite fixup targets to the
    resolved atoms' unique names, and flag atom scope."""
    unames = unique_atom_names(files)

    global_syms: dict[str, tuple[int, str]] = {}
    for fi, f in enumerate(files):
        validate(f)
        for sym in f.symbols:
            if sym.scope is Scope.GLOBAL:
                if sym.name in global_syms:
                    raise DuplicateGlobal(
                        f"symbol {sym.name!r} defined in inputs "
                        f"{global_syms[sym.name][0]} and {fi}")
                global_syms[sym.name] = (fi, unames[(fi, sym.atom_index)])

    atoms: list[FunctionAtom] = []
    is_local: list[bool] = []
    symbols: list[tuple[str, Scope, str]] = []
    atom_global: dict[str, bool] = {}
    for fi, f in enumerate(files):
        local_syms = {sym.name: unames[(fi, sym.atom_index)]
                      for sym in f.symbols}
        for sym in f.symbols:
            uname = unames[(fi, sym.atom_index)]
            symbols.append((sym.name, sym.scope, uname))
            if sym.scope is Scope.GLOBAL:
                atom_global[uname] = True
        for ai, atom in enumerate(f.atoms):
            uname = unames[(fi, ai)]
            fixups = []
            for fx in atom.fixups:
                if fx.kind is FixupKind.DATA_IN_CODE_RANGE:
                    fixups.append(fx)
                    continue
                target = local_syms.get(fx.target)
                if target is None:
                    entry = global_syms.get(fx.target)
                    if entry is None:
                        raise UndefinedSymbol(
                            f"input {fi}, atom {atom.name!r}: undefined "
                            f"symbol {fx.target!r}")
                    target = entry[1]
                fixups.append(Fixup(fx.instruction_index, fx.kind, target,
                                    fx.addend, fx.length))
            atoms.append(FunctionAtom(uname, list(atom.words), fixups,
                                      list(atom.eh_entries),
                                      list(atom.debug_lines),
                                      has_data_in_code=atom.has_data_in_code))
    for atom in atoms:
        is_local.append(not atom_global.get(atom.name, False))
    return atoms, is_local, symbols


def link(files: list[ObjectFile], options: LinkOptions) -> LinkResult:
    t_start = time.perf_counter()
    stats = LinkStats()
    stats.icf_mode = options.icf.value

    link_uuid = _link_uuid(files, options)
    atoms, is_local, symbols = _resolve_symbols(files)
    stats.atoms_in = len(atoms)
    stats.text_bytes_before = sum(a.size_bytes() for a in atoms)
    taken_names = {a.name for a in atoms}

    combined: dict[int, IndexMap] = {}

    if options.outline and options.frame_outline:
        t0 = time.perf_counter()
        fr = outline_frame.outline_frames(atoms, taken_names)
        stats.frame.seconds = time.perf_counter() - t0
        stats.frame.bytes_saved = fr.bytes_saved
        stats.frame.atoms_created = len(fr.new_atoms)
        stats.frame.sites_rewritten = fr.sites_rewritten
        combined.update(fr.index_maps)
        atoms.extend(fr.new_atoms)
        is_local.extend([True] * len(fr.new_atoms))

    if options.outline:
        t0 = time.perf_counter()
        map_fn = map
        pool = None
        if options.jobs > 1:
            pool = ThreadPoolExecutor(max_workers=options.jobs)
            map_fn = pool.map
        try:
            gen = outline_general.run_pass(atoms, options.outline_config,
                                           taken_names, map_fn=map_fn)
        finally:
            if pool is not None:
                pool.shutdown()
        stats.general.seconds = time.perf_counter() - t0
        stats.general.bytes_saved = gen.bytes_saved
        stats.general.atoms_created = len(gen.new_atoms)
        stats.general.candidates_considered = gen.windows_considered
        stats.general.decisions_accepted = sum(
            1 for d in gen.decisions if d.accepted)
        stats.general.sites_rewritten = sum(
            len(d.accepted) for d in gen.decisions)
        for idx, imap in gen.index_maps.items():
            combined[idx] = compose(combined[idx], imap) if idx in combined \
                else imap
        atoms.extend(gen.new_atoms)
        is_local.extend([True] * len(gen.new_atoms))

    # ordering pass: stable input order, link-created atoms appended in
    # creation order (already true of the list); then ICF over that order
    t0 = time.perf_counter()
    max_iters = options.icf_max_iters if options.icf_iterate else 1
    outcome = icf_mod.fold(atoms, is_local, options.icf, max_iters)
    stats.icf.seconds = time.perf_counter() - t0
    stats.icf.bytes_saved = outcome.report.bytes_saved
    stats.icf.atoms_folded = outcome.report.atoms_folded
    stats.icf.iterations = outcome.report.iterations
    for idx, imap in outcome.index_maps.items():
        combined[idx] = compose(combined[idx], imap) if idx in combined \
            else imap

    kept = outcome.kept
    aliases = outcome.aliases

    def canonical(name: str) -> str:
        while name in aliases:
            name = aliases[name]
        return name

    # layout and address assignment
    addresses: dict[str, int] = {}
    layout: list[LayoutAtom] = []
    addr = TEXT_BASE
    for idx in kept:
        atom = atoms[idx]
        addresses[atom.name] = addr
        layout.append(LayoutAtom(atom.name, addr, len(atom.words)))
        addr += atom.size_bytes()
    stats.text_bytes_after = addr - TEXT_BASE
    stats.atoms_out = len(kept)

    # fixup resolution patches the final instruction fields
    text = bytearray(stats.text_bytes_after)
    for la, idx in zip(layout, kept):
        atom = atoms[idx]
        words = _patch_fixups(atom, la.address, addresses, canonical)
        struct.pack_into(f"<{len(words)}I", text, la.address - TEXT_BASE,
                         *words)

    entries: dict[str, int] = {}
    image_symbols: list[tuple[str, Scope, int]] = []
    for name, scope, uname in symbols:
        target = canonical(uname)
        if target not in addresses:
            continue
        image_symbols.append((name, scope, addresses[target]))
        if scope is Scope.GLOBAL:
            entries[name] = addresses[target]

    aux_records = [AuxRecord(atoms[idx].name, imap)
                   for idx, imap in sorted(combined.items())
                   if not imap.is_identity()]
    aux_bytes = write_aux(link_uuid, aux_records)

    image = Image(link_uuid, TEXT_BASE, bytes(text), entries, layout,
                  image_symbols)
    image_bytes = write_image(image)
    stats.total_seconds = time.perf_counter() - t_start

    final_atoms = [atoms[idx] for idx in kept]
    return LinkResult(image, image_bytes, stats, aux_bytes, aux_records,
                      final_atoms, layout)


def _link_uuid(files: list[ObjectFile], options: LinkOptions) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(options.canonical().encode())
    for f in files:
        h.update(write_sof(f))
    return h.digest()


def _patch_fixups(atom: FunctionAtom, base: int, addresses: dict[str, int],
                  canonical) -> list[int]:
    words = list(atom.words)
    for fx in atom.fixups:
        if fx.kind is FixupKind.DATA_IN_CODE_RANGE:
            continue
        target_name = canonical(fx.target)
        target = addresses.get(target_name)
        if target is None:
            raise UndefinedSymbol(
                f"atom {atom.name!r}: fixup target {fx.target!r} vanished")
        place = base + 4 * fx.instruction_index
        value = target + fx.addend
        word = words[fx.instruction_index]
        if fx.kind in (FixupKind.CALL26, FixupKind.BRANCH26):
            delta = value - place
            if delta % 4 or not -(1 << 27) <= delta < (1 << 27):
                raise RelocationOverflow(
                    f"branch to {fx.target!r} out of range ({delta} bytes)")
            word |= (delta // 4) & 0x3FFFFFF
        elif fx.kind is FixupKind.ADR21:
            delta = value - place
            if not -(1 << 20) <= delta < (1 << 20):
                raise RelocationOverflow(
                    f"adr to {fx.target!r} out of range ({delta} bytes)")
            word |= ((delta & 0x3) << 29) | (((delta >> 2) & 0x7FFFF) << 5)
        elif fx.kind is FixupKind.ADRP21_PAGE:
            delta = (value & ~0xFFF) - (place & ~0xFFF)
            pages = delta // 4096
            if not -(1 << 20) <= pages < (1 << 20):
                raise RelocationOverflow(
                    f"adrp to {fx.target!r} out of range ({delta} bytes)")
            word |= ((pages & 0x3) << 29) | (((pages >> 2) & 0x7FFFF) << 5)
        words[fx.instruction_index] = word
    return words


# ---------------------------------------------------------------------------
# image serialization

def write_image(image: Image) -> bytes:
    out = [IMAGE_MAGIC, struct.pack("<I", IMAGE_VERSION), image.uuid,
           struct.pack("<QI", image.text_base, len(image.text))]

    def name(s: str) -> bytes:
        raw = s.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw

    out.append(struct.pack("<I", len(image.entries)))
    for sym, addr in sorted(image.entries.items()):
        out.append(name(sym))
        out.append(struct.pack("<Q", addr))
    out.append(image.text)
    out.append(struct.pack("<I", len(image.atoms)))
    for la in image.atoms:
        out.append(name(la.name))
        out.append(struct.pack("<QI", la.address, la.word_count))
    out.append(struct.pack("<I", len(image.symbols)))
    for sym, scope, addr in image.symbols:
        out.append(name(sym))
        out.append(struct.pack("<BQ", scope.value, addr))
    return b"".join(out)


def read_image(data: bytes) -> Image:
    if data[:4] != IMAGE_MAGIC:
        raise ValueError("not a SIMG image")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != IMAGE_VERSION:
        raise ValueError(f"unsupported image version {version}")
    uuid = data[8:24]
    text_base, text_size = struct.unpack_from("<QI", data, 24)
    pos = 36

    def name() -> str:
        nonlocal pos
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        s = data[pos:pos + n].decode("utf-8")
        pos += n
        return s

    (n_entries,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = {}
    for _ in range(n_entries):
        sym = name()
        (addr,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries[sym] = addr
    text = data[pos:pos + text_size]
    pos += text_size
    (n_atoms,) = struct.unpack_from("<I", data, pos)
    pos += 4
    atoms = []
    for _ in range(n_atoms):
        nm = name()
        addr, wc = struct.unpack_from("<QI", data, pos)
        pos += 12
        atoms.append(LayoutAtom(nm, addr, wc))
    (n_syms,) = struct.unpack_from("<I", data, pos)
    pos += 4
    syms = []
    for _ in range(n_syms):
        nm = name()
        scope_v, addr = struct.unpack_from("<BQ", data, pos)
        pos += 9
        syms.append((nm, Scope(scope_v), addr))
    return Image(uuid, text_base, text, entries, atoms, syms)
