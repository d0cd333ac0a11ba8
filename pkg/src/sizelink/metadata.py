"""Index maps and metadata rewriting.

Every transforming pass records, per atom, where each original instruction
went: still in the atom at a (possibly shifted) index, moved into a shared
outlined atom, or replaced by redirection logic. Those maps drive branch
re-encoding, exception-table rewriting, the auxiliary debug file, and the
final address-to-line debug map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .isa import BRANCH_KINDS, Kind, decode, encode, retarget
from .objfmt import DebugLine, EhEntry, FixupKind, FunctionAtom, ObjectFile

__all__ = [
    "InPlace", "Outlined", "Replaced", "Disposition", "IndexMap",
    "VisibleIndexMoved", "UuidMismatch", "DanglingSymbol",
    "identity_map", "compose", "remap_branches", "rewrite_eh",
    "AuxRecord", "write_aux", "read_aux",
    "LayoutAtom", "DebugMapEntry", "debug_merge", "render_debug_map",
    "unique_atom_names",
    "OUTLINED_SHARED", "UNKNOWN_LINE",
]

AUX_MAGIC = b"SAUX"

OUTLINED_SHARED = "<outlined-shared>"
UNKNOWN_LINE = "<unknown>"


class VisibleIndexMoved(ValueError):
    """A branch-target or EH index was not INPLACE after a pass."""


class UuidMismatch(ValueError):
    """Aux file and image come from different link invocations."""


class DanglingSymbol(KeyError):
    """Aux file references an atom unknown to the inputs and image."""


@dataclass(frozen=True)
class InPlace:
    new_index: int


@dataclass(frozen=True)
class Outlined:
    symbol: str
    index: int


@dataclass(frozen=True)
class Replaced:
    new_index: int


Disposition = InPlace | Outlined | Replaced


@dataclass
class IndexMap:
    """Total mapping from original instruction indices to dispositions."""

    dispositions: list[Disposition]
    new_count: int

    def is_identity(self) -> bool:
        return all(isinstance(d, InPlace) and d.new_index == i
                   for i, d in enumerate(self.dispositions))

    def image(self, old_index: int) -> Disposition:
        return self.dispositions[old_index]


def identity_map(count: int) -> IndexMap:
    return IndexMap([InPlace(i) for i in range(count)], count)


def compose(first: IndexMap, second: IndexMap) -> IndexMap:
    """Apply ``second`` after ``first``; non-INPLACE dispositions are final."""
    out: list[Disposition] = []
    for d in first.dispositions:
        if isinstance(d, InPlace):
            out.append(second.dispositions[d.new_index])
        else:
            out.append(d)
    return IndexMap(out, second.new_count)


_SYMBOLIC_FIXUPS = (FixupKind.CALL26, FixupKind.BRANCH26, FixupKind.ADR21,
                    FixupKind.ADRP21_PAGE)


def remap_branches(atom: FunctionAtom, imap: IndexMap) -> FunctionAtom:
    """Re-encode surviving encoded branches (and in-atom adr) of a rewritten
    atom so they land on their targets' INPLACE images.

    ``atom`` holds the post-pass instruction stream; ``imap`` maps original
    indices onto it. Raises FieldOverflow if a new offset does not fit and
    VisibleIndexMoved if a target is no longer INPLACE.
    """
    new_to_old: dict[int, int] = {}
    for old, d in enumerate(imap.dispositions):
        if isinstance(d, InPlace):
            new_to_old[d.new_index] = old
    fixup_indices = {fx.instruction_index for fx in atom.fixups
                     if fx.kind in _SYMBOLIC_FIXUPS}

    words = list(atom.words)
    old_count = len(imap.dispositions)
    for n, w in enumerate(words):
        if n not in new_to_old or n in fixup_indices:
            continue
        inst = decode(w)
        if inst.kind in BRANCH_KINDS:
            pass
        elif inst.kind is Kind.ADR and inst.imm % 4 == 0:
            if not 0 <= new_to_old[n] + inst.imm // 4 < old_count:
                continue
        else:
            continue
        old = new_to_old[n]
        target = old + inst.imm // 4
        if not 0 <= target < old_count:
            continue
        image = imap.dispositions[target]
        if not isinstance(image, InPlace):
            raise VisibleIndexMoved(
                f"atom {atom.name!r}: branch target {target} moved to {image}")
        new_offset = (image.new_index - n) * 4
        if new_offset != inst.imm:
            if inst.kind is Kind.ADR:
                words[n] = encode(replace(inst, imm=new_offset))
            else:
                words[n] = retarget(inst, new_offset).raw
    atom.words = words
    return atom


def rewrite_eh(entries: list[EhEntry], imap: IndexMap) -> list[EhEntry]:
    """Map EH indices through the pass; entry order and action ids preserved."""
    def image(idx: int, what: str) -> int:
        d = imap.dispositions[idx]
        if not isinstance(d, InPlace):
            raise VisibleIndexMoved(f"EH {what} index {idx} moved to {d}")
        return d.new_index

    out = []
    for eh in entries:
        lp = None if eh.landing_pad_index is None else \
            image(eh.landing_pad_index, "landing-pad")
        out.append(EhEntry(image(eh.start_index, "start"),
                           image(eh.end_index - 1, "end") + 1,
                           lp, eh.action_id))
    return out


# ---------------------------------------------------------------------------
# auxiliary debug file

@dataclass
class AuxRecord:
    """How one atom was modified, keyed by its program-unique name."""

    atom: str
    imap: IndexMap


_TAG_INPLACE, _TAG_OUTLINED, _TAG_REPLACED = 0, 1, 2


def write_aux(link_uuid: bytes, records: list[AuxRecord]) -> bytes:
    """Serialize: magic, 16-byte link UUID, record count, records
    (name ref + disposition triples), then the referenced-name table."""
    assert len(link_uuid) == 16
    names: list[str] = []
    name_ref: dict[str, int] = {}

    def ref(name: str) -> int:
        if name not in name_ref:
            name_ref[name] = len(names)
            names.append(name)
        return name_ref[name]

    body: list[bytes] = []
    for rec in records:
        raw = rec.atom.encode("utf-8")
        body.append(struct.pack("<I", len(raw)))
        body.append(raw)
        body.append(struct.pack("<II", rec.imap.new_count,
                                len(rec.imap.dispositions)))
        for old, d in enumerate(rec.imap.dispositions):
            if isinstance(d, InPlace):
                body.append(struct.pack("<IBII", old, _TAG_INPLACE,
                                        d.new_index, 0))
            elif isinstance(d, Outlined):
                body.append(struct.pack("<IBII", old, _TAG_OUTLINED,
                                        ref(d.symbol), d.index))
            else:
                body.append(struct.pack("<IBII", old, _TAG_REPLACED,
                                        d.new_index, 0))
    tail: list[bytes] = [struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        tail.append(struct.pack("<I", len(raw)))
        tail.append(raw)
    return (AUX_MAGIC + link_uuid + struct.pack("<I", len(records))
            + b"".join(body) + b"".join(tail))


def read_aux(data: bytes) -> tuple[bytes, list[AuxRecord]]:
    if data[:4] != AUX_MAGIC:
        raise ValueError("not an aux debug file")
    link_uuid = data[4:20]
    pos = 20
    (nrec,) = struct.unpack_from("<I", data, pos)
    pos += 4
    raw_records: list[tuple[str, int, list[tuple[int, int, int, int]]]] = []
    for _ in range(nrec):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        new_count, ntrip = struct.unpack_from("<II", data, pos)
        pos += 8
        triples = []
        for _ in range(ntrip):
            triples.append(struct.unpack_from("<IBII", data, pos))
            pos += 13
        raw_records.append((name, new_count, triples))
    (nnames,) = struct.unpack_from("<I", data, pos)
    pos += 4
    names = []
    for _ in range(nnames):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        names.append(data[pos:pos + nlen].decode("utf-8"))
        pos += nlen

    records = []
    for name, new_count, triples in raw_records:
        disps: list[Disposition] = [InPlace(0)] * len(triples)
        for old, tag, a, b in triples:
            if tag == _TAG_INPLACE:
                disps[old] = InPlace(a)
            elif tag == _TAG_OUTLINED:
                disps[old] = Outlined(names[a], b)
            elif tag == _TAG_REPLACED:
                disps[old] = Replaced(a)
            else:
                raise ValueError(f"bad disposition tag {tag}")
        records.append(AuxRecord(name, IndexMap(disps, new_count)))
    return link_uuid, records


# ---------------------------------------------------------------------------
# debug map merge

@dataclass(frozen=True)
class LayoutAtom:
    name: str
    address: int
    word_count: int


@dataclass(frozen=True)
class DebugMapEntry:
    address: int
    file_id: int | None    # None for marker entries
    line: int | None
    marker: str | None = None


def unique_atom_names(files: list[ObjectFile]) -> dict[tuple[int, int], str]:
    """Program-unique atom names: plain where globally unique, otherwise
    qualified as name#<file>.<atom>. Deterministic given input order."""
    counts: dict[str, int] = {}
    for f in files:
        for atom in f.atoms:
            counts[atom.name] = counts.get(atom.name, 0) + 1
    out: dict[tuple[int, int], str] = {}
    for fi, f in enumerate(files):
        for ai, atom in enumerate(f.atoms):
            if counts[atom.name] == 1:
                out[(fi, ai)] = atom.name
            else:
                out[(fi, ai)] = f"{atom.name}#{fi}.{ai}"
    return out


def _line_lookup(rows: list[DebugLine]):
    """Line row in effect at an index (last row at or before it), DWARF-style."""
    indices = [r.instruction_index for r in rows]

    def lookup(idx: int) -> tuple[int, int] | None:
        from bisect import bisect_right
        k = bisect_right(indices, idx) - 1
        if k < 0:
            return None
        return rows[k].file_id, rows[k].line
    return lookup


def debug_merge(input_files: list[ObjectFile], aux_uuid: bytes,
                records: list[AuxRecord], image_uuid: bytes,
                layout: list[LayoutAtom]) -> list[DebugMapEntry]:
    """Build the final address->line map from pre-link debug lines, the aux
    modification records, and the final layout.

    Policies: surviving instructions keep their line; redirection residue
    inherits the first outlined original's line; outlined atoms carry the
    first contributing callsite's lines; synthesized instructions with no
    contributor are marked <outlined-shared>.
    """
    if aux_uuid != image_uuid:
        raise UuidMismatch(
            f"aux uuid {aux_uuid.hex()} != image uuid {image_uuid.hex()}")

    unames = unique_atom_names(input_files)
    input_rows: dict[str, list[DebugLine]] = {}
    input_counts: dict[str, int] = {}
    for (fi, ai), uname in unames.items():
        atom = input_files[fi].atoms[ai]
        input_rows[uname] = atom.debug_lines
        input_counts[uname] = len(atom.words)

    layout_names = {la.name for la in layout}
    record_by_atom: dict[str, AuxRecord] = {}
    for rec in records:
        if rec.atom not in input_rows and rec.atom not in layout_names:
            raise DanglingSymbol(f"aux record for unknown atom {rec.atom!r}")
        record_by_atom[rec.atom] = rec

    # contributors[target atom][body index] -> (source atom, old index),
    # first contribution wins (record order, then old-index order).
    contributors: dict[str, dict[int, tuple[str, int]]] = {}
    for rec in records:
        for old, d in enumerate(rec.imap.dispositions):
            if isinstance(d, Outlined):
                if d.symbol not in input_rows and d.symbol not in layout_names:
                    raise DanglingSymbol(
                        f"aux record outlines into unknown atom {d.symbol!r}")
                slot = contributors.setdefault(d.symbol, {})
                slot.setdefault(d.index, (rec.atom, old))

    # original (pre-modification) per-index line entries, resolved in layout
    # order so created atoms can draw on earlier contributors
    orig_entries: dict[str, list[tuple[int, int] | None]] = {}

    def original_entries(name: str) -> list[tuple[int, int] | None]:
        if name in orig_entries:
            return orig_entries[name]
        if name in input_rows:
            lookup = _line_lookup(input_rows[name])
            out = [lookup(i) for i in range(input_counts[name])]
        else:
            rec = record_by_atom.get(name)
            count = rec.imap.new_count if rec is not None else \
                next(la.word_count for la in layout if la.name == name)
            # creation-time body count: for created atoms later modified,
            # the record's dispositions cover the creation-time indices
            if rec is not None:
                count = len(rec.imap.dispositions)
            out = []
            for j in range(count):
                contrib = contributors.get(name, {}).get(j)
                if contrib is None:
                    out.append(None)
                else:
                    src, old = contrib
                    src_entries = original_entries(src)
                    out.append(src_entries[old] if old < len(src_entries) else None)
            orig_entries[name] = out
            return out
        orig_entries[name] = out
        return out

    entries: list[DebugMapEntry] = []
    for la in layout:
        created = la.name not in input_rows
        rec = record_by_atom.get(la.name)
        base = original_entries(la.name)
        marker_default = OUTLINED_SHARED if created else UNKNOWN_LINE
        if rec is None:
            per_index = [base[j] if j < len(base) else None
                         for j in range(la.word_count)]
        else:
            per_index = _apply_record(base, rec.imap, la.word_count)
        for j, ent in enumerate(per_index):
            addr = la.address + 4 * j
            if ent is None:
                entries.append(DebugMapEntry(addr, None, None, marker_default))
            else:
                entries.append(DebugMapEntry(addr, ent[0], ent[1]))
    return entries


def _apply_record(base: list[tuple[int, int] | None], imap: IndexMap,
                  new_count: int) -> list[tuple[int, int] | None]:
    out: list[tuple[int, int] | None] = [None] * new_count
    covered = [False] * new_count
    for old, d in enumerate(imap.dispositions):
        if isinstance(d, InPlace):
            out[d.new_index] = base[old] if old < len(base) else None
            covered[d.new_index] = True
        elif isinstance(d, Replaced):
            if not covered[d.new_index]:
                out[d.new_index] = base[old] if old < len(base) else None
                covered[d.new_index] = True
    # residue gap-fill: each uncovered run inherits the first outlined
    # original that fell between its surviving neighbours
    pending: tuple[int, int] | None = None
    pending_set = False
    cursor = 0
    for old, d in enumerate(imap.dispositions):
        if isinstance(d, Outlined):
            if not pending_set:
                pending = base[old] if old < len(base) else None
                pending_set = True
        elif isinstance(d, (InPlace, Replaced)):
            pos = d.new_index
            for j in range(cursor, min(pos, new_count)):
                if not covered[j]:
                    out[j] = pending
                    covered[j] = True
            cursor = max(cursor, pos + 1)
            pending = None
            pending_set = False
    for j in range(cursor, new_count):
        if not covered[j]:
            out[j] = pending
            covered[j] = True
    return out


def render_debug_map(entries: list[DebugMapEntry]) -> str:
    """Text form: 'hexaddr file:line' per line, sorted by address."""
    lines = []
    for e in sorted(entries, key=lambda e: e.address):
        if e.marker is not None:
            lines.append(f"0x{e.address:x} {e.marker}")
        else:
            lines.append(f"0x{e.address:x} {e.file_id}:{e.line}")
    return "\n".join(lines) + "\n"
