"""Frame-code outlining: detect canonical prolog/epilog sequences, normalize
stack offsets so functions differing only in locals size share helpers, and
extract callee-save/restore bodies into shared LOCAL atoms.

The prolog helper is entered with the original return address parked in x16
(dead at function entry per the ABI), stores x16 where x30 would have gone,
and returns via the BL-written x30. Epilog helpers are entered by a tail
branch; their terminal RET returns through the restored x30 straight to the
original caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analysis import MalformedBranch, compute_visibility
from .isa import AddrMode, FieldOverflow, Instruction, Kind, decode, encode, registers
from .metadata import (
    IndexMap, InPlace, Outlined, compose, identity_map, remap_branches,
    rewrite_eh,
)
from .objfmt import Fixup, FixupKind, FunctionAtom

__all__ = [
    "FrameShape", "DetectedFrames", "RedZoneViolation",
    "detect_frames", "normalize", "outline_frames", "FrameResult",
]

RED_ZONE_BYTES = 128
SCRATCH_REG = 16   # carries the return address into the prolog helper


class RedZoneViolation(ValueError):
    """Normalization would store below the prevailing SP beyond the red zone."""


@dataclass(frozen=True)
class FrameShape:
    pairs: tuple[tuple[int, int], ...]   # (rt, rt2) in store order
    callee_save_bytes: int               # C == 16 * len(pairs)
    local_bytes: int                     # L; C + L == prolog SP decrement
    sets_frame_pointer: bool

    @property
    def total(self) -> int:
        return self.callee_save_bytes + self.local_bytes


@dataclass(frozen=True)
class Span:
    start: int
    end: int                             # exclusive

    def indices(self) -> range:
        return range(self.start, self.end)


@dataclass
class DetectedFrames:
    shape: FrameShape
    prolog: Span
    prolog_extras: list[int]             # interleaved non-frame stores
    epilogs: list[Span]                  # trailing epilog last


def _is_sub_sp(inst: Instruction) -> bool:
    return (inst.kind is Kind.SUB_IMM and inst.rd == 31 and inst.rn == 31
            and inst.shift == 0)


def _is_add_sp(inst: Instruction) -> bool:
    return (inst.kind is Kind.ADD_IMM and inst.rd == 31 and inst.rn == 31
            and inst.shift == 0)


def _is_frame_stp(inst: Instruction) -> bool:
    return (inst.kind is Kind.STP and inst.mode is AddrMode.OFFSET
            and inst.rn == 31)


def _is_extra_store(inst: Instruction) -> bool:
    return (inst.kind in (Kind.STR_IMM, Kind.STRB) and inst.rn == 31) or \
        (inst.kind is Kind.STP and inst.mode is AddrMode.OFFSET and inst.rn == 31)


def detect_frames(atom: FunctionAtom) -> DetectedFrames | None:
    """Recognize the canonical prolog at the start and epilog(s) ending in RET.

    Prolog: SUB sp,sp,#(C+L); frame STPs at ascending 16-stride offsets
    L..C+L-16 (other sp-based stores may interleave); optional
    ADD x29,sp,#(C+L-16). Epilog: the LDP mirror, ADD sp,sp,#(C+L), RET.
    Returns None unless the atom opens and closes with the pattern.
    """
    words = atom.words
    n = len(words)
    if n < 4:
        return None
    insts = [decode(w) for w in words]
    first = insts[0]
    if not _is_sub_sp(first) or first.imm <= 0 or first.imm % 16:
        return None
    total = first.imm

    # the store run: frame STPs plus possibly interleaved plain stores
    run: list[int] = []
    i = 1
    while i < n and (_is_frame_stp(insts[i]) or _is_extra_store(insts[i])):
        run.append(i)
        i += 1
    # the frame chain is the backwards 16-stride STP run anchored at total-16
    candidates = [j for j in run if _is_frame_stp(insts[j])]
    chain: list[int] = []
    expect = total - 16
    for j in reversed(candidates):
        if insts[j].imm == expect:
            chain.append(j)
            expect -= 16
    chain.reverse()
    if not chain or insts[chain[-1]].imm != total - 16:
        return None
    pairs = [(insts[j].rd, insts[j].rm) for j in chain]
    offsets = [insts[j].imm for j in chain]
    extras = [j for j in run if j not in set(chain)]
    local_bytes = offsets[0]
    callee_save = total - local_bytes
    if callee_save != 16 * len(pairs):
        return None

    sets_fp = False
    if i < n:
        inst = insts[i]
        if (inst.kind is Kind.ADD_IMM and inst.rd == 29 and inst.rn == 31
                and inst.shift == 0 and inst.imm == total - 16):
            sets_fp = True
            i += 1
    prolog = Span(0, i)
    shape = FrameShape(tuple(pairs), callee_save, local_bytes, sets_fp)

    frame_slots = {(p, o) for p, o in zip(pairs, offsets)}
    epilogs: list[Span] = []
    for r in range(prolog.end, n):
        if insts[r].kind is not Kind.RET or insts[r].rn != 30:
            continue
        span = _match_epilog(insts, r, total, frame_slots, prolog.end)
        if span is not None:
            epilogs.append(span)
    if not epilogs or epilogs[-1].end != n:
        return None
    for a, b in zip(epilogs, epilogs[1:]):
        if a.end > b.start:
            return None
    return DetectedFrames(shape, prolog, extras, epilogs)


def _match_epilog(insts, ret_index: int, total: int, frame_slots: set,
                  min_start: int) -> Span | None:
    i = ret_index - 1
    if i < min_start or not _is_add_sp(insts[i]) or insts[i].imm != total:
        return None
    seen: set = set()
    j = i - 1
    while j >= min_start:
        inst = insts[j]
        if (inst.kind is Kind.LDP and inst.mode is AddrMode.OFFSET
                and inst.rn == 31 and ((inst.rd, inst.rm), inst.imm) not in seen
                and ((inst.rd, inst.rm), inst.imm) in frame_slots):
            seen.add(((inst.rd, inst.rm), inst.imm))
            j -= 1
        else:
            break
    if seen != frame_slots:
        return None
    return Span(j + 1, ret_index + 1)


# ---------------------------------------------------------------------------
# normalization

def normalize(atom: FunctionAtom,
              frames: DetectedFrames) -> tuple[DetectedFrames, IndexMap]:
    """Split the merged SP adjustment: helpers-shareable callee-save part
    first, locals adjustment moved to the span end, offsets rebased.

    Returns the re-detected frames plus the index-map fragment for the
    shifted instructions. Raises RedZoneViolation if a rebased interleaved
    store would land more than 128 bytes below the prevailing SP, and
    ValueError when a rebased offset is unencodable or aliases the
    callee-save slots.
    """
    shape = frames.shape
    L = shape.local_bytes
    if L == 0 and not frames.prolog_extras:
        return frames, identity_map(len(atom.words))
    C = shape.callee_save_bytes
    words = list(atom.words)
    insts = [decode(w) for w in words]

    new_prolog: list[int] = []
    for i in frames.prolog.indices():
        inst = insts[i]
        if i == 0:
            new_prolog.append(encode(Instruction(0, Kind.SUB_IMM, rd=31, rn=31,
                                                 imm=C)))
        elif i in frames.prolog_extras:
            adjusted = inst.imm - L
            size = {Kind.STRB: 1, Kind.STR_IMM: 8, Kind.STP: 16}[inst.kind]
            if not (inst.imm + size <= L or inst.imm >= shape.total):
                raise ValueError(
                    f"interleaved store at [sp, #{inst.imm}] aliases the "
                    f"callee-save area")
            if adjusted < -RED_ZONE_BYTES:
                raise RedZoneViolation(
                    f"store rebased to [sp, #{adjusted}] exceeds the "
                    f"{RED_ZONE_BYTES}-byte red zone")
            try:
                new_prolog.append(encode(Instruction(
                    0, inst.kind, rd=inst.rd, rn=inst.rn, rm=inst.rm,
                    imm=adjusted, mode=inst.mode)))
            except FieldOverflow as exc:
                raise ValueError(f"rebased store unencodable: {exc}") from None
        elif _is_frame_stp(inst):
            new_prolog.append(encode(Instruction(
                0, Kind.STP, rd=inst.rd, rn=31, rm=inst.rm, imm=inst.imm - L)))
        else:  # ADD x29
            new_prolog.append(encode(Instruction(0, Kind.ADD_IMM, rd=29, rn=31,
                                                 imm=C - 16)))
    if L:
        new_prolog.append(encode(Instruction(0, Kind.SUB_IMM, rd=31, rn=31,
                                             imm=L)))

    pieces: list[tuple[Span, list[int]]] = [(frames.prolog, new_prolog)]
    for span in frames.epilogs:
        new_ep: list[int] = []
        if L:
            new_ep.append(encode(Instruction(0, Kind.ADD_IMM, rd=31, rn=31,
                                             imm=L)))
        for i in span.indices():
            inst = insts[i]
            if inst.kind is Kind.LDP:
                new_ep.append(encode(Instruction(
                    0, Kind.LDP, rd=inst.rd, rn=31, rm=inst.rm,
                    imm=inst.imm - L)))
            elif _is_add_sp(inst):
                new_ep.append(encode(Instruction(0, Kind.ADD_IMM, rd=31, rn=31,
                                                 imm=C)))
            else:  # RET
                new_ep.append(inst.raw)
        pieces.append((span, new_ep))

    # splice, building the index map for branch/EH/debug rewriting; span
    # instructions keep their order, with the split SUB appended (prolog)
    # or lead ADD prepended (epilogs)
    visible = compute_visibility(atom)
    for span, _rep in pieces:
        hit = visible.intersection(span.indices())
        if hit:
            raise ValueError(
                f"frame span [{span.start},{span.end}) contains visible "
                f"instruction(s) {sorted(hit)}")
    new_words: list[int] = []
    dispositions: list = []
    piece_iter = iter(pieces)
    piece = next(piece_iter, None)
    i = 0
    n = len(words)
    shift_fx: dict[int, int] = {}
    while i < n:
        if piece is not None and i == piece[0].start:
            span, replacement = piece
            base = len(new_words)
            lead = 0 if span.start == 0 else \
                len(replacement) - (span.end - span.start)
            for off, old in enumerate(span.indices()):
                new_index = base + lead + off
                dispositions.append(InPlace(new_index))
                shift_fx[old] = new_index
            new_words.extend(replacement)
            i = span.end
            piece = next(piece_iter, None)
            continue
        dispositions.append(InPlace(len(new_words)))
        shift_fx[i] = len(new_words)
        new_words.append(words[i])
        i += 1

    atom.words = new_words
    atom.fixups = sorted(
        (Fixup(shift_fx[fx.instruction_index], fx.kind, fx.target, fx.addend,
               fx.length) for fx in atom.fixups),
        key=lambda f: (f.instruction_index, f.kind.value))
    imap = IndexMap(dispositions, len(new_words))
    remap_branches(atom, imap)
    atom.eh_entries = rewrite_eh(atom.eh_entries, imap)
    frames2 = detect_frames(atom)
    assert frames2 is not None, "normalization lost the frame pattern"
    return frames2, imap


# ---------------------------------------------------------------------------
# the pass

@dataclass
class FrameResult:
    new_atoms: list[FunctionAtom] = field(default_factory=list)
    index_maps: dict[int, IndexMap] = field(default_factory=dict)
    bytes_saved: int = 0
    sites_rewritten: int = 0
    shapes_outlined: int = 0
    red_zone_skips: int = 0


def _pair_signature(pairs: tuple[tuple[int, int], ...], fp: bool) -> str:
    sig = "_".join(f"x{a}x{b}" for a, b in pairs)
    return sig + ("_fp" if fp else "")


def _body_blocks(n: int, frames: DetectedFrames) -> list[int]:
    spans = [frames.prolog] + frames.epilogs
    in_span = [False] * n
    for sp in spans:
        for i in sp.indices():
            in_span[i] = True
    return [i for i in range(n) if not in_span[i]]


def _frame_candidate_ok(atom: FunctionAtom, frames: DetectedFrames) -> bool:
    # x30 must live in the saved pairs, or the helper BL would clobber the
    # only copy of the caller's return address
    if not any(30 in pair for pair in frames.shape.pairs):
        return False
    try:
        visible = compute_visibility(atom)
    except MalformedBranch:
        return False
    spans = [frames.prolog] + frames.epilogs
    covered: set[int] = set()
    for eh in atom.eh_entries:
        covered.update(range(eh.start_index, eh.end_index))
    for sp in spans:
        idx = set(sp.indices())
        if idx & visible or idx & covered:
            return False
    # linear scratch/return-address liveness over the body
    insts = [decode(w) for w in atom.words]
    wrote16 = wrote30 = False
    for i in _body_blocks(len(atom.words), frames):
        use = registers(insts[i])
        if SCRATCH_REG in use.reads and not wrote16:
            return False
        if 30 in use.reads and not wrote30:
            return False
        if SCRATCH_REG in use.writes:
            wrote16 = True
        if 30 in use.writes:
            wrote30 = True
    return True


def _copy_atom(atom: FunctionAtom) -> FunctionAtom:
    return FunctionAtom(atom.name, list(atom.words), list(atom.fixups),
                        list(atom.eh_entries), list(atom.debug_lines),
                        has_data_in_code=atom.has_data_in_code)


def _save_helper_words(shape: FrameShape) -> list[int]:
    C = shape.callee_save_bytes
    words = [encode(Instruction(0, Kind.SUB_IMM, rd=31, rn=31, imm=C))]
    for m, (a, b) in enumerate(shape.pairs):
        rt = SCRATCH_REG if a == 30 else a
        rt2 = SCRATCH_REG if b == 30 else b
        words.append(encode(Instruction(0, Kind.STP, rd=rt, rn=31, rm=rt2,
                                        imm=16 * m)))
    if shape.sets_frame_pointer:
        words.append(encode(Instruction(0, Kind.ADD_IMM, rd=29, rn=31,
                                        imm=C - 16)))
    words.append(encode(Instruction(0, Kind.RET, rn=30)))
    return words


def _restore_helper_words(pairs: tuple[tuple[int, int], ...]) -> list[int]:
    C = 16 * len(pairs)
    words = [encode(Instruction(0, Kind.LDP, rd=a, rn=31, rm=b, imm=16 * m))
             for m, (a, b) in enumerate(pairs)]
    words.append(encode(Instruction(0, Kind.ADD_IMM, rd=31, rn=31, imm=C)))
    words.append(encode(Instruction(0, Kind.RET, rn=30)))
    return words


_MOV_X16_X30 = 0xAA1E03F0  # orr x16, xzr, x30


def outline_frames(atoms: list[FunctionAtom],
                   taken_names: set[str] | None = None) -> FrameResult:
    """Group frame shapes, normalize members, and share save/restore helpers.

    Unprofitable shapes (including the normalization's extra instruction) are
    left untouched; members whose normalization violates the red zone are
    skipped and counted.
    """
    result = FrameResult()
    taken = taken_names or set()

    candidates: list[tuple[int, DetectedFrames]] = []
    for idx, atom in enumerate(atoms):
        if atom.has_data_in_code:
            continue
        frames = detect_frames(atom)
        if frames is None or not _frame_candidate_ok(atom, frames):
            continue
        candidates.append((idx, frames))

    groups: dict[tuple, list[tuple[int, DetectedFrames]]] = {}
    for idx, frames in candidates:
        key = (frames.shape.pairs, frames.shape.sets_frame_pointer)
        groups.setdefault(key, []).append((idx, frames))

    save_helpers: dict[tuple, str] = {}
    restore_helpers: dict[tuple, str] = {}
    helper_atoms: dict[str, FunctionAtom] = {}
    helper_uses: dict[str, int] = {}

    def helper_name(base: str) -> str:
        name = base
        while name in taken:
            name += "_"
        taken.add(name)
        return name

    bytes_before = sum(a.size_bytes() for a in atoms)

    for key, members in groups.items():
        pairs, fp = key
        k = len(pairs)
        # normalize copies first so red-zone skips drop out before costing;
        # profitable groups then adopt the normalized copies wholesale
        viable: list[tuple[int, DetectedFrames, FunctionAtom, DetectedFrames,
                           IndexMap]] = []
        for idx, frames in members:
            copy = _copy_atom(atoms[idx])
            try:
                norm_frames, norm_map = normalize(copy, frames)
            except RedZoneViolation:
                result.red_zone_skips += 1
                continue
            except ValueError:
                continue
            viable.append((idx, frames, copy, norm_frames, norm_map))
        if not viable:
            continue
        saved_words = 0
        for idx, frames, _copy, _nf, _nm in viable:
            has_l = frames.shape.local_bytes > 0
            saved_words += (1 + k + fp) - (2 + has_l)
            saved_words += len(frames.epilogs) * ((k + 2) - (1 + has_l))
        saved_words -= (k + 2 + fp) + (k + 2)
        if saved_words <= 0:
            continue

        if key not in save_helpers:
            save_helpers[key] = helper_name(f"__frame_save_{_pair_signature(pairs, fp)}")
        if pairs not in restore_helpers:
            restore_helpers[pairs] = helper_name(
                f"__frame_restore_{_pair_signature(pairs, False)}")
        save_name = save_helpers[key]
        restore_name = restore_helpers[pairs]
        if save_name not in helper_atoms:
            shape0 = viable[0][3].shape
            helper_atoms[save_name] = FunctionAtom(
                save_name, _save_helper_words(shape0))
            helper_uses[save_name] = 0
            result.new_atoms.append(helper_atoms[save_name])
        if restore_name not in helper_atoms:
            helper_atoms[restore_name] = FunctionAtom(
                restore_name, _restore_helper_words(pairs))
            helper_uses[restore_name] = 0
            result.new_atoms.append(helper_atoms[restore_name])

        for idx, _frames, normalized, norm_frames, norm_map in viable:
            try:
                imap = _rewrite_frame_sites(normalized, norm_frames,
                                            save_name, restore_name)
            except (ValueError, FieldOverflow):
                continue
            atoms[idx] = normalized
            result.index_maps[idx] = compose(norm_map, imap)
            result.sites_rewritten += 1 + len(norm_frames.epilogs)
            helper_uses[save_name] += 1
            helper_uses[restore_name] += 1
        result.shapes_outlined += 1

    # drop helpers every user of which rolled back
    for name, uses in helper_uses.items():
        if uses == 0:
            result.new_atoms.remove(helper_atoms[name])

    bytes_after = (sum(a.size_bytes() for a in atoms)
                   + sum(a.size_bytes() for a in result.new_atoms))
    result.bytes_saved = bytes_before - bytes_after
    return result


def _rewrite_frame_sites(atom: FunctionAtom, frames: DetectedFrames,
                         save_name: str, restore_name: str) -> IndexMap:
    """Replace the (normalized, L folded out of the spans) prolog with
    MOV x16,x30 + BL and each epilog with a tail B."""
    shape = frames.shape
    assert shape.local_bytes == 0, "sites must be rewritten post-normalization"
    k = len(shape.pairs)
    offset_to_body = {16 * m: m for m in range(k)}

    insts = [decode(w) for w in atom.words]
    fixups_at: dict[int, list[Fixup]] = {}
    for fx in atom.fixups:
        fixups_at.setdefault(fx.instruction_index, []).append(fx)

    new_words: list[int] = []
    new_fixups: list[Fixup] = []
    dispositions: list = [None] * len(atom.words)

    spans = [( frames.prolog, True)] + [(sp, False) for sp in frames.epilogs]
    spans.sort(key=lambda t: t[0].start)
    span_iter = iter(spans)
    span_entry = next(span_iter, None)
    i = 0
    n = len(atom.words)
    while i < n:
        if span_entry is not None and i == span_entry[0].start:
            span, is_prolog = span_entry
            if is_prolog:
                pos = len(new_words)
                new_words.append(_MOV_X16_X30)
                new_words.append(0x94000000)
                new_fixups.append(Fixup(pos + 1, FixupKind.CALL26, save_name, 0))
                body_stp = 0
                for old in span.indices():
                    inst = insts[old]
                    if old == span.start:
                        dispositions[old] = Outlined(save_name, 0)
                    elif _is_frame_stp(inst) and inst.imm == 16 * body_stp:
                        body_stp += 1
                        dispositions[old] = Outlined(save_name, body_stp)
                    elif inst.kind is Kind.ADD_IMM and inst.rd == 29:
                        dispositions[old] = Outlined(save_name, k + 1)
                    else:  # interleaved store stays at the site
                        dispositions[old] = InPlace(len(new_words))
                        for fx in fixups_at.get(old, ()):
                            new_fixups.append(Fixup(len(new_words), fx.kind,
                                                    fx.target, fx.addend,
                                                    fx.length))
                        new_words.append(atom.words[old])
            else:
                pos = len(new_words)
                new_words.append(0x14000000)
                new_fixups.append(Fixup(pos, FixupKind.BRANCH26, restore_name, 0))
                for old in span.indices():
                    inst = insts[old]
                    if inst.kind is Kind.LDP:
                        dispositions[old] = Outlined(restore_name,
                                                     offset_to_body[inst.imm])
                    elif _is_add_sp(inst):
                        dispositions[old] = Outlined(restore_name, k)
                    else:  # RET
                        dispositions[old] = Outlined(restore_name, k + 1)
            i = span.end
            span_entry = next(span_iter, None)
            continue
        dispositions[i] = InPlace(len(new_words))
        for fx in fixups_at.get(i, ()):
            new_fixups.append(Fixup(len(new_words), fx.kind, fx.target,
                                    fx.addend, fx.length))
        new_words.append(atom.words[i])
        i += 1

    atom.words = new_words
    atom.fixups = sorted(new_fixups,
                         key=lambda f: (f.instruction_index, f.kind.value))
    imap = IndexMap(dispositions, len(new_words))
    remap_branches(atom, imap)
    atom.eh_entries = rewrite_eh(atom.eh_entries, imap)
    return imap
