"""Shared analyses: 64-bit function/sequence hashing, byte-wise identity
verification, instruction visibility, and data-in-code detection.

The hash folds instruction words with a prime multiplier and then adds a
string hash per fixup, so control-flow metadata lands in the value. Equal
hashes are necessary but not sufficient for identity; verify_identical is
the byte-wise check that gates every merge decision downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

from .isa import BRANCH_KINDS, Kind, decode, retarget
from .objfmt import Fixup, FixupKind, FunctionAtom

__all__ = [
    "HASH_SEED", "HASH_PRIME", "RangeError", "MalformedBranch",
    "SequenceView", "fnv1a", "string_hash",
    "hash_function", "hash_sequence", "prefix_hashes", "window_hash",
    "verify_identical", "compute_visibility",
]

MASK64 = (1 << 64) - 1
HASH_PRIME = 0x100000001B3
HASH_SEED = 0xCBF29CE484222325


class RangeError(ValueError):
    """A sequence window lies outside its atom or is empty."""


class MalformedBranch(ValueError):
    """A direct branch targets outside its atom and carries no fixup."""


def fnv1a(data: bytes) -> int:
    h = HASH_SEED
    for b in data:
        h = ((h ^ b) * HASH_PRIME) & MASK64
    return h


def string_hash(kind: str, target: str, addend: int, rel_index: int | None = None) -> int:
    """FNV-1a over 'kind:target:addend', with a leading relative index for
    sequence windows."""
    if rel_index is None:
        text = f"{kind}:{target}:{addend}"
    else:
        text = f"{rel_index}:{kind}:{target}:{addend}"
    return fnv1a(text.encode("utf-8"))


def hash_function(atom: FunctionAtom, canonical=None) -> int:
    """64-bit hash of a whole atom: word fold plus per-fixup string hashes.

    ``canonical`` optionally maps fixup target names to canonical names
    (used by ICF once symbols start aliasing).
    """
    h = HASH_SEED
    for w in atom.words:
        h = (h * HASH_PRIME + w) & MASK64
    for fx in sorted(atom.fixups, key=_fixup_sort_key):
        target = canonical(fx.target) if canonical else fx.target
        h = (h + string_hash(fx.kind.name, target, fx.addend)) & MASK64
    return h


def _fixup_sort_key(fx: Fixup):
    return (fx.instruction_index, fx.kind.value, fx.target, fx.addend)


@dataclass(frozen=True)
class SequenceView:
    """A window of ``length`` instructions starting at ``start``; a whole-atom
    view (start 0, full length) participates in function-level identity."""

    atom: FunctionAtom
    start: int
    length: int

    def __post_init__(self) -> None:
        if self.length < 1 or self.start < 0 or \
                self.start + self.length > len(self.atom.words):
            raise RangeError(
                f"window [{self.start}, {self.start + self.length}) invalid "
                f"for atom of {len(self.atom.words)} instructions")

    @property
    def end(self) -> int:
        return self.start + self.length

    def words(self) -> list[int]:
        return self.atom.words[self.start:self.end]

    def rel_fixups(self) -> list[tuple[int, FixupKind, str, int, int]]:
        out = [(fx.instruction_index - self.start, fx.kind, fx.target,
                fx.addend, fx.length)
               for fx in self.atom.fixups
               if self.start <= fx.instruction_index < self.end]
        out.sort()
        return out

    def is_whole_atom(self) -> bool:
        return self.start == 0 and self.length == len(self.atom.words)


def hash_sequence(atom: FunctionAtom, start: int, length: int) -> int:
    """Hash a window so that position-shifted copies hash equal.

    Words fold as in hash_function, except that a direct branch targeting
    inside the window is folded with a zeroed offset field followed by its
    relative target index. Fixups inside the window hash with their relative
    instruction index.
    """
    view = SequenceView(atom, start, length)
    fixup_indices = {fx.instruction_index for fx in atom.fixups
                     if fx.kind is not FixupKind.DATA_IN_CODE_RANGE}
    h = HASH_SEED
    for i in range(start, start + length):
        w = atom.words[i]
        inst = decode(w)
        if inst.kind in BRANCH_KINDS and i not in fixup_indices:
            target = i + inst.imm // 4
            if start <= target < start + length:
                h = (h * HASH_PRIME + retarget(inst, 0).raw) & MASK64
                h = (h * HASH_PRIME + (target - start)) & MASK64
                continue
        h = (h * HASH_PRIME + w) & MASK64
    for rel, kind, target, addend, _len in view.rel_fixups():
        h = (h + string_hash(kind.name, target, addend, rel_index=rel)) & MASK64
    return h


def prefix_hashes(words: list[int]) -> tuple[list[int], list[int]]:
    """Prefix word-folds and prime powers enabling O(1) window hashes."""
    n = len(words)
    pref = [HASH_SEED] * (n + 1)
    powers = [1] * (n + 1)
    h = HASH_SEED
    p = 1
    for i, w in enumerate(words):
        h = (h * HASH_PRIME + w) & MASK64
        pref[i + 1] = h
        p = (p * HASH_PRIME) & MASK64
        powers[i + 1] = p
    return pref, powers


def window_hash(pref: list[int], powers: list[int], start: int, length: int) -> int:
    """Word-fold part of hash_sequence for windows free of encoded branches.

    Equals hash_sequence's word fold whenever no direct branch in the window
    targets inside the window; the caller mixes fixup hashes in separately.
    """
    pl = powers[length]
    return (pref[start + length] - (pref[start] - HASH_SEED) * pl) & MASK64


def verify_identical(a: SequenceView, b: SequenceView, canonical=None) -> bool:
    """Byte-wise identity: equal words and equal fixups under relative
    indexing. Whole-atom views additionally compare EH tables and the
    data-in-code flag."""
    if a.length != b.length:
        return False
    if a.words() != b.words():
        return False
    fa, fb = a.rel_fixups(), b.rel_fixups()
    if canonical:
        fa = [(i, k, canonical(t), ad, ln) for i, k, t, ad, ln in fa]
        fb = [(i, k, canonical(t), ad, ln) for i, k, t, ad, ln in fb]
    if fa != fb:
        return False
    if a.is_whole_atom() and b.is_whole_atom():
        if a.atom.eh_entries != b.atom.eh_entries:
            return False
        if a.atom.has_data_in_code != b.atom.has_data_in_code:
            return False
    return True


def compute_visibility(atom: FunctionAtom) -> set[int]:
    """Indices referenced by address: direct-branch targets, in-atom adr
    targets, and EH start/end-1/landing-pad indices."""
    n = len(atom.words)
    visible: set[int] = set()
    fixup_indices = {fx.instruction_index for fx in atom.fixups
                     if fx.kind is not FixupKind.DATA_IN_CODE_RANGE}
    data_indices = _data_in_code_indices(atom)
    for i, w in enumerate(atom.words):
        if i in data_indices:
            continue
        inst = decode(w)
        if inst.kind in BRANCH_KINDS and i not in fixup_indices:
            target = i + inst.imm // 4
            if not 0 <= target < n:
                raise MalformedBranch(
                    f"atom {atom.name!r}: branch at {i} targets {target}, "
                    f"outside [0, {n})")
            visible.add(target)
        elif inst.kind is Kind.ADR and i not in fixup_indices:
            if inst.imm % 4 == 0:
                target = i + inst.imm // 4
                if 0 <= target < n:
                    visible.add(target)
    for eh in atom.eh_entries:
        visible.add(eh.start_index)
        visible.add(eh.end_index - 1)
        if eh.landing_pad_index is not None:
            visible.add(eh.landing_pad_index)
    return visible


def _data_in_code_indices(atom: FunctionAtom) -> set[int]:
    out: set[int] = set()
    for fx in atom.fixups:
        if fx.kind is FixupKind.DATA_IN_CODE_RANGE:
            out.update(range(fx.instruction_index,
                             fx.instruction_index + fx.length))
    return out
