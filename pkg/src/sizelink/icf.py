"""Safe identical code folding over laid-out atoms.

Only LOCAL-scope atoms participate. Groups are formed by equal 64-bit hash
and then byte-wise verification; the representative is the earliest atom in
layout order. SAFE mode replaces each duplicate's body with one branch to
the representative so distinct symbols keep distinct addresses; ALL mode
removes duplicates and aliases their symbols, which is smaller but breaks
function-pointer equality. Folding iterates until a fixpoint because targets
of calls may only coincide after an earlier round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .analysis import SequenceView, hash_function, verify_identical
from .metadata import IndexMap, Outlined, Replaced
from .objfmt import Fixup, FixupKind, FunctionAtom

__all__ = ["IcfMode", "FoldGroup", "FoldReport", "fold"]


class IcfMode(Enum):
    NONE = "none"
    SAFE = "safe"
    ALL = "all"


@dataclass
class FoldGroup:
    representative: str
    folded: list[str]
    mode: IcfMode


@dataclass
class FoldReport:
    groups: list[FoldGroup] = field(default_factory=list)
    bytes_saved: int = 0
    iterations: int = 0
    atoms_folded: int = 0


@dataclass
class FoldOutcome:
    report: FoldReport
    kept: list[int]                      # surviving indices, layout order
    aliases: dict[str, str]              # folded name -> representative name
    index_maps: dict[int, IndexMap]      # per folded atom index
    hash_calls: int = 0


def fold(atoms: list[FunctionAtom], local: list[bool], mode: IcfMode,
         max_iters: int = 5, hash_fn=hash_function) -> FoldOutcome:
    """Fold duplicates among ``atoms`` (parallel ``local`` flags give scope).

    Mutates SAFE-folded atoms into single-branch thunks; ALL-folded atoms are
    dropped from ``kept``. ``hash_fn`` is injectable so tests can force
    collisions and confirm that verification alone gates merging.
    """
    outcome = FoldOutcome(FoldReport(), list(range(len(atoms))), {}, {})
    if mode is IcfMode.NONE:
        return outcome
    report = outcome.report

    # already-folded thunks and removed atoms never become representatives
    folded: set[int] = set()
    removed: set[int] = set()
    aliases = outcome.aliases

    def canonical(name: str) -> str:
        while name in aliases:
            name = aliases[name]
        return name

    for iteration in range(1, max_iters + 1):
        by_hash: dict[int, list[int]] = {}
        for idx in range(len(atoms)):
            if not local[idx] or idx in folded or idx in removed:
                continue
            h = hash_fn(atoms[idx], canonical) & ((1 << 64) - 1)
            outcome.hash_calls += 1
            by_hash.setdefault(h, []).append(idx)

        any_fold = False
        for indices in by_hash.values():
            if len(indices) < 2:
                continue
            # verification partitions the hash group into identity classes
            classes: list[tuple[int, SequenceView]] = []
            members: dict[int, list[int]] = {}
            for idx in indices:
                view = SequenceView(atoms[idx], 0, len(atoms[idx].words))
                for rep_idx, rep_view in classes:
                    if verify_identical(rep_view, view, canonical):
                        members[rep_idx].append(idx)
                        break
                else:
                    classes.append((idx, view))
                    members[idx] = [idx]
            for rep_idx, dup_indices in members.items():
                if len(dup_indices) < 2:
                    continue
                rep = atoms[rep_idx]
                group = FoldGroup(rep.name, [], mode)
                for idx in dup_indices[1:]:
                    dup = atoms[idx]
                    size = dup.size_bytes()
                    if mode is IcfMode.SAFE:
                        if size <= 4:
                            continue  # a thunk would not shrink it
                        report.bytes_saved += size - 4
                        outcome.index_maps[idx] = _thunk_map(dup, rep.name)
                        dup.words = [0x14000000]
                        dup.fixups = [Fixup(0, FixupKind.BRANCH26, rep.name, 0)]
                        dup.eh_entries = []
                        dup.has_data_in_code = False
                        folded.add(idx)
                    else:
                        report.bytes_saved += size
                        outcome.index_maps[idx] = _alias_map(dup, rep.name)
                        aliases[dup.name] = rep.name
                        removed.add(idx)
                        folded.add(idx)
                    group.folded.append(dup.name)
                    report.atoms_folded += 1
                    any_fold = True
                if group.folded:
                    report.groups.append(group)
        report.iterations = iteration
        if not any_fold:
            break
    outcome.kept = [i for i in range(len(atoms)) if i not in removed]
    return outcome


def _thunk_map(dup: FunctionAtom, rep_name: str) -> IndexMap:
    disps: list = [Replaced(0)]
    disps += [Outlined(rep_name, i) for i in range(1, len(dup.words))]
    return IndexMap(disps, 1)


def _alias_map(dup: FunctionAtom, rep_name: str) -> IndexMap:
    disps: list = [Outlined(rep_name, i) for i in range(len(dup.words))]
    return IndexMap(disps, 0)
