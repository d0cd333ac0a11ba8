"""General sequence outlining: collect, select, materialize, rewrite.

Every window of min_len..max_len instructions is hashed and counted; windows
touching visible instructions, data-in-code atoms, or ineligible instructions
are skipped. Profitable repeated sequences become shared LOCAL atoms, with
callsites shrunk to a single BL (TAIL_CALL form) or an ADR/B pair whose
return jump goes through x16 (REG_RETURN form).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, auto

from . import analysis
from .analysis import (
    MASK64, compute_visibility, prefix_hashes, string_hash, window_hash,
)
from .isa import (
    CONTROL_FLOW_KINDS, FieldOverflow, Instruction, Kind, decode, encode,
    registers,
)
from .metadata import IndexMap, InPlace, Outlined, remap_branches, rewrite_eh
from .objfmt import Fixup, FixupKind, FunctionAtom

__all__ = [
    "Form", "OutlineConfig", "Callsite", "CandidateGroup", "CandidateTable",
    "OutlineDecision", "OutlineResult", "profit",
    "collect_candidates", "select_candidates", "materialize", "run_pass",
]


class Form(Enum):
    TAIL_CALL = auto()
    REG_RETURN = auto()


# scratch register carrying the return address in REG_RETURN callsites;
# reserved for linker use by the platform ABI
RETURN_REG = 16

_RESIDUE = {Form.TAIL_CALL: 1, Form.REG_RETURN: 2}


@dataclass(frozen=True)
class OutlineConfig:
    max_len: int = 12
    min_len: int = 2
    min_freq: int = 2
    min_profit: int = 0    # bytes; cost-function aggressiveness knob

    def __post_init__(self) -> None:
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")


@dataclass(frozen=True)
class Callsite:
    atom_index: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class CandidateGroup:
    """One verified candidate: byte-identical windows sharing a hash."""

    hash_value: int
    subgroup: int
    form: Form
    length: int
    words: tuple[int, ...]
    rel_fixups: tuple[tuple[int, FixupKind, str, int], ...]
    callsites: list[Callsite]


@dataclass
class CandidateTable:
    frequency: dict[int, int] = field(default_factory=dict)
    callsites: dict[int, list[Callsite]] = field(default_factory=dict)
    groups: list[CandidateGroup] = field(default_factory=list)
    windows_considered: int = 0


@dataclass
class OutlineDecision:
    group: CandidateGroup
    name: str
    accepted: list[Callsite]

    def realized_profit(self) -> int:
        return profit(self.group.form, self.group.length, len(self.accepted))


def profit(form: Form, length: int, freq: int) -> int:
    """Bytes saved: callsites shrink to the residue, one shared body is added.

    TAIL_CALL bodies keep the window length (terminal BL becomes B); the
    REG_RETURN body appends a BR x16.
    """
    if form is Form.TAIL_CALL:
        return 4 * ((length - 1) * freq - length)
    return 4 * ((length - 2) * freq - (length + 1))


# ---------------------------------------------------------------------------
# per-atom eligibility precomputation

class _AtomPrep:
    """Visibility, instruction classes, and prefix sums enabling O(1) window
    eligibility plus O(1) rolling hashes."""

    __slots__ = (
        "atom", "count", "visible", "insts", "fixup_kind_at", "pref",
        "powers", "p_vis", "p_cf", "p_x30", "p_scratch", "p_bad", "p_eh",
        "x16_live_in", "fixup_indices_sorted", "fixups_sorted", "skip_all",
        "p_pair", "p_fx", "p_block",
    )

    def __init__(self, atom: FunctionAtom) -> None:
        self.atom = atom
        n = len(atom.words)
        self.count = n
        self.skip_all = atom.has_data_in_code
        if self.skip_all:
            return
        try:
            self.visible = compute_visibility(atom)
        except analysis.MalformedBranch:
            self.skip_all = True
            return
        self.insts = [decode(w) for w in atom.words]
        self.fixup_kind_at: dict[int, FixupKind] = {}
        for fx in atom.fixups:
            if fx.kind is not FixupKind.DATA_IN_CODE_RANGE:
                self.fixup_kind_at[fx.instruction_index] = fx.kind
        self.fixups_sorted = sorted(
            (fx for fx in atom.fixups
             if fx.kind is not FixupKind.DATA_IN_CODE_RANGE),
            key=lambda f: f.instruction_index)
        self.fixup_indices_sorted = [fx.instruction_index
                                     for fx in self.fixups_sorted]
        self.pref, self.powers = prefix_hashes(atom.words)

        eh_covered = [0] * n
        for eh in atom.eh_entries:
            for i in range(eh.start_index, eh.end_index):
                eh_covered[i] = 1

        p_vis = [0] * (n + 1)
        p_cf = [0] * (n + 1)
        p_x30 = [0] * (n + 1)
        p_scratch = [0] * (n + 1)
        p_bad = [0] * (n + 1)
        p_eh = [0] * (n + 1)
        for i, inst in enumerate(self.insts):
            use = registers(inst)
            is_cf = inst.kind in CONTROL_FLOW_KINDS
            touch16_17 = bool(use.reads & _SCRATCH or use.writes & _SCRATCH)
            bad = (inst.kind is Kind.UNKNOWN
                   or self._bad_pcrel(inst, i))
            p_vis[i + 1] = p_vis[i] + (i in self.visible)
            p_cf[i + 1] = p_cf[i] + is_cf
            p_x30[i + 1] = p_x30[i] + use.touches_x30
            p_scratch[i + 1] = p_scratch[i] + (touch16_17 or use.touches_x30)
            p_bad[i + 1] = p_bad[i] + bad
            p_eh[i + 1] = p_eh[i] + eh_covered[i]
        self.p_vis, self.p_cf, self.p_x30 = p_vis, p_cf, p_x30
        self.p_scratch, self.p_bad, self.p_eh = p_scratch, p_bad, p_eh
        self.p_pair: list[int] | None = None
        # combined blocker count: a window with any visible/bad index can
        # never be a candidate for either form
        self.p_block = [v + b for v, b in zip(p_vis, p_bad)]
        # fixups at index < i, for O(1) per-window fixup slices
        p_fx = [0] * (n + 1)
        for fx in self.fixups_sorted:
            p_fx[fx.instruction_index + 1] += 1
        for i in range(n):
            p_fx[i + 1] += p_fx[i]
        self.p_fx = p_fx

        # linear scratch-register liveness: does execution from index i read
        # x16 before writing it (straight-line approximation)
        live = [False] * (n + 1)
        for i in range(n - 1, -1, -1):
            use = registers(self.insts[i])
            if RETURN_REG in use.reads:
                live[i] = True
            elif RETURN_REG in use.writes:
                live[i] = False
            else:
                live[i] = live[i + 1]
        self.x16_live_in = live

    def _bad_pcrel(self, inst: Instruction, i: int) -> bool:
        # encoded (fixup-less) adr/adrp referencing atom-relative addresses
        # cannot be moved safely
        if inst.kind in (Kind.ADR, Kind.ADRP) and i not in self.fixup_kind_at:
            return True
        return False

    def set_pair_mask(self, pair_counts: dict[int, int]) -> None:
        """Prefix sums of 'this adjacent pair repeats program-wide'."""
        psum = [0] * self.count
        acc = 0
        for i in range(self.count - 1):
            h2 = window_hash(self.pref, self.powers, i, 2)
            acc += 1 if pair_counts[h2] > 1 else 0
            psum[i + 1] = acc
        self.p_pair = psum

    def window_form(self, s: int, e: int) -> Form | None:
        if self.p_block[e] - self.p_block[s]:
            return None
        cf = self.p_cf[e] - self.p_cf[s]
        if cf == 0:
            if self.p_scratch[e] - self.p_scratch[s]:
                return None
            if self.x16_live_in[e]:
                return None
            return Form.REG_RETURN
        if cf == 1:
            last = self.insts[e - 1]
            if (last.kind is Kind.BL
                    and self.fixup_kind_at.get(e - 1) is FixupKind.CALL26
                    and self.p_x30[e - 1] - self.p_x30[s] == 0
                    and self.p_eh[e] - self.p_eh[s] == 0):
                return Form.TAIL_CALL
        return None

    def whash(self, s: int, length: int) -> int:
        h = window_hash(self.pref, self.powers, s, length)
        lo, hi = self.p_fx[s], self.p_fx[s + length]
        if lo != hi:
            for fx in self.fixups_sorted[lo:hi]:
                h = (h + string_hash(fx.kind.name, fx.target, fx.addend,
                                     rel_index=fx.instruction_index - s)) \
                    & MASK64
        return h

    def window_signature(self, s: int, length: int):
        words = tuple(self.atom.words[s:s + length])
        lo, hi = self.p_fx[s], self.p_fx[s + length]
        fixups = tuple((fx.instruction_index - s, fx.kind, fx.target, fx.addend)
                       for fx in self.fixups_sorted[lo:hi])
        return words, fixups


_SCRATCH = frozenset({16, 17})


# ---------------------------------------------------------------------------
# step 1: collection

def collect_candidates(atoms: list[FunctionAtom], config: OutlineConfig,
                       preps: list[_AtomPrep] | None = None,
                       map_fn=map) -> CandidateTable:
    """Hash every eligible window; byte-verify hash groups into candidates.

    ``map_fn`` lets callers run the per-atom scan on a worker pool; results
    merge in atom order, so output is identical for any pool size.
    """
    if preps is None:
        preps = list(map_fn(_AtomPrep, atoms))
    table = CandidateTable()
    freq = table.frequency

    # a window can only repeat if each adjacent word pair inside it repeats
    # somewhere in the program, so unique-pair positions are skipped outright
    # (only valid while the frequency threshold keeps singletons unselectable)
    if config.min_freq >= 1:
        pair_counts: dict[int, int] = {}
        for prep in preps:
            if prep.skip_all:
                continue
            pref = prep.pref
            for i in range(prep.count - 1):
                h2 = window_hash(pref, prep.powers, i, 2)
                pair_counts[h2] = pair_counts.get(h2, 0) + 1
        for prep in preps:
            if not prep.skip_all:
                prep.set_pair_mask(pair_counts)

    # pass A: raw frequencies
    per_atom_windows = list(map_fn(
        lambda pa: _atom_windows(pa[1], pa[0], config), enumerate(preps)))
    for windows in per_atom_windows:
        table.windows_considered += len(windows)
        for _cs, h, _form in windows:
            freq[h] = freq.get(h, 0) + 1

    # pass B: callsites for hashes that can clear the frequency threshold,
    # with same-hash overlaps within one atom suppressed
    min_needed = config.min_freq + 1
    raw_freq = dict(freq)
    last_end: dict[tuple[int, int], int] = {}
    forms: dict[int, Form] = {}
    for windows in per_atom_windows:
        for cs, h, form in windows:
            if raw_freq[h] < min_needed:
                continue
            key = (h, cs.atom_index)
            if cs.start < last_end.get(key, 0):
                continue
            last_end[key] = cs.end
            table.callsites.setdefault(h, []).append(cs)
            forms[h] = form

    # byte-wise verification splits colliding hash groups
    for h, sites in table.callsites.items():
        subgroups: dict[tuple, CandidateGroup] = {}
        for cs in sites:
            prep = preps[cs.atom_index]
            sig = prep.window_signature(cs.start, cs.length)
            grp = subgroups.get(sig)
            if grp is None:
                grp = CandidateGroup(h, len(subgroups), forms[h], cs.length,
                                     sig[0], sig[1], [])
                subgroups[sig] = grp
            grp.callsites.append(cs)
        table.groups.extend(subgroups.values())
        table.frequency[h] = len(sites)
    return table


def _atom_windows(prep: _AtomPrep, atom_index: int,
                  config: OutlineConfig) -> list[tuple[Callsite, int, Form]]:
    # window_form inlined with local bindings: this loop visits every window
    # of every atom and dominates link time on large corpora
    out: list[tuple[Callsite, int, Form]] = []
    if prep.skip_all or prep.count < config.min_len:
        return out
    n = prep.count
    p_pair = prep.p_pair
    p_block, p_cf = prep.p_block, prep.p_cf
    p_scratch, p_x30, p_eh = prep.p_scratch, prep.p_x30, prep.p_eh
    x16_live = prep.x16_live_in
    insts = prep.insts
    fixup_kind_at = prep.fixup_kind_at
    whash = prep.whash
    tail, reg = Form.TAIL_CALL, Form.REG_RETURN
    bl, call26 = Kind.BL, FixupKind.CALL26
    append = out.append
    for length in range(config.min_len, min(config.max_len, n) + 1):
        lm1 = length - 1
        for s in range(0, n - length + 1):
            e = s + length
            if p_pair is not None and p_pair[e - 1] - p_pair[s] != lm1:
                continue
            if p_block[e] - p_block[s]:
                continue
            cf = p_cf[e] - p_cf[s]
            if cf == 0:
                if p_scratch[e] - p_scratch[s] or x16_live[e]:
                    continue
                form = reg
            elif cf == 1:
                last = insts[e - 1]
                if not (last.kind is bl
                        and fixup_kind_at.get(e - 1) is call26
                        and p_x30[e - 1] - p_x30[s] == 0
                        and p_eh[e] - p_eh[s] == 0):
                    continue
                form = tail
            else:
                continue
            append((Callsite(atom_index, s, length), whash(s, length), form))
    return out


# ---------------------------------------------------------------------------
# step 2: selection

def select_candidates(table: CandidateTable, config: OutlineConfig,
                      name_prefix: str = "__outlined_",
                      taken_names: set[str] | None = None
                      ) -> list[OutlineDecision]:
    """Greedy acceptance in (profit desc, length desc, hash asc) order;
    callsites overlapping a claimed region are dropped and the decision is
    re-checked against the profit threshold."""
    ranked = []
    for grp in table.groups:
        if len(grp.callsites) <= config.min_freq:
            continue
        p = profit(grp.form, grp.length, len(grp.callsites))
        if p <= config.min_profit:
            continue
        ranked.append((-p, -grp.length, grp.hash_value, grp.subgroup, grp))
    ranked.sort(key=lambda t: t[:4])

    claimed: dict[int, list[tuple[int, int]]] = {}
    decisions: list[OutlineDecision] = []
    taken = taken_names or set()
    k = 0
    for _np, _nl, _h, _sg, grp in ranked:
        survivors = [cs for cs in grp.callsites
                     if not _overlaps(claimed.get(cs.atom_index, []),
                                      cs.start, cs.end)]
        if profit(grp.form, grp.length, len(survivors)) <= config.min_profit:
            continue
        name = f"{name_prefix}{k}"
        while name in taken:
            name += "_"
        taken.add(name)
        k += 1
        for cs in survivors:
            claimed.setdefault(cs.atom_index, []).append((cs.start, cs.end))
        decisions.append(OutlineDecision(grp, name, survivors))
    return decisions


def _overlaps(intervals: list[tuple[int, int]], start: int, end: int) -> bool:
    for a, b in intervals:
        if start < b and a < end:
            return True
    return False


# ---------------------------------------------------------------------------
# steps 3-4: materialization and rewriting

@dataclass
class OutlineResult:
    new_atoms: list[FunctionAtom]
    index_maps: dict[int, IndexMap]
    decisions: list[OutlineDecision]
    bytes_saved: int
    rolled_back_atoms: list[int]
    windows_considered: int = 0


def materialize(atoms: list[FunctionAtom],
                decisions: list[OutlineDecision]) -> OutlineResult:
    """Rewrite callsites, create outlined atoms, and remap metadata.

    A FieldOverflow while re-encoding an atom's surviving branches rolls that
    atom back; its callsites are dropped from their decisions.
    """
    by_atom: dict[int, list[tuple[Callsite, OutlineDecision]]] = {}
    for dec in decisions:
        for cs in dec.accepted:
            by_atom.setdefault(cs.atom_index, []).append((cs, dec))

    index_maps: dict[int, IndexMap] = {}
    rolled_back: list[int] = []
    for atom_index, sites in by_atom.items():
        sites.sort(key=lambda t: t[0].start)
        atom = atoms[atom_index]
        original_words = list(atom.words)
        original_fixups = list(atom.fixups)
        original_eh = list(atom.eh_entries)
        imap = _rewrite_atom(atom, sites)
        try:
            remap_branches(atom, imap)
            atom.eh_entries = rewrite_eh(atom.eh_entries, imap)
        except FieldOverflow:
            atom.words = original_words
            atom.fixups = original_fixups
            atom.eh_entries = original_eh
            rolled_back.append(atom_index)
            for cs, dec in sites:
                dec.accepted.remove(cs)
            continue
        index_maps[atom_index] = imap

    new_atoms = []
    saved = 0
    for dec in decisions:
        if not dec.accepted:
            continue
        new_atoms.append(_build_outlined_atom(dec))
        saved += dec.realized_profit()
    return OutlineResult(new_atoms, index_maps, decisions, saved, rolled_back)


def _rewrite_atom(atom: FunctionAtom,
                  sites: list[tuple[Callsite, OutlineDecision]]) -> IndexMap:
    fixups_at: dict[int, list[Fixup]] = {}
    for fx in atom.fixups:
        fixups_at.setdefault(fx.instruction_index, []).append(fx)

    new_words: list[int] = []
    new_fixups: list[Fixup] = []
    dispositions = [None] * len(atom.words)
    site_iter = iter(sites)
    site = next(site_iter, None)
    i = 0
    n = len(atom.words)
    while i < n:
        if site is not None and i == site[0].start:
            cs, dec = site
            pos = len(new_words)
            if dec.group.form is Form.TAIL_CALL:
                new_words.append(0x94000000)  # BL, field patched via fixup
                new_fixups.append(Fixup(pos, FixupKind.CALL26, dec.name, 0))
            else:
                new_words.append(encode(Instruction(0, Kind.ADR, rd=RETURN_REG,
                                                    imm=8)))
                new_words.append(0x14000000)  # B, field patched via fixup
                new_fixups.append(Fixup(pos + 1, FixupKind.BRANCH26, dec.name, 0))
            for rel in range(cs.length):
                dispositions[i + rel] = Outlined(dec.name, rel)
            i = cs.end
            site = next(site_iter, None)
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
    return IndexMap(dispositions, len(new_words))


def _build_outlined_atom(dec: OutlineDecision) -> FunctionAtom:
    grp = dec.group
    words = list(grp.words)
    fixups = [Fixup(rel, kind, target, addend)
              for rel, kind, target, addend in grp.rel_fixups]
    if grp.form is Form.TAIL_CALL:
        # terminal BL becomes a tail B carrying the same symbolic target
        words[-1] = 0x14000000
        fixups = [Fixup(fx.instruction_index,
                        FixupKind.BRANCH26 if fx.instruction_index == len(words) - 1
                        and fx.kind is FixupKind.CALL26 else fx.kind,
                        fx.target, fx.addend)
                  for fx in fixups]
    else:
        words.append(encode(Instruction(0, Kind.BR, rn=RETURN_REG)))
    return FunctionAtom(dec.name, words, fixups)


# ---------------------------------------------------------------------------
# whole pass

def run_pass(atoms: list[FunctionAtom], config: OutlineConfig,
             taken_names: set[str] | None = None,
             map_fn=map) -> OutlineResult:
    table = collect_candidates(atoms, config, map_fn=map_fn)
    decisions = select_candidates(table, config, taken_names=taken_names)
    result = materialize(atoms, decisions)
    result.windows_considered = table.windows_considered
    return result
