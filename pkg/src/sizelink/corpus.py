"""Deterministic corpus generator plus the independent savings oracle.

Programs are synthesized directly as object files: call DAGs of functions
with canonical frames, seeded repeated idiom sequences (outlining food),
exact duplicate functions (ICF food), optional EH entries and data-in-code
spans, and debug lines. Each program's manifest carries oracle-computed
minimum savings, derived by a brute-force content-keyed greedy that shares
nothing with the linker's candidate machinery beyond the instruction codec.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .analysis import compute_visibility, hash_sequence
from .isa import (
    CONTROL_FLOW_KINDS, Instruction, Kind, decode, encode, registers,
)
from .objfmt import (
    DebugLine, EhEntry, Fixup, FixupKind, FunctionAtom, ObjectFile, Scope,
    Symbol,
)
from .outline_general import Form, OutlineConfig, profit

__all__ = [
    "CorpusParams", "GeneratedProgram", "gen_corpus",
    "oracle_outline_savings", "oracle_icf_safe_savings",
]

GLOBALS_BASE_WORD = 0x9          # movz x9, #0x9, lsl #16 -> 0x90000
FUNCS_PER_FILE = 25
DEFAULT_FUEL = 200_000


@dataclass(frozen=True)
class CorpusParams:
    functions: int = 12
    programs: int = 1
    dup_rate: float = 0.3
    frame_rate: float = 0.5
    eh_rate: float = 0.1
    data_in_code_rate: float = 0.05
    vectors: int = 10

    def __post_init__(self) -> None:
        for name in ("dup_rate", "frame_rate", "eh_rate", "data_in_code_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.functions < 1 or self.programs < 1:
            raise ValueError("functions and programs must be >= 1")


@dataclass
class GeneratedProgram:
    name: str
    files: list[ObjectFile]
    entry: str
    vectors: list[list[int]]
    fuel: int
    min_general_outline_savings: int
    min_icf_safe_savings: int


def _w(kind: Kind, **kw) -> int:
    return encode(Instruction(0, kind, **kw))


_RET = _w(Kind.RET, rn=30)
_NOP = _w(Kind.NOP)

_PAIR_POOL = ((19, 20), (21, 22), (23, 24), (25, 26))


class _FuncBuilder:
    def __init__(self, name: str, file_id: int) -> None:
        self.name = name
        self.file_id = file_id
        self.words: list[int] = []
        self.fixups: list[Fixup] = []
        self.eh: list[EhEntry] = []
        self.lines: list[DebugLine] = []
        self.has_dic = False

    def emit(self, word: int) -> int:
        self.words.append(word)
        return len(self.words) - 1

    def call(self, target: str) -> int:
        idx = self.emit(0x94000000)
        self.fixups.append(Fixup(idx, FixupKind.CALL26, target, 0))
        return idx

    def atom(self) -> FunctionAtom:
        self.fixups.sort(key=lambda f: (f.instruction_index, f.kind.value))
        return FunctionAtom(self.name, self.words, self.fixups, self.eh,
                            self.lines, has_data_in_code=self.has_dic)


def _make_idioms(rng: random.Random, runtime_names: list[str]):
    """A pool of repeated sequences: pure-ALU (REG_RETURN food) and
    call-terminated (TAIL_CALL food). Returns emit callbacks."""
    idioms = []
    for _ in range(rng.randint(2, 4)):
        length = rng.randint(3, 6)
        ops = []
        for j in range(length):
            reg = rng.randint(1, 8)
            choice = rng.randrange(3)
            if choice == 0:
                ops.append(_w(Kind.MOVZ, rd=reg, imm=rng.randint(0, 999)))
            elif choice == 1:
                ops.append(_w(Kind.ADD_IMM, rd=reg, rn=rng.randint(0, 8),
                              imm=rng.randint(0, 255)))
            else:
                ops.append(_w(Kind.ADD_REG, rd=reg, rn=rng.randint(0, 8),
                              rm=rng.randint(0, 8)))

        def emit_alu(b: _FuncBuilder, ops=tuple(ops)) -> None:
            for w in ops:
                b.emit(w)
        idioms.append(emit_alu)
    for _ in range(rng.randint(1, 2)):
        setup = [_w(Kind.MOVZ, rd=rng.randint(1, 4), imm=rng.randint(0, 999))
                 for _ in range(rng.randint(2, 4))]
        target = rng.choice(runtime_names)

        def emit_call(b: _FuncBuilder, setup=tuple(setup), target=target) -> None:
            for w in setup:
                b.emit(w)
            b.call(target)
        idioms.append(emit_call)
    return idioms


def _gen_function(rng: random.Random, b: _FuncBuilder, params: CorpusParams,
                  callees: list[str], idioms, line_base: int) -> None:
    b.lines.append(DebugLine(0, b.file_id, line_base))
    framed = rng.random() < params.frame_rate
    pairs: list[tuple[int, int]] = []
    locals_bytes = 0
    if framed:
        pairs = list(_PAIR_POOL[:rng.randint(0, 2)]) + [(29, 30)]
        locals_bytes = 16 * rng.randint(0, 3)
        total = locals_bytes + 16 * len(pairs)
        b.emit(_w(Kind.SUB_IMM, rd=31, rn=31, imm=total))
        for m, (a, c) in enumerate(pairs):
            b.emit(_w(Kind.STP, rd=a, rn=31, rm=c, imm=locals_bytes + 16 * m))
        b.emit(_w(Kind.ADD_IMM, rd=29, rn=31, imm=total - 16))

    body_len = rng.randint(3, 9)
    emitted = 0
    while emitted < body_len:
        roll = rng.random()
        if roll < params.dup_rate and idioms:
            before = len(b.words)
            rng.choice(idioms)(b)
            emitted += len(b.words) - before
            if rng.random() < 0.2:
                b.lines.append(DebugLine(len(b.words) - 1, b.file_id,
                                         line_base + emitted))
            continue
        choice = rng.randrange(6)
        if choice == 0:
            b.emit(_w(Kind.MOVZ, rd=rng.randint(0, 8),
                      imm=rng.randint(0, 4095)))
        elif choice == 1:
            b.emit(_w(Kind.ADD_REG, rd=rng.randint(0, 8),
                      rn=rng.randint(0, 8), rm=rng.randint(0, 8)))
        elif choice == 2:
            b.emit(_w(Kind.SUB_IMM, rd=rng.randint(0, 8),
                      rn=rng.randint(0, 8), imm=rng.randint(0, 100)))
        elif choice == 3 and framed and locals_bytes:
            slot = 8 * rng.randrange(locals_bytes // 8)
            b.emit(_w(Kind.STR_IMM, rd=rng.randint(0, 8), rn=31, imm=slot))
            b.emit(_w(Kind.LDR_IMM, rd=rng.randint(0, 8), rn=31, imm=slot))
            emitted += 1
        elif choice == 4 and framed and callees and rng.random() < 0.7:
            b.call(rng.choice(callees))
            b.emit(_w(Kind.ADD_REG, rd=0, rn=0, rm=rng.randint(1, 4)))
            emitted += 1
        elif choice == 5 and emitted + 3 <= body_len:
            # forward conditional skip: creates a visible branch target
            skip = rng.randint(1, 2)
            b.emit(_w(Kind.CBZ, rd=rng.randint(0, 8), imm=4 * (skip + 1)))
            for _ in range(skip):
                b.emit(_w(Kind.MOVZ, rd=rng.randint(1, 8),
                          imm=rng.randint(0, 99)))
            emitted += skip
        else:
            b.emit(_NOP)
        emitted += 1

    if rng.random() < params.data_in_code_rate:
        blob = rng.randint(1, 2)
        b.emit(_w(Kind.B, imm=4 * (blob + 1)))
        start = len(b.words)
        for _ in range(blob):
            b.emit(rng.getrandbits(32))
        b.fixups.append(Fixup(start, FixupKind.DATA_IN_CODE_RANGE, "", 0, blob))
        b.has_dic = True

    if framed:
        total = locals_bytes + 16 * len(pairs)
        for m, (a, c) in reversed(list(enumerate(pairs))):
            b.emit(_w(Kind.LDP, rd=a, rn=31, rm=c, imm=locals_bytes + 16 * m))
        b.emit(_w(Kind.ADD_IMM, rd=31, rn=31, imm=total))
    b.emit(_RET)

    if framed and rng.random() < params.eh_rate:
        call_idx = [fx.instruction_index for fx in b.fixups
                    if fx.kind is FixupKind.CALL26]
        if call_idx:
            c = rng.choice(call_idx)
            lo = max(0, c - 1)
            hi = min(len(b.words), c + 2)
            lp = rng.randrange(len(b.words))
            b.eh.append(EhEntry(lo, hi, lp, rng.randint(1, 9)))


def _gen_program(seed: int, pidx: int, params: CorpusParams,
                 compute_oracles: bool = True) -> GeneratedProgram:
    rng = random.Random((seed << 24) ^ (pidx * 0x9E3779B1))
    name = f"prog_{pidx:03d}"

    runtime_names = [f"_rt{k}" for k in range(3)]
    idioms = _make_idioms(rng, runtime_names)

    func_names = [f"_fn_{pidx:03d}_{i}" for i in range(params.functions)]
    builders: list[FunctionAtom] = []
    same_file_callees: list[str] = []   # earlier functions of the open file

    for i, fname in enumerate(func_names):
        file_id = i // FUNCS_PER_FILE
        if i % FUNCS_PER_FILE == 0:
            same_file_callees = []
        if builders and rng.random() < params.dup_rate * 0.5:
            # exact duplicate of a same-file function (ICF food); callees are
            # copied verbatim, so they stay resolvable from this file
            if same_file_callees:
                src_name = rng.choice(same_file_callees)
                src = next(a for a in builders if a.name == src_name)
                atom = FunctionAtom(fname, list(src.words), list(src.fixups),
                                    list(src.eh_entries),
                                    [DebugLine(0, file_id, 1000 + i)],
                                    has_data_in_code=src.has_data_in_code)
                builders.append(atom)
                same_file_callees.append(fname)
                continue
        b = _FuncBuilder(fname, file_id)
        callees = same_file_callees[-6:] + runtime_names
        _gen_function(rng, b, params, callees, idioms, line_base=10 * (i + 1))
        builders.append(b.atom())
        same_file_callees.append(fname)

    # runtime leaves
    rt_atoms = []
    for k, rt in enumerate(runtime_names):
        rt_atoms.append(FunctionAtom(
            rt, [_w(Kind.MOVZ, rd=0, imm=40 + k), _RET],
            debug_lines=[DebugLine(0, 0, k + 1)]))

    # main: saves two incoming args, fans out to root functions, stores
    # results into the globals window the digest covers
    n_roots = min(len(builders), 6)
    root_step = max(1, len(builders) // n_roots)
    roots = [func_names[j] for j in range(0, len(builders), root_step)][:n_roots]
    mb = _FuncBuilder("main", 0)
    mb.lines.append(DebugLine(0, 0, 1))
    pairs = [(19, 20), (21, 22), (29, 30)]
    mb.emit(_w(Kind.SUB_IMM, rd=31, rn=31, imm=48))
    for m, (a, c) in enumerate(pairs):
        mb.emit(_w(Kind.STP, rd=a, rn=31, rm=c, imm=16 * m))
    mb.emit(_w(Kind.ADD_IMM, rd=29, rn=31, imm=32))
    mb.emit(_w(Kind.ORR_REG, rd=19, rn=31, rm=0))   # x19 = arg0
    mb.emit(_w(Kind.ORR_REG, rd=20, rn=31, rm=1))   # x20 = arg1
    mb.emit(_w(Kind.MOVZ, rd=21, imm=0))            # accumulator
    mb.emit(_w(Kind.MOVZ, rd=22, imm=GLOBALS_BASE_WORD, shift=16))
    for slot, root in enumerate(roots):
        mb.emit(_w(Kind.ORR_REG, rd=0, rn=31, rm=19))
        mb.emit(_w(Kind.ORR_REG, rd=1, rn=31, rm=20))
        mb.call(root)
        mb.emit(_w(Kind.STR_IMM, rd=0, rn=22, imm=8 * slot))
        mb.emit(_w(Kind.ADD_REG, rd=21, rn=21, rm=0))
    mb.emit(_w(Kind.ORR_REG, rd=0, rn=31, rm=21))
    for m, (a, c) in reversed(list(enumerate(pairs))):
        mb.emit(_w(Kind.LDP, rd=a, rn=31, rm=c, imm=16 * m))
    mb.emit(_w(Kind.ADD_IMM, rd=31, rn=31, imm=48))
    mb.emit(_RET)

    # pack into files; only main, the runtime leaves, and main's roots need
    # GLOBAL scope, leaving plenty of LOCAL symbols for ICF
    root_set = set(roots)
    files: list[ObjectFile] = []
    file0 = ObjectFile()
    file0.atoms.append(mb.atom())
    file0.symbols.append(Symbol("main", Scope.GLOBAL, 0))
    for rt_atom in rt_atoms:
        file0.symbols.append(Symbol(rt_atom.name, Scope.GLOBAL,
                                    len(file0.atoms)))
        file0.atoms.append(rt_atom)
    files.append(file0)
    current = ObjectFile()
    for i, atom in enumerate(builders):
        if i and i % FUNCS_PER_FILE == 0:
            files.append(current)
            current = ObjectFile()
        scope = Scope.GLOBAL if atom.name in root_set else Scope.LOCAL
        current.symbols.append(Symbol(atom.name, scope, len(current.atoms)))
        current.atoms.append(atom)
    files.append(current)

    vectors = [[rng.getrandbits(32), rng.getrandbits(32)]
               for _ in range(params.vectors)]

    if compute_oracles:
        cfg = OutlineConfig()
        min_outline = oracle_outline_savings(files, cfg)
        min_icf = oracle_icf_safe_savings(files)
    else:
        min_outline = min_icf = 0
    return GeneratedProgram(name, files, "main", vectors, DEFAULT_FUEL,
                            min_general_outline_savings=min_outline,
                            min_icf_safe_savings=min_icf)


def gen_corpus(seed: int, params: CorpusParams,
               compute_oracles: bool = True) -> list[GeneratedProgram]:
    """Deterministic: the same seed and params always produce the same
    programs, vectors, and manifest values.

    The brute-force oracle is quadratic in window length per position; for
    very large corpora pass compute_oracles=False (manifest minimums then
    read 0, which stays a valid lower bound).
    """
    return [_gen_program(seed, pidx, params, compute_oracles)
            for pidx in range(params.programs)]


# ---------------------------------------------------------------------------
# independent oracles

def _oracle_window_form(atom: FunctionAtom, insts, visible: set[int],
                        eh_covered: set[int], fixups_at: dict[int, Fixup],
                        s: int, e: int) -> Form | None:
    n = len(insts)
    for i in range(s, e):
        inst = insts[i]
        if i in visible or inst.kind is Kind.UNKNOWN:
            return None
        if inst.kind in (Kind.ADR, Kind.ADRP) and i not in fixups_at:
            return None
    cf = [i for i in range(s, e) if insts[i].kind in CONTROL_FLOW_KINDS]
    if not cf:
        for i in range(s, e):
            use = registers(insts[i])
            touched = use.reads | use.writes
            if touched & {16, 17} or use.touches_x30:
                return None
        wrote16 = False
        for i in range(e, n):
            use = registers(insts[i])
            if 16 in use.reads and not wrote16:
                return None
            if 16 in use.writes:
                break
        return Form.REG_RETURN
    if cf == [e - 1] and insts[e - 1].kind is Kind.BL:
        fx = fixups_at.get(e - 1)
        if fx is None or fx.kind is not FixupKind.CALL26:
            return None
        for i in range(s, e - 1):
            if registers(insts[i]).touches_x30:
                return None
        if any(i in eh_covered for i in range(s, e)):
            return None
        return Form.TAIL_CALL
    return None


def oracle_outline_savings(files: list[ObjectFile],
                           config: OutlineConfig) -> int:
    """Brute-force greedy lower bound for general-outline savings.

    Enumerates every window with nested loops, groups by literal content,
    applies the frequency threshold and the (profit, length, hash) greedy
    with overlap drops, and sums realized profits.
    """
    atoms = [a for f in files for a in f.atoms]
    by_content: dict[tuple, dict] = {}
    order = 0
    for ai, atom in enumerate(atoms):
        if atom.has_data_in_code or len(atom.words) < config.min_len:
            continue
        insts = [decode(w) for w in atom.words]
        visible = compute_visibility(atom)
        eh_covered: set[int] = set()
        for eh in atom.eh_entries:
            eh_covered.update(range(eh.start_index, eh.end_index))
        fixups_at = {fx.instruction_index: fx for fx in atom.fixups
                     if fx.kind is not FixupKind.DATA_IN_CODE_RANGE}
        n = len(atom.words)
        for length in range(config.min_len, min(config.max_len, n) + 1):
            for s in range(0, n - length + 1):
                form = _oracle_window_form(atom, insts, visible, eh_covered,
                                           fixups_at, s, s + length)
                if form is None:
                    continue
                key_fixups = tuple(
                    (fx.instruction_index - s, fx.kind, fx.target, fx.addend)
                    for i in range(s, s + length)
                    if (fx := fixups_at.get(i)) is not None)
                key = (tuple(atom.words[s:s + length]), key_fixups)
                entry = by_content.setdefault(
                    key, {"form": form, "sites": [], "order": order,
                          "hash": hash_sequence(atom, s, length),
                          "length": length})
                order += 1
                if any(a == ai and s < e0 and s0 < s + length
                       for a, s0, e0 in entry["sites"]):
                    continue
                entry["sites"].append((ai, s, s + length))

    ranked = sorted(
        (e for e in by_content.values() if len(e["sites"]) > config.min_freq),
        key=lambda e: (-profit(e["form"], e["length"], len(e["sites"])),
                       -e["length"], e["hash"], e["order"]))
    claimed: dict[int, list[tuple[int, int]]] = {}
    total = 0
    for entry in ranked:
        if profit(entry["form"], entry["length"],
                  len(entry["sites"])) <= config.min_profit:
            continue
        survivors = []
        for ai, s, e in entry["sites"]:
            if not any(s < b and a < e for a, b in claimed.get(ai, [])):
                survivors.append((ai, s, e))
        p = profit(entry["form"], entry["length"], len(survivors))
        if p <= config.min_profit:
            continue
        for ai, s, e in survivors:
            claimed.setdefault(ai, []).append((s, e))
        total += p
    return total


def oracle_icf_safe_savings(files: list[ObjectFile]) -> int:
    """Exact single-iteration safe-ICF savings: byte-identical LOCAL function
    groups, each duplicate shrinking to one branch."""
    global_names = {sym.name for f in files for sym in f.symbols
                    if sym.scope is Scope.GLOBAL}
    groups: dict[tuple, int] = {}
    total = 0
    for f in files:
        for atom in f.atoms:
            if atom.name in global_names:
                continue
            key = (tuple(atom.words),
                   tuple((fx.instruction_index, fx.kind, fx.target, fx.addend,
                          fx.length) for fx in atom.fixups),
                   tuple(atom.eh_entries), atom.has_data_in_code)
            if key in groups:
                if atom.size_bytes() > 4:
                    total += atom.size_bytes() - 4
            else:
                groups[key] = 1
    return total
