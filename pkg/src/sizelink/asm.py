"""Textual assembler and dumper for SOF object files (test authoring).

One instruction or directive per line; ``;`` starts a comment. Directives:
``.global``/``.local``, ``.func``/``.endfunc``, ``.alias``, ``.fixup``,
``.eh``, ``.line``, ``.dataincode``, ``.inst``. Local labels are defined as
``.Lname:`` and may only be referenced from within the same function; any
other identifier used as a branch/adr target becomes a symbolic fixup.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .isa import AddrMode, COND_NAMES, FieldOverflow, Instruction, Kind, decode, encode
from .objfmt import (
    DebugLine, EhEntry, Fixup, FixupKind, FunctionAtom, ObjectFile, Scope,
    Symbol, validate,
)

__all__ = ["ParseError", "UndefinedLocalLabel", "assemble", "dump"]


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UndefinedLocalLabel(ParseError):
    pass


_REG_RE = re.compile(r"^[xw](\d+)$")

_FIXUP_KIND_NAMES = {
    "call26": FixupKind.CALL26,
    "branch26": FixupKind.BRANCH26,
    "adr21": FixupKind.ADR21,
    "adrp21_page": FixupKind.ADRP21_PAGE,
}

# mnemonic -> (kind, fixup kind for symbolic targets or None)
_BRANCH_MNEMONICS = {
    "b": (Kind.B, FixupKind.BRANCH26),
    "bl": (Kind.BL, FixupKind.CALL26),
}


def _parse_reg(tok: str, line_no: int) -> int:
    t = tok.lower()
    if t in ("sp", "xzr", "wzr"):
        return 31
    m = _REG_RE.match(t)
    if m:
        n = int(m.group(1))
        if 0 <= n <= 30:
            return n
    raise ParseError(line_no, f"bad register {tok!r}")


def _parse_int(tok: str, line_no: int, *, imm_prefix: bool = False) -> int:
    t = tok.strip()
    if imm_prefix:
        if not t.startswith("#"):
            raise ParseError(line_no, f"expected #immediate, got {tok!r}")
        t = t[1:]
    try:
        return int(t, 0)
    except ValueError:
        raise ParseError(line_no, f"bad integer {tok!r}") from None


_SYMREF_RE = re.compile(r"^([A-Za-z_.$][\w.$]*)([+-]\d+)?$")


@dataclass
class _PendingRef:
    """A label or symbol reference to resolve at .endfunc."""
    index: int
    line_no: int
    label: str | None          # .L-prefixed local label
    symbol: str | None         # symbolic fixup target
    addend: int
    fixup_kind: FixupKind | None


class _FuncState:
    def __init__(self, name: str, line_no: int) -> None:
        self.name = name
        self.start_line = line_no
        self.words: list[int] = []
        self.fixups: list[Fixup] = []
        self.eh: list[EhEntry] = []
        self.lines: list[DebugLine] = []
        self.labels: dict[str, int] = {}
        self.refs: list[_PendingRef] = []
        self.aliases: list[str] = []
        self.has_dic = False
        self.pending_line: tuple[int, int] | None = None


def _split_operands(rest: str, line_no: int) -> list[str]:
    """Split an operand string on commas, keeping [...] groups intact."""
    out: list[str] = []
    depth = 0
    cur = ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise ParseError(line_no, "unbalanced ']'")
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if depth:
        raise ParseError(line_no, "unbalanced '['")
    if cur.strip():
        out.append(cur.strip())
    return out


def assemble(text: str) -> ObjectFile:
    obj = ObjectFile()
    scopes: dict[str, Scope] = {}
    defined: dict[str, int] = {}
    func: _FuncState | None = None

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split(";", 1)[0].strip()
        if not line:
            continue

        if line.endswith(":"):
            name = line[:-1].strip()
            if func is None:
                raise ParseError(line_no, "label outside .func")
            if not name.startswith(".L"):
                raise ParseError(line_no, f"labels must start with .L, got {name!r}")
            if name in func.labels:
                raise ParseError(line_no, f"duplicate label {name!r}")
            func.labels[name] = len(func.words)
            continue

        mnemonic, _, rest = line.partition(" ")
        mnemonic = mnemonic.lower()
        rest = rest.strip()

        if mnemonic.startswith("."):
            _directive(obj, scopes, defined, func, mnemonic, rest, line_no)
            if mnemonic == ".func":
                func = _FuncState(rest.split()[0], line_no)
            elif mnemonic == ".endfunc":
                assert func is not None
                _finish_func(obj, scopes, defined, func)
                func = None
            continue

        if func is None:
            raise ParseError(line_no, f"instruction outside .func: {line!r}")
        _instruction(func, mnemonic, rest, line_no)

    if func is not None:
        raise ParseError(func.start_line, f".func {func.name!r} missing .endfunc")
    for name in scopes:
        if name not in defined:
            raise ParseError(0, f"scope declared for undefined symbol {name!r}")
    validate(obj)
    return obj


def _directive(obj: ObjectFile, scopes: dict[str, Scope], defined: dict[str, int],
               func: _FuncState | None, mnemonic: str, rest: str,
               line_no: int) -> None:
    args = rest.split()
    if mnemonic in (".global", ".local"):
        if len(args) != 1:
            raise ParseError(line_no, f"{mnemonic} takes one symbol name")
        scopes[args[0]] = Scope.GLOBAL if mnemonic == ".global" else Scope.LOCAL
    elif mnemonic == ".func":
        if func is not None:
            raise ParseError(line_no, "nested .func")
        if len(args) != 1:
            raise ParseError(line_no, ".func takes one name")
        if args[0] in defined:
            raise ParseError(line_no, f"redefinition of {args[0]!r}")
    elif mnemonic == ".endfunc":
        if func is None:
            raise ParseError(line_no, ".endfunc outside .func")
        if not func.words:
            raise ParseError(line_no, f"function {func.name!r} has no instructions")
        if func.pending_line is not None:
            raise ParseError(line_no, ".line not followed by an instruction")
    elif mnemonic == ".alias":
        if func is None or len(args) != 1:
            raise ParseError(line_no, ".alias NAME inside .func required")
        func.aliases.append(args[0])
    elif mnemonic == ".fixup":
        if func is None or not func.words:
            raise ParseError(line_no, ".fixup requires a preceding instruction")
        if len(args) not in (2, 3):
            raise ParseError(line_no, ".fixup KIND TARGET [ADDEND]")
        kind = _FIXUP_KIND_NAMES.get(args[0].lower())
        if kind is None:
            raise ParseError(line_no, f"unknown fixup kind {args[0]!r}")
        addend = _parse_int(args[2], line_no) if len(args) == 3 else 0
        func.fixups.append(Fixup(len(func.words) - 1, kind, args[1], addend))
    elif mnemonic == ".eh":
        if func is None or len(args) != 4:
            raise ParseError(line_no, ".eh START END LP|- ACTION inside .func")
        lp = None if args[2] == "-" else _parse_int(args[2], line_no)
        func.eh.append(EhEntry(_parse_int(args[0], line_no),
                               _parse_int(args[1], line_no), lp,
                               _parse_int(args[3], line_no)))
    elif mnemonic == ".line":
        if func is None or len(args) != 2:
            raise ParseError(line_no, ".line FILE LINE inside .func")
        func.pending_line = (_parse_int(args[0], line_no),
                             _parse_int(args[1], line_no))
    elif mnemonic == ".dataincode":
        if func is None:
            raise ParseError(line_no, ".dataincode inside .func required")
        func.has_dic = True
        if args:
            start = len(func.words)
            for a in args:
                func.words.append(_parse_int(a, line_no) & 0xFFFFFFFF)
            func.fixups.append(Fixup(start, FixupKind.DATA_IN_CODE_RANGE, "",
                                     0, len(args)))
    elif mnemonic == ".inst":
        if func is None or len(args) != 1:
            raise ParseError(line_no, ".inst WORD inside .func required")
        if func.pending_line is not None:
            fid, ln = func.pending_line
            func.lines.append(DebugLine(len(func.words), fid, ln))
            func.pending_line = None
        func.words.append(_parse_int(args[0], line_no) & 0xFFFFFFFF)
    else:
        raise ParseError(line_no, f"unknown directive {mnemonic!r}")


def _finish_func(obj: ObjectFile, scopes: dict[str, Scope], defined: dict[str, int],
                 func: _FuncState) -> None:
    for ref in func.refs:
        if ref.label is not None:
            if ref.label not in func.labels:
                raise UndefinedLocalLabel(ref.line_no,
                                          f"undefined local label {ref.label!r}")
            target = func.labels[ref.label]
            offset = (target - ref.index) * 4
            inst = decode(func.words[ref.index])
            try:
                func.words[ref.index] = encode(
                    Instruction(0, inst.kind, rd=inst.rd, rn=inst.rn, rm=inst.rm,
                                imm=offset, shift=inst.shift, cond=inst.cond,
                                mode=inst.mode))
            except FieldOverflow as exc:
                raise ParseError(ref.line_no, str(exc)) from None
        else:
            assert ref.symbol is not None and ref.fixup_kind is not None
            func.fixups.append(Fixup(ref.index, ref.fixup_kind, ref.symbol,
                                     ref.addend))

    func.fixups.sort(key=lambda f: (f.instruction_index, f.kind.value))
    atom_index = len(obj.atoms)
    obj.atoms.append(FunctionAtom(func.name, func.words, func.fixups, func.eh,
                                  func.lines, has_data_in_code=func.has_dic))
    defined[func.name] = atom_index
    obj.symbols.append(Symbol(func.name, scopes.get(func.name, Scope.LOCAL),
                              atom_index))
    for alias in func.aliases:
        defined[alias] = atom_index
        obj.symbols.append(Symbol(alias, scopes.get(alias, Scope.LOCAL),
                                  atom_index))


def _target_ref(func: _FuncState, tok: str, line_no: int,
                fixup_kind: FixupKind | None) -> int:
    """Parse a branch/adr target; returns an immediate byte offset or 0 with a
    pending reference registered."""
    if tok.startswith("#"):
        return _parse_int(tok, line_no, imm_prefix=True)
    if tok.startswith(".L"):
        func.refs.append(_PendingRef(len(func.words), line_no, tok, None, 0, None))
        return 0
    m = _SYMREF_RE.match(tok)
    if not m:
        raise ParseError(line_no, f"bad target {tok!r}")
    if fixup_kind is None:
        raise ParseError(line_no,
                         f"symbolic target {tok!r} not allowed for this "
                         "instruction (no fixup kind covers its field)")
    addend = int(m.group(2)) if m.group(2) else 0
    func.refs.append(_PendingRef(len(func.words), line_no, None, m.group(1),
                                 addend, fixup_kind))
    return 0


_MEM_RE = re.compile(r"^\[([^,\]]+)(?:,\s*(#-?\w+))?\]$")


def _parse_mem(tok: str, line_no: int) -> tuple[int, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise ParseError(line_no, f"bad memory operand {tok!r}")
    base = _parse_reg(m.group(1).strip(), line_no)
    off = _parse_int(m.group(2), line_no, imm_prefix=True) if m.group(2) else 0
    return base, off


def _instruction(func: _FuncState, mnemonic: str, rest: str, line_no: int) -> None:
    ops = _split_operands(rest, line_no)
    inst = _build_instruction(func, mnemonic, ops, line_no)
    if func.pending_line is not None:
        fid, ln = func.pending_line
        func.lines.append(DebugLine(len(func.words), fid, ln))
        func.pending_line = None
    try:
        func.words.append(encode(inst))
    except FieldOverflow as exc:
        raise ParseError(line_no, str(exc)) from None


def _shift_amount(tok: str, line_no: int) -> int:
    parts = tok.split()
    if len(parts) != 2 or parts[0].lower() != "lsl":
        raise ParseError(line_no, f"bad shift {tok!r}")
    return _parse_int(parts[1], line_no, imm_prefix=True)


def _build_instruction(func: _FuncState, mnemonic: str, ops: list[str],
                       line_no: int) -> Instruction:
    def need(n: int, usage: str) -> None:
        if len(ops) != n:
            raise ParseError(line_no, f"usage: {usage}")

    if mnemonic == "nop":
        need(0, "nop")
        return Instruction(0, Kind.NOP)

    if mnemonic == "ret":
        if len(ops) > 1:
            raise ParseError(line_no, "usage: ret [xN]")
        rn = _parse_reg(ops[0], line_no) if ops else 30
        return Instruction(0, Kind.RET, rn=rn)

    if mnemonic in ("br", "blr"):
        need(1, f"{mnemonic} xN")
        kind = Kind.BR if mnemonic == "br" else Kind.BLR
        return Instruction(0, kind, rn=_parse_reg(ops[0], line_no))

    if mnemonic in _BRANCH_MNEMONICS:
        need(1, f"{mnemonic} TARGET")
        kind, fk = _BRANCH_MNEMONICS[mnemonic]
        return Instruction(0, kind, imm=_target_ref(func, ops[0], line_no, fk))

    if mnemonic.startswith("b.") and mnemonic[2:] in COND_NAMES:
        need(1, f"{mnemonic} TARGET")
        cond = COND_NAMES.index(mnemonic[2:])
        return Instruction(0, Kind.BCOND, cond=cond,
                           imm=_target_ref(func, ops[0], line_no, None))

    if mnemonic in ("cbz", "cbnz"):
        need(2, f"{mnemonic} xN, TARGET")
        kind = Kind.CBZ if mnemonic == "cbz" else Kind.CBNZ
        return Instruction(0, kind, rd=_parse_reg(ops[0], line_no),
                           imm=_target_ref(func, ops[1], line_no, None))

    if mnemonic in ("tbz", "tbnz"):
        need(3, f"{mnemonic} xN, #BIT, TARGET")
        kind = Kind.TBZ if mnemonic == "tbz" else Kind.TBNZ
        return Instruction(0, kind, rd=_parse_reg(ops[0], line_no),
                           shift=_parse_int(ops[1], line_no, imm_prefix=True),
                           imm=_target_ref(func, ops[2], line_no, None))

    if mnemonic in ("adr", "adrp"):
        need(2, f"{mnemonic} xN, TARGET")
        kind = Kind.ADR if mnemonic == "adr" else Kind.ADRP
        fk = FixupKind.ADR21 if kind is Kind.ADR else FixupKind.ADRP21_PAGE
        rd = _parse_reg(ops[0], line_no)
        return Instruction(0, kind, rd=rd,
                           imm=_target_ref(func, ops[1], line_no, fk))

    if mnemonic in ("movz", "movk", "movn"):
        if len(ops) not in (2, 3):
            raise ParseError(line_no, f"usage: {mnemonic} xN, #IMM[, lsl #HW]")
        kind = {"movz": Kind.MOVZ, "movk": Kind.MOVK, "movn": Kind.MOVN}[mnemonic]
        shift = _shift_amount(ops[2], line_no) if len(ops) == 3 else 0
        return Instruction(0, kind, rd=_parse_reg(ops[0], line_no),
                           imm=_parse_int(ops[1], line_no, imm_prefix=True),
                           shift=shift)

    if mnemonic == "mov":
        need(2, "mov xD, xM")
        return Instruction(0, Kind.ORR_REG, rd=_parse_reg(ops[0], line_no),
                           rn=31, rm=_parse_reg(ops[1], line_no))

    if mnemonic == "cmp":
        need(2, "cmp xN, #IMM")
        return Instruction(0, Kind.SUBS_IMM, rd=31,
                           rn=_parse_reg(ops[0], line_no),
                           imm=_parse_int(ops[1], line_no, imm_prefix=True))

    if mnemonic in ("add", "sub", "subs", "orr"):
        if len(ops) not in (3, 4):
            raise ParseError(line_no, f"usage: {mnemonic} xD, xN, (#IMM|xM)[, lsl #S]")
        rd = _parse_reg(ops[0], line_no)
        rn = _parse_reg(ops[1], line_no)
        shift = _shift_amount(ops[3], line_no) if len(ops) == 4 else 0
        if ops[2].startswith("#"):
            if mnemonic == "orr":
                raise ParseError(line_no, "orr immediate form not supported")
            kind = {"add": Kind.ADD_IMM, "sub": Kind.SUB_IMM,
                    "subs": Kind.SUBS_IMM}[mnemonic]
            return Instruction(0, kind, rd=rd, rn=rn,
                               imm=_parse_int(ops[2], line_no, imm_prefix=True),
                               shift=shift)
        if mnemonic == "subs":
            raise ParseError(line_no, "subs register form not supported")
        kind = {"add": Kind.ADD_REG, "sub": Kind.SUB_REG,
                "orr": Kind.ORR_REG}[mnemonic]
        return Instruction(0, kind, rd=rd, rn=rn,
                           rm=_parse_reg(ops[2], line_no), shift=shift)

    if mnemonic in ("ldr", "str", "ldrb", "strb"):
        need(2, f"{mnemonic} xT, [xN, #OFF]")
        kind = {"ldr": Kind.LDR_IMM, "str": Kind.STR_IMM,
                "ldrb": Kind.LDRB, "strb": Kind.STRB}[mnemonic]
        base, off = _parse_mem(ops[1], line_no)
        return Instruction(0, kind, rd=_parse_reg(ops[0], line_no), rn=base,
                           imm=off)

    if mnemonic in ("ldp", "stp"):
        if len(ops) not in (3, 4):
            raise ParseError(line_no,
                             f"usage: {mnemonic} xT, xT2, [xN, #OFF][!] or "
                             f"{mnemonic} xT, xT2, [xN], #OFF")
        kind = Kind.LDP if mnemonic == "ldp" else Kind.STP
        rt = _parse_reg(ops[0], line_no)
        rt2 = _parse_reg(ops[1], line_no)
        if len(ops) == 4:
            base, zero = _parse_mem(ops[2], line_no)
            if zero:
                raise ParseError(line_no, "post-index base takes no offset")
            off = _parse_int(ops[3], line_no, imm_prefix=True)
            mode = AddrMode.POST
        elif ops[2].endswith("!"):
            base, off = _parse_mem(ops[2][:-1], line_no)
            mode = AddrMode.PRE
        else:
            base, off = _parse_mem(ops[2], line_no)
            mode = AddrMode.OFFSET
        return Instruction(0, kind, rd=rt, rn=base, rm=rt2, imm=off, mode=mode)

    raise ParseError(line_no, f"unknown mnemonic {mnemonic!r}")


# ---------------------------------------------------------------------------
# dumper

def _reg_name(n: int, *, sp: bool = False, byte: bool = False) -> str:
    if n == 31:
        return "sp" if sp else ("wzr" if byte else "xzr")
    return f"w{n}" if byte else f"x{n}"


def _render(inst: Instruction, fixup: Fixup | None) -> str:
    """Canonical text for one instruction; fixup-covered operands go symbolic."""
    k = inst.kind

    def target() -> str:
        if fixup is not None:
            if fixup.addend:
                return f"{fixup.target}{fixup.addend:+d}"
            return fixup.target
        return f"#{inst.imm}"

    if k is Kind.NOP:
        return "nop"
    if k is Kind.RET:
        return "ret" if inst.rn == 30 else f"ret {_reg_name(inst.rn)}"
    if k is Kind.BR:
        return f"br {_reg_name(inst.rn)}"
    if k is Kind.BLR:
        return f"blr {_reg_name(inst.rn)}"
    if k is Kind.B:
        return f"b {target()}"
    if k is Kind.BL:
        return f"bl {target()}"
    if k is Kind.BCOND:
        return f"b.{COND_NAMES[inst.cond]} #{inst.imm}"
    if k in (Kind.CBZ, Kind.CBNZ):
        mn = "cbz" if k is Kind.CBZ else "cbnz"
        return f"{mn} {_reg_name(inst.rd)}, #{inst.imm}"
    if k in (Kind.TBZ, Kind.TBNZ):
        mn = "tbz" if k is Kind.TBZ else "tbnz"
        return f"{mn} {_reg_name(inst.rd)}, #{inst.shift}, #{inst.imm}"
    if k in (Kind.ADR, Kind.ADRP):
        mn = "adr" if k is Kind.ADR else "adrp"
        return f"{mn} {_reg_name(inst.rd)}, {target()}"
    if k in (Kind.MOVZ, Kind.MOVK, Kind.MOVN):
        mn = {Kind.MOVZ: "movz", Kind.MOVK: "movk", Kind.MOVN: "movn"}[k]
        out = f"{mn} {_reg_name(inst.rd)}, #{inst.imm}"
        if inst.shift:
            out += f", lsl #{inst.shift}"
        return out
    if k in (Kind.ADD_IMM, Kind.SUB_IMM, Kind.SUBS_IMM):
        if k is Kind.SUBS_IMM and inst.rd == 31:
            return f"cmp {_reg_name(inst.rn, sp=True)}, #{inst.imm}"
        mn = {Kind.ADD_IMM: "add", Kind.SUB_IMM: "sub", Kind.SUBS_IMM: "subs"}[k]
        sp_rd = k is not Kind.SUBS_IMM
        out = (f"{mn} {_reg_name(inst.rd, sp=sp_rd)}, "
               f"{_reg_name(inst.rn, sp=True)}, #{inst.imm}")
        if inst.shift:
            out += f", lsl #{inst.shift}"
        return out
    if k in (Kind.ADD_REG, Kind.SUB_REG, Kind.ORR_REG):
        if k is Kind.ORR_REG and inst.rn == 31 and inst.shift == 0:
            return f"mov {_reg_name(inst.rd)}, {_reg_name(inst.rm)}"
        mn = {Kind.ADD_REG: "add", Kind.SUB_REG: "sub", Kind.ORR_REG: "orr"}[k]
        out = (f"{mn} {_reg_name(inst.rd)}, {_reg_name(inst.rn)}, "
               f"{_reg_name(inst.rm)}")
        if inst.shift:
            out += f", lsl #{inst.shift}"
        return out
    if k in (Kind.LDR_IMM, Kind.STR_IMM, Kind.LDRB, Kind.STRB):
        mn = {Kind.LDR_IMM: "ldr", Kind.STR_IMM: "str",
              Kind.LDRB: "ldrb", Kind.STRB: "strb"}[k]
        byte = k in (Kind.LDRB, Kind.STRB)
        rt = _reg_name(inst.rd, byte=byte)
        base = _reg_name(inst.rn, sp=True)
        mem = f"[{base}]" if inst.imm == 0 else f"[{base}, #{inst.imm}]"
        return f"{mn} {rt}, {mem}"
    if k in (Kind.LDP, Kind.STP):
        mn = "ldp" if k is Kind.LDP else "stp"
        rt = _reg_name(inst.rd)
        rt2 = _reg_name(inst.rm)
        base = _reg_name(inst.rn, sp=True)
        if inst.mode is AddrMode.PRE:
            mem = f"[{base}, #{inst.imm}]!"
        elif inst.mode is AddrMode.POST:
            mem = f"[{base}], #{inst.imm}"
        else:
            mem = f"[{base}]" if inst.imm == 0 else f"[{base}, #{inst.imm}]"
        return f"{mn} {rt}, {rt2}, {mem}"
    raise AssertionError(f"unrenderable kind {k}")


_INLINE_KINDS = {
    Kind.B: FixupKind.BRANCH26,
    Kind.BL: FixupKind.CALL26,
    Kind.ADR: FixupKind.ADR21,
    Kind.ADRP: FixupKind.ADRP21_PAGE,
}

_FIXUP_KIND_TEXT = {v: k for k, v in _FIXUP_KIND_NAMES.items()}


def dump(obj: ObjectFile) -> str:
    """Render an ObjectFile as assembly text; assemble(dump(obj)) == obj for
    files whose symbols follow atom declaration order."""
    by_atom: dict[int, list[Symbol]] = {}
    for sym in obj.symbols:
        by_atom.setdefault(sym.atom_index, []).append(sym)

    out: list[str] = []
    for atom_index, atom in enumerate(obj.atoms):
        syms = by_atom.get(atom_index, [])
        for sym in syms:
            directive = ".global" if sym.scope is Scope.GLOBAL else ".local"
            out.append(f"{directive} {sym.name}")
        out.append(f".func {atom.name}")
        for sym in syms:
            if sym.name != atom.name:
                out.append(f"    .alias {sym.name}")

        lines_at = {dl.instruction_index: dl for dl in atom.debug_lines}
        dic_at = {fx.instruction_index: fx.length for fx in atom.fixups
                  if fx.kind is FixupKind.DATA_IN_CODE_RANGE}
        fixups_at: dict[int, list[Fixup]] = {}
        for fx in atom.fixups:
            if fx.kind is not FixupKind.DATA_IN_CODE_RANGE:
                fixups_at.setdefault(fx.instruction_index, []).append(fx)

        i = 0
        n = len(atom.words)
        emitted_dic_words = False
        while i < n:
            if i in dic_at:
                span = dic_at[i]
                ws = " ".join(f"0x{w:08X}" for w in atom.words[i:i + span])
                out.append(f"    .dataincode {ws}")
                emitted_dic_words = True
                i += span
                continue
            if i in lines_at:
                dl = lines_at[i]
                out.append(f"    .line {dl.file_id} {dl.line}")
            word = atom.words[i]
            inst = decode(word)
            inline: Fixup | None = None
            extras: list[Fixup] = []
            for fx in fixups_at.get(i, []):
                if inline is None and _INLINE_KINDS.get(inst.kind) is fx.kind:
                    inline = fx
                else:
                    extras.append(fx)
            if inst.kind is Kind.UNKNOWN:
                out.append(f"    .inst 0x{word:08X}")
            else:
                text = _render(inst, inline)
                if inline is None and encode(inst) != word:
                    out.append(f"    .inst 0x{word:08X}")
                else:
                    out.append(f"    {text}")
            for fx in extras:
                out.append(f"    .fixup {_FIXUP_KIND_TEXT[fx.kind]} "
                           f"{fx.target} {fx.addend}")
            i += 1

        if atom.has_data_in_code and not emitted_dic_words:
            out.append("    .dataincode")
        for eh in atom.eh_entries:
            lp = "-" if eh.landing_pad_index is None else str(eh.landing_pad_index)
            out.append(f"    .eh {eh.start_index} {eh.end_index} {lp} {eh.action_id}")
        out.append(".endfunc")
        out.append("")
    return "\n".join(out)
