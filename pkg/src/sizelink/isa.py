"""AArch64-subset instruction codec: decode, encode, classify, and edit.

All offsets are exposed in bytes (not encoded units). Words the decoder does
not model come back as ``Kind.UNKNOWN`` and are treated by every pass as
opaque: non-branch, all registers used, never outlinable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum, auto

__all__ = [
    "Kind", "AddrMode", "Instruction", "RegUse",
    "FieldOverflow", "NotABranch",
    "decode", "encode", "branch_info", "retarget", "registers",
    "SP", "XZR", "COND_NAMES", "BRANCH_KINDS", "CALL_KINDS",
]

SP = 31   # register slot 31 where the class reads it as the stack pointer
XZR = 31  # register slot 31 where the class reads it as the zero register


class FieldOverflow(ValueError):
    """An immediate or offset does not fit its encoding field."""


class NotABranch(TypeError):
    """retarget() applied to a non-direct-branch instruction."""


class Kind(Enum):
    ADD_IMM = auto()
    SUB_IMM = auto()
    SUBS_IMM = auto()   # CMP when rd == 31
    ADD_REG = auto()
    SUB_REG = auto()
    ORR_REG = auto()    # MOV when rn == 31
    MOVZ = auto()
    MOVK = auto()
    MOVN = auto()
    LDR_IMM = auto()
    STR_IMM = auto()
    LDRB = auto()
    STRB = auto()
    LDP = auto()
    STP = auto()
    B = auto()
    BL = auto()
    BCOND = auto()
    CBZ = auto()
    CBNZ = auto()
    TBZ = auto()
    TBNZ = auto()
    BR = auto()
    BLR = auto()
    RET = auto()
    ADR = auto()
    ADRP = auto()
    NOP = auto()
    UNKNOWN = auto()


class AddrMode(Enum):
    """Addressing mode for LDP/STP."""
    OFFSET = auto()
    PRE = auto()
    POST = auto()


# Kinds whose offset field encodes a direct, PC-relative branch target.
BRANCH_KINDS = frozenset({
    Kind.B, Kind.BL, Kind.BCOND, Kind.CBZ, Kind.CBNZ, Kind.TBZ, Kind.TBNZ,
})
# Kinds that transfer control at all (direct or indirect).
CONTROL_FLOW_KINDS = BRANCH_KINDS | {Kind.BR, Kind.BLR, Kind.RET}
CALL_KINDS = frozenset({Kind.BL, Kind.BLR})

COND_NAMES = (
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
    "hi", "ls", "ge", "lt", "gt", "le", "al",
)


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction. Register slots not used by the kind are 0."""

    raw: int
    kind: Kind
    rd: int = 0       # destination; Rt for loads/stores and CBZ/TBZ tests
    rn: int = 0       # first source / memory base / BR-family target
    rm: int = 0       # second source; Rt2 for LDP/STP
    imm: int = 0      # byte offset for branches/memory/ADR(P); value otherwise
    shift: int = 0    # LSL amount (imm ops: 0/12; MOV ops: 0/16/32/48; reg ops: 0-63)
    cond: int = 0     # BCOND condition code
    mode: AddrMode = AddrMode.OFFSET


@dataclass(frozen=True)
class RegUse:
    """Registers an instruction reads/writes; 31 appears only when it means SP."""

    reads: frozenset[int]
    writes: frozenset[int]
    touches_sp: bool
    touches_x30: bool


def _sx(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _fit_signed(value: int, bits: int, what: str) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= value <= hi:
        raise FieldOverflow(f"{what} {value} does not fit in {bits} signed bits")
    return value & ((1 << bits) - 1)


def _fit_unsigned(value: int, bits: int, what: str) -> int:
    if not 0 <= value < (1 << bits):
        raise FieldOverflow(f"{what} {value} does not fit in {bits} bits")
    return value


def _branch_imm(offset: int, bits: int, what: str) -> int:
    if offset % 4:
        raise FieldOverflow(f"{what} {offset} is not a multiple of 4")
    return _fit_signed(offset // 4, bits, what)


# ---------------------------------------------------------------------------
# decode

def decode(word: int) -> Instruction:
    """Decode a 32-bit word; unsupported encodings yield Kind.UNKNOWN."""
    cached = _DECODE_CACHE.get(word)
    if cached is None:
        cached = _decode_uncached(word & 0xFFFFFFFF)
        _DECODE_CACHE[word] = cached
    return cached


def _decode_uncached(w: int) -> Instruction:
    rd = w & 0x1F
    rn = (w >> 5) & 0x1F

    if w == 0xD503201F:
        return Instruction(w, Kind.NOP)

    masked = w & 0xFFFFFC1F
    if masked == 0xD61F0000:
        return Instruction(w, Kind.BR, rn=rn)
    if masked == 0xD63F0000:
        return Instruction(w, Kind.BLR, rn=rn)
    if masked == 0xD65F0000:
        return Instruction(w, Kind.RET, rn=rn)

    group = w & 0xFFC00000
    if group in _LOADSTORE_BY_MASK:
        kind, mode, scale = _LOADSTORE_BY_MASK[group]
        if kind in (Kind.LDP, Kind.STP):
            imm7 = _sx((w >> 15) & 0x7F, 7)
            return Instruction(w, kind, rd=rd, rn=rn, rm=(w >> 10) & 0x1F,
                               imm=imm7 * 8, mode=mode)
        imm12 = (w >> 10) & 0xFFF
        return Instruction(w, kind, rd=rd, rn=rn, imm=imm12 * scale)

    group = w & 0xFFE00000
    if group in _REGOP_BY_MASK:
        return Instruction(w, _REGOP_BY_MASK[group], rd=rd, rn=rn,
                           rm=(w >> 16) & 0x1F, shift=(w >> 10) & 0x3F)

    group = w & 0xFF800000
    if group in _IMMOP_BY_MASK:
        kind = _IMMOP_BY_MASK[group]
        if kind in (Kind.MOVZ, Kind.MOVK, Kind.MOVN):
            return Instruction(w, kind, rd=rd, imm=(w >> 5) & 0xFFFF,
                               shift=((w >> 21) & 0x3) * 16)
        return Instruction(w, kind, rd=rd, rn=rn, imm=(w >> 10) & 0xFFF,
                           shift=12 * ((w >> 22) & 1))

    if w & 0xFF000010 == 0x54000000:
        cond = w & 0xF
        if cond == 0xF:
            return Instruction(w, Kind.UNKNOWN)
        return Instruction(w, Kind.BCOND, imm=_sx((w >> 5) & 0x7FFFF, 19) * 4,
                           cond=cond)

    group = w & 0xFF000000
    if group == 0xB4000000 or group == 0xB5000000:
        kind = Kind.CBZ if group == 0xB4000000 else Kind.CBNZ
        return Instruction(w, kind, rd=rd, imm=_sx((w >> 5) & 0x7FFFF, 19) * 4)

    group = w & 0x7F000000
    if group == 0x36000000 or group == 0x37000000:
        kind = Kind.TBZ if group == 0x36000000 else Kind.TBNZ
        bit = ((w >> 31) << 5) | ((w >> 19) & 0x1F)
        return Instruction(w, kind, rd=rd, imm=_sx((w >> 5) & 0x3FFF, 14) * 4,
                           shift=bit)

    group = w & 0xFC000000
    if group == 0x14000000 or group == 0x94000000:
        kind = Kind.B if group == 0x14000000 else Kind.BL
        return Instruction(w, kind, imm=_sx(w & 0x3FFFFFF, 26) * 4)

    group = w & 0x9F000000
    if group == 0x10000000 or group == 0x90000000:
        imm21 = _sx(((w >> 5) & 0x7FFFF) << 2 | ((w >> 29) & 0x3), 21)
        if group == 0x10000000:
            return Instruction(w, Kind.ADR, rd=rd, imm=imm21)
        return Instruction(w, Kind.ADRP, rd=rd, imm=imm21 * 4096)

    return Instruction(w, Kind.UNKNOWN)


_LOADSTORE_BY_MASK = {
    0xF9400000: (Kind.LDR_IMM, AddrMode.OFFSET, 8),
    0xF9000000: (Kind.STR_IMM, AddrMode.OFFSET, 8),
    0x39400000: (Kind.LDRB, AddrMode.OFFSET, 1),
    0x39000000: (Kind.STRB, AddrMode.OFFSET, 1),
    0xA9000000: (Kind.STP, AddrMode.OFFSET, 8),
    0xA9400000: (Kind.LDP, AddrMode.OFFSET, 8),
    0xA9800000: (Kind.STP, AddrMode.PRE, 8),
    0xA9C00000: (Kind.LDP, AddrMode.PRE, 8),
    0xA8800000: (Kind.STP, AddrMode.POST, 8),
    0xA8C00000: (Kind.LDP, AddrMode.POST, 8),
}

_REGOP_BY_MASK = {
    0x8B000000: Kind.ADD_REG,
    0xCB000000: Kind.SUB_REG,
    0xAA000000: Kind.ORR_REG,
}

_IMMOP_BY_MASK = {
    0x91000000: Kind.ADD_IMM,
    0xD1000000: Kind.SUB_IMM,
    0xF1000000: Kind.SUBS_IMM,
    0xD2800000: Kind.MOVZ,
    0xF2800000: Kind.MOVK,
    0x92800000: Kind.MOVN,
}

_DECODE_CACHE: dict[int, Instruction] = {}


# ---------------------------------------------------------------------------
# encode

def encode(inst: Instruction) -> int:
    """Re-encode an Instruction; raises FieldOverflow when a field won't fit."""
    k = inst.kind
    if k is Kind.UNKNOWN:
        return inst.raw & 0xFFFFFFFF
    try:
        enc = _ENCODERS[k]
    except KeyError:
        raise FieldOverflow(f"cannot encode kind {k}") from None
    return enc(inst)


def _reg(v: int, what: str) -> int:
    if not 0 <= v <= 31:
        raise FieldOverflow(f"{what} register index {v} out of range")
    return v


def _enc_arith_imm(base: int):
    def enc(i: Instruction) -> int:
        if i.shift not in (0, 12):
            raise FieldOverflow(f"imm shift {i.shift} not 0 or 12")
        imm12 = _fit_unsigned(i.imm, 12, "imm12")
        return (base | ((i.shift // 12) << 22) | (imm12 << 10)
                | (_reg(i.rn, "rn") << 5) | _reg(i.rd, "rd"))
    return enc


def _enc_arith_reg(base: int):
    def enc(i: Instruction) -> int:
        sh = _fit_unsigned(i.shift, 6, "reg shift")
        return (base | (_reg(i.rm, "rm") << 16) | (sh << 10)
                | (_reg(i.rn, "rn") << 5) | _reg(i.rd, "rd"))
    return enc


def _enc_movw(base: int):
    def enc(i: Instruction) -> int:
        if i.shift not in (0, 16, 32, 48):
            raise FieldOverflow(f"mov shift {i.shift} not a multiple of 16")
        imm16 = _fit_unsigned(i.imm, 16, "imm16")
        return base | ((i.shift // 16) << 21) | (imm16 << 5) | _reg(i.rd, "rd")
    return enc


def _enc_ldst(base: int, scale: int):
    def enc(i: Instruction) -> int:
        if i.imm % scale:
            raise FieldOverflow(f"offset {i.imm} not a multiple of {scale}")
        imm12 = _fit_unsigned(i.imm // scale, 12, "imm12 offset")
        return base | (imm12 << 10) | (_reg(i.rn, "rn") << 5) | _reg(i.rd, "rt")
    return enc


_PAIR_BASES = {
    (Kind.STP, AddrMode.OFFSET): 0xA9000000,
    (Kind.LDP, AddrMode.OFFSET): 0xA9400000,
    (Kind.STP, AddrMode.PRE): 0xA9800000,
    (Kind.LDP, AddrMode.PRE): 0xA9C00000,
    (Kind.STP, AddrMode.POST): 0xA8800000,
    (Kind.LDP, AddrMode.POST): 0xA8C00000,
}


def _enc_pair(i: Instruction) -> int:
    if i.imm % 8:
        raise FieldOverflow(f"pair offset {i.imm} not a multiple of 8")
    imm7 = _fit_signed(i.imm // 8, 7, "imm7 offset")
    return (_PAIR_BASES[(i.kind, i.mode)] | (imm7 << 15)
            | (_reg(i.rm, "rt2") << 10) | (_reg(i.rn, "rn") << 5)
            | _reg(i.rd, "rt"))


def _enc_b(base: int):
    def enc(i: Instruction) -> int:
        return base | _branch_imm(i.imm, 26, "branch offset")
    return enc


def _enc_bcond(i: Instruction) -> int:
    if not 0 <= i.cond <= 14:
        raise FieldOverflow(f"condition code {i.cond} out of range")
    return 0x54000000 | (_branch_imm(i.imm, 19, "branch offset") << 5) | i.cond


def _enc_cb(base: int):
    def enc(i: Instruction) -> int:
        return base | (_branch_imm(i.imm, 19, "branch offset") << 5) | _reg(i.rd, "rt")
    return enc


def _enc_tb(base: int):
    def enc(i: Instruction) -> int:
        bit = _fit_unsigned(i.shift, 6, "test bit")
        imm14 = _branch_imm(i.imm, 14, "branch offset")
        return (base | ((bit >> 5) << 31) | ((bit & 0x1F) << 19)
                | (imm14 << 5) | _reg(i.rd, "rt"))
    return enc


def _enc_br(base: int):
    def enc(i: Instruction) -> int:
        return base | (_reg(i.rn, "rn") << 5)
    return enc


def _enc_adr(i: Instruction) -> int:
    imm21 = _fit_signed(i.imm, 21, "adr offset")
    return (0x10000000 | ((imm21 & 0x3) << 29)
            | (((imm21 >> 2) & 0x7FFFF) << 5) | _reg(i.rd, "rd"))


def _enc_adrp(i: Instruction) -> int:
    if i.imm % 4096:
        raise FieldOverflow(f"adrp offset {i.imm} not page-aligned")
    imm21 = _fit_signed(i.imm // 4096, 21, "adrp page offset")
    return (0x90000000 | ((imm21 & 0x3) << 29)
            | (((imm21 >> 2) & 0x7FFFF) << 5) | _reg(i.rd, "rd"))


_ENCODERS = {
    Kind.ADD_IMM: _enc_arith_imm(0x91000000),
    Kind.SUB_IMM: _enc_arith_imm(0xD1000000),
    Kind.SUBS_IMM: _enc_arith_imm(0xF1000000),
    Kind.ADD_REG: _enc_arith_reg(0x8B000000),
    Kind.SUB_REG: _enc_arith_reg(0xCB000000),
    Kind.ORR_REG: _enc_arith_reg(0xAA000000),
    Kind.MOVZ: _enc_movw(0xD2800000),
    Kind.MOVK: _enc_movw(0xF2800000),
    Kind.MOVN: _enc_movw(0x92800000),
    Kind.LDR_IMM: _enc_ldst(0xF9400000, 8),
    Kind.STR_IMM: _enc_ldst(0xF9000000, 8),
    Kind.LDRB: _enc_ldst(0x39400000, 1),
    Kind.STRB: _enc_ldst(0x39000000, 1),
    Kind.LDP: _enc_pair,
    Kind.STP: _enc_pair,
    Kind.B: _enc_b(0x14000000),
    Kind.BL: _enc_b(0x94000000),
    Kind.BCOND: _enc_bcond,
    Kind.CBZ: _enc_cb(0xB4000000),
    Kind.CBNZ: _enc_cb(0xB5000000),
    Kind.TBZ: _enc_tb(0x36000000),
    Kind.TBNZ: _enc_tb(0x37000000),
    Kind.BR: _enc_br(0xD61F0000),
    Kind.BLR: _enc_br(0xD63F0000),
    Kind.RET: _enc_br(0xD65F0000),
    Kind.ADR: _enc_adr,
    Kind.ADRP: _enc_adrp,
    Kind.NOP: lambda i: 0xD503201F,
}


# ---------------------------------------------------------------------------
# branch editing

@dataclass(frozen=True)
class BranchInfo:
    is_direct_branch: bool
    is_call: bool
    offset_bytes: int | None


def branch_info(inst: Instruction) -> BranchInfo:
    """Report branch class and the byte offset relative to the instruction."""
    if inst.kind in BRANCH_KINDS:
        return BranchInfo(True, inst.kind is Kind.BL, inst.imm)
    if inst.kind in (Kind.BR, Kind.BLR, Kind.RET):
        return BranchInfo(False, inst.kind is Kind.BLR, None)
    return BranchInfo(False, False, None)


def retarget(inst: Instruction, new_offset_bytes: int) -> Instruction:
    """Return a copy with only the branch-offset field changed."""
    if inst.kind not in BRANCH_KINDS:
        raise NotABranch(f"{inst.kind} has no direct branch offset")
    out = replace(inst, imm=new_offset_bytes)
    return replace(out, raw=encode(out))


# ---------------------------------------------------------------------------
# register usage

_ALL_REGS = frozenset(range(32))
_EMPTY: frozenset[int] = frozenset()


def registers(inst: Instruction) -> RegUse:
    """Conservative read/write sets; Unknown reads and writes everything."""
    cached = _REGUSE_CACHE.get(inst)
    if cached is None:
        cached = _registers_uncached(inst)
        _REGUSE_CACHE[inst] = cached
    return cached


_REGUSE_CACHE: dict[Instruction, RegUse] = {}


def _registers_uncached(inst: Instruction) -> RegUse:
    k = inst.kind
    reads: set[int] = set()
    writes: set[int] = set()

    if k is Kind.UNKNOWN:
        return RegUse(_ALL_REGS, _ALL_REGS, True, True)
    elif k in (Kind.ADD_IMM, Kind.SUB_IMM):
        reads.add(inst.rn)          # 31 = SP
        writes.add(inst.rd)         # 31 = SP
    elif k is Kind.SUBS_IMM:
        reads.add(inst.rn)          # 31 = SP
        if inst.rd != 31:
            writes.add(inst.rd)     # 31 = XZR (discard)
    elif k in (Kind.ADD_REG, Kind.SUB_REG, Kind.ORR_REG):
        for r in (inst.rn, inst.rm):
            if r != 31:
                reads.add(r)        # 31 = XZR
        if inst.rd != 31:
            writes.add(inst.rd)
    elif k in (Kind.MOVZ, Kind.MOVN):
        if inst.rd != 31:
            writes.add(inst.rd)
    elif k is Kind.MOVK:
        if inst.rd != 31:
            reads.add(inst.rd)
            writes.add(inst.rd)
    elif k in (Kind.LDR_IMM, Kind.LDRB):
        reads.add(inst.rn)          # 31 = SP base
        if inst.rd != 31:
            writes.add(inst.rd)
    elif k in (Kind.STR_IMM, Kind.STRB):
        reads.add(inst.rn)
        if inst.rd != 31:
            reads.add(inst.rd)      # STR XZR stores zero
    elif k is Kind.LDP:
        reads.add(inst.rn)
        for r in (inst.rd, inst.rm):
            if r != 31:
                writes.add(r)
        if inst.mode is not AddrMode.OFFSET:
            writes.add(inst.rn)
    elif k is Kind.STP:
        reads.add(inst.rn)
        for r in (inst.rd, inst.rm):
            if r != 31:
                reads.add(r)
        if inst.mode is not AddrMode.OFFSET:
            writes.add(inst.rn)
    elif k is Kind.BL:
        writes.add(30)
    elif k in (Kind.CBZ, Kind.CBNZ, Kind.TBZ, Kind.TBNZ):
        if inst.rd != 31:
            reads.add(inst.rd)
    elif k in (Kind.BR, Kind.RET):
        if inst.rn != 31:
            reads.add(inst.rn)
    elif k is Kind.BLR:
        if inst.rn != 31:
            reads.add(inst.rn)
        writes.add(30)
    elif k in (Kind.ADR, Kind.ADRP):
        if inst.rd != 31:
            writes.add(inst.rd)
    # B, BCOND, NOP: no register operands

    sp_kinds = (Kind.ADD_IMM, Kind.SUB_IMM, Kind.SUBS_IMM, Kind.LDR_IMM,
                Kind.STR_IMM, Kind.LDRB, Kind.STRB, Kind.LDP, Kind.STP)
    touches_sp = k in sp_kinds and (31 in reads or 31 in writes)
    touches_x30 = 30 in reads or 30 in writes
    return RegUse(frozenset(reads), frozenset(writes), touches_sp, touches_x30)
