"""Interpreter for the supported instruction subset over a flat memory image.

This is the correctness oracle: optimized and unoptimized links of the same
program must agree on return value, memory digest, and fault kind for every
test vector. Determinism is a hard requirement; there is no I/O, no clock,
and no floating point.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, auto

from .analysis import HASH_PRIME, HASH_SEED, MASK64
from .isa import AddrMode, Kind, decode

__all__ = ["Fault", "RunResult", "Machine", "run_image", "differential"]

DEFAULT_MEMORY = 1 << 20
DEFAULT_TEXT_BASE = 0x10000
DEFAULT_FUEL = 1_000_000
# memory digest covers [DIGEST_BASE, DIGEST_END): above any realistic text,
# below the stack, so it sees program data but neither layout-dependent code
# bytes nor dead stack slots holding stale return addresses
DIGEST_BASE = 0x80000
DIGEST_END = 0xF0000


_CHUNK = 4096
_ZERO_CHUNK = bytes(_CHUNK)
_ZERO_FOLD = {n: pow(HASH_PRIME, n, 1 << 64) for n in range(_CHUNK + 1)}


class Fault(Enum):
    UNKNOWN_INSTRUCTION = auto()
    UNMAPPED_ADDRESS = auto()
    ALIGNMENT_FAULT = auto()
    FUEL_EXHAUSTED = auto()


@dataclass(frozen=True)
class RunResult:
    return_value: int
    memory_digest: int
    steps: int
    fault: Fault | None


class Machine:
    """Register file, flags, and flat memory; one run per instance."""

    def __init__(self, memory_size: int = DEFAULT_MEMORY,
                 text_base: int = DEFAULT_TEXT_BASE) -> None:
        self.x = [0] * 31
        self.sp = memory_size
        self.pc = 0
        self.n = self.z = self.c = self.v = 0
        self.memory = bytearray(memory_size)
        self.text_base = text_base
        self.text_end = text_base

    def load_text(self, text: bytes) -> None:
        end = self.text_base + len(text)
        if end > len(self.memory):
            raise ValueError("text does not fit in memory")
        self.memory[self.text_base:end] = text
        self.text_end = end

    # register slot 31 reads as zero / discards unless sp_ok
    def _rget(self, i: int, sp_ok: bool = False) -> int:
        if i == 31:
            return self.sp if sp_ok else 0
        return self.x[i]

    def _rset(self, i: int, value: int, sp_ok: bool = False) -> None:
        value &= MASK64
        if i == 31:
            if sp_ok:
                self.sp = value
            return
        self.x[i] = value

    def _mem_ok(self, addr: int, size: int) -> bool:
        return 0 <= addr and addr + size <= len(self.memory)

    def run(self, entry: int, args: list[int], fuel: int) -> RunResult:
        for i, a in enumerate(args[:8]):
            self.x[i] = a & MASK64
        self.pc = entry
        depth = 0
        steps = 0
        fault: Fault | None = None

        mem = self.memory
        while True:
            if steps >= fuel:
                fault = Fault.FUEL_EXHAUSTED
                break
            if self.pc % 4 or not self.text_base <= self.pc < self.text_end:
                fault = Fault.UNMAPPED_ADDRESS
                break
            word = int.from_bytes(mem[self.pc:self.pc + 4], "little")
            inst = decode(word)
            k = inst.kind
            steps += 1
            next_pc = self.pc + 4

            if k is Kind.NOP:
                pass
            elif k is Kind.ADD_IMM:
                self._rset(inst.rd, self._rget(inst.rn, True)
                           + (inst.imm << inst.shift), sp_ok=True)
            elif k is Kind.SUB_IMM:
                self._rset(inst.rd, self._rget(inst.rn, True)
                           - (inst.imm << inst.shift), sp_ok=True)
            elif k is Kind.SUBS_IMM:
                a = self._rget(inst.rn, True)
                b = (inst.imm << inst.shift) & MASK64
                res = (a - b) & MASK64
                self.n = res >> 63
                self.z = 1 if res == 0 else 0
                self.c = 1 if a >= b else 0
                self.v = ((a ^ b) & (a ^ res)) >> 63
                if inst.rd != 31:
                    self.x[inst.rd] = res
            elif k is Kind.ADD_REG:
                self._rset(inst.rd, self._rget(inst.rn)
                           + (self._rget(inst.rm) << inst.shift))
            elif k is Kind.SUB_REG:
                self._rset(inst.rd, self._rget(inst.rn)
                           - (self._rget(inst.rm) << inst.shift))
            elif k is Kind.ORR_REG:
                self._rset(inst.rd, self._rget(inst.rn)
                           | ((self._rget(inst.rm) << inst.shift) & MASK64))
            elif k is Kind.MOVZ:
                self._rset(inst.rd, inst.imm << inst.shift)
            elif k is Kind.MOVN:
                self._rset(inst.rd, ~(inst.imm << inst.shift))
            elif k is Kind.MOVK:
                keep = self._rget(inst.rd) & ~(0xFFFF << inst.shift)
                self._rset(inst.rd, keep | (inst.imm << inst.shift))
            elif k in (Kind.LDR_IMM, Kind.LDRB, Kind.STR_IMM, Kind.STRB):
                addr = self._rget(inst.rn, True) + inst.imm
                size = 8 if k in (Kind.LDR_IMM, Kind.STR_IMM) else 1
                if not self._mem_ok(addr, size):
                    fault = Fault.UNMAPPED_ADDRESS
                    break
                if k is Kind.LDR_IMM:
                    self._rset(inst.rd, int.from_bytes(mem[addr:addr + 8], "little"))
                elif k is Kind.LDRB:
                    self._rset(inst.rd, mem[addr])
                elif k is Kind.STR_IMM:
                    mem[addr:addr + 8] = self._rget(inst.rd).to_bytes(8, "little")
                else:
                    mem[addr] = self._rget(inst.rd) & 0xFF
            elif k in (Kind.LDP, Kind.STP):
                base = self._rget(inst.rn, True)
                addr = base if inst.mode is AddrMode.POST else base + inst.imm
                if not self._mem_ok(addr, 16):
                    fault = Fault.UNMAPPED_ADDRESS
                    break
                if k is Kind.LDP:
                    self._rset(inst.rd, int.from_bytes(mem[addr:addr + 8], "little"))
                    self._rset(inst.rm, int.from_bytes(mem[addr + 8:addr + 16],
                                                       "little"))
                else:
                    mem[addr:addr + 8] = self._rget(inst.rd).to_bytes(8, "little")
                    mem[addr + 8:addr + 16] = self._rget(inst.rm).to_bytes(8, "little")
                if inst.mode is not AddrMode.OFFSET:
                    self._rset(inst.rn, base + inst.imm, sp_ok=True)
            elif k is Kind.B:
                next_pc = self.pc + inst.imm
            elif k is Kind.BL:
                if self.sp % 16:
                    fault = Fault.ALIGNMENT_FAULT
                    break
                self.x[30] = next_pc
                next_pc = self.pc + inst.imm
                depth += 1
            elif k is Kind.BCOND:
                if self._cond(inst.cond):
                    next_pc = self.pc + inst.imm
            elif k is Kind.CBZ:
                if self._rget(inst.rd) == 0:
                    next_pc = self.pc + inst.imm
            elif k is Kind.CBNZ:
                if self._rget(inst.rd) != 0:
                    next_pc = self.pc + inst.imm
            elif k is Kind.TBZ:
                if not (self._rget(inst.rd) >> inst.shift) & 1:
                    next_pc = self.pc + inst.imm
            elif k is Kind.TBNZ:
                if (self._rget(inst.rd) >> inst.shift) & 1:
                    next_pc = self.pc + inst.imm
            elif k is Kind.BR:
                next_pc = self._rget(inst.rn)
            elif k is Kind.BLR:
                if self.sp % 16:
                    fault = Fault.ALIGNMENT_FAULT
                    break
                target = self._rget(inst.rn)
                self.x[30] = next_pc
                next_pc = target
                depth += 1
            elif k is Kind.RET:
                if depth == 0:
                    break
                depth -= 1
                next_pc = self._rget(inst.rn)
            elif k is Kind.ADR:
                self._rset(inst.rd, self.pc + inst.imm)
            elif k is Kind.ADRP:
                self._rset(inst.rd, (self.pc & ~0xFFF) + inst.imm)
            else:
                fault = Fault.UNKNOWN_INSTRUCTION
                break

            self.pc = next_pc

        return RunResult(self.x[0], self._digest(), steps, fault)

    def _cond(self, cond: int) -> bool:
        n, z, c, v = self.n, self.z, self.c, self.v
        base = cond >> 1
        if base == 0:
            result = z == 1
        elif base == 1:
            result = c == 1
        elif base == 2:
            result = n == 1
        elif base == 3:
            result = v == 1
        elif base == 4:
            result = c == 1 and z == 0
        elif base == 5:
            result = n == v
        elif base == 6:
            result = n == v and z == 0
        else:
            return True  # AL
        if cond & 1:
            result = not result
        return result

    def _digest(self) -> int:
        # FNV-1a over the digest window; a zero byte folds as h *= P, so
        # all-zero chunks collapse to one modular multiplication
        h = HASH_SEED
        view = memoryview(self.memory)[DIGEST_BASE:DIGEST_END]
        for start in range(0, len(view), _CHUNK):
            chunk = view[start:start + _CHUNK]
            if chunk == _ZERO_CHUNK[:len(chunk)]:
                h = (h * _ZERO_FOLD[len(chunk)]) & MASK64
            else:
                for b in chunk:
                    h = ((h ^ b) * HASH_PRIME) & MASK64
        return h


def run_image(text: bytes, entry_address: int, args: list[int] | None = None,
              fuel: int = DEFAULT_FUEL, memory_size: int | None = None,
              text_base: int = DEFAULT_TEXT_BASE) -> RunResult:
    if memory_size is None:
        memory_size = max(DEFAULT_MEMORY, text_base + len(text) + (1 << 16))
    m = Machine(memory_size, text_base)
    m.load_text(text)
    return m.run(entry_address, args or [], fuel)


@dataclass(frozen=True)
class DifferentialVerdict:
    passed: bool
    vectors_run: int
    mismatches: list[str]
    warning: str | None = None


def differential(run_a, run_b, vectors: list[list[int]],
                 fuel: int = DEFAULT_FUEL) -> DifferentialVerdict:
    """Compare two linked images on every test vector.

    ``run_a``/``run_b`` are callables (args, fuel) -> RunResult, normally
    closures over run_image with each image's entry address.
    """
    if not vectors:
        return DifferentialVerdict(True, 0, [],
                                   warning="no test vectors; vacuous pass")
    mismatches = []
    for vec in vectors:
        ra = run_a(vec, fuel)
        rb = run_b(vec, fuel)
        same = (ra.return_value == rb.return_value
                and ra.memory_digest == rb.memory_digest
                and ra.fault == rb.fault)
        if not same:
            mismatches.append(
                f"args={vec}: a=(ret={ra.return_value:#x}, "
                f"digest={ra.memory_digest:#x}, fault={ra.fault}) "
                f"b=(ret={rb.return_value:#x}, digest={rb.memory_digest:#x}, "
                f"fault={rb.fault})")
    return DifferentialVerdict(not mismatches, len(vectors), mismatches)
