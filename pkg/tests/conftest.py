"""Shared corpus-building helpers for the test suite."""

import random

import pytest

from sizelink import asm
from sizelink.isa import Instruction, Kind, encode
from sizelink.objfmt import DebugLine, FunctionAtom, ObjectFile


def assemble(text: str) -> ObjectFile:
    return asm.assemble(text)


def w(kind: Kind, **kw) -> int:
    return encode(Instruction(0, kind, **kw))


RET = w(Kind.RET, rn=30)
NOP = w(Kind.NOP)


def alu_atom(name: str, seed: int, count: int, *, file_id: int = 1) -> FunctionAtom:
    """Straight-line ALU atom ending in RET, deterministic per seed."""
    rng = random.Random(seed)
    words = []
    for _ in range(count - 1):
        if rng.random() < 0.5:
            words.append(w(Kind.MOVZ, rd=rng.randint(0, 8),
                           imm=rng.randint(0, 4095)))
        else:
            words.append(w(Kind.ADD_IMM, rd=rng.randint(0, 8),
                           rn=rng.randint(0, 8), imm=rng.randint(0, 255)))
    words.append(RET)
    return FunctionAtom(name, words,
                        debug_lines=[DebugLine(0, file_id, seed + 1)])


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)
