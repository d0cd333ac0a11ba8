"""Simplified object format (SOF): domain types plus binary reader/writer.

Layout is little-endian and fully deterministic. Header is exactly 16 bytes:
magic ``SOF1``, u32 version (1), u32 symbol count, u32 atom count. Names are
length-prefixed UTF-8 inline at every use. See docs/formats.md for the full
byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "Scope", "FixupKind", "Fixup", "EhEntry", "DebugLine", "FunctionAtom",
    "Symbol", "ObjectFile",
    "SofError", "BadMagic", "BadVersion", "TruncatedSection",
    "IndexOutOfRange", "DuplicateSymbol",
    "read_sof", "write_sof", "validate",
]

MAGIC = b"SOF1"
VERSION = 1

FLAG_DATA_IN_CODE = 0x01


class SofError(ValueError):
    """Base class for object-format violations."""


class BadMagic(SofError):
    pass


class BadVersion(SofError):
    pass


class TruncatedSection(SofError):
    pass


class IndexOutOfRange(SofError):
    """An index field violates a structural invariant."""


class DuplicateSymbol(SofError):
    pass


class Scope(Enum):
    LOCAL = 0
    GLOBAL = 1


class FixupKind(Enum):
    CALL26 = 0
    BRANCH26 = 1
    ADR21 = 2
    ADRP21_PAGE = 3
    DATA_IN_CODE_RANGE = 4


# instruction bits each fixup kind patches; zero in stored words
FIELD_MASKS = {
    FixupKind.CALL26: 0x03FFFFFF,
    FixupKind.BRANCH26: 0x03FFFFFF,
    FixupKind.ADR21: 0x60FFFFE0,
    FixupKind.ADRP21_PAGE: 0x60FFFFE0,
}


@dataclass(frozen=True)
class Fixup:
    """Symbolic reference from an instruction field to a symbol.

    The bits covered by the fixup are zero in the stored word. For
    DATA_IN_CODE_RANGE, ``length`` counts the non-instruction words in the
    span and ``target`` is empty.
    """

    instruction_index: int
    kind: FixupKind
    target: str
    addend: int = 0
    length: int = 0


@dataclass(frozen=True)
class EhEntry:
    """Covered range [start_index, end_index) with optional landing pad."""

    start_index: int
    end_index: int
    landing_pad_index: int | None
    action_id: int


@dataclass(frozen=True)
class DebugLine:
    instruction_index: int
    file_id: int
    line: int


@dataclass
class FunctionAtom:
    """A named unit of code: instruction words plus their metadata."""

    name: str
    words: list[int]
    fixups: list[Fixup] = field(default_factory=list)
    eh_entries: list[EhEntry] = field(default_factory=list)
    debug_lines: list[DebugLine] = field(default_factory=list)
    has_data_in_code: bool = False

    def size_bytes(self) -> int:
        return 4 * len(self.words)


@dataclass(frozen=True)
class Symbol:
    name: str
    scope: Scope
    atom_index: int


@dataclass
class ObjectFile:
    symbols: list[Symbol] = field(default_factory=list)
    atoms: list[FunctionAtom] = field(default_factory=list)


def validate(obj: ObjectFile) -> None:
    """Raise a SofError subclass on any structural invariant violation."""
    seen: set[str] = set()
    for sym in obj.symbols:
        if sym.name in seen:
            raise DuplicateSymbol(f"duplicate symbol name {sym.name!r}")
        seen.add(sym.name)
        if not 0 <= sym.atom_index < len(obj.atoms):
            raise IndexOutOfRange(
                f"symbol {sym.name!r} atom index {sym.atom_index} out of range")
    for atom in obj.atoms:
        n = len(atom.words)
        if n < 1:
            raise IndexOutOfRange(f"atom {atom.name!r} has no instructions")
        for fx in atom.fixups:
            if not 0 <= fx.instruction_index < n:
                raise IndexOutOfRange(
                    f"atom {atom.name!r} fixup index {fx.instruction_index} "
                    f">= instruction count {n}")
            if fx.kind is FixupKind.DATA_IN_CODE_RANGE:
                if fx.instruction_index + fx.length > n:
                    raise IndexOutOfRange(
                        f"atom {atom.name!r} data-in-code range overruns atom")
            else:
                covered = FIELD_MASKS[fx.kind]
                if atom.words[fx.instruction_index] & covered:
                    raise IndexOutOfRange(
                        f"atom {atom.name!r} word at {fx.instruction_index} "
                        f"has nonzero bits in its {fx.kind.name} field")
        for eh in atom.eh_entries:
            if not 0 <= eh.start_index < eh.end_index <= n:
                raise IndexOutOfRange(
                    f"atom {atom.name!r} EH range [{eh.start_index},"
                    f"{eh.end_index}) invalid for count {n}")
            if eh.landing_pad_index is not None and not 0 <= eh.landing_pad_index < n:
                raise IndexOutOfRange(
                    f"atom {atom.name!r} landing pad {eh.landing_pad_index} "
                    f"out of range")
        last = -1
        for dl in atom.debug_lines:
            if not 0 <= dl.instruction_index < n:
                raise IndexOutOfRange(
                    f"atom {atom.name!r} debug line index out of range")
            if dl.instruction_index < last:
                raise IndexOutOfRange(
                    f"atom {atom.name!r} debug lines not sorted")
            last = dl.instruction_index


# ---------------------------------------------------------------------------
# binary writer

LP_ABSENT = 0xFFFFFFFF


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def i64(self, v: int) -> None:
        self.parts.append(struct.pack("<q", v))

    def name(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def words(self, ws: list[int]) -> None:
        self.parts.append(struct.pack("<%dI" % len(ws), *ws))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


def write_sof(obj: ObjectFile) -> bytes:
    validate(obj)
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    w.u32(len(obj.symbols))
    w.u32(len(obj.atoms))
    for sym in obj.symbols:
        w.name(sym.name)
        w.u8(sym.scope.value)
        w.u32(sym.atom_index)
    for atom in obj.atoms:
        w.name(atom.name)
        w.u8(FLAG_DATA_IN_CODE if atom.has_data_in_code else 0)
        w.u32(len(atom.words))
        if atom.words:
            w.words(atom.words)
        w.u32(len(atom.fixups))
        for fx in atom.fixups:
            w.u32(fx.instruction_index)
            w.u8(fx.kind.value)
            w.name(fx.target)
            w.i64(fx.addend)
            w.u32(fx.length)
        w.u32(len(atom.eh_entries))
        for eh in atom.eh_entries:
            w.u32(eh.start_index)
            w.u32(eh.end_index)
            w.u32(LP_ABSENT if eh.landing_pad_index is None else eh.landing_pad_index)
            w.u32(eh.action_id)
        w.u32(len(atom.debug_lines))
        for dl in atom.debug_lines:
            w.u32(dl.instruction_index)
            w.u32(dl.file_id)
            w.u32(dl.line)
    return w.getvalue()


# ---------------------------------------------------------------------------
# binary reader

class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedSection(f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def i64(self, what: str) -> int:
        return struct.unpack("<q", self.take(8, what))[0]

    def name(self, what: str) -> str:
        n = self.u32(what + " length")
        return self.take(n, what).decode("utf-8")

    def words(self, n: int, what: str) -> list[int]:
        raw = self.take(4 * n, what)
        return list(struct.unpack("<%dI" % n, raw))


def read_sof(data: bytes) -> ObjectFile:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not a SOF file")
    version = r.u32("version")
    if version != VERSION:
        raise BadVersion(f"unsupported SOF version {version}")
    nsyms = r.u32("symbol count")
    natoms = r.u32("atom count")

    obj = ObjectFile()
    for _ in range(nsyms):
        name = r.name("symbol name")
        scope_v = r.u8("symbol scope")
        try:
            scope = Scope(scope_v)
        except ValueError:
            raise IndexOutOfRange(f"bad symbol scope {scope_v}") from None
        obj.symbols.append(Symbol(name, scope, r.u32("symbol atom index")))
    for _ in range(natoms):
        name = r.name("atom name")
        flags = r.u8("atom flags")
        nwords = r.u32("word count")
        words = r.words(nwords, "instruction words")
        fixups = []
        for _ in range(r.u32("fixup count")):
            idx = r.u32("fixup index")
            kind_v = r.u8("fixup kind")
            try:
                kind = FixupKind(kind_v)
            except ValueError:
                raise IndexOutOfRange(f"bad fixup kind {kind_v}") from None
            target = r.name("fixup target")
            addend = r.i64("fixup addend")
            length = r.u32("fixup range length")
            fixups.append(Fixup(idx, kind, target, addend, length))
        ehs = []
        for _ in range(r.u32("eh count")):
            start = r.u32("eh start")
            end = r.u32("eh end")
            lp = r.u32("eh landing pad")
            action = r.u32("eh action")
            ehs.append(EhEntry(start, end, None if lp == LP_ABSENT else lp, action))
        lines = []
        for _ in range(r.u32("line count")):
            lines.append(DebugLine(r.u32("line index"), r.u32("line file"),
                                   r.u32("line number")))
        obj.atoms.append(FunctionAtom(
            name, words, fixups, ehs, lines,
            has_data_in_code=bool(flags & FLAG_DATA_IN_CODE)))
    if r.pos != len(data):
        raise TruncatedSection(f"{len(data) - r.pos} trailing bytes after atoms")
    validate(obj)
    return obj
