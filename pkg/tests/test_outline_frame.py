"""Frame detection, stack-offset normalization, red-zone safety, and helper
sharing."""

import pytest

from conftest import RET, assemble, w
from sizelink.isa import Kind, decode
from sizelink.objfmt import FunctionAtom
from sizelink.outline_frame import (
    RedZoneViolation, detect_frames, normalize, outline_frames,
)

FIG4_PROLOG = """    sub sp, sp, #320
    stp x19, x20, [sp, #224]
    stp x21, x22, [sp, #240]
    stp x23, x24, [sp, #256]
    stp x25, x26, [sp, #272]
    stp x27, x28, [sp, #288]
    stp x29, x30, [sp, #304]
    add x29, sp, #304
"""

FIG4_EPILOG = """    ldp x29, x30, [sp, #304]
    ldp x27, x28, [sp, #288]
    ldp x25, x26, [sp, #272]
    ldp x23, x24, [sp, #256]
    ldp x21, x22, [sp, #240]
    ldp x19, x20, [sp, #224]
    add sp, sp, #320
    ret
"""


def fig4_atom(body="    movz x0, #1\n"):
    obj = assemble(f".func _f\n{FIG4_PROLOG}{body}{FIG4_EPILOG}.endfunc\n")
    return obj.atoms[0]


def test_detect_fig4_shape():
    frames = detect_frames(fig4_atom())
    assert frames is not None
    shape = frames.shape
    assert shape.callee_save_bytes == 96
    assert shape.local_bytes == 224
    assert shape.total == 320
    assert shape.sets_frame_pointer
    assert shape.pairs == ((19, 20), (21, 22), (23, 24), (25, 26), (27, 28),
                           (29, 30))
    assert frames.prolog.start == 0 and frames.prolog.end == 8
    assert len(frames.epilogs) == 1


def test_leaf_function_detects_none():
    atom = FunctionAtom("_leaf", [w(Kind.MOVZ, rd=0, imm=1), RET])
    assert detect_frames(atom) is None


def test_degenerate_no_locals_shape():
    obj = assemble(""".func _f
    sub sp, sp, #16
    stp x29, x30, [sp]
    movz x0, #1
    ldp x29, x30, [sp]
    add sp, sp, #16
    ret
.endfunc
""")
    frames = detect_frames(obj.atoms[0])
    assert frames is not None
    assert frames.shape.callee_save_bytes == 16
    assert frames.shape.local_bytes == 0
    assert not frames.shape.sets_frame_pointer


def test_normalize_fig4_offsets():
    atom = fig4_atom()
    frames = detect_frames(atom)
    out, norm_map = normalize(atom, frames)
    insts = [decode(word) for word in atom.words]
    assert insts[0].kind is Kind.SUB_IMM and insts[0].imm == 96
    offsets = [insts[i].imm for i in range(1, 7)]
    assert offsets == [0, 16, 32, 48, 64, 80]
    assert insts[7].kind is Kind.ADD_IMM and insts[7].rd == 29
    assert insts[7].imm == 80
    assert insts[8].kind is Kind.SUB_IMM and insts[8].imm == 224
    # epilog mirrored: leading add sp,#224, ldps at 0..80, add sp,#96, ret
    ep = out.epilogs[-1]
    lead = decode(atom.words[ep.start - 1])
    assert lead.kind is Kind.ADD_IMM and lead.imm == 224
    tail = [decode(atom.words[i]) for i in ep.indices()]
    assert tail[-1].kind is Kind.RET
    assert tail[-2].imm == 96
    assert {t.imm for t in tail[:-2]} == {0, 16, 32, 48, 64, 80}
    # total SP displacement preserved
    assert out.shape.callee_save_bytes == 96
    assert out.shape.local_bytes == 0   # post-normalization shape folds L out


def test_normalize_noop_when_no_locals():
    obj = assemble(""".func _f
    sub sp, sp, #32
    stp x19, x20, [sp]
    stp x29, x30, [sp, #16]
    movz x0, #1
    ldp x19, x20, [sp]
    ldp x29, x30, [sp, #16]
    add sp, sp, #32
    ret
.endfunc
""")
    atom = obj.atoms[0]
    words_before = list(atom.words)
    frames = detect_frames(atom)
    _frames2, norm_map = normalize(atom, frames)
    assert atom.words == words_before
    assert norm_map.is_identity()


def test_normalize_interleaved_store_rebased():
    obj = assemble(""".func _f
    sub sp, sp, #48
    stp x29, x30, [sp, #32]
    str x5, [sp, #8]
    movz x0, #1
    ldp x29, x30, [sp, #32]
    add sp, sp, #48
    ret
.endfunc
""")
    atom = obj.atoms[0]
    frames = detect_frames(atom)
    assert frames is not None and frames.prolog_extras == [2]
    # rebased offset 8 - 32 = -24: within the red zone but unencodable as
    # an unsigned str offset, so normalization refuses
    with pytest.raises(ValueError):
        normalize(atom, frames)


def test_red_zone_violation_skips_normalization():
    # L=208: an interleaved pair store at [sp, #16] would rebase to -192,
    # beyond the 128-byte red zone
    obj = assemble(""".func _f
    sub sp, sp, #224
    stp x4, x5, [sp, #16]
    stp x29, x30, [sp, #208]
    movz x0, #1
    ldp x29, x30, [sp, #208]
    add sp, sp, #224
    ret
.endfunc
""")
    atom = obj.atoms[0]
    words_before = list(atom.words)
    frames = detect_frames(atom)
    assert frames is not None
    with pytest.raises(RedZoneViolation):
        normalize(atom, frames)
    result = outline_frames([atom])
    assert result.red_zone_skips == 1
    assert atom.words == words_before      # atom untouched


def test_red_zone_boundary_allows_128():
    # rebase to exactly -128 stays inside the red zone
    obj = assemble(""".func _f
    sub sp, sp, #160
    stp x4, x5, [sp, #16]
    stp x29, x30, [sp, #144]
    movz x0, #1
    ldp x29, x30, [sp, #144]
    add sp, sp, #160
    ret
.endfunc
""")
    atom = obj.atoms[0]
    frames = detect_frames(atom)
    out, _norm_map = normalize(atom, frames)
    assert out is not None
    rebased = decode(atom.words[1])
    assert rebased.kind is Kind.STP and rebased.imm == -128


def make_shape_group(count, *, locals_bytes=0, tag=0):
    atoms = []
    for i in range(count):
        total = locals_bytes + 32
        text = f""".func _g{tag}_{i}
    sub sp, sp, #{total}
    stp x19, x20, [sp, #{locals_bytes}]
    stp x29, x30, [sp, #{locals_bytes + 16}]
    add x29, sp, #{total - 16}
    movz x0, #{i + 1}
    movz x19, #7
    ldp x29, x30, [sp, #{locals_bytes + 16}]
    ldp x19, x20, [sp, #{locals_bytes}]
    add sp, sp, #{total}
    ret
.endfunc
"""
        atoms.append(assemble(text).atoms[0])
    return atoms


def test_fifty_functions_share_one_helper_pair():
    atoms = make_shape_group(50)
    before = sum(a.size_bytes() for a in atoms)
    result = outline_frames(atoms)
    helpers = [a.name for a in result.new_atoms]
    assert helpers == ["__frame_save_x19x20_x29x30_fp",
                       "__frame_restore_x19x20_x29x30"]
    assert result.shapes_outlined == 1
    # L == 0: prolog shrinks from 4 words to 2 (mov x16,x30; bl helper)
    prolog = [decode(word) for word in atoms[0].words[:2]]
    assert prolog[0].kind is Kind.ORR_REG and prolog[0].rd == 16
    assert prolog[1].kind is Kind.BL
    after = (sum(a.size_bytes() for a in atoms)
             + sum(a.size_bytes() for a in result.new_atoms))
    assert before - after == result.bytes_saved > 0


def test_eight_word_prolog_shrinks_to_two():
    # the paper-scale shape: 6 pairs + fp, no locals: 8 -> 2 words per site
    text_parts = []
    for i in range(50):
        text_parts.append(f""".func _big{i}
    sub sp, sp, #96
    stp x19, x20, [sp]
    stp x21, x22, [sp, #16]
    stp x23, x24, [sp, #32]
    stp x25, x26, [sp, #48]
    stp x27, x28, [sp, #64]
    stp x29, x30, [sp, #80]
    add x29, sp, #80
    movz x0, #{i}
    ldp x29, x30, [sp, #80]
    ldp x27, x28, [sp, #64]
    ldp x25, x26, [sp, #48]
    ldp x23, x24, [sp, #32]
    ldp x21, x22, [sp, #16]
    ldp x19, x20, [sp]
    add sp, sp, #96
    ret
.endfunc
""")
    atoms = [assemble(t).atoms[0] for t in text_parts]
    original_len = len(atoms[0].words)
    assert original_len == 8 + 1 + 8
    result = outline_frames(atoms)
    assert result.shapes_outlined == 1
    assert len(atoms[0].words) == 2 + 1 + 1   # mov+bl, body, b helper


def test_unique_shape_left_untouched():
    atoms = make_shape_group(1)
    words_before = list(atoms[0].words)
    result = outline_frames(atoms)
    assert result.new_atoms == []
    assert atoms[0].words == words_before


def test_shapes_differing_only_in_locals_share_helpers():
    group_a = make_shape_group(4, locals_bytes=0, tag=1)
    group_b = make_shape_group(4, locals_bytes=48, tag=2)
    atoms = group_a + group_b
    result = outline_frames(atoms)
    assert len(result.new_atoms) == 2      # one save + one restore
    # the L=48 members keep their locals adjustment at the site
    site = atoms[4]
    insts = [decode(word) for word in site.words]
    assert insts[0].kind is Kind.ORR_REG          # mov x16, x30
    assert insts[1].kind is Kind.BL
    assert insts[2].kind is Kind.SUB_IMM and insts[2].imm == 48
    # epilog site: add sp,#48 then b helper
    assert insts[-2].kind is Kind.ADD_IMM and insts[-2].imm == 48
    assert insts[-1].kind is Kind.B


def test_helper_bodies_are_canonical():
    atoms = make_shape_group(5)
    result = outline_frames(atoms)
    save = next(a for a in result.new_atoms if "save" in a.name)
    restore = next(a for a in result.new_atoms if "restore" in a.name)
    si = [decode(word) for word in save.words]
    assert si[0].kind is Kind.SUB_IMM and si[0].imm == 32
    assert si[1].kind is Kind.STP and (si[1].rd, si[1].rm) == (19, 20)
    assert si[2].kind is Kind.STP and (si[2].rd, si[2].rm) == (29, 16)
    assert si[3].kind is Kind.ADD_IMM and si[3].rd == 29
    assert si[4].kind is Kind.RET
    ri = [decode(word) for word in restore.words]
    assert ri[0].kind is Kind.LDP and (ri[0].rd, ri[0].rm) == (19, 20)
    assert ri[1].kind is Kind.LDP and (ri[1].rd, ri[1].rm) == (29, 30)
    assert ri[2].kind is Kind.ADD_IMM and ri[2].imm == 32
    assert ri[3].kind is Kind.RET


def test_frame_without_x30_pair_not_outlined():
    text = """.func _nolr{i}
    sub sp, sp, #32
    stp x19, x20, [sp]
    stp x21, x22, [sp, #16]
    movz x0, #1
    ldp x19, x20, [sp]
    ldp x21, x22, [sp, #16]
    add sp, sp, #32
    ret
.endfunc
"""
    atoms = [assemble(text.replace("{i}", str(i))).atoms[0] for i in range(20)]
    result = outline_frames(atoms)
    assert result.new_atoms == []


def test_interior_epilog_also_rewritten():
    text = """.func _two{i}
    sub sp, sp, #32
    stp x19, x20, [sp]
    stp x29, x30, [sp, #16]
    cbz x0, .Learly
    movz x0, #1
    ldp x19, x20, [sp]
    ldp x29, x30, [sp, #16]
    add sp, sp, #32
    ret
.Learly:
    movz x0, #2
    ldp x19, x20, [sp]
    ldp x29, x30, [sp, #16]
    add sp, sp, #32
    ret
.endfunc
"""
    atoms = [assemble(text.replace("{i}", str(i))).atoms[0] for i in range(20)]
    frames = detect_frames(atoms[0])
    assert frames is not None and len(frames.epilogs) == 2
    result = outline_frames(atoms)
    assert result.shapes_outlined == 1
    assert result.sites_rewritten == 20 * 3   # 1 prolog + 2 epilogs each
