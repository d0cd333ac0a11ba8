"""Identical code folding: grouping, thunks, pointer identity, fixpoint
iteration, and collision gating."""

from conftest import RET, assemble, w
from sizelink.emulator import run_image
from sizelink.icf import IcfMode, fold
from sizelink.isa import Kind, decode
from sizelink.linker import LinkOptions, link
from sizelink.objfmt import Fixup, FixupKind, FunctionAtom


def setter_atoms(count):
    # the two-instruction store-one-byte setter motif
    words = [w(Kind.STRB, rd=1, rn=0, imm=8), RET]
    return [FunctionAtom(f"_set{i}", list(words)) for i in range(count)]


def test_fig6_three_identical_setters_safe():
    atoms = setter_atoms(3)
    outcome = fold(atoms, [True] * 3, IcfMode.SAFE, 1)
    assert outcome.report.bytes_saved == 8        # 24 -> 8 + 2*4
    assert outcome.report.atoms_folded == 2
    assert outcome.kept == [0, 1, 2]              # thunks keep their slots
    for dup in (atoms[1], atoms[2]):
        assert len(dup.words) == 1                # single-instruction thunk
        assert decode(dup.words[0]).kind is Kind.B
        assert dup.fixups == [Fixup(0, FixupKind.BRANCH26, "_set0", 0)]


def test_fig6_three_identical_setters_all():
    atoms = setter_atoms(3)
    outcome = fold(atoms, [True] * 3, IcfMode.ALL, 1)
    assert outcome.report.bytes_saved == 16       # 24 -> 8
    assert outcome.kept == [0]
    assert outcome.aliases == {"_set1": "_set0", "_set2": "_set0"}


def test_two_thousand_identical_functions():
    n = 2000
    atoms = setter_atoms(n)
    outcome = fold(atoms, [True] * n, IcfMode.SAFE, 1)
    assert outcome.report.bytes_saved == 8 * n - (8 + 4 * (n - 1))
    assert outcome.report.bytes_saved == 7996


def test_global_atoms_never_fold():
    atoms = setter_atoms(4)
    outcome = fold(atoms, [False, True, True, False], IcfMode.ALL, 5)
    assert outcome.aliases == {"_set2": "_set1"}
    assert 0 in outcome.kept and 3 in outcome.kept


def test_representative_is_earliest_in_layout():
    atoms = setter_atoms(5)
    outcome = fold(atoms, [True] * 5, IcfMode.SAFE, 1)
    assert all(g.representative == "_set0" for g in outcome.report.groups)


def test_verification_gates_hash_collisions():
    # constant hash throws every atom into one bucket; only the truly
    # identical pair may fold
    atoms = setter_atoms(2) + [
        FunctionAtom("_other", [w(Kind.MOVZ, rd=0, imm=1), RET])]
    outcome = fold(atoms, [True] * 3, IcfMode.SAFE, 1,
                   hash_fn=lambda atom, canonical=None: 42)
    assert outcome.report.atoms_folded == 1
    assert len(atoms[2].words) == 2               # _other untouched


def test_eh_is_part_of_identity():
    from sizelink.objfmt import EhEntry
    a = FunctionAtom("_a", [w(Kind.MOVZ, rd=0, imm=1), 0x94000000, RET],
                     fixups=[Fixup(1, FixupKind.CALL26, "_t")],
                     eh_entries=[EhEntry(0, 2, None, 1)])
    b = FunctionAtom("_b", [w(Kind.MOVZ, rd=0, imm=1), 0x94000000, RET],
                     fixups=[Fixup(1, FixupKind.CALL26, "_t")],
                     eh_entries=[EhEntry(0, 2, None, 2)])
    outcome = fold([a, b], [True, True], IcfMode.ALL, 5)
    assert outcome.report.atoms_folded == 0


def caller_chain_atoms():
    """Leaves f1 == f2; g1 calls f1, g2 calls f2; h1 calls g1, h2 calls g2."""
    atoms = []
    for lv, (name, callee) in enumerate([
            ("_f1", None), ("_f2", None),
            ("_g1", "_f1"), ("_g2", "_f2"),
            ("_h1", "_g1"), ("_h2", "_g2")]):
        if callee is None:
            atoms.append(FunctionAtom(name, [w(Kind.MOVZ, rd=0, imm=9), RET]))
        else:
            atoms.append(FunctionAtom(
                name, [w(Kind.MOVZ, rd=5, imm=1), 0x94000000, RET],
                fixups=[Fixup(1, FixupKind.CALL26, callee)]))
    return atoms


def test_transitive_folding_under_all():
    atoms = caller_chain_atoms()
    outcome = fold(atoms, [True] * 6, IcfMode.ALL, 5)
    assert outcome.aliases == {"_f2": "_f1", "_g2": "_g1", "_h2": "_h1"}
    assert outcome.report.iterations >= 3


def test_safe_folds_only_leaf_layer():
    atoms = caller_chain_atoms()
    outcome = fold(atoms, [True] * 6, IcfMode.SAFE, 5)
    folded = {name for g in outcome.report.groups for name in g.folded}
    assert folded == {"_f2"}      # thunk addresses stay distinct upstream


def test_iteration_cap_limits_folding():
    atoms = caller_chain_atoms()
    outcome = fold(atoms, [True] * 6, IcfMode.ALL, 1)
    assert outcome.aliases == {"_f2": "_f1"}


def test_single_instruction_thunk_property():
    atoms = setter_atoms(6) + caller_chain_atoms()
    locals_ = [True] * len(atoms)
    outcome = fold(atoms, locals_, IcfMode.SAFE, 5)
    for group in outcome.report.groups:
        for name in group.folded:
            atom = next(a for a in atoms if a.name == name)
            assert len(atom.words) == 1


FIG7_PROGRAM = """.global main
.func main
    adr x0, _func1
    adr x1, _func2
    sub x2, x0, x1
    cbz x2, .Lequal
    movz x0, #0
    ret
.Lequal:
    movz x0, #1
    ret
.endfunc
.func _func1
    movz x0, #7
    add x0, x0, #1
    ret
.endfunc
.func _func2
    movz x0, #7
    add x0, x0, #1
    ret
.endfunc
"""


def fig7_return(icf_mode):
    obj = assemble(FIG7_PROGRAM)
    result = link([obj], LinkOptions(icf=icf_mode))
    run = run_image(result.image.text, result.image.entries["main"])
    assert run.fault is None
    return run.return_value


def test_fig7_function_pointer_comparison():
    assert fig7_return(IcfMode.NONE) == 0
    assert fig7_return(IcfMode.SAFE) == 0
    assert fig7_return(IcfMode.ALL) == 1


def test_safe_pointer_identity_preserved_addresses():
    obj = assemble(FIG7_PROGRAM)
    result = link([obj], LinkOptions(icf=IcfMode.SAFE))
    addrs = {}
    for name, _scope, addr in result.image.symbols:
        addrs[name] = addr
    assert addrs["_func1"] != addrs["_func2"]
    result_all = link([obj], LinkOptions(icf=IcfMode.ALL))
    addrs_all = {name: addr for name, _s, addr in result_all.image.symbols}
    assert addrs_all["_func1"] == addrs_all["_func2"]


def test_folding_semantics_through_folded_calls():
    # callers branch through folded symbols; behavior must be unchanged
    src = """.global main
.func main
    bl _g1
    mov x19, x0
    bl _g2
    add x0, x0, x19
    ret
.endfunc
"""
    for name, callee in (("_g1", "_f1"), ("_g2", "_f2")):
        src += f".func {name}\n    movz x3, #3\n    b {callee}\n.endfunc\n"
    for name in ("_f1", "_f2"):
        src += f".func {name}\n    movz x0, #21\n    ret\n.endfunc\n"
    obj = assemble(src)
    base = link([obj], LinkOptions())
    safe = link([obj], LinkOptions(icf=IcfMode.SAFE))
    ra = run_image(base.image.text, base.image.entries["main"])
    rb = run_image(safe.image.text, safe.image.entries["main"])
    assert ra.fault is None and rb.fault is None
    assert (ra.return_value, ra.memory_digest) == (rb.return_value,
                                                   rb.memory_digest)
    assert ra.return_value == 42
