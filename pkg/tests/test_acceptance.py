"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line. Run with `pytest tests/test_acceptance.py -v -s`.

Criterion 9's pass-time ratio is measured faithfully and is expected to be
red in this implementation: the linear window scan the passes are required
to use costs far more, relative to this artifact's in-memory non-pass
stages, than a native linker's passes cost relative to its full pipeline.
See the test body for the measured numbers.
"""

import random
import time

from conftest import NOP, RET, assemble, w
from sizelink import icf as icf_mod
from sizelink.analysis import compute_visibility, hash_function, hash_sequence
from sizelink.corpus import CorpusParams, gen_corpus
from sizelink.emulator import differential, run_image
from sizelink.icf import IcfMode
from sizelink.isa import Kind
from sizelink.linker import LinkOptions, link
from sizelink.metadata import InPlace, debug_merge, read_aux
from sizelink.objfmt import (
    EhEntry, FunctionAtom, ObjectFile, Scope, Symbol, read_sof, write_sof,
)
from sizelink.outline_general import OutlineConfig, run_pass
from sizelink import asm

OPT = LinkOptions(outline=True, icf=IcfMode.SAFE)


def report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {criterion}: {status}{suffix}")


def run_differential(prog, options_b, options_a=LinkOptions()):
    base = link(prog.files, options_a)
    opt = link(prog.files, options_b)
    entry_a = base.image.entries[prog.entry]
    entry_b = opt.image.entries[prog.entry]
    return differential(
        lambda args, fuel: run_image(base.image.text, entry_a, args, fuel),
        lambda args, fuel: run_image(opt.image.text, entry_b, args, fuel),
        prog.vectors, prog.fuel), opt


def test_criterion_1_differential_soundness():
    """>= 1000 corpus programs, seeds 0-9, no-passes vs --outline --icf=safe,
    100% differential pass over >= 10 vectors each, under 10 minutes."""
    t0 = time.perf_counter()
    params = CorpusParams(functions=10, programs=100, vectors=10)
    programs_run = 0
    vectors_run = 0
    failures = []
    for seed in range(10):
        for prog in gen_corpus(seed, params, compute_oracles=False):
            verdict, opt = run_differential(prog, OPT)
            programs_run += 1
            vectors_run += verdict.vectors_run
            if not verdict.passed:
                failures.append((seed, prog.name, verdict.mismatches[:1]))
    elapsed = time.perf_counter() - t0
    ok = programs_run >= 1000 and not failures and elapsed < 600
    report("1 differential-soundness", ok,
           f"{programs_run} programs, {vectors_run} vectors, {elapsed:.1f}s, "
           f"{len(failures)} failures")
    assert programs_run >= 1000
    assert not failures, failures[:3]
    assert elapsed < 600


FIG7 = """.global main
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
    ret
.endfunc
.func _func2
    movz x0, #7
    ret
.endfunc
"""


def test_criterion_2_fig7_fidelity():
    """Function-pointer comparison: 0 under icf=safe and icf=none, 1 under
    icf=all. Exact, no tolerance."""
    obj = assemble(FIG7)
    results = {}
    for mode in (IcfMode.NONE, IcfMode.SAFE, IcfMode.ALL):
        res = link([obj], LinkOptions(icf=mode))
        run = run_image(res.image.text, res.image.entries["main"])
        assert run.fault is None
        results[mode.value] = run.return_value
    ok = results == {"none": 0, "safe": 0, "all": 1}
    report("2 fig7-fidelity", ok, f"returns {results}")
    assert ok


def test_criterion_3_fig6_arithmetic():
    """N identical 2-instruction LOCAL functions fold to exactly
    8N - (8 + 4(N-1)) bytes saved under icf=safe."""
    outcomes = {}
    for n in (3, 2000):
        atoms = [FunctionAtom(f"_set{i}", [w(Kind.STRB, rd=1, rn=0, imm=8),
                                           RET]) for i in range(n)]
        obj = ObjectFile(
            symbols=[Symbol(a.name, Scope.LOCAL, i)
                     for i, a in enumerate(atoms)],
            atoms=atoms)
        result = link([obj], LinkOptions(icf=IcfMode.SAFE, icf_iterate=False))
        expected = 8 * n - (8 + 4 * (n - 1))
        outcomes[n] = (result.stats.icf.bytes_saved, expected)
    ok = all(got == want for got, want in outcomes.values())
    report("3 fig6-arithmetic", ok,
           f"N=3: {outcomes[3][0]}/{outcomes[3][1]} B, "
           f"N=2000: {outcomes[2000][0]}/{outcomes[2000][1]} B")
    assert outcomes[3] == (8, 8)
    assert outcomes[2000] == (7996, 7996)


def test_criterion_4_outliner_oracle():
    """Measured general-outline savings >= the independent greedy oracle's
    minimum for the same configuration; savings ledger is exact."""
    params = CorpusParams(functions=15, programs=15)
    checked = 0
    for seed in (0, 1, 2):
        for prog in gen_corpus(seed, params):
            gen_only = link(prog.files,
                            LinkOptions(outline=True, frame_outline=False))
            assert (gen_only.stats.general.bytes_saved
                    >= prog.min_general_outline_savings), prog.name
            full = link(prog.files, OPT)
            assert (full.stats.text_bytes_before - full.stats.text_bytes_after
                    == full.stats.savings_total()), prog.name
            checked += 1
    report("4 outliner-oracle", True, f"{checked} programs, bound held, "
           "ledger exact")


def _random_visibility_atom(rng: random.Random, tag: int) -> FunctionAtom:
    n = rng.randint(5, 14)
    pool_reg = [w(Kind.MOVZ, rd=r, imm=v) for r in range(3)
                for v in (1, 2, 3)]
    words = [rng.choice(pool_reg) for _ in range(n - 1)] + [RET]
    if rng.random() < 0.6:
        t = rng.randrange(1, n)
        words[0] = w(Kind.CBZ, rd=0, imm=4 * t)
    eh = []
    if rng.random() < 0.3 and n >= 4:
        start = rng.randrange(0, n - 2)
        end = rng.randrange(start + 1, n)
        eh.append(EhEntry(start, end, rng.randrange(n), 1))
    return FunctionAtom(f"_v{tag}", words, eh_entries=eh)


def test_criterion_5_visibility_safety():
    """10,000 random atoms: no accepted window touches a visible index, and
    every EH/branch-target index stays INPLACE through the passes."""
    rng = random.Random(0xBEEF)
    total_atoms = 0
    windows_checked = 0
    for batch in range(40):
        atoms = [_random_visibility_atom(rng, batch * 1000 + i)
                 for i in range(250)]
        total_atoms += len(atoms)
        pre_visibility = [compute_visibility(a) for a in atoms]
        result = run_pass(atoms, OutlineConfig())
        for dec in result.decisions:
            for cs in dec.accepted:
                windows_checked += 1
                overlap = set(range(cs.start, cs.end)) \
                    & pre_visibility[cs.atom_index]
                assert not overlap, (cs, overlap)
        for idx, imap in result.index_maps.items():
            for vis_index in pre_visibility[idx]:
                assert isinstance(imap.dispositions[vis_index], InPlace), \
                    (idx, vis_index)
    report("5 visibility-safety", True,
           f"{total_atoms} atoms, {windows_checked} accepted windows")
    assert total_atoms >= 10_000


def test_criterion_6_hash_discipline(monkeypatch):
    """A stub hash returning a constant folds nothing incorrect (byte-wise
    verification gates every merge); hash soundness over 10,000 pairs."""
    programs = gen_corpus(17, CorpusParams(functions=16, programs=5,
                                           dup_rate=0.5),
                          compute_oracles=False)
    # icf under a constant hash must produce the identical image
    normal = [link(p.files, LinkOptions(icf=IcfMode.SAFE)) for p in programs]
    real_fold = icf_mod.fold

    def collided_fold(atoms, local, mode, max_iters, hash_fn=None):
        return real_fold(atoms, local, mode, max_iters,
                         hash_fn=lambda atom, canonical=None: 0x5EED)
    monkeypatch.setattr("sizelink.linker.icf_mod.fold", collided_fold)
    collided = [link(p.files, LinkOptions(icf=IcfMode.SAFE))
                for p in programs]
    monkeypatch.undo()
    icf_identical = all(a.image_bytes == b.image_bytes
                        for a, b in zip(normal, collided))
    assert icf_identical

    # outlining under a constant window hash must stay semantics-preserving
    import sizelink.outline_general as og
    monkeypatch.setattr(og._AtomPrep, "whash", lambda self, s, ln: 0x5EED)
    outline_ok = True
    for prog in programs[:2]:
        verdict, opt = run_differential(prog, OPT)
        outline_ok = outline_ok and verdict.passed
        assert (opt.stats.text_bytes_before - opt.stats.text_bytes_after
                == opt.stats.savings_total())
    monkeypatch.undo()
    assert outline_ok

    # hash soundness: identical views hash equal, 10,000 random pairs
    rng = random.Random(1)
    pool = [w(Kind.MOVZ, rd=r, imm=v) for r in range(8) for v in range(40)]
    for _ in range(10_000):
        n = rng.randint(2, 10)
        words = [rng.choice(pool) for _ in range(n)]
        a = FunctionAtom("_a", list(words))
        b = FunctionAtom("_b", [NOP] * rng.randint(0, 3) + list(words))
        shift = len(b.words) - n
        assert hash_function(a) == hash_function(FunctionAtom("_c", words))
        assert hash_sequence(a, 0, n) == hash_sequence(b, shift, n)
    report("6 hash-discipline", True,
           "collision stub folded/outlined nothing incorrect; "
           "10000 soundness pairs")


def test_criterion_7_metadata_integrity():
    """Debug map covers 100% of final text; EH tables stay well-formed;
    asm -> SOF -> dump is a fixpoint across the corpus."""
    programs = gen_corpus(23, CorpusParams(functions=20, programs=10,
                                           eh_rate=0.4))
    maps_checked = 0
    eh_checked = 0
    for prog in programs:
        result = link(prog.files, OPT)
        uuid, records = read_aux(result.aux_bytes)
        entries = debug_merge(prog.files, uuid, records, result.image.uuid,
                              result.image.atoms)
        total = sum(la.word_count for la in result.image.atoms)
        assert len(entries) == total
        assert len({e.address for e in entries}) == total
        maps_checked += total
        for atom in result.atoms:
            n = len(atom.words)
            for eh in atom.eh_entries:
                eh_checked += 1
                assert 0 <= eh.start_index < eh.end_index <= n
                assert (eh.landing_pad_index is None
                        or 0 <= eh.landing_pad_index < n)
        for f in prog.files:
            text = asm.dump(f)
            again = asm.assemble(text)
            assert asm.dump(again) == text
            assert read_sof(write_sof(again)) == again
    report("7 metadata-integrity", True,
           f"{maps_checked} mapped addresses, {eh_checked} EH entries, "
           "dump fixpoint held")


def test_criterion_8_determinism():
    """Identical inputs and options produce byte-identical image, stats, and
    aux for any worker-pool size."""
    programs = gen_corpus(29, CorpusParams(functions=40, programs=2),
                          compute_oracles=False)
    for prog in programs:
        runs = [link(prog.files, LinkOptions(outline=True, icf=IcfMode.SAFE,
                                             jobs=jobs))
                for jobs in (1, 1, 4, 8)]
        first = runs[0]
        for other in runs[1:]:
            assert other.image_bytes == first.image_bytes
            assert other.aux_bytes == first.aux_bytes
            assert other.stats.to_json() == first.stats.to_json()
    report("8 determinism", True, "image+stats+aux byte-identical for "
           "jobs in {1,4,8}")


def test_criterion_9_scale_overhead():
    """100,000-function link under 60 s; outline+ICF pass time within 25%
    of link wall-clock (soft to 2x). The ratio bound is not attainable here:
    the spec-pinned linear window scan costs ~1 microsecond per window slot
    in CPython (13.5M slots for this corpus), while the artifact's non-pass
    stages run over pre-parsed in-memory objects in a few seconds, so passes
    dominate the wall-clock at roughly 85%, versus 16.7% for the paper's
    native linker whose non-pass pipeline is far heavier."""
    programs = gen_corpus(0, CorpusParams(functions=100_000, programs=1),
                          compute_oracles=False)
    prog = programs[0]
    t0 = time.perf_counter()
    result = link(prog.files, OPT)
    elapsed = time.perf_counter() - t0
    stats = result.stats
    fraction = stats.pass_fraction()
    time_ok = elapsed < 60.0
    ratio_ok = fraction <= 0.25
    ratio_soft = fraction <= 0.50
    detail = (f"link {elapsed:.1f}s (budget 60s), passes "
              f"{stats.pass_seconds():.1f}s = {fraction * 100:.1f}% "
              f"(bound 25%, soft gate 50%), saved "
              f"{stats.savings_total()} of {stats.text_bytes_before} B")
    report("9 scale-overhead", time_ok and ratio_soft, detail)
    assert time_ok, detail
    if not ratio_ok:
        print(f"ACCEPTANCE 9 note: ratio {fraction * 100:.1f}% exceeds the "
              "25% bound; reported per the soft-criterion rule")
    assert ratio_soft, detail
