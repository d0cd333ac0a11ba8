"""sizelink command line: link, asm, dump, run, debug-merge, gen-corpus,
report. Exit code 0 on success, 1 on link/input errors, 2 on usage errors."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import asm as asm_mod
from .corpus import CorpusParams, gen_corpus
from .emulator import DEFAULT_FUEL, run_image
from .icf import IcfMode
from .linker import LinkError, LinkOptions, link, read_image
from .metadata import debug_merge, read_aux, render_debug_map
from .objfmt import SofError, read_sof, write_sof
from .outline_general import OutlineConfig

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sizelink",
        description="link-time code size optimizer for an AArch64 subset")
    sub = parser.add_subparsers(dest="command", required=True)

    p_link = sub.add_parser("link", help="link SOF objects into an image")
    p_link.add_argument("inputs", nargs="+", metavar="IN.sof")
    p_link.add_argument("-o", "--output", required=True, metavar="OUT.simg")
    p_link.add_argument("--outline", action="store_true",
                        help="enable frame and general sequence outlining")
    p_link.add_argument("--outline-max-len", type=int, default=12, metavar="N")
    p_link.add_argument("--outline-min-freq", type=int, default=2, metavar="N")
    p_link.add_argument("--outline-min-profit", type=int, default=0,
                        metavar="BYTES")
    p_link.add_argument("--no-frame-outline", action="store_true",
                        help="restrict --outline to the general pass")
    p_link.add_argument("--icf", choices=["none", "safe", "all"],
                        default="none")
    p_link.add_argument("--icf-iterate", action=argparse.BooleanOptionalAction,
                        default=True,
                        help="iterate folding to a fixpoint (default on)")
    p_link.add_argument("--debug-aux", metavar="PATH",
                        help="write the outliner's auxiliary debug file")
    p_link.add_argument("--stats-json", metavar="PATH",
                        help="write machine-readable stats")
    p_link.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="worker threads for candidate collection")

    p_asm = sub.add_parser("asm", help="assemble text into a SOF object")
    p_asm.add_argument("input", metavar="IN.s")
    p_asm.add_argument("-o", "--output", required=True, metavar="OUT.sof")

    p_dump = sub.add_parser("dump", help="dump a SOF object as text")
    p_dump.add_argument("input", metavar="IN.sof")

    p_run = sub.add_parser("run", help="execute a linked image")
    p_run.add_argument("image", metavar="IMAGE.simg")
    p_run.add_argument("--entry", required=True, metavar="SYM")
    p_run.add_argument("--args", default="", metavar="a,b,...")
    p_run.add_argument("--fuel", type=int, default=DEFAULT_FUEL, metavar="N")

    p_merge = sub.add_parser(
        "debug-merge",
        help="merge pre-link debug lines with the aux file into a debug map")
    p_merge.add_argument("inputs", nargs="+",
                         metavar="ORIG.sof... AUX OUT.map")
    p_merge.add_argument("--image", required=True, metavar="IMAGE.simg",
                         help="the linked image providing layout and UUID")

    p_gen = sub.add_parser("gen-corpus", help="generate a deterministic corpus")
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--functions", type=int, default=12)
    p_gen.add_argument("--programs", type=int, default=1)
    p_gen.add_argument("--dup-rate", type=float, default=0.3)
    p_gen.add_argument("--frame-rate", type=float, default=0.5)
    p_gen.add_argument("--eh-rate", type=float, default=0.1)
    p_gen.add_argument("--data-in-code-rate", type=float, default=0.05)
    p_gen.add_argument("--vectors", type=int, default=10)
    p_gen.add_argument("--no-oracles", action="store_true",
                       help="skip the brute-force savings oracles (fast path "
                            "for very large corpora; manifest minimums read 0)")
    p_gen.add_argument("-o", "--output", required=True, metavar="DIR")

    p_rep = sub.add_parser(
        "report", help="render stats JSON files to CSV plus figures")
    p_rep.add_argument("stats", nargs="+", metavar="STATS.json")
    p_rep.add_argument("-o", "--output", required=True, metavar="DIR")
    p_rep.add_argument("--labels", metavar="a,b,...",
                       help="row labels (default: file stems)")
    return parser


def _cmd_link(args) -> int:
    files = [read_sof(Path(p).read_bytes()) for p in args.inputs]
    options = LinkOptions(
        outline=args.outline,
        frame_outline=not args.no_frame_outline,
        outline_config=OutlineConfig(max_len=args.outline_max_len,
                                     min_freq=args.outline_min_freq,
                                     min_profit=args.outline_min_profit),
        icf=IcfMode(args.icf),
        icf_iterate=args.icf_iterate,
        jobs=args.jobs,
    )
    result = link(files, options)
    Path(args.output).write_bytes(result.image_bytes)
    if args.debug_aux:
        Path(args.debug_aux).write_bytes(result.aux_bytes)
    if args.stats_json:
        Path(args.stats_json).write_text(result.stats.to_json())
    sys.stdout.write(result.stats.human_text())
    return 0


def _cmd_asm(args) -> int:
    obj = asm_mod.assemble(Path(args.input).read_text())
    Path(args.output).write_bytes(write_sof(obj))
    return 0


def _cmd_dump(args) -> int:
    obj = read_sof(Path(args.input).read_bytes())
    sys.stdout.write(asm_mod.dump(obj))
    return 0


def _cmd_run(args) -> int:
    image = read_image(Path(args.image).read_bytes())
    if args.entry not in image.entries:
        sys.stderr.write(f"sizelink: entry symbol {args.entry!r} not found\n")
        return 1
    run_args = [int(tok, 0) for tok in args.args.split(",") if tok.strip()]
    result = run_image(image.text, image.entries[args.entry], run_args,
                       args.fuel, text_base=image.text_base)
    fault = result.fault.name if result.fault else "none"
    print(f"return: {result.return_value:#x}")
    print(f"memory digest: {result.memory_digest:#018x}")
    print(f"steps: {result.steps}")
    print(f"fault: {fault}")
    return 0 if result.fault is None else 1


def _cmd_debug_merge(args) -> int:
    if len(args.inputs) < 3:
        sys.stderr.write("sizelink: debug-merge needs ORIG.sof... AUX OUT.map\n")
        return 2
    *sof_paths, aux_path, out_path = args.inputs
    files = [read_sof(Path(p).read_bytes()) for p in sof_paths]
    aux_uuid, records = read_aux(Path(aux_path).read_bytes())
    image = read_image(Path(args.image).read_bytes())
    entries = debug_merge(files, aux_uuid, records, image.uuid, image.atoms)
    Path(out_path).write_text(render_debug_map(entries))
    print(f"wrote {len(entries)} entries to {out_path}")
    return 0


def _cmd_gen_corpus(args) -> int:
    params = CorpusParams(functions=args.functions, programs=args.programs,
                          dup_rate=args.dup_rate, frame_rate=args.frame_rate,
                          eh_rate=args.eh_rate,
                          data_in_code_rate=args.data_in_code_rate,
                          vectors=args.vectors)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "params": vars(params).copy(),
                "programs": []}
    for prog in gen_corpus(args.seed, params,
                           compute_oracles=not args.no_oracles):
        pdir = out / prog.name
        pdir.mkdir(exist_ok=True)
        paths = []
        for i, f in enumerate(prog.files):
            rel = f"{prog.name}/input_{i:02d}.sof"
            (out / rel).write_bytes(write_sof(f))
            paths.append(rel)
        manifest["programs"].append({
            "name": prog.name,
            "files": paths,
            "entry": prog.entry,
            "vectors": prog.vectors,
            "fuel": prog.fuel,
            "min_general_outline_savings": prog.min_general_outline_savings,
            "min_icf_safe_savings": prog.min_icf_safe_savings,
        })
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest['programs'])} programs to {out}")
    return 0


def _cmd_report(args) -> int:
    from .report import write_report
    labels = args.labels.split(",") if args.labels else None
    written = write_report([Path(p) for p in args.stats], Path(args.output),
                           labels)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "link": _cmd_link,
    "asm": _cmd_asm,
    "dump": _cmd_dump,
    "run": _cmd_run,
    "debug-merge": _cmd_debug_merge,
    "gen-corpus": _cmd_gen_corpus,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (LinkError, SofError, asm_mod.ParseError, ValueError, OSError) as exc:
        sys.stderr.write(f"sizelink: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
