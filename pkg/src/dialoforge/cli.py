"""Command-line entry point.

Subcommands::

    forge run        craft a corpus (mock mode unless DIALOFORGE_* endpoints set)
    forge stats      corpus statistics + figures from a manifest
    forge serve      HTTP review service over a manifest
    forge export     write the finalized (approved) corpus
    blend            emit a deterministic synthetic/real sample stream
    evaluate         score predictions against a manifest, write report + figures
    fusion gradcheck verify analytic fusion gradients against finite differences
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .schema import Subset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialoforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    forge = sub.add_parser("forge", help="corpus crafting pipeline")
    forge_sub = forge.add_subparsers(dest="forge_command", required=True)

    run = forge_sub.add_parser("run", help="craft a corpus end to end")
    run.add_argument("--subset", choices=[s.value for s in Subset], default="emotion")
    run.add_argument("--size", type=int, default=5, help="number of dialogues")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default="corpus-out", help="output directory")
    run.add_argument(
        "--n-history", default="5,7",
        help="comma-separated history-turn choices, drawn uniformly per dialogue "
             "(dialogue length = choice + 1 turns)",
    )
    run.add_argument("--workers", type=int, default=0, help="0 = logical cores")
    run.add_argument("--wer-threshold", type=float, default=0.05)
    run.add_argument("--cosine-threshold", type=float, default=0.75)
    run.add_argument("--max-attempts", type=int, default=10)
    run.add_argument("--snr-range", default="5,20", help="overlay SNR range in dB")
    run.add_argument("--gap-range", default="0.2,0.5", help="inter-turn silence range in s")
    run.add_argument("--captions", default=None, help="caption CSV for audio/music subsets")
    run.add_argument("--assets-dir", default=None, help="directory of <source_id>.wav files")
    run.add_argument("--corruption-rate", type=float, default=0.0,
                     help="mock-ASR corruption rate (mock mode only)")
    run.add_argument("--fail-indices", default="",
                     help="comma-separated dialogue indices forced to fail the gate")
    run.add_argument("--halt-after", default=None,
                     help="stop each dialogue after this stage (test hook)")

    stats = forge_sub.add_parser("stats", help="statistics + figures for a manifest")
    stats.add_argument("--manifest", required=True)
    stats.add_argument("--out-dir", default=None,
                       help="report directory (default: <manifest dir>/reports)")
    stats.add_argument("--no-figures", action="store_true")

    serve = forge_sub.add_parser("serve", help="run the review HTTP service")
    serve.add_argument("--manifest", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8321)
    serve.add_argument("--finalized-only", action="store_true",
                       help="refuse audio for rejected entries")
    serve.add_argument("--ui-dir", default=None, help="static review UI to serve at /")

    export = forge_sub.add_parser("export", help="write the approved corpus")
    export.add_argument("--manifest", required=True)
    export.add_argument("--out", required=True)

    blend = sub.add_parser("blend", help="deterministic synthetic/real sampling")
    blend.add_argument("--alpha", type=float, required=True)
    blend.add_argument("--seed", type=int, required=True)
    blend.add_argument("--synthetic", required=True, help="synthetic manifest path")
    blend.add_argument("--real", required=True, help="real manifest path")
    blend.add_argument("--n", type=int, required=True)
    blend.add_argument("--without-replacement", action="store_true")
    blend.add_argument("--out", default=None, help="write the stream here instead of stdout")

    evaluate = sub.add_parser("evaluate", help="score predictions against a manifest")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--predictions", required=True)
    evaluate.add_argument("--report", required=True, help="report JSON output path")
    evaluate.add_argument("--no-figures", action="store_true")
    evaluate.add_argument("--gpt-eval", action="store_true",
                          help="include judge-model scores (mock unless endpoint set)")
    evaluate.add_argument("--seed", type=int, default=0)

    fusion = sub.add_parser("fusion", help="fusion kernel utilities")
    fusion_sub = fusion.add_subparsers(dest="fusion_command", required=True)
    gradcheck = fusion_sub.add_parser("gradcheck", help="finite-difference gradient check")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--eps", type=float, default=1e-4)
    gradcheck.add_argument("--instances", type=int, default=1)
    gradcheck.add_argument("--threshold", type=float, default=1e-4)
    gradcheck.add_argument("--save-params", default=None,
                           help="write the checked parameter bundle to this container file")

    return parser


def _parse_floats(text: str, n: int, flag: str) -> tuple[float, ...]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != n:
        raise SystemExit(f"{flag} expects {n} comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _cmd_forge_run(args) -> int:
    from .gate import GateConfig
    from .pipeline import PipelineConfig, run_pipeline

    n_history = tuple(int(p) for p in args.n_history.split(",") if p.strip())
    fail_indices = tuple(int(p) for p in args.fail_indices.split(",") if p.strip())
    cfg = PipelineConfig(
        subset=Subset(args.subset),
        corpus_size=args.size,
        n_history_choices=n_history,
        gate=GateConfig(
            wer_threshold=args.wer_threshold,
            cosine_threshold=args.cosine_threshold,
            max_attempts=args.max_attempts,
        ),
        snr_range_db=_parse_floats(args.snr_range, 2, "--snr-range"),
        seed=args.seed,
        output_dir=args.out,
        workers=args.workers,
        gap_range_s=_parse_floats(args.gap_range, 2, "--gap-range"),
        caption_file=args.captions,
        assets_dir=args.assets_dir,
        mock_asr_corruption=args.corruption_rate,
        mock_always_fail_indices=fail_indices,
        halt_after=args.halt_after,
    )
    result = run_pipeline(cfg)
    stats = result.stats
    print(f"manifest: {result.manifest_path}")
    print(
        f"dialogues: {stats.dialogue_count} "
        f"(machine pass {stats.machine_pass}, fail {stats.machine_fail}; "
        f"errors {len(result.failures)}; halted {result.halted})"
    )
    if stats.dialogue_count:
        print(
            f"turns: {stats.turn_count} (avg {stats.avg_turns:.2f}); "
            f"audio: {stats.total_duration_hours:.3f} h"
        )
    for failure in result.failures:
        print(f"failure {failure['id']}: {failure['error']}: {failure['message']}")
    return 0


def _cmd_forge_stats(args) -> int:
    from .report import write_stats_report
    from .schema import parse_manifest

    manifest = Path(args.manifest)
    entries = parse_manifest(manifest.read_bytes())
    out_dir = Path(args.out_dir) if args.out_dir else manifest.parent / "reports"
    written = write_stats_report(entries, out_dir, figures=not args.no_figures)
    payload = json.loads(written[0].read_text(encoding="utf-8"))
    print(json.dumps(payload, indent=2))
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_forge_serve(args) -> int:
    from .service import serve_api

    serve_api(
        args.manifest,
        host=args.host,
        port=args.port,
        finalized_only=args.finalized_only,
        ui_dir=args.ui_dir,
    )
    return 0


def _cmd_forge_export(args) -> int:
    from .pipeline import ManifestStore, export_manifest

    count = export_manifest(ManifestStore(args.manifest), args.out)
    print(f"wrote {count} finalized entries to {args.out}")
    return 0


def _cmd_blend(args) -> int:
    from .blend import sample_stream

    stream = sample_stream(
        alpha=args.alpha,
        seed=args.seed,
        synthetic_manifest=args.synthetic,
        real_manifest=args.real,
        n=args.n,
        without_replacement=args.without_replacement,
    )
    lines = "".join(f"{source}\t{entry_id}\n" for source, entry_id in stream)
    if args.out:
        Path(args.out).write_text(lines, encoding="utf-8")
        print(f"wrote {args.n} draws to {args.out}")
    else:
        sys.stdout.write(lines)
    return 0


def _cmd_evaluate(args) -> int:
    from .report import evaluate_predictions, load_predictions, write_eval_report
    from .schema import parse_manifest
    from .scriptgen import MockChatClient

    entries = parse_manifest(Path(args.manifest).read_bytes())
    predictions = load_predictions(args.predictions)
    judge = MockChatClient() if args.gpt_eval else None
    report, rows = evaluate_predictions(
        entries, predictions, judge_client=judge, judge_seed=args.seed
    )
    written = write_eval_report(report, rows, args.report, figures=not args.no_figures)
    print(json.dumps(report.to_json_dict(), indent=2))
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_fusion_gradcheck(args) -> int:
    import time

    from .fusion import backward_and_gradcheck, random_instance, save_params

    worst = 0.0
    started = time.perf_counter()
    for k in range(args.instances):
        instance, params, cfg = random_instance(args.seed + k)
        err = backward_and_gradcheck(params, instance, cfg, eps=args.eps)
        worst = max(worst, err)
        if args.instances > 1:
            print(f"instance seed={args.seed + k}: max relative error {err:.3e}")
        if args.save_params and k == 0:
            save_params(args.save_params, params)
            print(f"wrote parameter container {args.save_params}")
    elapsed = time.perf_counter() - started
    ok = worst < args.threshold
    print(
        f"max relative error {worst:.3e} over {args.instances} instance(s) "
        f"in {elapsed:.2f}s: {'PASS' if ok else 'FAIL'} (threshold {args.threshold:.0e})"
    )
    return 0 if ok else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "forge":
        handler = {
            "run": _cmd_forge_run,
            "stats": _cmd_forge_stats,
            "serve": _cmd_forge_serve,
            "export": _cmd_forge_export,
        }[args.forge_command]
        return handler(args)
    if args.command == "blend":
        return _cmd_blend(args)
    if args.command == "evaluate":
        return _cmd_evaluate(args)
    if args.command == "fusion":
        return _cmd_fusion_gradcheck(args)
    raise SystemExit(2)


if __name__ == "__main__":
    sys.exit(main())
