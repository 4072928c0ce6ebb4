"""Command-line entry point: ``wst {train,eval,baseline,pareto,serve-stub}``.

Exit status is 0 on success, 1 on usage errors, 2 on runtime errors.
Remote backends read their bearer token from ``$WST_API_KEY``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .backends import API_KEY_ENV, BackendKind, TeacherPolicy, ToyPolicyBackend
from .core import ConfigError, InvalidWeights, PreferenceWeights, TaskKind, WSTError, load_config
from .evalreport import (
    EvalReport,
    Mode,
    compare_baselines,
    emit_comparison,
    emit_pareto,
    emit_report,
    evaluate,
    load_report,
    points_from_reports,
)
from .pipeline import Harness, load_trained_teacher, train
from .stubserver import StubConfig, StubServer, StubService

logger = logging.getLogger("wst")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _weights(text: str) -> PreferenceWeights:
    try:
        return PreferenceWeights.parse(text)
    except InvalidWeights as exc:
        raise argparse.ArgumentTypeError(f"InvalidWeights: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wst", description=(
        "Weak-to-strong transfer harness. Subcommands: train, eval, baseline, pareto, serve-stub. "
        f"Remote backends read credentials from ${API_KEY_ENV}."))
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="{train,eval,baseline,pareto,serve-stub}", parser_class=_Parser)
    sub.required = True

    def with_config(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", required=True, help="TOML run config")
        sp.add_argument("--seed", type=int, help="override sampling.seed")
        sp.add_argument("--output-dir", help="override output_dir")

    t = sub.add_parser("train", help="train the toy teacher with GRPO")
    with_config(t)
    t.add_argument("--max-steps", type=int, help="override max_steps")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    e = sub.add_parser("eval", help="evaluate one teacher mode")
    with_config(e)
    e.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    e.add_argument("--weights", type=_weights, help="alignment weights 'harmless,helpful'")
    e.add_argument("--checkpoint", help="checkpoint for wst_trained (default: latest)")
    e.add_argument("--out", help="report directory (default: <output_dir>/reports)")

    b = sub.add_parser("baseline", help="precompute per-query Student baselines")
    with_config(b)

    pa = sub.add_parser("pareto", help="Pareto frontier over alignment reports")
    pa.add_argument("--in", dest="inputs", nargs="+", required=True, help="report JSON files")
    pa.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("serve-stub", help="serve the scripted chat/score stub")
    s.add_argument("--script", required=True)
    s.add_argument("--port", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--failure-rate", type=float, default=0.0)
    s.add_argument("--latency-ms", type=float, default=0.0)
    s.add_argument("--host", default="127.0.0.1")
    return p


def _config(args: argparse.Namespace, extra: Optional[dict[str, Any]] = None):
    overrides: dict[str, Any] = dict(extra or {})
    if args.seed is not None:
        overrides["sampling.seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = str(Path(args.output_dir).resolve())
    return load_config(args.config, overrides)


def _cmd_train(args: argparse.Namespace) -> int:
    extra = {} if args.max_steps is None else {"max_steps": args.max_steps}
    cfg = _config(args, extra)
    art = train(cfg, resume=args.resume)
    print(json.dumps({"step": art.step, "output_dir": str(art.output_dir), "stopped_early": art.stopped_early}))
    return EXIT_OK


def _cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cache = Harness.from_config(cfg).precompute_baselines()
    print(json.dumps({"baselines": len(cache), "path": str(cache.path)}))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    extra = {} if args.weights is None else {"weights": list(args.weights.w)}
    cfg = _config(args, extra)
    if args.weights is not None and cfg.task_kind is not TaskKind.ALIGNMENT:
        raise UsageError("--weights only applies to alignment configs")
    h = Harness.from_config(cfg)
    mode = Mode(args.mode)
    teacher = None
    if mode is Mode.WST_TRAINED:
        teacher = load_trained_teacher(cfg, args.checkpoint)
    elif mode is Mode.UNTRAINED_TEACHER:
        teacher = h.teacher
        if teacher.backend is BackendKind.TOY_POLICY:
            p = teacher.policy
            teacher.client = ToyPolicyBackend(TeacherPolicy.uniform(p.templates, p.num_categories))
    elif mode is Mode.EXTERNAL_SCAFFOLDER:
        if h.teacher.backend is BackendKind.TOY_POLICY:
            raise UsageError("--mode external_scaffolder needs a remote or scripted teacher_backend")
        teacher = h.teacher

    out = Path(args.out) if args.out else Path(cfg.output_dir) / "reports"
    direct: Optional[EvalReport] = None
    weights_label = "none" if h.reward_fn.weights is None else h.reward_fn.weights.label()
    metric = "accuracy" if cfg.task_kind is TaskKind.REASONING else "weighted_reward"
    direct_path = out / f"{Mode.DIRECT_PROMPTING.value}_{metric}_{weights_label}.json"
    if mode is not Mode.DIRECT_PROMPTING and direct_path.exists():
        direct = load_report(direct_path)
    report = evaluate(mode, h.dataset, teacher, h.student, h.reward_fn, cfg.sampling,
                      direct_template=h.direct_template, direct_report=direct,
                      max_concurrency=cfg.max_concurrency)
    csv_path, _ = emit_report(report, out)
    print(json.dumps({"mode": mode.value, "aggregate": report.aggregate,
                      "improvement_vs_direct": report.improvement_vs_direct, "report": str(csv_path)}))
    return EXIT_OK


def _cmd_pareto(args: argparse.Namespace) -> int:
    try:
        reports = [load_report(p) for p in args.inputs]
    except FileNotFoundError as exc:
        raise UsageError(f"--in: {exc}") from exc
    points = points_from_reports(reports)
    emit_pareto(points, args.out)
    if sum(r.mode is Mode.DIRECT_PROMPTING for r in reports) == 1:
        emit_comparison(compare_baselines(reports), args.out)
    print(json.dumps({"points": len(points), "out": args.out}))
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    try:
        cfg = StubConfig(args.port, args.script, args.seed, args.latency_ms, args.failure_rate, args.host)
    except ValueError as exc:
        raise UsageError(f"--failure-rate/--latency-ms: {exc}") from exc
    server = StubServer(StubService.from_config(cfg))
    print(f"serving on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
    "pareto": _cmd_pareto,
    "serve-stub": _cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, InvalidWeights) as exc:
        print(f"wst {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WSTError, OSError, ValueError, KeyError) as exc:
        print(f"wst {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
