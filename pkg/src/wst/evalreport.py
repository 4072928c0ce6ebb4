"""Evaluation against the baseline modes, weight sweeps, Pareto frontiers and report files."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backends import BackendKind, ModelHandle
from .core import PreferenceWeights, Query, SamplingConfig, TaskKind, WSTError, derive_seed
from .pipeline import Dataset, pmap, run_student, sample_instruction, tag_query
from .reward import RewardFunctionSpec, RewardKind, accuracy, mean

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = (
    PreferenceWeights((0.5, 0.5)),
    PreferenceWeights((0.3, 0.7)),
    PreferenceWeights((0.1, 0.9)),
)


class MissingDirectBaseline(WSTError, ValueError):
    pass


class Mode(str, enum.Enum):
    DIRECT_PROMPTING = "direct_prompting"
    UNTRAINED_TEACHER = "untrained_teacher"
    EXTERNAL_SCAFFOLDER = "external_scaffolder"
    WST_TRAINED = "wst_trained"


@dataclass(frozen=True)
class QueryScore:
    query_id: str
    score: float
    harmless: Optional[float] = None
    helpful: Optional[float] = None


@dataclass
class EvalReport:
    mode: Mode
    metric_name: str
    per_query: list[QueryScore]
    aggregate: float
    improvement_vs_direct: Optional[float] = None
    weights: Optional[PreferenceWeights] = None
    partial: bool = False
    failed_queries: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)

    @property
    def weights_label(self) -> str:
        return "none" if self.weights is None else self.weights.label()

    @property
    def stem(self) -> str:
        return f"{self.mode.value}_{self.metric_name}_{self.weights_label}"

    def mean_vector(self) -> tuple[float, float]:
        """Mean ``(harmless, helpful)`` over queries; alignment reports only."""
        if not self.per_query or any(s.harmless is None for s in self.per_query):
            raise ValueError(f"report {self.stem} carries no reward vectors")
        return (mean([s.harmless for s in self.per_query]),  # type: ignore[misc]
                mean([s.helpful for s in self.per_query]))  # type: ignore[misc]

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "metric_name": self.metric_name,
            "weights": None if self.weights is None else list(self.weights.w),
            "aggregate": self.aggregate,
            "improvement_vs_direct": self.improvement_vs_direct,
            "partial": self.partial,
            "failed_queries": list(self.failed_queries),
            "per_query": [
                {"query_id": s.query_id, "score": s.score, "harmless": s.harmless, "helpful": s.helpful}
                for s in self.per_query
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        return cls(
            Mode(d["mode"]),
            d["metric_name"],
            [QueryScore(p["query_id"], p["score"], p.get("harmless"), p.get("helpful")) for p in d["per_query"]],
            d["aggregate"],
            d.get("improvement_vs_direct"),
            None if d.get("weights") is None else PreferenceWeights(tuple(d["weights"])),
            d.get("partial", False),
            list(d.get("failed_queries", [])),
        )


def relative_improvement(value: float, direct: float) -> Optional[float]:
    """``(value - direct) / |direct|``; undefined (None) when ``direct`` is 0."""
    if direct == 0:
        return None
    return (value - direct) / abs(direct)


def metric_name(g: RewardFunctionSpec) -> str:
    return "accuracy" if g.kind is RewardKind.EXACT_MATCH_REASONING else "weighted_reward"


def evaluate(
    mode: Mode | str,
    dataset: Dataset,
    teacher: Optional[ModelHandle],
    student: ModelHandle,
    g: RewardFunctionSpec,
    sampling: SamplingConfig,
    *,
    direct_template: str = "",
    direct_report: Optional[EvalReport] = None,
    tolerate_failures: bool = False,
    max_concurrency: int = 1,
) -> EvalReport:
    """Score one Teacher mode on ``dataset``.

    Each query gets one instruction (none for direct prompting) and K Student
    samples. Per-query scores are accuracy for reasoning and the mean weighted
    reward for alignment. Toy-policy teachers sample from a copy of the policy
    reseeded from ``sampling.seed``, so repeated evaluations agree.
    """
    mode = Mode(mode)
    if (mode is Mode.DIRECT_PROMPTING) != (teacher is None):
        raise ValueError(f"mode {mode.value} {'takes no' if teacher is not None else 'requires a'} teacher")
    seed = sampling.seed

    instructions: list[Any] = [None] * len(dataset)
    if teacher is not None:
        policy = None
        if teacher.backend is BackendKind.TOY_POLICY:
            policy = teacher.policy.replace(rng=np.random.default_rng(derive_seed(seed, "eval-teacher", 0)))
        for i, q in enumerate(dataset):
            instructions[i] = sample_instruction(teacher, q, derive_seed(seed, f"eval-teacher/{q.id}", 0), policy)

    def one(item: tuple[Query, Any]) -> Optional[QueryScore]:
        q, ins = item
        try:
            gens = run_student(q, ins, student, g, sampling, derive_seed(seed, f"eval/{q.id}", 0),
                               direct_template)
        except WSTError as exc:
            if tolerate_failures:
                logger.warning("evaluation of %s failed: %s", q.id, exc)
                return None
            raise tag_query(exc, q.id)
        if g.kind is RewardKind.EXACT_MATCH_REASONING:
            return QueryScore(q.id, accuracy([int(x.scalar_reward) for x in gens]))  # type: ignore[arg-type]
        vecs = [x.reward_vector for x in gens]
        return QueryScore(q.id, mean([x.scalar_reward for x in gens]),  # type: ignore[misc]
                          mean([v.harmless for v in vecs]), mean([v.helpful for v in vecs]))  # type: ignore[union-attr]

    results = pmap(one, list(zip(dataset.queries, instructions)), max_concurrency)
    scores = [r for r in results if r is not None]
    failed = [q.id for q, r in zip(dataset.queries, results) if r is None]
    if not scores:
        raise WSTError(f"every query failed in {mode.value} evaluation")
    aggregate = mean([s.score for s in scores])
    improvement = None
    if direct_report is not None:
        improvement = relative_improvement(aggregate, direct_report.aggregate)
    elif mode is Mode.DIRECT_PROMPTING:
        improvement = 0.0
    return EvalReport(mode, metric_name(g), scores, aggregate, improvement, g.weights, bool(failed), failed)


# ---------------------------------------------------------------------------
# Comparison table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    mode: Mode
    metric_name: str
    weights_label: str
    aggregate: float
    improvement_vs_direct: Optional[float]


def compare_baselines(reports: Sequence[EvalReport]) -> list[ComparisonRow]:
    direct = [r for r in reports if r.mode is Mode.DIRECT_PROMPTING]
    if not direct:
        raise MissingDirectBaseline("comparison needs a direct_prompting report")
    if len(direct) > 1:
        raise ValueError(f"expected one direct_prompting report, got {len(direct)}")
    d = direct[0].aggregate
    rows = [ComparisonRow(r.mode, r.metric_name, r.weights_label, r.aggregate,
                          0.0 if r is direct[0] else relative_improvement(r.aggregate, d))
            for r in reports]
    rows.sort(key=lambda row: (-row.aggregate, row.mode.value))
    return rows


# ---------------------------------------------------------------------------
# Pareto frontier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    harmless: float
    helpful: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.harmless) and math.isfinite(self.helpful)):
            raise ValueError(f"non-finite Pareto point {self}")

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.harmless, self.helpful)


def frontier_mask(points: Sequence[ParetoPoint]) -> list[bool]:
    """Non-dominated flags, both objectives maximized.

    Sweeps points in decreasing ``harmless``; a point survives when it has the
    best ``helpful`` among its equal-``harmless`` tie group and beats every
    point with strictly larger ``harmless``. O(n log n).
    """
    order = sorted(range(len(points)), key=lambda i: (-points[i].harmless, -points[i].helpful))
    mask = [False] * len(points)
    best_above = -math.inf
    i = 0
    while i < len(order):
        x = points[order[i]].harmless
        j = i
        while j < len(order) and points[order[j]].harmless == x:
            j += 1
        top = points[order[i]].helpful
        if top > best_above:
            for k in order[i:j]:
                mask[k] = points[k].helpful == top
        best_above = max(best_above, top)
        i = j
    return mask


def pareto_frontier(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    return [p for p, keep in zip(points, frontier_mask(points)) if keep]


def points_from_reports(reports: Iterable[EvalReport]) -> list[ParetoPoint]:
    out = []
    for r in reports:
        harmless, helpful = r.mean_vector()
        out.append(ParetoPoint(f"{r.mode.value}@{r.weights_label}", harmless, helpful))
    return out


# ---------------------------------------------------------------------------
# Weight sweep
# ---------------------------------------------------------------------------


def weight_sweep(
    weights_list: Sequence[PreferenceWeights],
    dataset: Dataset,
    modes: Mapping[Mode | str, Optional[ModelHandle]],
    student: ModelHandle,
    g: RewardFunctionSpec,
    sampling: SamplingConfig,
    **kwargs: Any,
) -> list[EvalReport]:
    """One report per (weights, mode), ordered by weights then mode as given.

    When direct prompting is among the modes it runs first for each weight
    vector and the other reports carry improvements relative to it.
    """
    if dataset.task_kind is not TaskKind.ALIGNMENT:
        raise ValueError("weight sweeps apply to alignment datasets")
    specs = [g.with_weights(w) for w in weights_list]
    ordered = sorted(((Mode(m), t) for m, t in modes.items()),
                     key=lambda mt: mt[0] is not Mode.DIRECT_PROMPTING)
    reports = []
    for spec in specs:
        direct = None
        for mode, teacher in ordered:
            rep = evaluate(mode, dataset, teacher, student, spec, sampling, direct_report=direct, **kwargs)
            if mode is Mode.DIRECT_PROMPTING:
                direct = rep
            reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("query_id", "score", "harmless", "helpful")
COMPARISON_COLUMNS = ("rank", "mode", "metric_name", "weights", "aggregate", "improvement_vs_direct")
PARETO_COLUMNS = ("label", "harmless", "helpful", "on_frontier")


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, obj: Any) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``{mode}_{metric}_{weights}.csv`` (per-query rows) and its JSON mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{report.stem}.csv", out / f"{report.stem}.json"
    _write_csv(csv_path, REPORT_COLUMNS,
               ((s.query_id, s.score, s.harmless, s.helpful) for s in report.per_query))
    _write_json(json_path, report.to_dict())
    return csv_path, json_path


def emit_comparison(rows: Sequence[ComparisonRow], out_dir: str | Path, name: str = "comparison") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = [(i + 1, r.mode.value, r.metric_name, r.weights_label, r.aggregate, r.improvement_vs_direct)
             for i, r in enumerate(rows)]
    csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
    _write_csv(csv_path, COMPARISON_COLUMNS, table)
    _write_json(json_path, [dict(zip(COMPARISON_COLUMNS, row)) for row in table])
    return csv_path, json_path


def emit_pareto(points: Sequence[ParetoPoint], out_dir: str | Path, name: str = "pareto") -> tuple[Path, Path]:
    """All points with an ``on_frontier`` flag, ready to plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = frontier_mask(points)
    table = [(p.label, p.harmless, p.helpful, m) for p, m in zip(points, mask)]
    csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
    _write_csv(csv_path, PARETO_COLUMNS, table)
    _write_json(json_path, [dict(zip(PARETO_COLUMNS, row)) for row in table])
    return csv_path, json_path


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
