"""Domain types, run configuration and seed derivation shared across the harness."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

WEIGHT_SUM_TOL = 1e-9
REASONING_K = 10
ALIGNMENT_K = 1
DEFAULT_BASELINE_SAMPLES = 10


class WSTError(Exception):
    """Base class for harness errors."""


class InvalidWeights(WSTError, ValueError):
    pass


class ConfigError(WSTError, ValueError):
    pass


class TaskKind(str, enum.Enum):
    REASONING = "reasoning"
    ALIGNMENT = "alignment"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    id: str
    task_kind: TaskKind
    text: str
    reference_answer: Optional[str] = None
    category: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not self.id:
            raise ValueError("query id must be non-empty")
        has_ref = self.reference_answer is not None
        if has_ref != (self.task_kind is TaskKind.REASONING):
            raise ValueError(
                f"query {self.id!r}: reference_answer must be set iff task_kind is reasoning"
            )
        if self.category < 0:
            raise ValueError(f"query {self.id!r}: negative category")


@dataclass(frozen=True)
class Instruction:
    text: str
    action_index: Optional[int] = None
    logprob_old: Optional[float] = None

    def __post_init__(self) -> None:
        if (self.action_index is None) != (self.logprob_old is None):
            raise ValueError("action_index and logprob_old must be given together")
        if self.logprob_old is not None and self.logprob_old > 0:
            raise ValueError(f"logprob_old must be <= 0, got {self.logprob_old}")

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "action_index": self.action_index, "logprob_old": self.logprob_old}


@dataclass(frozen=True)
class RewardVector:
    """Alignment objectives, ordered ``[harmless, helpful]``."""

    harmless: float
    helpful: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.harmless) and math.isfinite(self.helpful)):
            raise ValueError(f"non-finite reward vector: {self}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.harmless, self.helpful)

    def scaled(self, c: float) -> "RewardVector":
        return RewardVector(self.harmless * c, self.helpful * c)


@dataclass(frozen=True)
class PreferenceWeights:
    """Simplex weights ordered ``[w_harmless, w_helpful]``."""

    w: tuple[float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))

    @property
    def harmless(self) -> float:
        return self.w[0]

    @property
    def helpful(self) -> float:
        return self.w[1]

    def label(self) -> str:
        return "w" + "-".join(f"{x:g}" for x in self.w)

    @classmethod
    def parse(cls, text: str) -> "PreferenceWeights":
        """Parse ``"a,b"`` and validate."""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError as exc:
            raise InvalidWeights(f"weights must be comma-separated numbers, got {text!r}") from exc
        return validate_weights(cls(tuple(parts)))


@dataclass(frozen=True)
class Generation:
    text: str
    scalar_reward: Optional[float] = None
    reward_vector: Optional[RewardVector] = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"text": self.text, "scalar_reward": self.scalar_reward}
        if self.reward_vector is not None:
            out["reward_vector"] = {
                "harmless": self.reward_vector.harmless,
                "helpful": self.reward_vector.helpful,
            }
        return out


@dataclass(frozen=True)
class SamplingConfig:
    K: int = REASONING_K
    temperature: float = 0.7
    max_tokens: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")

    @classmethod
    def for_task(cls, task_kind: TaskKind | str, **kw: Any) -> "SamplingConfig":
        k = REASONING_K if TaskKind(task_kind) is TaskKind.REASONING else ALIGNMENT_K
        kw.setdefault("K", k)
        return cls(**kw)


@dataclass(frozen=True)
class Episode:
    query_id: str
    instruction: Optional[Instruction]
    generations: tuple[Generation, ...]
    mean_reward: float
    baseline: float
    reward: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "instruction": None if self.instruction is None else self.instruction.to_dict(),
            "generations": [g.to_dict() for g in self.generations],
            "mean_reward": self.mean_reward,
            "baseline": self.baseline,
            "reward": self.reward,
        }


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def validate_weights(w: PreferenceWeights) -> PreferenceWeights:
    if len(w.w) != 2:
        raise InvalidWeights(f"expected 2 weights, got {len(w.w)}")
    for j, x in enumerate(w.w):
        if not math.isfinite(x):
            raise InvalidWeights(f"w[{j}]={x} is not finite")
        if x < 0:
            raise InvalidWeights(f"w[{j}]={x} is negative")
    total = math.fsum(w.w)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise InvalidWeights(f"weights must sum to 1 (sum={total:g})")
    return w


_SEED_PERSON = b"wst-seed-v1"


def derive_seed(run_seed: int, query_id: str, sample_index: int) -> int:
    """Mix ``(run_seed, query_id, sample_index)`` into an unsigned 64-bit seed.

    The inputs are packed as ``run_seed`` (signed 128-bit, little endian),
    the UTF-8 length-prefixed id, and ``sample_index`` (signed 64-bit), then
    hashed with BLAKE2b-64 under a fixed personalization string. Length
    prefixing keeps distinct tuples from serializing to the same bytes.
    """
    qid = query_id.encode("utf-8")
    payload = (
        int(run_seed).to_bytes(16, "little", signed=True)
        + struct.pack("<Q", len(qid))
        + qid
        + int(sample_index).to_bytes(8, "little", signed=True)
    )
    digest = hashlib.blake2b(payload, digest_size=8, person=_SEED_PERSON).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.04
    learning_rate: float = 0.05
    steps_per_round: int = 1
    std_floor: float = 1e-8

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.clip_epsilon <= 0:
            raise ConfigError("clip_epsilon must be > 0")
        if self.kl_coefficient < 0:
            raise ConfigError("kl_coefficient must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.steps_per_round < 1:
            raise ConfigError("steps_per_round must be >= 1")
        if self.std_floor <= 0:
            raise ConfigError("std_floor must be > 0")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. TOML keys mirror these field names.

    ``teacher_backend`` / ``student_backend`` / ``reward`` are plain tables
    interpreted by :mod:`wst.backends` and :mod:`wst.reward`.
    """

    task_kind: TaskKind
    dataset_path: str
    teacher_backend: Mapping[str, Any]
    student_backend: Mapping[str, Any]
    sampling: SamplingConfig
    output_dir: str
    weights: Optional[PreferenceWeights] = None
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    baseline_samples: int = DEFAULT_BASELINE_SAMPLES
    max_concurrency: int = 4
    reward: Mapping[str, Any] = field(default_factory=dict)
    direct_template: Optional[str] = None
    batch_size: int = 4
    max_steps: int = 100
    checkpoint_interval: int = 10
    plateau_window: int = 50
    plateau_tol: float = 1e-3
    record_episodes: bool = False
    record_timing: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if self.baseline_samples < 1:
            raise ConfigError("baseline_samples must be >= 1")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.plateau_window < 0:
            raise ConfigError("plateau_window must be >= 0")
        for name in ("dataset_path", "output_dir"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value or "\x00" in value:
                raise ConfigError(f"{name} must be a non-empty path string")
        if self.task_kind is TaskKind.ALIGNMENT:
            if self.weights is None:
                raise ConfigError("alignment runs require weights")
            validate_weights(self.weights)
        elif self.weights is not None:
            raise ConfigError("weights are only valid for alignment runs")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["task_kind"] = self.task_kind.value
        out["weights"] = None if self.weights is None else list(self.weights.w)
        out["teacher_backend"] = dict(self.teacher_backend)
        out["student_backend"] = dict(self.student_backend)
        out["reward"] = dict(self.reward)
        return out

    def fingerprint(self) -> str:
        """Hash of everything that determines the training trajectory.

        ``output_dir`` and ``max_steps`` are excluded so a run can be moved or
        extended and still resume.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("max_steps")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(table: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def config_from_dict(raw: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed TOML table.

    Relative ``dataset_path`` / ``output_dir`` / backend file paths are
    resolved against ``base_dir`` when given.
    """
    top = [f.name for f in fields(RunConfig)]
    _check_keys(raw, top, "config")
    data = dict(raw)
    for required in ("task_kind", "dataset_path", "teacher_backend", "student_backend", "output_dir"):
        if required not in data:
            raise ConfigError(f"missing required key: {required}")
    try:
        task_kind = TaskKind(data["task_kind"])
    except ValueError as exc:
        raise ConfigError(f"task_kind must be one of reasoning/alignment, got {data['task_kind']!r}") from exc

    sampling_raw = dict(data.get("sampling", {}))
    _check_keys(sampling_raw, [f.name for f in fields(SamplingConfig)], "sampling")
    data["sampling"] = SamplingConfig.for_task(task_kind, **sampling_raw)

    grpo_raw = dict(data.get("grpo", {}))
    _check_keys(grpo_raw, [f.name for f in fields(GrpoConfig)], "grpo")
    data["grpo"] = GrpoConfig(**grpo_raw)

    if data.get("weights") is not None:
        data["weights"] = PreferenceWeights(tuple(data["weights"]))

    if base_dir is not None:
        for key in ("dataset_path", "output_dir"):
            data[key] = _resolve(data[key], base_dir)
        for key in ("teacher_backend", "student_backend"):
            spec = dict(data[key])
            for pk in ("script_path", "templates_path"):
                if pk in spec:
                    spec[pk] = _resolve(spec[pk], base_dir)
            data[key] = spec
    return RunConfig(**data)


def _resolve(p: str, base_dir: Path) -> str:
    path = Path(p)
    return str(path if path.is_absolute() else (base_dir / path))


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a TOML run config; ``overrides`` replace top-level keys (or ``sampling.seed`` style keys)."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if "." in key:
            table, sub = key.split(".", 1)
            raw.setdefault(table, {})[sub] = value
        else:
            raw[key] = value
    return config_from_dict(raw, base_dir=path.parent)
