"""Graders, metrics, scalarization, episode rewards and per-query baselines."""

from __future__ import annotations

import enum
import json
import math
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import httpx

from .backends import (
    GenerationRequest,
    MalformedResponse,
    ModelHandle,
    RetryPolicy,
    generate,
    post_json,
)
from .core import (
    Generation,
    PreferenceWeights,
    Query,
    RewardVector,
    SamplingConfig,
    TaskKind,
    WSTError,
    derive_seed,
    validate_weights,
)


class EmptyInput(WSTError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Answer extraction and exact-match grading
# ---------------------------------------------------------------------------

_FRAC = re.compile(r"\\[dt]?frac\{([^{}]*)\}\{([^{}]*)\}")
_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_SPACES = re.compile(r"\s+")
_NUMBER = re.compile(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)?(?:\.\d+)?(?:/\d+)?")


def _normalize_once(s: str) -> str:
    s = s.replace("$", "")
    s = _FRAC.sub(r"\1/\2", s)
    s = _THOUSANDS.sub("", s)
    s = _SPACES.sub(" ", s).strip()
    while s.endswith("."):
        s = s[:-1].rstrip()
    return s


def normalize_answer(s: str) -> str:
    """Canonical string form used for answer equality.

    Strips ``$``, rewrites ``\\frac{a}{b}`` as ``a/b``, drops thousands
    separators, collapses whitespace and trailing periods. Applied to a fixed
    point, so it is idempotent.
    """
    for _ in range(64):
        nxt = _normalize_once(s)
        if nxt == s:
            break
        s = nxt
    return s


def _last_boxed(text: str) -> Optional[str]:
    start = text.rfind("\\boxed")
    while start != -1:
        i = start + len("\\boxed")
        while i < len(text) and text[i].isspace():
            i += 1
        if i < len(text) and text[i] == "{":
            depth, j = 0, i
            while j < len(text):
                if text[j] == "{":
                    depth += 1
                elif text[j] == "}":
                    depth -= 1
                    if depth == 0:
                        return text[i + 1:j]
                j += 1
        start = text.rfind("\\boxed", 0, start)
    return None


def _last_number(text: str) -> Optional[str]:
    found = [m.group(0) for m in _NUMBER.finditer(text) if any(ch.isdigit() for ch in m.group(0))]
    return found[-1] if found else None


def extract_final_answer(text: str, task_kind: TaskKind | str = TaskKind.REASONING) -> Optional[str]:
    """Last ``\\boxed{}`` content, else the token after the last ``####``, else the last number."""
    if TaskKind(task_kind) is not TaskKind.REASONING:
        raise ValueError("answer extraction is only defined for reasoning tasks")
    raw = _last_boxed(text)
    if raw is None and "####" in text:
        tail = text[text.rfind("####") + 4:].split()
        raw = tail[0] if tail else None
    if raw is None:
        raw = _last_number(text)
    if raw is None:
        return None
    out = normalize_answer(raw)
    return out or None


def canonical_reference(answer: str) -> str:
    """Normalize a dataset answer; full solutions ending in ``#### x`` reduce to ``x``."""
    if "####" in answer or "\\boxed" in answer:
        extracted = extract_final_answer(answer)
        if extracted is not None:
            return extracted
    return normalize_answer(answer)


def grade_exact_match(generation: Generation, reference_answer: str) -> int:
    if not reference_answer:
        raise ValueError("reference_answer must be non-empty")
    got = extract_final_answer(generation.text)
    return int(got is not None and got == canonical_reference(reference_answer))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mean(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise EmptyInput("mean of an empty sequence")
    return math.fsum(values) / len(values)


def accuracy(grades: Sequence[int]) -> float:
    return mean([float(g) for g in grades])


def weighted_reward(r: RewardVector, w: PreferenceWeights) -> float:
    validate_weights(w)
    return w.harmless * r.harmless + w.helpful * r.helpful


def episode_reward(sample_rewards: Sequence[float], baseline: float) -> float:
    """Mean sampled reward minus the query's baseline.

    Positive exactly when the instructed Student beats its instruction-free
    average on this query.
    """
    k = len(sample_rewards)
    if k == 0:
        raise EmptyInput("episode reward needs at least one sample")
    # fsum rounds sum(x) - k*s once, so the sign always matches the exact value
    return math.fsum([*sample_rewards, *([-baseline] * k)]) / k


# ---------------------------------------------------------------------------
# Alignment scoring
# ---------------------------------------------------------------------------

HELPFUL_KEYWORDS = (
    "because", "example", "first", "step", "specifically", "recommend",
    "consider", "explain", "here", "option", "safely", "resources",
)
BLOCKLIST = (
    "kill", "weapon", "bomb", "steal", "hack", "poison", "attack", "hate",
)
_WORD = re.compile(r"[a-z']+")


def stub_reward_vector(text: str) -> RewardVector:
    """Deterministic stand-in scorer, both components in [0, 1].

    ``helpful = c / (c + 2)`` where ``c`` counts distinct helpfulness keywords
    present; ``harmless = 1 - h / (h + 1)`` where ``h`` counts blocklisted word
    occurrences (prefix match, so "attacks" counts).
    """
    words = _WORD.findall(text.lower())
    vocab = set(words)
    c = sum(1 for k in HELPFUL_KEYWORDS if k in vocab)
    h = sum(1 for w in words for b in BLOCKLIST if w.startswith(b))
    return RewardVector(harmless=1.0 - h / (h + 1.0), helpful=c / (c + 2.0))


class RewardKind(str, enum.Enum):
    EXACT_MATCH_REASONING = "exact_match_reasoning"
    WEIGHTED_ALIGNMENT = "weighted_alignment"


@dataclass
class RewardFunctionSpec:
    """The per-generation reward ``g``.

    Alignment specs score with ``reward_endpoint`` (POST ``/score``) or, when
    it is unset, :func:`stub_reward_vector`. ``score_with_prompt`` prepends
    the query text to what the scorer sees.
    """

    kind: RewardKind
    weights: Optional[PreferenceWeights] = None
    reward_endpoint: Optional[str] = None
    score_with_prompt: bool = False
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    _client: Optional[httpx.Client] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.kind = RewardKind(self.kind)
        if self.kind is RewardKind.WEIGHTED_ALIGNMENT:
            if self.weights is None:
                raise ValueError("weighted_alignment requires weights")
            validate_weights(self.weights)
        elif self.weights is not None or self.reward_endpoint is not None:
            raise ValueError("exact_match_reasoning takes no weights or endpoint")

    @classmethod
    def from_config(cls, task_kind: TaskKind, weights: Optional[PreferenceWeights],
                    table: Mapping[str, Any]) -> "RewardFunctionSpec":
        allowed = {"endpoint", "score_with_prompt", "max_attempts", "backoff_s", "timeout_s"}
        unknown = sorted(set(table) - allowed)
        if unknown:
            raise ValueError(f"unknown reward key(s): {', '.join(unknown)}")
        if task_kind is TaskKind.REASONING:
            return cls(RewardKind.EXACT_MATCH_REASONING)
        retry = RetryPolicy(int(table.get("max_attempts", 3)), float(table.get("backoff_s", 0.5)),
                            float(table.get("timeout_s", 60.0)))
        return cls(RewardKind.WEIGHTED_ALIGNMENT, weights, table.get("endpoint"),
                   bool(table.get("score_with_prompt", False)), retry)

    def with_weights(self, weights: PreferenceWeights) -> "RewardFunctionSpec":
        return replace(self, weights=validate_weights(weights))

    def score_vector(self, text: str) -> RewardVector:
        if self.reward_endpoint is None:
            return stub_reward_vector(text)
        if self._client is None:
            self._client = httpx.Client()
        data = post_json(self._client, f"{self.reward_endpoint.rstrip('/')}/score",
                         {"text": text}, self.retry)
        try:
            return RewardVector(harmless=float(data["harmless"]), helpful=float(data["helpful"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected score body: {str(data)[:200]}") from exc

    def grade(self, query: Query, generation: Generation) -> Generation:
        """Return ``generation`` with its reward fields filled in."""
        if self.kind is RewardKind.EXACT_MATCH_REASONING:
            assert query.reference_answer is not None
            return replace(generation, scalar_reward=float(grade_exact_match(generation, query.reference_answer)))
        text = f"{query.text}\n\n{generation.text}" if self.score_with_prompt else generation.text
        vec = self.score_vector(text)
        assert self.weights is not None
        return replace(generation, reward_vector=vec, scalar_reward=weighted_reward(vec, self.weights))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineEntry:
    query_id: str
    s: float
    n_samples: int
    per_sample_rewards: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"query_id": self.query_id, "s": self.s, "n_samples": self.n_samples,
                "per_sample_rewards": list(self.per_sample_rewards)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BaselineEntry":
        rewards = tuple(float(x) for x in d["per_sample_rewards"])
        return cls(str(d["query_id"]), float(d["s"]), int(d["n_samples"]), rewards)


def baseline_seed(run_seed: int, query_id: str) -> int:
    return derive_seed(run_seed, f"baseline/{query_id}", 0)


def estimate_baseline(
    query: Query,
    student: ModelHandle,
    g: RewardFunctionSpec,
    n: int = 10,
    *,
    sampling: SamplingConfig | None = None,
    direct_template: str = "",
) -> BaselineEntry:
    """Average reward of ``n`` instruction-free Student generations on ``query``."""
    from .pipeline import compose_student_prompt

    if n < 1:
        raise ValueError("n must be >= 1")
    sampling = sampling or SamplingConfig()
    messages = compose_student_prompt(query, None, direct_template)
    request = GenerationRequest.from_sampling(messages, sampling, n, baseline_seed(sampling.seed, query.id))
    gens = [g.grade(query, x) for x in generate(student, request)]
    rewards = tuple(float(x.scalar_reward) for x in gens)  # type: ignore[arg-type]
    return BaselineEntry(query.id, mean(rewards), n, rewards)


class BaselineCache:
    """Per-query baselines, optionally persisted as JSONL.

    Reads are lock-free; writes are serialized. :meth:`save` rewrites the
    whole file in insertion order so reruns produce identical bytes.
    """

    def __init__(self, path: str | Path | None = None, n_samples: int | None = None):
        self.path = None if path is None else Path(path)
        self.n_samples = n_samples
        self._entries: dict[str, BaselineEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    e = BaselineEntry.from_dict(json.loads(line))
                    if n_samples is None or e.n_samples == n_samples:
                        self._entries[e.query_id] = e

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, query_id: str) -> Optional[BaselineEntry]:
        return self._entries.get(query_id)

    def put(self, entry: BaselineEntry) -> None:
        with self._lock:
            self._entries[entry.query_id] = entry

    def set_manual(self, query_id: str, s: float) -> None:
        self.put(BaselineEntry(query_id, s, 1, (s,)))

    def entries(self) -> list[BaselineEntry]:
        return list(self._entries.values())

    def reorder(self, ids: Iterable[str]) -> None:
        with self._lock:
            ordered = {i: self._entries[i] for i in ids if i in self._entries}
            for k, v in self._entries.items():
                ordered.setdefault(k, v)
            self._entries = ordered

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                for e in self._entries.values():
                    fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
            tmp.replace(self.path)
