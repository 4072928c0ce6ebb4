"""Uniform generation interface over remote, scripted and toy-policy backends."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence, Union

import httpx
import numpy as np

from .core import Generation, Instruction, SamplingConfig, WSTError, derive_seed

logger = logging.getLogger(__name__)

API_KEY_ENV = "WST_API_KEY"
PROB_SUM_TOL = 1e-9
DEFAULT_TEACHER_TEMPERATURE = 1.0
DEFAULT_STUDENT_TEMPERATURE = 0.7


class BackendError(WSTError):
    pass


class BackendUnavailable(BackendError):
    pass


class ScriptMiss(BackendError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "script miss"


class MalformedResponse(BackendError):
    pass


class CategoryOutOfRange(WSTError, IndexError):
    pass


class ActionOutOfRange(WSTError, IndexError):
    pass


class Role(str, enum.Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class BackendKind(str, enum.Enum):
    REMOTE = "remote"
    SCRIPTED = "scripted"
    TOY_POLICY = "toy_policy"


Message = Mapping[str, str]


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[Mapping[str, str], ...]
    n: int = 1
    temperature: float = DEFAULT_STUDENT_TEMPERATURE
    max_tokens: int = 512
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(dict(m) for m in self.messages))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.messages:
            raise ValueError("messages must be non-empty")

    @classmethod
    def from_sampling(
        cls, messages: Sequence[Message], sampling: SamplingConfig, n: int, seed: int
    ) -> "GenerationRequest":
        return cls(tuple(messages), n=n, temperature=sampling.temperature,
                   max_tokens=sampling.max_tokens, seed=seed)


# ---------------------------------------------------------------------------
# Scripted responses
# ---------------------------------------------------------------------------

ScriptEntry = Union[str, tuple[tuple[float, str], ...]]


def parse_script(raw: Mapping[str, Any]) -> dict[str, ScriptEntry]:
    """Validate a script mapping (key -> response or list of {probability, response})."""
    script: dict[str, ScriptEntry] = {}
    for key, value in raw.items():
        if isinstance(value, str):
            script[key] = value
            continue
        if not isinstance(value, list) or not value:
            raise ValueError(f"script entry {key!r}: expected string or non-empty list")
        alts = []
        for alt in value:
            try:
                p, resp = float(alt["probability"]), alt["response"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"script entry {key!r}: bad alternative {alt!r}") from exc
            if p < 0 or not isinstance(resp, str):
                raise ValueError(f"script entry {key!r}: bad alternative {alt!r}")
            alts.append((p, resp))
        total = math.fsum(p for p, _ in alts)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"script entry {key!r}: probabilities sum to {total}, not 1")
        script[key] = tuple(alts)
    return script


def load_script(path: str | Path) -> dict[str, ScriptEntry]:
    with open(path) as fh:
        return parse_script(json.load(fh))


def prompt_text(messages: Sequence[Message]) -> str:
    return "\n".join(m["content"] for m in messages)


def match_key(script: Mapping[str, ScriptEntry], text: str) -> str:
    """Longest script key occurring in ``text``; ties go to the lexicographically smallest."""
    best: Optional[str] = None
    for key in script:
        if key in text and (best is None or len(key) > len(best) or (len(key) == len(best) and key < best)):
            best = key
    if best is None:
        raise ScriptMiss(f"no script key matches prompt {text[:80]!r}")
    return best


def resolve_choices(
    script: Mapping[str, ScriptEntry],
    messages: Sequence[Message],
    n: int,
    server_seed: int,
    request_seed: Optional[int],
) -> list[str]:
    """Scripted completions for a request.

    Choice ``i`` draws from ``Random(derive_seed(server_seed, str(request_seed), i))``,
    so the in-process backend and the stub server agree exactly.
    """
    entry = script[match_key(script, prompt_text(messages))]
    if isinstance(entry, str):
        return [entry] * n
    tag = str(0 if request_seed is None else request_seed)
    out = []
    for i in range(n):
        u = random.Random(derive_seed(server_seed, tag, i)).random()
        acc = 0.0
        pick = entry[-1][1]
        for p, resp in entry:
            acc += p
            if u < acc:
                pick = resp
                break
        out.append(pick)
    return out


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> list[Generation]: ...


class ScriptedBackend:
    def __init__(self, script: Mapping[str, ScriptEntry], seed: int = 0):
        self.script = dict(script)
        self.seed = seed

    def generate(self, request: GenerationRequest) -> list[Generation]:
        texts = resolve_choices(self.script, request.messages, request.n, self.seed, request.seed)
        return [Generation(t) for t in texts]


# ---------------------------------------------------------------------------
# Remote (OpenAI-compatible) backend
# ---------------------------------------------------------------------------


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 60.0


def post_json(
    client: httpx.Client, url: str, body: Mapping[str, Any], retry: RetryPolicy,
    headers: Mapping[str, str] | None = None,
) -> Any:
    """POST with bounded retries on transport errors, 429 and 5xx."""
    last: Exception | str = ""
    for attempt in range(retry.max_attempts):
        if attempt:
            time.sleep(retry.backoff_s * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body, headers=headers, timeout=retry.timeout_s)
        except httpx.TransportError as exc:
            last = exc
            logger.debug("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last = f"HTTP {resp.status_code}"
            logger.debug("POST %s -> %d (attempt %d)", url, resp.status_code, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise MalformedResponse(f"POST {url} -> HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"POST {url}: response is not JSON") from exc
    raise BackendUnavailable(f"POST {url} failed after {retry.max_attempts} attempts: {last}")


class RemoteBackend:
    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        retry: RetryPolicy | None = None,
        api_key_env: str = API_KEY_ENV,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.retry = retry or RetryPolicy()
        self.api_key_env = api_key_env
        self._client = httpx.Client()

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def generate(self, request: GenerationRequest) -> list[Generation]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [dict(m) for m in request.messages],
            "temperature": request.temperature,
            "n": request.n,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        data = post_json(self._client, f"{self.endpoint}/v1/chat/completions", body,
                         self.retry, self._headers())
        try:
            choices = data["choices"]
            return [Generation(str(c["message"]["content"])) for c in choices]
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat completion body: {str(data)[:200]}") from exc

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# Toy teacher policy
# ---------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - np.max(logits))
    return z / z.sum()


@dataclass
class TeacherPolicy:
    """Categorical policy over instruction templates, one logit row per query category."""

    templates: tuple[str, ...]
    theta: np.ndarray
    theta_ref: np.ndarray
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self) -> None:
        self.templates = tuple(self.templates)
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        self.theta_ref = np.atleast_2d(np.asarray(self.theta_ref, dtype=np.float64))
        if len(self.templates) < 2:
            raise ValueError("a teacher policy needs at least 2 templates")
        if self.theta.shape[1] != len(self.templates):
            raise ValueError(f"theta has {self.theta.shape[1]} columns for {len(self.templates)} templates")
        if self.theta_ref.shape != self.theta.shape:
            raise ValueError("theta_ref must match theta's shape")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")

    @classmethod
    def uniform(cls, templates: Sequence[str], categories: int = 1, seed: int = 0) -> "TeacherPolicy":
        theta = np.zeros((categories, len(templates)))
        return cls(tuple(templates), theta, theta.copy(), np.random.default_rng(seed))

    @property
    def num_categories(self) -> int:
        return self.theta.shape[0]

    @property
    def rng_state(self) -> dict[str, Any]:
        return self.rng.bit_generator.state

    def _check_category(self, category: int) -> None:
        if not 0 <= category < self.num_categories:
            raise CategoryOutOfRange(f"category {category} outside [0, {self.num_categories})")

    def logprobs(self, category: int, theta: np.ndarray | None = None) -> np.ndarray:
        self._check_category(category)
        row = (self.theta if theta is None else theta)[category]
        shifted = row - np.max(row)
        return shifted - np.log(np.exp(shifted).sum())

    def sample(self, category: int = 0) -> Instruction:
        """Draw a template, advancing this policy's rng."""
        probs = policy_distribution(self, category)
        action = int(self.rng.choice(len(self.templates), p=probs))
        logprob = min(float(self.logprobs(category)[action]), 0.0)
        return Instruction(self.templates[action], action, logprob)

    def refreshed_reference(self) -> "TeacherPolicy":
        return self.replace(theta_ref=self.theta.copy())

    def replace(self, **changes: Any) -> "TeacherPolicy":
        """Copy with fields replaced; the rng is cloned, never shared."""
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(self.rng.bit_generator.state)
        kw = dict(templates=self.templates, theta=self.theta.copy(),
                  theta_ref=self.theta_ref.copy(), rng=rng)
        kw.update(changes)
        return TeacherPolicy(**kw)


def policy_distribution(policy: TeacherPolicy, category: int = 0) -> np.ndarray:
    policy._check_category(category)
    return _softmax(policy.theta[category])


def policy_grad_logprob(policy: TeacherPolicy, category: int, action: int) -> np.ndarray:
    """Gradient of ``log pi(action | category)`` w.r.t. the full logit table."""
    probs = policy_distribution(policy, category)
    if not 0 <= action < len(policy.templates):
        raise ActionOutOfRange(f"action {action} outside [0, {len(policy.templates)})")
    grad = np.zeros_like(policy.theta)
    grad[category] = -probs
    grad[category, action] += 1.0
    return grad


class ToyPolicyBackend:
    """Wraps a :class:`TeacherPolicy` behind the generic ``generate`` call.

    Samples use a fresh rng seeded from the request so the policy's own
    state is left alone; training samples through :meth:`TeacherPolicy.sample`.
    """

    def __init__(self, policy: TeacherPolicy):
        self.policy = policy

    def generate(self, request: GenerationRequest) -> list[Generation]:
        probs = policy_distribution(self.policy, 0)
        rng = np.random.default_rng(0 if request.seed is None else request.seed)
        idx = rng.choice(len(probs), size=request.n, p=probs)
        return [Generation(self.policy.templates[int(i)]) for i in idx]


# ---------------------------------------------------------------------------
# Handles
# ---------------------------------------------------------------------------


@dataclass
class ModelHandle:
    role: Role
    backend: BackendKind
    client: Any
    prompt_template: Optional[str] = None

    def __post_init__(self) -> None:
        self.role = Role(self.role)
        self.backend = BackendKind(self.backend)
        if self.backend is BackendKind.TOY_POLICY and self.role is not Role.TEACHER:
            raise ValueError("toy_policy backend is only valid for the teacher role")

    @property
    def policy(self) -> TeacherPolicy:
        if self.backend is not BackendKind.TOY_POLICY:
            raise TypeError("handle has no toy policy")
        return self.client.policy


def generate(handle: ModelHandle, request: GenerationRequest) -> list[Generation]:
    out = handle.client.generate(request)
    if len(out) != request.n:
        raise MalformedResponse(f"expected {request.n} generations, got {len(out)}")
    return out


DEFAULT_TEACHER_PROMPT = (
    "Write short instructions that would help an assistant respond well to the "
    "request below. Do not answer the request yourself.\n\n{query}"
)

_REMOTE_KEYS = {"kind", "endpoint", "model", "max_attempts", "backoff_s", "timeout_s", "api_key_env",
                "prompt_template"}
_SCRIPTED_KEYS = {"kind", "script_path", "script", "seed", "prompt_template"}
_TOY_KEYS = {"kind", "templates", "templates_path", "categories", "seed"}


def load_templates(path: str | Path) -> list[str]:
    """JSON list of strings, or one template per non-empty line."""
    text = Path(path).read_text()
    if text.lstrip().startswith("["):
        return [str(t) for t in json.loads(text)]
    return [line for line in text.splitlines() if line.strip()]


def build_handle(spec: Mapping[str, Any], role: Role | str, seed: int = 0) -> ModelHandle:
    """Construct a handle from a backend table such as ``{"kind": "scripted", ...}``.

    ``seed`` seeds the toy policy's sampler unless the table sets its own.
    """
    kind = BackendKind(spec.get("kind", ""))
    allowed = {BackendKind.REMOTE: _REMOTE_KEYS, BackendKind.SCRIPTED: _SCRIPTED_KEYS,
               BackendKind.TOY_POLICY: _TOY_KEYS}[kind]
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ValueError(f"unknown {kind.value} backend key(s): {', '.join(unknown)}")
    if kind is BackendKind.REMOTE:
        retry = RetryPolicy(int(spec.get("max_attempts", 3)), float(spec.get("backoff_s", 0.5)),
                            float(spec.get("timeout_s", 60.0)))
        client: Any = RemoteBackend(spec["endpoint"], spec.get("model", "default"), retry,
                                    spec.get("api_key_env", API_KEY_ENV))
    elif kind is BackendKind.SCRIPTED:
        if "script" in spec:
            script = parse_script(spec["script"])
        else:
            script = load_script(spec["script_path"])
        client = ScriptedBackend(script, int(spec.get("seed", 0)))
    else:
        templates = spec.get("templates") or load_templates(spec["templates_path"])
        policy = TeacherPolicy.uniform(templates, int(spec.get("categories", 1)),
                                    int(spec.get("seed", seed)))
        client = ToyPolicyBackend(policy)
    return ModelHandle(role, kind, client, spec.get("prompt_template"))
