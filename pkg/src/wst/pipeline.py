"""The WST loop: datasets, prompt composition, episodes, checkpoints and training."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, TypeVar

import numpy as np

from .backends import (
    DEFAULT_TEACHER_PROMPT,
    DEFAULT_TEACHER_TEMPERATURE,
    BackendKind,
    GenerationRequest,
    ModelHandle,
    Role,
    TeacherPolicy,
    ToyPolicyBackend,
    build_handle,
    generate,
)
from .core import (
    Episode,
    Instruction,
    Query,
    RunConfig,
    SamplingConfig,
    TaskKind,
    WSTError,
    derive_seed,
)
from .grpo import GroupBatch, NonFiniteGradient, grpo_step
from .reward import (
    BaselineCache,
    BaselineEntry,
    RewardFunctionSpec,
    episode_reward,
    estimate_baseline,
    mean,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_REASONING_TEMPLATE = "Please reason step by step, and put your final answer within \\boxed{}."

T = TypeVar("T")
R = TypeVar("R")


class ParseError(WSTError, ValueError):
    pass


class DuplicateId(WSTError, ValueError):
    pass


class MissingField(WSTError, ValueError):
    pass


class VersionMismatch(WSTError):
    pass


class CorruptCheckpoint(WSTError):
    pass


def tag_query(exc: BaseException, query_id: str) -> BaseException:
    """Attach ``query_id`` to an exception in place (type unchanged)."""
    if getattr(exc, "query_id", None) is None:
        exc.query_id = query_id  # type: ignore[attr-defined]
        head = exc.args[0] if exc.args else ""
        exc.args = (f"query {query_id!r}: {head}",) + tuple(exc.args[1:])
    return exc


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    task_kind: TaskKind
    queries: tuple[Query, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not self.queries:
            raise ValueError("dataset must contain at least one query")
        ids = [q.id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise DuplicateId("duplicate query ids in dataset")

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)


_REQUIRED = {
    TaskKind.REASONING: ("id", "question", "answer"),
    TaskKind.ALIGNMENT: ("id", "prompt"),
}


def load_dataset(path: str | Path, task_kind: TaskKind | str) -> Dataset:
    """Read a JSONL dataset.

    Reasoning lines carry ``{id, question, answer}``, alignment lines
    ``{id, prompt}``; either may add an integer ``category``.
    """
    task_kind = TaskKind(task_kind)
    from .reward import canonical_reference

    queries: list[Query] = []
    seen: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(row, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            for key in _REQUIRED[task_kind]:
                if key not in row:
                    raise MissingField(f"{path}:{lineno}: missing field {key!r}")
            qid = str(row["id"])
            if qid in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {qid!r} (first on line {seen[qid]})")
            seen[qid] = lineno
            category = int(row.get("category", 0))
            if task_kind is TaskKind.REASONING:
                q = Query(qid, task_kind, str(row["question"]), canonical_reference(str(row["answer"])), category)
            else:
                q = Query(qid, task_kind, str(row["prompt"]), None, category)
            queries.append(q)
    if not queries:
        raise ParseError(f"{path}: no queries")
    return Dataset(task_kind, tuple(queries))


# ---------------------------------------------------------------------------
# Prompts and episodes
# ---------------------------------------------------------------------------


def default_direct_template(task_kind: TaskKind) -> str:
    return DEFAULT_REASONING_TEMPLATE if task_kind is TaskKind.REASONING else ""


def compose_student_prompt(
    query: Query, instruction: Optional[Instruction], direct_template: str = ""
) -> list[dict[str, str]]:
    """Messages for the Student.

    With an instruction it becomes the system message and the query is the
    user turn. Without one, the direct template (``{query}`` placeholder, or
    the query appended after a blank line) forms a single user turn.
    """
    if instruction is not None:
        return [{"role": "system", "content": instruction.text}, {"role": "user", "content": query.text}]
    if not direct_template:
        return [{"role": "user", "content": query.text}]
    if "{query}" in direct_template:
        return [{"role": "user", "content": direct_template.replace("{query}", query.text)}]
    return [{"role": "user", "content": f"{direct_template}\n\n{query.text}"}]


def sample_instruction(
    teacher: ModelHandle, query: Query, seed: int, policy: TeacherPolicy | None = None
) -> Instruction:
    """One instruction from the Teacher.

    The toy policy samples through its own rng (``policy`` overrides the
    handle's); other backends are prompted with the teacher template.
    """
    if teacher.backend is BackendKind.TOY_POLICY:
        return (policy or teacher.policy).sample(query.category)
    template = teacher.prompt_template or DEFAULT_TEACHER_PROMPT
    messages = [{"role": "user", "content": template.replace("{query}", query.text)}]
    request = GenerationRequest(tuple(messages), n=1, temperature=DEFAULT_TEACHER_TEMPERATURE, seed=seed)
    return Instruction(generate(teacher, request)[0].text)


def run_student(
    query: Query,
    instruction: Optional[Instruction],
    student: ModelHandle,
    g: RewardFunctionSpec,
    sampling: SamplingConfig,
    seed: int,
    direct_template: str = "",
):
    messages = compose_student_prompt(query, instruction, direct_template)
    request = GenerationRequest.from_sampling(messages, sampling, sampling.K, seed)
    return tuple(g.grade(query, x) for x in generate(student, request))


def run_episode(
    query: Query,
    instruction: Instruction,
    student: ModelHandle,
    g: RewardFunctionSpec,
    sampling: SamplingConfig,
    baseline_cache: BaselineCache,
    seed: int,
) -> Episode:
    """Student rollouts for one (query, instruction) pair, scored against the cached baseline."""
    entry = baseline_cache.get(query.id)
    if entry is None:
        raise KeyError(f"no baseline for query {query.id!r}")
    try:
        gens = run_student(query, instruction, student, g, sampling, seed)
    except WSTError as exc:
        raise tag_query(exc, query.id)
    rewards = [float(x.scalar_reward) for x in gens]  # type: ignore[arg-type]
    mean_reward = mean(rewards)
    return Episode(query.id, instruction, gens, mean_reward, entry.s, episode_reward(rewards, entry.s))


def episode_seed(run_seed: int, query_id: str, round_index: int, member: int, group_size: int) -> int:
    return derive_seed(run_seed, f"episode/{query_id}", round_index * group_size + member)


def pmap(fn: Callable[[T], R], items: Sequence[T], max_concurrency: int) -> list[R]:
    """Ordered map, threaded when ``max_concurrency > 1``."""
    if max_concurrency <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(max_concurrency, len(items))) as pool:
        return list(pool.map(fn, items))


def precompute_baselines(
    dataset: Dataset,
    student: ModelHandle,
    g: RewardFunctionSpec,
    cache: BaselineCache,
    n: int,
    sampling: SamplingConfig,
    direct_template: str = "",
    max_concurrency: int = 1,
) -> BaselineCache:
    missing = [q for q in dataset if q.id not in cache]

    def one(q: Query) -> BaselineEntry:
        try:
            return estimate_baseline(q, student, g, n, sampling=sampling, direct_template=direct_template)
        except WSTError as exc:
            raise tag_query(exc, q.id)

    for entry in pmap(one, missing, max_concurrency):
        cache.put(entry)
    cache.reorder(q.id for q in dataset)
    cache.save()
    return cache


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_dict(policy: TeacherPolicy, step: int, fingerprint: str = "") -> dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "templates": list(policy.templates),
        "theta": {"shape": list(policy.theta.shape), "data": policy.theta.ravel().tolist()},
        "theta_ref": {"shape": list(policy.theta_ref.shape), "data": policy.theta_ref.ravel().tolist()},
        "rng_state": policy.rng_state,
        "config_fingerprint": fingerprint,
    }


def save_checkpoint(path: str | Path, policy: TeacherPolicy, step: int, fingerprint: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(checkpoint_dict(policy, step, fingerprint), sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> tuple[TeacherPolicy, int]:
    try:
        d = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(d, dict) or "version" not in d:
        raise CorruptCheckpoint(f"{path}: not a checkpoint")
    if d["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {d['version']} != {CHECKPOINT_VERSION}")
    if expected_fingerprint is not None and d.get("config_fingerprint") != expected_fingerprint:
        raise VersionMismatch(f"{path}: config fingerprint differs from the checkpoint's")
    try:
        theta = np.asarray(d["theta"]["data"], dtype=np.float64).reshape(d["theta"]["shape"])
        theta_ref = np.asarray(d["theta_ref"]["data"], dtype=np.float64).reshape(d["theta_ref"]["shape"])
        rng = np.random.default_rng()
        rng.bit_generator.state = d["rng_state"]
        policy = TeacherPolicy(tuple(d["templates"]), theta, theta_ref, rng)
        return policy, int(d["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc


def checkpoint_roundtrip(policy: TeacherPolicy, path: str | Path) -> TeacherPolicy:
    save_checkpoint(path, policy, 0)
    return load_checkpoint(path)[0]


def checkpoint_path(output_dir: str | Path, step: int) -> Path:
    return Path(output_dir) / "checkpoints" / f"ckpt_{step:06d}.json"


def latest_checkpoint(output_dir: str | Path) -> Optional[Path]:
    found = sorted((Path(output_dir) / "checkpoints").glob("ckpt_*.json"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    output_dir: Path
    policy: TeacherPolicy
    step: int
    baselines: BaselineCache
    log: list[dict[str, Any]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def train_log_path(self) -> Path:
        return self.output_dir / "train_log.jsonl"


@dataclass
class Harness:
    """Live objects built from a :class:`RunConfig`."""

    config: RunConfig
    dataset: Dataset
    teacher: ModelHandle
    student: ModelHandle
    reward_fn: RewardFunctionSpec
    direct_template: str

    @classmethod
    def from_config(cls, config: RunConfig) -> "Harness":
        dataset = load_dataset(config.dataset_path, config.task_kind)
        teacher = build_handle(config.teacher_backend, Role.TEACHER,
                               seed=derive_seed(config.sampling.seed, "teacher", 0))
        student = build_handle(config.student_backend, Role.STUDENT)
        g = RewardFunctionSpec.from_config(config.task_kind, config.weights, config.reward)
        template = config.direct_template
        if template is None:
            template = default_direct_template(config.task_kind)
        return cls(config, dataset, teacher, student, g, template)

    def baseline_cache(self) -> BaselineCache:
        return BaselineCache(Path(self.config.output_dir) / "baselines.jsonl", self.config.baseline_samples)

    def precompute_baselines(self) -> BaselineCache:
        cfg = self.config
        return precompute_baselines(self.dataset, self.student, self.reward_fn, self.baseline_cache(),
                                    cfg.baseline_samples, cfg.sampling, self.direct_template,
                                    cfg.max_concurrency)


def _plateaued(history: Sequence[float], window: int, tol: float) -> bool:
    if window <= 0 or len(history) < 2 * window:
        return False
    recent = mean(history[-window:])
    previous = mean(history[-2 * window:-window])
    return recent - previous < tol


def _batch_indices(run_seed: int, round_index: int, n_queries: int, batch_size: int) -> list[int]:
    rng = np.random.default_rng(derive_seed(run_seed, "batch", round_index))
    k = min(batch_size, n_queries)
    return sorted(int(i) for i in rng.choice(n_queries, size=k, replace=False))


def _write_jsonl(path: Path, records: Iterable[Mapping[str, Any]], mode: str = "a") -> None:
    with open(path, mode) as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(config: RunConfig, resume: bool = False, harness: Harness | None = None) -> RunArtifacts:
    """Train the toy Teacher against the Student.

    Writes the step-0 checkpoint, precomputes baselines, then runs rounds of
    (sample a query batch, G instructions per query, one episode each,
    ``grpo_step``). ``theta_ref`` is refreshed at every round start. On a
    backend failure the last completed round is checkpointed before the
    error propagates, so ``resume=True`` picks up from there.
    """
    h = harness or Harness.from_config(config)
    if h.teacher.backend is not BackendKind.TOY_POLICY:
        raise ValueError("training requires a toy_policy teacher backend")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = config.fingerprint()
    log_path = out / "train_log.jsonl"
    episodes_path = out / "episodes.jsonl"

    policy = h.teacher.policy
    step = 0
    log: list[dict[str, Any]] = []
    if resume and (ckpt := latest_checkpoint(out)) is not None:
        policy, step = load_checkpoint(ckpt, fingerprint)
        if log_path.exists():
            old = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()]
            log = [r for r in old if r["step"] <= step]
            _write_jsonl(log_path, log, "w")
        if episodes_path.exists():
            kept = [x for x in episodes_path.read_text().splitlines() if x.strip() and json.loads(x)["step"] <= step]
            episodes_path.write_text("".join(x + "\n" for x in kept))
        logger.info("resumed from %s at step %d", ckpt, step)
    else:
        save_checkpoint(checkpoint_path(out, 0), policy, 0, fingerprint)
        log_path.unlink(missing_ok=True)
        episodes_path.unlink(missing_ok=True)
    h.teacher.client.policy = policy
    last_saved = step

    cache = h.precompute_baselines()
    history = [r["mean_reward"] for r in log]
    G = config.grpo.group_size
    seed = config.sampling.seed
    queries = h.dataset.queries
    stopped_early = False

    while step < config.max_steps:
        round_index = step
        started = time.perf_counter()
        policy = policy.refreshed_reference()
        snapshot = policy.replace()
        try:
            batch_queries = [queries[i] for i in _batch_indices(seed, round_index, len(queries), config.batch_size)]
            jobs = []
            for q in batch_queries:
                for j in range(G):
                    jobs.append((q, policy.sample(q.category), episode_seed(seed, q.id, round_index, j, G)))

            def run(job: tuple[Query, Instruction, int]) -> Episode:
                q, ins, s = job
                return run_episode(q, ins, h.student, h.reward_fn, config.sampling, cache, s)

            episodes = pmap(run, jobs, config.max_concurrency)
        except WSTError:
            if last_saved != step:
                save_checkpoint(checkpoint_path(out, step), snapshot, step, fingerprint)
            raise

        batches = []
        for b, q in enumerate(batch_queries):
            group = episodes[b * G:(b + 1) * G]
            batches.append(GroupBatch(
                q.id, q.category,
                tuple(int(e.instruction.action_index) for e in group),  # type: ignore[union-attr]
                tuple(float(e.instruction.logprob_old) for e in group),  # type: ignore[union-attr]
                tuple(e.reward for e in group),
            ))
        try:
            policy, stats = grpo_step(policy, batches, config.grpo)
        except NonFiniteGradient:
            logger.error("non-finite gradient at step %d", step + 1)
            raise
        step += 1
        mean_r = mean([e.reward for e in episodes])
        history.append(mean_r)
        record = {"step": step, **stats.to_dict(), "mean_reward": mean_r,
                  "wall_ms": round((time.perf_counter() - started) * 1000, 3) if config.record_timing else None}
        log.append(record)
        _write_jsonl(log_path, [record])
        if config.record_episodes:
            _write_jsonl(episodes_path, [{"step": step, **e.to_dict()} for e in episodes])
        h.teacher.client.policy = policy
        if step % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path(out, step), policy, step, fingerprint)
            last_saved = step
        if _plateaued(history, config.plateau_window, config.plateau_tol):
            logger.info("moving-average reward plateaued at step %d", step)
            stopped_early = True
            break

    if last_saved != step:
        save_checkpoint(checkpoint_path(out, step), policy, step, fingerprint)
    return RunArtifacts(out, policy, step, cache, log, stopped_early)


def load_trained_teacher(config: RunConfig, checkpoint: str | Path | None = None) -> ModelHandle:
    path = Path(checkpoint) if checkpoint else latest_checkpoint(config.output_dir)
    if path is None:
        raise FileNotFoundError(f"no checkpoint under {config.output_dir}")
    policy, _ = load_checkpoint(path)
    return ModelHandle(Role.TEACHER, BackendKind.TOY_POLICY, ToyPolicyBackend(policy))
