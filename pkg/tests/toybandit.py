"""Builders for the 8-template toy bandit used across the training tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import tomli_w

from wst.core import RunConfig, config_from_dict

GOOD = 3
P_GOOD = 0.9
P_OTHER = 0.2
TEMPLATES = [f"Strategy {i}: " + s for i, s in enumerate([
    "restate the problem in your own words.",
    "list every quantity mentioned.",
    "guess first, then check.",
    "work backwards from what is asked and verify each step.",
    "draw a picture.",
    "answer quickly without working.",
    "look for a similar problem.",
    "write an equation for every sentence.",
])]


def script() -> dict[str, Any]:
    return {
        TEMPLATES[GOOD]: [
            {"probability": P_GOOD, "response": "Checked each step. \\boxed{7}"},
            {"probability": round(1 - P_GOOD, 10), "response": "I think it is \\boxed{5}"},
        ],
        "": [
            {"probability": P_OTHER, "response": "So the answer is \\boxed{7}"},
            {"probability": round(1 - P_OTHER, 10), "response": "So the answer is \\boxed{6}"},
        ],
    }


def write_files(root: Path, n_queries: int = 8) -> tuple[Path, Path]:
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data.jsonl"
    data.write_text("".join(
        json.dumps({"id": f"q{i}", "question": f"Problem {i}: how many apples?", "answer": "7"}) + "\n"
        for i in range(n_queries)))
    script_path = root / "script.json"
    script_path.write_text(json.dumps(script(), indent=1))
    return data, script_path


def raw_config(root: Path, student: dict[str, Any] | None = None, out: Path | None = None,
               **overrides: Any) -> dict[str, Any]:
    """Toy-bandit config table; inputs live under ``root``, artifacts under ``out`` (default ``root/out``)."""
    data, script_path = write_files(root)
    raw: dict[str, Any] = {
        "task_kind": "reasoning",
        "dataset_path": str(data),
        "output_dir": str(out or root / "out"),
        "teacher_backend": {"kind": "toy_policy", "templates": TEMPLATES},
        "student_backend": student or {"kind": "scripted", "script_path": str(script_path), "seed": 11},
        "sampling": {"K": 10, "seed": 1234},
        "grpo": {"group_size": 8},
        "baseline_samples": 10,
        "batch_size": 2,
        "max_steps": 500,
        "checkpoint_interval": 100,
        "max_concurrency": 1,
    }
    for key, value in overrides.items():
        if key in ("sampling", "grpo") and isinstance(value, dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


def make_config(root: Path, student: dict[str, Any] | None = None, out: Path | None = None,
                **overrides: Any) -> RunConfig:
    return config_from_dict(raw_config(root, student, out, **overrides))


def write_toml(path: Path, raw: dict[str, Any]) -> Path:
    path.write_text(tomli_w.dumps(raw))
    return path
