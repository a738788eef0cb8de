"""Baseline mergers that fold task checkpoints into one shared model.

All mergers accumulate in float64 and sum over tasks in a sorted order per
coordinate, so permuting the task list gives bit-identical output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from byomkit.checkpoint_store import Checkpoint
from byomkit.errors import (
    BadSpec,
    EmptyTaskSet,
    NegativeWeight,
    NonConvexWeights,
    RatioOutOfRange,
    WeightMismatch,
)
from byomkit.tensor_core import TensorMap, check_compatible, concat_flat, to_f32, top_k_by_magnitude

METHODS = ("weighted_average", "task_arithmetic", "ties", "per_param_weighted")
DEFAULT_LAMBDA = 0.3
DEFAULT_TRIM_RATIO = 0.2


@dataclass
class MergeSpec:
    method: str = "task_arithmetic"
    lam: float = DEFAULT_LAMBDA
    weights: Optional[List[float]] = None
    weight_maps: Optional[List[Checkpoint]] = None
    trim_ratio: float = DEFAULT_TRIM_RATIO

    def validate(self, n_tasks: Optional[int] = None) -> None:
        if self.method not in METHODS:
            raise BadSpec(f"unknown merge method {self.method!r}; choose from {METHODS}")
        if not math.isfinite(self.lam):
            raise BadSpec("lambda must be finite")
        if not (0.0 < self.trim_ratio <= 1.0):
            raise RatioOutOfRange(f"trim ratio must lie in (0, 1], got {self.trim_ratio}")
        if self.method == "weighted_average":
            if self.weights is None:
                raise WeightMismatch("weighted_average needs per-task weights")
            _check_convex(self.weights, n_tasks)
        if self.method == "per_param_weighted" and self.weight_maps is None:
            raise WeightMismatch("per_param_weighted needs per-parameter weight checkpoints")

    def provenance(self) -> str:
        doc = {"method": self.method}
        if self.method in ("task_arithmetic", "ties"):
            doc["lambda"] = self.lam
        if self.method == "ties":
            doc["trim_ratio"] = self.trim_ratio
        if self.method == "weighted_average":
            doc["weights"] = list(map(float, self.weights))
        return json.dumps(doc, separators=(",", ":"))


def _check_convex(weights: Sequence[float], n_tasks: Optional[int]) -> None:
    if n_tasks is not None and len(weights) != n_tasks:
        raise WeightMismatch(f"{len(weights)} weights for {n_tasks} tasks")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
        raise NonConvexWeights(f"weights must be non-negative and sum to 1, got {list(weights)}")


def _prepare(base: Optional[Checkpoint], tasks: Sequence[Checkpoint]) -> Checkpoint:
    if not tasks:
        raise EmptyTaskSet("at least one task checkpoint is required")
    ref = base if base is not None else tasks[0]
    for t in tasks:
        check_compatible(ref.tensors, t.tensors)
    return ref


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    return np.sort(stack, axis=0).sum(axis=0)


def task_vector(base: Checkpoint, task: Checkpoint) -> TensorMap:
    """Elementwise ``task - base`` for every tensor."""
    check_compatible(base.tensors, task.tensors)
    return {
        k: to_f32(task.tensors[k].astype(np.float64) - b.astype(np.float64), k)
        for k, b in base.tensors.items()
    }


def merge_task_arithmetic(base: Checkpoint, tasks: Sequence[Checkpoint], lam: float = DEFAULT_LAMBDA) -> Checkpoint:
    _prepare(base, tasks)
    out = {}
    for k, b in base.tensors.items():
        b64 = b.astype(np.float64)
        diffs = np.stack([t.tensors[k].astype(np.float64) - b64 for t in tasks])
        out[k] = to_f32(b64 + lam * _sorted_sum(diffs), k)
    return Checkpoint(out, {"merge_method": "task_arithmetic", "lambda": repr(float(lam))})


def merge_weighted_average(tasks: Sequence[Checkpoint], weights: Sequence[float]) -> Checkpoint:
    ref = _prepare(None, tasks)
    if len(weights) != len(tasks):
        raise WeightMismatch(f"{len(weights)} weights for {len(tasks)} tasks")
    _check_convex(weights, len(tasks))
    w = np.asarray(weights, dtype=np.float64)
    out = {}
    for k in ref.tensors:
        terms = np.stack([wi * t.tensors[k].astype(np.float64) for wi, t in zip(w, tasks)])
        out[k] = to_f32(_sorted_sum(terms), k)
    meta = {"merge_method": "weighted_average", "weights": json.dumps(list(map(float, w)))}
    return Checkpoint(out, meta)


def merge_ties(
    base: Checkpoint,
    tasks: Sequence[Checkpoint],
    lam: float = DEFAULT_LAMBDA,
    trim_ratio: float = DEFAULT_TRIM_RATIO,
) -> Checkpoint:
    """Trim, elect sign, disjoint mean.

    Trimming keeps the top ``trim_ratio`` magnitudes of each whole task
    vector. A coordinate whose trimmed values sum to exactly zero merges
    to zero.
    """
    _prepare(base, tasks)
    if not (0.0 < trim_ratio <= 1.0):
        raise RatioOutOfRange(f"trim ratio must lie in (0, 1], got {trim_ratio}")
    base_flat, layout = concat_flat({k: v.astype(np.float64) for k, v in base.tensors.items()})
    trimmed = np.zeros((len(tasks), base_flat.size))
    for i, t in enumerate(tasks):
        v, _ = concat_flat(task_vector(base, t))
        keep = top_k_by_magnitude(v, trim_ratio).indices
        trimmed[i, keep] = v[keep]
    elected = np.sign(_sorted_sum(trimmed))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    count = agree.sum(axis=0)
    total = _sorted_sum(np.where(agree, trimmed, 0.0))
    merged = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    flat = base_flat + lam * merged
    out = {}
    for name, begin, end in layout:
        out[name] = to_f32(flat[begin:end].reshape(base.tensors[name].shape), name)
    meta = {"merge_method": "ties", "lambda": repr(float(lam)), "trim_ratio": repr(float(trim_ratio))}
    return Checkpoint(out, meta)


def merge_per_param_weighted(
    base: Checkpoint, tasks: Sequence[Checkpoint], weight_maps: Sequence[Checkpoint]
) -> Checkpoint:
    """Per-coordinate weighted mean; zero total weight falls back to ``base``.

    Fisher-style merging is this with diagonal Fisher estimates as weights.
    """
    _prepare(base, tasks)
    if len(weight_maps) != len(tasks):
        raise WeightMismatch(f"{len(weight_maps)} weight maps for {len(tasks)} tasks")
    for wm in weight_maps:
        check_compatible(base.tensors, wm.tensors)
        for k, w in wm.tensors.items():
            if np.any(w < 0):
                raise NegativeWeight(f"negative weight in {k!r}")
    out = {}
    for k, b in base.tensors.items():
        w = np.stack([wm.tensors[k].astype(np.float64) for wm in weight_maps])
        num = _sorted_sum(w * np.stack([t.tensors[k].astype(np.float64) for t in tasks]))
        den = _sorted_sum(w)
        safe = np.where(den > 0, den, 1.0)
        out[k] = to_f32(np.where(den > 0, num / safe, b.astype(np.float64)), k)
    return Checkpoint(out, {"merge_method": "per_param_weighted"})


def merge(base: Checkpoint, tasks: Sequence[Checkpoint], spec: MergeSpec) -> Checkpoint:
    spec.validate(len(tasks))
    if spec.method == "task_arithmetic":
        return merge_task_arithmetic(base, tasks, spec.lam)
    if spec.method == "weighted_average":
        return merge_weighted_average(tasks, spec.weights)
    if spec.method == "ties":
        return merge_ties(base, tasks, spec.lam, spec.trim_ratio)
    return merge_per_param_weighted(base, tasks, spec.weight_maps)
