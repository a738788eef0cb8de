"""Task-specific knowledge on top of a shared model.

Full-finetuned tasks: each task keeps a sparse delta holding the top-m
fraction (by magnitude) of its difference to a base. Post-pruning uses the
pretrained model as base; BYOM-FFT first merges all tasks (any merger) and
prunes ``theta_t - theta_merged`` instead.

LoRA tasks: each ``A_t @ B_t.T`` is replaced by its best rank-q
approximation ``U_q diag(S_q) V_q.T``, stored as q * (d_out + d_in + 1)
numbers instead of r * (d_out + d_in).

LoRA tasks are never compressed against a merged base: ``theta_t -
theta_merged`` mixes every task's update and can have rank r*T, so no
operation here attempts an SVD of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from byomkit.checkpoint_store import Checkpoint, LoraFile, SparseDelta, fingerprint
from byomkit.errors import (
    BadSpec,
    EmptyTaskSet,
    FingerprintMismatch,
    IndexOutOfRange,
    RankOutOfRange,
    ShapeMismatch,
    TargetMissing,
)
from byomkit.merging import MergeSpec, merge
from byomkit.tensor_core import (
    TensorMap,
    check_compatible,
    concat_flat,
    keep_count,
    map_parallel,
    split_indices,
    svd_thin,
    to_f32,
    top_k_by_magnitude,
    truncated_svd_of_product,
)

SCOPES = ("global", "per_tensor")


@dataclass
class PrunedTaskSet:
    base: Checkpoint
    deltas: List[SparseDelta]
    keep_ratio: float
    merge_provenance: str = "none"

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass
class CompressedLoraSet:
    base: Optional[Checkpoint]
    adapters: List[LoraFile]
    rank: int
    source_rank: int

    def __len__(self) -> int:
        return len(self.adapters)


@dataclass
class ParamAccount:
    method: str
    total: int
    on_disk: int
    per_task: List[int] = field(default_factory=list)

    @property
    def total_millions(self) -> float:
        return self.total / 1e6

    @property
    def on_disk_millions(self) -> float:
        return self.on_disk / 1e6


# --- sparse deltas --------------------------------------------------------


def prune_vector(
    vector: TensorMap, keep_ratio: float, scope: str = "global"
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Keep the top ``keep_ratio`` magnitudes of a task vector.

    ``scope="global"`` ranks all coordinates of the concatenated vector
    together; ``"per_tensor"`` ranks each tensor on its own.
    """
    if scope not in SCOPES:
        raise BadSpec(f"scope must be one of {SCOPES}, got {scope!r}")
    indices, values = {}, {}
    if scope == "global":
        flat, layout = concat_flat(vector)
        local = split_indices(top_k_by_magnitude(flat, keep_ratio).indices, layout)
    else:
        local = {k: top_k_by_magnitude(v, keep_ratio).indices.astype(np.uint64) for k, v in vector.items()}
    for name, idx in local.items():
        indices[name] = idx
        values[name] = vector[name].ravel()[idx.astype(np.intp)].astype(np.float32)
    return indices, values


def _difference(target: Checkpoint, base: Checkpoint) -> TensorMap:
    return {
        k: to_f32(target.tensors[k].astype(np.float64) - b.astype(np.float64), k)
        for k, b in base.tensors.items()
    }


def _make_delta(target, base, base_fp, keep_ratio, scope, base_kind, provenance) -> SparseDelta:
    indices, values = prune_vector(_difference(target, base), keep_ratio, scope)
    return SparseDelta(
        indices=indices,
        values=values,
        shapes=base.shapes(),
        keep_ratio=keep_ratio,
        base_fingerprint=base_fp,
        base_kind=base_kind,
        merge_provenance=provenance,
    )


def _check_tasks(base: Checkpoint, tasks: Sequence[Checkpoint]) -> None:
    if not tasks:
        raise EmptyTaskSet("at least one task checkpoint is required")
    for t in tasks:
        check_compatible(base.tensors, t.tensors)


def post_prune(
    base: Checkpoint, tasks: Sequence[Checkpoint], keep_ratio: float, scope: str = "global"
) -> PrunedTaskSet:
    """Sparse ``theta_t - theta_0`` per task, applied back onto ``theta_0``."""
    _check_tasks(base, tasks)
    keep_count(keep_ratio, 1)
    fp = fingerprint(base)
    deltas = map_parallel(
        lambda t: _make_delta(t, base, fp, keep_ratio, scope, "pretrained", "none"), tasks
    )
    return PrunedTaskSet(base, deltas, keep_ratio)


def byom_fft(
    base: Checkpoint,
    tasks: Sequence[Checkpoint],
    keep_ratio: float,
    merge_with: Union[MergeSpec, Checkpoint, None] = None,
    scope: str = "global",
) -> PrunedTaskSet:
    """Merge first, then keep the top ``keep_ratio`` of ``theta_t - theta_merged``.

    ``merge_with`` is a :class:`MergeSpec` (task arithmetic with lambda=0.3
    by default) or an already merged checkpoint from any other source.
    """
    _check_tasks(base, tasks)
    keep_count(keep_ratio, 1)
    if merge_with is None:
        merge_with = MergeSpec()
    if isinstance(merge_with, MergeSpec):
        merged = merge(base, tasks, merge_with)
        provenance = merge_with.provenance()
    else:
        merged = merge_with
        check_compatible(base.tensors, merged.tensors)
        provenance = merged.metadata.get("merge_method", "external")
    fp = fingerprint(merged)
    deltas = map_parallel(
        lambda t: _make_delta(t, merged, fp, keep_ratio, scope, "merged", provenance), tasks
    )
    return PrunedTaskSet(merged, deltas, keep_ratio, provenance)


def apply_sparse_delta(base: Checkpoint, delta: SparseDelta) -> Checkpoint:
    """Scatter-add ``delta`` into a copy of ``base``; other coordinates stay bit-equal."""
    got = fingerprint(base)
    if got != delta.base_fingerprint:
        raise FingerprintMismatch(
            f"delta was built against base {delta.base_fingerprint}, got base {got}"
        )
    out = {}
    for name, t in base.tensors.items():
        dense = t.copy()
        if name in delta.indices:
            if tuple(t.shape) != delta.shapes[name]:
                raise ShapeMismatch(f"{name!r}: base {t.shape} vs delta {delta.shapes[name]}")
            idx = delta.indices[name]
            if idx.size and int(idx.max()) >= t.size:
                raise IndexOutOfRange(f"{name!r}: index {int(idx.max())} >= {t.size}")
            flat = dense.reshape(-1)
            pos = idx.astype(np.intp)
            flat[pos] = flat[pos] + delta.values[name]
        out[name] = dense
    return Checkpoint(out)


def materialize_task_model(pruned: PrunedTaskSet, t: int) -> Checkpoint:
    return apply_sparse_delta(pruned.base, pruned.deltas[t])


def ablation_prune_theta(
    tasks: Sequence[Checkpoint], keep_ratio: float, scope: str = "global"
) -> PrunedTaskSet:
    """Keep the top ``keep_ratio`` of ``theta_t`` itself; the rest reads as zero."""
    if not tasks:
        raise EmptyTaskSet("at least one task checkpoint is required")
    keep_count(keep_ratio, 1)
    zero = tasks[0].zeros_like()
    _check_tasks(zero, tasks)
    fp = fingerprint(zero)
    deltas = [_make_delta(t, zero, fp, keep_ratio, scope, "zero", "none") for t in tasks]
    return PrunedTaskSet(zero, deltas, keep_ratio)


# --- LoRA -----------------------------------------------------------------


def _check_adapter(base: Optional[Checkpoint], adapter: LoraFile) -> None:
    if adapter.variant != "factor":
        raise BadSpec("expected LoRA factors (A, B), got a truncated adapter")
    if base is None:
        return
    for name, (a, b) in adapter.factors.items():
        if name not in base.tensors:
            raise TargetMissing(f"adapter targets {name!r}, which the base does not have")
        want = base.tensors[name].shape
        if want != (a.shape[0], b.shape[0]):
            raise ShapeMismatch(f"{name!r}: base {want} vs adapter ({a.shape[0]}, {b.shape[0]})")


def _truncate_adapter(adapter: LoraFile, q: int, base_fp: str) -> LoraFile:
    factors = {}
    for name, (a, b) in adapter.factors.items():
        res = truncated_svd_of_product(a, b, q)
        factors[name] = (res.u, res.s, res.v)
    return LoraFile(factors, variant="truncated", base_fingerprint=base_fp, rank=q)


def byom_lora(base: Checkpoint, adapters: Sequence[LoraFile], q: int) -> CompressedLoraSet:
    """Replace every ``A_t @ B_t.T`` by its rank-``q`` truncated SVD."""
    if not adapters:
        raise EmptyTaskSet("at least one adapter is required")
    for ad in adapters:
        _check_adapter(base, ad)
        if not (1 <= q <= ad.rank):
            raise RankOutOfRange(f"rank {q} outside [1, {ad.rank}]")
    fp = fingerprint(base)
    truncated = map_parallel(lambda ad: _truncate_adapter(ad, q, fp), adapters)
    return CompressedLoraSet(base, truncated, q, max(ad.rank for ad in adapters))


def _rank_q_approx(x: np.ndarray, q: int) -> np.ndarray:
    res = svd_thin(x)
    return res.truncate(min(q, res.s.size)).reconstruct()


def ablation_separate_factor_approx(
    adapters: Sequence[LoraFile], q: int, base: Optional[Checkpoint] = None
) -> CompressedLoraSet:
    """Approximate ``A_t`` and ``B_t`` separately at rank ``q``; update is their product.

    The result keeps the factor layout (``d x r`` matrices of rank ``q``).
    """
    if not adapters:
        raise EmptyTaskSet("at least one adapter is required")
    fp = fingerprint(base) if base is not None else "0" * 64
    out = []
    for ad in adapters:
        _check_adapter(base, ad)
        if not (1 <= q <= ad.rank):
            raise RankOutOfRange(f"rank {q} outside [1, {ad.rank}]")
        factors = {
            name: (_rank_q_approx(a.astype(np.float64), q), _rank_q_approx(b.astype(np.float64), q))
            for name, (a, b) in ad.factors.items()
        }
        out.append(LoraFile(factors, variant="factor", base_fingerprint=fp, rank=ad.rank))
    return CompressedLoraSet(base, out, q, max(ad.rank for ad in adapters))


def apply_lora(base: Checkpoint, adapter: LoraFile, check_fingerprint: bool = True) -> Checkpoint:
    """``base`` plus the adapter's dense update on every target tensor."""
    if check_fingerprint:
        got = fingerprint(base)
        if got != adapter.base_fingerprint:
            raise FingerprintMismatch(
                f"adapter was built against base {adapter.base_fingerprint}, got base {got}"
            )
    out = {}
    for name, t in base.tensors.items():
        if name in adapter.factors:
            upd = adapter.update(name)
            if upd.shape != t.shape:
                raise ShapeMismatch(f"{name!r}: base {t.shape} vs update {upd.shape}")
            out[name] = to_f32(t.astype(np.float64) + upd, name)
        else:
            out[name] = t.copy()
    missing = set(adapter.factors) - set(base.tensors)
    if missing:
        raise TargetMissing(f"adapter targets missing from base: {sorted(missing)}")
    return Checkpoint(out)


def materialize_lora_task_model(compressed: CompressedLoraSet, t: int) -> Checkpoint:
    if compressed.base is None:
        raise BadSpec("this LoRA set carries no base checkpoint")
    ad = compressed.adapters[t]
    return apply_lora(compressed.base, ad, check_fingerprint=ad.base_fingerprint != "0" * 64)


def lora_reconstruction_error(original: LoraFile, approx: LoraFile) -> float:
    """Frobenius norm of the update error, summed in quadrature over targets."""
    total = 0.0
    for name in original.factors:
        diff = original.update(name) - approx.update(name)
        total += float(np.sum(diff * diff))
    return math.sqrt(total)


# --- parameter accounting -------------------------------------------------

INDEX_COST = 2  # one u64 index == two 32-bit parameter slots


def param_account(artifact) -> ParamAccount:
    """Parameter counts over stored values (indices free), plus on-disk size.

    ``total`` counts stored values only; ``on_disk`` adds sparse index
    storage.
    """
    if isinstance(artifact, PrunedTaskSet):
        per_task = [d.kept() for d in artifact.deltas]
        base = artifact.base.num_params()
        total = base + sum(per_task)
        label = "byom_fft" if artifact.deltas and artifact.deltas[0].base_kind == "merged" else "post_pruning"
        return ParamAccount(label, total, total + INDEX_COST * sum(per_task), per_task)
    if isinstance(artifact, CompressedLoraSet):
        per_task = [sum(ad.stored_params(n) for n in ad.factors) for ad in artifact.adapters]
        base = artifact.base.num_params() if artifact.base is not None else 0
        total = base + sum(per_task)
        return ParamAccount("byom_lora", total, total, per_task)
    items = list(artifact)
    if items and isinstance(items[0], LoraFile):
        per_task = [sum(ad.stored_params(n) for n in ad.factors) for ad in items]
        return ParamAccount("lora_adapters", sum(per_task), sum(per_task), per_task)
    per_task = [c.num_params() for c in items]
    return ParamAccount("single_task", sum(per_task), sum(per_task), per_task)


def account_from_sizes(
    base_params: int, task_params: int, n_tasks: int, keep_ratio: float, method: str = "byom_fft"
) -> ParamAccount:
    """Accounting for pruned task sets from declared sizes alone."""
    kept = keep_count(keep_ratio, task_params)
    total = base_params + n_tasks * kept
    return ParamAccount(method, total, total + INDEX_COST * n_tasks * kept, [kept] * n_tasks)


def lora_layer_params(d_out: int, d_in: int, rank: int, truncated: bool) -> int:
    return rank * (d_out + d_in + (1 if truncated else 0))


def lora_account_from_sizes(
    base_params: int, layers: Sequence[Tuple[int, int]], n_tasks: int, rank: int, truncated: bool = True
) -> ParamAccount:
    per = sum(lora_layer_params(o, i, rank, truncated) for o, i in layers)
    total = base_params + n_tasks * per
    return ParamAccount("byom_lora" if truncated else "lora_adapters", total, total, [per] * n_tasks)


def lora_saving_ratio(d_out: int, d_in: int, source_rank: int, q: int) -> float:
    """Stored-parameter ratio of rank-r factors to a rank-q truncated SVD."""
    return lora_layer_params(d_out, d_in, source_rank, False) / lora_layer_params(d_out, d_in, q, True)
