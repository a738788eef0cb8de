"""Small-scale task-interference experiments.

A two-layer tanh MLP stands in for a large pretrained network. Each
synthetic task owns a block of rows in the output layer (its classification
head); finetuning and evaluation look only at that block, so merging
interacts through the shared hidden layer.

Every random draw comes from numpy's PCG64 bit generator seeded with small
integer tuples, so a run is a pure function of its config.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from byomkit import byom
from byomkit.checkpoint_store import Checkpoint, LoraFile, fingerprint
from byomkit.errors import BadSpec, DivergenceDetected, IoFailure, ShapeMismatch
from byomkit.merging import MergeSpec, merge

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2")
LORA_TARGETS = ("W1", "W2")
SHARED = ("W1", "b1")
HEAD = ("W2", "b2")
CSV_HEADER = ["method", "sweep_name", "sweep_value", "seed", "task", "accuracy", "normalized_accuracy"]


def rng_for(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(list(key)))


# --- synthetic tasks ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Gaussian clusters; each class is a mixture of ``modes_per_class`` blobs.

    Class means come from ``family_seed``; tasks that share a family and take
    disjoint ``class_start`` ranges are splits of one dataset. Samples come
    from ``seed`` (train and test use separate streams).
    """

    seed: int
    input_dim: int = 16
    class_count: int = 4
    n_train: int = 200
    n_test: int = 400
    label_offset: int = 0
    mean_scale: float = 2.0
    noise_scale: float = 0.5
    modes_per_class: int = 2
    family_seed: Optional[int] = None
    class_start: int = 0
    latent_dim: int = 0
    support_dim: int = 0
    support_pool: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise BadSpec("a task needs at least two classes")
        if self.n_train < 1 or self.n_test < 1 or self.input_dim < 1 or self.modes_per_class < 1:
            raise BadSpec("sample counts, input_dim and modes_per_class must be positive")
        if not (0 <= self.latent_dim <= self.input_dim):
            raise BadSpec("latent_dim must lie in [0, input_dim]")
        if not (0 <= self.support_dim <= self.input_dim) or 0 < self.support_dim < self.latent_dim:
            raise BadSpec("support_dim must be 0 or lie in [latent_dim, input_dim]")
        if self.support_pool and not (0 < self.support_dim <= self.support_pool <= self.input_dim):
            raise BadSpec("support_pool needs support_dim > 0 and must lie in [support_dim, input_dim]")
        if self.class_start < 0 or self.label_offset < 0:
            raise BadSpec("class_start and label_offset must be non-negative")
        if self.noise_scale < 0 or self.mean_scale < 0:
            raise BadSpec("scales must be non-negative")


@dataclass
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    label_offset: int
    class_count: int

    @property
    def classes(self) -> Tuple[int, int]:
        return self.label_offset, self.label_offset + self.class_count


def class_means(spec: SyntheticTask) -> np.ndarray:
    """(class_count, modes_per_class, input_dim) cluster centres.

    With ``latent_dim > 0`` the centres lie in a random ``latent_dim``-plane
    shared by the whole family. ``support_dim > 0`` confines that plane to a
    random subset of input coordinates, drawn from the first
    ``support_pool`` coordinates when that is set.
    """
    family = spec.seed if spec.family_seed is None else spec.family_seed
    rng = rng_for(family, 0)
    n_family = spec.class_start + spec.class_count
    k = spec.latent_dim or spec.input_dim
    support = spec.support_dim or spec.input_dim
    pool = spec.support_pool or spec.input_dim
    coords = np.sort(rng.permutation(pool)[:support]) if spec.support_dim else np.arange(support)
    basis = np.zeros((k, spec.input_dim))
    basis[:, coords] = np.linalg.qr(rng.standard_normal((support, k)))[0].T
    latent = rng.standard_normal((n_family, spec.modes_per_class, k)) * spec.mean_scale / math.sqrt(k)
    return (latent @ basis)[spec.class_start :]


def _draw(spec: SyntheticTask, means: np.ndarray, n: int, stream: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = rng_for(spec.seed, stream)
    local = rng.permutation(np.arange(n) % spec.class_count)
    modes = rng.integers(0, spec.modes_per_class, size=n)
    x = means[local, modes] + spec.noise_scale / math.sqrt(spec.input_dim) * rng.standard_normal((n, spec.input_dim))
    return x.astype(np.float32), (local + spec.label_offset).astype(np.int64)


def generate_task(spec: SyntheticTask) -> TaskData:
    spec.validate()
    means = class_means(spec)
    x_tr, y_tr = _draw(spec, means, spec.n_train, 1)
    x_te, y_te = _draw(spec, means, spec.n_test, 2)
    return TaskData(x_tr, y_tr, x_te, y_te, spec.label_offset, spec.class_count)


# --- the MLP --------------------------------------------------------------

Params = Union[Checkpoint, Mapping[str, np.ndarray]]


def _p(model: Params) -> Mapping[str, np.ndarray]:
    return model.tensors if isinstance(model, Checkpoint) else model


def init_mlp(input_dim: int, hidden: int, n_classes: int, seed: int, scale: float = 1.0) -> Checkpoint:
    rng = rng_for(seed, 7)
    return Checkpoint(
        {
            "W1": scale * rng.standard_normal((hidden, input_dim)) / math.sqrt(input_dim),
            "b1": np.zeros(hidden),
            "W2": scale * rng.standard_normal((n_classes, hidden)) / math.sqrt(hidden),
            "b2": np.zeros(n_classes),
        },
        {"model": "mlp"},
    )


def _check_shapes(p: Mapping[str, np.ndarray], x: np.ndarray) -> None:
    h, d = p["W1"].shape
    k = p["W2"].shape[0]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatch(f"inputs {x.shape} do not fit W1 {p['W1'].shape}")
    if p["b1"].shape != (h,) or p["W2"].shape != (k, h) or p["b2"].shape != (k,):
        raise ShapeMismatch("MLP tensor shapes are inconsistent")


def forward(model: Params, x: np.ndarray, classes: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Class scores (logits), restricted to the ``classes`` row block if given."""
    p = _p(model)
    x = np.asarray(x, dtype=np.float64)
    _check_shapes(p, x)
    lo, hi = classes if classes is not None else (0, p["W2"].shape[0])
    h = np.tanh(x @ p["W1"].astype(np.float64).T + p["b1"])
    return h @ p["W2"][lo:hi].astype(np.float64).T + p["b2"][lo:hi]


def predict(model: Params, x: np.ndarray, classes: Tuple[int, int]) -> np.ndarray:
    return classes[0] + np.argmax(forward(model, x, classes), axis=1)


def accuracy(model: Params, data: TaskData) -> float:
    return float(np.mean(predict(model, data.x_test, data.classes) == data.y_test))


def loss_and_grad(
    model: Params,
    x: np.ndarray,
    y: np.ndarray,
    classes: Optional[Tuple[int, int]] = None,
    reduction: str = "mean",
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Softmax cross-entropy and its analytic gradient for all four tensors.

    With ``classes=(lo, hi)`` the softmax runs over that row block only and
    labels are global class ids inside it.
    """
    p = _p(model)
    x = np.asarray(x, dtype=np.float64)
    _check_shapes(p, x)
    k = p["W2"].shape[0]
    lo, hi = classes if classes is not None else (0, k)
    w1, b1 = p["W1"].astype(np.float64), p["b1"].astype(np.float64)
    w2, b2 = p["W2"][lo:hi].astype(np.float64), p["b2"][lo:hi].astype(np.float64)
    local = np.asarray(y) - lo
    if np.any(local < 0) or np.any(local >= hi - lo):
        raise ShapeMismatch("labels fall outside the scored class range")

    h = np.tanh(x @ w1.T + b1)
    z = h @ w2.T + b2
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = -scale * float(logp[np.arange(n), local].sum())

    dz = np.exp(logp)
    dz[np.arange(n), local] -= 1.0
    dz *= scale
    dh = (dz @ w2) * (1.0 - h * h)
    grads = {
        "W1": dh.T @ x,
        "b1": dh.sum(axis=0),
        "W2": np.zeros((k, w2.shape[1])),
        "b2": np.zeros(k),
    }
    grads["W2"][lo:hi] = dz.T @ h
    grads["b2"][lo:hi] = dz.sum(axis=0)
    return loss, grads


def grad(model: Params, x: np.ndarray, y: np.ndarray, classes=None, reduction: str = "mean") -> Dict[str, np.ndarray]:
    return loss_and_grad(model, x, y, classes, reduction)[1]


_F32_MAX = float(np.finfo(np.float32).max)


def _check_finite(loss: float, params: Mapping[str, np.ndarray]) -> None:
    # weights that no longer fit a float32 checkpoint count as diverged too
    if not math.isfinite(loss) or any(not np.all(np.abs(v) <= _F32_MAX) for v in params.values()):
        raise DivergenceDetected("training diverged (non-finite loss or weights)")


@dataclass
class TrainResult:
    model: Checkpoint
    loss: float
    lora: Optional[LoraFile] = None


def train(
    model_init: Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    learning_rate: float,
    mode: str = "full",
    rank: int = 4,
    classes: Optional[Tuple[int, int]] = None,
    seed: int = 0,
) -> TrainResult:
    """Full-batch gradient descent.

    ``mode="lora"`` freezes the initial weights and learns ``W = W0 + A @ B.T``
    for W1 and W2 (A starts at zero, B is Gaussian); biases stay frozen.
    """
    if steps < 0:
        raise BadSpec("steps must be non-negative")
    if mode not in ("full", "lora"):
        raise BadSpec(f"mode must be 'full' or 'lora', got {mode!r}")
    base = {k: model_init.tensors[k].astype(np.float64) for k in PARAM_NAMES}
    if mode == "full":
        p = {k: v.copy() for k, v in base.items()}
        loss = float("nan")
        for _ in range(steps):
            loss, g = loss_and_grad(p, x, y, classes)
            _check_finite(loss, p)
            for k in p:
                p[k] -= learning_rate * g[k]
        loss = loss_and_grad(p, x, y, classes)[0]
        _check_finite(loss, p)
        return TrainResult(Checkpoint(p, dict(model_init.metadata)), loss)

    rng = rng_for(seed, 11)
    a = {t: np.zeros((base[t].shape[0], rank)) for t in LORA_TARGETS}
    b = {t: rng.standard_normal((base[t].shape[1], rank)) / math.sqrt(base[t].shape[1]) for t in LORA_TARGETS}

    def current():
        p = dict(base)
        for t in LORA_TARGETS:
            p[t] = base[t] + a[t] @ b[t].T
        return p

    for _ in range(steps):
        p = current()
        loss, g = loss_and_grad(p, x, y, classes)
        _check_finite(loss, p)
        for t in LORA_TARGETS:
            ga, gb = g[t] @ b[t], g[t].T @ a[t]
            a[t] -= learning_rate * ga
            b[t] -= learning_rate * gb
    p = current()
    loss = loss_and_grad(p, x, y, classes)[0]
    _check_finite(loss, p)
    init_ckpt = Checkpoint({k: model_init.tensors[k] for k in PARAM_NAMES})
    lora = LoraFile({t: (a[t], b[t]) for t in LORA_TARGETS}, "factor", fingerprint(init_ckpt), rank)
    return TrainResult(byom.apply_lora(init_ckpt, lora), loss, lora)


# --- reports --------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    sweep_name: str
    sweep_value: float
    seed: int
    tasks: List[int]
    accuracy: List[float]
    normalized: List[float]

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def average_normalized(self) -> float:
        return float(np.mean(self.normalized))


def emit_csv(reports: Sequence[EvalReport], path) -> None:
    """One row per (report, task), sorted by method, sweep value, seed, task."""
    if not reports:
        raise BadSpec("no reports to write")
    rows = []
    for r in reports:
        for t, acc, norm in zip(r.tasks, r.accuracy, r.normalized):
            rows.append((r.method, r.sweep_name, float(r.sweep_value), int(r.seed), int(t), acc, norm))
    rows.sort(key=lambda row: (row[0], row[2], row[3], row[4], row[1]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m, name, value, seed, t, acc, norm in rows:
        w.writerow([m, name, f"{value:.6f}", seed, t, f"{acc:.6f}", f"{norm:.6f}"])
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- suite configuration --------------------------------------------------


@dataclass
class SuiteConfig:
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    n_tasks: int = 8
    task_counts: List[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    input_dim: int = 64
    hidden: int = 32
    classes_per_task: int = 4
    modes_per_class: int = 3
    latent_dim: int = 2
    # every task draws its informative coordinates from the same small pool
    support_dim: int = 6
    support_pool: int = 6
    mean_scale: float = 2.0
    noise_scale: float = 0.3
    n_train: int = 400
    n_test: int = 1000
    init_scale: float = 1.0
    pretrain_steps: int = 20
    pretrain_lr: float = 0.5
    finetune_steps: int = 300
    learning_rate: float = 1.0
    merge_lambda: float = 0.3
    ties_lambda: float = 0.3
    trim_ratio: float = 0.2
    keep_ratio: float = 0.1
    lambdas: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    lora_rank: int = 0
    lora_q: int = 0
    lora_lr: float = 0.5
    methods: List[str] = field(
        default_factory=lambda: [
            "single_task",
            "task_arithmetic",
            "weighted_average",
            "ties",
            "post_pruning",
            "byom_fft",
            "byom_fft_weighted_average",
            "byom_fft_ties",
        ]
    )
    lambda_sweeps: bool = True

    def validate(self) -> None:
        if not self.seeds:
            raise BadSpec("at least one seed is required")
        if any(t < 1 or t > self.n_tasks for t in self.task_counts):
            raise BadSpec(f"task counts must lie in [1, {self.n_tasks}]")
        unknown = set(self.methods) - set(SUITE_METHODS)
        if unknown:
            raise BadSpec(f"unknown methods {sorted(unknown)}")
        if self.lora_q and not self.lora_rank:
            raise BadSpec("lora_q needs lora_rank")
        if self.lora_q > self.lora_rank:
            raise BadSpec("lora_q cannot exceed lora_rank")


SUITE_METHODS = (
    "single_task",
    "task_arithmetic",
    "weighted_average",
    "ties",
    "post_pruning",
    "byom_fft",
    "byom_fft_weighted_average",
    "byom_fft_ties",
    "ablation_prune_theta",
)


def _parse_value(kind, text: str):
    text = text.strip()
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config(text: str) -> SuiteConfig:
    """Parse ``key = value`` lines (``#`` comments; lists are comma-separated).

    Integer lists also accept ``a..b`` for an inclusive range.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string("[suite]\n" + text)
    except configparser.Error as exc:
        raise BadSpec(f"cannot parse config: {exc}") from None
    defaults = SuiteConfig()
    known = {f.name: f for f in fields(SuiteConfig)}
    values = {}
    for key, raw in cp["suite"].items():
        if key not in known:
            raise BadSpec(f"unknown config key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, list):
                elem = type(current[0]) if current else str
                items = []
                for part in filter(None, (s.strip() for s in raw.split(","))):
                    if elem is int and ".." in part:
                        lo, hi = part.split("..")
                        items.extend(range(int(lo), int(hi) + 1))
                    else:
                        items.append(_parse_value(elem, part))
                values[key] = items
            else:
                values[key] = _parse_value(type(current), raw)
        except ValueError as exc:
            raise BadSpec(f"bad value for {key!r}: {exc}") from None
    cfg = replace(defaults, **values)
    cfg.validate()
    return cfg


def load_config(path) -> SuiteConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


# --- the suite ------------------------------------------------------------


@dataclass
class World:
    """A pretrained base plus the task models finetuned from it."""

    tasks: List[TaskData]
    base: Checkpoint
    finetuned: List[Checkpoint]
    lora_models: List[Checkpoint] = field(default_factory=list)
    adapters: List[LoraFile] = field(default_factory=list)


def task_specs(cfg: SuiteConfig, seed: int) -> List[SyntheticTask]:
    """``n_tasks`` dissimilar tasks with disjoint label blocks."""
    c = cfg.classes_per_task
    return [
        SyntheticTask(
            seed=seed * 1000 + t,
            family_seed=seed * 1000 + 100 + t,
            input_dim=cfg.input_dim,
            class_count=c,
            n_train=cfg.n_train,
            n_test=cfg.n_test,
            label_offset=c * t,
            mean_scale=cfg.mean_scale,
            noise_scale=cfg.noise_scale,
            modes_per_class=cfg.modes_per_class,
            latent_dim=cfg.latent_dim,
            support_dim=cfg.support_dim,
            support_pool=cfg.support_pool,
        )
        for t in range(cfg.n_tasks)
    ]


def similar_pair_specs(cfg: SuiteConfig, seed: int) -> List[SyntheticTask]:
    """One dataset cut into two tasks with disjoint label sets."""
    c = cfg.classes_per_task
    return [
        SyntheticTask(
            seed=seed * 1000 + 500 + half,
            family_seed=seed * 1000 + 600,
            input_dim=cfg.input_dim,
            class_count=c,
            class_start=c * half,
            n_train=cfg.n_train,
            n_test=cfg.n_test,
            label_offset=c * half,
            mean_scale=cfg.mean_scale,
            noise_scale=cfg.noise_scale,
            modes_per_class=cfg.modes_per_class,
            latent_dim=cfg.latent_dim,
            support_dim=cfg.support_dim,
            support_pool=cfg.support_pool,
        )
        for half in range(2)
    ]


def build_world(cfg: SuiteConfig, specs: Sequence[SyntheticTask], seed: int, lora: bool = False) -> World:
    tasks = [generate_task(s) for s in specs]
    n_classes = max(t.classes[1] for t in tasks)
    init = init_mlp(cfg.input_dim, cfg.hidden, n_classes, seed, cfg.init_scale)
    x = np.concatenate([t.x_train for t in tasks])
    y = np.concatenate([t.y_train for t in tasks])
    base = train(init, x, y, cfg.pretrain_steps, cfg.pretrain_lr).model
    base = Checkpoint(base.tensors, {"model": "mlp", "role": "pretrained"})
    finetuned = []
    for i, t in enumerate(tasks):
        res = train(base, t.x_train, t.y_train, cfg.finetune_steps, cfg.learning_rate, classes=t.classes)
        finetuned.append(res.model)
        log.info("seed %d task %d: finetuned, train loss %.4f", seed, i, res.loss)
    world = World(tasks, base, finetuned)
    if lora and cfg.lora_rank:
        for i, t in enumerate(tasks):
            res = train(
                base, t.x_train, t.y_train, cfg.finetune_steps, cfg.lora_lr,
                mode="lora", rank=cfg.lora_rank, classes=t.classes, seed=seed * 1000 + i,
            )
            world.lora_models.append(res.model)
            world.adapters.append(res.lora)
    return world


def _evaluate(models: Sequence[Params], tasks: Sequence[TaskData]) -> List[float]:
    return [accuracy(m, t) for m, t in zip(models, tasks)]


def _report(method, sweep_name, sweep_value, seed, task_ids, accs, reference) -> EvalReport:
    norm = [a / r if r > 0 else 0.0 for a, r in zip(accs, reference)]
    return EvalReport(method, sweep_name, float(sweep_value), seed, list(task_ids), list(accs), norm)


def shared_part(model: Checkpoint) -> Checkpoint:
    return Checkpoint({k: model.tensors[k] for k in SHARED})


def attach_head(shared: Checkpoint, task_model: Checkpoint) -> Checkpoint:
    """Shared layers from ``shared``, classification head from ``task_model``."""
    tensors = {k: shared.tensors[k] for k in SHARED}
    tensors.update({k: task_model.tensors[k] for k in HEAD})
    return Checkpoint(tensors)


def evaluate_methods(
    cfg: SuiteConfig, world: World, n: int, seed: int, sweep_name: str = "num_tasks"
) -> List[EvalReport]:
    """Every configured method on the first ``n`` tasks of ``world``.

    Mergers and pruning see only the shared layers; each task is scored with
    its own finetuned head attached.
    """
    tasks = world.tasks[:n]
    models = world.finetuned[:n]
    base = shared_part(world.base)
    shared = [shared_part(m) for m in models]
    ids = list(range(n))
    single = _evaluate(models, tasks)
    out = []

    def add(method, task_models, reference=single):
        out.append(_report(method, sweep_name, n, seed, ids, _evaluate(task_models, tasks), reference))

    def with_heads(shared_models, heads=models):
        return [attach_head(s, h) for s, h in zip(shared_models, heads)]

    mergers = {
        "task_arithmetic": MergeSpec("task_arithmetic", lam=cfg.merge_lambda),
        "weighted_average": MergeSpec("weighted_average", weights=[1.0 / n] * n),
        "ties": MergeSpec("ties", lam=cfg.ties_lambda, trim_ratio=cfg.trim_ratio),
    }
    merged_cache: Dict[str, Checkpoint] = {}

    def merged(name):
        if name not in merged_cache:
            merged_cache[name] = merge(base, shared, mergers[name])
        return merged_cache[name]

    for method in cfg.methods:
        if method == "single_task":
            add(method, models)
        elif method in mergers:
            add(method, with_heads([merged(method)] * n))
        elif method == "post_pruning":
            pruned = byom.post_prune(base, shared, cfg.keep_ratio)
            add(method, with_heads([byom.materialize_task_model(pruned, t) for t in ids]))
        elif method.startswith("byom_fft"):
            name = method[len("byom_fft_"):] or "task_arithmetic"
            pruned = byom.byom_fft(base, shared, cfg.keep_ratio, merged(name))
            add(method, with_heads([byom.materialize_task_model(pruned, t) for t in ids]))
        elif method == "ablation_prune_theta":
            pruned = byom.ablation_prune_theta(shared, cfg.keep_ratio)
            add(method, with_heads([byom.materialize_task_model(pruned, t) for t in ids]))

    if world.adapters:
        lora_models = world.lora_models[:n]
        lora_single = _evaluate(lora_models, tasks)
        add("single_task_lora", lora_models, lora_single)
        lora_ta = merge(base, [shared_part(m) for m in lora_models], mergers["task_arithmetic"])
        add("task_arithmetic_lora", with_heads([lora_ta] * n, lora_models), lora_single)
        if cfg.lora_q:
            comp = byom.byom_lora(world.base, world.adapters[:n], cfg.lora_q)
            add("byom_lora", [byom.materialize_lora_task_model(comp, t) for t in ids], lora_single)
    return out


def lambda_sweep(cfg: SuiteConfig, world: World, seed: int, sweep_name: str) -> List[EvalReport]:
    """Weighted averaging and task arithmetic of two tasks over the lambda grid."""
    tasks = world.tasks[:2]
    models = world.finetuned[:2]
    base = shared_part(world.base)
    shared = [shared_part(m) for m in models]
    single = _evaluate(models, tasks)
    out = []
    for lam in cfg.lambdas:
        wa = merge(base, shared, MergeSpec("weighted_average", weights=[lam, 1.0 - lam]))
        ta = merge(base, shared, MergeSpec("task_arithmetic", lam=lam))
        out.append(_report("single_task", sweep_name, lam, seed, [0, 1], single, single))
        for method, m in (("weighted_average", wa), ("task_arithmetic", ta)):
            accs = _evaluate([attach_head(m, h) for h in models], tasks)
            out.append(_report(method, sweep_name, lam, seed, [0, 1], accs, single))
    return out


def run_seed(cfg: SuiteConfig, seed: int) -> List[EvalReport]:
    world = build_world(cfg, task_specs(cfg, seed), seed, lora=bool(cfg.lora_rank))
    reports = []
    for n in cfg.task_counts:
        reports.extend(evaluate_methods(cfg, world, n, seed))
    if cfg.lambda_sweeps:
        reports.extend(lambda_sweep(cfg, world, seed, "lambda_dissimilar"))
        similar = build_world(cfg, similar_pair_specs(cfg, seed), seed + 1_000_003)
        reports.extend(lambda_sweep(cfg, similar, seed, "lambda_similar"))
    return reports


def run_interference_suite(cfg: SuiteConfig) -> List[EvalReport]:
    cfg.validate()
    reports: List[EvalReport] = []
    for seed in cfg.seeds:
        reports.extend(run_seed(cfg, seed))
        log.info("seed %d done", seed)
    reports.sort(key=lambda r: (r.method, r.sweep_name, r.sweep_value, r.seed))
    return reports
