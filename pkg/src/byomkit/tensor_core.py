"""Dense kernels shared by every other module.

Tensors are numpy arrays. Stored values are float32; the QR/SVD kernels
accumulate in float64 and hand back float64 factors, leaving the cast to
the caller that writes an artifact.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, TypeVar

import numpy as np

from byomkit.errors import (
    ConvergenceFailure,
    EmptyInput,
    InnerDimMismatch,
    KeyMismatch,
    NonFiniteValue,
    NotAMatrix,
    RankOutOfRange,
    RatioOutOfRange,
    ShapeMismatch,
)

TensorMap = Dict[str, np.ndarray]
T = TypeVar("T")
R = TypeVar("R")

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
# a column entry below this counts as zero when fixing singular-vector signs
_SIGN_EPS = 1e-9


@dataclass(frozen=True)
class TopKSelection:
    indices: np.ndarray  # int64, strictly increasing
    count: int


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # (n, k) float64, orthonormal columns
    s: np.ndarray  # (k,) float64, non-increasing, >= 0
    v: np.ndarray  # (m, k) float64, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def truncate(self, q: int) -> "SvdResult":
        return SvdResult(self.u[:, :q], self.s[:q], self.v[:, :q])


def worker_count() -> int:
    """Thread cap from ``BYOM_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("BYOM_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def map_parallel(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """``[fn(x) for x in items]``, fanned out over threads; output order is input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def check_compatible(x: Mapping[str, np.ndarray], y: Mapping[str, np.ndarray]) -> None:
    if set(x) != set(y):
        missing = sorted(set(x) ^ set(y))
        raise KeyMismatch(f"key sets differ: {missing[:5]}")
    for k in x:
        if x[k].shape != y[k].shape:
            raise ShapeMismatch(f"{k!r}: {x[k].shape} vs {y[k].shape}")


def to_f32(values: np.ndarray, name: str = "tensor") -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return out


def elementwise_axpy(alpha: float, x: TensorMap, y: TensorMap) -> TensorMap:
    """Return ``alpha * x + y`` key by key, in the key order of ``x``."""
    check_compatible(x, y)
    alpha = float(alpha)
    out = {}
    for k, xv in x.items():
        acc = alpha * xv.astype(np.float64) + y[k].astype(np.float64)
        out[k] = to_f32(acc, k)
    return out


def keep_count(keep_ratio: float, n: int) -> int:
    """``ceil(keep_ratio * n)``, clamped to ``[1, n]``.

    Products within 1e-9 of an integer are snapped to it first, so that
    e.g. ``0.1 * 30`` keeps 3 entries rather than 4.
    """
    if not (0.0 < keep_ratio <= 1.0) or math.isnan(keep_ratio):
        raise RatioOutOfRange(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    if n < 1:
        raise EmptyInput("cannot select from an empty vector")
    x = keep_ratio * n
    nearest = round(x)
    count = nearest if abs(x - nearest) <= 1e-9 * max(1.0, x) else math.ceil(x)
    return min(max(int(count), 1), n)


def top_k_by_magnitude(values: np.ndarray, keep_ratio: float) -> TopKSelection:
    """Positions of the ``ceil(keep_ratio * n)`` largest ``|values|``.

    Equal magnitudes are resolved in favour of the lower flat index.
    Runs in linear time (one ``np.partition``), not a full sort.
    """
    flat = np.asarray(values).ravel()
    if flat.size == 0:
        raise EmptyInput("cannot select from an empty vector")
    count = keep_count(keep_ratio, flat.size)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteValue("top-k input contains NaN or Inf")
    if count == flat.size:
        return TopKSelection(np.arange(flat.size, dtype=np.int64), count)

    mag = np.abs(flat)
    kth = flat.size - count
    threshold = np.partition(mag, kth)[kth]
    mask = mag > threshold
    need = count - int(np.count_nonzero(mask))
    ties = np.flatnonzero(mag == threshold)[:need]
    mask[ties] = True
    return TopKSelection(np.flatnonzero(mask).astype(np.int64), count)


def concat_flat(tmap: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, List[Tuple[str, int, int]]]:
    """Concatenate all tensors (map order, row-major) into one vector."""
    layout = []
    parts = []
    offset = 0
    for name, t in tmap.items():
        layout.append((name, offset, offset + t.size))
        parts.append(t.ravel())
        offset += t.size
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
    return flat, layout


def split_indices(indices: np.ndarray, layout: List[Tuple[str, int, int]]) -> Dict[str, np.ndarray]:
    """Map global flat indices back to per-tensor local indices."""
    out = {}
    for name, begin, end in layout:
        lo, hi = np.searchsorted(indices, [begin, end])
        out[name] = (indices[lo:hi] - begin).astype(np.uint64)
    return out


def _round_robin(k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pairings of a round-robin tournament: every (p, q) once per sweep."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi on a tall matrix ``w`` (n >= k).

    Returns ``(w_rot, v)`` with mutually orthogonal columns in ``w_rot`` and
    ``w @ v == w_rot``. Disjoint column pairs of a round-robin schedule are
    rotated together.
    """
    w = w.copy()
    k = w.shape[1]
    v = np.eye(k)
    if k < 2:
        return w, v
    schedule = _round_robin(k)
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (w, v):
                mp, mq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        if not rotated:
            return w, v
    raise ConvergenceFailure(f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")


def _complete_columns(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill columns flagged in ``missing`` with unit vectors orthogonal to the rest."""
    n = u.shape[0]
    for j in np.flatnonzero(missing):
        basis = u[:, ~missing]
        best, best_norm = None, -1.0
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            for _ in range(2):
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > best_norm + 1e-12:
                best, best_norm = e, norm
        u[:, j] = best / best_norm
        missing[j] = False


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > _SIGN_EPS)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0


def _svd_tall(a: np.ndarray) -> SvdResult:
    q, r = np.linalg.qr(a)
    w, v = _jacobi(r)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    zero = s == 0.0
    ur = np.zeros_like(w)
    ur[:, ~zero] = w[:, ~zero] / s[~zero]
    if zero.any():
        _complete_columns(ur, zero.copy())
    u = q @ ur
    _fix_signs(u, v)
    return SvdResult(u, s, v)


def svd_thin(a: np.ndarray) -> SvdResult:
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``k = min(rows, cols)``.

    QR-reduces to a square core, then runs one-sided Jacobi on it. The
    first non-negligible entry of each column of ``u`` is made non-negative.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise NotAMatrix(f"expected a 2-D array, got shape {a.shape}")
    if a.size == 0:
        raise EmptyInput("cannot decompose an empty matrix")
    a = a.astype(np.float64)
    if a.shape[0] >= a.shape[1]:
        return _svd_tall(a)
    t = _svd_tall(a.T)
    u, v = t.v.copy(), t.u.copy()
    _fix_signs(u, v)
    return SvdResult(u, t.s, v)


def truncated_svd_of_product(a: np.ndarray, b: np.ndarray, q: int) -> SvdResult:
    """Top-``q`` SVD of ``a @ b.T`` without forming the product.

    ``a`` is (d_out, r) and ``b`` is (d_in, r). Both factors are QR-reduced
    and only the small ``R_a @ R_b.T`` core is decomposed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise NotAMatrix("factors must be 2-D")
    if a.shape[1] != b.shape[1]:
        raise InnerDimMismatch(f"inner dims differ: {a.shape[1]} vs {b.shape[1]}")
    r = a.shape[1]
    k = min(r, a.shape[0], b.shape[0])
    if not (1 <= q <= r):
        raise RankOutOfRange(f"rank {q} outside [1, {r}]")
    if q > k:
        raise RankOutOfRange(f"rank {q} exceeds the product's maximal rank {k}")
    qa, ra = np.linalg.qr(a)
    qb, rb = np.linalg.qr(b)
    core = svd_thin(ra @ rb.T)
    u = qa @ core.u[:, :q]
    v = qb @ core.v[:, :q]
    _fix_signs(u, v)
    return SvdResult(u, core.s[:q].copy(), v)
