"""Pairwise interaction kernels and adjacency normalization.

Three kernels weight the edge between vehicles ``i`` and ``j`` at step ``t``:

* ``MI``: the largest plug-in mutual information between any of the four
  pairings of the two vehicles' longitudinal/lateral position series,
  estimated over the history prefix ``[0..t]``;
* ``L2``: inverse Euclidean distance at ``t``;
* ``LONGITUDINAL``: inverse longitudinal gap at ``t``.

Coincident positions give weight 0 under the distance kernels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import xlogy

from .errors import DataError, InsufficientSamplesError

DEFAULT_BINS = 8
MIN_MI_WINDOW = 5


class KernelKind(str, Enum):
    MI = "mi"
    L2 = "l2"
    LONGITUDINAL = "long"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"longitudinal": "long", "l": "long"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class MIEstimate:
    value: float
    sample_count: int
    bin_count: int
    h_a: float
    h_b: float
    h_joint: float


@dataclass
class AdjacencyMatrix:
    kind: KernelKind
    t: int
    w: np.ndarray


@dataclass
class NormalizedAdjacency:
    t: int
    w_norm: np.ndarray


# ---------------------------------------------------------------------------
# histogram estimator


def bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index of each sample over the series' own [min, max].

    Works along the last axis. A constant series falls entirely into bin 0.
    """
    v = np.asarray(values, dtype=float)
    lo = v.min(axis=-1, keepdims=True)
    hi = v.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    idx = np.floor((v - lo) / safe * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def entropy_from_counts(counts: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of the histogram(s) along the last axis.

    Counts are sorted first so the result does not depend on bin order.
    """
    c = np.sort(np.asarray(counts, dtype=float), axis=-1)
    n = c.sum(axis=-1)
    return np.log(n) - xlogy(c, c).sum(axis=-1) / n


def _marginal_counts(idx: np.ndarray, bins: int) -> np.ndarray:
    return np.bincount(idx, minlength=bins)


def _joint_counts(ia: np.ndarray, ib: np.ndarray, bins: int) -> np.ndarray:
    return np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)


def histogram_mi(a, b, bins: int = DEFAULT_BINS) -> MIEstimate:
    """Plug-in mutual information of two equally long series, in nats.

    Raises:
        InsufficientSamplesError: fewer than five samples.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise DataError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < MIN_MI_WINDOW:
        raise InsufficientSamplesError(f"need >= {MIN_MI_WINDOW} samples, got {a.size}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ia, ib = bin_indices(a, bins), bin_indices(b, bins)
    h_a = float(entropy_from_counts(_marginal_counts(ia, bins)))
    h_b = float(entropy_from_counts(_marginal_counts(ib, bins)))
    h_ab = float(entropy_from_counts(_joint_counts(ia, ib, bins).ravel()))
    lo, hi = sorted((h_a, h_b))
    value = max(0.0, (lo + hi) - h_ab)
    return MIEstimate(value, a.size, bins, h_a, h_b, h_ab)


def conditional_entropies(a, b, bins: int = DEFAULT_BINS) -> tuple[float, float, float]:
    """``H(A,B)``, ``H(A|B)`` and ``H(B|A)`` computed directly from the joint histogram.

    Independent of :func:`histogram_mi`'s marginal path, so the two can be
    checked against each other.
    """
    ia = bin_indices(np.asarray(a, dtype=float).ravel(), bins)
    ib = bin_indices(np.asarray(b, dtype=float).ravel(), bins)
    joint = _joint_counts(ia, ib, bins).astype(float)
    n = joint.sum()
    p = joint / n
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    h_joint = -float(np.sum(p[nz] * np.log(p[nz])))
    h_a_given_b = -float(np.sum(p[nz] * np.log((p / np.where(pb > 0, pb, 1.0))[nz])))
    h_b_given_a = -float(np.sum(p[nz] * np.log((p / np.where(pa > 0, pa, 1.0))[nz])))
    return h_joint, h_a_given_b, h_b_given_a


# ---------------------------------------------------------------------------
# adjacency


def _as_history(scene_or_history) -> np.ndarray:
    hist = getattr(scene_or_history, "history", scene_or_history)
    hist = np.asarray(hist, dtype=float)
    if hist.ndim != 3 or hist.shape[1] != 2:
        raise DataError(f"expected a T x 2 x N history, got shape {hist.shape}")
    return hist


def mi_matrix(history: np.ndarray, t: int, bins: int = DEFAULT_BINS,
              min_window: int = MIN_MI_WINDOW) -> np.ndarray:
    """MI adjacency weights at step ``t`` from the history prefix ``[0..t]``."""
    n_veh = history.shape[2]
    w = np.zeros((n_veh, n_veh))
    n = t + 1
    if n < min_window or n_veh < 2:
        return w
    # rows 0..N-1 are longitudinal series, N..2N-1 lateral
    series = np.concatenate([history[:n, 0, :].T, history[:n, 1, :].T])
    idx = bin_indices(series, bins)
    s = series.shape[0]
    marg = np.zeros((s, bins))
    np.add.at(marg, (np.repeat(np.arange(s), n), idx.ravel()), 1.0)
    h = entropy_from_counts(marg)

    iu, ju = np.triu_indices(n_veh, k=1)
    best = np.zeros(iu.size)
    for di in (0, n_veh):
        for dj in (0, n_veh):
            p, q = iu + di, ju + dj
            codes = idx[p] * bins + idx[q]
            flat = (np.arange(p.size)[:, None] * bins * bins + codes).ravel()
            joint = np.bincount(flat, minlength=p.size * bins * bins).reshape(p.size, bins * bins)
            hj = entropy_from_counts(joint)
            lo = np.minimum(h[p], h[q])
            hi = np.maximum(h[p], h[q])
            best = np.maximum(best, np.maximum(0.0, (lo + hi) - hj))
    w[iu, ju] = best
    w[ju, iu] = best
    return w


def _inverse_distance(d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    nz = d != 0
    out[nz] = 1.0 / d[nz]
    return out


def distance_matrix(history: np.ndarray, t: int, kind: KernelKind) -> np.ndarray:
    p = history[t]  # 2 x N
    if kind is KernelKind.L2:
        diff = p[:, :, None] - p[:, None, :]
        d = np.sqrt(diff[0] ** 2 + diff[1] ** 2)
    else:
        d = np.abs(p[0][:, None] - p[0][None, :])
    w = _inverse_distance(d)
    np.fill_diagonal(w, 0.0)
    return w


def adjacency(scene, t: int, kind, bins: int = DEFAULT_BINS,
              min_window: int = MIN_MI_WINDOW) -> AdjacencyMatrix:
    """Weighted adjacency of one scene (or ``T x 2 x N`` history) at history step ``t``.

    Under the MI kernel, prefixes shorter than ``min_window`` samples carry
    no interaction evidence and give an all-zero matrix.
    """
    kind = KernelKind.parse(kind)
    hist = _as_history(scene)
    if not 0 <= t < hist.shape[0]:
        raise DataError(f"t={t} outside history of length {hist.shape[0]}")
    if kind is KernelKind.MI:
        w = mi_matrix(hist, t, bins, min_window)
    else:
        w = distance_matrix(hist, t, kind)
    return AdjacencyMatrix(kind, t, w)


def adjacency_stack(scene, kind, bins: int = DEFAULT_BINS,
                    min_window: int = MIN_MI_WINDOW) -> np.ndarray:
    """Adjacency for every history step, shape ``T x N x N``."""
    hist = _as_history(scene)
    return np.stack([adjacency(hist, t, kind, bins, min_window).w for t in range(hist.shape[0])])


def normalize_adjacency(A) -> NormalizedAdjacency:
    """Symmetric degree normalization with unit self-loops."""
    w = np.asarray(getattr(A, "w", A), dtype=float)
    t = getattr(A, "t", 0)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DataError(f"adjacency must be square, got {w.shape}")
    if not np.array_equal(w, w.T):
        raise DataError("adjacency must be symmetric")
    if np.any(w < 0):
        raise DataError("adjacency must be nonnegative")
    a_hat = w + np.eye(w.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return NormalizedAdjacency(t, a_hat * np.outer(inv_sqrt, inv_sqrt))


def normalize_stack(stack: np.ndarray) -> np.ndarray:
    return np.stack([normalize_adjacency(a).w_norm for a in stack])


def adjacency_to_json(stack: np.ndarray, kind, vehicle_ids=None, normalized: np.ndarray | None = None) -> str:
    """Heat-map friendly JSON of an adjacency sequence."""
    kind = KernelKind.parse(kind)
    n = stack.shape[1]
    doc = {
        "kind": kind.value,
        "vehicle_ids": list(vehicle_ids) if vehicle_ids is not None else list(range(n)),
        "steps": [{"t": t, "w": stack[t].tolist()} for t in range(stack.shape[0])],
    }
    if normalized is not None:
        for rec, wn in zip(doc["steps"], normalized):
            rec["w_norm"] = wn.tolist()
    return json.dumps(doc)
