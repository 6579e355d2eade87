"""Online domain identification over style vectors.

State lives in two small containers: a :class:`CentroidSet` of discovered
domain centroids (seeded with the mean source style) and a fixed-capacity
:class:`StyleReservoir` of past style vectors maintained by reservoir
sampling. A new centroid is spawned whenever an incoming style vector is
farther than the calibrated threshold from every existing centroid and the
cap has not been reached; otherwise the vector is assigned to its nearest
centroid. Centroids are refined by gradient descent on a mutual-information
objective over the reservoir, which sharpens assignments while penalizing
collapse onto a single centroid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import InputDomainError, InsufficientDataError, NumericalError

DEFAULT_RESERVOIR_CAPACITY = 1024
DEFAULT_K_MAX = 16
DEFAULT_CENTROID_LR = 1e-4


class StyleReservoir:
    """Fixed-capacity buffer holding a uniform sample of all offered styles.

    The first ``capacity`` offers fill the buffer in order. From then on the
    t-th offer is accepted with probability ``capacity / t`` and, if
    accepted, overwrites a uniformly chosen slot. After any number of offers
    every past vector is present with equal probability ``capacity / t``.
    """

    def __init__(self, capacity: int, dim: int, seed: int = 0):
        if capacity < 1:
            raise InputDomainError(f"capacity must be positive, got {capacity}")
        if dim < 1:
            raise InputDomainError(f"dim must be positive, got {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.seen_count = 0
        self._buffer: list[np.ndarray] = []
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._buffer)

    @property
    def styles(self) -> np.ndarray:
        """Current buffer contents as an ``(n, dim)`` matrix (copy)."""
        if not self._buffer:
            return np.empty((0, self.dim))
        return np.stack(self._buffer)

    def offer(self, s: np.ndarray) -> None:
        """Offer one style vector; inserts or replaces per reservoir sampling."""
        vec = np.asarray(s, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise InputDomainError(
                f"style vector has shape {vec.shape}, reservoir expects ({self.dim},)"
            )
        self.seen_count += 1
        if len(self._buffer) < self.capacity:
            self._buffer.append(vec.copy())
            return
        if self._rng.random() <= self.capacity / self.seen_count:
            slot = int(self._rng.integers(0, self.capacity))
            self._buffer[slot] = vec.copy()


@dataclass
class DomainDecision:
    """Outcome of routing one style vector against the current centroids."""

    kind: str  # "existing" | "new_domain"
    index: int
    distance: float
    soft_assignment: np.ndarray  # post-decision, length = centroid count

    @property
    def is_new(self) -> bool:
        return self.kind == "new_domain"


class CentroidSet:
    """Domain centroids, starting from a single source centroid."""

    def __init__(self, source_centroid: np.ndarray, k_max: int = DEFAULT_K_MAX):
        c = np.asarray(source_centroid, dtype=np.float64)
        if c.ndim != 1:
            raise InputDomainError("source centroid must be a vector")
        if k_max < 1:
            raise InputDomainError(f"k_max must be positive, got {k_max}")
        if not np.all(np.isfinite(c)):
            raise InputDomainError("source centroid has non-finite entries")
        self.dim = c.size
        self.k_max = int(k_max)
        self._centroids = c.copy().reshape(1, -1)

    @property
    def count(self) -> int:
        return self._centroids.shape[0]

    @property
    def centroids(self) -> np.ndarray:
        """Current centroids as a ``(K, dim)`` matrix (copy)."""
        return self._centroids.copy()

    def set_centroids(self, values: np.ndarray) -> None:
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != self._centroids.shape:
            raise InputDomainError(
                f"expected shape {self._centroids.shape}, got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise NumericalError("centroid update produced non-finite values")
        self._centroids = vals.copy()

    def detect(
        self, s: np.ndarray, tau: float, squared: bool = False
    ) -> DomainDecision:
        """Route a style vector: nearest existing centroid, or a new domain.

        A new centroid (a copy of ``s``) is appended iff the minimum
        Euclidean distance exceeds ``tau`` and the cap ``k_max`` has not been
        reached. Ties in the nearest-centroid choice go to the lowest index.
        """
        vec = np.asarray(s, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise InputDomainError(
                f"style vector has shape {vec.shape}, centroids expect ({self.dim},)"
            )
        dists = np.linalg.norm(self._centroids - vec, axis=1)
        delta = float(dists.min())
        if delta > tau and self.count < self.k_max:
            self._centroids = np.vstack([self._centroids, vec])
            index = self.count - 1
            kind = "new_domain"
        else:
            index = int(np.argmin(dists))
            kind = "existing"
        q = soft_assign_vector(vec, self, squared=squared)
        return DomainDecision(kind=kind, index=index, distance=delta, soft_assignment=q)


def _assignment_logits(
    styles: np.ndarray, centroids: np.ndarray, squared: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``-dist / sqrt(d)`` plus the raw distance matrix."""
    diff = styles[:, None, :] - centroids[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    scale = np.sqrt(styles.shape[1])
    logits = -(dist**2 if squared else dist) / scale
    return logits, dist


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)  # max-subtraction
    return shifted - logsumexp(shifted, axis=1, keepdims=True)


def soft_assign_matrix(
    reservoir: StyleReservoir, centroids: CentroidSet, squared: bool = False
) -> np.ndarray:
    """Row-softmax of scaled negative style-to-centroid distances.

    Row i gives the assignment probabilities of the i-th reservoir vector
    over all centroids; every row sums to 1.
    """
    if len(reservoir) == 0:
        raise InsufficientDataError("soft assignment needs a nonempty reservoir")
    logits, _ = _assignment_logits(reservoir.styles, centroids.centroids, squared)
    return np.exp(_log_softmax_rows(logits))


def soft_assign_vector(
    s: np.ndarray, centroids: CentroidSet, squared: bool = False
) -> np.ndarray:
    """Single-vector specialization of :func:`soft_assign_matrix`."""
    vec = np.asarray(s, dtype=np.float64).reshape(1, -1)
    logits, _ = _assignment_logits(vec, centroids.centroids, squared)
    return np.exp(_log_softmax_rows(logits))[0]


def mi_loss(q: np.ndarray) -> float:
    """Mutual-information clustering loss of an assignment matrix.

    ``L = -(1/M) sum_ij q_ij ln q_ij + sum_j qbar_j ln qbar_j`` with
    ``qbar_j`` the column means and ``0 ln 0 := 0``. The first term rewards
    confident rows, the second penalizes collapse onto few columns; the
    total is bounded by ``[-ln K, ln K]`` and minimized at confident,
    balanced assignments.
    """
    mat = np.asarray(q, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise InputDomainError("assignment matrix must be 2-D and nonempty")
    m = mat.shape[0]
    ent = -xlogy(mat, mat).sum() / m
    qbar = mat.mean(axis=0)
    cm = xlogy(qbar, qbar).sum()
    return float(ent + cm)


def mi_grad_centroids(
    reservoir: StyleReservoir, centroids: CentroidSet, squared: bool = False
) -> np.ndarray:
    """Analytic gradient of ``mi_loss(soft_assign_matrix(R, C))`` w.r.t. centroids.

    Chains through the row softmax and the Euclidean distance; at a
    zero-distance pair the norm's subgradient 0 is used. Returns a
    ``(K, dim)`` matrix of per-centroid gradients.
    """
    if len(reservoir) == 0:
        raise InsufficientDataError("gradient needs a nonempty reservoir")
    styles = reservoir.styles
    cents = centroids.centroids
    n, d = styles.shape
    logits, dist = _assignment_logits(styles, cents, squared)
    logq = _log_softmax_rows(logits)
    q = np.exp(logq)

    # dL/dq_ij = (ln qbar_j - ln q_ij) / n, with zero-probability cells masked.
    log_qbar = logsumexp(logq, axis=0) - np.log(n)
    with np.errstate(invalid="ignore"):
        dl_dq = np.where(q > 0.0, (log_qbar[None, :] - logq) / n, 0.0)
    row_dot = (dl_dq * q).sum(axis=1, keepdims=True)
    dl_dlogits = q * (dl_dq - row_dot)

    diff = cents[None, :, :] - styles[:, None, :]  # d(dist_ij)/dc_j direction
    scale = np.sqrt(d)
    if squared:
        dlogit_dc = -2.0 * diff / scale
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dlogit_dc = np.where(dist[:, :, None] > 0.0, -diff / (dist[:, :, None] * scale), 0.0)
    return np.einsum("ij,ijk->jk", dl_dlogits, dlogit_dc)


@dataclass
class AdamState:
    """Moment accumulators for the adaptive centroid-update option."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure_shape(self, shape: tuple[int, ...]) -> None:
        if self.m is None:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
            return
        if self.m.shape != shape:
            # Centroid count grew: pad the new rows with zero moments.
            grown_m = np.zeros(shape)
            grown_v = np.zeros(shape)
            rows = min(self.m.shape[0], shape[0])
            grown_m[:rows] = self.m[:rows]
            grown_v[:rows] = self.v[:rows]
            self.m, self.v = grown_m, grown_v


def update_centroids(
    centroids: CentroidSet,
    reservoir: StyleReservoir,
    lr: float = DEFAULT_CENTROID_LR,
    steps: int = 1,
    squared: bool = False,
    optimizer: str = "gd",
    adam_state: AdamState | None = None,
) -> None:
    """Run ``steps`` descent steps on the mutual-information loss in place.

    Plain gradient descent by default; ``optimizer="adam"`` uses adaptive
    moments carried in ``adam_state`` across calls. Every centroid is
    updated, the source centroid included.
    """
    if steps < 1:
        raise InputDomainError(f"steps must be positive, got {steps}")
    if lr < 0:
        raise InputDomainError(f"lr must be nonnegative, got {lr}")
    if optimizer not in ("gd", "adam"):
        raise InputDomainError(f"unknown optimizer {optimizer!r}")
    for _ in range(steps):
        grad = mi_grad_centroids(reservoir, centroids, squared=squared)
        if not np.all(np.isfinite(grad)):
            bad = np.argwhere(~np.isfinite(grad))
            raise NumericalError(
                f"non-finite centroid gradient at entries {bad[:4].tolist()}"
            )
        if optimizer == "adam":
            if adam_state is None:
                raise InputDomainError("optimizer='adam' requires an AdamState")
            adam_state.ensure_shape(grad.shape)
            adam_state.step += 1
            b1, b2 = adam_state.beta1, adam_state.beta2
            adam_state.m = b1 * adam_state.m + (1 - b1) * grad
            adam_state.v = b2 * adam_state.v + (1 - b2) * grad**2
            mhat = adam_state.m / (1 - b1**adam_state.step)
            vhat = adam_state.v / (1 - b2**adam_state.step)
            delta = lr * mhat / (np.sqrt(vhat) + adam_state.eps)
        else:
            delta = lr * grad
        centroids.set_centroids(centroids.centroids - delta)


def write_trace(path: str | Path, records: Iterable[Mapping]) -> int:
    """Write per-step decision records as JSON lines; returns the line count.

    Each record carries {step, decision_kind, chosen_index, min_distance,
    centroid_count, soft_assignment}.
    """
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(dict(rec), sort_keys=True))
            fh.write("\n")
            n += 1
    return n
