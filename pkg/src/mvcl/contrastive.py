"""Multi-view contrastive objective over a batch of per-view projections.

For anchor view ``m``, target view ``j`` and lesion ``i``::

    pair(m, j, i) = -log( exp(s(z_m^i, z_j^i) / tau) / sum_k exp(s(z_m^i, z_j^k) / tau) )

where ``s`` is cosine similarity. Negatives come from the target view only.
``cmc_inclusive`` sums the denominator over every ``k``; ``as_written`` skips
``k == i``. The batch loss sums all ordered pairs ``m != j`` per lesion and
divides by ``2N``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NoNegativesError, NumericError, UsageError

DEFAULT_TAU = 0.07
UNIT_NORM_TOL = 1e-5


class LossMode(str, enum.Enum):
    CMC_INCLUSIVE = "cmc_inclusive"
    AS_WRITTEN = "as_written"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"cmc": cls.CMC_INCLUSIVE, "as-written": cls.AS_WRITTEN}
        return aliases.get(value) or cls(value)


@dataclass
class ProjectionBatch:
    z: np.ndarray  # [M, N, D]
    lesion_ids: list = None
    tau: float = DEFAULT_TAU
    check_norm: bool = True

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 3:
            raise DataError(f"projections must be [M, N, D], got shape {self.z.shape}")
        M, N, _ = self.z.shape
        if M < 2 or N < 1:
            raise DataError(f"need M >= 2 views and N >= 1 lesions, got M={M}, N={N}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not np.all(np.isfinite(self.z)):
            raise NumericError("non-finite projection")
        if self.check_norm:
            norms = np.linalg.norm(self.z, axis=-1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise DataError("projection vectors must be unit norm")
        if self.lesion_ids is None:
            self.lesion_ids = list(range(N))
        elif len(self.lesion_ids) != N:
            raise DataError("lesion_ids length must equal N")

    @property
    def M(self):
        return self.z.shape[0]

    @property
    def N(self):
        return self.z.shape[1]


@dataclass
class LossResult:
    value: float
    pair_terms: np.ndarray  # [M, M, N]; NaN on the m == j diagonal

    def __float__(self):
        return self.value


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit(z):
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("cosine similarity of a zero vector is undefined")
    return z / norm, norm


def _pair_logits(u, m, j, tau):
    return u[m] @ u[j].T / tau  # rows: anchors i, cols: candidates k


def _pair_terms(logits, mode):
    """Per-anchor loss and d(loss)/d(logits) for one (m, j) block."""
    n = logits.shape[0]
    diag = np.diag(logits)
    masked = logits.copy()
    if mode is LossMode.AS_WRITTEN:
        if n < 2:
            raise NoNegativesError("as_written mode needs at least 2 lesions (empty denominator)")
        np.fill_diagonal(masked, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - mx)
    s = e.sum(axis=1, keepdims=True)
    lse = (mx + np.log(s))[:, 0]
    soft = e / s
    dlogits = soft - np.eye(n)
    return lse - diag, dlogits


def _check_pair(batch, m, j, i=None):
    M, N = batch.M, batch.N
    if not (0 <= m < M and 0 <= j < M) or m == j:
        raise UsageError(f"need distinct view indices in [0, {M}), got m={m}, j={j}")
    if i is not None and not 0 <= i < N:
        raise UsageError(f"lesion index {i} out of range for N={N}")


def pair_loss(batch: ProjectionBatch, m: int, j: int, i: int, mode=LossMode.CMC_INCLUSIVE) -> float:
    """Directional loss with view ``m`` of lesion ``i`` as anchor against view ``j`` (0-based)."""
    mode = LossMode.parse(mode)
    _check_pair(batch, m, j, i)
    u, _ = _unit(batch.z)
    terms, _ = _pair_terms(_pair_logits(u, m, j, batch.tau), mode)
    return float(terms[i])


def two_view_lesion_loss(batch: ProjectionBatch, i: int, mode=LossMode.CMC_INCLUSIVE) -> float:
    if batch.M != 2:
        raise UsageError(f"two-view loss needs exactly 2 views, got {batch.M}")
    return pair_loss(batch, 0, 1, i, mode) + pair_loss(batch, 1, 0, i, mode)


def anchor_loss(batch: ProjectionBatch, m: int, i: int, mode=LossMode.CMC_INCLUSIVE) -> float:
    return sum(pair_loss(batch, m, j, i, mode) for j in range(batch.M) if j != m)


def _forward(batch, mode, need_grad):
    mode = LossMode.parse(mode)
    M, N = batch.M, batch.N
    u, norm = _unit(batch.z)
    terms = np.full((M, M, N), np.nan)
    du = np.zeros_like(u) if need_grad else None
    for m in range(M):
        for j in range(M):
            if m == j:
                continue
            t, dl = _pair_terms(_pair_logits(u, m, j, batch.tau), mode)
            terms[m, j] = t
            if need_grad:
                du[m] += dl @ u[j] / batch.tau
                du[j] += dl.T @ u[m] / batch.tau
    per_lesion = np.nansum(terms, axis=(0, 1))
    value = float(per_lesion.sum() / (2 * N))
    if not need_grad:
        return LossResult(value, terms), None
    du /= 2 * N
    # back through u = z / |z|
    dz = (du - u * (du * u).sum(axis=-1, keepdims=True)) / norm
    return LossResult(value, terms), dz


def batch_loss(batch: ProjectionBatch, mode=LossMode.CMC_INCLUSIVE) -> LossResult:
    return _forward(batch, mode, need_grad=False)[0]


def batch_loss_backward(batch: ProjectionBatch, mode=LossMode.CMC_INCLUSIVE):
    """Return ``(LossResult, dL/dz)`` with the gradient shaped like ``batch.z``."""
    return _forward(batch, mode, need_grad=True)


def similarity_matrices(z: np.ndarray) -> dict:
    """Cosine similarities between every pair of views, for diagnostics."""
    u, _ = _unit(np.asarray(z, dtype=np.float64))
    M = u.shape[0]
    return {f"{m},{j}": (u[m] @ u[j].T).tolist() for m in range(M) for j in range(M) if m != j}
