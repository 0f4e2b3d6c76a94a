"""Feature-level and input-level mixing with explicit RNG state.

A batch is mixed by one derangement ``pi``: sample ``i`` is paired with
``pi[i]``. The same pairs and proportions drive every modality of the batch,
and each use is appended to a :class:`MixLog` so that contract can be audited.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, DomainError
from .geometry import PointCloud


@dataclass(frozen=True, eq=False)
class MixMask:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.uint8)
        if s.ndim != 1 or np.any(s > 1):
            raise DomainError("mask must be a binary vector")
        s.flags.writeable = False
        object.__setattr__(self, "s", s)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @property
    def n_from_first(self) -> int:
        return int(self.s.sum(dtype=np.int64))

    @property
    def realized_lambda(self) -> float:
        return self.n_from_first / self.n


@dataclass(frozen=True)
class MixedPair:
    i: int
    j: int
    lam: float
    mask: MixMask | None = None

    def __post_init__(self):
        if self.mask is not None and self.lam != self.mask.realized_lambda:
            raise DomainError(f"lambda {self.lam} disagrees with mask proportion {self.mask.realized_lambda}")


@dataclass(frozen=True, eq=False)
class MixedCloud:
    points: np.ndarray
    classes: tuple[int, int]
    ids: tuple[int, int]
    mask: MixMask


def sample_lambda(beta: float, rng: np.random.Generator) -> float:
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    return float(rng.beta(beta, beta))


def make_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random derangement of ``range(n)`` by rejection."""
    if n < 2:
        raise DomainError(f"pairing needs at least 2 samples, got {n}")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def build_mask(n_points: int, lam: float, rng: np.random.Generator) -> MixMask:
    """Mask with exactly ``floor(lam * n_points)`` ones at uniform random positions."""
    if n_points < 1:
        raise DomainError(f"n_points must be positive, got {n_points}")
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    k = math.floor(lam * n_points)
    s = np.zeros(n_points, dtype=np.uint8)
    s[rng.choice(n_points, size=k, replace=False)] = 1
    return MixMask(s)


def input_mix(p1: PointCloud, p2: PointCloud, mask: MixMask) -> MixedCloud:
    if p1.n != mask.n or p2.n != mask.n:
        raise DomainError(f"mask length {mask.n} does not match clouds of {p1.n} and {p2.n} points")
    pts = np.where(mask.s[:, None] == 1, p1.points, p2.points)
    return MixedCloud(pts, (p1.class_id, p2.class_id), (p1.id, p2.id), mask)


def input_mix_points(a: np.ndarray, b: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Batched :func:`input_mix` on ``(B, N, 3)`` stacks with ``(B, N)`` masks."""
    return np.where(masks[..., None] == 1, a, b)


def feature_mix(f_i, f_j, lam: float, renormalize: bool = False) -> np.ndarray:
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise DomainError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    if not (np.all(np.isfinite(f_i)) and np.all(np.isfinite(f_j))):
        raise DomainError("features must be finite")
    m = lam * f_i + (1.0 - lam) * f_j
    if renormalize:
        norm = np.sqrt(m @ m)
        if norm == 0.0:
            raise DegenerateError("mixed feature is the zero vector")
        m = m / norm
    return m


@dataclass
class MixLog:
    """Per-modality mixing records, one row per sample use."""

    rows: list[tuple] = field(default_factory=list)

    def record(self, step: int, stage: str, modality: str, pairs: list[MixedPair]) -> None:
        for p in pairs:
            nff = p.mask.n_from_first if p.mask is not None else None
            n = p.mask.n if p.mask is not None else None
            self.rows.append((step, p.i, p.j, p.lam, nff, n, stage, modality))


@dataclass
class BatchMix:
    """Features mixed for a batch, with what backprop needs to undo the mix."""

    mixed: np.ndarray
    raw: np.ndarray
    norms: np.ndarray | None


def mix_batch(feats: np.ndarray, pairs: list[MixedPair], renormalize: bool,
              log: MixLog | None = None, step: int = 0, stage: str = "", modality: str = "") -> BatchMix:
    """Row ``i`` becomes ``lam_i * feats[i] + (1 - lam_i) * feats[j_i]``."""
    lam = np.array([p.lam for p in pairs])
    j = np.array([p.j for p in pairs])
    i = np.array([p.i for p in pairs])
    raw = lam[:, None] * feats[i] + (1.0 - lam[:, None]) * feats[j]
    norms = None
    mixed = raw
    if renormalize:
        norms = np.sqrt((raw**2).sum(axis=1))
        if np.any(norms == 0.0):
            raise DegenerateError(f"mixed feature of sample {int(i[np.argmin(norms)])} is the zero vector")
        mixed = raw / norms[:, None]
    if log is not None:
        log.record(step, stage, modality, pairs)
    return BatchMix(mixed, raw, norms)


def mix_batch_backward(grad_mixed: np.ndarray, bm: BatchMix, pairs: list[MixedPair], n: int) -> np.ndarray:
    """Gradient with respect to the unmixed rows, given the gradient of the mixed rows."""
    g = grad_mixed
    if bm.norms is not None:
        m = bm.mixed
        g = (g - m * (g * m).sum(axis=1, keepdims=True)) / bm.norms[:, None]
    out = np.zeros((n, g.shape[1]))
    # fixed accumulation order: ascending batch index
    for row, p in enumerate(pairs):
        out[p.i] += p.lam * g[row]
        out[p.j] += (1.0 - p.lam) * g[row]
    return out
