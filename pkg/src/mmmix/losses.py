"""Directional InfoNCE terms, the two stage losses, and the learnable temperature."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

# ordered (anchor, other) pairs per loss term, in fixed summation order
STAGE1_TERMS = {"image": (("P", "I"), ("I", "P")), "text": (("P", "T"), ("T", "P"))}
STAGE2_TERMS = {
    "image": (("M", "I"), ("I", "M")),
    "text": (("M", "T"), ("T", "M")),
    "point": (("M", "P"), ("P", "M")),
}
TERM_ORDER = ("image", "text", "point")
UNIT_TOL = 1e-9


@dataclass
class Temperature:
    """Learnable temperature stored as its logarithm ``rho``."""

    rho: float
    tau_min: float = 0.01
    tau_max: float = 100.0

    @classmethod
    def from_tau(cls, tau: float, tau_min: float = 0.01, tau_max: float = 100.0) -> "Temperature":
        if not 0 < tau_min <= tau <= tau_max:
            raise DomainError(f"need 0 < tau_min <= tau <= tau_max, got {tau_min}, {tau}, {tau_max}")
        return cls(math.log(tau), tau_min, tau_max)

    @property
    def tau(self) -> float:
        return min(max(math.exp(self.rho), self.tau_min), self.tau_max)

    def clamp(self) -> None:
        self.rho = min(max(self.rho, math.log(self.tau_min)), math.log(self.tau_max))


@dataclass(eq=False)
class BatchFeatures:
    mP: np.ndarray
    mI: np.ndarray
    mT: np.ndarray
    mM: np.ndarray | None = None

    def __post_init__(self):
        mats = self.as_dict()
        shapes = {m.shape for m in mats.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeError(f"modality matrices must share one (n, d) shape, got {sorted(shapes)}")

    @property
    def n(self) -> int:
        return self.mP.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"P": self.mP, "I": self.mI, "T": self.mT}
        if self.mM is not None:
            out["M"] = self.mM
        return out

    def check_unit(self, tol: float = UNIT_TOL) -> None:
        for key, m in self.as_dict().items():
            err = np.abs(np.sqrt((m**2).sum(axis=1)) - 1.0).max(initial=0.0)
            if err > tol:
                raise DomainError(f"rows of m{key} are not unit norm (max deviation {err:.3g})")


def similarity_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"similarity needs equal (n, d) shapes, got {x.shape} and {y.shape}")
    return x @ y.T


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(z - m).sum(axis=1))


def info_nce_dir_grad(sim: np.ndarray, tau: float, literal: bool = False) -> tuple[float, np.ndarray, float]:
    """Loss, ``dL/dsim`` and ``dL/dtau`` for one direction.

    The standard form uses row ``i``'s cross-similarities as negatives. With
    ``literal`` the denominator sums the paired (diagonal) terms only, the
    same for every row; kept for inspection, not for training.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise DomainError("similarity matrix has non-finite entries")
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    n = sim.shape[0]
    diag = np.diagonal(sim)
    if literal:
        z = diag / tau
        lse = _logsumexp_rows(z[None])[0]
        loss = float(np.mean(lse - z))
        p = np.exp(z - lse)
        dsim = np.diag((p - 1.0 / n) / tau)
    else:
        z = sim / tau
        lse = _logsumexp_rows(z)
        loss = float(np.mean(lse - diag / tau))
        p = np.exp(z - lse[:, None])
        dsim = (p - np.eye(n)) / (n * tau)
    dtau = -float((dsim * sim).sum()) / tau
    return loss, dsim, dtau


def info_nce_dir(sim: np.ndarray, tau: float, literal: bool = False) -> float:
    return info_nce_dir_grad(sim, tau, literal)[0]


def _directions(stage: int, terms) -> list[tuple[str, str]]:
    if stage not in (1, 2):
        raise DomainError(f"stage must be 1 or 2, got {stage}")
    table = STAGE1_TERMS if stage == 1 else STAGE2_TERMS
    unknown = set(terms) - set(TERM_ORDER)
    if unknown:
        raise DomainError(f"unknown loss terms {sorted(unknown)}")
    dirs = [d for t in TERM_ORDER if t in terms and t in table for d in table[t]]
    if not dirs:
        raise DomainError(f"no stage-{stage} loss term enabled among {sorted(terms)}")
    return dirs


def contrastive_loss(feats: dict[str, np.ndarray], tau: float, stage: int, terms=TERM_ORDER,
                     literal: bool = False) -> tuple[float, dict[str, np.ndarray], float]:
    """Mean of the enabled directional terms, gradients per modality and for ``tau``."""
    dirs = _directions(stage, terms)
    scale = 1.0 / len(dirs)
    grads = {k: np.zeros_like(v) for k, v in feats.items()}
    total = 0.0
    dtau = 0.0
    for a, b in dirs:
        sim = similarity_matrix(feats[a], feats[b])
        loss, dsim, dt = info_nce_dir_grad(sim, tau, literal)
        total += loss
        dtau += dt
        grads[a] += dsim @ feats[b]
        grads[b] += dsim.T @ feats[a]
    for g in grads.values():
        g *= scale
    return total * scale, grads, dtau * scale


def loss_stage1(mP, mI, mT, tau: float, terms=("image", "text"), literal: bool = False) -> float:
    return contrastive_loss({"P": mP, "I": mI, "T": mT}, tau, 1, terms, literal)[0]


def loss_stage2(mM, mP, mI, mT, tau: float, terms=TERM_ORDER, literal: bool = False) -> float:
    return contrastive_loss({"M": mM, "P": mP, "I": mI, "T": mT}, tau, 2, terms, literal)[0]


def loss_backward(batch: BatchFeatures, temperature: Temperature, which_stage: int, terms=TERM_ORDER,
                  literal: bool = False) -> tuple[dict[str, np.ndarray], float]:
    """Gradients for every feature row and for the log-temperature ``rho``.

    Rows of frozen modalities get gradients too; callers drop them.
    """
    feats = batch.as_dict()
    if which_stage == 2 and "M" not in feats:
        raise ShapeError("stage-2 loss needs the mixed-cloud features mM")
    tau = temperature.tau
    _, grads, dtau = contrastive_loss(feats, tau, which_stage, terms, literal)
    return grads, dtau * tau
