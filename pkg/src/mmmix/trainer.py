"""Two-stage mixing-alignment training loop.

Stage 1 aligns a trainable point encoder with frozen image/text embeddings,
optionally after feature-level mixing of all three modalities. Stage 2 trains
a fresh encoder on input-mixed clouds against mixed targets from the frozen
stage-1 encoder and the caches. ``stage_mode = one`` trains both encoders at
once, with stage-2 targets taken from the live stage-1 encoder.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _rng
from .config import TrainConfig
from .encoder import EncoderParams, backward, forward_batch, init_params
from .errors import CacheError, DomainError, NumericError
from .frozen import EmbeddingCache
from .geometry import PointCloud, fps_batch, stack_points
from .losses import Temperature, contrastive_loss
from .mixing import (MixedPair, MixLog, build_mask, input_mix_points, make_pairing, mix_batch,
                     mix_batch_backward, sample_lambda)
from .optim import AdamWState, adamw_step, lr_at

# re-exported: the optimizer is part of the training surface
__all__ = ["StepLog", "TrainData", "train_stage1", "train_stage2", "train_one_stage", "lr_at", "adamw_step",
           "AdamWState", "init_seed", "stage1_objective", "stage2_objective", "prepare_stage2_batch"]

log = logging.getLogger(__name__)


@dataclass
class StepLog:
    rows: list[tuple] = field(default_factory=list)   # epoch, step, stage, loss, tau, lr
    mix: MixLog = field(default_factory=MixLog)

    def losses(self, stage: str | None = None) -> list[float]:
        return [r[3] for r in self.rows if stage is None or r[2] == stage]

    def write(self, loss_path, pairs_path) -> None:
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "stage", "loss", "tau", "lr"])
            for epoch, step, stage, loss, tau, lr in self.rows:
                w.writerow([epoch, step, stage, repr(loss), repr(tau), repr(lr)])
        with open(pairs_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "i", "j", "lambda", "n_from_first", "N", "stage", "modality"])
            for step, i, j, lam, nff, n, stage, modality in self.mix.rows:
                w.writerow([step, i, j, repr(lam), "" if nff is None else nff, "" if n is None else n,
                            stage, modality])


@dataclass(eq=False)
class TrainData:
    """Dataset arrays aligned with the caches, in dataset order."""

    ids: np.ndarray
    labels: np.ndarray
    points: np.ndarray   # (K, N, 3)
    image: np.ndarray    # (K, d)
    text: np.ndarray     # (K, d)

    @classmethod
    def build(cls, dataset: Sequence[PointCloud], text_cache: EmbeddingCache,
              image_cache: EmbeddingCache, dim: int) -> "TrainData":
        ids = np.array([pc.id for pc in dataset], dtype=np.int64)
        for cache in (text_cache, image_cache):
            if cache.dim != dim:
                raise DomainError(f"{cache.modality} cache has dim {cache.dim}, model expects {dim}")
            missing = cache.covers(ids)
            if missing:
                raise CacheError(f"{cache.modality} cache is missing {len(missing)} ids, e.g. {missing[:5]}")
        return cls(ids, np.array([pc.class_id for pc in dataset]), stack_points(dataset),
                   image_cache.matrix(ids), text_cache.matrix(ids))

    def __len__(self) -> int:
        return len(self.ids)


def init_seed(cfg: TrainConfig, stage: int) -> int:
    return _rng.derive_seed(cfg.seed, "init", stage)


def _batches(cfg: TrainConfig, k: int, stage: str, epoch: int):
    order = _rng.stream(cfg.seed, "shuffle", stage, epoch).permutation(k)
    n = cfg.batch_size
    # the final short batch is dropped
    for b in range(k // n):
        yield b, order[b * n:(b + 1) * n]


def _opt_tensors(params: EncoderParams, rho_box: np.ndarray) -> dict[str, np.ndarray]:
    tensors = dict(params.items())
    tensors["rho"] = rho_box
    return tensors


def _apply_update(params, temp: Temperature, state: AdamWState, grads: EncoderParams, drho: float,
                  lr: float, cfg: TrainConfig) -> None:
    rho_box = np.array(temp.rho)
    g = dict(grads.items())
    g["rho"] = np.array(drho)
    adamw_step(_opt_tensors(params, rho_box), g, state, lr, cfg.weight_decay)
    temp.rho = float(rho_box)
    temp.clamp()


def _check_loss(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"loss became {loss} at step {step + 1}; last good step {step}", step=step)


# --- stage 1 ------------------------------------------------------------------


def _feature_pairs(cfg: TrainConfig, n: int, stage: str, epoch: int, batch: int) -> list[MixedPair]:
    pi = make_pairing(n, _rng.stream(cfg.seed, "pairing", stage, epoch, batch))
    lam_rng = _rng.stream(cfg.seed, "lambda", stage, epoch, batch)
    return [MixedPair(i, int(pi[i]), sample_lambda(cfg.beta, lam_rng)) for i in range(n)]


def stage1_objective(params: EncoderParams, tau: float, points: np.ndarray, image: np.ndarray, text: np.ndarray,
                     pairs: list[MixedPair] | None, cfg: TrainConfig, mixlog: MixLog | None = None,
                     step: int = 0, stage: str = "1"):
    """Stage-1 loss for one batch and its gradients ``(loss, param_grads, dL/dtau)``."""
    fP, tape = forward_batch(points, params)
    feats = {"P": fP, "I": image, "T": text}
    mixes = {}
    if pairs is not None:
        for key in ("P", "I", "T"):
            mixes[key] = mix_batch(feats[key], pairs, cfg.renormalize_mixed, mixlog, step, stage, key)
            feats[key] = mixes[key].mixed
    loss, grads, dtau = contrastive_loss(feats, tau, 1, tuple(cfg.loss_terms), cfg.literal_eq4)
    gP = grads["P"]
    if pairs is not None:
        gP = mix_batch_backward(gP, mixes["P"], pairs, len(points))
    pgrads, _ = backward(tape, gP)
    return loss, pgrads, dtau


def train_stage1(cfg: TrainConfig, dataset, text_cache: EmbeddingCache, image_cache: EmbeddingCache,
                 steplog: StepLog | None = None):
    """Returns ``(theta1, temperature, steplog)``."""
    data = dataset if isinstance(dataset, TrainData) else TrainData.build(dataset, text_cache, image_cache, cfg.dim)
    steplog = steplog if steplog is not None else StepLog()
    params = init_params(init_seed(cfg, 1), cfg.hidden, cfg.dim)
    temp = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    state = AdamWState()
    step = 0
    for epoch in range(cfg.epochs_stage1):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma)
        for b, idx in _batches(cfg, len(data), "1", epoch):
            pairs = _feature_pairs(cfg, len(idx), "1", epoch, b) if cfg.uses_fm else None
            loss, grads, dtau = stage1_objective(params, temp.tau, data.points[idx], data.image[idx],
                                                 data.text[idx], pairs, cfg, steplog.mix, step + 1, "1")
            _check_loss(loss, step)
            _apply_update(params, temp, state, grads, dtau * temp.tau, lr, cfg)
            step += 1
            steplog.rows.append((epoch, step, "1", loss, temp.tau, lr))
        log.info("stage 1 epoch %d loss %.4f tau %.4f", epoch, steplog.rows[-1][3] if steplog.rows else float("nan"),
                 temp.tau)
    return params, temp, steplog


# --- stage 2 ------------------------------------------------------------------


@dataclass(eq=False)
class Stage2Batch:
    mixed_points: np.ndarray           # (n, fps_points, 3)
    pairs: list[MixedPair]
    targets: dict[str, np.ndarray]     # mixed P, I, T targets


def prepare_stage2_batch(cfg: TrainConfig, points: np.ndarray, point_feats: np.ndarray, image: np.ndarray,
                         text: np.ndarray, stage: str, epoch: int, batch: int,
                         mixlog: MixLog | None = None, step: int = 0) -> Stage2Batch:
    """Subsample, pair, input-mix and build the matching mixed targets.

    All four modalities use the same pairs and the realized mask proportion.
    Without input mixing every mask is all ones, so each sample is paired with
    itself in effect (``lambda = 1``).
    """
    n = len(points)
    big_n = points.shape[1]
    m = cfg.fps_points
    if m > big_n:
        raise DomainError(f"fps_points {m} exceeds the {big_n} points per cloud")
    starts = _rng.stream(cfg.seed, "fps", stage, epoch, batch).integers(0, big_n, size=n)
    order = fps_batch(points, m, starts)
    sub = np.take_along_axis(points, order[:, :, None], axis=1)
    pi = make_pairing(n, _rng.stream(cfg.seed, "pairing", stage, epoch, batch))
    lam_rng = _rng.stream(cfg.seed, "lambda", stage, epoch, batch)
    mask_rng = _rng.stream(cfg.seed, "masks", stage, epoch, batch)
    masks = np.empty((n, m), dtype=np.uint8)
    pairs = []
    for i in range(n):
        lam = sample_lambda(cfg.beta, lam_rng) if cfg.uses_im else 1.0
        mask = build_mask(m, lam, mask_rng)
        masks[i] = mask.s
        pairs.append(MixedPair(i, int(pi[i]), mask.realized_lambda, mask))
    mixed = input_mix_points(sub, sub[pi], masks)
    if mixlog is not None:
        mixlog.record(step, stage, "M", pairs)
    targets = {}
    for key, feats in (("P", point_feats), ("I", image), ("T", text)):
        targets[key] = mix_batch(feats, pairs, cfg.renormalize_mixed, mixlog, step, stage, key).mixed
    return Stage2Batch(mixed, pairs, targets)


def stage2_objective(params: EncoderParams, tau: float, batch: Stage2Batch, cfg: TrainConfig):
    """Stage-2 loss for one prepared batch and its gradients ``(loss, param_grads, dL/dtau)``."""
    fM, tape = forward_batch(batch.mixed_points, params)
    feats = {"M": fM, **batch.targets}
    loss, grads, dtau = contrastive_loss(feats, tau, 2, tuple(cfg.loss_terms), cfg.literal_eq4)
    pgrads, _ = backward(tape, grads["M"])
    return loss, pgrads, dtau


def train_stage2(cfg: TrainConfig, dataset, text_cache: EmbeddingCache, image_cache: EmbeddingCache,
                 theta1: EncoderParams, steplog: StepLog | None = None):
    """Returns ``(theta2, temperature, steplog)``; ``theta1`` is only read."""
    data = dataset if isinstance(dataset, TrainData) else TrainData.build(dataset, text_cache, image_cache, cfg.dim)
    steplog = steplog if steplog is not None else StepLog()
    point_feats = encode_points(data.points, theta1)
    params = init_params(init_seed(cfg, 2), cfg.hidden, cfg.dim)
    temp = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    state = AdamWState()
    step = 0
    for epoch in range(cfg.epochs_stage2):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma)
        for b, idx in _batches(cfg, len(data), "2", epoch):
            batch = prepare_stage2_batch(cfg, data.points[idx], point_feats[idx], data.image[idx], data.text[idx],
                                         "2", epoch, b, steplog.mix, step + 1)
            loss, grads, dtau = stage2_objective(params, temp.tau, batch, cfg)
            _check_loss(loss, step)
            _apply_update(params, temp, state, grads, dtau * temp.tau, lr, cfg)
            step += 1
            steplog.rows.append((epoch, step, "2", loss, temp.tau, lr))
        log.info("stage 2 epoch %d loss %.4f tau %.4f", epoch, steplog.rows[-1][3] if steplog.rows else float("nan"),
                 temp.tau)
    return params, temp, steplog


def encode_points(points: np.ndarray, params: EncoderParams, chunk: int = 200) -> np.ndarray:
    out = [forward_batch(points[k:k + chunk], params)[0] for k in range(0, len(points), chunk)]
    return np.concatenate(out) if out else np.zeros((0, params.d))


def train_one_stage(cfg: TrainConfig, dataset, text_cache: EmbeddingCache, image_cache: EmbeddingCache,
                    steplog: StepLog | None = None):
    """Both encoders trained together for ``epochs_stage1 + epochs_stage2`` epochs.

    Each step minimizes the stage-1 loss in ``theta1`` and the stage-2 loss in
    ``theta2``; stage-2 point targets come from the current ``theta1`` and
    carry no gradient into it. Returns ``(theta1, temp1, theta2, temp2, steplog)``.
    """
    data = dataset if isinstance(dataset, TrainData) else TrainData.build(dataset, text_cache, image_cache, cfg.dim)
    steplog = steplog if steplog is not None else StepLog()
    p1 = init_params(init_seed(cfg, 1), cfg.hidden, cfg.dim)
    p2 = init_params(init_seed(cfg, 2), cfg.hidden, cfg.dim)
    t1 = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    t2 = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    s1, s2 = AdamWState(), AdamWState()
    step = 0
    for epoch in range(cfg.epochs_stage1 + cfg.epochs_stage2):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma)
        for b, idx in _batches(cfg, len(data), "one", epoch):
            pts, img, txt = data.points[idx], data.image[idx], data.text[idx]
            pairs = _feature_pairs(cfg, len(idx), "one-1", epoch, b) if cfg.uses_fm else None
            live = encode_points(pts, p1)
            batch2 = prepare_stage2_batch(cfg, pts, live, img, txt, "one-2", epoch, b, steplog.mix, step + 1)
            loss1, g1, dt1 = stage1_objective(p1, t1.tau, pts, img, txt, pairs, cfg, steplog.mix, step + 1, "one-1")
            loss2, g2, dt2 = stage2_objective(p2, t2.tau, batch2, cfg)
            _check_loss(loss1 + loss2, step)
            _apply_update(p1, t1, s1, g1, dt1 * t1.tau, lr, cfg)
            _apply_update(p2, t2, s2, g2, dt2 * t2.tau, lr, cfg)
            step += 1
            steplog.rows.append((epoch, step, "one-1", loss1, t1.tau, lr))
            steplog.rows.append((epoch, step, "one-2", loss2, t2.tau, lr))
    return p1, t1, p2, t2, steplog
