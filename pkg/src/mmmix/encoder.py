"""Permutation-invariant point encoder with hand-written reverse pass.

Per point ``x``: ``r = relu(W2 relu(W1 x + b1) + b2)``; channelwise max over
points gives ``g``; ``y = W3 g + b3``; the feature is ``y / |y|``. Everything
is batched over a leading axis of clouds that share a point count.

Checkpoints are MMCK files: magic ``MMCK``, u16 version, u32 h, u32 d, then
W1, b1, W2, b2, W3, b3 row-major float64, u64 step counter and the float64
log-temperature of the owning stage.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ._binio import Reader, f64_bytes
from .errors import DegenerateError, DomainError, FormatError, ShapeError
from .geometry import PointCloud

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
MMCK_MAGIC = b"MMCK"
MMCK_VERSION = 1
MIN_NORM = 1e-12


@dataclass(eq=False)
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W3.shape[0]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(v.copy() for _, v in self.items()))

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(*(np.zeros_like(v) for _, v in self.items()))

    def validate(self) -> None:
        h, d = self.h, self.d
        want = {"W1": (h, 3), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (d, h), "b3": (d,)}
        for name, arr in self.items():
            if arr.shape != want[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want[name]}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} has non-finite entries")

    def bytes_equal(self, other: "EncoderParams") -> bool:
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self.items(), other.items()))


def init_params(seed: int, h: int, d: int) -> EncoderParams:
    """He-initialized weights, zero biases."""
    if h < 4 or d < 4:
        raise DomainError(f"need h >= 4 and d >= 4, got h={h}, d={d}")
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))
    return EncoderParams(
        W1=rng.normal(0.0, np.sqrt(2.0 / 3), size=(h, 3)),
        b1=np.zeros(h),
        W2=rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h)),
        b2=np.zeros(h),
        W3=rng.normal(0.0, np.sqrt(2.0 / h), size=(d, h)),
        b3=np.zeros(d),
    )


@dataclass(eq=False)
class ForwardTape:
    params: EncoderParams
    x: np.ndarray         # (B, N, 3)
    a1: np.ndarray        # (B, N, h) pre-activation, layer 1
    h1: np.ndarray
    a2: np.ndarray        # (B, N, h) pre-activation, layer 2
    r: np.ndarray
    winners: np.ndarray   # (B, h) point index of each channel max
    pooled: np.ndarray    # (B, h)
    y: np.ndarray         # (B, d) before normalization
    norm: np.ndarray      # (B,)
    feature: np.ndarray   # (B, d)
    single: bool = False


def forward_batch(points: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"expected a (B, N, 3) stack of clouds, got {x.shape}")
    a1 = x @ params.W1.T + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.W2.T + params.b2
    r = np.maximum(a2, 0.0)
    # argmax returns the first maximum: the smallest point index wins ties
    winners = np.argmax(r, axis=1)
    pooled = np.take_along_axis(r, winners[:, None, :], axis=1)[:, 0, :]
    y = pooled @ params.W3.T + params.b3
    norm = np.sqrt((y**2).sum(axis=1))
    if np.any(norm <= MIN_NORM):
        bad = int(np.argmin(norm))
        raise DegenerateError(f"encoder output of cloud {bad} has norm {norm[bad]:.3g}; the network is dead")
    feature = y / norm[:, None]
    return feature, ForwardTape(params, x, a1, h1, a2, r, winners, pooled, y, norm, feature)


def forward(pc: PointCloud | np.ndarray, params: EncoderParams) -> tuple[np.ndarray, ForwardTape]:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    feats, tape = forward_batch(pts[None], params)
    tape.single = True
    return feats[0], tape


def encode(clouds, params: EncoderParams, chunk: int = 256) -> np.ndarray:
    """Features for a sequence of equally sized clouds, without tapes."""
    pts = np.stack([pc.points for pc in clouds])
    out = [forward_batch(pts[k:k + chunk], params)[0] for k in range(0, len(pts), chunk)]
    return np.concatenate(out) if out else np.zeros((0, params.d))


def backward(tape: ForwardTape, upstream: np.ndarray, input_grads: bool = False):
    """Exact gradients of a scalar loss given ``dL/dfeature``.

    Returns ``(grads, dx)`` where ``grads`` mirrors :class:`EncoderParams` and
    ``dx`` is ``dL/dpoints`` (``None`` unless ``input_grads``).
    """
    p = tape.params
    u = np.asarray(upstream, dtype=np.float64)
    if u.ndim == 1:
        u = u[None]
    b, n, _ = tape.x.shape
    if u.shape != (b, p.d) or tape.a1.shape[2] != p.h or tape.y.shape[1] != p.d:
        raise ShapeError(f"upstream {u.shape} does not match tape of {b} clouds with d={p.d}")
    f = tape.feature
    dy = (u - f * (f * u).sum(axis=1, keepdims=True)) / tape.norm[:, None]
    dW3 = dy.T @ tape.pooled
    db3 = dy.sum(axis=0)
    dg = dy @ p.W3

    rows = np.arange(b)[:, None]
    cols = np.arange(p.h)[None, :]
    alive = tape.a2[rows, tape.winners, cols] > 0.0
    da2_win = np.where(alive, dg, 0.0)                      # (B, h)
    h1_win = tape.h1[rows, tape.winners]                    # (B, h, h): channel, input unit
    dW2 = np.einsum("bc,bck->ck", da2_win, h1_win)
    db2 = da2_win.sum(axis=0)

    da2 = np.zeros_like(tape.a2)
    da2[rows, tape.winners, cols] = da2_win
    dh1 = da2 @ p.W2
    da1 = np.where(tape.a1 > 0.0, dh1, 0.0)
    dW1 = np.einsum("bnh,bnk->hk", da1, tape.x)
    db1 = da1.sum(axis=(0, 1))
    grads = EncoderParams(dW1, db1, dW2, db2, dW3, db3)
    dx = None
    if input_grads:
        dx = da1 @ p.W1
        if tape.single:
            dx = dx[0]
    return grads, dx


def activation_pattern(tape: ForwardTape) -> bytes:
    """Fingerprint of the ReLU masks and pooling winners.

    Finite differences are only meaningful between points that share it.
    """
    return (np.packbits(tape.a1 > 0).tobytes() + np.packbits(tape.a2 > 0).tobytes()
            + tape.winners.astype(np.int64).tobytes())


def encode_checkpoint(params: EncoderParams, rho: float, step: int) -> bytes:
    params.validate()
    parts = [MMCK_MAGIC, struct.pack("<HII", MMCK_VERSION, params.h, params.d)]
    parts += [f64_bytes(arr) for _, arr in params.items()]
    parts.append(struct.pack("<Qd", int(step), float(rho)))
    return b"".join(parts)


def decode_checkpoint(data: bytes, hidden: int | None = None, dim: int | None = None):
    r = Reader(data)
    r.magic(MMCK_MAGIC)
    r.version(MMCK_VERSION)
    h, d = r.unpack("II", "shape header")
    if h < 1 or d < 1:
        raise FormatError(f"invalid shape h={h}, d={d}", 6)
    if (hidden is not None and h != hidden) or (dim is not None and d != dim):
        raise ShapeError(f"checkpoint has h={h}, d={d}; configuration expects h={hidden}, d={dim}")
    expected = 4 + 2 + 8 + 8 * (3 * h + h + h * h + h + d * h + d) + 8 + 8
    if len(data) != expected:
        raise FormatError(f"checkpoint length mismatch: expected {expected} bytes, got {len(data)}",
                          min(len(data), expected))
    shapes = [(h, 3), (h,), (h, h), (h,), (d, h), (d,)]
    arrays = []
    for name, shape in zip(PARAM_NAMES, shapes):
        at = r.pos
        arr = r.f64(int(np.prod(shape)), name).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{name} contains non-finite values", at)
        arrays.append(arr)
    step, rho = r.unpack("Qd", "step counter and temperature")
    r.finish()
    return EncoderParams(*arrays), rho, step


def save_checkpoint(params: EncoderParams, rho: float, step: int, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, rho, step))


def load_checkpoint(path, hidden: int | None = None, dim: int | None = None):
    """Returns ``(params, rho, step)``."""
    return decode_checkpoint(Path(path).read_bytes(), hidden, dim)
