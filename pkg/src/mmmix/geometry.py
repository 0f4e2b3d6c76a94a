"""Point-cloud primitives: synthetic surfaces, normalization, farthest point sampling.

Also holds the MMPD dataset container (magic ``MMPD``, u16 version, u32 count,
then per record u64 id, u16 class_id, u32 n_points and ``n_points * 3``
little-endian float64 coordinates).
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

from . import _rng
from ._binio import Reader, f64_bytes
from .errors import DegenerateError, DomainError, FormatError

SHAPE_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "disc", "dumbbell", "helix")
NUM_SHAPES = len(SHAPE_NAMES)
MIN_POINTS = 8

MMPD_MAGIC = b"MMPD"
MMPD_VERSION = 1


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    class_id: int
    id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise DomainError(f"points must have shape (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        if self.class_id < 0:
            raise DomainError(f"class_id must be non-negative, got {self.class_id}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.class_id, self.id)


# --- surface samplers -------------------------------------------------------
# Each returns k points on the raw (un-normalized) surface. Centrally symmetric
# surfaces are sampled in antithetic pairs (x, -x) so their centroid is exactly
# the origin before jitter.


def _unit_vectors(rng, k):
    v = rng.standard_normal((k, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, k):
    return _unit_vectors(rng, k)


def _cube(rng, k):
    face = rng.integers(0, 6, size=k)
    uv = rng.uniform(-1.0, 1.0, size=(k, 2))
    out = np.empty((k, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        out[rows, a] = sign[rows]
        out[rows, others[0]] = uv[rows, 0]
        out[rows, others[1]] = uv[rows, 1]
    return out


def _cylinder(rng, k):
    # radius 1, height 2; lateral area 4*pi vs caps 2*pi
    lateral = rng.uniform(size=k) < 2.0 / 3.0
    theta = rng.uniform(0.0, 2 * np.pi, size=k)
    z = rng.uniform(-1.0, 1.0, size=k)
    rad = np.sqrt(rng.uniform(size=k))
    cap_z = np.where(rng.uniform(size=k) < 0.5, 1.0, -1.0)
    r = np.where(lateral, 1.0, rad)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), np.where(lateral, z, cap_z)])


def _cone(rng, k):
    # apex (0,0,1), base radius 1 at z=-1
    slant = np.sqrt(5.0)
    lateral = rng.uniform(size=k) < slant / (slant + 1.0)
    theta = rng.uniform(0.0, 2 * np.pi, size=k)
    w = np.sqrt(rng.uniform(size=k))
    base_r = np.sqrt(rng.uniform(size=k))
    r = np.where(lateral, w, base_r)
    z = np.where(lateral, 1.0 - 2.0 * w, -1.0)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _torus(rng, k, big=1.0, small=0.4):
    out = np.empty((0, 3))
    while out.shape[0] < k:
        m = 2 * (k - out.shape[0]) + 8
        theta = rng.uniform(0.0, 2 * np.pi, size=m)
        phi = rng.uniform(0.0, 2 * np.pi, size=m)
        keep = rng.uniform(size=m) * (big + small) <= big + small * np.cos(phi)
        theta, phi = theta[keep], phi[keep]
        ring = big + small * np.cos(phi)
        pts = np.column_stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)])
        out = np.vstack([out, pts])
    return out[:k]


def _disc(rng, k):
    r = np.sqrt(rng.uniform(size=k))
    theta = rng.uniform(0.0, 2 * np.pi, size=k)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros(k)])


def _dumbbell(rng, k, radius=0.6, offset=1.0):
    side = np.where(rng.uniform(size=k) < 0.5, 1.0, -1.0)
    pts = radius * _unit_vectors(rng, k)
    pts[:, 0] += side * offset
    return pts


def _helix(rng, k, turns=2.0, pitch=0.25, tube=0.15):
    t = rng.uniform(0.0, 2 * np.pi * turns, size=k)
    alpha = rng.uniform(0.0, 2 * np.pi, size=k)
    centre = np.column_stack([np.cos(t), np.sin(t), pitch * (t - np.pi * turns)])
    tangent = np.column_stack([-np.sin(t), np.cos(t), np.full(k, pitch)]) / np.sqrt(1 + pitch**2)
    normal = np.column_stack([-np.cos(t), -np.sin(t), np.zeros(k)])
    binormal = np.cross(tangent, normal)
    return centre + tube * (np.cos(alpha)[:, None] * normal + np.sin(alpha)[:, None] * binormal)


_SAMPLERS: tuple[tuple[Callable, bool], ...] = (
    (_sphere, True),
    (_cube, True),
    (_cylinder, True),
    (_cone, False),
    (_torus, True),
    (_disc, True),
    (_dumbbell, True),
    (_helix, False),
)


def _rng_for_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def gen_shape(class_id: int, n_points: int, seed: int, jitter_sigma: float = 0.0, sample_id: int = 0) -> PointCloud:
    """Sample ``n_points`` from built-in surface ``class_id`` and normalize.

    Deterministic in ``(class_id, n_points, seed, jitter_sigma)``.
    """
    if not 0 <= class_id < NUM_SHAPES:
        raise DomainError(f"unknown class_id {class_id}; expected 0..{NUM_SHAPES - 1}")
    if n_points < MIN_POINTS:
        raise DomainError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    if jitter_sigma < 0:
        raise DomainError(f"jitter_sigma must be non-negative, got {jitter_sigma}")
    rng = _rng_for_seed(seed)
    sampler, symmetric = _SAMPLERS[class_id]
    if symmetric:
        half = sampler(rng, (n_points + 1) // 2)
        pts = np.vstack([half[: n_points // 2], -half[: n_points // 2], half[n_points // 2:]])
    else:
        pts = sampler(rng, n_points)
    if jitter_sigma > 0:
        pts = pts + rng.normal(0.0, jitter_sigma, size=pts.shape)
    return normalize_unit_sphere(PointCloud(pts, class_id, sample_id))


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    centred = pc.points - pc.points.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius == 0.0:
        raise DegenerateError("cannot normalize a cloud whose points are all identical")
    return pc.with_points(centred / radius)


def _as_points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def fps(pc, m: int, start_index: int) -> np.ndarray:
    """Greedy farthest point sampling.

    Each pick maximizes the minimum Euclidean distance to the points already
    chosen; ties go to the smallest index. Returns ``m`` distinct indices
    starting with ``start_index``.
    """
    pts = _as_points(pc)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise DomainError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start_index < n:
        raise DomainError(f"start_index {start_index} out of range for N={n}")
    # squared distances give the same argmax as distances
    mind = ((pts - pts[start_index]) ** 2).sum(axis=1)
    mind[start_index] = -1.0
    out = np.empty(m, dtype=np.int64)
    out[0] = start_index
    for k in range(1, m):
        nxt = int(np.argmax(mind))
        out[k] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
        mind[out[: k + 1]] = -1.0
    return out


@numba.njit(cache=True)
def _fps_kernel(pts, m, starts, out):
    b, n, _ = pts.shape
    mind = np.empty(n)
    for r in range(b):
        s = starts[r]
        out[r, 0] = s
        for i in range(n):
            dx = pts[r, i, 0] - pts[r, s, 0]
            dy = pts[r, i, 1] - pts[r, s, 1]
            dz = pts[r, i, 2] - pts[r, s, 2]
            mind[i] = dx * dx + dy * dy + dz * dz
        mind[s] = -1.0
        for k in range(1, m):
            best = 0
            for i in range(1, n):
                if mind[i] > mind[best]:
                    best = i
            out[r, k] = best
            mind[best] = -1.0
            for i in range(n):
                if mind[i] >= 0.0:
                    dx = pts[r, i, 0] - pts[r, best, 0]
                    dy = pts[r, i, 1] - pts[r, best, 1]
                    dz = pts[r, i, 2] - pts[r, best, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < mind[i]:
                        mind[i] = d


def fps_batch(points: np.ndarray, m: int, starts: Sequence[int]) -> np.ndarray:
    """:func:`fps` applied to each cloud of a ``(B, N, 3)`` stack; returns ``(B, m)``."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    b, n, _ = pts.shape
    starts = np.asarray(starts, dtype=np.int64)
    if not 1 <= m <= n:
        raise DomainError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if starts.shape != (b,) or np.any(starts < 0) or np.any(starts >= n):
        raise DomainError("one start index in [0, N) is required per cloud")
    out = np.empty((b, m), dtype=np.int64)
    _fps_kernel(pts, m, starts, out)
    return out


# --- datasets -----------------------------------------------------------------


def sample_seed(seed: int, sample_id: int) -> int:
    return _rng.derive_seed(seed, "data", sample_id)


def make_dataset(seed: int, size: int, num_classes: int, n_points: int, jitter: float,
                 id_offset: int = 0, threads: int = 1) -> list[PointCloud]:
    """Round-robin class assignment; sample ``k`` gets id ``id_offset + k``.

    Each sample has its own seed so the result does not depend on ``threads``.
    """
    if not 1 <= num_classes <= NUM_SHAPES:
        raise DomainError(f"num_classes must be in 1..{NUM_SHAPES}, got {num_classes}")

    def one(k: int) -> PointCloud:
        sid = id_offset + k
        return gen_shape(k % num_classes, n_points, sample_seed(seed, sid), jitter, sample_id=sid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(size)))
    return [one(k) for k in range(size)]


def stack_points(clouds: Sequence[PointCloud]) -> np.ndarray:
    sizes = {pc.n for pc in clouds}
    if len(sizes) > 1:
        raise DomainError(f"clouds have differing sizes {sorted(sizes)}")
    return np.stack([pc.points for pc in clouds])


def encode_mmpd(clouds: Sequence[PointCloud]) -> bytes:
    parts = [MMPD_MAGIC, struct.pack("<HI", MMPD_VERSION, len(clouds))]
    for pc in clouds:
        parts.append(struct.pack("<QHI", pc.id, pc.class_id, pc.n))
        parts.append(f64_bytes(pc.points))
    return b"".join(parts)


def decode_mmpd(data: bytes) -> list[PointCloud]:
    r = Reader(data)
    r.magic(MMPD_MAGIC)
    r.version(MMPD_VERSION)
    count = r.unpack("I", "record count")
    out = []
    seen: set[int] = set()
    for k in range(count):
        at = r.pos
        sid, cls, n = r.unpack("QHI", f"header of record {k}")
        if sid in seen:
            raise FormatError(f"duplicate sample id {sid}", at)
        seen.add(sid)
        pts_at = r.pos
        flat = r.f64(3 * n, f"points of record {k}")
        try:
            out.append(PointCloud(flat.reshape(n, 3), cls, sid))
        except DomainError as exc:
            raise FormatError(f"invalid record {k}: {exc}", pts_at) from None
    r.finish()
    return out


def save_mmpd(clouds: Sequence[PointCloud], path) -> None:
    Path(path).write_bytes(encode_mmpd(clouds))


def load_mmpd(path) -> list[PointCloud]:
    return decode_mmpd(Path(path).read_bytes())
