"""Frozen stand-ins for the image and text towers, and the embedding cache.

Every class owns one unit anchor in the shared latent space. Text embeddings
are the anchor itself; image embeddings are the anchor plus seeded Gaussian
noise, renormalized. Caches persist as MMEC files: magic ``MMEC``, u16
version, u8 modality, u32 count, u32 dim, then ``count`` records of
(u64 id, ``dim`` float64) sorted by id, all little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import _rng
from ._binio import Reader, f64_bytes
from .errors import CacheError, ConstructionError, DomainError, FormatError

MODALITIES = ("text", "image", "point")
MMEC_MAGIC = b"MMEC"
MMEC_VERSION = 1
MAX_ANCHOR_DOT = 0.5
ANCHOR_RETRIES = 100
LOAD_NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SyntheticModalityModel:
    dim: int
    num_classes: int
    anchors: np.ndarray
    sigma_image: float
    master_seed: int


def build_model(master_seed: int, num_classes: int, dim: int, sigma_image: float) -> SyntheticModalityModel:
    if dim < 8 or num_classes < 2:
        raise DomainError(f"need dim >= 8 and num_classes >= 2, got dim={dim}, C={num_classes}")
    if sigma_image < 0:
        raise DomainError(f"sigma_image must be non-negative, got {sigma_image}")
    for attempt in range(ANCHOR_RETRIES):
        rng = _rng.stream(master_seed, "anchors", attempt)
        a = rng.standard_normal((num_classes, dim))
        a /= np.sqrt((a**2).sum(axis=1, keepdims=True))
        gram = a @ a.T
        np.fill_diagonal(gram, -np.inf)
        if gram.max() <= MAX_ANCHOR_DOT:
            a.flags.writeable = False
            return SyntheticModalityModel(dim, num_classes, a, float(sigma_image), int(master_seed))
    raise ConstructionError(
        f"no anchor set with pairwise dot <= {MAX_ANCHOR_DOT} after {ANCHOR_RETRIES} draws; "
        f"dim={dim} is too small for {num_classes} classes"
    )


def _check_class(model: SyntheticModalityModel, class_id: int) -> None:
    if not 0 <= class_id < model.num_classes:
        raise DomainError(f"class {class_id} out of range for {model.num_classes} classes")


def embed_text(model: SyntheticModalityModel, class_id: int) -> np.ndarray:
    _check_class(model, class_id)
    return model.anchors[class_id].copy()


def embed_image(model: SyntheticModalityModel, class_id: int, instance_seed: int) -> np.ndarray:
    _check_class(model, class_id)
    rng = _rng.stream(model.master_seed, "image", class_id, instance_seed)
    v = model.anchors[class_id] + model.sigma_image * rng.standard_normal(model.dim)
    return v / np.sqrt(v @ v)


@dataclass(eq=False)
class EmbeddingCache:
    modality: str
    dim: int
    entries: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DomainError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self, ids: Iterable[int]) -> np.ndarray:
        try:
            return np.stack([self.entries[int(i)] for i in ids])
        except KeyError as exc:
            raise CacheError(f"{self.modality} cache has no entry for id {exc.args[0]}") from None

    def covers(self, ids: Iterable[int]) -> list[int]:
        return [int(i) for i in ids if int(i) not in self.entries]

    def same_as(self, other: "EmbeddingCache") -> bool:
        return encode_cache(self) == encode_cache(other)


def image_seed(master_seed: int, sample_id: int) -> int:
    return _rng.derive_seed(master_seed, "image-instance", sample_id)


def precache(dataset, model: SyntheticModalityModel, modality: str,
             per_instance_seeds: Mapping[int, int] | None = None) -> EmbeddingCache:
    """Embed ``(id, class_id)`` pairs with the frozen model of ``modality``.

    Image instances default to seeds derived from the model's master seed.
    """
    if modality not in ("text", "image"):
        raise DomainError(f"frozen model provides text and image embeddings, not {modality!r}")
    cache = EmbeddingCache(modality, model.dim)
    for sid, cls in dataset:
        sid = int(sid)
        if sid in cache.entries:
            raise CacheError(f"duplicate id {sid}")
        if modality == "text":
            vec = embed_text(model, cls)
        else:
            seed = per_instance_seeds[sid] if per_instance_seeds is not None else image_seed(model.master_seed, sid)
            vec = embed_image(model, cls, seed)
        cache.entries[sid] = vec
    return cache


def encode_cache(cache: EmbeddingCache) -> bytes:
    ids = sorted(cache.entries)
    parts = [MMEC_MAGIC, struct.pack("<HBII", MMEC_VERSION, MODALITIES.index(cache.modality), len(ids), cache.dim)]
    for sid in ids:
        vec = np.asarray(cache.entries[sid], dtype=np.float64)
        if vec.shape != (cache.dim,):
            raise DomainError(f"entry {sid} has shape {vec.shape}, expected ({cache.dim},)")
        parts.append(struct.pack("<Q", sid))
        parts.append(f64_bytes(vec))
    return b"".join(parts)


def decode_cache(data: bytes) -> EmbeddingCache:
    r = Reader(data)
    r.magic(MMEC_MAGIC)
    r.version(MMEC_VERSION)
    at = r.pos
    mod = r.unpack("B", "modality")
    if mod >= len(MODALITIES):
        raise FormatError(f"unknown modality code {mod}", at)
    count = r.unpack("I", "count")
    dim = r.unpack("I", "dim")
    cache = EmbeddingCache(MODALITIES[mod], dim)
    prev = -1
    for k in range(count):
        at = r.pos
        sid = r.unpack("Q", f"id of record {k}")
        if sid <= prev:
            raise FormatError(f"ids not strictly ascending at record {k} (id {sid} after {prev})", at)
        prev = sid
        vec_at = r.pos
        vec = r.f64(dim, f"vector of record {k}")
        norm = float(np.sqrt(vec @ vec))
        if not abs(norm - 1.0) <= LOAD_NORM_TOL:
            raise FormatError(f"unit-norm violation: entry {sid} has norm {norm!r}", vec_at)
        cache.entries[sid] = vec
    r.finish()
    return cache


def save_cache(cache: EmbeddingCache, path) -> None:
    Path(path).write_bytes(encode_cache(cache))


def load_cache(path) -> EmbeddingCache:
    return decode_cache(Path(path).read_bytes())
