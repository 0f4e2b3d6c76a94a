"""Zero-shot classification, linear probing, cross-modal retrieval, feature export.

All rankings sort by descending dot product; ties go to the smaller class
index (classification) or the smaller gallery id (retrieval).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _rng
from .encoder import EncoderParams
from .errors import DomainError, ShapeError
from .geometry import PointCloud, stack_points
from .optim import AdamWState, adamw_step
from .trainer import encode_points


@dataclass
class EvalReport:
    protocol: str
    ks: list[int]
    overall: dict[int, float]
    per_class: dict[int, dict[int, float]]
    class_counts: dict[int, int]
    samples: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "ks": list(self.ks),
            "overall": {str(k): v for k, v in self.overall.items()},
            "per_class": {str(k): {str(c): a for c, a in pc.items()} for k, pc in self.per_class.items()},
            "class_counts": {str(c): n for c, n in self.class_counts.items()},
            "samples": self.samples,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        stem = stem or self.protocol
        jpath = out_dir / f"{stem}.json"
        cpath = out_dir / f"{stem}_samples.csv"
        jpath.write_text(self.to_json() + "\n")
        kmax = max(self.ks)
        rank_key, label = ("top_ids", "id") if self.samples and "top_ids" in self.samples[0] else ("top_classes", "class")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "true_class"] + [f"rank{r}_{label}" for r in range(1, kmax + 1)]
                       + [f"rank{r}_score" for r in range(1, kmax + 1)])
            for s in self.samples:
                w.writerow([s["id"], s["true_class"]] + s[rank_key] + [repr(x) for x in s["top_scores"]])
        return jpath, cpath


def _class_breakdown(hit: np.ndarray, labels: np.ndarray) -> dict[int, float]:
    return {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}


def _check_rows(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got shape {x.shape}")
    return x


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices per row, best first; ties by smaller index."""
    return np.argsort(-scores, axis=1, kind="stable")


def _ranking_report(protocol: str, scores: np.ndarray, labels: np.ndarray, ids, ks) -> EvalReport:
    n, c = scores.shape
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise DomainError(f"ks must be positive, got {ks}")
    ranking = rank_classes(scores)
    overall, per_class = {}, {}
    for k in ks:
        hit = (ranking[:, :min(k, c)] == labels[:, None]).any(axis=1)
        overall[k] = float(hit.mean()) if n else 0.0
        per_class[k] = _class_breakdown(hit, labels)
    top = min(max(ks), c)
    samples = []
    for r in range(n):
        cls = ranking[r, :top]
        samples.append({"id": int(ids[r]), "true_class": int(labels[r]), "top_classes": [int(x) for x in cls],
                        "top_scores": [float(scores[r, x]) for x in cls]})
    counts = {int(cl): int((labels == cl).sum()) for cl in np.unique(labels)}
    return EvalReport(protocol, ks, overall, per_class, counts, samples)


def zero_shot(features, labels, class_text_embeds, ks=(1, 3, 5), ids=None) -> EvalReport:
    feats = _check_rows(features, "features")
    anchors = _check_rows(class_text_embeds, "class_text_embeds")
    labels = np.asarray(labels, dtype=np.int64)
    if feats.shape[1] != anchors.shape[1]:
        raise ShapeError(f"feature dim {feats.shape[1]} != class embedding dim {anchors.shape[1]}")
    if labels.shape != (feats.shape[0],):
        raise ShapeError("one label per feature row is required")
    if np.any(labels < 0) or np.any(labels >= anchors.shape[0]):
        raise DomainError(f"labels must lie in [0, {anchors.shape[0]})")
    ids = np.arange(len(labels)) if ids is None else np.asarray(ids)
    return _ranking_report("zeroshot", feats @ anchors.T, labels, ids, ks)


# --- linear probe ---------------------------------------------------------------


def _init_head(seed: int, d: int, c: int, layers: int) -> dict[str, np.ndarray]:
    rng = _rng.stream(seed, "probe-init", layers)
    widths = [d] * layers + [c]
    head = {}
    for k in range(layers):
        fan_in = widths[k]
        head[f"W{k}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(widths[k + 1], fan_in))
        head[f"b{k}"] = np.zeros(widths[k + 1])
    return head


def _head_forward(head, x, layers):
    acts = [x]
    for k in range(layers):
        z = acts[-1] @ head[f"W{k}"].T + head[f"b{k}"]
        if k < layers - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def _cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean()), np.exp(logp)


def _head_backward(head, acts, probs, labels, layers):
    n = len(labels)
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n
    grads = {}
    for k in reversed(range(layers)):
        grads[f"W{k}"] = g.T @ acts[k]
        grads[f"b{k}"] = g.sum(axis=0)
        if k > 0:
            g = (g @ head[f"W{k}"]) * (acts[k] > 0.0)
    return grads


def linear_probe(train_feats, train_labels, test_feats, test_labels, num_fc_layers: int = 1,
                 probe_epochs: int = 100, probe_lr: float = 1e-2, seed: int = 0, batch_size: int = 64,
                 weight_decay: float = 0.0, num_classes: int | None = None, ks=(1, 3, 5),
                 test_ids=None) -> EvalReport:
    """Train a 1-3 layer softmax head on frozen features; report test accuracy.

    Hidden layers have width ``d``. ``extra["train_loss"][e]`` is the full
    training-set loss after ``e`` epochs (entry 0 is the untrained head).
    """
    if num_fc_layers not in (1, 2, 3):
        raise DomainError(f"num_fc_layers must be 1, 2 or 3, got {num_fc_layers}")
    xtr = _check_rows(train_feats, "train_feats")
    xte = _check_rows(test_feats, "test_feats")
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if xtr.shape[1] != xte.shape[1]:
        raise ShapeError("train and test features differ in dimension")
    c = num_classes if num_classes is not None else int(max(ytr.max(initial=0), yte.max(initial=0))) + 1
    if np.any(ytr >= c) or np.any(yte >= c) or np.any(ytr < 0) or np.any(yte < 0):
        raise DomainError(f"labels exceed the {c} classes of the probe head")
    layers = num_fc_layers
    head = _init_head(seed, xtr.shape[1], c, layers)
    state = AdamWState()

    def full_loss():
        return _cross_entropy(_head_forward(head, xtr, layers)[-1], ytr)[0]

    history = [full_loss()]
    for epoch in range(probe_epochs):
        order = _rng.stream(seed, "probe-shuffle", layers, epoch).permutation(len(ytr))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            acts = _head_forward(head, xtr[idx], layers)
            _, probs = _cross_entropy(acts[-1], ytr[idx])
            adamw_step(head, _head_backward(head, acts, probs, ytr[idx], layers), state, probe_lr, weight_decay)
        history.append(full_loss())
    logits = _head_forward(head, xte, layers)[-1]
    ids = np.arange(len(yte)) if test_ids is None else np.asarray(test_ids)
    report = _ranking_report(f"linear{layers}", logits, yte, ids, ks)
    report.extra = {"layers": layers, "epochs": probe_epochs, "lr": probe_lr, "train_loss": history}
    return report


# --- retrieval --------------------------------------------------------------------


def rank_gallery(scores: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """Gallery positions per query row, best first; ties by smaller id."""
    keys = np.broadcast_to(gallery_ids, scores.shape)
    return np.lexsort((keys, -scores), axis=-1)


def retrieval(query_feats, query_labels, gallery_feats, gallery_labels, k: int, exclude_self: bool = False,
              query_ids=None, gallery_ids=None, ks=None, protocol: str = "retrieval") -> EvalReport:
    """Top-``k`` gallery items per query and recall at each of ``ks`` (default ``1`` and ``k``).

    A query counts as recalled when a same-class item appears in its top ``k``.
    With ``exclude_self`` the gallery item sharing the query's id is skipped.
    """
    q = _check_rows(query_feats, "query_feats")
    g = _check_rows(gallery_feats, "gallery_feats")
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    qy = np.asarray(query_labels, dtype=np.int64)
    gy = np.asarray(gallery_labels, dtype=np.int64)
    qid = np.arange(len(q)) if query_ids is None else np.asarray(query_ids, dtype=np.int64)
    gid = np.arange(len(g)) if gallery_ids is None else np.asarray(gallery_ids, dtype=np.int64)
    limit = len(g) - (1 if exclude_self else 0)
    if not 1 <= k <= limit:
        raise DomainError(f"k must be in 1..{limit}, got {k}")
    ks = sorted({1, k} if ks is None else {int(x) for x in ks})
    if ks[0] < 1 or ks[-1] > k:
        raise DomainError(f"ks must lie in 1..{k}")
    scores = q @ g.T
    if exclude_self:
        scores = np.where(qid[:, None] == gid[None, :], -np.inf, scores)
    order = rank_gallery(scores, gid)[:, :k]
    hits = gy[order] == qy[:, None]
    overall, per_class = {}, {}
    for kk in ks:
        hit = hits[:, :kk].any(axis=1)
        overall[kk] = float(hit.mean()) if len(q) else 0.0
        per_class[kk] = _class_breakdown(hit, qy)
    samples = [{"id": int(qid[r]), "true_class": int(qy[r]), "top_ids": [int(gid[x]) for x in order[r]],
                "top_classes": [int(gy[x]) for x in order[r]], "top_scores": [float(scores[r, x]) for x in order[r]]}
               for r in range(len(q))]
    counts = {int(c): int((qy == c).sum()) for c in np.unique(qy)}
    return EvalReport(protocol, ks, overall, per_class, counts, samples)


# --- feature export ----------------------------------------------------------------


def dataset_features(dataset: Sequence[PointCloud], params: EncoderParams) -> np.ndarray:
    return encode_points(stack_points(dataset), params)


def export_features(dataset: Sequence[PointCloud], params: EncoderParams, path) -> np.ndarray:
    """Write ``id, class_id, f_0 .. f_{d-1}`` rows (floats in shortest round-trip form)."""
    feats = dataset_features(dataset, params)
    write_features(path, [pc.id for pc in dataset], [pc.class_id for pc in dataset], feats)
    return feats


def write_features(path, ids, labels, feats: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class_id"] + [f"f_{k}" for k in range(feats.shape[1])])
        for sid, cls, row in zip(ids, labels, feats):
            w.writerow([int(sid), int(cls)] + [repr(float(x)) for x in row])


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_features`: ``(ids, labels, features)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "class_id"]:
        raise DomainError(f"{path} is not a feature export (missing id,class_id header)")
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    feats = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return ids, labels, feats
