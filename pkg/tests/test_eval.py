import csv
import json

import numpy as np
import pytest

from conftest import unit_rows
from mmmix.encoder import init_params
from mmmix.errors import DomainError, ShapeError
from mmmix.evaluation import export_features, linear_probe, read_features, retrieval, zero_shot
from mmmix.geometry import make_dataset


def sort_oracle(scores, keys):
    """Full Python sort by (-score, key)."""
    return [sorted(range(len(row)), key=lambda c: (-row[c], keys[c])) for row in scores]


def test_zero_shot_matches_full_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = int(rng.integers(2, 9))
        anchors = unit_rows(rng, c, 6)
        # quantized features produce exact score ties
        feats = np.round(unit_rows(rng, 50, 6), 1)
        labels = rng.integers(0, c, size=50)
        rep = zero_shot(feats, labels, anchors, ks=(1, 3, 5))
        oracle = sort_oracle((feats @ anchors.T).tolist(), list(range(c)))
        for s, o, y in zip(rep.samples, oracle, labels):
            assert s["top_classes"] == o[:min(5, c)]
        for k in (1, 3, 5):
            assert rep.overall[k] == np.mean([y in o[:k] for o, y in zip(oracle, labels)])


def test_zero_shot_perfect_and_orthogonal():
    anchors = np.eye(8)[:, :8]
    labels = np.arange(40) % 8
    assert zero_shot(anchors[labels], labels, anchors).overall[1] == 1.0
    feats = np.zeros((40, 10))
    feats[:, 9] = 1.0
    rep = zero_shot(feats, labels, np.eye(10)[:8])
    assert rep.overall[1] == np.mean(labels == 0)
    assert all(s["top_classes"] == [0, 1, 2, 3, 4] for s in rep.samples)


def test_zero_shot_report_invariants():
    rng = np.random.default_rng(1)
    anchors = unit_rows(rng, 8, 16)
    labels = rng.integers(0, 8, size=120)
    feats = unit_rows(rng, 120, 16) + 0.8 * anchors[labels]
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    rep = zero_shot(feats, labels, anchors)
    assert 0 <= rep.overall[1] <= rep.overall[3] <= rep.overall[5] <= 1
    for k in rep.ks:
        weighted = sum(rep.per_class[k][c] * rep.class_counts[c] for c in rep.class_counts) / len(labels)
        assert abs(weighted - rep.overall[k]) <= 1e-12
    assert all(-1 <= x <= 1 for s in rep.samples for x in s["top_scores"])


def test_zero_shot_rotation_invariance():
    rng = np.random.default_rng(2)
    anchors = unit_rows(rng, 8, 12)
    labels = rng.integers(0, 8, size=100)
    feats = unit_rows(rng, 100, 12) + anchors[labels]
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    a = zero_shot(feats, labels, anchors)
    b = zero_shot(feats @ q, labels, anchors @ q)
    assert a.overall == b.overall


def test_zero_shot_errors():
    with pytest.raises(ShapeError):
        zero_shot(np.eye(3), [0, 1, 2], np.eye(4))
    with pytest.raises(DomainError):
        zero_shot(np.eye(3), [0, 1, 3], np.eye(3))


def test_probe_on_one_hot_features():
    labels = np.arange(80) % 8
    feats = np.eye(8)[labels]
    rep = linear_probe(feats, labels, feats, labels, 1, probe_epochs=50, probe_lr=1e-2, seed=0)
    assert rep.overall[1] == 1.0
    loss = rep.extra["train_loss"]
    assert len(loss) == 51 and loss[-1] <= loss[0]


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_probe_depths_run_and_are_seeded(layers):
    rng = np.random.default_rng(layers)
    labels = np.arange(60) % 4
    feats = unit_rows(rng, 60, 8) + np.eye(8)[labels]
    a = linear_probe(feats, labels, feats, labels, layers, 20, 1e-2, seed=5)
    b = linear_probe(feats, labels, feats, labels, layers, 20, 1e-2, seed=5)
    assert a.protocol == f"linear{layers}" and a.to_json() == b.to_json()
    assert a.extra["train_loss"][-1] <= a.extra["train_loss"][0]


def test_probe_without_training_is_deterministic():
    labels = np.arange(16) % 4
    feats = np.eye(4)[labels]
    a = linear_probe(feats, labels, feats, labels, 1, 0, 1e-2, seed=1)
    assert a.to_json() == linear_probe(feats, labels, feats, labels, 1, 0, 1e-2, seed=1).to_json()
    assert len(a.extra["train_loss"]) == 1


def test_probe_errors():
    f = np.eye(4)
    with pytest.raises(DomainError):
        linear_probe(f, [0, 1, 2, 3], f, [0, 1, 2, 3], 4, 1, 1e-2)
    with pytest.raises(DomainError):
        linear_probe(f, [0, 1, 2, 3], f, [0, 1, 2, 3], 1, 1, 1e-2, num_classes=3)


def test_retrieval_matches_full_sort():
    rng = np.random.default_rng(3)
    for exclude in (False, True):
        g = np.round(unit_rows(rng, 60, 4), 1)
        gy = rng.integers(0, 5, size=60)
        gid = rng.permutation(1000)[:60]
        q, qy, qid = (g, gy, gid) if exclude else (unit_rows(rng, 30, 4), rng.integers(0, 5, size=30), None)
        rep = retrieval(q, qy, g, gy, 10, exclude_self=exclude, query_ids=qid, gallery_ids=gid)
        scores = (q @ g.T).tolist()
        if exclude:
            scores = [[-np.inf if gid[c] == gid[r] else s for c, s in enumerate(row)] for r, row in enumerate(scores)]
        oracle = sort_oracle(scores, gid.tolist())
        for s, o in zip(rep.samples, oracle):
            assert s["top_ids"] == [int(gid[x]) for x in o[:10]]
        assert rep.ks == [1, 10] and rep.overall[1] <= rep.overall[10]


def test_retrieval_examples():
    anchors = np.eye(6)
    labels = np.arange(6)
    rep = retrieval(anchors, labels, anchors, labels, 1)
    assert rep.overall[1] == 1.0
    assert [s["top_ids"][0] for s in rep.samples] == list(range(6))
    rng = np.random.default_rng(0)
    g = unit_rows(rng, 30, 5)
    gy = rng.integers(0, 3, size=30)
    rep = retrieval(g[7:8], gy[7:8], g, gy, 3)
    assert rep.samples[0]["top_ids"][0] == 7
    rep = retrieval(g, gy, g, gy, 29, exclude_self=True, ks=(1, 2, 5, 29))
    vals = [rep.overall[k] for k in rep.ks]
    assert vals == sorted(vals)
    assert all(7 not in s["top_ids"] for s in rep.samples if s["id"] == 7)


def test_retrieval_k_range():
    g = np.eye(4)
    with pytest.raises(DomainError):
        retrieval(g, [0] * 4, g, [0] * 4, 0)
    with pytest.raises(DomainError):
        retrieval(g, [0] * 4, g, [0] * 4, 4, exclude_self=True)


def test_report_files(tmp_path):
    labels = np.arange(8) % 4
    rep = zero_shot(np.eye(4)[labels], labels, np.eye(4), ks=(1, 3))
    jpath, cpath = rep.write(tmp_path)
    doc = json.loads(jpath.read_text())
    assert set(doc) >= {"protocol", "ks", "overall", "per_class", "samples"}
    assert doc["overall"]["1"] == 1.0
    with open(cpath) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "true_class", "rank1_class", "rank2_class", "rank3_class",
                       "rank1_score", "rank2_score", "rank3_score"]
    assert len(rows) == 9


def test_export_features(tmp_path):
    data = make_dataset(0, 10, 4, 32, 0.0)
    params = init_params(0, 8, 8)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    export_features(data, params, a)
    export_features(data, params, b)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert len(lines) == 11 and lines[0].split(",")[:3] == ["id", "class_id", "f_0"]
    ids, labels, feats = read_features(a)
    assert ids.tolist() == list(range(10)) and labels.tolist() == [k % 4 for k in range(10)]
    assert np.abs(np.linalg.norm(feats, axis=1) - 1).max() <= 1e-9
