"""Command line: ``mmmix <verb> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage/config/input error,
3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import _rng
from .config import TrainConfig, format_config, load_config
from .encoder import load_checkpoint, save_checkpoint
from .errors import MMError, NumericError
from .evaluation import dataset_features, export_features, linear_probe, read_features, retrieval, zero_shot
from .frozen import EmbeddingCache, build_model, load_cache, precache, save_cache
from .geometry import load_mmpd, make_dataset, save_mmpd

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def frozen_model(cfg: TrainConfig):
    return build_model(_rng.derive_seed(cfg.seed, "frozen"), cfg.num_classes, cfg.dim, cfg.sigma_image)


def _resolve(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    print(f"# resolved configuration (seed = {cfg.seed})")
    print(format_config(cfg), end="")
    sys.stdout.flush()
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to output directory {path}: {exc.strerror}") from None
    return path


def _cache_path(caches: Path, split: str, modality: str) -> Path:
    return caches / f"{split}.{modality}.mmec"


# --- verbs ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args.out)
    splits = (("train", cfg.train_size, 0), ("eval", cfg.eval_size, cfg.train_size))
    for name, size, offset in splits:
        clouds = make_dataset(cfg.seed, size, cfg.num_classes, cfg.points_per_cloud, cfg.jitter,
                              id_offset=offset, threads=args.threads)
        save_mmpd(clouds, out / f"{name}.mmpd")
        counts = Counter(pc.class_id for pc in clouds)
        per = ", ".join(f"{c}:{counts.get(c, 0)}" for c in range(cfg.num_classes))
        print(f"{name}: {size} clouds -> {out / f'{name}.mmpd'}; per class {per}")
    return EXIT_OK


def cmd_precache(args) -> int:
    cfg = _resolve(args)
    data = _require(Path(args.data), "dataset")
    clouds = load_mmpd(data)
    out = Path(args.out)
    if out.is_dir() or args.out.endswith(os.sep):
        out = _out_dir(out) / f"{data.stem}.{args.modality}.mmec"
    else:
        _out_dir(out.parent)
    if args.modality == "point":
        if not args.checkpoint:
            raise UsageError("--modality point needs --checkpoint")
        params, _, _ = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"), cfg.hidden, cfg.dim)
        cache = EmbeddingCache("point", cfg.dim)
        for pc, f in zip(clouds, dataset_features(clouds, params)):
            cache.entries[pc.id] = f
    else:
        cache = precache([(pc.id, pc.class_id) for pc in clouds], frozen_model(cfg), args.modality)
    save_cache(cache, out)
    print(f"{args.modality} cache: {len(cache)} entries of dim {cache.dim} -> {out}")
    return EXIT_OK


def _load_train_inputs(cfg, args):
    data = load_mmpd(_require(Path(args.data) / "train.mmpd", "training split"))
    caches = Path(args.caches)
    text = load_cache(_require(_cache_path(caches, "train", "text"), "text cache"))
    image = load_cache(_require(_cache_path(caches, "train", "image"), "image cache"))
    return data, text, image


def cmd_train(args) -> int:
    from . import trainer
    from .plotting import plot_training

    cfg = _resolve(args)
    out = _out_dir(args.out)
    stage = args.stage
    s1_path = Path(args.stage1_checkpoint) if args.stage1_checkpoint else out / "stage1.mmck"
    if stage == "2" and not s1_path.exists():
        raise UsageError(f"stage 2 needs a stage-1 checkpoint; not found: {s1_path}")
    dataset, text, image = _load_train_inputs(cfg, args)
    data = trainer.TrainData.build(dataset, text, image, cfg.dim)
    logs = []
    try:
        if stage == "one-stage":
            p1, t1, p2, t2, log = trainer.train_one_stage(cfg, data, text, image)
            save_checkpoint(p1, t1.rho, len(log.rows) // 2, out / "stage1.mmck")
            save_checkpoint(p2, t2.rho, len(log.rows) // 2, out / "stage2.mmck")
            logs.append(("onestage", log))
        else:
            if stage in ("1", "both"):
                p1, t1, log1 = trainer.train_stage1(cfg, data, text, image)
                save_checkpoint(p1, t1.rho, len(log1.rows), s1_path)
                print(f"stage 1: {len(log1.rows)} steps, final loss {_last(log1)}, tau {t1.tau:.5g} -> {s1_path}")
                logs.append(("stage1", log1))
            if stage in ("2", "both"):
                p1, _, _ = load_checkpoint(s1_path, cfg.hidden, cfg.dim)
                p2, t2, log2 = trainer.train_stage2(cfg, data, text, image, p1)
                save_checkpoint(p2, t2.rho, len(log2.rows), out / "stage2.mmck")
                print(f"stage 2: {len(log2.rows)} steps, final loss {_last(log2)}, tau {t2.tau:.5g} "
                      f"-> {out / 'stage2.mmck'}")
                logs.append(("stage2", log2))
    except NumericError as exc:
        print(f"error: {exc} (last good step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    for name, log in logs:
        log.write(out / f"{name}_log.csv", out / f"{name}_pairs.csv")
        if args.plots and log.rows:
            plot_training(log.rows, out / f"{name}_loss.png")
    return EXIT_OK


def _last(log) -> str:
    return f"{log.rows[-1][3]:.5f}" if log.rows else "n/a"


def _split_features(cfg, args, split: str):
    """(ids, labels, features) for a split, from a checkpoint or a feature CSV."""
    feature_file = args.features if split == "eval" else args.train_features
    if feature_file:
        return read_features(_require(Path(feature_file), f"{split} feature file"))
    if not args.checkpoint:
        raise UsageError(f"need --checkpoint (or a feature file) for the {split} split")
    params, _, _ = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"), cfg.hidden, cfg.dim)
    clouds = load_mmpd(_require(Path(args.data) / f"{split}.mmpd", f"{split} split"))
    ids = np.array([pc.id for pc in clouds])
    labels = np.array([pc.class_id for pc in clouds])
    return ids, labels, dataset_features(clouds, params)


def cmd_eval(args) -> int:
    from .plotting import plot_report

    cfg = _resolve(args)
    out = _out_dir(args.out)
    ids, labels, feats = _split_features(cfg, args, "eval")
    reports = []
    if args.protocol == "zeroshot":
        anchors = frozen_model(cfg).anchors
        reports.append(zero_shot(feats, labels, anchors, ks=(1, 3, 5), ids=ids))
    elif args.protocol == "linear":
        tr_ids, tr_labels, tr_feats = _split_features(cfg, args, "train")
        layer_set = (1, 2, 3) if args.all_layers else (args.layers,)
        seed = _rng.derive_seed(cfg.seed, "probe")
        for layers in layer_set:
            reports.append(linear_probe(tr_feats, tr_labels, feats, labels, layers, cfg.probe_epochs, cfg.probe_lr,
                                        seed=seed, batch_size=cfg.probe_batch_size, num_classes=cfg.num_classes,
                                        test_ids=ids))
    else:
        if args.query == "pc":
            q_ids, q_labels, q_feats = ids, labels, feats
        else:
            cache = load_cache(_require(_cache_path(Path(args.caches), "eval", args.query),
                                        f"{args.query} cache"))
            q_ids = ids
            q_labels = labels
            q_feats = cache.matrix(ids)
        reports.append(retrieval(q_feats, q_labels, feats, labels, args.k, exclude_self=args.query == "pc",
                                 query_ids=q_ids, gallery_ids=ids, protocol=f"retrieval-{args.query}2pc"))
    for rep in reports:
        jpath, cpath = rep.write(out)
        if args.plots:
            plot_report(rep, out / f"{rep.protocol}.png")
        scores = ", ".join(f"@{k}={v:.4f}" for k, v in rep.overall.items())
        print(f"{rep.protocol}: {scores} -> {jpath}, {cpath}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    cfg = _resolve(args)
    report = run_gradcheck(seed=cfg.seed, h=args.hidden, d=args.dim, n=args.batch, n_points=args.points,
                           encoder_configs=args.encoder_configs, pipeline_configs=args.pipeline_configs,
                           inject=args.inject_sign_flip)
    print(report.summary())
    if not report.passed:
        w = report.worst()
        print(f"gradient check failed: worst relative error {w.rel_error:.3e} in suite {w.suite}, "
              f"tensor {w.tensor}, index {w.index}, config {w.config}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_export_features(args) -> int:
    cfg = _resolve(args)
    params, _, _ = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"), cfg.hidden, cfg.dim)
    clouds = load_mmpd(_require(Path(args.data), "dataset"))
    out = Path(args.out)
    _out_dir(out.parent)
    export_features(clouds, params, out)
    print(f"{len(clouds)} feature rows -> {out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    env_threads = os.environ.get("MMX_THREADS")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--threads", type=_positive_int, default=int(env_threads) if env_threads else 1,
                        help="worker cap (default: $MMX_THREADS or 1); results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmmix", description="Multi-modal mixing alignment on synthetic shapes.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gen-data", parents=[common], help="generate train/eval MMPD datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precache", parents=[common], help="precache frozen embeddings as MMEC")
    p.add_argument("--data", required=True, help="MMPD file")
    p.add_argument("--modality", required=True, choices=("text", "image", "point"))
    p.add_argument("--out", required=True, help="MMEC file, or a directory for <split>.<modality>.mmec")
    p.add_argument("--checkpoint", help="encoder checkpoint (point modality only)")
    p.set_defaults(func=cmd_precache)

    p = sub.add_parser("train", parents=[common], help="run the training pipeline")
    p.add_argument("--data", required=True, help="directory holding train.mmpd")
    p.add_argument("--caches", required=True, help="directory holding train.text.mmec and train.image.mmec")
    p.add_argument("--stage", required=True, choices=("1", "2", "both", "one-stage"))
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--stage1-checkpoint", help="stage-1 checkpoint (default: OUT/stage1.mmck)")
    p.add_argument("--no-plots", dest="plots", action="store_false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="zero-shot, linear probe or retrieval evaluation")
    p.add_argument("--protocol", required=True, choices=("zeroshot", "linear", "retrieval"))
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--features", help="eval-split feature CSV instead of --checkpoint")
    p.add_argument("--train-features", help="train-split feature CSV (linear protocol)")
    p.add_argument("--data", default=".", help="directory holding train.mmpd / eval.mmpd")
    p.add_argument("--caches", default=".", help="directory holding eval.<modality>.mmec")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--layers", type=int, choices=(1, 2, 3), default=1, help="probe depth")
    p.add_argument("--all-layers", action="store_true", help="run probes with 1, 2 and 3 layers")
    p.add_argument("--k", type=_positive_int, default=1, help="retrieval depth")
    p.add_argument("--query", choices=("pc", "text", "image"), default="pc", help="retrieval query modality")
    p.add_argument("--no-plots", dest="plots", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--hidden", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--points", type=_positive_int, default=16)
    p.add_argument("--encoder-configs", type=_positive_int, default=50)
    p.add_argument("--pipeline-configs", type=_positive_int, default=10)
    p.add_argument("--inject-sign-flip", metavar="TENSOR", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", parents=[common], help="write encoder features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="MMPD file")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
