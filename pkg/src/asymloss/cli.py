"""Command line front end: generate, train, evaluate, analyze, sweep.

Every failure prints one line ``E_<CODE>: message`` to stderr and exits
non-zero (see ``EXIT_CODES``). Configuration comes from a JSON file
(``--config``) overridden by flags; the resolved configuration is written
next to every output as ``config.json``.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import analysis as A
from . import data as D
from .errors import AsymlossError, ConfigError, ContractError, FingerprintMismatch, TrainingDiverged
from .experiment import ExperimentConfig, analyse, run, training_cases
from .io import file_sha256, read_container, write_json
from .training import TrainedModel, train

OUT_ENV = "ASYMLOSS_OUT"
EXIT_CODES = {"E_CONFIG": 2, "E_DIVERGED": 3, "E_FINGERPRINT": 4, "E_IO": 5}

TRAIN_FILES = ("train_images.bin", "test_images.bin")
CASE_COLUMNS = ("split", "case_id", "DSC", "SENS", "PRC")
SUMMARY_COLUMNS = ("split", "n_cases", "DSC", "SENS", "PRC")


# -- configuration -----------------------------------------------------------------

_LOSS_FLAGS = {
    "margin": "margin", "gamma": "gamma", "epsilon": "epsilon", "magnitude": "magnitude",
    "mixup_alpha": "mixup_alpha", "mixup_margin": "mixup_margin",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--seed", type=int, help="global seed (subsampling, initialisation, batches)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")


def _overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="method preset, e.g. vanilla-ce or asymmetric-mixup")
    p.add_argument("--loss", choices=("ce", "dice", "margin", "focal", "adversarial", "mixup"),
                   help="loss variant; replaces the preset's choice")
    p.add_argument("--asymmetric", action="store_true", help="with --loss: use the asymmetric form")
    p.add_argument("--fraction", type=float, help="share of training cases to keep")
    p.add_argument("--fg-sampling", type=float, dest="fg_sampling",
                   help="share of training patches centred on foreground")
    p.add_argument("--margin", type=float, help="logit margin")
    p.add_argument("--gamma", type=float, help="focal exponent")
    p.add_argument("--epsilon", type=float, help="adversarial search radius")
    p.add_argument("--magnitude", type=float, help="adversarial step length (L2)")
    p.add_argument("--mixup-alpha", type=float, dest="mixup_alpha", help="Beta(alpha, alpha) for mixing")
    p.add_argument("--mixup-margin", type=float, dest="mixup_margin", help="mixing margin of the hard-label rule")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "preset", None):
        cfg = replace(cfg, preset=args.preset)
    tr = cfg.train
    loss_changes = {v: getattr(args, k) for k, v in _LOSS_FLAGS.items() if getattr(args, k, None) is not None}
    if loss_changes:
        tr = replace(tr, loss=replace(tr.loss, **loss_changes))
    train_changes = {}
    for flag, key in (("fraction", "fraction"), ("fg_sampling", "class_sampling_ratio"),
                      ("epochs", "epochs"), ("lr", "lr")):
        if getattr(args, flag, None) is not None:
            train_changes[key] = getattr(args, flag)
    if train_changes:
        tr = replace(tr, **train_changes)
    cfg = replace(cfg, train=tr)
    if args.out:
        cfg = replace(cfg, out=args.out)
    elif not cfg.out:
        cfg = replace(cfg, out=os.environ.get(OUT_ENV, "runs"))
    cfg = cfg.resolved()
    if getattr(args, "loss", None):
        loss = replace(cfg.train.loss, variant=args.loss, asymmetric=args.asymmetric, combine=())
        cfg = replace(cfg, train=replace(cfg.train, loss=loss))
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


# -- data loading ----------------------------------------------------------------------

def load_dataset_dir(root, expect_hash: str | None = None):
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"{root} has no manifest.json; run `asymloss generate` first")
    import json
    manifest = json.loads(manifest_path.read_text())
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise FingerprintMismatch(f"dataset {manifest['config_hash']} does not match config {expect_hash}")
    train_images = D.load_image_set(root / "train_images.bin")
    test_images = D.load_image_set(root / "test_images.bin")
    return manifest, train_images, test_images


# -- commands ------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = build_config(args)
    out = _outdir(cfg.out)
    train_images, test_images = D.make_splits(cfg.data)
    D.save_image_set(out / "train_images.bin", train_images)
    D.save_image_set(out / "test_images.bin", test_images)
    files = {name: file_sha256(out / name) for name in TRAIN_FILES}
    write_json(out / "manifest.json", D.manifest(cfg.data, train_images, test_images, files))
    write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(train_images)} train / {len(test_images)} test cases to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    _, train_images, _ = load_dataset_dir(args.dataset, cfg.data.fingerprint)
    out = _outdir(cfg.out)
    own = training_cases(train_images, cfg)
    ds = D.extract_patches(own, cfg.data.patch_size, cfg.train.class_sampling_ratio,
                           cfg.data.patches_per_case, seed=cfg.seed)
    trained = train(ds, cfg.model, cfg.train)
    trained.preset = cfg.preset
    trained.save(out / "model.bin")
    trained.write_loss_trace(out / "loss_trace.csv")
    write_json(out / "config.json", cfg.to_dict())
    print(f"trained {cfg.preset} on {len(own)} cases; final loss {trained.loss_trace[-1]:.6g}")
    return 0


def _metric_rows(split: str, m: A.DatasetMetrics):
    cases = [{"split": split, "case_id": cid, "DSC": r.dsc, "SENS": r.sensitivity, "PRC": r.precision}
             for cid, r in sorted(m.per_case.items())]
    summary = {"split": split, "n_cases": len(m.per_case), "DSC": m.dsc, "SENS": m.sensitivity,
               "PRC": m.precision}
    return cases, summary


def cmd_evaluate(args) -> int:
    trained = TrainedModel.load(args.model)
    manifest, train_images, test_images = load_dataset_dir(args.dataset, trained.data_fingerprint)
    if args.images:
        images = D.load_image_set(args.images)
        if images.split != args.split:
            raise ContractError(f"{args.images} holds the {images.split} split but --split {args.split} was requested")
    else:
        images = test_images if args.split == "test" else train_images
    if args.split == "test":
        leaked = set(images.case_ids.tolist()) & set(trained.train_case_ids)
        if leaked:
            raise ContractError(f"test evaluation includes training cases {sorted(leaked)[:5]}")
    else:
        images = images.select(trained.train_case_ids)
    metrics, _ = A.evaluate(trained, D.extract_patches(images, manifest["config"]["patch_size"]))
    out = _outdir(args.out or os.environ.get(OUT_ENV, "runs"))
    cases, summary = _metric_rows(args.split, metrics)
    A.write_csv(out / f"metrics_{args.split}_cases.csv", cases, CASE_COLUMNS)
    A.write_csv(out / f"metrics_{args.split}.csv", [summary], SUMMARY_COLUMNS)
    print(f"{args.split}: DSC {A.fmt(summary['DSC'])} SENS {A.fmt(summary['SENS'])} PRC {A.fmt(summary['PRC'])}")
    return 0


def _summary(trained: TrainedModel, m_train, m_test, shift) -> A.RunSummary:
    config = {"model": trained.model_config.to_dict(), "train": trained.train_config.to_dict(),
              "data": trained.data_fingerprint}
    return A.RunSummary(trained.preset or "model", trained.train_config.fraction, trained.train_config.seed,
                        config, m_train, m_test, shift)


def write_analysis(out: Path, summaries: list[A.RunSummary]) -> None:
    write_json(out / "shift.json", {"schema_version": A.SCHEMA_VERSION,
                                    "reports": [s.shift.to_dict() for s in summaries]})
    write_json(out / "histograms.json", {"schema_version": A.SCHEMA_VERSION,
                                         "reports": [s.shift.histograms_dict() for s in summaries]})
    A.write_csv(out / "sweep.csv", A.fraction_sweep_report(summaries), A.SWEEP_COLUMNS)


def cmd_analyze(args) -> int:
    datasets = args.dataset
    if len(datasets) not in (1, len(args.model)):
        raise ConfigError("give one --dataset, or one per --model")
    cache, summaries = {}, []
    for i, path in enumerate(args.model):
        trained = TrainedModel.load(path)
        root = datasets[0] if len(datasets) == 1 else datasets[i]
        if root not in cache:
            cache[root] = load_dataset_dir(root)
        manifest, train_images, test_images = cache[root]
        if manifest["config_hash"] != trained.data_fingerprint:
            raise FingerprintMismatch(f"model {path} was trained on {trained.data_fingerprint}, "
                                      f"dataset is {manifest['config_hash']}")
        label = f"{trained.preset or 'model'}/f{trained.train_config.fraction:g}/s{trained.train_config.seed}"
        m_train, m_test, shift = analyse(trained, train_images, test_images,
                                         manifest["config"]["patch_size"], label=label)
        summaries.append(_summary(trained, m_train, m_test, shift))
    out = _outdir(args.out or os.environ.get(OUT_ENV, "runs"))
    write_analysis(out, summaries)
    print(f"analysed {len(summaries)} model(s) into {out}")
    return 0


def _sweep_job(cfg: ExperimentConfig, data_dir: str, run_dir: str) -> A.RunSummary:
    _, train_images, test_images = load_dataset_dir(data_dir, cfg.data.fingerprint)
    result = run(cfg, train_images, test_images, resolved=True)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trained.save(out / "model.bin")
    result.trained.write_loss_trace(out / "loss_trace.csv")
    write_json(out / "config.json", cfg.to_dict())
    for split, m in (("train", result.train_metrics), ("test", result.test_metrics)):
        cases, summary = _metric_rows(split, m)
        A.write_csv(out / f"metrics_{split}_cases.csv", cases, CASE_COLUMNS)
        A.write_csv(out / f"metrics_{split}.csv", [summary], SUMMARY_COLUMNS)
    write_json(out / "shift.json", result.shift.to_dict())
    return result.summary


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma separated list of numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    base = build_config(args)
    out = _outdir(base.out)
    presets = [p for p in args.presets.split(",") if p.strip()] if args.presets else [base.preset]
    fractions = _floats(args.fractions) if args.fractions else list(D.FRACTIONS)
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else [base.seed]
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    train_images, test_images = D.make_splits(base.data)
    D.save_image_set(data_dir / "train_images.bin", train_images)
    D.save_image_set(data_dir / "test_images.bin", test_images)
    files = {name: file_sha256(data_dir / name) for name in TRAIN_FILES}
    write_json(data_dir / "manifest.json", D.manifest(base.data, train_images, test_images, files))
    write_json(out / "config.json", base.to_dict())

    jobs = []
    for preset in presets:
        for frac in fractions:
            for seed in seeds:
                cfg = replace(base, preset=preset, seed=seed, train=replace(base.train, fraction=frac))
                cfg = cfg.resolved()
                jobs.append((cfg, str(data_dir), str(out / "runs" / cfg.preset / f"f{frac:g}" / f"s{seed}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_sweep_job, *zip(*jobs)))
    else:
        summaries = [_sweep_job(*j) for j in jobs]
    write_analysis(out, summaries)
    print(f"ran {len(summaries)} job(s); table in {out / 'sweep.csv'}")
    return 0


# -- entry point ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asymloss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic dataset")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    _overrides(p)
    p.add_argument("--dataset", required=True, help="directory written by `generate`")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="DSC/SENS/PRC of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--images", help="evaluate this image-set file instead of the dataset's own split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="logit shift, histograms and fraction table")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--dataset", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="presets x fractions x seeds in one go")
    _common(p)
    _overrides(p)
    p.add_argument("--presets", help="comma separated preset names")
    p.add_argument("--fractions", help="comma separated data fractions (default 0.05,0.1,0.2,0.5,1)")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AsymlossError as exc:
        code = exc.code
        message = str(exc)
        if isinstance(exc, TrainingDiverged):
            message += " (lower --lr)"
    except OSError as exc:
        code, message = "E_IO", str(exc)
    except (ValueError, KeyError) as exc:
        code, message = "E_CONFIG", f"{type(exc).__name__}: {exc}"
    print(f"{code}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
