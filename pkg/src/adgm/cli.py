"""Command-line entry points: ``adgm <command> --config cfg.json``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .datasets import LabeledDataset, bimodal_potential, halfmoons, label_subset, load_mnist
from .evaluation import (
    analogies,
    auxiliary_means,
    classification_error,
    classify,
    iw_log_likelihood,
    kl_per_unit,
    pca_2d,
    sample_prior,
    write_csv,
    write_pgm,
)
from .models import SEMI_SUPERVISED, UNSUPERVISED, Kind, Model
from .trainer import RngStream, TrainData, TrainingAborted, train

log = logging.getLogger("adgm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("train", "eval", "sample", "analogies", "klunits", "pca", "datagen", "gradcheck")


def _thread_limit():
    n = os.environ.get("AXDG_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        log.warning("threadpoolctl is not installed; AXDG_THREADS ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def build_data(cfg: ExperimentConfig) -> tuple[TrainData, np.ndarray | None]:
    """Materialise the dataset and, for MNIST, resolve ``model.x_dim`` from the pruning."""
    ds = cfg.dataset
    if ds.kind == "potential":
        return TrainData(target=bimodal_potential()), None
    rng = np.random.default_rng(ds.seed)
    if ds.kind == "halfmoons":
        tr = halfmoons(ds.n_train, ds.noise, rng)
        te = halfmoons(ds.n_test, ds.noise, rng)
        kept = None
        binary = False
    else:
        tr, te, kept = load_mnist(ds.path, ds.pixel_std_threshold)
        binary = True
        if ds.n_unlabeled is not None:
            pool = rng.permutation(len(tr))
            lab_mask = label_subset(tr, ds.n_labels, rng) if ds.n_labels else np.zeros(len(tr), bool)
            keep = np.concatenate([np.flatnonzero(lab_mask), [i for i in pool if not lab_mask[i]][: ds.n_unlabeled]])
            keep = np.sort(keep.astype(np.int64))
            tr = LabeledDataset(tr.x[keep], tr.y[keep], tr.n_classes, lab_mask[keep])
        if cfg.model.x_dim == 0:
            cfg.model.x_dim = tr.x.shape[1]
        elif cfg.model.x_dim != tr.x.shape[1]:
            raise ConfigError(f"model.x_dim={cfg.model.x_dim} but pruned MNIST has {tr.x.shape[1]} columns")
    if cfg.model.kind in SEMI_SUPERVISED and not tr.mask.any() and ds.n_labels:
        tr.mask = label_subset(tr, ds.n_labels, rng)
    return TrainData(tr, te, binary), kept


def _make_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be >= 0")
        cfg.train.epochs = args.epochs
    if args.out is not None:
        cfg.output = args.out
    return cfg


def _load_model(cfg: ExperimentConfig, out: Path) -> Model:
    model = Model.create(cfg.model, np.random.default_rng(cfg.train.seed))
    path = out / "model.axdg"
    if not path.exists():
        raise ConfigError(f"no trained model at {path}; run `adgm train` first")
    model.load_state_dict(checkpoint.load(path))
    return model


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg, out: Path, data, kept) -> dict:
    model = Model.create(cfg.model, np.random.default_rng(cfg.train.seed))
    result = train(model, data, cfg.train, out_dir=out)
    last = result.history[-1] if result.history else {}
    return {"epochs": len(result.history), "final_J": last.get("J"), "final_test_err": last.get("test_err")}


def cmd_eval(cfg, out: Path, data, kept) -> dict:
    model = _load_model(cfg, out)
    rng = RngStream(cfg.train.seed).generator("cli", "eval")
    report = {}
    test = data.test
    if model.kind in SEMI_SUPERVISED and test is not None:
        x = _eval_x(data, test.x, rng)
        report["test_err"] = classification_error(classify(x, model, cfg.eval.n_mc, rng), test.y)
    if model.kind in UNSUPERVISED and test is not None:
        x = _eval_x(data, test.x, rng)
        report["iw_log_likelihood"] = iw_log_likelihood(x, model, cfg.eval.iw_k, rng).value
        report["iw_k"] = cfg.eval.iw_k
    _write_json(out / "eval.json", report)
    return report


def _eval_x(data: TrainData, x, rng):
    from .datasets import binarize

    return binarize(x, rng) if data.binary else x


def _shape(kept):
    return (28, 28) if kept is not None else None


def cmd_sample(cfg, out: Path, data, kept) -> dict:
    model = _load_model(cfg, out)
    rng = RngStream(cfg.train.seed).generator("cli", "sample")
    samples = sample_prior(model, cfg.eval.n_samples, rng)
    checkpoint.save(out / "samples.axdg", {"samples": samples})
    if kept is not None:
        write_pgm(out / "samples.pgm", samples, kept, cols=max(model.n_classes, 1))
    return {"samples": list(samples.shape)}


def cmd_analogies(cfg, out: Path, data, kept) -> dict:
    model = _load_model(cfg, out)
    rng = RngStream(cfg.train.seed).generator("cli", "analogies")
    x = _eval_x(data, data.test.x[: cfg.eval.n_samples], rng)
    rows = np.concatenate([analogies(xi, model, rng) for xi in x])
    checkpoint.save(out / "analogies.axdg", {"analogies": rows})
    if kept is not None:
        write_pgm(out / "analogies.pgm", rows, kept, cols=model.n_classes)
    return {"analogies": list(rows.shape)}


def cmd_klunits(cfg, out: Path, data, kept) -> dict:
    model = _load_model(cfg, out)
    rng = RngStream(cfg.train.seed).generator("cli", "klunits")
    x = _eval_x(data, data.test.x, rng)
    act = kl_per_unit(x, model, cfg.eval.n_mc, rng)
    rows = []
    for name, vals in (("a", act.a), ("z", act.z)):
        if vals is not None:
            rows += [(name, i, float(v)) for i, v in enumerate(vals)]
    lines = ["variable,unit,kl"] + [f"{n},{i},{v!r}" for n, i, v in rows]
    (out / "klunits.csv").write_text("\n".join(lines) + "\n")
    return {k: (None if v is None else float(np.max(v))) for k, v in (("max_kl_a", act.a), ("max_kl_z", act.z))}


def cmd_pca(cfg, out: Path, data, kept) -> dict:
    model = _load_model(cfg, out)
    if model.kind not in (Kind.AVAE, Kind.ADGM, Kind.SDGM, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX):
        raise ConfigError(f"{model.kind.value} has no auxiliary encoder to project")
    a = auxiliary_means(data.test.x, model)
    res = pca_2d(a)
    rows = [(p[0], p[1], int(y)) for p, y in zip(res.projections, data.test.y, strict=True)]
    write_csv(out / "pca.csv", ("pc1", "pc2", "label"), rows)
    return {"explained_variance_ratio": res.explained_variance_ratio.tolist(), "rank_deficient": res.rank_deficient}


def cmd_datagen(cfg, out: Path, data, kept) -> dict:
    ds = cfg.dataset
    if ds.kind != "halfmoons":
        raise ConfigError("datagen produces half-moons data only")
    d = halfmoons(ds.n_train, ds.noise, np.random.default_rng(cfg.train.seed))
    write_csv(out / "halfmoons.csv", ("x1", "x2", "label"), [(x[0], x[1], int(y)) for x, y in zip(d.x, d.y, strict=True)])
    return {"rows": len(d)}


def cmd_gradcheck(cfg, out: Path, data, kept) -> dict:
    from .gradsuite import run_suite

    results = run_suite(seed=cfg.train.seed)
    lines = [f"{name}: {'PASS' if r.passed else 'FAIL'} max_rel_err={r.max_error:.3e}" for name, r in results.items()]
    print("\n".join(lines))
    report = {name: {"passed": r.passed, "max_error": r.max_error} for name, r in results.items()}
    _write_json(out / "gradcheck.json", report)
    if not all(r.passed for r in results.values()):
        raise TrainingAborted("gradient check failed")
    return {"all_passed": True, "bounds": len(results)}


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "analogies": cmd_analogies,
    "klunits": cmd_klunits,
    "pca": cmd_pca,
    "datagen": cmd_datagen,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adgm", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _make_config(args)
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        needs_data = args.command not in ("datagen", "gradcheck")
        data, kept = build_data(cfg) if needs_data else (None, None)
        print(cfg.to_json())
        (out / "config.json").write_text(cfg.to_json() + "\n")
        with _thread_limit():
            summary = HANDLERS[args.command](cfg, out, data, kept)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError, FloatingPointError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
