"""``specrec`` command line: data prep, training, spectra, bounds, evaluation, timing and sweeps."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .exceptions import ConfigError
from .model import TrainConfig, load_checkpoint, save_checkpoint, scoring_embeddings, train

_log = logging.getLogger("specrec")

TRAIN_FLAGS = {
    # flag dest -> TrainConfig field
    "dim": "d",
    "loss": "loss",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "beta": "beta",
    "epochs": "epochs",
    "negatives": "negatives_per_positive",
    "batch_size": "batch_size",
    "seed": "seed",
    "backbone": "backbone",
    "layers": "lightgcn_layers",
    "log_spectrum_every": "log_spectrum_every",
    "full_batch": "full_batch",
    "init_scale": "init_scale",
    "regularizer": "regularizer",
}


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_train_flags(p, defaults=True):
    """TrainConfig flags; with ``defaults=False`` unset flags stay None so a --config file wins."""
    cfg = TrainConfig()

    def dflt(name):
        return getattr(cfg, TRAIN_FLAGS[name]) if defaults else None

    p.add_argument("--dim", type=int, default=dflt("dim"))
    p.add_argument("--loss", choices=["mse", "bce", "bpr"], default=dflt("loss"))
    p.add_argument("--lr", type=float, default=dflt("lr"))
    p.add_argument("--weight-decay", type=float, default=dflt("weight_decay"))
    p.add_argument("--beta", type=float, default=dflt("beta"), help="spectral penalty weight, applied once per batch")
    p.add_argument("--epochs", type=int, default=dflt("epochs"))
    p.add_argument("--negatives", type=int, default=dflt("negatives"))
    p.add_argument("--batch-size", type=int, default=dflt("batch_size"))
    p.add_argument("--seed", type=int, default=dflt("seed"))
    p.add_argument("--backbone", choices=["mf", "lightgcn"], default=dflt("backbone"))
    p.add_argument("--layers", type=int, default=dflt("layers"))
    p.add_argument("--log-spectrum-every", type=int, default=dflt("log_spectrum_every"))
    p.add_argument("--full-batch", action="store_true", default=dflt("full_batch"))
    p.add_argument("--init-scale", type=float, default=dflt("init_scale"))
    p.add_argument("--regularizer", choices=["resn", "direct"], default=dflt("regularizer"))


def _config_from(args, base: TrainConfig | None = None) -> TrainConfig:
    values = (base or TrainConfig()).to_dict()
    for flag, name in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    return TrainConfig.from_dict(values).validate()


def _read_config_file(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig.from_dict({k: v for k, v in raw.items() if k in names})


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _meta(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load_model(args):
    E, meta = load_checkpoint(args.checkpoint)
    Y = D.load_interactions(args.data, args.format) if getattr(args, "data", None) else None
    config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    if Y is not None:
        if Y.shape != (E.n, E.m):
            raise ConfigError(f"data shape {Y.shape} does not match checkpoint ({E.n}, {E.m})")
        if config is not None:
            E = scoring_embeddings(E, Y, config)
    return E, Y, config


def cmd_synth(args):
    Y = D.synth_powerlaw(
        args.users, args.items, args.alpha, args.per_user, args.seed,
        clusters=args.clusters, affinity=args.affinity, cluster_decay=args.cluster_decay,
    )
    D.write_interactions(Y, args.out, args.format)
    fit = D.fit_power_law(D.popularity(Y).values)
    _emit({"out": str(args.out), "n": Y.n, "m": Y.m, "nnz": Y.nnz, "fitted_alpha": fit.alpha, "meta": _meta(args)})


def cmd_split(args):
    Y = D.load_interactions(args.data, args.format)
    if args.paradigm == "common":
        bundle = D.split_common(Y, args.seed, tuple(args.fractions))
    else:
        bundle = D.split_debiased(Y, args.seed, args.test_per_item)
    D.write_split(bundle, args.out)
    _emit({"out": str(args.out), "paradigm": bundle.paradigm, "sizes": bundle.sizes(), "meta": _meta(args)})


def cmd_train(args):
    base = _read_config_file(args.config) if args.config else None
    config = _config_from(args, base)
    Y = D.load_interactions(args.data, args.format)
    E, log = train(Y, config)
    out = Path(args.out)
    save_checkpoint(E, out / "model.bin", config, extra={"data": str(args.data), "format": args.format})
    with open(out / "train_log.json", "w", encoding="utf-8") as fh:
        json.dump({"config": config.to_dict(), **log.to_dict()}, fh, indent=1)
    if log.spectra:
        log.write_spectrum_csv(out / "spectrum_log.csv")
    _emit({
        "checkpoint": str(out / "model.bin"),
        "epochs": config.epochs,
        "final_loss": float(log.losses[-1]),
        "final_penalty": float(log.penalties[-1]),
        "config": config.to_dict(),
    })


def cmd_spectrum(args):
    from .spectral import dense_postactivation_spectrum, spectral_report

    E, Y, _ = _load_model(args)
    r = D.popularity(Y) if Y is not None else None
    if args.activation == "sigmoid":
        rep = dense_postactivation_spectrum(E, "sigmoid", r)
    else:
        rep = spectral_report(E, r)
    out = rep.to_dict()
    if not args.vectors:
        out["p1"] = out["q1"] = None
    _emit(out, args.out)


def cmd_bounds(args):
    from .theory import bound_report

    E, Y, _ = _load_model(args)
    rep = bound_report(E, D.popularity(Y))
    print(rep.table(), file=sys.stderr)
    _emit(rep.to_dict(), args.out)


def cmd_eval(args):
    from .metrics import evaluate

    E, Y, _ = _load_model(args)
    test_path = args.test_file or args.test
    if not test_path:
        raise ConfigError("eval needs --test or --test-file")
    test = D.align_to(Y, test_path, args.format)
    paradigm = "uniform_exposure" if args.test_file else "held_out"
    rep = evaluate(E, Y, test, K=args.k, G=args.groups)
    _emit({**rep.to_dict(), "paradigm": paradigm}, args.out)


def cmd_timing(args):
    from .experiments import timing_study

    base = _config_from(args)
    res = timing_study(
        args.users, args.items, base.d, alpha=args.alpha, per_user=args.per_user,
        epochs=args.timed_epochs, direct_epochs=args.direct_epochs, seed=base.seed, config=base,
    )
    _emit({**res, "meta": _meta(args)}, args.out)


def _sweep_bundle(args):
    train_Y = D.load_interactions(args.data, args.format)
    test = D.align_to(train_Y, args.test, args.format)
    return D.SplitBundle(train_Y, train_Y.subset(np.zeros(train_Y.nnz, bool)), test, "given", None)


def cmd_sweep_beta(args):
    from .experiments import sweep_beta

    rows = sweep_beta(_sweep_bundle(args), _config_from(args), args.betas, K=args.k, G=args.groups)
    _emit({"points": rows, "meta": _meta(args)}, args.out)


def cmd_sweep_dim(args):
    from .experiments import sweep_dim

    rows = sweep_dim(_sweep_bundle(args), _config_from(args), args.dims, K=args.k, G=args.groups)
    _emit({"points": rows, "meta": _meta(args)}, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--format", choices=["tsv_pairs", "csv_pairs"], default="tsv_pairs")
        return p

    p = add("synth", cmd_synth, "sample Zipf-distributed interactions")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--per-user", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", type=int, default=0)
    p.add_argument("--affinity", type=float, default=1.0)
    p.add_argument("--cluster-decay", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("split", cmd_split, "write train/valid/test splits")
    p.add_argument("--data", required=True)
    p.add_argument("--paradigm", choices=["common", "debiased"], default="common")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", type=_floats, default=[0.7, 0.1, 0.2])
    p.add_argument("--test-per-item", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON TrainConfig (or a model_meta.json); explicit flags override it")
    p.add_argument("--out", required=True)
    _add_train_flags(p, defaults=False)

    p = add("spectrum", cmd_spectrum, "spectral report of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="training data; enables cos(r, q1) and LightGCN propagation")
    p.add_argument("--activation", choices=["identity", "sigmoid"], default="identity")
    p.add_argument("--vectors", action="store_true", help="include p1 and q1 in the output")
    p.add_argument("--out")

    p = add("bounds", cmd_bounds, "evaluate both popularity theorems on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "NDCG@K and popularity exposure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="training interactions (masked from rankings)")
    p.add_argument("--test", help="held-out interactions from `split`")
    p.add_argument("--test-file", help="externally supplied unbiased test set")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--out")

    p = add("timing", cmd_timing, "per-epoch time of plain MF, the surrogate and the dense baseline")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--per-user", type=int, default=20)
    p.add_argument("--timed-epochs", type=int, default=3)
    p.add_argument("--direct-epochs", type=int, default=1)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(beta=0.1)

    for name, func, grid_flag, grid_type, grid in (
        ("sweep-beta", cmd_sweep_beta, "--betas", _floats, [1e-4, 1e-3, 1e-2, 1e-1, 0.5, 1.0, 5.0]),
        ("sweep-dim", cmd_sweep_dim, "--dims", _ints, [8, 32, 128]),
    ):
        p = add(name, func, f"train over a grid ({grid_flag[2:]})")
        p.add_argument("--data", required=True)
        p.add_argument("--test", required=True)
        p.add_argument(grid_flag, type=grid_type, default=grid)
        p.add_argument("--k", type=int, default=20)
        p.add_argument("--groups", type=int, default=5)
        p.add_argument("--out")
        _add_train_flags(p)
    return parser


def _limit_threads():
    value = os.environ.get("SBL_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        if args.verbose:
            _log.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
