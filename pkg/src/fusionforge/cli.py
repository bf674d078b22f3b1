"""``fusionforge`` command line.

Every artifact embeds a ``config`` object holding the resolved parameters and
seed (input paths absolute, output directory excluded). Passing that artifact
back with ``--config`` reruns the command; explicit flags override it.

Exit codes: 0 success, 1 computational failure, 2 usage or validation error.
"""

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    average_fusion,
    plain_logistic_fusion_fit,
    weighted_fusion_apply,
    weighted_fusion_fit,
)
from .class_prior import DIAGONAL_ACCURACY, DIAGONAL_ZERO, estimate_prior, load_prior
from .fusion_solver import (
    LAMBDA1_GRID,
    LAMBDA2_DEFAULT,
    FusionError,
    SolverOptions,
    cross_validate,
    fit,
    load_model,
    model_to_dict,
    predict,
)
from .metrics import mean_ap
from .score_data import (
    ScoreDataError,
    ScoreMatrix,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    save_dataset,
    save_scores,
)
from .temporal_lstm import (
    DivergenceError,
    TrainOptions,
    accuracy,
    gradient_check,
    init_network,
    majority_task,
    train,
)

logger = logging.getLogger("fusionforge")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METHODS = ("streams", "average", "weighted", "logistic", "adaptive")
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


# -- flag parsing -------------------------------------------------------------

def _int(text):
    """Integer flag that also accepts scientific notation such as ``5e3``."""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value.is_integer():
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return int(value)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def _int_list(text):
    return [_int(v) for v in text.split(",") if v.strip()]


def _lambda1(text):
    if text == "cv":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--lambda1 takes 'cv' or a number, got {text!r}") from None


def _resolve(args, command, defaults):
    """Merge built-in defaults < ``--config`` file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"no such config file: {path}")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        data = data.get("config", data)
        if data.get("command", command) != command:
            raise UsageError(f"{path} holds a {data['command']!r} config, not {command!r}")
        unknown = set(data) - set(defaults) - {"command", "version"}
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update({k: v for k, v in data.items() if k in defaults})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is None and k in getattr(args, "_required", ())]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    cfg["command"] = command
    return cfg


def _abspath(p):
    return None if p is None else str(Path(p).resolve())


def _out_dir(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _solver_opts(cfg):
    return SolverOptions(max_iters=cfg["max_iters"], rel_tol=cfg["rel_tol"], step0=cfg["step0"],
                         backtrack=cfg["backtrack"], init=cfg["init"])


def _finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


# -- commands -----------------------------------------------------------------

GEN_DEFAULTS = {
    "classes": 6, "streams": 3, "train": 600, "test": 3000, "seed": 0,
    "high": 0.9, "low": 0.55, "reliability": None, "sharpness": 1.0, "noise_sharing": 0.5,
}


def cmd_gen(args):
    cfg = _resolve(args, "gen", GEN_DEFAULTS)
    if cfg["streams"] < 1:
        raise UsageError("--streams must be at least 1")
    if cfg["classes"] < 2:
        raise UsageError("--classes must be at least 2")
    if cfg["reliability"] is not None:
        rel = np.asarray(cfg["reliability"], dtype=np.float64).reshape(cfg["streams"], cfg["classes"])
        synth = SynthConfig(cfg["train"], cfg["test"], cfg["classes"], cfg["streams"], rel,
                            cfg["sharpness"], cfg["seed"], cfg["noise_sharing"])
    else:
        synth = SynthConfig.patterned(cfg["train"], cfg["test"], cfg["classes"], cfg["streams"],
                                      high=cfg["high"], low=cfg["low"],
                                      confusion_sharpness=cfg["sharpness"], seed=cfg["seed"],
                                      noise_sharing=cfg["noise_sharing"])
    out = _out_dir(args)
    train_set, test_set = generate_synthetic(synth)
    for prefix, data in (("train", train_set), ("test", test_set)):
        save_dataset(data, out, prefix, config=cfg)
    print(f"wrote {out / 'train.json'} and {out / 'test.json'}")
    return EXIT_OK


PRIOR_DEFAULTS = {"manifest": None, "prior_diagonal": DIAGONAL_ACCURACY, "softmax": False}


def cmd_prior(args):
    args._required = ("manifest",)
    cfg = _resolve(args, "prior", PRIOR_DEFAULTS)
    cfg["manifest"] = _abspath(cfg["manifest"])
    data = load_manifest(cfg["manifest"], softmax=cfg["softmax"])
    prior = estimate_prior(data, cfg["prior_diagonal"])
    out = _out_dir(args)
    _write_json(out / "prior.json", {**prior.to_dict(), "config": cfg})
    print(f"wrote {out / 'prior.json'}")
    return EXIT_OK


FIT_DEFAULTS = {
    "manifest": None, "lambda1": "cv", "lambda2": LAMBDA2_DEFAULT, "grid": list(LAMBDA1_GRID),
    "folds": 3, "seed": 0, "prior_diagonal": DIAGONAL_ACCURACY, "prior": None, "softmax": False,
    "max_iters": 10000, "rel_tol": 1e-8, "step0": 1.0, "backtrack": 0.5, "init": "prior",
}


def cmd_fit(args):
    args._required = ("manifest",)
    cfg = _resolve(args, "fit", FIT_DEFAULTS)
    cfg["manifest"] = _abspath(cfg["manifest"])
    cfg["prior"] = _abspath(cfg["prior"])
    opts = _solver_opts(cfg)
    data = load_manifest(cfg["manifest"], softmax=cfg["softmax"])
    if cfg["lambda1"] == "cv":
        if cfg["prior"] is not None:
            raise UsageError("--prior cannot be combined with --lambda1 cv (folds estimate their own priors)")
        lam1, model = cross_validate(data, cfg["grid"], cfg["lambda2"], cfg["folds"], cfg["seed"],
                                     opts, cfg["prior_diagonal"])
    else:
        lam1 = float(cfg["lambda1"])
        prior = load_prior(cfg["prior"]) if cfg["prior"] else estimate_prior(data, cfg["prior_diagonal"])
        model = fit(data.stacked(), data.labels, prior, lam1, cfg["lambda2"], opts)
    rep = model.fit_report
    report = {
        "config": cfg,
        "lambda1": lam1,
        "lambda2": cfg["lambda2"],
        "cv_scores": None if model.cv_scores is None
        else [{"lambda1": k, "score": v} for k, v in sorted(model.cv_scores.items())],
        "objective_trace": rep.objective_trace,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "final_step_size": rep.final_step_size,
        "sparsity": rep.sparsity,
        "notes": [],
    }
    if lam1 == 0.0 and cfg["lambda2"] == 0.0:
        report["notes"].append("degenerates to logistic regression: both regularizers are off")
    if not rep.converged:
        report["notes"].append(f"stopped at max_iters={cfg['max_iters']} before reaching rel_tol")
    out = _out_dir(args)
    _write_json(out / "model.json", {**model_to_dict(model), "config": cfg})
    _write_json(out / "fit_report.json", report)
    print(f"lambda1={lam1!r} iterations={rep.iterations} converged={rep.converged} "
          f"sparsity={rep.sparsity:.4f}")
    return EXIT_OK


PREDICT_DEFAULTS = {"model": None, "manifest": None, "softmax": False}


def cmd_predict(args):
    args._required = ("model", "manifest")
    cfg = _resolve(args, "predict", PREDICT_DEFAULTS)
    cfg["model"], cfg["manifest"] = _abspath(cfg["model"]), _abspath(cfg["manifest"])
    model = _load_model(cfg["model"])
    data = load_manifest(cfg["manifest"], softmax=cfg["softmax"])
    _check_order(model, data)
    fused = predict(model, data.stacked(), data.streams[0].sample_ids)
    out = _out_dir(args)
    save_scores(fused, out / "fused_scores.csv", list(data.labels.class_names))
    _write_json(out / "predict.json", {"config": cfg, "scores": "fused_scores.csv"})
    print(f"wrote {out / 'fused_scores.csv'}")
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"no such model file: {path}")
    return load_model(path)


def _check_order(model, data):
    if tuple(model.stream_order) != tuple(data.stream_order):
        raise ScoreDataError(
            f"model streams {list(model.stream_order)} do not match data streams {list(data.stream_order)}"
        )


EVAL_DEFAULTS = {
    "test": None, "train": None, "model": None, "methods": list(METHODS), "seed": 0, "folds": 3,
    "grid_step": 0.1, "softmax": False, "prior_diagonal": DIAGONAL_ACCURACY,
}


def cmd_eval(args):
    args._required = ("test",)
    cfg = _resolve(args, "eval", EVAL_DEFAULTS)
    for key in ("test", "train", "model"):
        cfg[key] = _abspath(cfg[key])
    methods = cfg["methods"]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    if len(set(methods)) != len(methods):
        raise UsageError("--methods lists a method twice")
    needs_train = {"weighted", "logistic"} | ({"adaptive"} if cfg["model"] is None else set())
    if needs_train & set(methods) and cfg["train"] is None:
        raise UsageError(f"methods {sorted(needs_train & set(methods))} need --train")
    test = load_manifest(cfg["test"], softmax=cfg["softmax"])
    train_set = load_manifest(cfg["train"], softmax=cfg["softmax"]) if cfg["train"] else None
    ids = test.streams[0].sample_ids
    names = list(test.labels.class_names)

    fused = []
    for method in methods:
        if method == "streams":
            fused.extend((f"stream:{s.stream_id}", s) for s in test.streams)
        elif method == "average":
            fused.append(("average", average_fusion(test.streams)))
        elif method == "weighted":
            wm = weighted_fusion_fit(train_set, cfg["grid_step"], cfg["folds"], cfg["seed"])
            fused.append(("weighted", weighted_fusion_apply(wm, test.streams)))
        elif method == "logistic":
            lm = plain_logistic_fusion_fit(train_set.stacked(), train_set.labels)
            fused.append(("logistic", _named(predict(lm, test.stacked(), ids), "logistic")))
        else:
            if cfg["model"] is not None:
                am = _load_model(cfg["model"])
            else:
                _, am = cross_validate(train_set, k=cfg["folds"], seed=cfg["seed"],
                                       diagonal=cfg["prior_diagonal"])
            _check_order(am, test)
            fused.append(("adaptive", _named(predict(am, test.stacked(), ids), "adaptive")))

    out = _out_dir(args)
    fused_dir = out / "fused"
    fused_dir.mkdir(exist_ok=True)
    rows = []
    for name, scores in fused:
        rep = mean_ap(scores, test.labels)
        rows.append({"name": name, "accuracy": rep.accuracy, "map": rep.map,
                     "per_class_ap": [_finite_or_none(a) for a in rep.per_class_ap],
                     "scores": f"fused/{name.replace(':', '_')}.csv"})
        save_scores(scores, out / rows[-1]["scores"], names)
    _write_json(out / "results.json", {"config": cfg, "methods": rows})
    with open(out / "per_class_ap.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *(r["name"] for r in rows)])
        for c, cname in enumerate(names):
            w.writerow([cname, *("" if r["per_class_ap"][c] is None else repr(r["per_class_ap"][c])
                                 for r in rows)])
    for r in rows:
        acc = "n/a" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        print(f"{r['name']:<16} accuracy={acc} mAP={r['map']:.4f}")
    return EXIT_OK


def _named(scores, name):
    return ScoreMatrix(name, scores.scores, scores.sample_ids)


LSTM_TRAIN_DEFAULTS = {
    "hidden": [16, 12], "seq_len": 20, "classes": 4, "train_size": 1000, "test_size": 500,
    "iters": 5000, "lr": 1e-2, "momentum": 0.9, "batch": 16, "clip": 5.0, "seed": 0,
    "target_accuracy": None,
}


def cmd_lstm_train(args):
    cfg = _resolve(args, "lstm train", LSTM_TRAIN_DEFAULTS)
    if not cfg["hidden"] or min(cfg["hidden"]) < 1:
        raise UsageError("--hidden needs positive layer sizes")
    if cfg["classes"] < 2 or cfg["seq_len"] < 1 or cfg["train_size"] < 1 or cfg["test_size"] < 1:
        raise UsageError("--classes must be >= 2 and sizes positive")
    samples = majority_task(cfg["train_size"] + cfg["test_size"], cfg["seq_len"], cfg["classes"], cfg["seed"])
    train_set, test_set = samples[:cfg["train_size"]], samples[cfg["train_size"]:]
    net = init_network(cfg["classes"], cfg["hidden"], cfg["classes"], seed=cfg["seed"])
    opts = TrainOptions(learning_rate=cfg["lr"], momentum=cfg["momentum"], clip_norm=cfg["clip"],
                        max_iters=cfg["iters"], batch_size=cfg["batch"], seed=cfg["seed"],
                        target_accuracy=cfg["target_accuracy"])
    result = train(net, train_set, opts)
    report = {
        "config": cfg,
        "iterations": len(result.loss_trace),
        "stopped_early": result.stopped_early,
        "loss_trace": result.loss_trace,
        "train_accuracy": accuracy(result.net, train_set),
        "test_accuracy": accuracy(result.net, test_set),
    }
    out = _out_dir(args)
    _write_json(out / "net.json", {**result.net.to_dict(), "config": cfg})
    _write_json(out / "train_report.json", report)
    print(f"iterations={report['iterations']} train_accuracy={report['train_accuracy']:.4f} "
          f"test_accuracy={report['test_accuracy']:.4f}")
    return EXIT_OK


GRADCHECK_DEFAULTS = {"hidden": [5, 4], "seq_len": 7, "classes": 3, "seed": 0, "step": 1e-5}


def cmd_lstm_gradcheck(args):
    cfg = _resolve(args, "lstm gradcheck", GRADCHECK_DEFAULTS)
    seq = majority_task(1, cfg["seq_len"], cfg["classes"], cfg["seed"])[0]
    net = init_network(cfg["classes"], cfg["hidden"], cfg["classes"], seed=cfg["seed"], scale=0.5)
    err = gradient_check(net, seq, step=cfg["step"])
    ok = err <= GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fusionforge", description="Class-adaptive late fusion of classifier scores.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp, out=True):
        sp.add_argument("--config", help="rerun from the config embedded in a previous artifact")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic multi-stream dataset")
    common(g)
    g.add_argument("--classes", type=_int)
    g.add_argument("--streams", type=_int)
    g.add_argument("--train", type=_int, help="training samples")
    g.add_argument("--test", type=_int, help="test samples")
    g.add_argument("--seed", type=_int)
    g.add_argument("--high", type=float, help="accuracy of stream m on classes with c %% M == m")
    g.add_argument("--low", type=float, help="accuracy on the other classes")
    g.add_argument("--reliability", type=_float_list,
                   help="explicit row-major streams x classes accuracy list (overrides --high/--low)")
    g.add_argument("--sharpness", type=float, help="noise concentration power")
    g.add_argument("--noise-sharing", type=float, help="fraction of noise shared across streams, in [0, 1)")
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prior", help="estimate the stacked class-confusion prior")
    common(pr)
    pr.add_argument("--manifest", "--from", dest="manifest",
                    help="scores to estimate from; prefer held-out validation scores")
    pr.add_argument("--prior-diagonal", choices=(DIAGONAL_ACCURACY, DIAGONAL_ZERO))
    pr.add_argument("--softmax", action="store_true", default=None, help="softmax raw score rows first")
    pr.set_defaults(func=cmd_prior)

    f = sub.add_parser("fit", help="fit the adaptive fusion weights")
    common(f)
    f.add_argument("--manifest")
    f.add_argument("--lambda1", type=_lambda1, help="'cv' or a fixed value")
    f.add_argument("--lambda2", type=float)
    f.add_argument("--grid", type=_float_list, help="lambda1 values tried by cv")
    f.add_argument("--folds", type=_int)
    f.add_argument("--seed", type=_int, help="fold assignment seed")
    f.add_argument("--prior-diagonal", choices=(DIAGONAL_ACCURACY, DIAGONAL_ZERO))
    f.add_argument("--prior", help="prior JSON to use with a fixed --lambda1")
    f.add_argument("--softmax", action="store_true", default=None)
    f.add_argument("--max-iters", type=_int)
    f.add_argument("--rel-tol", type=float)
    f.add_argument("--step0", type=float)
    f.add_argument("--backtrack", type=float)
    f.add_argument("--init", choices=("prior", "zeros"))
    f.set_defaults(func=cmd_fit)

    pd = sub.add_parser("predict", help="write fused scores for a dataset")
    common(pd)
    pd.add_argument("--model")
    pd.add_argument("--manifest")
    pd.add_argument("--softmax", action="store_true", default=None)
    pd.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="compare fusion methods on a test set")
    common(e)
    e.add_argument("--test", help="test manifest")
    e.add_argument("--train", help="train manifest (needed by weighted, logistic, and adaptive without --model)")
    e.add_argument("--model", help="fitted adaptive model JSON")
    e.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   help=f"comma-separated subset of {','.join(METHODS)}")
    e.add_argument("--seed", type=_int)
    e.add_argument("--folds", type=_int)
    e.add_argument("--grid-step", type=float)
    e.add_argument("--softmax", action="store_true", default=None)
    e.add_argument("--prior-diagonal", choices=(DIAGONAL_ACCURACY, DIAGONAL_ZERO))
    e.set_defaults(func=cmd_eval)

    lstm = sub.add_parser("lstm", help="temporal LSTM stream tools")
    lsub = lstm.add_subparsers(dest="lstm_command", metavar="SUBCOMMAND")
    lsub.required = True
    lt = lsub.add_parser("train", help="train on the majority-symbol toy task")
    common(lt)
    lt.add_argument("--hidden", type=_int_list, help="comma-separated layer sizes")
    lt.add_argument("--seq-len", type=_int)
    lt.add_argument("--classes", type=_int)
    lt.add_argument("--train-size", type=_int)
    lt.add_argument("--test-size", type=_int)
    lt.add_argument("--iters", type=_int)
    lt.add_argument("--lr", type=float)
    lt.add_argument("--momentum", type=float)
    lt.add_argument("--batch", type=_int)
    lt.add_argument("--clip", type=float)
    lt.add_argument("--seed", type=_int)
    lt.add_argument("--target-accuracy", type=float, help="stop early at this training accuracy")
    lt.set_defaults(func=cmd_lstm_train)
    lg = lsub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    common(lg, out=False)
    lg.add_argument("--hidden", type=_int_list)
    lg.add_argument("--seq-len", type=_int)
    lg.add_argument("--classes", type=_int)
    lg.add_argument("--seed", type=_int)
    lg.add_argument("--step", type=float)
    lg.set_defaults(func=cmd_lstm_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScoreDataError, ValueError, FileNotFoundError) as exc:
        print(f"fusionforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FusionError, DivergenceError, FloatingPointError, ArithmeticError) as exc:
        print(f"fusionforge: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
