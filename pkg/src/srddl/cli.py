"""Command line entry point: ``srddl <subcommand> [options]``.

Options come from three layers: built-in defaults, an optional JSON config
file (``--config``, a flat object keyed by option name) and explicit flags,
later layers winning. The resolved options are written to
``resolved_config.json`` in the output directory and can be passed back with
``--config`` to repeat a run. Logs are JSON lines on stderr; results go to
the output directory only.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure (the last
good training state is saved when one exists), 130 interrupted.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .connectome import WindowSpec
from .dictionary import HyperParams
from .evaluation import CV_VARIANTS, run_cv, scree_export, sweep
from .exceptions import ContractViolation, NumericalFailure
from .io import (atomic_write, load_checkpoint, load_schema, load_manifest, read_matrix_csv, rows_csv,
                 save_checkpoint, save_ground_truth, scores_csv, to_json, write_cohort)
from .optimizer import VARIANTS, fit_variant, infer_new
from .synthetic import SWEEP_AXES as NOISE_AXES
from .synthetic import SynthConfig, generate, noise_sweep

logger = logging.getLogger("srddl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"time": round(record.created, 3), "level": record.levelname.lower(),
                 "logger": record.name, "message": record.getMessage()}
        entry.update(getattr(record, "data", {}))
        return json.dumps(entry, default=str, allow_nan=True)


def _grid(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}")


def _flag(value):
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes"):
        return True
    if str(value).lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


# name -> (type, default, help)
_COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, None, "output directory"),
    "threads": (int, None, "BLAS thread limit (default: all cores)"),
    "log_level": (str, "info", "debug, info, warning or error"),
}
_HP = {
    "k": (int, 15, "number of basis networks"),
    "lambda": (float, 3.0, "score-loss tradeoff"),
    "gamma": (float, 20.0, "augmented Lagrangian penalty"),
    "iters": (int, 30, "main iterations"),
    "epochs": (int, 50, "network epochs per main iteration"),
    "coeff_steps": (int, 50, "loading ADAM steps per main iteration"),
    "cycles": (int, 5, "primal-dual cycles per main iteration"),
    "eta0": (float, 1e-3, "initial dual step"),
    "hidden": (int, 40, "LSTM width"),
    "head_width": (int, 40, "width of the score and attention heads"),
    "clip_norm": (float, None, "clip network gradients to this norm (default: off)"),
}
_WINDOW = {
    "window": (int, None, "window length in samples (overrides the manifest)"),
    "stride": (int, None, "window stride in samples (overrides the manifest)"),
}
_SYNTH = {
    "n_subjects": (int, 60, "training subjects"),
    "synth_k": (int, 4, "true number of networks"),
    "m": (int, 3, "number of scores"),
    "t": (int, 30, "windows per subject"),
    "p": (int, 30, "regions"),
    "sigma_c": (float, 4.0, "loading GP standard deviation"),
    "sigma_b": (float, 0.2, "basis noise"),
    "sigma_gamma": (float, 0.2, "correlation noise"),
    "sigma_y": (float, 0.2, "score noise"),
    "edge_prior": (float, 0.3, "edge probability"),
    "edge_prior_file": (str, None, "CSV of per-pair edge probabilities"),
    "length_scale": (float, None, "GP length scale in windows (default t/10)"),
}

COMMANDS = {
    "simulate": {**_SYNTH, "n_heldout": (int, 0, "extra held-out subjects")},
    "train": {"manifest": (str, None, "cohort manifest"), **_HP, **_WINDOW,
              "variant": (str, "srddl", "one of " + ", ".join(VARIANTS)),
              "checkpoint_out": (str, None, "checkpoint path (default OUT/checkpoint.zip)")},
    "predict": {"checkpoint": (str, None, "trained checkpoint"),
                "manifest": (str, None, "manifest of subjects to score"), **_WINDOW},
    "evaluate": {"manifest": (str, None, "cohort manifest"), **_HP, **_WINDOW,
                 "variant": (str, "srddl", "one of " + ", ".join(CV_VARIANTS)),
                 "folds": (int, 5, "cross-validation folds"),
                 "bins": (int, None, "NMI bins (default ceil(sqrt(N)))"),
                 "standardize": (_flag, False, "standardize scores per training fold")},
    "sweep": {"axis": (str, None, "sigma_b, sigma_gamma, sigma_y, lambda, window_length "
                                  "or stride"),
              "grid": (_grid, None, "comma-separated values"),
              "trials": (int, 10, "trials per value (noise axes)"),
              "n_heldout": (int, 15, "held-out subjects per trial (noise axes)"),
              "manifest": (str, None, "cohort manifest (lambda and window axes)"),
              "variant": (str, "srddl", "model variant (cohort axes)"),
              "folds": (int, 5, "cross-validation folds (cohort axes)"),
              **_HP, **_WINDOW, **_SYNTH,
              "k": (int, None, "number of basis networks (default: synth-k on noise axes, "
                               "15 otherwise)")},
    "scree": {"manifest": (str, None, "cohort manifest"), **_WINDOW},
}
_REQUIRED = {"simulate": ["out"], "train": ["manifest"], "predict": ["checkpoint", "manifest", "out"],
             "evaluate": ["manifest", "out"], "sweep": ["axis", "grid", "out"],
             "scree": ["manifest", "out"]}


def build_parser():
    parser = _Parser(prog="srddl", description="Dynamic connectome factorization with "
                                               "joint score prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        for key, (kind, default, text) in {**_COMMON, **options}.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=kind,
                           help=f"{text} (default: {default})" if default is not None else text)
    return parser


def resolve(command, provided):
    """Merge defaults, the config file and explicit flags into one dict."""
    options = {**_COMMON, **COMMANDS[command]}
    resolved = {key: default for key, (_, default, _) in options.items()}
    config_path = provided.pop("config", None)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        if from_file.pop("command", command) != command:
            raise UsageError("config was written for another subcommand")
        unknown = sorted(set(from_file) - set(options))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        for key, value in from_file.items():
            kind = options[key][0]
            try:
                resolved[key] = None if value is None else kind(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    resolved.update(provided)
    missing = [k for k in _REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _hp(cfg, **extra):
    try:
        return HyperParams(k=cfg["k"], lambda_tradeoff=cfg["lambda"], gamma=cfg["gamma"],
                           main_iters=cfg["iters"], epochs=cfg["epochs"],
                           coeff_steps=cfg["coeff_steps"], primal_dual_cycles=cfg["cycles"],
                           eta0=cfg["eta0"], hidden=cfg["hidden"], head_width=cfg["head_width"],
                           clip_norm=cfg["clip_norm"], **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _window(cfg):
    if cfg.get("window") is None and cfg.get("stride") is None:
        return None
    if cfg.get("window") is None or cfg.get("stride") is None:
        raise UsageError("--window and --stride must be given together")
    try:
        return WindowSpec(cfg["window"], cfg["stride"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _synth(cfg, seed):
    prior = cfg["edge_prior"]
    if cfg.get("edge_prior_file"):
        prior = read_matrix_csv(cfg["edge_prior_file"])
    try:
        return SynthConfig(n_subjects=cfg["n_subjects"], k=cfg["synth_k"], m=cfg["m"],
                           t=cfg["t"], p=cfg["p"], sigma_c=cfg["sigma_c"],
                           sigma_b=cfg["sigma_b"], sigma_gamma=cfg["sigma_gamma"],
                           sigma_y=cfg["sigma_y"], edge_prior=prior,
                           length_scale=cfg["length_scale"], seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cohort(cfg, need_scores=True):
    path = Path(cfg["manifest"])
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    cohort = load_manifest(path, _window(cfg))
    if need_scores and cohort.scores is None:
        raise UsageError(f"{path} names no score table")
    return cohort


def _progress(record):
    logger.info("iteration", extra={"data": {"event": "iteration", **record}})


def cmd_simulate(cfg, out):
    synth = _synth(cfg, cfg["seed"])
    subjects, scores, truth = generate(synth, n_extra=cfg["n_heldout"])
    n = synth.n_subjects
    write_cohort(out / "cohort", subjects[:n], scores[:n])
    if cfg["n_heldout"]:
        write_cohort(out / "heldout", subjects[n:], scores[n:])
    save_ground_truth(out / "ground_truth.zip", truth, synth.to_dict())
    logger.info("cohort written", extra={"data": {"subjects": n, "heldout": cfg["n_heldout"]}})


def cmd_train(cfg, out):
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"--variant must be one of {VARIANTS}")
    cohort = _cohort(cfg)
    hp = _hp(cfg)
    target = Path(cfg["checkpoint_out"]) if cfg["checkpoint_out"] else out / "checkpoint.zip"
    try:
        state = fit_variant(cfg["variant"], cohort.subjects, cohort.scores, hp, cfg["seed"],
                            _progress)
    except NumericalFailure as exc:
        good = getattr(exc, "state", None)
        if good is not None:
            exc.checkpoint = str(save_checkpoint(target.with_suffix(".last_good.zip"), good))
        raise
    save_checkpoint(target, state)
    atomic_write(out / "history.json", to_json({"history": state.history,
                                                "residuals": state.residuals,
                                                "network_losses": state.net_losses,
                                                "stopped_early": state.stopped_early}))
    logger.info("checkpoint written", extra={"data": {"path": str(target),
                                                      "iterations": state.iteration}})


def cmd_predict(cfg, out):
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    cohort = _cohort(cfg, need_scores=False)
    results = infer_new(state, cohort.subjects)
    m = state.params.n_outputs
    names = [f"score_{j + 1}" for j in range(m)]
    doc = {"format": "srddl-predictions", "version": 1, "checkpoint": path.name,
           "score_names": names,
           "subjects": [{"subject_id": track.subject_id, "scores": trace.prediction,
                         "attention": trace.attention, "loadings": track.c}
                        for track, trace in results]}
    _validated(doc, "prediction")
    atomic_write(out / "predictions.json", to_json(doc))
    atomic_write(out / "predictions.csv",
                 scores_csv([t.subject_id for t, _ in results],
                            np.stack([tr.prediction for _, tr in results]), names))


def _validated(doc, schema):
    # round trip through JSON so the check sees exactly what is written
    jsonschema.validate(json.loads(to_json(doc)), load_schema(schema))
    return doc


def _attention_rows(details):
    width = max(a.size for a in details.attention)
    rows = []
    for sid, fold, att in zip(details.subject_ids, details.folds, details.attention):
        row = {"subject_id": sid, "fold": fold}
        row.update({f"w_{t + 1}": (float(att[t]) if t < att.size else "") for t in range(width)})
        rows.append(row)
    return rows


def cmd_evaluate(cfg, out):
    if cfg["variant"] not in CV_VARIANTS:
        raise UsageError(f"--variant must be one of {CV_VARIANTS}")
    cohort = _cohort(cfg)
    report = run_cv(cohort.subjects, cohort.scores, _hp(cfg), cfg["variant"], cfg["seed"],
                    cfg["folds"], cfg["bins"], cfg["standardize"])
    details = report.details
    atomic_write(out / "metric_report.json", to_json(_validated(report.to_dict(), "metric_report")))
    pred_rows = []
    for sid, fold, pred in zip(details.subject_ids, details.folds, details.test_predictions):
        row = {"subject_id": sid, "fold": fold}
        row.update({name: float(v) for name, v in zip(report.score_names, pred)})
        pred_rows.append(row)
    atomic_write(out / "predictions.csv", rows_csv(pred_rows))
    atomic_write(out / "attention.csv", rows_csv(_attention_rows(details)))
    logger.info("evaluation done", extra={"data": {"mae_test": report.mae_test}})


def cmd_sweep(cfg, out):
    axis, grid = cfg["axis"], cfg["grid"]
    if not grid:
        raise UsageError("--grid is empty")
    if axis in NOISE_AXES:
        base = _synth(cfg, cfg["seed"])
        hp = _hp(dict(cfg, k=base.k if cfg["k"] is None else cfg["k"]))
        rows = noise_sweep(axis, grid, cfg["trials"], base, hp, cfg["seed"], cfg["n_heldout"],
                           callback=lambda r: logger.info("trial", extra={"data": r}))
    elif axis in ("lambda", "window_length", "stride"):
        if cfg["manifest"] is None:
            raise UsageError(f"axis {axis} needs --manifest")
        cohort = _cohort(cfg)
        if axis == "lambda":
            data = cohort.subjects
        elif cohort.raw is None or cohort.window is None:
            raise UsageError("window sweeps need a manifest with time series and a window")
        else:
            data = cohort.raw
        hp = _hp(dict(cfg, k=15 if cfg["k"] is None else cfg["k"]))
        rows = sweep(data, cohort.scores, axis, grid, hp, cfg["variant"], cfg["seed"],
                     cfg["folds"], cohort.window, cohort.residualize)
    else:
        raise UsageError(f"unknown sweep axis {axis!r}")
    atomic_write(out / "sweep.csv", rows_csv(rows))


def cmd_scree(cfg, out):
    cohort = _cohort(cfg, need_scores=False)
    atomic_write(out / "scree.csv", rows_csv(scree_export(cohort.subjects)))


_HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict,
             "evaluate": cmd_evaluate, "sweep": cmd_sweep, "scree": cmd_scree}


def _fail(kind, message, code, **extra):
    sys.stderr.write(json.dumps({"event": "error", "kind": kind, "message": message, **extra})
                     + "\n")
    return code


def main(argv=None):
    """Parse ``argv`` and run the subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command", None)
        if command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        cfg = resolve(command, args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)

    for key in ("manifest", "checkpoint", "edge_prior_file"):
        if cfg.get(key) is not None and not Path(cfg[key]).is_file():
            return _fail("usage", f"--{key.replace('_', '-')}: no such file {cfg[key]}", 2)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    logging.captureWarnings(True)
    for log in (logger, logging.getLogger("py.warnings")):
        log.handlers[:] = [handler]
        log.propagate = False
    try:
        logger.setLevel(cfg["log_level"].upper())
    except ValueError:
        return _fail("usage", f"unknown log level {cfg['log_level']!r}", 2)

    if command == "train" and cfg["out"] is None:
        cfg["out"] = str(Path(cfg["checkpoint_out"]).parent) if cfg["checkpoint_out"] else "."
    out = Path(cfg["out"])
    started = time.perf_counter()
    try:
        atomic_write(out / "resolved_config.json", to_json({"command": command, **cfg}))
        with threadpool_limits(limits=cfg["threads"]):
            _HANDLERS[command](cfg, out)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except NumericalFailure as exc:
        return _fail("numerical", str(exc), 3, step=exc.step,
                     checkpoint=getattr(exc, "checkpoint", None))
    except (OSError, ValueError, ContractViolation) as exc:
        return _fail("input", str(exc), 2)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", 130)
    logger.info("done", extra={"data": {"command": command,
                                        "seconds": round(time.perf_counter() - started, 3)}})
    return 0


if __name__ == "__main__":
    sys.exit(main())
