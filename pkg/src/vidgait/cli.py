"""Command-line front end: synth, train, analyze, calibrate, screen, eval.

Every command resolves its settings as defaults < ``--config`` JSON file <
flags and writes the result to ``config.json`` in its output directory.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("vidgait")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESERVED_JSON = {"manifest.json", "config.json", "analysis.json", "calibration.json", "screen.json",
                 "report.json", "train_summary.json"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config layering


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _resolve(command: str, defaults: dict, args, flag_map: dict) -> dict:
    """defaults < config file section < flags that were given."""
    file_cfg = _read_config_file(getattr(args, "config", None))
    sections = {k: v for k, v in file_cfg.items() if k in ("model", "smoother", "calib")}
    cfg = _merge(defaults, sections)
    cfg = _merge(cfg, file_cfg.get(command, {}))
    if "seed" in file_cfg and "seed" not in file_cfg.get(command, {}):
        cfg["seed"] = file_cfg["seed"]
    for attr, path in flag_map.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = list(val) if isinstance(val, tuple) else val
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg["command"] = command
    return cfg


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    if getattr(args, "out", None) is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _trial_files(data) -> list:
    data = Path(data)
    if data.is_file():
        return [data]
    if not data.is_dir():
        raise UsageError(f"no such trial file or directory: {data}")
    manifest = data / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        return [data / f for f in doc["files"]]
    return sorted(p for p in data.glob("*.json") if p.name not in RESERVED_JSON)


def _load_all(files):
    """(trials sorted by id, failures) where failures are unreadable files."""
    from .core import TrialFormatError, load_trial

    trials, failures = [], []
    for f in files:
        try:
            trials.append(load_trial(f))
        except (OSError, ValueError, TrialFormatError, KeyError, TypeError) as exc:
            failures.append({"file": f.name, "error": str(exc)})
    trials.sort(key=lambda t: t.id)
    return trials, failures


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .core import save_trial
    from .synth import DEFAULT_RANGES, GaitSpec, InfeasibleSpecError, make_dataset

    defaults = {"n": 10, "seed": 0, "prefix": "synth", "noise_sigma_m": 0.0, "fps": 30.0,
                "ranges": {k: list(v) for k, v in DEFAULT_RANGES.items()}}
    flags = {"n": ("n",), "noise": ("noise_sigma_m",), "fps": ("fps",), "prefix": ("prefix",),
             "cadence": ("ranges", "cadence_spm"), "step_length": ("ranges", "step_length_m"),
             "height": ("ranges", "height_m"), "duration": ("ranges", "duration_s"),
             "first_contact": ("ranges", "first_contact_frac")}
    cfg = _resolve("synth", defaults, args, flags)
    out = _out_dir(args)
    ranges = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["ranges"].items()}
    try:
        base = GaitSpec(fps=float(cfg["fps"]), noise_sigma_m=float(cfg["noise_sigma_m"]))
        trials = make_dataset(int(cfg["n"]), ranges, seed=int(cfg["seed"]), base=base, prefix=cfg["prefix"])
    except (InfeasibleSpecError, ValueError, TypeError) as exc:
        raise UsageError(f"infeasible synthesis settings: {exc}") from exc
    files = []
    for t in trials:
        name = f"{t.id}.json"
        save_trial(t, out / name)
        files.append(name)
    _write_json(out / "manifest.json", {"n": len(files), "seed": cfg["seed"], "files": files})
    _write_json(out / "config.json", cfg)
    log.info("wrote %d trials to %s", len(files), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .model import ModelConfig, NonFiniteError
    from .training import TrainingDivergedError, has_targets, save_checkpoint, train

    defaults = {"seed": 0, "model": ModelConfig().to_dict()}
    flags = {"epochs": ("model", "epochs"), "lr": ("model", "lr"), "layers": ("model", "layers"),
             "heads": ("model", "heads"), "embed_dim": ("model", "embed_dim"),
             "mlp_hidden": ("model", "mlp_hidden"), "dropout": ("model", "dropout_p"),
             "consistency_weight": ("model", "consistency_weight"), "data": ("data",)}
    cfg = _resolve("train", defaults, args, flags)
    if "data" not in cfg:
        raise UsageError("train needs --data")
    cfg["model"]["seed"] = cfg["seed"]
    try:
        mcfg = ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc
    cfg["model"] = mcfg.to_dict()
    out = _out_dir(args)
    trials, failures = _load_all(_trial_files(cfg["data"]))
    if failures:
        raise DataError("unreadable trial files: " + ", ".join(f["file"] for f in failures))
    usable = [t for t in trials if has_targets(t)]
    skipped = len(trials) - len(usable)
    if skipped:
        log.warning("skipped %d trial(s) without ground-truth targets", skipped)
    if not usable:
        raise DataError("no trials with targets to train on")
    try:
        result = train(usable, mcfg, progress=lambda e, v: log.info("epoch %d loss %.6g", e, v))
    except (TrainingDivergedError, NonFiniteError) as exc:
        raise NumericalError(str(exc)) from exc
    params, trace = result.params, result.loss_trace
    save_checkpoint(out / "model.ckpt", params, mcfg, epochs=mcfg.epochs)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    skipped += result.skipped
    _write_json(out / "train_summary.json", {"trials": len(usable) - result.skipped, "skipped": skipped,
                                             "epochs": mcfg.epochs,
                                             "initial_loss": trace[0], "final_loss": trace[-1]})
    _write_json(out / "config.json", cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _analyze_trial(trial, params, mcfg, scfg, oracle: bool):
    from .model import ModelOutput
    from .phase_codec import encode
    from .smoother import detect_events, reconstruction_residual, smooth
    from .training import infer

    if oracle:
        if trial.gt_kinematics is None or trial.gt_events is None:
            raise DataError("oracle mode needs ground-truth kinematics and events")
        _, q = encode(trial.gt_events, trial.times)
        out = ModelOutput(kinematics=np.asarray(trial.gt_kinematics), phase_q=q)
    else:
        out = infer(trial, params, mcfg)
    kin = np.asarray(out.kinematics)
    q = np.asarray(out.phase_q)
    track = smooth(q, trial.dt, scfg)
    detected = detect_events(track, min_spacing_s=scfg.min_spacing_s)
    return kin, q, track, detected, reconstruction_residual(q, track)


def cmd_analyze(args) -> int:
    from .evaluation import event_rows, write_events
    from .gait_params import param_row, trial_parameters, write_parameters
    from .model import NonFiniteError
    from .smoother import SmootherConfig, SmootherError
    from .training import CheckpointError, load_checkpoint

    defaults = {"seed": 0, "oracle_kinematics": False, "smoother": SmootherConfig().to_dict()}
    flags = {"data": ("data",), "checkpoint": ("checkpoint",), "oracle_kinematics": ("oracle_kinematics",)}
    cfg = _resolve("analyze", defaults, args, flags)
    if "data" not in cfg:
        raise UsageError("analyze needs --data")
    oracle = bool(cfg["oracle_kinematics"])
    if not oracle and not cfg.get("checkpoint"):
        raise UsageError("analyze needs --checkpoint unless --oracle-kinematics is set")
    try:
        scfg = SmootherConfig.from_dict(cfg["smoother"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad smoother config: {exc}") from exc
    cfg["smoother"] = scfg.to_dict()
    params = mcfg = None
    if not oracle:
        try:
            params, mcfg, _ = load_checkpoint(cfg["checkpoint"])
        except (OSError, KeyError, ValueError, CheckpointError) as exc:
            raise DataError(f"cannot load checkpoint: {exc}") from exc
    out = _out_dir(args)
    trials, failures = _load_all(_trial_files(cfg["data"]))
    numeric_failure = False
    ev_rows, p_rows, residuals = [], [], []
    for trial in trials:
        try:
            kin, q, track, detected, resid = _analyze_trial(trial, params, mcfg, scfg, oracle)
            est = trial_parameters(detected, kin, trial.fps)
        except DataError as exc:
            failures.append({"trial_id": trial.id, "error": str(exc)})
            continue
        except (NonFiniteError, SmootherError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failures.append({"trial_id": trial.id, "error": f"numerical: {exc}"})
            numeric_failure = True
            continue
        ev_rows += event_rows(trial.id, detected, "detected")
        p_rows += [param_row(trial.id, p, "est") for p in est]
        if trial.gt_events is not None:
            ev_rows += event_rows(trial.id, trial.gt_events, "ground_truth")
            if trial.gt_kinematics is not None:
                gt = trial_parameters(trial.gt_events, trial.gt_kinematics, trial.fps)
                p_rows += [param_row(trial.id, p, "gt") for p in gt]
        residuals.append((trial.id, resid))
    write_events(out / "events.csv", ev_rows)
    write_parameters(out / "params.csv", p_rows)
    with open(out / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "reconstruction_residual"])
        for tid, r in residuals:
            w.writerow([tid, repr(r)])
    _write_json(out / "analysis.json", {"analyzed": len(residuals), "failures": failures,
                                        "mode": "oracle_kinematics" if oracle else "model"})
    _write_json(out / "config.json", cfg)
    if failures:
        for f in failures:
            log.error("failed: %s: %s", f.get("file", f.get("trial_id")), f["error"])
        return EXIT_NUMERIC if numeric_failure else EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate / screen


def cmd_calibrate(args) -> int:
    from .calib import (CalibConfig, CalibrationError, DegenerateGeometryError, calibrate, load_problem,
                        save_problem, synthetic_problem)

    defaults = {"seed": 0, "calib": asdict(CalibConfig()), "noise_px": 0.0}
    flags = {"problem": ("problem",), "synthetic_offset": ("synthetic_offset",), "noise_px": ("noise_px",),
             "delta_px": ("calib", "delta_px"), "max_iters": ("calib", "max_iters"),
             "window": ("calib", "offset_window_s")}
    cfg = _resolve("calibrate", defaults, args, flags)
    try:
        ccfg = CalibConfig(**cfg["calib"])
    except TypeError as exc:
        raise UsageError(f"bad calibration config: {exc}") from exc
    out = _out_dir(args)
    truth = None
    if cfg.get("problem"):
        try:
            problem = load_problem(cfg["problem"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read problem: {exc}") from exc
    elif cfg.get("synthetic_offset") is not None:
        problem, camera = synthetic_problem(float(cfg["synthetic_offset"]), float(cfg["noise_px"]),
                                            seed=int(cfg["seed"]))
        save_problem(problem, out / "problem.json")
        truth = {"offset_s": float(cfg["synthetic_offset"]), "camera": camera.to_dict()}
    else:
        raise UsageError("calibrate needs --problem or --synthetic-offset")
    try:
        result = calibrate(problem, ccfg)
    except (DegenerateGeometryError, CalibrationError) as exc:
        raise DataError(str(exc)) from exc
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise NumericalError(str(exc)) from exc
    report = result.to_dict()
    if truth is not None:
        report["true_offset_s"] = truth["offset_s"]
        report["offset_error_s"] = result.offset - truth["offset_s"]
    _write_json(out / "calibration.json", report)
    _write_json(out / "config.json", cfg)
    return EXIT_OK


def cmd_screen(args) -> int:
    from .calib import screen_trial

    defaults = {"seed": 0, "frac_missing": 0.0, "bbox_swapped": False, "events_valid": True}
    flags = {"result": ("result",), "frac_missing": ("frac_missing",), "bbox_swapped": ("bbox_swapped",),
             "sync_frames": ("sync_frames",), "events_valid": ("events_valid",)}
    cfg = _resolve("screen", defaults, args, flags)
    if not cfg.get("result"):
        raise UsageError("screen needs --result")
    try:
        res = json.loads(Path(cfg["result"]).read_text())
        summary = {"mean_huber": float(res["mean_huber_px"]), "offset": float(res["offset_s"])}
        sync_frames = int(cfg["sync_frames"] if cfg.get("sync_frames") is not None else res["sync_frames"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read calibration result: {exc}") from exc
    decision = screen_trial(summary, {"frac_missing": float(cfg["frac_missing"]),
                                      "bbox_swapped": bool(cfg["bbox_swapped"])},
                            sync_frames, bool(cfg["events_valid"]))
    out = _out_dir(args)
    _write_json(out / "screen.json", {"accepted": decision.accepted, "reasons": list(decision.reasons)})
    _write_json(out / "config.json", cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .evaluation import (CONTACT_TYPES, OFF_TYPES, EventTable, TrialEvaluation, build_report, match_events,
                             pair_parameters, params_from_rows, read_events, write_histogram, write_report,
                             write_scatter)
    from .gait_params import read_parameters

    defaults = {"seed": 0, "bin_s": 0.01}
    flags = {"events": ("events",), "params": ("params",), "bin_s": ("bin_s",)}
    cfg = _resolve("eval", defaults, args, flags)
    if not cfg.get("events") or not cfg.get("params"):
        raise UsageError("eval needs --events and --params")
    try:
        tables = read_events(cfg["events"])
        rows = read_parameters(cfg["params"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read tables: {exc}") from exc
    ids = sorted({tid for tid, src in tables if src == "ground_truth"})
    by = {}
    for r in rows:
        by.setdefault((r["trial_id"], r["source"]), []).append(r)
    none_found = EventTable(*(np.zeros(0),) * 4)
    trials = []
    for tid in ids:
        det = tables.get((tid, "detected"), none_found)
        trials.append(TrialEvaluation(tid, det, tables[(tid, "ground_truth")],
                                      params_from_rows(by.get((tid, "est"), [])),
                                      params_from_rows(by.get((tid, "gt"), []))))
    report = build_report(trials)
    out = _out_dir(args)
    write_report(out / "report.json", report)
    groups = {"contact": [], "off": []}
    pairs = []
    for tr in trials:
        m = match_events(tr.detected, tr.truth)
        groups["contact"] += list(m.errors(CONTACT_TYPES))
        groups["off"] += list(m.errors(OFF_TYPES))
        if tr.trial_id not in report.outliers:
            pairs += pair_parameters(tr.est_params, tr.gt_params)
    write_histogram(out / "histogram.csv", groups, float(cfg["bin_s"]))
    write_scatter(out / "scatter.csv", pairs)
    _write_json(out / "config.json", cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with settings (overridden by flags)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="vidgait", description="Gait analysis from 3D keypoint sequences.", parents=[common])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write synthetic trials")
    s.add_argument("--n", type=int)
    s.add_argument("--noise", type=float, help="joint noise sigma in metres")
    s.add_argument("--fps", type=float)
    s.add_argument("--prefix")
    for name in ("cadence", "step-length", "height", "duration", "first-contact"):
        s.add_argument(f"--{name}", type=float, nargs=2, metavar=("LO", "HI"))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train the gait model")
    t.add_argument("--data", help="trial directory or file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--mlp-hidden", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--consistency-weight", type=float)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", parents=[common], help="events and gait parameters for trials")
    a.add_argument("--data")
    a.add_argument("--checkpoint")
    a.add_argument("--oracle-kinematics", action="store_true", default=None,
                   help="use ground-truth channels instead of the model")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("calibrate", parents=[common], help="camera and time-offset calibration")
    c.add_argument("--problem", help="SyncProblem JSON file")
    c.add_argument("--synthetic-offset", type=float, help="generate a synthetic problem with this offset (s)")
    c.add_argument("--noise-px", type=float)
    c.add_argument("--delta-px", type=float)
    c.add_argument("--max-iters", type=int)
    c.add_argument("--window", type=float, help="offset search half-width (s)")
    c.set_defaults(func=cmd_calibrate)

    sc = sub.add_parser("screen", parents=[common], help="apply trial inclusion rules")
    sc.add_argument("--result", help="calibration.json from calibrate")
    sc.add_argument("--frac-missing", type=float)
    sc.add_argument("--bbox-swapped", action="store_true", default=None)
    sc.add_argument("--sync-frames", type=int)
    sc.add_argument("--events-invalid", dest="events_valid", action="store_false", default=None)
    sc.set_defaults(func=cmd_screen)

    e = sub.add_parser("eval", parents=[common], help="agreement report from analyze tables")
    e.add_argument("--events")
    e.add_argument("--params")
    e.add_argument("--bin-s", type=float)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vidgait {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"vidgait {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"vidgait {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
