"""Command line entry point: ``hmpcnn <subcommand> [--config FILE] [--seed S] [--out DIR] [--threads K]``.

Every subcommand resolves its configuration (defaults, then the config file,
then ``--seed``), runs one pipeline and writes its artifacts atomically into
the output directory (``--out``, else ``$HMPCNN_OUT``, else ``./hmpcnn_out``).
Data artifacts embed the config hash, seed and tool version and contain no
timestamps; wall-clock information goes to ``<subcommand>.meta.json``.
Failures print a JSON error record on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
import time

from . import __version__

OUT_ENV = "HMPCNN_OUT"
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 1

_MODEL = {"level": 1, "family": {"family": "affine-clamped", "gain": 4.0, "bias_range": [0.0, 0.0]},
          "seed": 3, "d1": 8, "d2": 8, "calibrate": True, "gamma": 0.0}
_SCHEDULE = {"p": 1.0, "c1": 1.0, "c2": 1.0, "c3": 1.0, "c4": 8, "c5": 7, "scale": 0.1}
_TRAIN = {"optimizer": "adam", "step_size": 0.01, "schedule": "cosine", "epochs": 200, "batch_size": 64,
          "steps": 3000, "restarts": 3, "init_scale": 1.0, "init_bias": 0.1, "float32": True}

DEFAULTS = {
    "gen-model": {"seed": 0, "model": _MODEL},
    "sample": {"seed": 0, "model_path": "", "model": _MODEL, "n": 1024, "law": "uniform", "csv": False},
    "train": {"seed": 0, "model_path": "", "model": _MODEL, "dataset_path": "", "n": 1024,
              "schedule": _SCHEDULE, "train": _TRAIN},
    "eval-risk": {"seed": 0, "model_path": "", "model": _MODEL, "weights_path": "", "mc": 100000},
    "rate-sweep": {"seed": 0, "model": _MODEL, "ns": [256, 512, 1024, 2048, 4096], "reps": 5, "mc": 20000,
                   "schedule": _SCHEDULE, "train": _TRAIN},
    "lemma7": {"seed": 0, "Ks": [6, 12, 24, 48], "points": 10000, "gap_points": 200001},
    "compile-cnn": {"seed": 0, "level": 2, "d": 8, "L_net": 2, "r_net": 4, "images": 1000},
    "check-bounds": {"seed": 0, "eps": [0.5, 0.25, 0.125, 0.0625], "n": 4096, "c1": 1.0, "c10": 1.0,
                     "model": _MODEL, "schedule": _SCHEDULE, "cover_budget": 200, "cover_points": 256},
    "check-lemma1": {"seed": 0, "models": {"plain": _MODEL, "sharp": {**_MODEL, "gamma": 8.0},
                                           "level2": {"level": 2, "family": "soft-max-blend", "seed": 5,
                                                      "d1": 8, "d2": 8, "calibrate": False, "gamma": 0.0}},
                     "n_train": 2048, "mc": 100000, "gammas": [2.0, 4.0, 8.0], "Fs": [1.0, 2.0, 3.0],
                     "c8": 4.0, "schedule": _SCHEDULE, "train": _TRAIN},
    "check-lemma8": {"seed": 0, "trials": 1000, "levels": [1, 2]},
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InputMissing(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# config handling


def _merge(default, given, path: str):
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(path, f"expected a mapping, got {type(given).__name__}")
        # free-form mappings: model families and named model lists
        if path.endswith(("family", "models")):
            return copy.deepcopy(given)
        out = copy.deepcopy(default)
        for k, v in given.items():
            if k not in default:
                raise ConfigError(f"{path}.{k}".lstrip("."), "unknown key")
            out[k] = _merge(default[k], v, f"{path}.{k}")
        return out
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(path.lstrip("."), "expected true/false")
        return given
    if isinstance(default, (int, float)):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(path.lstrip("."), f"expected a number, got {given!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not float(given).is_integer():
            raise ConfigError(path.lstrip("."), f"expected an integer, got {given!r}")
        return type(default)(given)
    if isinstance(default, list):
        if not isinstance(given, list):
            raise ConfigError(path.lstrip("."), "expected a list")
        return given
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(path.lstrip("."), "expected a string")
        return given
    return given


def load_config(command: str, path: str | None, seed: int | None) -> dict:
    raw = {}
    if path:
        if not os.path.exists(path):
            raise InputMissing(f"config file not found: {path}")
        import yaml
        with open(path) as fh:
            text = fh.read()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML/JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "top level must be a mapping")
    cfg = _merge(DEFAULTS[command], raw, "")
    if seed is not None:
        cfg["seed"] = int(seed)
    if not 0 <= int(cfg["seed"]) < 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# output


class Writer:
    def __init__(self, out: str, command: str, cfg: dict):
        self.out, self.command, self.cfg = out, command, cfg
        self.stamp = {"config_hash": config_hash(cfg), "seed": int(cfg["seed"]), "tool_version": __version__}
        self.files: list[str] = []
        os.makedirs(out, exist_ok=True)

    def _atomic(self, name: str, data: bytes) -> str:
        path = os.path.join(self.out, name)
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
        self.files.append(name)
        return path

    def json(self, name: str, obj: dict) -> str:
        body = {**self.stamp, **obj}
        return self._atomic(name, (json.dumps(_plain(body), indent=1, sort_keys=True) + "\n").encode())

    def csv(self, name: str, rows: list[dict]) -> str:
        buf = io.StringIO(newline="")
        cols = list(rows[0]) + list(self.stamp) if rows else list(self.stamp)
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in {**r, **self.stamp}.items()})
        return self._atomic(name, buf.getvalue().encode())

    def raw(self, name: str, data: bytes) -> str:
        return self._atomic(name, data)

    def meta(self, started: float, summary: str) -> None:
        meta = {**self.stamp, "command": self.command, "argv": sys.argv[1:], "files": self.files,
                "started_unix": started, "wall_seconds": time.time() - started, "summary": summary}
        self._atomic(f"{self.command}.meta.json", (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())
        self.files.pop()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _plain(obj):
    import numpy as np
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


def _read(path: str, what: str) -> bytes:
    if not path:
        raise ConfigError(f"{what}_path", "required")
    if not os.path.exists(path):
        raise InputMissing(f"missing {what} artifact: expected {path}")
    with open(path, "rb") as fh:
        return fh.read()


# --------------------------------------------------------------------------
# subcommands


def _model(cfg: dict):
    from .experiments import build_model
    from .hmp_model import HmpModel
    if cfg.get("model_path"):
        return HmpModel.loads(_read(cfg["model_path"], "model").decode())
    spec = dict(cfg["model"])
    try:
        return build_model(spec)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from None


def _sweep_settings(cfg: dict, **extra):
    from .experiments import SweepSettings
    from .training import TrainConfig
    try:
        tc = TrainConfig(**cfg["train"])
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
    return SweepSettings(train=tc, seed=int(cfg["seed"]), **cfg["schedule"], **extra)


def cmd_gen_model(cfg, w: Writer) -> str:
    model = _model(cfg)
    blob = (model.dumps() + "\n").encode()
    w.raw("model.json", blob)
    w.json("gen-model.json", {"model_id": model.model_id, "lipschitz": model.lipschitz, "nodes": len(model.nodes),
                              "sha256": hashlib.sha256(blob).hexdigest()})
    return f"model {model.model_id} level {model.level} ({len(model.nodes)} nodes)"


def cmd_sample(cfg, w: Writer) -> str:
    from .synth_data import dataset_to_bytes, dataset_to_csv, sample_dataset
    model = _model(cfg)
    if cfg["n"] < 1:
        raise ConfigError("n", "must be >= 1")
    if cfg["law"] not in ("uniform", "texture"):
        raise ConfigError("law", "must be 'uniform' or 'texture'")
    ds = sample_dataset(model, cfg["n"], cfg["seed"], cfg["law"])
    blob = dataset_to_bytes(ds)
    w.raw("dataset.hmpd", blob)
    if cfg["csv"]:
        w.raw("dataset.csv", dataset_to_csv(ds).encode())
    w.json("sample.json", {"model_id": model.model_id, "n": len(ds), "positives": int((ds.labels == 1).sum()),
                           "sha256": hashlib.sha256(blob).hexdigest()})
    return f"{len(ds)} samples from model {model.model_id}"


def cmd_train(cfg, w: Writer) -> str:
    from .cnn_model import weights_to_bytes
    from .experiments import train_for_n
    from .synth_data import dataset_from_bytes, sample_dataset
    model = _model(cfg)
    if cfg["dataset_path"]:
        ds = dataset_from_bytes(_read(cfg["dataset_path"], "dataset"))
    else:
        ds = sample_dataset(model, cfg["n"], cfg["seed"])
    n = min(cfg["n"], len(ds))
    st = _sweep_settings(cfg)
    pred, report, sch = train_for_n(model, ds, n, st, cfg["seed"])
    blob = weights_to_bytes(pred.cnn_arch, pred.cnn, pred.fnn_arch, pred.fnn, pred.beta)
    w.raw("weights.hmpw", blob)
    rep = report.to_dict()
    rep.pop("wall_time")
    w.json("train.json", {"n": n, "schedule": sch.to_dict(), "report": rep,
                          "weights_sha256": hashlib.sha256(blob).hexdigest()})
    return f"trained on n={n}: best loss {report.best_loss:.4f} (restart {report.chosen_restart})"


def cmd_eval_risk(cfg, w: Writer) -> str:
    from .cnn_model import Predictor, weights_from_bytes
    from .risk_bounds import calibration_check, mc_risks, zhang_check
    model = _model(cfg)
    d = weights_from_bytes(_read(cfg["weights_path"], "weights"))
    pred = Predictor(d["cnn_arch"], d["fnn_arch"], d["cnn"], d["fnn"], d["beta"])
    rep = mc_risks(pred.classify, pred, model, cfg["mc"], cfg["seed"])
    w.json("risk.json", {"model_id": model.model_id, "risk": rep, "sqrt_check": zhang_check(rep),
                         "calibration_check": calibration_check(rep)})
    return f"excess01 {rep.excess01:.5f} +- {rep.se_excess01:.5f}, excess_phi {rep.excess_phi:.5f}"


def cmd_rate_sweep(cfg, w: Writer) -> str:
    from .experiments import rate_sweep
    from .risk_bounds import fit_rate_slope
    model = _model(cfg)
    st = _sweep_settings(cfg, ns=tuple(cfg["ns"]), reps=cfg["reps"], mc=cfg["mc"])
    if len(cfg["ns"]) < 3:
        raise ConfigError("ns", "need at least 3 grid points")
    res = rate_sweep(model, st)
    fit = fit_rate_slope(res, seed=cfg["seed"])
    w.csv("sweep.csv", res.to_rows())
    w.json("slope.json", {"model_id": model.model_id, "ns": res.ns, "mean_excess01": res.mean01,
                          "stderr_mean01": res.stderr01(), "mean_excessphi": res.mean_phi, "fit": fit,
                          "scale": res.scale})
    return f"slope {fit['slope']:.3f} CI [{fit['ci'][0]:.3f}, {fit['ci'][1]:.3f}]"


def cmd_lemma7(cfg, w: Writer) -> str:
    from .experiments import lemma7_gap_sweep, lemma7_report
    Ks = [int(k) for k in cfg["Ks"]]
    if min(Ks) < 6:
        raise ConfigError("Ks", "every K must be >= 6")
    reps = [lemma7_report(K, cfg["points"]) for K in Ks]
    gap = lemma7_gap_sweep(tuple(Ks), cfg["gap_points"]) if len(Ks) >= 2 else None
    w.csv("lemma7.csv", reps)
    w.json("lemma7.json", {"exactness": reps, "loss_gap": gap})
    return f"max network-vs-direct deviation {max(r['max_deviation'] for r in reps):.3e}"


def cmd_compile_cnn(cfg, w: Writer) -> str:
    from .cnn_model import weights_to_bytes
    from .constructions import compile_hmp_to_cnn, random_node_nets
    from .experiments import compile_check
    if 2 ** cfg["level"] > cfg["d"]:
        raise ConfigError("d", "image smaller than the 2^level window")
    nets = random_node_nets(cfg["level"], cfg["L_net"], cfg["r_net"], cfg["seed"])
    arch, weights = compile_hmp_to_cnn(nets, cfg["level"], cfg["d"], cfg["d"])
    blob = weights_to_bytes(arch, weights)
    w.raw("compiled.hmpw", blob)
    chk = compile_check(cfg["level"], cfg["d"], cfg["L_net"], cfg["r_net"], cfg["images"], cfg["seed"])
    w.json("compile.json", {**chk, "weights_sha256": hashlib.sha256(blob).hexdigest()})
    return f"{arch.depth} layers x {arch.channels[0]} channels, max deviation {chk['max_deviation']:.2e}"


def cmd_check_bounds(cfg, w: Writer) -> str:
    import numpy as np
    from . import rng as rngmod
    from .cnn_model import Predictor, schedule_from_theorem1
    from .risk_bounds import covering_bound, empirical_cover
    from .synth_data import sample_images
    from .training import from_params, init_params
    model = _model(cfg)
    s = cfg["schedule"]
    sch = schedule_from_theorem1(cfg["n"], s["p"], model.level, model.d1, model.d2, s["c1"], s["c2"], s["c3"],
                                 s["c4"], s["c5"], s["scale"])
    rows = []
    for eps in cfg["eps"]:
        try:
            b = covering_bound(eps, sch.cnn.depth, sch.fnn.depth, model.d1, model.d2, cfg["c1"], cfg["c10"], cfg["n"])
        except ValueError as exc:
            raise ConfigError("eps", str(exc)) from None
        rows.append({"eps": eps, "log_cover_bound": b})
    x, _ = sample_images(model.d1, model.d2, cfg["cover_points"], cfg["seed"], purpose=rngmod.COVER)

    def sampler(g):
        cnn, fnn = from_params(init_params(sch.cnn, sch.fnn, g), sch.cnn, sch.fnn)
        return Predictor(sch.cnn, sch.fnn, cnn, fnn, sch.beta)

    counts = empirical_cover(sampler, x, list(cfg["eps"]), cfg["cover_budget"], cfg["seed"])
    for r, c in zip(rows, counts):
        r["empirical_cover"] = c
        r["log_empirical_cover"] = float(np.log(c))
    w.csv("bounds.csv", rows)
    w.json("bounds.json", {"schedule": sch.to_dict(), "rows": rows})
    return f"{len(rows)} eps values; empirical cover counts {counts}"


def cmd_check_lemma1(cfg, w: Writer) -> str:
    import math
    from .experiments import build_model, c8_sweep, lemma1_suite
    models = {}
    for name, spec in cfg["models"].items():
        try:
            models[name] = build_model(spec)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"models.{name}", str(exc)) from None
    st = _sweep_settings(cfg)
    suite = lemma1_suite(models, cfg["n_train"], cfg["mc"], cfg["seed"], st, (1 / math.sqrt(2), math.sqrt(2)))
    rows = []
    for r in suite:
        rep = r["report"]
        rows.append({"model": r["model"], "classifier": r["classifier"], "excess01": rep.excess01,
                     "excessphi": rep.excess_phi, "phi_star_risk": rep.r_phi_star,
                     "sqrt_half_slack": r["sqrt"][1 / math.sqrt(2)].slack,
                     "sqrt_half_status": r["sqrt"][1 / math.sqrt(2)].status,
                     "sqrt_two_slack": r["sqrt"][math.sqrt(2)].slack, "sqrt_two_status": r["sqrt"][math.sqrt(2)].status,
                     "calibration_slack": r["calibration"].slack, "calibration_status": r["calibration"].status,
                     "stderr": r["sqrt"][1 / math.sqrt(2)].stderr})
    c8 = c8_sweep(next(iter(models.values())), tuple(cfg["gammas"]), tuple(cfg["Fs"]), cfg["mc"] // 5,
                  cfg["seed"], cfg["c8"])
    c8_rows = [{k: v for k, v in r.items() if k != "check"} | {"check_status": r["check"].status} for r in c8]
    w.csv("lemma1.csv", rows)
    w.csv("lemma1_c8.csv", c8_rows)
    fails = sum(r["calibration_status"] == "fail" for r in rows)
    w.json("lemma1.json", {"rows": rows, "c8": c8_rows})
    return f"{len(rows)} pairs; calibration failures {fails}; sqrt(1/2) failures " \
           f"{sum(r['sqrt_half_status'] == 'fail' for r in rows)}"


def cmd_check_lemma8(cfg, w: Writer) -> str:
    from .experiments import lemma8_trials
    rows = lemma8_trials(cfg["trials"], tuple(cfg["levels"]), cfg["seed"])
    table = [{k: r[k] for k in ("level", "d", "mode", "gap", "bound", "supdist", "lipschitz", "exact")} for r in rows]
    viol = sum(r["gap"] > r["bound"] + 1e-9 for r in rows)
    w.csv("lemma8.csv", table)
    w.json("lemma8.json", {"trials": len(rows), "violations": viol})
    return f"{len(rows)} trials, {viol} violations"


COMMANDS = {
    "gen-model": cmd_gen_model, "sample": cmd_sample, "train": cmd_train, "eval-risk": cmd_eval_risk,
    "rate-sweep": cmd_rate_sweep, "lemma7": cmd_lemma7, "compile-cnn": cmd_compile_cnn,
    "check-bounds": cmd_check_bounds, "check-lemma1": cmd_check_lemma1, "check-lemma8": cmd_check_lemma8,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmpcnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./hmpcnn_out)")
        sp.add_argument("--threads", type=int, default=0, help="BLAS threads, 0 = library default")
    return p


def _error(kind: str, exc: Exception, code: int, **extra) -> int:
    rec = {"error": kind, "message": str(exc), **extra}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 0:
        return _error("config", ValueError("--threads must be >= 0"), EXIT_CONFIG, field="threads")
    if args.threads > 0:
        # must happen before numpy is first imported
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    out = args.out or os.environ.get(OUT_ENV) or "hmpcnn_out"
    started = time.time()
    try:
        cfg = load_config(args.command, args.config, args.seed)
        w = Writer(out, args.command, cfg)
        summary = COMMANDS[args.command](cfg, w)
        w.meta(started, summary)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG, field=exc.field, command=args.command)
    except InputMissing as exc:
        return _error("missing-input", exc, EXIT_INPUT, command=args.command)
    except Exception as exc:  # noqa: BLE001 - turned into an error record
        return _error(type(exc).__name__, exc, EXIT_RUNTIME, command=args.command)
    print(f"{args.command}: {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
