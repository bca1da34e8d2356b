"""Batch experiment driver.

Usage::

    python -m datadesign <subcommand> --config exp.ini [--seed S] [--replicates R] [--out DIR] [--threads T]

Subcommands: ``bilevel``, ``ama-gaussian``, ``ama-particles``, ``baselines``,
``eval``, ``sweep``. The config is an INI file; see the README for its keys.
Replicate ``r`` uses seed ``base_seed + r``. Every run writes per-replicate
trace CSVs under ``traces/``, a ``summary.csv`` with mean Err and two-standard-
deviation bands, a ``replicates.csv`` with the raw values and ``manifest.json``.

Exit codes: 0 success, 2 config error (nothing written), 3 runtime failure in
at least one replicate (the others are still written).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .ama import AmaConfig, GaussianFamily, ParticleFamily, ama_loop
from .benchmarks import (
    MIN_DIM,
    TARGET_IDS,
    TOY_IDS,
    acoreset_indices,
    baseline_distribution,
    err_metric,
    make_meta_ensemble,
    make_target,
    ncoreset_indices,
)
from .bilevel import BilevelConfig, CosineSchedule, run_bilevel
from .kernel import KernelModel, fit_krr
from .measures import EmpiricalMeasure, GaussianMeasure, MetaTestEnsemble, make_rng
from .trace import OptimizationTrace, gaussian_from_params

COMMANDS = ("bilevel", "ama-gaussian", "ama-particles", "baselines", "eval", "sweep")
DISTRIBUTIONS = ("normal", "barycenter", "mixture", "uniform", "ncoreset", "acoreset")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    """Schema violation; the message starts with the offending ``[section].key``."""


# --- config -------------------------------------------------------------------------

_SCHEMA = {
    "experiment": {
        "target": (str, None), "dim": (int, None), "seed": (int, 0), "replicates": (int, 1),
        "out": (str, "results"), "lengthscale": (float, "auto"), "target_seed": (int, 0),
    },
    "ensemble": {"k": (int, 10), "m": (int, 5000), "seed": (int, "replicate")},
    "bilevel": {
        "iterations": (int, 1000), "samples_per_step": (int, 250), "lr_initial": (float, 1e-2),
        "lr_final": (float, 0.0), "nugget_initial": (float, 1e-3), "nugget_final": (float, 1e-7),
        "schedule_gives_sigma": (bool, False), "gradient_normalization": (bool, False),
        "eval_every": (int, 1), "train_samples": (int, 1024),
    },
    "ama": {
        "outer_iterations": (int, 50), "samples_for_misfit": (int, 1000), "w2_mc_samples": (int, 500),
        "step_size": (float, "auto"), "step_halving": (bool, True), "tol_step": (float, 1e-6),
        "fit_samples": (int, 250), "r": (float, "auto"), "lip_target": (float, "auto"),
        "bound": (str, "full"), "mean_only": (bool, False), "particles": (int, 100),
        "nugget": (float, "auto"), "train_samples": (int, 1024),
    },
    "baselines": {"distributions": (list, ["normal", "barycenter", "mixture", "uniform"]),
                  "train_samples": (int, 1024)},
    "eval": {"model": (str, "zero"), "trace": (str, ""), "train_samples": (int, 1024)},
    "sweep": {"sizes": (list, ["64", "256", "1024"]),
              "distributions": (list, ["optimized", "normal", "barycenter", "mixture"])},
}


def _convert(section, key, typ, raw):
    path = f"[{section}].{key}"
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is list:
            return [s.strip() for s in raw.split(",") if s.strip()]
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {typ.__name__}") from None


def load_config(path) -> dict:
    """Parse and validate an INI config into nested dicts with defaults filled in."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        parser.read_string(text)
    except OSError as exc:
        raise ConfigError(f"config file {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    cfg = {"_text": text}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"[{section}]: unknown section")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"[{section}].{key}: unknown key")
    for section, keys in _SCHEMA.items():
        cfg[section] = {}
        for key, (typ, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                cfg[section][key] = "auto" if raw.strip() in ("auto", "replicate") and isinstance(
                    default, str) and default in ("auto", "replicate") else _convert(section, key, typ, raw)
            elif default is None:
                raise ConfigError(f"[{section}].{key}: required")
            else:
                cfg[section][key] = default
    return cfg


def validate(cfg: dict, command: str):
    ex = cfg["experiment"]
    if ex["target"] not in TARGET_IDS + TOY_IDS:
        raise ConfigError(f"[experiment].target: unknown target {ex['target']!r}; "
                          f"expected one of {', '.join(TARGET_IDS + TOY_IDS)}")
    if ex["dim"] < MIN_DIM[ex["target"]]:
        raise ConfigError(f"[experiment].dim: {ex['target']} needs dim >= {MIN_DIM[ex['target']]}")
    if ex["replicates"] < 1:
        raise ConfigError("[experiment].replicates: must be >= 1")
    if ex["lengthscale"] != "auto" and not ex["lengthscale"] > 0:
        raise ConfigError("[experiment].lengthscale: must be positive")
    for key in ("k", "m"):
        if cfg["ensemble"][key] < 1:
            raise ConfigError(f"[ensemble].{key}: must be >= 1")
    bl = cfg["bilevel"]
    for key in ("iterations",):
        if bl[key] < 0:
            raise ConfigError(f"[bilevel].{key}: must be >= 0")
    for key in ("samples_per_step", "eval_every", "train_samples"):
        if bl[key] < (2 if key == "samples_per_step" else 1):
            raise ConfigError(f"[bilevel].{key}: too small")
    if bl["nugget_initial"] < 0 or bl["nugget_final"] < 0:
        raise ConfigError("[bilevel].nugget_initial: nuggets must be nonnegative")
    am = cfg["ama"]
    for key in ("outer_iterations", "samples_for_misfit", "w2_mc_samples", "fit_samples", "particles"):
        if am[key] < 1:
            raise ConfigError(f"[ama].{key}: must be >= 1")
    if am["bound"] not in ("full", "surrogate"):
        raise ConfigError("[ama].bound: must be 'full' or 'surrogate'")
    if am["r"] != "auto" and am["r"] < 0:
        raise ConfigError("[ama].r: must be nonnegative")
    for d in cfg["baselines"]["distributions"]:
        if d not in DISTRIBUTIONS:
            raise ConfigError(f"[baselines].distributions: unknown distribution {d!r}")
    if cfg["eval"]["model"] not in ("zero", "trace") and cfg["eval"]["model"] not in DISTRIBUTIONS:
        raise ConfigError(f"[eval].model: unknown model {cfg['eval']['model']!r}")
    if command == "eval" and cfg["eval"]["model"] == "trace" and not cfg["eval"]["trace"]:
        raise ConfigError("[eval].trace: required when model = trace")
    try:
        sizes = [int(s) for s in cfg["sweep"]["sizes"]]
    except ValueError:
        raise ConfigError("[sweep].sizes: expected comma-separated integers") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("[sweep].sizes: need at least one positive size")
    cfg["sweep"]["sizes"] = sizes
    for d in cfg["sweep"]["distributions"]:
        if d != "optimized" and d not in DISTRIBUTIONS:
            raise ConfigError(f"[sweep].distributions: unknown distribution {d!r}")


# --- replicate runners --------------------------------------------------------------


@dataclass
class ReplicateResult:
    index: int
    seed: int
    status: str = "ok"
    errs: dict = field(default_factory=dict)  # distribution -> Err (or (N -> Err) for sweep)
    files: dict = field(default_factory=dict)  # relative path -> text


class _Setup:
    def __init__(self, cfg, seed):
        ex, en = cfg["experiment"], cfg["ensemble"]
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        ens_ss, self.run_ss, self.eval_ss = ss.spawn(3)
        if en["seed"] != "replicate":
            ens_ss = np.random.SeedSequence(en["seed"])
        self.target = make_target(ex["target"], ex["dim"], rng=ex["target_seed"])
        self.lengthscale = (self.target.default_lengthscale if ex["lengthscale"] == "auto"
                            else ex["lengthscale"])
        self.draw = make_meta_ensemble(en["k"], ex["dim"], en["m"], make_rng(ens_ss))
        self.Qval = self.draw.validation(self.target)
        self.Qtest = self.draw.test(self.target)

    def train_err(self, X) -> float:
        model = fit_krr(X, self.target(X), self.lengthscale, 1e-3 / X.shape[0])
        return err_metric(model, self.Qtest)

    def distribution_err(self, kind, n, rng) -> float:
        if kind in ("ncoreset", "acoreset"):
            pool = np.concatenate([a.points for a in self.Qval.atoms])
            if kind == "ncoreset":
                idx = ncoreset_indices(pool, n, self.lengthscale, rng)
            else:
                idx = acoreset_indices(pool, self.target(pool), n, self.lengthscale,
                                       lambda N: 1e-3 / N, rng)
            return self.train_err(pool[idx])
        sampler = baseline_distribution(kind, self.target.dim, self.draw.empirical,
                                        self.target.default_initial_mean)
        return self.train_err(sampler.sample(n, rng))


def _bilevel_trace(cfg, setup):
    bl = cfg["bilevel"]
    horizon = max(bl["iterations"], 1)
    config = BilevelConfig(
        iterations=bl["iterations"],
        lr_schedule=CosineSchedule(bl["lr_initial"], bl["lr_final"], horizon),
        nugget_schedule=CosineSchedule(bl["nugget_initial"], bl["nugget_final"], horizon),
        samples_per_step=bl["samples_per_step"], lengthscale=setup.lengthscale,
        seed=setup.run_ss, gradient_normalization=bl["gradient_normalization"],
        eval_every=bl["eval_every"], schedule_gives_sigma=bl["schedule_gives_sigma"],
    )
    theta0 = GaussianMeasure(setup.target.default_initial_mean, np.eye(setup.target.dim))
    trace = run_bilevel(config, setup.target, setup.Qval, setup.Qtest, theta0)
    trace.meta["seed"] = setup.seed
    return trace


def _csv_text(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _run_bilevel(cfg, setup, res, name):
    trace = _bilevel_trace(cfg, setup)
    res.files[f"traces/{name}_r{res.index}.csv"] = trace.to_csv()
    res.errs["trace_final_err_unseen"] = trace.records[-1].err_unseen
    rng = make_rng(setup.eval_ss)
    res.errs["optimized"] = setup.train_err(trace.final.sample(cfg["bilevel"]["train_samples"], rng))
    return trace


def _ama_config(cfg, setup, particles):
    am = cfg["ama"]
    auto = lambda v: None if v == "auto" else v  # noqa: E731
    return AmaConfig(
        R=auto(am["r"]), lip_target=auto(am["lip_target"]), outer_iterations=am["outer_iterations"],
        samples_for_misfit=am["samples_for_misfit"], w2_mc_samples=am["w2_mc_samples"],
        step_size=auto(am["step_size"]), step_halving=am["step_halving"], tol_step=am["tol_step"],
        seed=setup.run_ss, fit_samples=am["particles"] if particles else am["fit_samples"],
        lengthscale=setup.lengthscale, nugget=auto(am["nugget"]), bound=am["bound"],
    )


def _step_sidecar(trace):
    keys = ("objective_after_fit", "misfit", "misfit_se", "w2_squared", "step_size",
            "refit_kept", "accepted", "displacement")
    rows = [[r.iter] + [r.extra.get(k, float("nan")) for k in keys] for r in trace.records]
    rows = [[int(v) if isinstance(v, (bool, np.bool_)) else v for v in row] for row in rows]
    return _csv_text(rows, ("iter",) + keys)


def _run_ama(cfg, setup, res, particles):
    name = "ama-particles" if particles else "ama-gaussian"
    config = _ama_config(cfg, setup, particles)
    d = setup.target.dim
    m0 = setup.target.default_initial_mean
    if particles:
        P = cfg["ama"]["particles"]
        atoms = [EmpiricalMeasure(_take(a.points, P)) for a in setup.draw.empirical.atoms]
        Q = MetaTestEnsemble(atoms, setup.draw.empirical.weights)
        nu0 = EmpiricalMeasure(GaussianMeasure(m0, np.eye(d)).sample(P, make_rng(setup.eval_ss)))
        family = ParticleFamily()
    else:
        Q = setup.draw.gaussian
        nu0 = GaussianMeasure(m0, np.eye(d))
        family = GaussianFamily(mean_only=cfg["ama"]["mean_only"])
    trace = ama_loop(config, family, setup.target, Q, nu0, Qhat_seen=setup.Qval, Qhat_unseen=setup.Qtest)
    trace.meta["seed"] = setup.seed
    res.files[f"traces/{name}_r{res.index}.csv"] = trace.to_csv()
    res.files[f"traces/{name}_r{res.index}_steps.csv"] = _step_sidecar(trace)
    res.errs["trace_final_err_unseen"] = trace.records[-1].err_unseen
    rng = make_rng(setup.eval_ss.spawn(1)[0])
    n = cfg["ama"]["train_samples"]
    if particles:
        pts = trace.final.points
        X = pts[rng.integers(0, pts.shape[0], size=n)] if n > pts.shape[0] else pts[:n]
        res.errs["optimized"] = setup.train_err(X)
    else:
        res.errs["optimized"] = setup.train_err(trace.final.sample(n, rng))


def _take(points, n):
    if points.shape[0] < n:
        raise ValueError(f"atom has {points.shape[0]} points, {n} particles requested")
    return points[:n]


def _run_baselines(cfg, setup, res):
    n = cfg["baselines"]["train_samples"]
    streams = setup.eval_ss.spawn(len(DISTRIBUTIONS))
    rows = []
    for kind, ss in zip(DISTRIBUTIONS, streams):
        if kind in cfg["baselines"]["distributions"]:
            res.errs[kind] = setup.distribution_err(kind, n, make_rng(ss))
            rows.append([kind, res.errs[kind]])
    res.files[f"traces/baselines_r{res.index}.csv"] = _csv_text(rows, ("distribution", "err"))


def _run_eval(cfg, setup, res):
    ev = cfg["eval"]
    rng = make_rng(setup.eval_ss)
    if ev["model"] == "zero":
        err = err_metric(KernelModel.zero(setup.target.dim, setup.lengthscale), setup.Qtest)
    elif ev["model"] == "trace":
        tr = OptimizationTrace.read_csv(ev["trace"])
        theta = gaussian_from_params(tr.records[-1].params, setup.target.dim)
        err = setup.train_err(theta.sample(ev["train_samples"], rng))
    else:
        err = setup.distribution_err(ev["model"], ev["train_samples"], rng)
    res.errs[ev["model"]] = err
    res.files[f"traces/eval_r{res.index}.csv"] = _csv_text([[ev["model"], err]], ("model", "err"))


def _run_sweep(cfg, setup, res):
    sw = cfg["sweep"]
    theta = None
    if "optimized" in sw["distributions"]:
        theta = _bilevel_trace(cfg, setup)
        res.files[f"traces/sweep-bilevel_r{res.index}.csv"] = theta.to_csv()
        theta = theta.final
    rows = []
    streams = setup.eval_ss.spawn(len(sw["distributions"]))
    for kind, ss in zip(sw["distributions"], streams):
        rng = make_rng(ss)
        for n in sw["sizes"]:
            if kind == "optimized":
                err = setup.train_err(theta.sample(n, rng))
            else:
                err = setup.distribution_err(kind, n, rng)
            res.errs[(kind, n)] = err
            rows.append([kind, n, err])
    res.files[f"traces/sweep_r{res.index}.csv"] = _csv_text(rows, ("distribution", "n", "err"))


def run_replicate(command, cfg, index):
    seed = cfg["experiment"]["seed"] + index
    res = ReplicateResult(index, seed)
    try:
        setup = _Setup(cfg, seed)
        if command == "bilevel":
            _run_bilevel(cfg, setup, res, "bilevel")
        elif command in ("ama-gaussian", "ama-particles"):
            _run_ama(cfg, setup, res, particles=command == "ama-particles")
        elif command == "baselines":
            _run_baselines(cfg, setup, res)
        elif command == "eval":
            _run_eval(cfg, setup, res)
        elif command == "sweep":
            _run_sweep(cfg, setup, res)
    except Exception as exc:  # recorded per replicate, others continue
        res.status = f"failed: {type(exc).__name__}: {exc}"
        res.errs = {}
        res.files = {f"traces/{command}_r{index}.error.txt": traceback.format_exc()}
    return res


# --- aggregation --------------------------------------------------------------------


def mean_two_sd(values) -> tuple[float, float]:
    """Mean and two sample standard deviations (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), 2.0 * sd


def summarize(command, cfg, results) -> dict:
    ex = cfg["experiment"]
    ok = [r for r in results if r.status == "ok"]
    files = {}
    if command == "sweep":
        bl = cfg["bilevel"]
        label_cost = bl["iterations"] * bl["samples_per_step"]
        rows = []
        for kind in cfg["sweep"]["distributions"]:
            for n in cfg["sweep"]["sizes"]:
                m, s = mean_two_sd([r.errs[(kind, n)] for r in ok])
                cost = n + label_cost if kind == "optimized" else n
                rows.append([kind, n, cost, m, s, len(ok)])
        files["summary.csv"] = _csv_text(
            rows, ("distribution", "n", "cost_adjusted_n", "mean_err", "two_sd", "replicates"))
        raw = [[k, n, r.index, r.seed, r.errs[(k, n)]] for r in ok for (k, n) in r.errs]
        files["replicates.csv"] = _csv_text(raw, ("distribution", "n", "replicate", "seed", "err"))
        return files
    keys = list(dict.fromkeys(k for r in ok for k in r.errs))
    rows = []
    for k in keys:
        m, s = mean_two_sd([r.errs[k] for r in ok if k in r.errs])
        rows.append([k, ex["target"], ex["dim"], m, s, len(ok)])
    files["summary.csv"] = _csv_text(
        rows, ("distribution", "target", "dim", "mean_err", "two_sd", "replicates"))
    raw = [[k, r.index, r.seed, v] for r in ok for k, v in r.errs.items()]
    files["replicates.csv"] = _csv_text(raw, ("distribution", "replicate", "seed", "err"))
    return files


def sweep_warnings(cfg, results) -> list[str]:
    """Soft check: optimized Err should fall as N grows (only reported, never fatal)."""
    if "optimized" not in cfg["sweep"]["distributions"]:
        return []
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return []
    sizes = sorted(cfg["sweep"]["sizes"])
    means = [np.mean([r.errs[("optimized", n)] for r in ok]) for n in sizes]
    if any(b > a for a, b in zip(means, means[1:])):
        return ["optimized Err is not decreasing in N: "
                + ", ".join(f"N={n}: {m:.4g}" for n, m in zip(sizes, means))]
    return []


def manifest(command, cfg, results, files) -> str:
    text = cfg["_text"]
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    doc = {
        "command": command,
        "config_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "config": public,
        "base_seed": cfg["experiment"]["seed"],
        "seeds": [r.seed for r in results],
        "replicates": [{"index": r.index, "seed": r.seed, "status": r.status,
                        "files": sorted(r.files)} for r in results],
        "files": sorted(files),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "datadesign": __version__},
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n"


def execute(command, cfg, threads: int = 1) -> int:
    n = cfg["experiment"]["replicates"]
    if threads > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_replicate, [command] * n, [cfg] * n, range(n)))
    else:
        results = [run_replicate(command, cfg, i) for i in range(n)]
    out = Path(cfg["experiment"]["out"])
    files = {}
    for r in results:
        files.update(r.files)
    files.update(summarize(command, cfg, results))
    files["manifest.json"] = manifest(command, cfg, results, files)
    for rel, text in files.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    if command == "sweep":
        for w in sweep_warnings(cfg, results):
            print(f"warning: {w}", file=sys.stderr)
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        print(f"replicate {r.index} (seed {r.seed}) {r.status}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datadesign", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI experiment config")
        s.add_argument("--seed", type=int, help="base seed (overrides [experiment].seed)")
        s.add_argument("--replicates", type=int, help="replicate count (overrides config)")
        s.add_argument("--out", help="output directory (overrides [experiment].out)")
        s.add_argument("--threads", type=int, default=1, help="parallel replicate workers")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed: must be nonnegative")
            cfg["experiment"]["seed"] = args.seed
        if args.replicates is not None:
            cfg["experiment"]["replicates"] = args.replicates
        if args.out is not None:
            cfg["experiment"]["out"] = args.out
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        validate(cfg, args.command)
        if args.command == "eval" and cfg["eval"]["model"] == "trace" and not os.path.exists(cfg["eval"]["trace"]):
            raise ConfigError(f"[eval].trace: file {cfg['eval']['trace']!r} not found")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(args.command, cfg, args.threads)


if __name__ == "__main__":
    sys.exit(main())
