"""Command-line entry point: ``simulate``, ``identify`` and ``evaluate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .data import (DataError, format_rmse_table, generate_dataset, load_dataset,
                   rmse_per_particle, save_dataset)
from .estimator import PNSMCIdentifier, weighted_quantile
from .models import DomainError, PriorSpec, prior_logpdf
from .odefilter import SolverFailure
from .smc import SMCAbort, stream

logger = logging.getLogger("pnsmc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_SIM_STREAM = 16
_HIST_BINS = 30


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_common(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="YAML run configuration")
    p.add_argument("--seed", type=_seed, default=d, help="master seed (overrides the config)")
    p.add_argument("--threads", type=_positive_int, default=d,
                   help="worker threads (default: available cores)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--print-config", action="store_true", default=d or False,
                   help="print the resolved configuration and exit")


def _seed(text):
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnsmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, text in (
        ("simulate", "generate training and test records"),
        ("identify", "run the particle system on the training record"),
        ("evaluate", "per-particle RMSE on the test records"),
    ):
        _add_common(sub.add_parser(name, help=text, description=text), suppress=True)
    return parser


# -- small I/O helpers ------------------------------------------------------------


def _finite_or_none(v):
    return v if isinstance(v, (int, str)) or (isinstance(v, float) and math.isfinite(v)) else None


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def _schema(name: str) -> dict:
    return json.loads(resources.files("pnsmc.schemas").joinpath(name).read_text("utf-8"))


def validate_outputs(out: Path, files: dict) -> None:
    """Check written JSON files against the shipped schemas and CSV headers."""
    for path, schema in files.items():
        path = Path(path)
        if path.suffix == ".json":
            with open(path, encoding="utf-8") as fh:
                jsonschema.validate(json.load(fh), _schema(schema))
        else:
            with open(path, encoding="utf-8", newline="") as fh:
                header = next(csv.reader(fh))
            if header[: len(schema)] != list(schema):
                raise RuntimeError(f"{path.name}: header {header} does not start with {schema}")


def _prepare(args, command):
    overrides = {"seed": getattr(args, "seed", None), "threads": getattr(args, "threads", None)}
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(Path(args.out).resolve())
    cfg = cfgmod.load(getattr(args, "config", None), overrides=overrides)
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    base = Path(args.config).resolve().parent if getattr(args, "config", None) else Path.cwd()
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    return cfg


def _snapshot(cfg, out: Path, command: str) -> Path:
    path = out / f"config_{command}.yaml"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfgmod.dump(cfg))
    return path


def _x0(cfg, meta, d):
    if cfg["x0"] is not None:
        return np.asarray(cfg["x0"], dtype=float)
    if "x0" in meta:
        return np.asarray(meta["x0"], dtype=float)
    return np.zeros(d)


# -- simulate -----------------------------------------------------------------------


def cmd_simulate(cfg, out: Path) -> dict:
    objs = cfgmod.build(cfg)
    model = objs["model"]
    seed = cfgmod.require_seed(cfg)
    sim = cfg["simulate"]
    if not sim:
        raise ConfigError("simulate: no generation spec for this model")
    if cfg["truth"] is None:
        raise ConfigError("truth: needed to simulate")
    theta = np.array([cfg["truth"][n] for n in model.param_names], dtype=float)
    x1 = np.asarray(cfg["x0"], dtype=float) if cfg["x0"] is not None else np.zeros(model.d)
    written = {}
    gen_rate = sim["gen_rate_hz"]
    clean, noisy = generate_dataset(
        model, theta, sim["excitation"], sim["duration"], gen_rate, sim["downsample"],
        sim["noise_fraction"], stream(seed, _SIM_STREAM, 0), x1,
        hold_input=sim["hold_input"], settle=sim["settle"], check=sim["rk4_check"],
        provenance="simulated training record",
    )
    for ds, name in ((clean, "train_clean.csv"), (noisy, "train.csv")):
        p = save_dataset(ds, out / name)
        written[str(p)] = ("t", "u", "y")
        written[str(p.with_name(p.stem + ".meta.json"))] = "dataset_meta.schema.json"
    for i, (name, spec) in enumerate(sorted(sim.get("tests", {}).items()), start=1):
        k = spec["oversample"]
        _, test = generate_dataset(
            model, theta, spec["excitation"], spec["duration"], spec["rate_hz"] * k, k,
            spec.get("noise_fraction", 0.0), stream(seed, _SIM_STREAM, i), x1,
            hold_input=True, settle=spec.get("settle", 0.0), check=False,
            provenance=f"simulated test record ({name})",
        )
        p = save_dataset(test, out / f"test_{name}.csv")
        written[str(p)] = ("t", "u", "y")
        written[str(p.with_name(p.stem + ".meta.json"))] = "dataset_meta.schema.json"
        logger.info("wrote %s (%d samples)", p.name, len(test))
    logger.info("wrote training record: %d samples at %g Hz", len(noisy), noisy.rate_hz)
    return written


# -- identify ----------------------------------------------------------------------


def _load_train(cfg, out: Path):
    data = cfg["data"]
    path = data["train"] or str(out / "train.csv")
    cfg["data"]["train"] = path
    ds = load_dataset(path, data["schema"], data["columns"], data["rate_hz"])
    start, stop = data["train_slice"]
    if start or stop is not None:
        ds = ds.slice(start, stop)
    if len(ds) < 2:
        raise DataError(f"{path}: training record needs at least 2 samples")
    return ds


def _hist_rows(name, values, weights, prior: PriorSpec, j):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        hi = lo + max(abs(lo), 1.0) * 1e-9
    edges = np.linspace(lo, hi, _HIST_BINS + 1)
    dens, _ = np.histogram(values, bins=edges, weights=weights, density=True)
    centres = 0.5 * (edges[:-1] + edges[1:])
    single = PriorSpec((name,), prior.mean[j : j + 1], prior.variance[j : j + 1],
                       prior.log_space[j : j + 1])
    pdf = np.exp(prior_logpdf(single, centres[:, None]))
    return [(name, a, b, c, d, p) for a, b, c, d, p in zip(edges[:-1], edges[1:], centres,
                                                             dens, pdf)]


def cmd_identify(cfg, out: Path) -> dict:
    objs = cfgmod.build(cfg)
    model = objs["model"]
    seed = cfgmod.require_seed(cfg)
    ds = _load_train(cfg, out)
    meta = ds.meta
    R_y = cfg["solver"]["R_y"]
    if R_y is None:
        std = meta.get("noise_std")
        if not std:
            raise ConfigError("solver.R_y: required when the training sidecar has no "
                              "positive noise_std")
        R_y = float(std) ** 2
    x0 = _x0(cfg, meta, model.d)
    solver = {k: v for k, v in cfg["solver"].items() if k != "R_y"}
    est = PNSMCIdentifier(
        model=model.name, prior=objs["prior"], sample_rate=ds.rate_hz, noise_var=R_y,
        x0=x0, model_constants=cfg["model_constants"], threads=cfg["threads"],
        random_state=seed, **cfg["smc"], **solver,
    )
    diag_path = out / "diagnostics.csv"
    try:
        est.fit(ds.u, ds.y)
    except SMCAbort as exc:
        if exc.trace:
            _write_diagnostics(diag_path, exc.trace)
        raise
    written = {}
    names = list(model.param_names)

    post = out / "posterior.csv"
    _write_csv(post, names + ["weight"],
               (list(th) + [w] for th, w in zip(est.particles_, est.weights_)))
    written[str(post)] = tuple(names + ["weight"])

    _write_diagnostics(diag_path, est.diagnostics_)
    written[str(diag_path)] = ("t_index", "ess", "threshold")

    hist = out / "posterior_hist.csv"
    rows = []
    for j, n in enumerate(names):
        rows += _hist_rows(n, est.particles_[:, j], est.weights_, est.prior_, j)
    _write_csv(hist, ["parameter", "bin_lo", "bin_hi", "centre", "posterior_density",
                      "prior_density"], rows)
    written[str(hist)] = ("parameter", "bin_lo", "bin_hi")

    n_states = min(cfg["identify"]["state_particles"], len(est.particles_))
    if n_states:
        order = np.argsort(-est.weights_, kind="stable")[:n_states]
        means, stds = est.filtered_states(ds.u, ds.y, order)
        d = model.d
        st = [f"{s}_mean" for s in model.state_names] + [f"{s}_std" for s in model.state_names]
        obs = model.obs_block * d + model.obs_index
        header = ["particle", "t"] + st + ["observed_mean", "observed_std"]
        path = out / "states.csv"
        t = ds.t[: len(means)]
        _write_csv(path, header, (
            [int(p), float(t[k])] + list(means[k, i, :d]) + list(stds[k, i, :d])
            + [means[k, i, obs], stds[k, i, obs]]
            for i, p in enumerate(order) for k in range(len(means))
        ))
        written[str(path)] = ("particle", "t")

    interval = est.posterior_interval(0.95)
    theta_true = meta.get("theta_true")
    params = {}
    prior_sd = np.sqrt(est.prior_.variance)
    for j, n in enumerate(names):
        entry = {
            "mean": float(est.posterior_mean_[j]),
            "std": float(est.posterior_std_[j]),
            "q025": float(interval[0, j]),
            "q975": float(interval[1, j]),
            "prior_mean": float(est.prior_.mean[j]),
            "prior_std": float(prior_sd[j]),
        }
        if theta_true and n in theta_true and theta_true[n] != 0:
            tv = float(theta_true[n])
            entry.update(truth=tv, mean_normalized=entry["mean"] / tv,
                         std_normalized=entry["std"] / abs(tv))
        params[n] = entry
    summary = {
        "model": model.name,
        "n_observations": len(ds),
        "n_particles": len(est.particles_),
        "parameters": params,
        "n_rejuvenations": int(est.n_rejuvenations_),
        "acceptance_rates": [float(r) for r in est.acceptance_rates_],
        "final_ess": float(est.final_ess_),
        "log_evidence": _finite_or_none(float(est.log_evidence_)),
        "noise_var": float(R_y),
        "config_hash": cfgmod.config_hash(cfg),
        "diagnostics": "diagnostics.csv",
    }
    path = out / "summary.json"
    _write_json(path, summary)
    written[str(path)] = "summary.schema.json"
    logger.info("posterior mean %s", dict(zip(names, np.round(est.posterior_mean_, 6))))
    return written


def _write_diagnostics(path, trace):
    keys = ["t_index", "ess", "threshold", "rejuvenated", "acceptance_rate", "n_failed",
            "log_evidence"]
    cols = [np.asarray(trace[k]) for k in keys]
    _write_csv(path, keys, (
        [int(c[0]), float(c[1]), float(c[2]), int(c[3]), float(c[4]), int(c[5]), float(c[6])]
        for c in zip(*cols)
    ))


# -- evaluate ----------------------------------------------------------------------


def _read_posterior(path: Path, names):
    if not path.exists():
        raise DataError(f"posterior file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header != list(names) + ["weight"]:
        raise DataError(f"{path}: columns {header} do not match model parameters "
                        f"{list(names)} + weight")
    arr = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(header))
    return arr[:, :-1], arr[:, -1]


def cmd_evaluate(cfg, out: Path) -> dict:
    objs = cfgmod.build(cfg)
    model = objs["model"]
    ev = cfg["evaluate"]
    post_path = Path(ev["posterior"] or out / "posterior.csv")
    cfg["evaluate"]["posterior"] = str(post_path)
    particles, _ = _read_posterior(post_path, model.param_names)
    tests = cfg["data"]["test"]
    if tests is None:
        tests = {n: str(out / f"test_{n}.csv") for n in sorted(cfg["simulate"].get("tests", {}))}
        cfg["data"]["test"] = tests
    if not tests:
        raise ConfigError("data.test: no test records given")
    written = {}
    table = {}
    rows = []
    for name, path in tests.items():
        ds = load_dataset(path, cfg["data"]["schema"], cfg["data"]["columns"],
                          cfg["data"]["rate_hz"])
        x1 = _x0(cfg, ds.meta, model.d)
        report = rmse_per_particle(model, particles, ds, oversample=ev["oversample"], x1=x1,
                                   skip=ev["skip"])
        rep = {k: _finite_or_none(v) for k, v in report.to_dict().items()}
        p = out / f"rmse_{name}.json"
        _write_json(p, rep)
        written[str(p)] = "rmse_report.schema.json"
        pp = out / f"rmse_{name}_particles.csv"
        _write_csv(pp, ["particle", "rmse"], enumerate(report.per_particle.tolist()))
        written[str(pp)] = ("particle", "rmse")
        table[name] = report.to_dict()
        rows.append([name] + [rep[k] for k in ("min", "max", "mean", "n_particles",
                                                "n_diverged", "unit")])
        logger.info("%s: mean particle RMSE %.4e %s", name, report.mean, report.unit)
    p = out / "rmse_table.csv"
    _write_csv(p, ["test", "min", "max", "mean", "n_particles", "n_diverged", "unit"], rows)
    written[str(p)] = ("test", "min", "max", "mean")
    with open(out / "rmse_table.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_rmse_table(table) + "\n")
    return written


_COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "evaluate": cmd_evaluate}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None and not args.print_config:
        parser.print_help(sys.stderr)
        raise ConfigError("a subcommand is required")
    cfg = _prepare(args, args.command)
    if args.print_config:
        sys.stdout.write(cfgmod.dump(cfg))
        return EXIT_OK
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    written = _COMMANDS[args.command](cfg, out)
    # the snapshot is written after the command filled in its default paths
    _snapshot(cfg, out, args.command)
    run_info = {
        "command": args.command,
        "version": __version__,
        "config_hash": cfgmod.config_hash(cfg),
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_json(out / f"run_{args.command}.json", run_info)
    written[str(out / f"run_{args.command}.json")] = "run.schema.json"
    validate_outputs(out, written)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SMCAbort, SolverFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
