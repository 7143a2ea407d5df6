"""Run configuration: embedded defaults, YAML files, validation.

A run config is a nested mapping.  The model named in the user file selects
a block of defaults; the user file is merged over it key by key, then the
command-line overrides are applied and the result is checked against the
shipped JSON schema.  Every default is visible through ``--print-config``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema
import yaml

from .models import DEFAULT_PRIORS, DEFAULT_TRUTHS, MODELS, PriorSpec, get_model, validate_prior
from .odefilter import SolverConfig
from .smc import SmcConfig


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


_SOLVER = {
    "q": 1, "n_sub": 1, "R": 0.0, "R_y": None, "calibration": "online", "gamma": 1.0,
    "gamma_min": 1e-12, "eps_chol": 1e-12, "sigma0_extra": 100.0,
}
_SMC = {
    "n_particles": 256, "ess_threshold": 0.5, "move_count": 1, "proposal_inflation": 1.0,
    "proposal_jitter": 1e-10, "paper_exact_acceptance": False, "log_sample": [],
}
_DATA = {
    "train": None, "test": None, "schema": "generic", "columns": None, "rate_hz": None,
    "train_slice": [0, None], "antialias": False,
}


def _prior_table(name):
    return {k: {"mean": v[0], "variance": v[1], "space": v[2]} for k, v in DEFAULT_PRIORS[name].items()}


def _base(model: str) -> dict:
    return {
        "model": model,
        "model_constants": {},
        "seed": None,
        "output_dir": "out",
        "threads": None,
        "x0": None,
        "prior": _prior_table(model),
        "truth": dict(DEFAULT_TRUTHS[model]),
        "simulate": {},
        "data": copy.deepcopy(_DATA),
        "solver": copy.deepcopy(_SOLVER),
        "smc": copy.deepcopy(_SMC),
        "identify": {"state_particles": 8},
        "evaluate": {"posterior": None, "oversample": 1, "skip": 0},
    }


def _bouc_wen() -> dict:
    cfg = _base("bouc_wen")
    cfg["model_constants"] = {"nu": 1.0}
    cfg["simulate"] = {
        "duration": 3.0,
        "gen_rate_hz": 131072.0,
        "downsample": 32,
        "noise_fraction": 0.05,
        "hold_input": True,
        "settle": 0.0,
        "rk4_check": False,
        "excitation": {"kind": "multisine", "f_min": 0.5, "f_max": 100.0, "n_lines": 2000,
                       "amplitude": 208.0, "ramp_fraction": 0.1, "scale": "peak"},
        "tests": {
            "sinesweep": {
                "duration": 8192 / 750.0, "rate_hz": 750.0, "oversample": 32, "settle": 0.0,
                "noise_fraction": 0.0,
                "excitation": {"kind": "sine_sweep", "f_start": 20.0, "f_end": 50.0,
                               "sweep_rate": 10.0 / 60.0, "amplitude": 40.0},
            },
            "multisine": {
                "duration": 8192 / 750.0, "rate_hz": 750.0, "oversample": 32, "settle": 2.0,
                "noise_fraction": 0.0,
                "excitation": {"kind": "multisine", "f_min": 5.0, "f_max": 150.0,
                               "n_lines": 1000, "amplitude": 50.0, "ramp_fraction": 0.0,
                               "scale": "rms"},
            },
        },
    }
    cfg["smc"]["n_particles"] = 128
    # only the products beta*gamma and beta*delta enter the model; in log
    # coordinates that ridge is straight and the Gaussian proposal can follow it
    cfg["smc"]["log_sample"] = ["m", "c", "k", "alpha", "beta", "gamma", "delta"]
    cfg["smc"]["move_count"] = 3
    cfg["evaluate"]["oversample"] = 32
    return cfg


def _duffing() -> dict:
    cfg = _base("duffing")
    cfg["simulate"] = {
        "duration": 10.0,
        "gen_rate_hz": 4000.0,
        "downsample": 20,
        "noise_fraction": 0.05,
        "hold_input": True,
        "settle": 0.0,
        "rk4_check": True,
        "excitation": {"kind": "multisine", "f_min": 0.5, "f_max": 20.0, "n_lines": 200,
                       "amplitude": 20.0, "ramp_fraction": 0.1, "scale": "peak"},
        "tests": {
            "multisine": {
                "duration": 10.0, "rate_hz": 200.0, "oversample": 20, "settle": 0.0,
                "noise_fraction": 0.0,
                "excitation": {"kind": "multisine", "f_min": 0.5, "f_max": 20.0,
                               "n_lines": 200, "amplitude": 15.0, "ramp_fraction": 0.1,
                               "scale": "peak"},
            },
        },
    }
    cfg["solver"]["n_sub"] = 8
    cfg["evaluate"]["oversample"] = 20
    return cfg


def _linear_oscillator() -> dict:
    cfg = _base("linear_oscillator")
    cfg["simulate"] = {
        "duration": 1.0,
        "gen_rate_hz": 2000.0,
        "downsample": 20,
        "noise_fraction": 0.05,
        "hold_input": True,
        "settle": 0.0,
        "rk4_check": True,
        "excitation": {"kind": "multisine", "f_min": 0.5, "f_max": 10.0, "n_lines": 20,
                       "amplitude": 10.0, "ramp_fraction": 0.1, "scale": "peak"},
        "tests": {
            "multisine": {
                "duration": 1.0, "rate_hz": 100.0, "oversample": 20, "settle": 0.0,
                "noise_fraction": 0.0,
                "excitation": {"kind": "multisine", "f_min": 0.5, "f_max": 10.0,
                               "n_lines": 20, "amplitude": 10.0, "ramp_fraction": 0.1,
                               "scale": "peak"},
            },
        },
    }
    cfg["solver"]["n_sub"] = 2
    cfg["evaluate"]["oversample"] = 20
    return cfg


def _emps() -> dict:
    cfg = _base("emps")
    cfg["simulate"] = {
        "duration": 4.0,
        "gen_rate_hz": 20000.0,
        "downsample": 20,
        "noise_fraction": 0.01,
        "hold_input": True,
        "settle": 0.0,
        "rk4_check": False,
        "excitation": {"kind": "multisine", "f_min": 0.1, "f_max": 5.0, "n_lines": 40,
                       "amplitude": 200.0, "ramp_fraction": 0.1, "scale": "peak"},
        "tests": {
            "multisine": {
                "duration": 4.0, "rate_hz": 1000.0, "oversample": 20, "settle": 0.0,
                "noise_fraction": 0.0,
                "excitation": {"kind": "multisine", "f_min": 0.1, "f_max": 5.0,
                               "n_lines": 40, "amplitude": 150.0, "ramp_fraction": 0.1,
                               "scale": "peak"},
            },
        },
    }
    cfg["data"]["schema"] = "emps"
    cfg["solver"]["n_sub"] = 2
    cfg["evaluate"]["oversample"] = 20
    return cfg


_DEFAULTS = {
    "bouc_wen": _bouc_wen,
    "duffing": _duffing,
    "linear_oscillator": _linear_oscillator,
    "emps": _emps,
}
DEFAULT_MODEL = "duffing"


def defaults(model: str = DEFAULT_MODEL) -> dict:
    if model not in _DEFAULTS:
        raise ConfigError(f"model: unknown model {model!r}; choose one of {sorted(MODELS)}")
    return _DEFAULTS[model]()


# keys whose value is replaced wholesale instead of merged
_ATOMIC = {"prior", "truth", "excitation", "columns", "tests", "test", "model_constants"}


def merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(val, Mapping) and isinstance(base[key], Mapping) and key not in _ATOMIC:
            out[key] = merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _schema() -> dict:
    text = resources.files("pnsmc.schemas").joinpath("config.schema.json").read_text("utf-8")
    return json.loads(text)


def check_schema(cfg: Mapping) -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{where}: {err.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e6`` / ``4.0e6`` as floats (YAML 1.2 style)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                    |\.[0-9_]+(?:[eE][-+][0-9]+)?
                    |[-+]?\.(?:inf|Inf|INF)
                    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.load(fh, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load(path=None, overrides: Optional[Mapping] = None, base_dir=None) -> dict:
    """Resolve defaults, the user file and ``overrides`` into one checked config.

    Relative data paths are resolved against ``base_dir`` (the config file's
    directory by default).
    """
    user = read_yaml(path) if path is not None else {}
    model = user.get("model", DEFAULT_MODEL)
    if not isinstance(model, str):
        raise ConfigError("model: must be a string")
    cfg = merge(defaults(model), user)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    check_schema(cfg)
    if base_dir is None and path is not None:
        base_dir = Path(path).resolve().parent
    _resolve_paths(cfg, Path(base_dir) if base_dir is not None else Path.cwd())
    build(cfg)
    return cfg


def _resolve_paths(cfg: dict, base: Path) -> None:
    def fix(p):
        return None if p is None else str((base / p).resolve())

    data = cfg["data"]
    data["train"] = fix(data["train"])
    if isinstance(data["test"], str):
        data["test"] = {"test": data["test"]}
    if data["test"] is not None:
        data["test"] = {k: fix(v) for k, v in data["test"].items()}
    cfg["evaluate"]["posterior"] = fix(cfg["evaluate"]["posterior"])


def build(cfg: Mapping) -> dict:
    """Turn a config into library objects; raises :class:`ConfigError` on bad values."""
    try:
        model = get_model(cfg["model"], **cfg["model_constants"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model_constants: {exc}") from None
    try:
        prior = PriorSpec.from_table(
            {k: v for k, v in cfg["prior"].items()}, names=model.param_names
        )
        validate_prior(model, prior)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"prior: {exc}") from None
    truth = cfg.get("truth")
    if truth is not None:
        missing = set(model.param_names) - set(truth)
        extra = set(truth) - set(model.param_names)
        if missing or extra:
            raise ConfigError(f"truth: expected parameters {list(model.param_names)}, "
                              f"missing {sorted(missing)}, unexpected {sorted(extra)}")
    x0 = cfg.get("x0")
    if x0 is not None and len(x0) != model.d:
        raise ConfigError(f"x0: {model.name} needs {model.d} values, got {len(x0)}")
    solver = dict(cfg["solver"])
    solver.pop("R_y")
    try:
        # R_y is data-dependent; a placeholder validates the remaining fields
        solver_cfg = SolverConfig(R_y=1.0, **solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None
    try:
        smc = dict(cfg["smc"])
        smc["log_sample"] = tuple(smc["log_sample"])
        smc_cfg = SmcConfig(seed=cfg["seed"] if cfg["seed"] is not None else 0,
                            threads=cfg["threads"] or 1, **smc)
        unknown = set(smc_cfg.log_sample) - set(model.param_names)
        if unknown:
            raise ConfigError(f"smc.log_sample: unknown parameters {sorted(unknown)}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"smc: {exc}") from None
    return {"model": model, "prior": prior, "solver": solver_cfg, "smc": smc_cfg}


def require_seed(cfg: Mapping) -> int:
    seed = cfg.get("seed")
    if seed is None:
        raise ConfigError("seed: required (set it in the config or pass --seed)")
    return int(seed)


def dump(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=False, default_flow_style=False)


def config_hash(cfg: Mapping) -> str:
    """Hash of the run-defining content (output location and thread count excluded)."""
    core = {k: v for k, v in cfg.items() if k not in ("output_dir", "threads")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
