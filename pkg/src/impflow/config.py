"""Run configuration: sectioned ``key = value`` text with presets and strict validation."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .logdet import EstimatorConfig
from .solvers import SolverConfig
from .training import DatasetSpec, RegressionConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 < v <= 1


def _choice(*opts):
    def check(v):
        return v in opts
    check.__doc__ = "one of " + ", ".join(map(str, opts))
    return check


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, check, requirement text)
SCHEMA = {
    "run": {
        "preset": (str, _choice("", "checkerboard", "checkerboard-res", "checkerboard-full",
                                "checkerboard-res-full"), "a known preset"),
        "seed": (int, _nonneg, ">= 0"),
        "out": (str, None, ""),
        "workers": (int, _pos, ">= 1"),
        "checkpoint": (str, None, ""),
    },
    "data": {
        "kind": (str, _choice("checkerboard2d", "target1d", "gaussian"), "checkerboard2d, target1d or gaussian"),
        "dim": (int, _pos, ">= 1"),
        "bound": (float, _pos, "> 0"),
        "mean": (float, None, ""),
        "std": (float, _pos, "> 0"),
    },
    "model": {
        "kind": (str, _choice("imp", "res"), "imp or res"),
        "n_blocks": (int, _nonneg, ">= 0"),
        "hidden": (int, _pos, ">= 1"),
        "n_layers": (int, _pos, ">= 1"),
        "c": (float, _unit, "in (0, 1]"),
        "activation": (str, _choice("relu", "lipswish", "sine"), "relu, lipswish or sine"),
        "n_power_iters": (int, _pos, ">= 1"),
        "init_scale": (float, _pos, "> 0"),
    },
    "train": {
        "lr": (float, _pos, "> 0"),
        "weight_decay": (float, _nonneg, ">= 0"),
        "batch_size": (int, _pos, ">= 1"),
        "n_iters": (int, _nonneg, ">= 0"),
        "eval_interval": (int, _pos, ">= 1"),
        "sn_iters": (int, _pos, ">= 1"),
    },
    "solver": {
        "eps_f": (float, _pos, "> 0"),
        "eps_b": (float, _pos, "> 0"),
        "max_iter": (int, _pos, ">= 1"),
        "ls_shrink": (float, lambda v: 0 < v < 1, "in (0, 1)"),
        "ls_max_trials": (int, _pos, ">= 1"),
        "init_mode": (str, _choice("zero", "passthrough"), "zero or passthrough"),
    },
    "estimator": {
        "mode": (str, _choice("exact", "stochastic"), "exact or stochastic"),
        "dist": (str, _choice("geometric", "poisson"), "geometric or poisson"),
        "p": (float, _unit, "in (0, 1]"),
        "lam": (float, _pos, "> 0"),
        "n_exact": (int, _nonneg, ">= 0"),
        "probes_per_sample": (int, _pos, ">= 1"),
        "n_samples": (int, _pos, ">= 1"),
    },
    "eval": {
        "n_test": (int, _pos, ">= 1"),
        "n_samples": (int, _pos, ">= 1"),
        "sample_tol": (float, _pos, "> 0"),
        "eps_sweep": (_floats, lambda v: len(v) > 0 and all(e > 0 for e in v), "positive numbers"),
        "sensitivity_limit": (float, _pos, "> 0"),
    },
    "grid": {
        "xmin": (float, None, ""),
        "xmax": (float, None, ""),
        "ymin": (float, None, ""),
        "ymax": (float, None, ""),
        "resolution": (int, _pos, ">= 1"),
    },
    "regression": {
        "depths": (_ints, lambda v: len(v) > 0 and all(1 <= d <= 3 for d in v), "integers in 1..3"),
        "batch_size": (int, _pos, ">= 1"),
        "max_iters": (int, _pos, ">= 1"),
        "window": (int, _pos, ">= 1"),
        "rel_improvement": (float, _pos, "> 0"),
        "exact": (_bool, None, ""),
    },
}

PRESETS = {
    "checkerboard": {
        "data": {"kind": "checkerboard2d"},
        "model": {"kind": "imp", "n_blocks": 4, "hidden": 128, "n_layers": 4, "c": 0.999,
                  "activation": "sine", "n_power_iters": 20},
        "train": {"lr": 1e-3, "weight_decay": 1e-5, "batch_size": 500, "n_iters": 5000},
        "estimator": {"mode": "exact"},
        "eval": {"n_test": 10000},
    },
}
PRESETS["checkerboard-res"] = {**PRESETS["checkerboard"],
                               "model": {**PRESETS["checkerboard"]["model"], "kind": "res", "n_blocks": 8}}
PRESETS["checkerboard-full"] = {**PRESETS["checkerboard"],
                                "train": {**PRESETS["checkerboard"]["train"], "batch_size": 5000,
                                          "n_iters": 50000}}
PRESETS["checkerboard-res-full"] = {**PRESETS["checkerboard-res"], "train": PRESETS["checkerboard-full"]["train"]}


@dataclass
class ModelSpec:
    kind: str = "imp"
    n_blocks: int = 1
    hidden: int = 128
    n_layers: int = 4
    c: float = 0.9
    activation: str = "lipswish"
    n_power_iters: int = 200
    init_scale: float = 1.0


@dataclass
class EvalSpec:
    n_test: int = 10000
    n_samples: int = 1000
    sample_tol: float = 1e-5
    eps_sweep: list = field(default_factory=lambda: [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3])
    sensitivity_limit: float = 0.02


@dataclass
class GridSpec:
    xmin: float = -4.0
    xmax: float = 4.0
    ymin: float = -4.0
    ymax: float = 4.0
    resolution: int = 100


@dataclass
class RegressionSpec:
    depths: list = field(default_factory=lambda: [1, 2, 3])
    batch_size: int = 1000
    max_iters: int = 5000
    window: int = 1000
    rel_improvement: float = 1e-4
    exact: bool = False


@dataclass
class RunConfig:
    preset: str = ""
    seed: int = 0
    out: str = "runs/latest"
    workers: int = 1
    checkpoint: str = ""
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    n_estimator_samples: int = 100_000
    eval: EvalSpec = field(default_factory=EvalSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    regression: RegressionSpec = field(default_factory=RegressionSpec)
    values: dict = field(default_factory=dict, repr=False)  # effective section -> key -> value

    def regression_config(self, depth: int) -> RegressionConfig:
        r = self.regression
        return RegressionConfig(kind="res", n_blocks=depth, batch_size=r.batch_size, max_iters=r.max_iters,
                                window=r.window, rel_improvement=r.rel_improvement, seed=self.seed,
                                solver=self.solver)

    def to_text(self) -> str:
        """Effective configuration in the same format that ``parse_config`` reads."""
        cp = configparser.ConfigParser(interpolation=None)
        for sec, kv in self.values.items():
            cp[sec] = {k: _fmt(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, list):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _defaults() -> dict:
    rc = RunConfig()
    t, s, e = rc.train, rc.solver, rc.estimator
    return {
        "run": {"preset": "", "seed": rc.seed, "out": rc.out, "workers": rc.workers, "checkpoint": ""},
        "data": {"kind": rc.data.kind, "dim": rc.data.dim, "bound": rc.data.bound, "mean": rc.data.mean,
                 "std": rc.data.std},
        "model": dict(vars(rc.model)),
        "train": {"lr": t.lr, "weight_decay": t.weight_decay, "batch_size": t.batch_size,
                  "n_iters": t.n_iters, "eval_interval": t.eval_interval, "sn_iters": 20},
        "solver": {k: getattr(s, k) for k in SCHEMA["solver"]},
        "estimator": {"mode": e.mode, "dist": e.dist, "p": e.p, "lam": e.lam, "n_exact": e.n_exact,
                      "probes_per_sample": e.probes_per_sample, "n_samples": rc.n_estimator_samples},
        "eval": dict(vars(rc.eval)),
        "grid": dict(vars(rc.grid)),
        "regression": dict(vars(rc.regression)),
    }


def _read(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"line {e.lineno}: expected a [section] header, got {e.line.strip()!r}") from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"line {lineno}: cannot parse {line.strip()!r}") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(f"line {e.lineno}: {e.message if hasattr(e, 'message') else e}") from None
    return cp


def parse_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """Parse and validate; ``overrides`` maps ``"section.key"`` to raw values (CLI flags).

    Precedence: defaults < preset < file < overrides.
    """
    cp = _read(text)
    raw: dict[str, dict[str, str]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            raw.setdefault(sec, {})[key] = val
    for dotted, val in (overrides or {}).items():
        sec, key = dotted.split(".", 1)
        raw.setdefault(sec, {})[key] = str(val)

    values = _defaults()
    preset = raw.get("run", {}).get("preset", "").strip()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"invalid value for run.preset: unknown preset {preset!r}")
        for sec, kv in PRESETS[preset].items():
            values[sec].update(kv)
    for sec, kv in raw.items():
        for key, text_val in kv.items():
            parse, check, need = SCHEMA[sec][key]
            try:
                v = parse(text_val.strip())
            except ValueError:
                raise ConfigError(f"invalid value for {sec}.{key}: {text_val.strip()!r}") from None
            if check is not None and not check(v):
                raise ConfigError(f"invalid value for {sec}.{key}: {text_val.strip()!r} (must be {need})")
            values[sec][key] = v
    return _build(values)


def _build(v: dict) -> RunConfig:
    def make(name, fn):
        try:
            return fn()
        except ValueError as e:
            raise ConfigError(f"invalid [{name}] settings: {e}") from None

    d, m, t, s, e = v["data"], v["model"], v["train"], v["solver"], v["estimator"]
    if d["kind"] != "gaussian":
        d["dim"] = 2 if d["kind"] == "checkerboard2d" else 1
    data = make("data", lambda: DatasetSpec(kind=d["kind"], dim=d["dim"], bound=d["bound"], mean=d["mean"],
                                            std=d["std"]))
    solver = make("solver", lambda: SolverConfig(**s))
    est = make("estimator", lambda: EstimatorConfig(dist=e["dist"], p=e["p"], lam=e["lam"], n_exact=e["n_exact"],
                                                    probes_per_sample=e["probes_per_sample"], mode=e["mode"]))
    train = make("train", lambda: TrainConfig(lr=t["lr"], weight_decay=t["weight_decay"],
                                              batch_size=t["batch_size"], n_iters=t["n_iters"],
                                              seed=v["run"]["seed"], eval_interval=t["eval_interval"],
                                              solver=solver, estimator=est, sn_iters=t["sn_iters"]))
    g = v["grid"]
    if not (g["xmin"] < g["xmax"] and g["ymin"] < g["ymax"]):
        raise ConfigError("invalid value for grid bounds: need xmin < xmax and ymin < ymax")
    r = v["run"]
    return RunConfig(preset=r["preset"], seed=r["seed"], out=r["out"], workers=r["workers"],
                     checkpoint=r["checkpoint"], data=data, model=ModelSpec(**m), train=train, solver=solver,
                     estimator=est, n_estimator_samples=e["n_samples"], eval=EvalSpec(**v["eval"]),
                     grid=GridSpec(**g), regression=RegressionSpec(**v["regression"]), values=v)
