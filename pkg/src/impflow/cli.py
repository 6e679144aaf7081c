"""``impflow`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 failed checks.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .blocks import ConvergenceError
from .config import ConfigError, RunConfig, parse_config
from .flow import FlowModel, build_flow, emit_density_grid
from .lipschitz_net import build_mlp
from .logdet import EstimatorConfig
from .numeric import RandomState
from .theory import (BoundReport, corollary6_counterexample,
                     estimator_audit, exact_construction_check, lipschitz_ratio_check,
                     negative_eigenvalue_sweep, sensitivity_sweep, theorem3_bound_check,
                     tolerance_sweep_1d)
from .training import fit_1d_regression, train_density

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECKS = 0, 2, 3, 4
COMMANDS = ("train", "eval", "sample", "density-grid", "repro-1d", "theory-check", "sensitivity",
            "estimator-audit")
# regression anchors: depth -> (mse, relative tolerance)
REGRESSION_ANCHORS = {1: (5.25, 0.2), 2: (2.47, 0.2), 3: (0.32, 0.3)}


def build_id() -> str:
    """Content hash of the package sources (stable across checkouts of the same code)."""
    h = hashlib.sha1()
    root = Path(__file__).resolve().parent
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impflow", description="Implicit and residual normalizing flows.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="sectioned key = value file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--mode", choices=("exact", "stochastic"), help="log-determinant evaluation")
    ap.add_argument("--checkpoint", help="model checkpoint (eval, sample, density-grid, sensitivity)")
    ap.add_argument("--preset", help="named configuration preset")
    ap.add_argument("--exact", action="store_true", help="repro-1d: analytic construction only")
    ap.add_argument("--quiet", action="store_true")
    return ap


def _overrides(args) -> dict:
    o = {}
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("workers", "run.workers"),
                      ("mode", "estimator.mode"), ("checkpoint", "run.checkpoint"), ("preset", "run.preset")):
        val = getattr(args, flag)
        if val is not None:
            o[key] = val
    if args.exact:
        o["regression.exact"] = "true"
    return o


class _Run:
    def __init__(self, cfg: RunConfig, command: str, quiet: bool):
        self.cfg, self.command, self.quiet = cfg, command, quiet
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "effective_config.ini").write_text(cfg.to_text())
        self.meta = {"command": command, "seed": cfg.seed, "build_id": build_id(), "version": __version__,
                     "python": platform.python_version(), "numpy": np.__version__,
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self.write_json("run.json", self.meta)

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)

    def write_json(self, name: str, obj) -> None:
        (self.out / name).write_text(json.dumps(obj, indent=2, default=_json_default))

    def reports(self, reps: list[BoundReport], name: str = "reports.json") -> int:
        self.write_json(name, [r.to_dict() for r in reps])
        for r in reps:
            tag = {True: "PASS", False: "FAIL", None: "INFO"}[r.passed]
            self.log(f"{tag} {r.name}: measured {_short(r.measured)} vs bound {_short(r.bound)}")
        return EXIT_CHECKS if any(r.passed is False for r in reps) else EXIT_OK


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list) and len(v) <= 6:
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def _load_model(run: _Run) -> FlowModel:
    if not run.cfg.checkpoint:
        raise ConfigError("this command needs run.checkpoint (or --checkpoint)")
    try:
        return FlowModel.load(run.cfg.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load checkpoint {run.cfg.checkpoint!r}: {e}") from None


def _new_model(cfg: RunConfig, rng: RandomState) -> FlowModel:
    m = cfg.model
    if m.n_blocks == 0:
        return FlowModel([], cfg.data.dim)
    return build_flow(m.kind, cfg.data.dim, m.n_blocks, m.hidden, m.n_layers, m.activation, m.c, rng,
                      m.init_scale, m.n_power_iters)


def _test_data(cfg: RunConfig):
    # test points come from their own stream so they do not depend on training
    return cfg.data.sample(RandomState(cfg.seed).spawn(2)[1], cfg.eval.n_test)


def cmd_train(run: _Run) -> int:
    cfg = run.cfg
    model = _new_model(cfg, RandomState(cfg.seed).spawn(1)[0])
    run.log(f"training {cfg.model.kind} flow with {len(model.blocks)} blocks, {model.n_params} parameters")
    hist = train_density(model, cfg.data, cfg.train, history_path=run.out / "history.csv",
                         checkpoint_dir=run.out / "checkpoints", log=run.log)
    model.save(run.out / "model.json")
    test = model.nll(_test_data(cfg), cfg.estimator.mode, cfg.solver, RandomState(cfg.seed + 1),
                     cfg.estimator, workers=cfg.workers)
    run.write_json("metrics.json", {"test_nll_bits": test.bits, "test_nll_nats": test.nats,
                                    "test_se_nats": test.se_nats, "n_params": model.n_params,
                                    "skipped_batches": len(hist.skipped), "seconds": hist.seconds})
    run.log(f"test nll {test.bits:.4f} bits ({test.nats:.4f} nats), skipped batches {len(hist.skipped)}")
    return EXIT_OK


def cmd_eval(run: _Run) -> int:
    cfg = run.cfg
    model = _load_model(run)
    test = model.nll(_test_data(cfg), cfg.estimator.mode, cfg.solver, RandomState(cfg.seed + 1),
                     cfg.estimator, workers=cfg.workers)
    run.write_json("metrics.json", {"test_nll_bits": test.bits, "test_nll_nats": test.nats,
                                    "test_se_nats": test.se_nats, "n": test.n, "mode": cfg.estimator.mode})
    run.log(f"test nll {test.bits:.4f} bits ({test.nats:.4f} nats)")
    return EXIT_OK


def cmd_sample(run: _Run) -> int:
    cfg = run.cfg
    model = _load_model(run)
    res = model.sample(RandomState(cfg.seed), cfg.eval.n_samples, cfg.solver, cfg.eval.sample_tol)
    with open(run.out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(model.dim)])
        w.writerows([[repr(float(v)) for v in row] for row in res.samples])
    run.write_json("metrics.json", {"requested": cfg.eval.n_samples, "returned": len(res.samples),
                                    "failed": res.n_failed})
    run.log(f"{len(res.samples)} samples written, {res.n_failed} excluded for non-convergence")
    return EXIT_OK


def cmd_density_grid(run: _Run) -> int:
    cfg = run.cfg
    model = _load_model(run)
    g = cfg.grid
    if model.dim != 2:
        raise ConfigError(f"density-grid needs a 2-D model, checkpoint has dim {model.dim}")
    emit_density_grid(model, (g.xmin, g.xmax, g.ymin, g.ymax), g.resolution, run.out / "grid.csv",
                      cfg.solver, cfg.workers)
    run.log(f"wrote {g.resolution ** 2} grid rows")
    return EXIT_OK


def cmd_repro_1d(run: _Run) -> int:
    cfg = run.cfg
    if cfg.regression.exact:
        t0 = time.perf_counter()
        rep = exact_construction_check(cfg=cfg.solver)
        rep.details["seconds"] = time.perf_counter() - t0
        return run.reports([rep])
    reps, rows = [], []
    for depth in cfg.regression.depths:
        res = fit_1d_regression(cfg.regression_config(depth), log=run.log)
        anchor, rel = REGRESSION_ANCHORS[depth]
        lo, hi = anchor * (1 - rel), anchor * (1 + rel)
        reps.append(BoundReport(f"regression_mse_l{depth}", [lo, hi], res.mse, lo <= res.mse <= hi,
                                {"iterations": res.n_iters, "seconds": res.seconds}))
        reps.append(theorem3_bound_check(depth, res.model, cfg=cfg.solver))
        rows.append({"depth": depth, "mse": res.mse, "sup_error": res.sup_error, "iterations": res.n_iters})
        res.model.save(run.out / f"regression_l{depth}.json")
    with open(run.out / "regression.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["depth", "mse", "sup_error", "iterations"])
        w.writeheader()
        w.writerows(rows)
    return run.reports(reps)


def cmd_theory_check(run: _Run) -> int:
    cfg = run.cfg
    rng = RandomState(cfg.seed)
    cx = corollary6_counterexample(rng.spawn(1)[0])
    target = np.array([[0.2776, -0.4293], [0.5290, -0.6757]])
    reps = [
        exact_construction_check(cfg=cfg.solver),
        tolerance_sweep_1d(),
        BoundReport("counterexample_product", 1e-4, float(np.max(np.abs(cx.product - target))),
                    bool(np.max(np.abs(cx.product - target)) <= 1e-4), {"product": cx.product}),
        BoundReport("counterexample_eigenvalues", 1e-3,
                    [complex(e).real for e in cx.eigenvalues],
                    bool(cx.both_negative and np.allclose(sorted(complex(e).real for e in cx.eigenvalues),
                                                          [-0.2100, -0.1881], atol=1e-3)), {}),
        BoundReport("counterexample_contractive", 1.0, cx.residual_norms, cx.all_contractive, {}),
    ]
    for kind, n_blocks in (("res", 1), ("res", 2), ("imp", 1)):
        for c in (0.6, 0.9):
            model = build_flow(kind, 2, n_blocks, 32, 3, "lipswish", c, rng, init_scale=3.0)
            rep = lipschitz_ratio_check(model, 10_000, rng)
            rep.name = f"lipschitz_ratio_{kind}{n_blocks}_c{c}"
            reps.append(rep)
    reps.append(negative_eigenvalue_sweep(rng=rng))
    return run.reports(reps)


def cmd_sensitivity(run: _Run) -> int:
    cfg = run.cfg
    model = _load_model(run)
    rep = sensitivity_sweep(model, _test_data(cfg), cfg.eval.eps_sweep, cfg.eval.sensitivity_limit)
    return run.reports([rep])


def cmd_estimator_audit(run: _Run) -> int:
    cfg = run.cfg
    rng = RandomState(cfg.seed)
    d = cfg.data.dim
    m = cfg.model
    reps = []
    configs = [EstimatorConfig(dist=cfg.estimator.dist, p=cfg.estimator.p, lam=cfg.estimator.lam,
                               n_exact=k, mode="stochastic") for k in sorted({0, 2, cfg.estimator.n_exact})]
    for i in range(3):
        net = build_mlp(d, min(m.hidden, 32), m.n_layers, m.activation, min(m.c, 0.9), rng)
        x = rng.normal(d)
        for ec in configs:
            rep = estimator_audit(net, x, ec, cfg.n_estimator_samples, rng)
            rep.name = f"logdet_estimator_net{i}_{ec.dist}_K{ec.n_exact}"
            reps.append(rep)
    return run.reports(reps)


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "density-grid": cmd_density_grid,
            "repro-1d": cmd_repro_1d, "theory-check": cmd_theory_check, "sensitivity": cmd_sensitivity,
            "estimator-audit": cmd_estimator_audit}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else ""
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, _overrides(args))
        run = _Run(cfg, args.command, args.quiet)
        run.log(f"impflow {args.command}: seed {cfg.seed}, build {run.meta['build_id']}, out {run.out}")
        return HANDLERS[args.command](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
