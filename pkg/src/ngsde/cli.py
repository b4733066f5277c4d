"""Command-line experiment runner.

Commands: ``simulate``, ``fit``, ``eval``, ``bench``, ``study-dt``.  All are
driven by a YAML config (``--config`` or ``--preset``); metrics and traces
are emitted as JSON and tidy CSVs for downstream plotting.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import experiments
from .baselines import vdp_fit
from .config import ConfigError, dump_config, load_config, load_preset
from .dataio import read_dataset, write_dataset
from .dynamics import LinearDrift
from .errors import Diverged, NGSDEError, NotPositiveDefinite, StepFailed
from .grids import TimeGrid
from .inference import discretization_study
from .parallel import ExecContext

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _load(args):
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        raise ConfigError("provide --config PATH or --preset NAME")
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg.setdefault("dataset", {})["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    return cfg


def _out_dir(cfg, default):
    out = cfg.get("output_dir", default)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _load(args)
    dataset = experiments.generate_dataset(cfg)
    out = _out_dir(cfg, "out/dataset")
    write_dataset(out, dataset)
    print(f"wrote {dataset.n_trials} trials to {out}")
    return EXIT_OK


def _dataset_for(cfg, args):
    if getattr(args, "data", None):
        dataset = read_dataset(args.data)
        if dataset.config and dataset.config.get("dataset", {}).get("kind", "generate") == "generate":
            regen = experiments.generate_dataset(dataset.config)
            dataset.latents = regen.latents
        return dataset
    if cfg.get("dataset", {}).get("kind", "generate") == "generate":
        return experiments.generate_dataset(cfg)
    path = cfg.get("dataset", {}).get("path")
    if not path:
        raise ConfigError("dataset.kind: ingest requires dataset.path")
    return read_dataset(path)


def cmd_fit(args):
    cfg = _load(args)
    dataset = _dataset_for(cfg, args)
    out = _out_dir(cfg, "out/fit")
    log_path = os.path.join(out, "diagnostics.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    result, diag = experiments.run_fit(cfg, dataset, out_dir=out,
                                       log_path=log_path)
    experiments.save_archive(out, cfg, result)
    summary = {k: v for k, v in diag[-1].items()} if diag else {}
    print(json.dumps({"out": out, "final": summary}, default=float))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load(args)
    dataset = _dataset_for(cfg, args)
    result = experiments.load_archive(args.archive, dataset)
    metrics = experiments.compute_metrics(cfg, result, dataset)
    out = _out_dir(cfg, "out/eval")
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True, default=float)
    print(json.dumps(metrics, sort_keys=True, default=float))
    return EXIT_OK


def bench_rows(cfg, ctx=None, t_list=None, d_list=None, reps=None,
               iterations=None, trials=None):
    """Timed fits with sequential vs parallel parameter conversion.

    Returns rows of (method, D, T, batch, mean_seconds, std_seconds); the
    datasets are random stable linear systems, fresh per (D, T, rep).
    """
    from .inference import SINGConfig, RhoSchedule, fit as run_inference, ModelBundle
    from .dynamics import DiffusionSpec, InitialState, euler_maruyama_sample
    from .observations import GaussianObservation, simulate_observations
    from .expectations import ExpectationConfig

    bench = cfg.get("bench", {})
    t_list = t_list or [int(t) for t in bench.get("t_list", [256, 1024, 4096])]
    d_list = d_list or [int(d) for d in bench.get("d_list", [2, 5])]
    reps = reps or int(bench.get("reps", 3))
    iterations = iterations or int(bench.get("iterations", 20))
    trials = trials or int(bench.get("trials", 1))
    rows = []
    for d in d_list:
        for t_steps in t_list:
            times = {"sequential": [], "parallel": []}
            for rep in range(reps + 1):  # first rep warms caches, discarded
                rng = np.random.default_rng([17, d, t_steps, rep])
                G = rng.standard_normal((d, d)) / np.sqrt(d)
                shift = max(np.real(np.linalg.eigvals(G)).max(), 0.0) + 0.5
                drift = LinearDrift(A=G - shift * np.eye(d),
                                    b=0.1 * rng.standard_normal(d))
                diffusion = DiffusionSpec.isotropic(d)
                initial = InitialState(nu=np.zeros(d), V=np.eye(d))
                grid = TimeGrid.regular(1e-3, t_steps * 1e-3)
                obs = GaussianObservation(
                    C=rng.standard_normal((10, d)),
                    d=rng.standard_normal(10),
                    R_diag=0.35 * np.ones(10),
                )
                latents = euler_maruyama_sample(drift, diffusion, initial,
                                                grid, seed=rep, trials=trials)
                y = simulate_observations(obs, latents, grid, seed=rep + 1)
                bundle = ModelBundle(drift=drift, diffusion=diffusion,
                                     initial=initial, observation=obs,
                                     grid=grid, y=y)
                for method in ("sequential", "parallel"):
                    sc = SINGConfig(
                        iterations=iterations,
                        rho_schedule=RhoSchedule(kind="constant", rho=0.5),
                        expectation=ExpectationConfig(method="quadrature",
                                                      nodes_per_dim=3),
                        conversion=method, track_elbo=False,
                    )
                    t0 = time.perf_counter()
                    run_inference(bundle, sc)
                    elapsed = time.perf_counter() - t0
                    if rep > 0:
                        times[method].append(elapsed)
            for method in ("sequential", "parallel"):
                arr = np.asarray(times[method])
                rows.append({
                    "method": method, "D": d, "T": t_steps, "batch": trials,
                    "mean_seconds": float(arr.mean()),
                    "std_seconds": float(arr.std()),
                })
    return rows


def cmd_bench(args):
    cfg = _load(args)
    ctx = ExecContext(threads=args.threads)
    rows = bench_rows(cfg, ctx=ctx)
    out = _out_dir(cfg, "out/bench")
    path = os.path.join(out, "runtime.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(row)
    return EXIT_OK


def study_dt_table(cfg):
    """Gap |L_cont - L_approx(dt)| over halvings of the base step."""
    from .inference import ModelBundle

    study = cfg.get("study_dt", {})
    dt_base = float(study.get("dt_base", 0.02))
    halvings = int(study.get("halvings", 4))
    refine = int(study.get("refine", 100))
    obs_period = float(study.get("obs_every_seconds", 2 * dt_base))
    base_cfg = dict(cfg)
    dataset = experiments.generate_dataset(cfg)
    base_bundle = experiments.build_bundle(cfg, dataset)
    obs_idx = np.nonzero(dataset.grid.obs_mask)[0]
    obs_times = dataset.grid.times[obs_idx]
    y_obs = dataset.y[:, obs_idx, :]
    t_max = dataset.grid.t_max

    def bundle_factory(dt):
        grid = TimeGrid.regular(dt, t_max)
        mask = np.zeros(grid.num_steps + 1, dtype=bool)
        pos = np.searchsorted(grid.times, obs_times - 1e-12)
        if not np.allclose(grid.times[pos], obs_times, atol=1e-9):
            raise ConfigError("observation times must lie on every study grid")
        mask[pos] = True
        y = np.zeros((y_obs.shape[0], grid.num_steps + 1, y_obs.shape[2]))
        y[:, pos, :] = y_obs
        return ModelBundle(
            drift=base_bundle.drift, diffusion=base_bundle.diffusion,
            initial=base_bundle.initial, observation=base_bundle.observation,
            grid=grid.with_mask(mask), y=y,
        )

    dt_list = [dt_base / 2 ** k for k in range(halvings + 1)]
    d = base_bundle.dim
    rng = np.random.default_rng([cfg.get("seed", 0), 55])
    var_A = base_bundle.drift.A * 0.9 + 0.5 * rng.standard_normal((d, d))
    var_b = 0.5 * rng.standard_normal(d)
    m0 = 0.3 * rng.standard_normal(d)
    S0 = 0.5 * np.eye(d)
    rows, slope = discretization_study(bundle_factory, dt_list, var_A, var_b,
                                       m0, S0, refine=refine)
    return rows, slope


def cmd_study_dt(args):
    cfg = _load(args)
    rows, slope = study_dt_table(cfg)
    out = _out_dir(cfg, "out/study_dt")
    path = os.path.join(out, "gap.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dt", "gap"])
        writer.writerows(rows)
    print(json.dumps({"slope": slope, "rows": rows}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ngsde",
        description="Variational inference and drift estimation for latent "
                    "SDE models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("simulate", cmd_simulate), ("fit", cmd_fit),
                     ("eval", cmd_eval), ("bench", cmd_bench),
                     ("study-dt", cmd_study_dt)]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a YAML experiment config")
        p.add_argument("--preset", help="name of a packaged preset config")
        p.add_argument("--threads", type=int, default=0,
                       help="worker threads (default: host cores)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        if name in ("fit", "eval"):
            p.add_argument("--data", default=None,
                           help="dataset directory (default: regenerate)")
        if name == "eval":
            p.add_argument("--archive", required=True,
                           help="fitted-model archive directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailed, Diverged, NotPositiveDefinite) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NGSDEError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
