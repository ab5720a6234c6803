"""Command-line experiment driver.

Subcommands: generate, train, filter, pf, evaluate, compare.
Exit codes: 0 success, 2 config/usage error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .baselines import cloud_samples, pf_filter
from .config import ConfigError, ExperimentConfig, derive_seed, load_config, system_dims
from .filtering import fbf_filter, sample_run
from .metrics import MetricReport
from .systems import Dataset, make_ssm_interface, simulate
from .training import TrainedFilter, TrainingDiverged, train

log = logging.getLogger("flowfilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# pipeline stages (importable)


def generate(cfg: ExperimentConfig, split: str = "train", n: int | None = None) -> Dataset:
    count = n if n is not None else (cfg.system.n_train if split == "train" else cfg.system.n_test)
    if count < 1:
        raise ConfigError("number of trajectories must be >= 1")
    seed = derive_seed(cfg.seed, f"data/{split}") % 2**32
    return simulate(cfg.system.id, cfg.system.params, count, seed)


def train_model(cfg: ExperimentConfig, data: Dataset, variant: str | None = None) -> TrainedFilter:
    model_cfg = cfg.model if variant is None else replace(cfg.model, variant=variant)
    if (data.m, data.n) != (model_cfg.state_dim, model_cfg.obs_dim):
        raise ConfigError(f"dataset dims ({data.m}, {data.n}) do not match the model")
    return train(data.states, data.measurements, model_cfg, cfg.training)


def filter_dataset(
    model: TrainedFilter, data: Dataset, n_samples: int, seed: int, jobs: int = 1
) -> tuple[list, np.ndarray]:
    """Filter every trajectory; returns runs and samples (N, K, n_samples, m)."""
    if data.m != model.latent.m or data.n != model.latent.n:
        raise ConfigError("checkpoint dims do not match dataset")

    def one(i):
        run = fbf_filter(model, data.measurements[i])
        return run, sample_run(model, run, n_samples, derive_seed(seed, "filter", i))

    results = _map(one, range(data.N), jobs)
    runs = [r for r, _ in results]
    return runs, np.stack([s for _, s in results])


def pf_dataset(
    data: Dataset, n_particles: int, n_samples: int, seed: int, jobs: int = 1
) -> tuple[list, np.ndarray]:
    ssm = make_ssm_interface(data.system, data.params)

    def one(i):
        clouds = pf_filter(ssm, data.measurements[i], n_particles, derive_seed(seed, "pf", i))
        return clouds, cloud_samples(clouds, n_samples, derive_seed(seed, "pf/samples", i))

    results = _map(one, range(data.N), jobs)
    return [c for c, _ in results], np.stack([s for _, s in results])


def evaluate(data: Dataset, samples: np.ndarray, metrics=("rmse", "mmd", "crps"), bandwidth: float = 2.0) -> MetricReport:
    if samples.shape[0] != data.N:
        raise ValueError(f"{samples.shape[0]} sample sets for {data.N} trajectories")
    report = MetricReport()
    for i in range(data.N):
        report.add(data.states[i, 1:], samples[i], metrics, bandwidth)
    return report


# --------------------------------------------------------------------------
# writers


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "lr"])
        for it, value, lr in history:
            w.writerow([it, repr(value), repr(lr)])


def write_beliefs_csv(runs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        m = runs[0].means.shape[1] if runs else 0
        w.writerow(["trajectory", "k"] + [f"mu{j}" for j in range(m)] + [f"var{j}" for j in range(m)])
        for i, run in enumerate(runs):
            for k in range(len(run)):
                w.writerow([i, k] + [repr(v) for v in run.means[k]] + [repr(v) for v in np.diag(run.covs[k])])


def write_clouds_csv(all_clouds, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        m = all_clouds[0][0].particles.shape[1] if all_clouds and all_clouds[0] else 0
        w.writerow(["trajectory", "k"] + [f"mean{j}" for j in range(m)] + [f"std{j}" for j in range(m)] + ["ess"])
        for i, clouds in enumerate(all_clouds):
            for c in clouds:
                w.writerow([i, c.step] + [repr(v) for v in c.mean()] + [repr(v) for v in np.sqrt(c.var())] + [repr(c.ess)])


def write_report(report: MetricReport, stem) -> None:
    stem = Path(stem)
    Path(f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    with open(f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = [k for k in ("rmse", "mmd", "crps") if getattr(report, k)]
        w.writerow(["trajectory"] + names)
        count = len(getattr(report, names[0])) if names else 0
        for i in range(count):
            w.writerow([i] + [repr(getattr(report, k)[i]) for k in names])


# --------------------------------------------------------------------------
# compare


def compare(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> list[dict]:
    """Train/evaluate every configured method on shared data; one row per
    (sweep value, method)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = cfg.compare.sweep_values or (None,)
    rows = []
    for v in values:
        sub = cfg
        label = "default"
        if v is not None:
            params = dict(cfg.system.params)
            kind = type(params[cfg.compare.sweep_key])
            params[cfg.compare.sweep_key] = kind(v)
            sub = replace(cfg, system=replace(cfg.system, params=params))
            label = f"{cfg.compare.sweep_key}={v:g}"
        train_data = generate(sub, "train")
        test_data = generate(sub, "test")
        ev = sub.evaluation
        for method in cfg.compare.methods:
            try:
                offline = float("nan")
                t0 = time.perf_counter()
                if method == "pf":
                    _, samples = pf_dataset(test_data, ev.pf_particles, ev.n_samples, derive_seed(sub.seed, "pf"), jobs)
                else:
                    model = train_model(sub, train_data, variant=method)
                    offline = time.perf_counter() - t0
                    t0 = time.perf_counter()
                    _, samples = filter_dataset(model, test_data, ev.n_samples, derive_seed(sub.seed, "filter"), jobs)
                online = time.perf_counter() - t0
            except Exception as err:  # noqa: BLE001 - relabel and propagate
                raise type(err)(f"[{method}] {err}") from err
            report = evaluate(test_data, samples, ev.metrics, ev.mmd_bandwidth)
            write_report(report, out_dir / f"{label}_{method}")
            row = {"config": label, "method": method}
            for name, agg in report.summary().items():
                row[f"{name}_mean"] = agg["mean"]
                row[f"{name}_std"] = agg["std"]
            row["offline_s"] = "NA" if method == "pf" else f"{offline:.3f}"
            row["online_s"] = f"{online:.3f}"
            rows.append(row)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return rows


# --------------------------------------------------------------------------
# argument handling


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.training = replace(cfg.training, seed=derive_seed(args.seed, "train") % 2**32)
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    ds = generate(cfg, args.split, args.n)
    nbytes = io.save_dataset(ds, args.out)
    print(f"wrote {args.out}: N={ds.N} K={ds.K} m={ds.m} n={ds.n} bytes={nbytes}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = io.load_dataset(args.data)
    loss_path = Path(str(args.out) + ".loss.csv")
    try:
        model = train_model(cfg, data)
    except TrainingDiverged as err:
        write_loss_csv(err.history, loss_path)
        raise
    io.save_checkpoint(model, args.out)
    write_loss_csv(model.history, loss_path)
    final = model.history[-1][1] if model.history else float("nan")
    print(f"wrote {args.out}: {len(model.history)} iterations, final objective {final:.4f}")
    return EXIT_OK


def cmd_filter(args) -> int:
    model = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    seed = args.seed if args.seed is not None else 0
    runs, samples = filter_dataset(model, data, args.samples, seed, args.jobs)
    io.save_samples(samples, args.out, {"method": model.variant, "seed": seed})
    write_beliefs_csv(runs, str(args.out) + ".beliefs.csv")
    print(f"wrote {args.out}: {samples.shape[0]} trajectories x {samples.shape[1]} steps x {samples.shape[2]} samples")
    return EXIT_OK


def cmd_pf(args) -> int:
    data = io.load_dataset(args.data)
    seed = args.seed if args.seed is not None else 0
    clouds, samples = pf_dataset(data, args.particles, args.samples, seed, args.jobs)
    io.save_samples(samples, args.out, {"method": "pf", "seed": seed, "particles": args.particles})
    write_clouds_csv(clouds, str(args.out) + ".clouds.csv")
    print(f"wrote {args.out}: {samples.shape[0]} trajectories, {args.particles} particles")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = io.load_dataset(args.data)
    samples, _ = io.load_samples(args.samples)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    try:
        report = evaluate(data, samples, metrics, args.bandwidth)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    write_report(report, args.out)
    for name, agg in report.summary().items():
        print(f"{name}: mean {agg['mean']:.6g} std {agg['std']:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    rows = compare(cfg, args.out, args.jobs)
    for r in rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowfilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--n", type=int, help="override the trajectory count")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a filter on a dataset")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("filter", help="filter a dataset with a checkpoint")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--samples", type=int, default=1000)
    f.add_argument("--seed", type=int)
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(func=cmd_filter)

    q = sub.add_parser("pf", help="bootstrap particle filter with the true model")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--particles", type=int, default=2000)
    q.add_argument("--samples", type=int, default=1000)
    q.add_argument("--seed", type=int)
    q.add_argument("--jobs", type=int, default=1)
    q.set_defaults(func=cmd_pf)

    e = sub.add_parser("evaluate", help="score sample files against the truth")
    e.add_argument("--data", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--out", required=True, help="output stem; writes .json and .csv")
    e.add_argument("--metrics", default="rmse,mmd,crps")
    e.add_argument("--bandwidth", type=float, default=2.0)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="FBF / FBF' / PF comparison table")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(err, ConfigError) else EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
