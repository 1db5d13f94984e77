"""Batch driver.

``flowhedge --config exp.toml [--pipeline P] [--seed N] [--threads N] [--out DIR]``

Exit status: 0 on success, 2 for an invalid config (or bad flags), 3 when a
pipeline fails. Every run ends by writing ``manifest.json`` in the output
directory, listing each artifact with its SHA-256. Command-line flags
override the ``[run]`` block; environment variables are never read.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import artifacts, config, riccati
from .errors import ConfigInvalid, FlowHedgeError, PipelineFailed
from .hedge import HedgePolicy, Setup, SurfaceV1, backtest, mean_se, simulate_under_pa
from .kalman import solve_covariance
from .lsm import Basis
from .network import aggregate_flows, flow_matrix, write_flow_matrix
from .value import assemble, compare_policies, fit_v1_surface, value_quadratic, write_curves

PATH_CSV_LIMIT = 100


class _Outputs:
    """Collects artifact names (relative to the output directory) and manifest notes."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list = []
        self.notes: list = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p


# ---------------------------------------------------------------- pipelines


def _simulate(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    from .engine import simulate_truth_ensemble

    r = cfg.run
    ens = simulate_truth_ensemble(cfg.model, r.horizon, r.step, r.seed, r.paths, threads=r.threads)
    names = [c.name for c in cfg.model.channels]
    artifacts.write_cache(out.path("paths.bin"), artifacts.ensemble_arrays(ens))
    shown = min(ens.npaths, PATH_CSV_LIMIT)
    for i in range(shown):
        artifacts.write_path_csv(ens.path(i), out.path(f"paths/path_{i:05d}.csv"))
    if shown < ens.npaths:
        out.notes.append(f"per-path CSV written for the first {shown} of {ens.npaths} paths; all are in paths.bin")
    payout = cfg.loss if cfg.grades else None
    artifacts.write_events_csv(out.path("events.csv"), ens.events, names, payout)
    summary = {"paths": ens.npaths, "events_per_channel": {n: int(np.sum(ens.events.channel == k))
                                                          for k, n in enumerate(names)},
               "min_queue": int(ens.Q.min()) if ens.Q.size else 0}
    if cfg.network is not None:
        M = flow_matrix(cfg.network, names, ens.counts[:, -1])
        write_flow_matrix(out.path("flow_matrix.csv"), M)
        A, D = aggregate_flows(cfg.network, names, ens.counts[:, -1])
        Q0 = np.asarray(cfg.model.q0)
        summary["conservation_max_gap"] = int(np.abs(ens.Q[:, -1] - (Q0 + A - D)).max())
    artifacts.write_json(out.path("simulate.json"), summary)


def _filter(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    from .engine import simulate_truth_ensemble

    r = cfg.run
    cov = solve_covariance(cfg.model.premium, r.horizon, r.step / 10, d=cfg.model.market.d)
    ens = simulate_truth_ensemble(cfg.model, r.horizon, r.step, r.seed, r.paths, threads=r.threads, cov=cov)
    artifacts.write_filter_trajectories(out.path("filter_trajectories.csv"), ens)
    err = ens.zhat - ens.z
    onehot = np.eye(cfg.model.chain.N)[ens.x]
    artifacts.write_json(out.path("filter.json"), {
        "paths": ens.npaths,
        "rmse_zhat": np.sqrt(np.mean(err**2, axis=(0, 1))),
        "mean_abs_xhat_error": np.mean(np.abs(ens.xhat - onehot), axis=(0, 1)),
        "min_xhat": float(ens.xhat.min()),
        "max_normalization_gap": float(np.abs(ens.xhat.sum(axis=2) - 1).max()),
    })


def _riccati(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    r = cfg.run
    setup = Setup.build(cfg.model, r.horizon, r.step)
    z0 = cfg.model.premium.z0
    riccati.write_csv(setup.ric, out.path("riccati.csv"), z_ref=z0)
    n = cfg.model.premium.n
    cov = setup.cov
    with open(out.path("covariance.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["t"] + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)]) + "\n")
        for t, S in zip(cov.times, cov.Sigma):
            fh.write(",".join([repr(float(t))] + [repr(float(x)) for x in S.ravel()]) + "\n")
    artifacts.write_json(out.path("riccati.json"), {"V2_0": float(setup.v2(0.0, z0)), "horizon": r.horizon,
                                                    "riccati_step": float(setup.ric.times[1] - setup.ric.times[0])})


def _fit(cfg, setup, claim):
    r = cfg.run
    return fit_v1_surface(setup, claim, r.train_paths, r.seed + 1, Basis(), threads=r.threads)


def _price(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    r = cfg.run
    setup = Setup.build(cfg.model, r.horizon, r.step)
    surface = _fit(cfg, setup, cfg.claim)
    pa = simulate_under_pa(setup, cfg.claim, r.paths, r.seed, threads=r.threads, control=SurfaceV1(surface))
    v1, se = mean_se(pa.adjusted)
    V2 = float(setup.v2(0.0, cfg.model.premium.z0))
    artifacts.write_json(out.path("price.json"), {"V1": v1, "V1_se": se, "V2": V2, "price": v1 / V2,
                                                  "price_se": se / V2})


def _value(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    r = cfg.run
    setup = Setup.build(cfg.model, r.horizon, r.step)
    q = value_quadratic(setup, cfg.claim, r.paths, r.seed, r.train_paths, threads=r.threads)
    curve = assemble(q.V2, q.V1, q.V0, 0.0, cfg.w_grid)[0]
    write_curves(out.path("value_curve.csv"), ["claim"], cfg.w_grid, [curve])
    artifacts.write_json(out.path("value.json"), {"V2": q.V2, "V1": q.V1, "V1_se": q.V1_se, "V0": q.V0,
                                                  "V0_se": q.V0_se, "w_star": q.w_star, "min_value": q.minimum})


def _hedge(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    r = cfg.run
    setup = Setup.build(cfg.model, r.horizon, r.step)
    surface = _fit(cfg, setup, cfg.claim)
    anchor = value_quadratic(setup, cfg.claim, cfg.anchor_paths or r.paths, r.seed + 3, threads=r.threads,
                             surface=surface)
    policy = HedgePolicy(setup, cfg.claim, SurfaceV1(surface), anchor=anchor)
    rep = backtest(policy, r.paths, r.seed, threads=r.threads, scale=cfg.hedge_scale)
    drift = out.path("drift.csv") if rep.drift_per_step is not None else None
    rep.write(out.path("hedge.json"), out.path("terminal_errors.csv"), drift)
    artifacts.write_histogram(out.path("error_histogram.csv"), rep.terminal_error, cfg.hist_bins)


def _compare(cfg: config.ExperimentConfig, out: _Outputs) -> None:
    r = cfg.run
    if not cfg.policies:
        out.notes.append("no policies declared: comparison and value-curve files were not produced")
        return
    setup = Setup.build(cfg.model, r.horizon, r.step)
    cmp = compare_policies(setup, cfg.policies, cfg.w_grid, r.paths, r.seed, r.train_paths, threads=r.threads)
    cmp.write(out.path("comparison.json"), out.path("policy_table.csv"), out.path("value_curves.csv"))


PIPELINES = {
    "simulate": _simulate,
    "filter": _filter,
    "riccati": _riccati,
    "price": _price,
    "value": _value,
    "hedge": _hedge,
    "compare-policies": _compare,
}


# ------------------------------------------------------------------ driver


def run(cfg: config.ExperimentConfig) -> Path:
    """Execute the configured pipeline and write its manifest; returns the manifest path.

    Raises
    ------
    PipelineFailed
        Wrapping any engine error (e.g. a Riccati blow-up) raised by the pipeline.
    """
    r = cfg.run
    root = Path(r.out)
    root.mkdir(parents=True, exist_ok=True)
    out = _Outputs(root)
    try:
        PIPELINES[r.pipeline](cfg, out)
    except (FlowHedgeError, ValueError, np.linalg.LinAlgError) as exc:
        raise PipelineFailed(r.pipeline, exc) from exc
    return artifacts.write_manifest(root, r.pipeline, r.seed, cfg.digest, out.files, out.notes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowhedge", description="Filtering and mean-variance hedging experiments.")
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--pipeline", choices=config.PIPELINES, help="override [run].pipeline")
    p.add_argument("--seed", type=int, help="override [run].seed")
    p.add_argument("--threads", type=int, help="override [run].threads (results do not depend on it)")
    p.add_argument("--out", help="override [run].out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load(args.config)
        over = {k: v for k, v in (("pipeline", args.pipeline), ("seed", args.seed), ("threads", args.threads),
                                  ("out", args.out)) if v is not None}
        if over.get("seed", 0) < 0:
            raise ConfigInvalid("--seed", "must be >= 0")
        if over.get("threads", 1) < 1:
            raise ConfigInvalid("--threads", "must be >= 1")
        cfg.run = replace(cfg.run, **over)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run(cfg)
    except PipelineFailed as exc:
        print(str(exc), file=sys.stderr)
        return 3
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
