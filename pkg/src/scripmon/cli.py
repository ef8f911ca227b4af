"""Command-line entry point.

Every invocation is expanded into an explicit :class:`ExperimentConfig`,
echoed to ``config.json`` in the output directory and then executed.  The
echo can be fed back through ``--config`` to repeat the experiment.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import harness
from .core import GameParams, RandomStream, TokenLedger, validate_params
from .dynamics import run_churn
from .equilibrium import (
    check_reversibility,
    enumerate_chain,
    find_equilibrium_threshold,
    solve_best_response,
    stationary_distribution,
    welfare_inadvertent,
    welfare_strategic,
)
from .errors import NeverConverged, NoFixedPoint, ScripError
from .mechanism import ThresholdPolicy

OUT_ENV = "SCRIPMON_OUT"

DEFAULT_PARAMS: dict[str, Any] = {"n": 1000, "b": "1/5", "k": 5, "tokens_per_agent": 2, "alpha": 0.05, "delta": 0.99}

# each preset names an experiment plus the constants that differ from the defaults
PRESETS: dict[str, dict[str, Any]] = {
    "fig-close": {"experiment": "excursion", "rounds": 10**6, "sample_every": 1000, "init": "maxent"},
    "fig-number": {"experiment": "convergence_vs_n", "init": "extreme", "n_values": [100, 300, 1000, 3000],
                   "rounds_per_agent": 30, "tolerance_rounds": 10**6},
    "fig-distance": {"experiment": "convergence_vs_tol", "init": "extreme", "rounds_per_agent": 30,
                     "tolerances": [0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.2]},
    "fig-distributions": {"experiment": "distributions", "steps": 10**7, "sample_every": 20000},
    "fig-close2": {"experiment": "excursion", "rounds": 10**6, "sample_every": 1000, "init": "maxent",
                   "variant": "split", "reference_from": "split_steady_state", "steps": 10**7},
    "fig-number2": {"experiment": "convergence_vs_n", "init": "extreme", "n_values": [100, 300, 1000, 3000],
                    "rounds_per_agent": 30, "tolerance_rounds": 10**6, "variant": "split",
                    "reference_from": "split_steady_state", "steps": 10**7},
    "fig-distance2": {"experiment": "convergence_vs_tol", "init": "extreme", "rounds_per_agent": 30,
                      "tolerances": [0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.2], "variant": "split",
                      "reference_from": "split_steady_state", "steps": 10**7},
    "strategic-demo": {"experiment": "strategic", "params": {"b": None, "beta_star": "1/20", "kappa": 2.0},
                       "rounds": 10**6, "sample_every": 1000},
    "chain-verify": {"experiment": "chains",
                     "instances": [[2, 1, 1, "1/2"], [3, 3, 2, "1/2"], [4, 4, 2, "1/3"], [3, 5, 3, "1/3"],
                                   [4, 6, 3, "1/4"], [4, 2, 1, "1/2"]]},
    "equilibrium": {"experiment": "equilibrium", "k_values": list(range(1, 9))},
}

COMMAND_EXPERIMENT = {
    "run": "trajectory",
    "steady-state": "steady_state",
    "converge": "convergence_vs_n",
    "equilibrium": "equilibrium",
    "welfare": "welfare",
    "chain-verify": "chains",
}


@dataclass
class ExperimentConfig:
    command: str
    experiment: str
    params: dict[str, Any]
    init: str = "maxent"
    rounds: int = 10**6
    sample_every: int = 1000
    seeds: list[int] = field(default_factory=lambda: [1])
    out: str = "results"
    preset: str | None = None
    scenario: str | None = None
    reference: str | None = None
    reference_from: str | None = None
    steps: int = 10**7
    n_values: list[int] | None = None
    rounds_per_agent: float = 30
    tolerance: float | None = None
    tolerance_rounds: int = 10**6
    tolerances: list[float] | None = None
    instances: list[list[Any]] | None = None
    k_values: list[int] | None = None
    k_max: int = 64
    cost: float | None = None
    workers: int = 1

    def game_params(self, **overrides: Any) -> GameParams:
        raw = {k: v for k, v in {**self.params, **overrides}.items() if v is not None}
        return validate_params(raw)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON config (for example a previous config.json echo)")
    p.add_argument("--n", type=int)
    p.add_argument("--b")
    p.add_argument("--beta-star", dest="beta_star")
    p.add_argument("--kappa", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--tokens-per-agent", dest="tokens_per_agent")
    p.add_argument("--total", dest="total_tokens", type=int, help="total tokens (alternative to --tokens-per-agent)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--steps", type=int, help="steps for steady-state estimation")
    p.add_argument("--full", action="store_true", help="use 10^8 steps for steady-state estimation")
    p.add_argument("--sample-every", dest="sample_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma list or range a:b")
    p.add_argument("--variant", choices=["single", "split"])
    p.add_argument("--init", choices=["maxent", "extreme", "equal"])
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    p.add_argument("--scenario", help="JSON population-event scenario")
    p.add_argument("--reference", help="distribution CSV to compare against")
    p.add_argument("--tol", dest="tolerance", type=float, help="convergence distance threshold")
    p.add_argument("--C", dest="cost", type=float, help="social cost of a bad post (welfare)")
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scripmon", description="Scrip-token norm-monitoring simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("run", "simulate trajectories (or run an experiment preset)"),
        ("steady-state", "estimate the long-run holdings distribution"),
        ("converge", "convergence time from an initial distribution"),
        ("equilibrium", "best responses and the equilibrium threshold"),
        ("welfare", "welfare with and without monitoring"),
        ("chain-verify", "exact reversibility and uniformity on small chains"),
    ]:
        _add_common(sub.add_parser(name, help=text))
    return parser


def _parse_seeds(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi)))
    return [int(s) for s in text.split(",") if s]


def parse_args(argv: Sequence[str] | None = None) -> ExperimentConfig:
    """Turn argv into a fully explicit config; usage errors exit with status 2."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.b is not None and (ns.kappa is not None or ns.beta_star is not None):
        parser.error("--b selects the inadvertent game; --kappa and --beta-star belong to the strategic game")
    if ns.tokens_per_agent is not None and ns.total_tokens is not None:
        parser.error("give --tokens-per-agent or --total, not both")
    if ns.seed is not None and ns.seeds is not None:
        parser.error("give --seed or --seeds, not both")

    if ns.config:
        data = json.loads(Path(ns.config).read_text())
        base = {**data, "command": ns.command}
    else:
        base = {"command": ns.command, "experiment": COMMAND_EXPERIMENT[ns.command], "params": dict(DEFAULT_PARAMS)}
        if ns.command == "converge":
            base["init"] = "extreme"
        if ns.preset:
            preset = dict(PRESETS[ns.preset])
            if ns.command not in ("run", "converge", "steady-state") and preset["experiment"] != base["experiment"]:
                parser.error(f"preset {ns.preset} does not belong to the {ns.command} command")
            params = {**base["params"], **preset.pop("params", {})}
            variant = preset.pop("variant", None)
            if variant:
                params["payment_variant"] = variant
            base.update(preset)
            base["params"] = params
            base["preset"] = ns.preset

    params = dict(base.get("params", {}))
    if ns.beta_star is not None or ns.kappa is not None:
        params.pop("b", None)
        params.setdefault("beta_star", "1/20")
        params.setdefault("kappa", 2.0)
    if ns.b is not None:
        params.pop("beta_star", None)
        params.pop("kappa", None)
    for key in ("n", "b", "beta_star", "kappa", "alpha", "delta", "k"):
        value = getattr(ns, key)
        if value is not None:
            params[key] = value
    if ns.tokens_per_agent is not None:
        params.pop("total_tokens", None)
        params["tokens_per_agent"] = ns.tokens_per_agent
    if ns.total_tokens is not None:
        params.pop("tokens_per_agent", None)
        params["total_tokens"] = ns.total_tokens
    if ns.variant is not None:
        params["payment_variant"] = ns.variant
    if params.get("b") is not None and params.get("kappa") is not None:
        parser.error("inconsistent settings: b together with kappa")
    base["params"] = params

    for key in ("rounds", "sample_every", "init", "scenario", "reference", "tolerance", "cost", "k_max",
                "workers", "steps"):
        value = getattr(ns, key)
        if value is not None:
            base[key] = value
    if ns.full:
        base["steps"] = 10**8
    if ns.seed is not None:
        base["seeds"] = [ns.seed]
    elif ns.seeds is not None:
        base["seeds"] = _parse_seeds(ns.seeds)
    if ns.n is not None and base.get("n_values"):
        base["n_values"] = [ns.n]
    if ns.out:
        base["out"] = ns.out
    elif not ns.config:
        base["out"] = os.environ.get(OUT_ENV, "results")

    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(base) - known
    if unknown:
        parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig(**base)
    try:
        if cfg.experiment not in ("welfare", "chains"):
            cfg.game_params()
    except ScripError as exc:
        parser.error(str(exc))
    return cfg


# experiments ---------------------------------------------------------------

def _seeded_runs(fn, cfg: ExperimentConfig, *args: Any) -> list[Any]:
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(fn, *([a] * len(cfg.seeds) for a in args), cfg.seeds))
    return [fn(*args, seed) for seed in cfg.seeds]


def _reference(cfg: ExperimentConfig, params: GameParams, out: Path) -> harness.DistributionVector:
    if cfg.reference:
        return harness.read_distribution_csv(cfg.reference)
    if cfg.reference_from == "split_steady_state":
        ref = harness.estimate_steady_state(params, steps=cfg.steps, sample_every=_steady_sample(cfg),
                                            seed=cfg.seeds[0])
        harness.write_distribution_csv({"steady_state": ref}, out / f"reference_n{params.n}.csv")
        return ref
    return harness.reference_distribution(params)


def _steady_sample(cfg: ExperimentConfig) -> int:
    return min(cfg.sample_every if cfg.sample_every >= 1000 else 20000, max(1, cfg.steps // 100))


def _trajectory_job(params: GameParams, cfg: ExperimentConfig, ref, out: Path, seed: int) -> dict[str, Any]:
    traj = harness.run(params, None, cfg.init, cfg.rounds, cfg.sample_every, seed, ref)
    harness.write_trajectory_csv(traj, out / f"trajectory_n{params.n}_seed{seed}.csv")
    harness.write_metadata_json(traj, out / f"trajectory_n{params.n}_seed{seed}.json")
    d = harness.distances(traj)
    return {"n": params.n, "seed": seed, "max_excursion": float(d.max()), "mean_distance": float(d.mean()),
            "anomalies": traj.meta["counters"]["anomalies"], "frozen": traj.meta["counters"]["frozen"],
            "payer_fallback": traj.meta["counters"]["payer_fallback"]}


def exp_excursion(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    params = cfg.game_params()
    ref = _reference(cfg, params, out)
    rows = _seeded_runs(_trajectory_job, cfg, params, cfg, ref, out)
    harness.write_report_csv(rows, out / "distances.csv")
    return {"max_excursion": max(r["max_excursion"] for r in rows), "per_seed": rows}


def exp_trajectory(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    if cfg.scenario:
        return exp_churn(cfg, out)
    return exp_excursion(cfg, out)


def exp_churn(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    scenario = json.loads(Path(cfg.scenario).read_text())
    params = cfg.game_params()
    schedule: dict[int, list[tuple[str, int | None]]] = {}
    for ev in scenario.get("events", []):
        schedule.setdefault(int(ev["round"]), []).append((ev["kind"], ev.get("agent")))
    rows = []
    for seed in cfg.seeds:
        rng = RandomStream(seed)
        h = harness.initial_holdings(params, cfg.init, rng)
        report = run_churn(params, TokenLedger(params.unit, params.cap_units, h), ThresholdPolicy(params.k),
                           cfg.rounds, rng, join_rate=scenario.get("join_rate", 0.0),
                           leave_rate=scenario.get("leave_rate", 0.0), target_avg=scenario.get("target_avg"),
                           drift=scenario.get("rescale_drift", 0.25), silent=scenario.get("silent", True),
                           sample_every=cfg.sample_every, schedule=schedule)
        rows.append({"n": params.n, "seed": seed, "final_n": report.state.n, "rescales": report.rescales,
                     "min_avg": float(report.averages.min()) if report.averages.size else math.nan,
                     "max_avg": float(report.averages.max()) if report.averages.size else math.nan,
                     "conserved": report.conserved, "halted": report.halted,
                     "events": len(report.state.events)})
    harness.write_report_csv(rows, out / "churn.csv")
    return {"per_seed": rows}


def _convergence_rows(params: GameParams, cfg: ExperimentConfig, out: Path, tolerances: list[float] | None
                      ) -> list[dict[str, Any]]:
    n = params.n
    ref = _reference(cfg, params, out)
    rounds = int(cfg.rounds_per_agent * n)
    every = max(1, n // 20)
    rows = []
    for seed in cfg.seeds:
        if tolerances is None:
            tol_run = harness.run(params, None, "maxent", cfg.tolerance_rounds, n, seed + 10**6, ref)
            tols = [cfg.tolerance if cfg.tolerance is not None else 2.0 * harness.max_excursion(tol_run)]
        else:
            tols = tolerances
        traj = harness.run(params, None, cfg.init, rounds, every, seed, ref)
        harness.write_trajectory_csv(traj, out / f"convergence_n{n}_seed{seed}.csv")
        for tol in tols:
            try:
                c = harness.convergence_time(traj, ref, tol)
                rpa, rnd = c.rounds_per_agent, c.round
            except NeverConverged:
                rpa, rnd = math.nan, -1
            rows.append({"n": n, "seed": seed, "tolerance": tol, "convergence_round": rnd,
                         "rounds_per_agent": rpa})
    return rows


def exp_convergence_vs_n(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    base = cfg.game_params()
    n_values = cfg.n_values or [base.n]
    rows = []
    for n in n_values:
        params = base.with_(n=n, total_tokens=base.tokens_per_agent * n)
        rows += _convergence_rows(params, cfg, out, None)
    harness.write_report_csv(rows, out / "convergence.csv")
    by_n = {}
    for n in n_values:
        vals = [r["rounds_per_agent"] for r in rows if r["n"] == n]
        by_n[str(n)] = float(np.mean(vals))
    return {"rounds_per_agent": by_n, "per_seed": rows}


def exp_convergence_vs_tol(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    params = cfg.game_params()
    tols = cfg.tolerances or ([cfg.tolerance] if cfg.tolerance is not None else [0.05])
    rows = _convergence_rows(params, cfg, out, tols)
    harness.write_report_csv(rows, out / "convergence_vs_tolerance.csv")
    by_tol = {repr(t): float(np.mean([r["rounds_per_agent"] for r in rows if r["tolerance"] == t])) for t in tols}
    return {"rounds_per_agent": by_tol, "per_seed": rows}


def exp_steady_state(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    params = cfg.game_params()
    ests = {seed: harness.estimate_steady_state(params, steps=cfg.steps, sample_every=_steady_sample(cfg), seed=seed)
            for seed in cfg.seeds}
    ref = harness.read_distribution_csv(cfg.reference) if cfg.reference else harness.reference_distribution(params)
    cols = {f"seed{s}": d for s, d in ests.items()}
    cols["reference"] = ref
    harness.write_distribution_csv(cols, out / "steady_state.csv")
    return {"distance_to_reference": {str(s): harness.euclidean_distance(d, ref) for s, d in ests.items()}}


def exp_distributions(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    base = cfg.game_params()
    every = _steady_sample(cfg)
    rows, cols = [], {}
    for seed in cfg.seeds:
        single = harness.estimate_steady_state(base.with_(payment_variant="single"), steps=cfg.steps,
                                               sample_every=every, seed=seed)
        split = harness.estimate_steady_state(base.with_(payment_variant="split"), steps=cfg.steps,
                                              sample_every=every, seed=seed)
        cols[f"single_seed{seed}"] = single
        cols[f"split_seed{seed}"] = split
        rows.append({"n": base.n, "seed": seed, "distance": harness.euclidean_distance(single, split)})
    cols["maxent"] = harness.reference_distribution(base)
    harness.write_distribution_csv(cols, out / "distributions.csv")
    harness.write_report_csv(rows, out / "distribution_distance.csv")
    return {"distance": float(np.mean([r["distance"] for r in rows])), "steps": cfg.steps, "per_seed": rows}


def exp_strategic(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    params = cfg.game_params()
    rows = []
    for seed in cfg.seeds:
        traj = harness.run(params, None, cfg.init, cfg.rounds, cfg.sample_every, seed)
        harness.write_trajectory_csv(traj, out / f"strategic_seed{seed}.csv")
        harness.write_metadata_json(traj, out / f"strategic_seed{seed}.json")
        bad, prob = harness.strategic_convergence_report(traj)
        rows.append({"n": params.n, "seed": seed, "bad_fraction": bad, "monitor_prob": prob})
    harness.write_report_csv(rows, out / "strategic.csv")
    return {"bad_fraction": float(np.mean([r["bad_fraction"] for r in rows])),
            "monitor_prob": float(np.mean([r["monitor_prob"] for r in rows])), "per_seed": rows}


def exp_chains(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    if cfg.instances:
        instances = cfg.instances
    else:
        p = cfg.params
        instances = [[p.get("n", 3), p.get("total_tokens", 3), p.get("k", 2), p.get("b", "1/2")]]
    rows = []
    for n, total, k, b in instances:
        chain = enumerate_chain(int(n), int(total), int(k), {"n": int(n), "b": b, "k": int(k), "total_tokens": int(total)})
        rev = check_reversibility(chain)
        st = stationary_distribution(chain)
        line = (f"n={n} total={total} k={k} b={Fraction(str(b))}: states={len(chain)} "
                f"reversible: {'exact' if rev.exact else f'asymmetry {rev.max_asymmetry}'}; "
                f"stationary: {'uniform' if st.uniform else f'max deviation {st.max_deviation:.3g}'}")
        print(line)
        rows.append({"n": int(n), "seed": "-", "total": int(total), "k": int(k), "b": str(Fraction(str(b))),
                     "states": len(chain), "max_asymmetry": str(rev.max_asymmetry),
                     "uniform_deviation": st.max_deviation})
    harness.write_report_csv(rows, out / "chains.csv")
    return {"instances": rows}


def exp_equilibrium(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    params = cfg.game_params()
    ks = cfg.k_values or list(range(1, 9))
    table = []
    for k in ks:
        br = solve_best_response(k, params.with_(k=k))
        table.append({"n": params.n, "seed": "-", "k": k, "best_response": br.threshold, "gap": br.gap})
    harness.write_report_csv(table, out / "best_response.csv")
    try:
        k_star, _ = find_equilibrium_threshold(params, cfg.k_max)
    except NoFixedPoint as exc:
        k_star = None
        print(f"no fixed point: {exc}", file=sys.stderr)
    pairs = ", ".join(f"{r['k']}->{r['best_response']}" for r in table)
    print(f"BR: {pairs}; k* = {k_star}")
    return {"best_response": {str(r["k"]): r["best_response"] for r in table}, "k_star": k_star}


def exp_welfare(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    p = cfg.params
    alpha = float(p.get("alpha", 0.05))
    if p.get("kappa") is not None:
        kappa = float(p["kappa"])
        rep = welfare_strategic(kappa, alpha, cfg.cost if cfg.cost is not None else kappa)
    else:
        b = float(Fraction(str(p.get("b", "1/5"))))
        rep = welfare_inadvertent(b, alpha, cfg.cost if cfg.cost is not None else 1.0)
    print(f"C* = {rep.C_threshold:g}")
    if cfg.cost is not None:
        print(f"monitoring welfare = {rep.monitoring_welfare:g}; no monitoring = {rep.no_monitoring_welfare:g}; "
              f"monitoring preferred: {rep.monitoring_preferred}")
    return {"C_threshold": rep.C_threshold, "monitoring_welfare": rep.monitoring_welfare,
            "no_monitoring_welfare": rep.no_monitoring_welfare, "monitoring_preferred": rep.monitoring_preferred}


EXPERIMENTS = {
    "excursion": exp_excursion,
    "trajectory": exp_trajectory,
    "convergence_vs_n": exp_convergence_vs_n,
    "convergence_vs_tol": exp_convergence_vs_tol,
    "steady_state": exp_steady_state,
    "distributions": exp_distributions,
    "strategic": exp_strategic,
    "chains": exp_chains,
    "equilibrium": exp_equilibrium,
    "welfare": exp_welfare,
}


def execute(cfg: ExperimentConfig) -> int:
    """Run the experiment and write ``config.json`` and ``summary.json``; returns the exit code."""
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True, default=str) + "\n")
        summary = EXPERIMENTS[cfg.experiment](cfg, out)
        summary = {"experiment": cfg.experiment, "preset": cfg.preset, **summary}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    except (ScripError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return str(obj)


def main(argv: Sequence[str] | None = None) -> int:
    return execute(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
