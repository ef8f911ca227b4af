"""Experiment runner: trajectories, histogram distances, convergence and export."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .core import DistributionVector, GameParams, RandomStream, Setting, unit_counts_to_tokens
from .engine import C_BAD_SUBMITTED, C_POSTS, C_SUBMITTED, COUNTER_NAMES, EngineState
from .equilibrium import max_entropy_distribution
from .errors import InfeasibleInit, NeverConverged, RangeError
from .mechanism import ControllerState, ThresholdPolicy


class Init(str, enum.Enum):
    MAXENT = "maxent"
    EXTREME = "extreme"
    EQUAL = "equal"
    CUSTOM = "custom"


@dataclass(frozen=True)
class SimSnapshot:
    round: int
    histogram: DistributionVector
    counters: dict[str, int]
    controller: ControllerState | None
    bad_fraction: float
    monitor_prob: float
    monitor_prob_sum: float = 0.0

    @property
    def anomalies(self) -> int:
        return self.counters.get("anomalies", 0)


@dataclass
class Trajectory:
    params: GameParams
    seed: Any
    snapshots: list[SimSnapshot]
    reference: DistributionVector | None = None
    init: str = "maxent"
    final_holdings: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def rounds(self) -> np.ndarray:
        return np.array([s.round for s in self.snapshots])

    def histograms(self) -> np.ndarray:
        width = max(len(s.histogram) for s in self.snapshots)
        return np.array([s.histogram.padded(width) for s in self.snapshots])


def reference_distribution(params: GameParams) -> DistributionVector:
    """Max-entropy holdings in whole-token buckets at the params' density."""
    fine = max_entropy_distribution(params.cap_units, params.total_units / params.n)
    return DistributionVector(unit_counts_to_tokens(fine.fractions, params.unit))


def _choose_distinct(n: int, count: int, rng: RandomStream) -> np.ndarray:
    pool = list(range(n))
    return np.array([pool.pop(rng.below(len(pool))) for _ in range(count)], dtype=np.int64)


def initial_holdings(params: GameParams, init: Init | str, rng: RandomStream,
                     custom: Sequence[Any] | None = None) -> np.ndarray:
    """Starting balances in base units with exactly the configured total."""
    init = Init(init)
    n, unit, cap, total = params.n, params.unit, params.cap_units, params.total_units
    if init is Init.CUSTOM:
        if custom is None:
            raise InfeasibleInit("custom init needs holdings")
        from fractions import Fraction
        units = [Fraction(x) * unit for x in custom]
        if len(units) != n or any(u.denominator != 1 or u < 0 or u > cap for u in units):
            raise InfeasibleInit("custom holdings must be n whole-unit balances within the cap")
        h = np.array([int(u) for u in units], dtype=np.int64)
        if int(h.sum()) != total:
            raise InfeasibleInit(f"custom holdings sum to {h.sum()} units, expected {total}")
        return h
    if total > n * cap:
        raise InfeasibleInit("total exceeds n times the cap")
    if init is Init.EQUAL:
        h = np.full(n, total // n, dtype=np.int64)
        h[_choose_distinct(n, total % n, rng)] += 1
        return h
    if init is Init.EXTREME:
        high = cap - unit
        if high <= 0:
            raise InfeasibleInit("cap leaves no room for a high initial balance")
        full, rest = divmod(total, high)
        if full + (rest > 0) > n:
            raise InfeasibleInit(f"{total} units need more than {n} agents at {high} units")
        picks = _choose_distinct(n, full + (rest > 0), rng)
        h = np.zeros(n, dtype=np.int64)
        h[picks[:full]] = high
        if rest:
            h[picks[full]] = rest
        return h
    # max entropy sample over base-unit levels, then repair the total
    probs = max_entropy_distribution(cap, total / n).fractions
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    h = np.array([int(np.searchsorted(cdf, rng.random(), side="right")) for _ in range(n)], dtype=np.int64)
    h = np.minimum(h, cap)
    diff = total - int(h.sum())
    while diff:
        i = rng.below(n)
        if diff > 0 and h[i] < cap:
            h[i] += 1
            diff -= 1
        elif diff < 0 and h[i] > 0:
            h[i] -= 1
            diff += 1
    return h


def _snapshot(params: GameParams, t: int, levels: np.ndarray, counters: np.ndarray, ctrl: np.ndarray,
              fstats: np.ndarray, warmup: int) -> SimSnapshot:
    n = int(levels.sum())
    hist = unit_counts_to_tokens(np.asarray(levels, float), params.unit) / max(n, 1)
    counts = dict(zip(COUNTER_NAMES, (int(c) for c in counters)))
    if params.setting is Setting.STRATEGIC:
        bad = counters[C_BAD_SUBMITTED] / counters[C_SUBMITTED] if counters[C_SUBMITTED] else 0.0
        controller = ControllerState(int(ctrl[0]), int(ctrl[1]), int(ctrl[2]), warmup, float(fstats[2]))
        prob, prob_sum = float(fstats[2]), float(fstats[1])
    else:
        bad = counters[C_BAD_SUBMITTED] / counters[C_POSTS] if counters[C_POSTS] else 0.0
        controller, prob, prob_sum = None, 1.0, float(t)
    return SimSnapshot(t, DistributionVector(hist), counts, controller, float(bad), prob, prob_sum)


def run(params: GameParams, policy: ThresholdPolicy | None = None, init: Init | str = Init.MAXENT,
        rounds: int = 0, sample_every: int = 0, seed: Any = 0, reference: DistributionVector | None = None,
        custom: Sequence[Any] | None = None, warmup: int = 1000) -> Trajectory:
    """Simulate from an initial distribution, keeping a histogram every ``sample_every`` rounds.

    The first snapshot is the initial state (round 0).
    """
    policy = policy if policy is not None else ThresholdPolicy(params.k)
    rng = RandomStream(seed)
    h = initial_holdings(params, init, rng, custom)
    n = params.n
    state = EngineState(params, h, policy.thresholds_units(n, params.unit),
                        policy.bad_probs(n, float(params.bad_prob)), warmup=warmup)
    snaps = [_snapshot(params, 0, state.levels, state.counters, state.ctrl, state.fstats, warmup)]
    if rounds > 0:
        out = state.run(rounds, rng, sample_every=sample_every)
        for i in range(len(out["rounds"])):
            snaps.append(_snapshot(params, int(out["rounds"][i]), out["levels"][i], out["counters"][i],
                                   out["ctrl"][i], out["fstats"][i], warmup))
    meta = {"rounds": rounds, "sample_every": sample_every, "counters": state.counter_dict()}
    return Trajectory(params, seed, snaps, reference, Init(init).value, state.holdings.copy(), meta)


def euclidean_distance(d1: DistributionVector | np.ndarray, d2: DistributionVector | np.ndarray) -> float:
    a = np.asarray(d1.fractions if isinstance(d1, DistributionVector) else d1, float)
    b = np.asarray(d2.fractions if isinstance(d2, DistributionVector) else d2, float)
    width = max(a.size, b.size)
    a = np.pad(a, (0, width - a.size))
    b = np.pad(b, (0, width - b.size))
    return float(np.sqrt(np.sum((a - b) ** 2)))


def distances(trajectory: Trajectory, reference: DistributionVector | None = None) -> np.ndarray:
    ref = reference if reference is not None else trajectory.reference
    if ref is None:
        raise RangeError("a reference distribution is required")
    return np.array([euclidean_distance(s.histogram, ref) for s in trajectory.snapshots])


def max_excursion(trajectory: Trajectory, reference: DistributionVector | None = None) -> float:
    return float(distances(trajectory, reference).max())


@dataclass(frozen=True)
class Convergence:
    round: int
    rounds_per_agent: float


def convergence_time(trajectory: Trajectory, reference: DistributionVector | None, tol: float,
                     window: int = 5) -> Convergence:
    """First sampled round whose distance stays within ``tol`` for the next ``window`` samples."""
    n = trajectory.params.n
    rounds = trajectory.rounds
    if rounds.size > 1 and np.diff(rounds).max() > n:
        raise RangeError("samples must be at most n rounds apart")
    ok = distances(trajectory, reference) <= tol
    for i in range(len(ok) - window):
        if ok[i: i + window + 1].all():
            return Convergence(int(rounds[i]), rounds[i] / n)
    raise NeverConverged(int(rounds[-1]))


def estimate_steady_state(params: GameParams, policy: ThresholdPolicy | None = None, steps: int = 10**7,
                          sample_every: int = 20000, seed: Any = 0, burn_in: float = 0.01,
                          init: Init | str = Init.MAXENT) -> DistributionVector:
    """Mean histogram over a long run, discarding the first ``burn_in`` fraction of samples."""
    if steps < 100 * sample_every:
        raise RangeError("need at least 100 samples (steps >= 100 * sample_every)")
    traj = run(params, policy, init, steps, sample_every, seed)
    hists = traj.histograms()[1:]
    skip = int(math.floor(burn_in * len(hists)))
    return DistributionVector.from_counts(hists[skip:].mean(axis=0))


def strategic_convergence_report(trajectory: Trajectory) -> tuple[float, float]:
    """(bad-post fraction, mean monitoring probability) over the second half of the run."""
    if trajectory.params.setting is not Setting.STRATEGIC:
        raise RangeError("strategic trajectory required")
    snaps = trajectory.snapshots
    end = snaps[-1]
    half = end.round / 2
    mid = min(snaps, key=lambda s: abs(s.round - half))
    submitted = end.counters["submitted"] - mid.counters["submitted"]
    bad = end.counters["bad_submitted"] - mid.counters["bad_submitted"]
    span = end.round - mid.round
    if span <= 0:
        return end.bad_fraction, end.monitor_prob
    return bad / submitted, (end.monitor_prob_sum - mid.monitor_prob_sum) / span


def convergence_tolerance(params: GameParams, policy: ThresholdPolicy | None = None, rounds: int = 10**6,
                          sample_every: int | None = None, seed: Any = 0) -> float:
    """Distance threshold for "converged": twice the long-run max excursion at this n."""
    sample_every = sample_every or params.n
    traj = run(params, policy, Init.MAXENT, rounds, sample_every, seed, reference_distribution(params))
    return 2.0 * max_excursion(traj)


def write_trajectory_csv(trajectory: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    width = max(len(s.histogram) for s in trajectory.snapshots)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", *(f"level_{i}" for i in range(width)), "anomalies", "bad_fraction", "monitor_prob"])
        for s in trajectory.snapshots:
            w.writerow([s.round, *(repr(float(x)) for x in s.histogram.padded(width)), s.anomalies,
                        repr(s.bad_fraction), repr(s.monitor_prob)])
    return path


def write_metadata_json(trajectory: Trajectory, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    meta = {
        "params": trajectory.params.to_dict(),
        "seed": trajectory.seed,
        "variant": trajectory.params.payment_variant.value,
        "init": trajectory.init,
        **trajectory.meta,
        **(extra or {}),
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_report_csv(rows: Iterable[dict[str, Any]], path: str | Path) -> Path:
    """Per-(n, seed) report rows, sorted by (n, seed)."""
    rows = sorted(rows, key=lambda r: (r["n"], str(r["seed"])))
    path = Path(path)
    keys = ["n", "seed"] + sorted({k for r in rows for k in r} - {"n", "seed"})
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def write_distribution_csv(columns: dict[str, DistributionVector | np.ndarray], path: str | Path) -> Path:
    """One row per whole-token level, one column per named distribution."""
    path = Path(path)
    arrays = {k: np.asarray(v.fractions if isinstance(v, DistributionVector) else v, float) for k, v in columns.items()}
    width = max(a.size for a in arrays.values())
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", *arrays])
        for i in range(width):
            w.writerow([i, *(repr(float(a[i])) if i < a.size else "0.0" for a in arrays.values())])
    return path


def read_distribution_csv(path: str | Path, column: str | None = None) -> DistributionVector:
    """Load one column (default: the first after ``level``) written by :func:`write_distribution_csv`."""
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise RangeError(f"{path} holds no distribution")
    names = [k for k in rows[0] if k != "level"]
    col = column or names[0]
    return DistributionVector.from_counts([float(r[col]) for r in rows])
