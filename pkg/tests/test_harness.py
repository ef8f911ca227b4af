import csv
import json
import math

import numpy as np
import pytest

from scripmon.core import DistributionVector, RandomStream, validate_params
from scripmon.equilibrium import max_entropy_distribution
from scripmon.errors import InfeasibleInit, NeverConverged, RangeError
from scripmon.harness import (
    SimSnapshot,
    Trajectory,
    convergence_time,
    distances,
    estimate_steady_state,
    euclidean_distance,
    initial_holdings,
    max_excursion,
    read_distribution_csv,
    reference_distribution,
    run,
    strategic_convergence_report,
    write_distribution_csv,
    write_metadata_json,
    write_report_csv,
    write_trajectory_csv,
)
from scripmon.mechanism import ThresholdPolicy

DEFAULTS = dict(n=1000, b=0.2, k=5, total_tokens=2000, alpha=0.05)


def params(**kw):
    return validate_params({**DEFAULTS, **kw})


def test_extreme_init_uses_empty_and_nearly_full_agents():
    h = initial_holdings(params(), "extreme", RandomStream(1))
    assert h.sum() == 2000
    assert np.count_nonzero(h == 9) == 222
    assert np.count_nonzero(h == 2) == 1  # 2000 = 9 * 222 + 2
    assert np.count_nonzero(h == 0) == 1000 - 223


def test_equal_init():
    h = initial_holdings(params(n=4, total_tokens=8), "equal", RandomStream(1))
    assert list(h) == [2, 2, 2, 2]
    h = initial_holdings(params(n=4, total_tokens=9), "equal", RandomStream(1))
    assert sorted(h) == [2, 2, 2, 3]


def test_maxent_init_hits_the_total():
    for seed in range(5):
        h = initial_holdings(params(), "maxent", RandomStream(seed))
        assert h.sum() == 2000 and h.min() >= 0 and h.max() <= 10


def test_infeasible_inits():
    with pytest.raises(InfeasibleInit):
        initial_holdings(params(n=10, total_tokens=95), "extreme", RandomStream(0))
    with pytest.raises(InfeasibleInit):
        initial_holdings(params(n=2, total_tokens=4), "custom", RandomStream(0), custom=[1, 1])
    with pytest.raises(InfeasibleInit):
        initial_holdings(params(n=2, total_tokens=4), "custom", RandomStream(0))
    h = initial_holdings(params(n=2, total_tokens=4), "custom", RandomStream(0), custom=[3, 1])
    assert list(h) == [3, 1]


def test_zero_rounds_keeps_only_the_start():
    traj = run(params(), init="equal", rounds=0, seed=3, reference=reference_distribution(params()))
    assert len(traj.snapshots) == 1 and traj.snapshots[0].round == 0
    assert traj.snapshots[0].histogram.fractions[2] == 1.0
    assert max_excursion(traj) == pytest.approx(euclidean_distance(traj.snapshots[0].histogram, traj.reference))


def test_snapshots_are_histograms_in_increasing_rounds():
    traj = run(params(n=100, total_tokens=200), rounds=5000, sample_every=100, seed=1)
    assert np.all(np.diff(traj.rounds) > 0)
    for s in traj.snapshots:
        assert abs(s.histogram.fractions.sum() - 1) < 1e-12
        assert len(s.histogram) == 11


def test_euclidean_examples():
    d = DistributionVector(np.array([0.2, 0.8]))
    assert euclidean_distance(d, d) == 0
    assert euclidean_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(math.sqrt(2))
    assert euclidean_distance(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(0.35355, abs=1e-5)
    assert euclidean_distance(np.array([1.0]), np.array([0.0, 1.0])) == pytest.approx(math.sqrt(2))


def test_distance_needs_reference():
    traj = run(params(n=10, total_tokens=20), rounds=0)
    with pytest.raises(RangeError):
        distances(traj)


def test_convergence_at_the_reference_is_immediate():
    p = params(n=10, total_tokens=20)
    ref = reference_distribution(p)
    frozen = Trajectory(p, 0, [SimSnapshot(r, ref, {}, None, 0.0, 1.0) for r in range(0, 70, 10)], ref)
    c = convergence_time(frozen, ref, 0.0)
    assert c.round == 0 and c.rounds_per_agent == 0


def test_exact_tolerance_never_converges():
    p = params()
    traj = run(p, init="extreme", rounds=20000, sample_every=1000, seed=2)
    with pytest.raises(NeverConverged):
        convergence_time(traj, reference_distribution(p), 0.0)


def test_sparse_sampling_is_rejected():
    p = params(n=100, total_tokens=200)
    traj = run(p, rounds=1000, sample_every=500, seed=2)
    with pytest.raises(RangeError):
        convergence_time(traj, reference_distribution(p), 0.1)


def test_single_agent_steady_state_is_a_point_mass():
    p = params(n=1, total_tokens=3)
    d = estimate_steady_state(p, steps=1000, sample_every=10)
    assert d.fractions[3] == 1.0 and d.fractions.sum() == 1.0


def test_steady_state_needs_enough_samples():
    with pytest.raises(RangeError):
        estimate_steady_state(params(), steps=1000, sample_every=20)


def strategic(**kw):
    return validate_params(dict(n=1000, beta_star=0.05, kappa=2.0, k=5, total_tokens=2000, **kw))


def test_warmup_keeps_balanced_probability():
    traj = run(strategic(), rounds=1000, sample_every=50, seed=4)
    assert all(s.monitor_prob == 0.5 for s in traj.snapshots)


def test_all_good_posts_switch_monitoring_off():
    traj = run(strategic(), ThresholdPolicy(5, bad_prob=0.0), rounds=60000, sample_every=1000, seed=5)
    end = traj.snapshots[-1]
    assert end.bad_fraction == 0.0
    assert end.monitor_prob == 0.0
    bad, prob = strategic_convergence_report(traj)
    assert bad == 0.0 and prob < 0.05


def test_strategic_report_requires_strategic_run():
    with pytest.raises(RangeError):
        strategic_convergence_report(run(params(n=10, total_tokens=20), rounds=10, sample_every=5))


def test_trajectory_csv_and_sidecar(tmp_path):
    p = params(n=50, total_tokens=100)
    traj = run(p, rounds=200, sample_every=50, seed=9)
    path = write_trajectory_csv(traj, tmp_path / "t.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", *(f"level_{i}" for i in range(11)), "anomalies", "bad_fraction", "monitor_prob"]
    assert [int(r[0]) for r in rows[1:]] == [0, 50, 100, 150, 200]
    again = write_trajectory_csv(run(p, rounds=200, sample_every=50, seed=9), tmp_path / "u.csv")
    assert path.read_bytes() == again.read_bytes()
    meta = json.loads(write_metadata_json(traj, tmp_path / "t.json").read_text())
    assert meta["seed"] == 9 and meta["variant"] == "single" and meta["params"]["n"] == 50


def test_report_rows_sorted(tmp_path):
    path = write_report_csv([{"n": 300, "seed": 1, "x": 2}, {"n": 100, "seed": 2, "x": 1},
                             {"n": 100, "seed": 1, "x": 3}], tmp_path / "r.csv")
    rows = list(csv.DictReader(path.open()))
    assert [(r["n"], r["seed"]) for r in rows] == [("100", "1"), ("100", "2"), ("300", "1")]


def test_distribution_csv_round_trip(tmp_path):
    d = max_entropy_distribution(10, 2.0)
    path = write_distribution_csv({"single": d, "other": np.array([1.0])}, tmp_path / "d.csv")
    back = read_distribution_csv(path)
    assert np.allclose(back.fractions, d.fractions)
    assert read_distribution_csv(path, "other").fractions[0] == 1.0


def test_reference_buckets_fractional_units():
    p = validate_params(dict(n=100, b="2/5", k=2, total_tokens=200))
    ref = reference_distribution(p)
    assert len(ref) == p.cap_units // p.unit + 1
    assert abs(ref.fractions.sum() - 1) < 1e-12


def test_volunteer_share_matches_maxent():
    p = params()
    theory = reference_distribution(p).mass_below(5)
    sim = estimate_steady_state(p, steps=2 * 10**6, sample_every=2000, seed=6).mass_below(5)
    assert abs(sim - theory) < 0.01


def test_single_payer_steady_state_near_maxent():
    p = params()
    est = estimate_steady_state(p, steps=10**7, sample_every=20000, seed=1)
    assert euclidean_distance(est, max_entropy_distribution(10, 2.0)) < 0.01


def test_steady_state_is_seed_stable():
    p = params()
    a = estimate_steady_state(p, steps=10**7, sample_every=20000, seed=11)
    b = estimate_steady_state(p, steps=10**7, sample_every=20000, seed=12)
    assert euclidean_distance(a, b) < 0.005


def test_excursion_shrinks_with_population():
    sizes = [100, 300, 1000, 3000]
    stats = []
    for n in sizes:
        p = params(n=n, total_tokens=2 * n)
        ref = reference_distribution(p)
        ex = [max_excursion(run(p, rounds=10**6, sample_every=n, seed=s, reference=ref)) for s in range(5)]
        stats.append((np.mean(ex), np.std(ex, ddof=1) / math.sqrt(len(ex))))
    for (m1, s1), (m2, s2) in zip(stats, stats[1:]):
        assert m2 <= m1 + 2 * math.hypot(s1, s2)
    assert stats[-1][0] < stats[0][0]
