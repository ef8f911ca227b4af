"""Exact small-instance chains, the max-entropy steady state, best responses and welfare.

Two chains are available.  :func:`enumerate_chain` builds the chain of
elementary moves (a posting transfer with probability 1/(n m) and a reward
payment with probability b/(m m')), which is reversible by construction on
the instances where the counting argument holds.  :func:`enumerate_round_chain`
builds the exact kernel of a full simulator round; it is what the Monte Carlo
engine actually samples.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import permutations
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .core import DistributionVector, GameParams, PaymentVariant, Setting, validate_params, volunteer_limit_units
from .errors import (
    InfeasibleMean,
    NoFixedPoint,
    NotIrreducible,
    NoVolunteers,
    Periodic,
    RangeError,
    StateSpaceTooLarge,
)

MAX_STATES = 10**6
State = tuple[int, ...]


@dataclass
class MarkovChain:
    """Explicit chain over full holdings assignments (in base units)."""

    states: list[State]
    transitions: dict[int, dict[int, Fraction]]
    start_state: State
    params: GameParams
    kind: str = "elementary"
    index: dict[State, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index:
            self.index = {s: i for i, s in enumerate(self.states)}

    def __len__(self) -> int:
        return len(self.states)

    def prob(self, s: State, t: State) -> Fraction:
        return self.transitions[self.index[s]].get(self.index[t], Fraction(0))

    def row_sums(self) -> list[Fraction]:
        return [sum(row.values(), Fraction(0)) for row in (self.transitions[i] for i in range(len(self.states)))]

    def to_sparse(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for i, row in self.transitions.items():
            for j, p in row.items():
                rows.append(i)
                cols.append(j)
                vals.append(float(p))
        n = len(self.states)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _count_assignments(n: int, total: int, cap: int) -> int:
    """Number of ways to place ``total`` units on n agents with at most ``cap`` each."""
    ways = [1] + [0] * total
    for _ in range(n):
        nxt = [0] * (total + 1)
        run = 0
        for s in range(total + 1):
            run += ways[s]
            if s - cap - 1 >= 0:
                run -= ways[s - cap - 1]
            nxt[s] = run
        ways = nxt
    return ways[total]


def _spread(n: int, total_units: int, unit: int, cap: int) -> State:
    h = [0] * n
    left, i = total_units, 0
    while left > 0:
        step = min(unit, left)
        if h[i % n] + step <= cap:
            h[i % n] += step
            left -= step
        i += 1
        if i > 10 * n * (total_units + 1):
            raise RangeError("total does not fit under the cap")
    return tuple(h)


def _small_params(n_small: int, total_tokens: int, k: int, params: GameParams | dict | None) -> GameParams:
    if params is None:
        raise RangeError("params with b or beta_star are required")
    return validate_params(params, n=n_small, total_tokens=total_tokens, k=k)


def _closure(start: State, moves, limit: int) -> tuple[list[State], dict[State, int], dict[int, dict[int, Fraction]]]:
    states = [start]
    index = {start: 0}
    raw: dict[int, dict[State, Fraction]] = {}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        out = moves(s)
        raw[index[s]] = out
        for t in out:
            if t not in index:
                if len(states) >= limit:
                    raise StateSpaceTooLarge(f"more than {limit} reachable states")
                index[t] = len(states)
                states.append(t)
                queue.append(t)
    transitions = {i: {index[t]: p for t, p in out.items() if p != 0} for i, out in raw.items()}
    return states, index, transitions


def _check_rows(transitions: dict[int, dict[int, Fraction]]) -> None:
    for i, row in transitions.items():
        total = sum(row.values(), Fraction(0))
        if total != 1:
            raise AssertionError(f"row {i} sums to {total}")


def enumerate_chain(n_small: int, total_tokens: int, k: int, params: GameParams | dict | None,
                    max_states: int = MAX_STATES) -> MarkovChain:
    """Reachable chain of elementary moves under all-agents-threshold-k play.

    Posting move: agent i holding a token gives one to a j != i below the cap,
    weight 1/(n m) with m the number of agents other than i below the cap.
    Payment move: agent i holding at least the reward pays it to a volunteer
    j != i, weight b/(m m') with m the volunteers other than i and m' the
    agents other than j holding at least the reward.  In the strategic game
    both weights carry the factor 1 - 1/kappa.  Weights are divided by a
    common constant Z (1 + b unless some row needs more) and the remainder is
    a self-loop, so symmetric weights give a symmetric kernel.
    """
    p = _small_params(n_small, total_tokens, k, params)
    n, unit, cap, rew = p.n, p.unit, p.cap_units, p.reward_units
    thr = p.threshold_units
    if _count_assignments(n, p.total_units, cap) > max_states:
        raise StateSpaceTooLarge(f"state space exceeds {max_states}")
    b = p.bad_prob
    scale = Fraction(1) if p.setting is Setting.INADVERTENT else 1 - 1 / Fraction(p.kappa).limit_denominator(10**9)

    def weights(s: State) -> dict[State, Fraction]:
        out: dict[State, Fraction] = {}
        for i in range(n):
            if s[i] < unit:
                continue
            recips = [j for j in range(n) if j != i and s[j] <= cap - unit]
            for j in recips:
                t = list(s)
                t[i] -= unit
                t[j] += unit
                key = tuple(t)
                out[key] = out.get(key, 0) + scale / (n * len(recips))
        for i in range(n):
            if s[i] < rew:
                continue
            vols = [j for j in range(n) if j != i and s[j] < thr]
            for j in vols:
                m_pay = sum(1 for q in range(n) if q != j and s[q] >= rew)
                t = list(s)
                t[i] -= rew
                t[j] += rew
                key = tuple(t)
                out[key] = out.get(key, 0) + scale * b / (len(vols) * m_pay)
        return out

    start = _spread(n, p.total_units, unit, cap)
    states, index, w = _closure(start, weights, max_states)
    z = max([1 + b] + [sum(row.values(), Fraction(0)) for row in w.values()])
    transitions: dict[int, dict[int, Fraction]] = {}
    for i, row in w.items():
        new = {j: v / z for j, v in row.items() if j != i}
        new[i] = 1 - sum(new.values(), Fraction(0))
        transitions[i] = {j: v for j, v in new.items() if v != 0}
    _check_rows(transitions)
    return MarkovChain(states, transitions, start, p, "elementary", index)


def _round_kernel(p: GameParams, check_prob: Fraction):
    """Exact distribution of the next state after one simulator round."""
    n, unit, cap, rew = p.n, p.unit, p.cap_units, p.reward_units
    thr = p.threshold_units
    b = p.bad_prob
    pieces = -(-rew // unit)
    strategic = p.setting is Setting.STRATEGIC

    def pay(t: list[int], v: int, w: Fraction, out: dict[State, Fraction]) -> None:
        if p.payment_variant is PaymentVariant.SINGLE:
            payers = [q for q in range(n) if q != v and t[q] >= rew]
            if payers:
                for q in payers:
                    u = list(t)
                    u[q] -= rew
                    u[v] += rew
                    _acc(out, u, w / len(payers))
                return
        pool = [q for q in range(n) if q != v and t[q] >= unit]
        take = min(pieces, len(pool))
        seqs = list(permutations(pool, take))
        for seq in seqs:
            u = list(t)
            got = 0
            for j, q in enumerate(seq):
                amount = unit if j < pieces - 1 else rew - (pieces - 1) * unit
                u[q] -= amount
                got += amount
            u[v] += got
            _acc(out, u, w / len(seqs))

    def step(s: State) -> dict[State, Fraction]:
        out: dict[State, Fraction] = {}
        for poster in range(n):
            w = Fraction(1, n)
            if strategic:
                branches = [(check_prob, True), (1 - check_prob, False)]
            else:
                branches = [(Fraction(1), True)]
            for wc, checked in branches:
                wb = w * wc
                if wb == 0:
                    continue
                if not checked or s[poster] < unit:
                    _acc(out, list(s), wb)
                    continue
                recips = [j for j in range(n) if j != poster and s[j] <= cap - unit]
                vols = [j for j in range(n) if j != poster and s[j] < thr]
                if not recips or (strategic and not vols):
                    _acc(out, list(s), wb)
                    continue
                for j in recips:
                    t = list(s)
                    t[poster] -= unit
                    t[j] += unit
                    wj = wb / len(recips)
                    if not vols:
                        _acc(out, t, wj)
                        continue
                    _acc(out, t, wj * (1 - b))
                    for v in vols:
                        pay(t, v, wj * b / len(vols), out)
        return out

    return step


def _acc(out: dict[State, Fraction], t: list[int], w: Fraction) -> None:
    key = tuple(t)
    out[key] = out.get(key, 0) + w


def enumerate_round_chain(n_small: int, total_tokens: int, k: int, params: GameParams | dict | None,
                          check_prob: Any = None, max_states: int = MAX_STATES) -> MarkovChain:
    """Exact kernel of one full simulator round (all thresholds k).

    In the strategic game every poster submits bad content with probability
    beta* and the controller is frozen at ``check_prob`` (default 1 - 1/kappa).
    """
    p = _small_params(n_small, total_tokens, k, params)
    if _count_assignments(p.n, p.total_units, p.cap_units) > max_states:
        raise StateSpaceTooLarge(f"state space exceeds {max_states}")
    if p.setting is Setting.STRATEGIC:
        q = Fraction(check_prob) if check_prob is not None else 1 - 1 / Fraction(p.kappa).limit_denominator(10**9)
    else:
        q = Fraction(1)
    start = _spread(p.n, p.total_units, p.unit, p.cap_units)
    states, index, transitions = _closure(start, _round_kernel(p, q), max_states)
    _check_rows(transitions)
    return MarkovChain(states, transitions, start, p, "round", index)


@dataclass(frozen=True)
class ReversibilityReport:
    max_asymmetry: Fraction
    worst_pair: tuple[int, int] | None

    @property
    def exact(self) -> bool:
        return self.max_asymmetry == 0


def check_reversibility(chain: MarkovChain) -> ReversibilityReport:
    """Largest |P(s, s') - P(s', s)| over s != s', in exact arithmetic."""
    worst, pair = Fraction(0), None
    for i, row in chain.transitions.items():
        for j, pij in row.items():
            if i == j:
                continue
            gap = abs(pij - chain.transitions.get(j, {}).get(i, Fraction(0)))
            if gap > worst:
                worst, pair = gap, (i, j)
    return ReversibilityReport(worst, pair)


@dataclass
class StationaryReport:
    pi: np.ndarray
    holdings: DistributionVector
    max_deviation: float
    doubly_stochastic: bool
    return_lengths: tuple[int, int]

    @property
    def uniform(self) -> bool:
        return self.max_deviation < 1e-10


def _period_witness(chain: MarkovChain) -> tuple[int, int]:
    """Two lengths of closed walks through the start state with gcd 1."""
    mat = chain.to_sparse()
    adj = (mat > 0).astype(np.int8).T.tocsr()
    n = len(chain)
    start = chain.index[chain.start_state]
    cur = np.zeros(n, bool)
    cur[start] = True
    lengths: list[int] = []
    for length in range(1, 4 * n + 8):
        cur = (adj @ cur.astype(np.int8)) > 0
        if cur[start]:
            for prev in lengths:
                if math.gcd(prev, length) == 1:
                    return prev, length
            if length == 1:
                return 1, 1
            lengths.append(length)
    g = 0
    for x in lengths:
        g = math.gcd(g, x)
    raise Periodic(f"return lengths from the start state share period {g}")


def _holdings_distribution(states: list[State], pi: np.ndarray, unit: int, n_levels: int) -> DistributionVector:
    acc = np.zeros(n_levels)
    for s, w in zip(states, pi):
        tokens = np.asarray(s) // unit
        np.add.at(acc, tokens, w / len(s))
    return DistributionVector(acc / acc.sum())


def stationary_distribution(chain: MarkovChain) -> StationaryReport:
    """Solve pi P = pi after checking irreducibility and aperiodicity.

    Also reports whether the column sums are exactly 1, which for an
    irreducible chain is equivalent to a uniform stationary distribution.
    """
    mat = chain.to_sparse()
    n = len(chain)
    n_comp, _ = connected_components(mat, directed=True, connection="strong")
    if n_comp != 1:
        raise NotIrreducible(f"{n_comp} strongly connected components")
    witness = _period_witness(chain)

    cols = [Fraction(0)] * n
    for i, row in chain.transitions.items():
        for j, pij in row.items():
            cols[j] += pij
    doubly = all(c == 1 for c in cols)

    a = (mat.T - sp.identity(n, format="csr")).tolil()
    a[0, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[0] = 1.0
    if n <= 3000:
        pi = np.linalg.solve(a.toarray(), rhs)
    else:
        from scipy.sparse.linalg import spsolve
        pi = spsolve(a.tocsr(), rhs)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    p = chain.params
    n_levels = p.cap_units // p.unit + 1
    return StationaryReport(pi, _holdings_distribution(chain.states, pi, p.unit, n_levels),
                            float(np.max(np.abs(pi - 1.0 / n))), doubly, witness)


def uniform_holdings_distribution(chain: MarkovChain) -> DistributionVector:
    """Per-agent holdings distribution implied by weighting every state equally."""
    p = chain.params
    n = len(chain)
    return _holdings_distribution(chain.states, np.full(n, 1.0 / n), p.unit, p.cap_units // p.unit + 1)


def max_entropy_distribution(support: int | range | np.ndarray, mean: float, tol: float = 1e-10) -> DistributionVector:
    """Maximum-entropy distribution on levels 0..cap with the given mean.

    ``support`` is the cap (levels 0..cap) or the explicit level sequence
    starting at 0.  p(x) is proportional to exp(-lambda x); lambda is found by
    bisection since the mean is strictly decreasing in lambda.
    """
    if isinstance(support, (int, np.integer)):
        cap = int(support)
    else:
        levels = np.asarray(support)
        cap = int(levels[-1])
    if cap < 0:
        raise InfeasibleMean("support must contain level 0")
    mean = float(mean)
    if not 0.0 <= mean <= cap:
        raise InfeasibleMean(f"mean {mean} outside [0, {cap}]")
    x = np.arange(cap + 1, dtype=float)
    if cap == 0:
        return DistributionVector(np.ones(1))
    if mean == 0.0:
        return DistributionVector(np.eye(cap + 1)[0])
    if mean == cap:
        return DistributionVector(np.eye(cap + 1)[cap])
    if mean == cap / 2:
        return DistributionVector(np.full(cap + 1, 1.0 / (cap + 1)))

    def dist(lam: float) -> np.ndarray:
        shift = 0.0 if lam >= 0 else float(cap)
        w = np.exp(-lam * (x - shift))
        return w / w.sum()

    def mean_of(lam: float) -> float:
        return float(dist(lam) @ x)

    lo, hi = -1.0, 1.0
    while mean_of(hi) > mean:
        hi *= 2
    while mean_of(lo) < mean:
        lo *= 2
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        m = mean_of(mid)
        if abs(m - mean) <= tol * 0.01 or hi - lo < 1e-15:
            break
        if m > mean:
            lo = mid
        else:
            hi = mid
    return DistributionVector(dist(0.5 * (lo + hi)))


def steady_state_for(params: GameParams) -> DistributionVector:
    """Max-entropy steady state over base-unit levels for ``params``."""
    return max_entropy_distribution(params.cap_units, params.total_units / params.n)


@dataclass
class BestResponse:
    """Outcome of the single-agent decision problem.

    ``threshold`` is the best threshold policy; ``gap`` is how far it falls
    short of the unrestricted optimum ``values`` in the worst holdings state.
    """

    threshold: int
    values: np.ndarray
    q_volunteer: np.ndarray
    q_abstain: np.ndarray
    iterations: int
    threshold_values: np.ndarray
    scores: np.ndarray
    gap: float


def _event_model(k_other: int, params: GameParams, steady: DistributionVector):
    n, unit, cap, rew = params.n, params.unit, params.cap_units, params.reward_units
    s = steady.padded(cap + 1)
    thr = volunteer_limit_units(k_other, unit)
    gamma = float(s[:thr].sum())
    if gamma <= 0.0:
        raise NoVolunteers(f"no steady mass below threshold {k_other}")
    s0 = float(s[:unit].sum())
    s_rec = float(s[: cap - unit + 1].sum())
    s_pay = float(s[rew:].sum()) if rew <= cap else 0.0
    if params.setting is Setting.STRATEGIC:
        q = 1.0 - 1.0 / params.kappa
        beta = float(params.beta_star)
        kappa = params.kappa
    else:
        q, beta, kappa = 1.0, float(params.b), 1.0
    p_vol = 1.0 - (1.0 - gamma) ** (n - 1)
    return dict(n=n, unit=unit, cap=cap, rew=rew, gamma=gamma, s0=s0, s_rec=s_rec, s_pay=s_pay,
                q=q, beta=beta, kappa=kappa, p_vol=p_vol, alpha=params.alpha,
                strategic=params.setting is Setting.STRATEGIC)


def _transitions(x: int, volunteer: bool, m: dict[str, Any]) -> list[tuple[float, float, int]]:
    """(probability, reward, next holdings) for the focal agent in one round."""
    n, unit, cap, rew = m["n"], m["unit"], m["cap"], m["rew"]
    q, beta, kappa, p_vol = m["q"], m["beta"], m["kappa"], m["p_vol"]
    ev: list[tuple[float, float, int]] = []
    # focal posts
    w = 1.0 / n
    if m["strategic"]:
        free = (1 - beta) + beta * kappa
        ev.append((w * (1 - q), free, x))
        if x >= unit:
            ev.append((w * q * p_vol, 1 - beta, x - unit))
            ev.append((w * q * (1 - p_vol), free, x))
        else:
            ev.append((w * q, 0.0, x))
    elif x >= unit:
        ev.append((w, 1 - beta * p_vol, x - unit))
    else:
        ev.append((w, 0.0, x))
    # someone else posts and pays a token
    w_other = (n - 1) / n * (1 - m["s0"]) * q
    rho = (1.0 if x <= cap - unit else 0.0) / (1 + (n - 2) * m["s_rec"])
    mu = (1.0 / (m["gamma"] * (n - 1) + 1)) if volunteer else 0.0
    for got, pr in ((unit, rho), (0, 1 - rho)):
        if pr == 0.0:
            continue
        y = x + got
        if mu > 0:
            ev.append((w_other * pr * mu * (1 - beta), -m["alpha"], y))
            ev.append((w_other * pr * mu * beta, -m["alpha"], y + rew))
        caught = w_other * pr * (1 - mu) * beta * p_vol
        pay = (1.0 / ((n - 1) * m["s_pay"] + 1)) if y >= rew else 0.0
        ev.append((caught * pay, 0.0, y - rew))
        ev.append((w_other * pr * (1 - mu) - caught * pay, 0.0, y))
    ev.append((1.0 - sum(pr for pr, _, _ in ev), 0.0, x))
    return ev


def solve_best_response(k_other: int, params: GameParams, steady: DistributionVector | None = None,
                        tol: float = 1e-10, max_iter: int = 1_000_000) -> BestResponse:
    """Value iteration for a single agent facing a population at threshold ``k_other``.

    State is own holdings in base units; the agent decides in each state
    whether to volunteer.  Self-transitions are folded into the denominator
    (Q = sum over moves / (1 - d p_self)), which leaves the fixed point
    unchanged and speeds convergence.
    """
    p = params.with_(k=k_other) if params.k != k_other else params
    steady = steady if steady is not None else steady_state_for(p)
    m = _event_model(k_other, p, steady)
    unit, rew = m["unit"], m["rew"]
    top = p.cap_units + rew
    d = p.delta ** (1.0 / p.n)
    size = top + 1
    mats = np.zeros((2, size, size))
    consts = np.zeros((2, size))
    for a, volunteer in enumerate((False, True)):
        for x in range(size):
            ev = _transitions(x, volunteer, m)
            stay = sum(pr for pr, _, y in ev if y == x)
            denom = 1 - d * stay
            consts[a, x] = sum(pr * r for pr, r, _ in ev) / denom
            for pr, _, y in ev:
                if y != x:
                    mats[a, x, min(y, top)] += d * pr / denom

    v = np.zeros(size)
    q = np.zeros((2, size))
    it = 0
    for it in range(1, max_iter + 1):
        q = consts + mats @ v
        new = q.max(axis=0)
        diff = new - v
        v = new
        if diff.max() - diff.min() < tol and np.abs(diff).max() < tol * max(1.0, float(np.abs(v).max())):
            break
    # best policy of the form "volunteer iff x < theta tokens", scored by the
    # steady-state-weighted value; ties go to the smaller theta
    weight = steady.padded(size)
    levels = np.arange(size)
    n_theta = -(-size // unit) + 1
    tv = np.zeros((n_theta, size))
    for theta in range(n_theta):
        act = (levels < volunteer_limit_units(theta, unit)).astype(int)
        mat = mats[act, levels]
        c = consts[act, levels]
        tv[theta] = np.linalg.solve(np.eye(size) - mat, c)
    scores = tv @ weight
    best = scores.max()
    threshold = int(np.flatnonzero(scores >= best - 1e-12 * max(1.0, abs(best)))[0])
    gap = float(np.max(v - tv[threshold]))
    return BestResponse(threshold, v, q[1].copy(), q[0].copy(), it, tv, scores, gap)


def best_response(k_other: int, params: GameParams, steady: DistributionVector | None = None) -> int:
    """Smallest optimal volunteering threshold (in tokens) against others at ``k_other``."""
    return solve_best_response(k_other, params, steady).threshold


def find_equilibrium_threshold(params: GameParams, k_max: int = 64) -> tuple[int, DistributionVector | None]:
    """Iterate k -> BR(k) from k = 1 until it stops moving.

    Returns (k*, steady state at k*).  BR(1) = 0 gives the trivial
    equilibrium in which nobody volunteers (steady state None).
    """
    k = 1
    for _ in range(k_max + 1):
        if k > k_max:
            break
        pk = params.with_(k=k)
        if pk.total_units > pk.n * pk.cap_units:
            k += 1
            continue
        steady = steady_state_for(pk)
        nxt = best_response(k, pk, steady)
        if nxt == k:
            return k, steady
        if nxt < k:
            if k == 1:
                return 0, None
            return k, steady
        k = nxt
    raise NoFixedPoint(k_max)


@dataclass(frozen=True)
class WelfareReport:
    monitoring_welfare: float
    no_monitoring_welfare: float
    C_threshold: float

    @property
    def monitoring_preferred(self) -> bool:
        return self.monitoring_welfare > self.no_monitoring_welfare


def welfare_inadvertent(b: Any, alpha: float, C: float) -> WelfareReport:
    """Per-round welfare with and without monitoring when bad posts cost C."""
    b = float(Fraction(str(b)) if isinstance(b, str) else b)
    return WelfareReport(1 - b - alpha, 1 - b * C, (b + alpha) / b)


def welfare_strategic(kappa: float, alpha: float, C: float) -> WelfareReport:
    if kappa <= 1:
        raise RangeError("kappa must exceed 1")
    monitored = 1 - (1 - 1 / kappa) * alpha
    return WelfareReport(monitored, kappa - C, kappa - 1 + (1 - 1 / kappa) * alpha)


def volunteer_density_bound(k: int, n: int) -> Fraction:
    """Strict upper bound on average holdings that guarantees a volunteer.

    Below it, some agent other than the poster is always under k tokens.  At
    the bound itself the poster can hold one token while everyone else sits
    at exactly k.
    """
    if k < 1 or n < 2:
        raise RangeError("need k >= 1 and n >= 2")
    return Fraction(k) - Fraction(k - 1, n)
