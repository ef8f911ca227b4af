"""Compiled round loop used for long runs.

The loop reproduces :func:`scripmon.mechanism.step_inadvertent` and
:func:`scripmon.mechanism.step_strategic` draw for draw.  Every uniform choice
picks the r-th eligible agent in ascending id order; Fenwick trees over the
four eligibility classes make that rank selection O(log n).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core import GameParams, PaymentVariant, RandomStream, Setting

# eligibility classes
RECIP, VOL, PAYER, HOLDER = 0, 1, 2, 3

# counter slots
C_ROUNDS = 0
C_NO_TOKEN = 1      # poster could not pay for its post
C_FROZEN = 2        # no eligible recipient
C_NO_VOL = 3        # monitoring solicited but nobody volunteered
C_FALLBACK = 4      # single payer unavailable, split collection used
C_ANOMALY = 5       # reward could not be collected in full
C_POSTS = 6         # posts that appeared or were discarded after payment
C_SUBMITTED = 7
C_BAD_SUBMITTED = 8
C_MONITORED = 9     # rounds with an actual monitor
C_BAD_FOUND = 10
N_COUNTERS = 11

COUNTER_NAMES = (
    "rounds", "no_token", "frozen", "no_volunteer", "payer_fallback", "anomalies",
    "posts", "submitted", "bad_submitted", "monitored", "bad_found",
)


@numba.njit(cache=True)
def _fw_add(tree, i, d):
    i += 1
    m = tree.shape[0]
    while i < m:
        tree[i] += d
        i += i & (-i)


@numba.njit(cache=True)
def _fw_prefix(tree, i):
    """Number of members with id < i."""
    s = 0
    while i > 0:
        s += tree[i]
        i -= i & (-i)
    return s


@numba.njit(cache=True)
def _fw_select(tree, r, top):
    """Id of the member with rank r (0-based)."""
    pos = 0
    step = top
    m = tree.shape[0]
    while step > 0:
        nxt = pos + step
        if nxt < m and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        step >>= 1
    return pos


@numba.njit(cache=True)
def _below(buf, pos, m):
    x = buf[pos[0]]
    pos[0] += 1
    r = np.int64(x * m)
    if r >= m:
        r = m - 1
    return r


@numba.njit(cache=True)
def _uniform(buf, pos):
    x = buf[pos[0]]
    pos[0] += 1
    return x


@numba.njit(cache=True)
def _member(c, hv, tv, cap, rew, unit):
    if c == 0:
        return hv <= cap - unit
    if c == 1:
        return hv < tv
    if c == 2:
        return hv >= rew
    return hv >= unit


@numba.njit(cache=True)
def _set_h(h, thr, trees, cnt, levels, i, newh, cap, rew, unit):
    old = h[i]
    levels[old] -= 1
    levels[newh] += 1
    for c in range(4):
        a = _member(c, old, thr[i], cap, rew, unit)
        b = _member(c, newh, thr[i], cap, rew, unit)
        if a != b:
            d = 1 if b else -1
            _fw_add(trees[c], i, d)
            cnt[c] += d
    h[i] = newh


@numba.njit(cache=True)
def _select_excluding(trees, cnt, c, x, x_member, r, top):
    if x_member and r >= _fw_prefix(trees[c], x):
        r += 1
    return _fw_select(trees[c], r, top)


@numba.njit(cache=True)
def _collect(h, thr, trees, cnt, levels, v, cap, rew, unit, split, top, buf, pos, counters):
    """Pay the detection reward to monitor v; returns collected units."""
    if not split:
        vm = h[v] >= rew
        m = cnt[PAYER] - (1 if vm else 0)
        if m > 0:
            q = _select_excluding(trees, cnt, PAYER, v, vm, _below(buf, pos, m), top)
            _set_h(h, thr, trees, cnt, levels, q, h[q] - rew, cap, rew, unit)
            _set_h(h, thr, trees, cnt, levels, v, h[v] + rew, cap, rew, unit)
            return rew
        counters[C_FALLBACK] += 1
    pieces = (rew + unit - 1) // unit
    chosen = np.empty(pieces, np.int64)
    vm = h[v] >= unit
    if vm:
        _fw_add(trees[HOLDER], v, -1)
        cnt[HOLDER] -= 1
    got = 0
    while got < pieces and cnt[HOLDER] > 0:
        q = _fw_select(trees[HOLDER], _below(buf, pos, cnt[HOLDER]), top)
        _fw_add(trees[HOLDER], q, -1)
        cnt[HOLDER] -= 1
        chosen[got] = q
        got += 1
    for j in range(got):
        _fw_add(trees[HOLDER], chosen[j], 1)
        cnt[HOLDER] += 1
    if vm:
        _fw_add(trees[HOLDER], v, 1)
        cnt[HOLDER] += 1
    total = 0
    for j in range(got):
        amt = unit if j < pieces - 1 else rew - (pieces - 1) * unit
        q = chosen[j]
        _set_h(h, thr, trees, cnt, levels, q, h[q] - amt, cap, rew, unit)
        total += amt
    _set_h(h, thr, trees, cnt, levels, v, h[v] + total, cap, rew, unit)
    if got < pieces:
        counters[C_ANOMALY] += 1
    return total


@numba.njit(cache=True)
def _monitor_prob(ctrl, beta_star, kappa, warmup):
    base = 1.0 - 1.0 / kappa
    if ctrl[0] < warmup or ctrl[1] == 0:
        return base
    bh = ctrl[2] / ctrl[1]
    sd = np.sqrt(beta_star * (1.0 - beta_star) / ctrl[1])
    if abs(bh - beta_star) <= 2.0 * sd:
        return base
    if bh <= 0.0:
        return 0.0
    p = 1.0 - beta_star / (bh * kappa)
    if p < 0.0:
        return 0.0
    if p > 1.0:
        return 1.0
    return p


@numba.njit(cache=True)
def _run(h, thr, badp, trees, cnt, levels, counters, ctrl, fstats,
         strategic, split, unit, rew, cap, b, beta_star, kappa, alpha, warmup,
         focus, log_delta_per_round, t, t_end, sample_every,
         snaps, snap_counters, snap_ctrl, snap_fstats, snap_rounds, n_snap,
         buf, pos, margin, level_time):
    """Run rounds until t_end or until fewer than ``margin`` doubles remain.

    fstats: [focus discounted utility, global monitor-prob sum, last monitor prob].
    level_time (if nonempty) accumulates the level counts after every round.
    Returns (t, n_snap).
    """
    n = h.shape[0]
    top = 1
    while top * 2 <= n:
        top *= 2
    limit = buf.shape[0] - margin
    while t < t_end and pos[0] <= limit:
        p = _below(buf, pos, n)
        counters[C_SUBMITTED] += 1
        u_poster = 0.0
        v = -1
        if not strategic:
            if h[p] < unit:
                counters[C_NO_TOKEN] += 1
            else:
                pr = h[p] <= cap - unit
                mr = cnt[RECIP] - (1 if pr else 0)
                if mr == 0:
                    counters[C_FROZEN] += 1
                else:
                    r = _select_excluding(trees, cnt, RECIP, p, pr, _below(buf, pos, mr), top)
                    f = _uniform(buf, pos) < b
                    if f:
                        counters[C_BAD_SUBMITTED] += 1
                    pv = h[p] < thr[p]
                    mv = cnt[VOL] - (1 if pv else 0)
                    if mv > 0:
                        v = _select_excluding(trees, cnt, VOL, p, pv, _below(buf, pos, mv), top)
                    else:
                        counters[C_NO_VOL] += 1
                    _set_h(h, thr, trees, cnt, levels, p, h[p] - unit, cap, rew, unit)
                    _set_h(h, thr, trees, cnt, levels, r, h[r] + unit, cap, rew, unit)
                    counters[C_POSTS] += 1
                    if v >= 0:
                        counters[C_MONITORED] += 1
                        if f:
                            counters[C_BAD_FOUND] += 1
                            _collect(h, thr, trees, cnt, levels, v, cap, rew, unit, split, top, buf, pos, counters)
                    if v < 0 or not f:
                        u_poster = 1.0
        else:
            f = _uniform(buf, pos) < badp[p]
            if f:
                counters[C_BAD_SUBMITTED] += 1
            q = _monitor_prob(ctrl, beta_star, kappa, warmup)
            fstats[1] += q
            fstats[2] = q
            c = _uniform(buf, pos) < q
            went_through = False
            if c:
                if h[p] >= unit:
                    pv = h[p] < thr[p]
                    mv = cnt[VOL] - (1 if pv else 0)
                    if mv > 0:
                        pr = h[p] <= cap - unit
                        mr = cnt[RECIP] - (1 if pr else 0)
                        if mr == 0:
                            counters[C_FROZEN] += 1
                        else:
                            v = _select_excluding(trees, cnt, VOL, p, pv, _below(buf, pos, mv), top)
                            r = _select_excluding(trees, cnt, RECIP, p, pr, _below(buf, pos, mr), top)
                            _set_h(h, thr, trees, cnt, levels, p, h[p] - unit, cap, rew, unit)
                            _set_h(h, thr, trees, cnt, levels, r, h[r] + unit, cap, rew, unit)
                            counters[C_POSTS] += 1
                            went_through = True
                    else:
                        counters[C_NO_VOL] += 1
                        counters[C_POSTS] += 1
                        went_through = True
                else:
                    counters[C_NO_TOKEN] += 1
            else:
                counters[C_POSTS] += 1
                went_through = True
            if v >= 0:
                counters[C_MONITORED] += 1
                ctrl[1] += 1
                if f:
                    ctrl[2] += 1
                    counters[C_BAD_FOUND] += 1
                    _collect(h, thr, trees, cnt, levels, v, cap, rew, unit, split, top, buf, pos, counters)
            if went_through:
                if not f:
                    u_poster = 1.0
                elif v < 0:
                    u_poster = kappa
            ctrl[0] += 1
        if focus >= 0:
            if p == focus and u_poster != 0.0:
                fstats[0] += np.exp(t * log_delta_per_round) * u_poster
            if v == focus:
                fstats[0] -= np.exp(t * log_delta_per_round) * alpha
        counters[C_ROUNDS] += 1
        t += 1
        if level_time.shape[0] > 0:
            for j in range(levels.shape[0]):
                level_time[j] += levels[j]
        if sample_every > 0 and t % sample_every == 0 and n_snap < snaps.shape[0]:
            snaps[n_snap, :] = levels
            snap_counters[n_snap, :] = counters
            snap_ctrl[n_snap, :] = ctrl
            snap_fstats[n_snap, :] = fstats
            snap_rounds[n_snap] = t
            n_snap += 1
    return t, n_snap


def max_draws_per_round(params: GameParams) -> int:
    pieces = -(-params.reward_units // params.unit)
    return 8 + 2 * pieces


@dataclass
class EngineState:
    """Mutable state of a compiled run: balances, thresholds, trees and tallies."""

    params: GameParams
    holdings: np.ndarray
    thresholds: np.ndarray
    bad_probs: np.ndarray
    warmup: int = 1000
    counters: np.ndarray = field(default_factory=lambda: np.zeros(N_COUNTERS, np.int64))
    ctrl: np.ndarray = field(default_factory=lambda: np.zeros(3, np.int64))
    fstats: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: int = 0
    level_time: np.ndarray | None = None

    def __post_init__(self) -> None:
        p = self.params
        self.holdings = np.array(self.holdings, dtype=np.int64)
        self.thresholds = np.array(self.thresholds, dtype=np.int64)
        self.bad_probs = np.array(self.bad_probs, dtype=np.float64)
        if p.setting is Setting.STRATEGIC:
            self.fstats[2] = 1.0 - 1.0 / p.kappa
        n = self.holdings.size
        self.n_levels = int(max(p.cap_units, int(self.thresholds.max(initial=0)) - 1 + p.reward_units,
                                int(self.holdings.max(initial=0)))) + 1
        self.levels = np.bincount(self.holdings, minlength=self.n_levels).astype(np.int64)
        member = np.stack([
            self.holdings <= p.cap_units - p.unit,
            self.holdings < self.thresholds,
            self.holdings >= p.reward_units,
            self.holdings >= p.unit,
        ]).astype(np.int64)
        self.cnt = member.sum(axis=1).astype(np.int64)
        self.trees = np.zeros((4, n + 1), np.int64)
        # O(n) Fenwick build
        self.trees[:, 1:] = member
        for i in range(1, n + 1):
            j = i + (i & -i)
            if j <= n:
                self.trees[:, j] += self.trees[:, i]

    def level_capacity_ok(self) -> bool:
        return int(self.holdings.max(initial=0)) < self.n_levels

    def run(self, rounds: int, rng: RandomStream, sample_every: int = 0, focus: int = -1,
            accumulate: bool = False) -> dict[str, np.ndarray]:
        """Advance ``rounds`` rounds, sampling every ``sample_every`` (0 = never).

        With ``accumulate`` the per-round level counts are summed into
        ``level_time`` (agent-rounds spent at each level).
        """
        p = self.params
        if accumulate and self.level_time is None:
            self.level_time = np.zeros(self.n_levels, np.int64)
        acc = self.level_time if accumulate else np.zeros(0, np.int64)
        strategic = p.setting is Setting.STRATEGIC
        n_samples = (self.t + rounds) // sample_every - self.t // sample_every if sample_every else 0
        snaps = np.zeros((n_samples, self.n_levels), np.int64)
        snap_counters = np.zeros((n_samples, N_COUNTERS), np.int64)
        snap_ctrl = np.zeros((n_samples, 3), np.int64)
        snap_fstats = np.zeros((n_samples, 3))
        snap_rounds = np.zeros(n_samples, np.int64)
        margin = max_draws_per_round(p)
        t_end = self.t + rounds
        n_snap = 0
        pos = np.zeros(1, np.int64)
        chunk = max(RandomStream.BLOCK, min(rounds * 6, 1 << 22))
        while self.t < t_end:
            buf, start = rng.window(chunk)
            pos[0] = start
            self.t, n_snap = _run(
                self.holdings, self.thresholds, self.bad_probs, self.trees, self.cnt, self.levels,
                self.counters, self.ctrl, self.fstats,
                strategic, p.payment_variant is PaymentVariant.SPLIT, p.unit, p.reward_units, p.cap_units,
                float(p.b) if p.b is not None else 0.0,
                float(p.beta_star) if p.beta_star is not None else 0.0,
                float(p.kappa) if p.kappa is not None else 2.0,
                p.alpha, self.warmup, focus, np.log(p.delta) / self.holdings.size,
                self.t, t_end, sample_every,
                snaps, snap_counters, snap_ctrl, snap_fstats, snap_rounds, n_snap,
                buf, pos, margin, acc,
            )
            rng.advance(int(pos[0]))
        return {
            "levels": snaps[:n_snap], "counters": snap_counters[:n_snap], "ctrl": snap_ctrl[:n_snap],
            "fstats": snap_fstats[:n_snap], "rounds": snap_rounds[:n_snap],
        }

    def counter_dict(self) -> dict[str, int]:
        return dict(zip(COUNTER_NAMES, (int(c) for c in self.counters)))
