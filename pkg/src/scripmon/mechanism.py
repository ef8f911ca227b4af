"""Round-by-round state machines for the inadvertent and strategic games.

These functions are the readable reference path: each takes the old ledger
and returns a new one with a :class:`RoundOutcome`.  The compiled engine in
:mod:`scripmon.engine` consumes the random stream in exactly the same order,
so both paths produce the same trajectory from the same seed.

Draw order per round
    inadvertent: poster, recipient, violation, monitor, payer(s)
    strategic:   poster, violation, monitoring decision, monitor, recipient, payer(s)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

import numpy as np

from .core import GameParams, PaymentVariant, RandomStream, RoundOutcome, Setting, TokenLedger, volunteer_limit_units
from .errors import RangeError


@dataclass(frozen=True)
class ThresholdPolicy:
    """Volunteer iff holdings < threshold tokens.

    ``overrides`` maps agent id to a personal threshold; ``bad_prob`` and
    ``bad_prob_overrides`` replace beta* as the chance a poster submits bad
    content (strategic setting only).
    """

    k: int
    overrides: dict[int, int] = field(default_factory=dict)
    bad_prob: float | None = None
    bad_prob_overrides: dict[int, float] = field(default_factory=dict)

    def threshold_of(self, agent: int) -> int:
        return self.overrides.get(agent, self.k)

    def thresholds_units(self, n: int, unit: int) -> np.ndarray:
        thr = np.full(n, volunteer_limit_units(self.k, unit), dtype=np.int64)
        for agent, k_i in self.overrides.items():
            if 0 <= agent < n:
                thr[agent] = volunteer_limit_units(k_i, unit)
        return thr

    def bad_probs(self, n: int, default: float) -> np.ndarray:
        probs = np.full(n, default if self.bad_prob is None else self.bad_prob, dtype=float)
        for agent, beta in self.bad_prob_overrides.items():
            if 0 <= agent < n:
                probs[agent] = beta
        return probs

    def with_override(self, agent: int, k_i: int) -> ThresholdPolicy:
        return replace(self, overrides={**self.overrides, agent: k_i})


@dataclass(frozen=True)
class ControllerState:
    """Tally the strategic controller keeps of monitored postings."""

    rounds_elapsed: int = 0
    monitored_count: int = 0
    bad_found_count: int = 0
    warmup_rounds: int = 1000
    current_monitor_prob: float | None = None

    @property
    def beta_hat(self) -> float | None:
        if self.monitored_count == 0:
            return None
        return self.bad_found_count / self.monitored_count

    def record(self, monitored: bool, bad: bool, prob: float) -> ControllerState:
        return replace(
            self,
            rounds_elapsed=self.rounds_elapsed + 1,
            monitored_count=self.monitored_count + int(monitored),
            bad_found_count=self.bad_found_count + int(monitored and bad),
            current_monitor_prob=prob,
        )


def monitor_prob(ctrl: ControllerState, params: GameParams) -> float:
    """Probability that the current posting is checked.

    1 - 1/kappa during warm-up and while the observed bad fraction stays within
    two binomial standard deviations of beta*; otherwise
    1 - beta*/(beta_hat kappa) clamped to [0, 1].
    """
    if params.setting is not Setting.STRATEGIC:
        raise RangeError("monitor_prob applies to the strategic setting only")
    kappa = params.kappa
    base = 1.0 - 1.0 / kappa
    m = ctrl.monitored_count
    if ctrl.rounds_elapsed < ctrl.warmup_rounds or m == 0:
        return base
    beta_star = float(params.beta_star)
    bh = ctrl.bad_found_count / m
    sd = math.sqrt(beta_star * (1.0 - beta_star) / m)
    if abs(bh - beta_star) <= 2.0 * sd:
        return base
    if bh <= 0.0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - beta_star / (bh * kappa)))


def _pool(mask: np.ndarray, exclude: int | None = None) -> np.ndarray:
    idx = np.flatnonzero(mask)
    if exclude is not None:
        idx = idx[idx != exclude]
    return idx


def _pick(pool: np.ndarray, rng: RandomStream) -> int:
    return int(pool[rng.below(pool.size)])


def _active(departed: np.ndarray | None, n: int) -> np.ndarray:
    return np.ones(n, bool) if departed is None else ~departed


def _collect_reward(h: np.ndarray, params: GameParams, monitor: int, rng: RandomStream,
                    departed: np.ndarray | None, detected: list[int]) -> tuple[list[int], bool, bool]:
    """Move the detection reward to ``monitor`` in place.

    Returns (payers, used_fallback, short).  Departed agents drawn as payers
    are recorded in ``detected`` and the draw is repeated.
    """
    unit, rew = params.unit, params.reward_units
    gone = np.zeros(h.size, bool) if departed is None else departed
    fallback = False
    if params.payment_variant is PaymentVariant.SINGLE:
        pool = list(_pool(h >= rew, exclude=monitor))
        while pool:
            q = int(pool.pop(rng.below(len(pool))))
            if gone[q]:
                detected.append(q)
                continue
            h[q] -= rew
            h[monitor] += rew
            return [q], False, False
        fallback = True

    pieces = -(-rew // unit)
    pool = list(_pool(h >= unit, exclude=monitor))
    chosen: list[int] = []
    while len(chosen) < pieces and pool:
        q = int(pool.pop(rng.below(len(pool))))
        if gone[q]:
            detected.append(q)
            continue
        chosen.append(q)
    total = 0
    for j, q in enumerate(chosen):
        amount = unit if j < pieces - 1 else rew - (pieces - 1) * unit
        h[q] -= amount
        total += amount
    h[monitor] += total
    return chosen, fallback, len(chosen) < pieces


def step_inadvertent(ledger: TokenLedger, params: GameParams, policy: ThresholdPolicy,
                     rng: RandomStream, t: int = 0, departed: np.ndarray | None = None
                     ) -> tuple[TokenLedger, RoundOutcome]:
    """One round of the inadvertent game.

    The poster pays one token to a random agent below the cap, then a monitor
    is drawn from the agents (other than the poster) who were below their
    threshold when the post was announced.  A detected violation is paid for
    by a random agent holding at least the reward, or by single tokens from
    several agents under the split variant.
    """
    if params.setting is not Setting.INADVERTENT:
        raise RangeError("step_inadvertent needs inadvertent params")
    h = ledger.holdings.copy()
    n = h.size
    unit, cap = params.unit, params.cap_units
    p = rng.below(n)
    if departed is not None and departed[p]:
        return ledger.copy(), RoundOutcome(t, p, posted=False, monitored=False, violation=False,
                                           detected_leaves=(p,))
    if h[p] < unit:
        return ledger.copy(), RoundOutcome(t, p, posted=False, monitored=False, violation=False)

    recipients = _pool(h <= cap - unit, exclude=p)
    if recipients.size == 0:
        return ledger.copy(), RoundOutcome(t, p, posted=False, monitored=False, violation=False, frozen=True)
    j = _pick(recipients, rng)
    bad = rng.random() < float(params.b)

    thr = policy.thresholds_units(n, unit)
    volunteers = _pool((h < thr) & _active(departed, n), exclude=p)
    h[p] -= unit
    h[j] += unit

    monitor = _pick(volunteers, rng) if volunteers.size else None
    payers: list[int] = []
    fallback = short = False
    detected: list[int] = []
    if monitor is not None and bad:
        payers, fallback, short = _collect_reward(h, params, monitor, rng, departed, detected)

    utilities: dict[int, float] = {}
    if monitor is None or not bad:
        utilities[p] = 1.0
    if monitor is not None:
        utilities[monitor] = utilities.get(monitor, 0.0) - params.alpha
    return TokenLedger(ledger.unit, ledger.cap, h), RoundOutcome(
        t, p, posted=True, monitored=monitor is not None, violation=bad, monitor=monitor, recipient=j,
        payers=tuple(payers), utilities=utilities, no_volunteer=monitor is None,
        payer_fallback=fallback, anomaly=short, detected_leaves=tuple(detected),
    )


def step_strategic(ledger: TokenLedger, params: GameParams, policy: ThresholdPolicy,
                   ctrl: ControllerState, rng: RandomStream, t: int = 0,
                   departed: np.ndarray | None = None
                   ) -> tuple[TokenLedger, RoundOutcome, ControllerState]:
    """One round of the strategic game.

    The poster fixes its content first, then the controller decides whether
    to check it.  Only checked posts cost a token, and only when a volunteer
    exists; an unchecked post always goes through.
    """
    if params.setting is not Setting.STRATEGIC:
        raise RangeError("step_strategic needs strategic params")
    h = ledger.holdings.copy()
    n = h.size
    unit, cap = params.unit, params.cap_units
    p = rng.below(n)
    beta_p = policy.bad_prob_overrides.get(
        p, float(params.beta_star) if policy.bad_prob is None else policy.bad_prob)
    bad = rng.random() < beta_p
    q = monitor_prob(ctrl, params)
    checked = rng.random() < q

    if departed is not None and departed[p]:
        return ledger.copy(), RoundOutcome(t, p, posted=False, monitored=checked, violation=bad,
                                           detected_leaves=(p,)), ctrl.record(False, bad, q)

    monitor = recipient = None
    went_through = frozen = no_vol = False
    if checked:
        if h[p] >= unit:
            thr = policy.thresholds_units(n, unit)
            volunteers = _pool((h < thr) & _active(departed, n), exclude=p)
            if volunteers.size:
                recipients = _pool(h <= cap - unit, exclude=p)
                if recipients.size == 0:
                    frozen = True
                else:
                    monitor = _pick(volunteers, rng)
                    recipient = _pick(recipients, rng)
                    h[p] -= unit
                    h[recipient] += unit
                    went_through = True
            else:
                no_vol = True
                went_through = True
    else:
        went_through = True

    payers: list[int] = []
    fallback = short = False
    detected: list[int] = []
    if monitor is not None and bad:
        payers, fallback, short = _collect_reward(h, params, monitor, rng, departed, detected)

    utilities: dict[int, float] = {}
    if went_through:
        if not bad:
            utilities[p] = 1.0
        elif monitor is None:
            utilities[p] = params.kappa
    if monitor is not None:
        utilities[monitor] = utilities.get(monitor, 0.0) - params.alpha
    outcome = RoundOutcome(
        t, p, posted=went_through,
        monitored=checked, violation=bad, monitor=monitor, recipient=recipient,
        payers=tuple(payers), utilities=utilities, frozen=frozen, no_volunteer=no_vol,
        payer_fallback=fallback, anomaly=short, detected_leaves=tuple(detected),
    )
    return TokenLedger(ledger.unit, ledger.cap, h), outcome, ctrl.record(monitor is not None, bad, q)


def expected_poster_payoff(bad_prob: Any, kappa: Any, check_prob: Any) -> Fraction:
    """Exact single-round payoff of a poster with a token when a volunteer always exists."""
    beta, kap, q = Fraction(bad_prob), Fraction(kappa), Fraction(check_prob)
    return (1 - beta) + beta * (1 - q) * kap


def deviation_run(ledger: TokenLedger, params: GameParams, policy: ThresholdPolicy, deviant: int,
                  deviant_policy: int | ThresholdPolicy, horizon: int, rng: RandomStream | int,
                  warmup: int = 1000) -> tuple[float, float]:
    """Discounted utility of ``deviant`` with and without deviating.

    Both runs start from ``ledger`` and read the same random numbers.  Returns
    ``(deviating, conforming)`` utilities, sum of delta**(t/n) * u_t.
    """
    from .engine import EngineState

    n = ledger.n
    if params.delta ** (horizon / n) >= 1e-6:
        raise RangeError(f"horizon {horizon} too short: delta^(horizon/n) must be < 1e-6")
    if isinstance(deviant_policy, ThresholdPolicy):
        k_dev = deviant_policy.threshold_of(deviant)
    else:
        k_dev = int(deviant_policy)
    seed = rng.seed if isinstance(rng, RandomStream) else rng
    default_bad = float(params.bad_prob)
    results = []
    for pol in (policy.with_override(deviant, k_dev), policy):
        state = EngineState(params, ledger.holdings.copy(), pol.thresholds_units(n, params.unit),
                            pol.bad_probs(n, default_bad), warmup=warmup)
        state.run(horizon, RandomStream(seed), focus=deviant)
        results.append(float(state.fstats[0]))
    return results[0], results[1]
