"""Open populations: arrivals, departures, departure detection and token rescaling."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

import numpy as np

from .core import GameParams, RandomStream, Setting, TokenLedger
from .errors import UnknownAgent, ZeroAverage
from .mechanism import ControllerState, ThresholdPolicy, step_inadvertent, step_strategic


class EventKind(str, enum.Enum):
    JOIN = "join"
    LEAVE = "leave"
    DETECTED_LEAVE = "detected_leave"


@dataclass(frozen=True)
class PopulationEvent:
    round: int
    kind: EventKind
    agent: int


@dataclass
class PopulationState:
    """A ledger over a changing population.

    ``ids[i]`` is the external id of dense slot i.  Agents that left silently
    stay in the ledger with ``departed[i]`` set until the mechanism draws them
    as poster or payer; only then are they removed.
    """

    params: GameParams
    ledger: TokenLedger
    ids: list[int]
    next_id: int
    departed: np.ndarray
    events: list[PopulationEvent] = field(default_factory=list)
    t: int = 0

    @classmethod
    def from_ledger(cls, params: GameParams, ledger: TokenLedger) -> PopulationState:
        n = ledger.n
        return cls(params, ledger.copy(), list(range(n)), n, np.zeros(n, bool))

    @property
    def n(self) -> int:
        return self.ledger.n

    @property
    def total_units(self) -> int:
        return self.ledger.total

    def average_tokens(self) -> Fraction:
        if self.n == 0:
            return Fraction(0)
        return Fraction(self.ledger.total, self.n * self.ledger.unit)

    def slot(self, agent: int) -> int:
        try:
            return self.ids.index(agent)
        except ValueError:
            raise UnknownAgent(agent) from None

    def current_params(self) -> GameParams:
        """Params matching the population size; total is in whole tokens, rounded down."""
        return replace(self.params, n=max(self.n, 1), total_tokens=self.ledger.total // self.ledger.unit)

    def copy(self) -> PopulationState:
        return replace(self, ledger=self.ledger.copy(), ids=list(self.ids),
                       departed=self.departed.copy(), events=list(self.events))


def apply_join(state: PopulationState) -> PopulationState:
    """Add an agent with no tokens; it gets the next unused external id."""
    new = state.copy()
    h = np.append(new.ledger.holdings, 0)
    new.ledger = TokenLedger(new.ledger.unit, new.ledger.cap, h)
    new.ids.append(new.next_id)
    new.departed = np.append(new.departed, False)
    new.events.append(PopulationEvent(new.t, EventKind.JOIN, new.next_id))
    new.next_id += 1
    return new


def _remove(state: PopulationState, slot: int, kind: EventKind) -> None:
    agent = state.ids.pop(slot)
    h = np.delete(state.ledger.holdings, slot)
    state.ledger = TokenLedger(state.ledger.unit, state.ledger.cap, h)
    state.departed = np.delete(state.departed, slot)
    state.events.append(PopulationEvent(state.t, kind, agent))


def apply_leave(state: PopulationState, agent: int, silent: bool = False) -> PopulationState:
    """Remove ``agent``; its tokens leave circulation.

    With ``silent`` the agent only stops participating and is deleted when
    the mechanism next draws it as poster or payer.
    """
    slot = state.slot(agent)
    new = state.copy()
    if silent:
        new.departed[slot] = True
        new.events.append(PopulationEvent(new.t, EventKind.LEAVE, agent))
    else:
        _remove(new, slot, EventKind.LEAVE)
    return new


def detect_leaves(state: PopulationState, slots: tuple[int, ...]) -> PopulationState:
    """Delete silently departed agents the mechanism has just run into."""
    if not slots:
        return state
    new = state.copy()
    for agent in sorted({state.ids[s] for s in slots}, reverse=True):
        _remove(new, new.ids.index(agent), EventKind.DETECTED_LEAVE)
    return new


def rescale(state: PopulationState, target_avg: Any, rng: RandomStream | None = None) -> PopulationState:
    """Multiply every balance by F = target / current average.

    Balances are rounded half-to-even in base units, then nudged by single
    units (largest rounding residual first) so the total equals
    round(F * old total).  Anything above the cap is clipped and handed out
    one unit at a time to random agents below the cap.
    """
    if state.n == 0 or state.ledger.total == 0:
        raise ZeroAverage("cannot rescale a system with no tokens")
    unit, cap = state.ledger.unit, state.ledger.cap
    factor = Fraction(target_avg) / Fraction(state.ledger.total, state.n * unit)
    old = state.ledger.holdings
    exact = [Fraction(int(x)) * factor for x in old]
    new_h = np.array([round(x) for x in exact], dtype=np.int64)
    goal = min(round(Fraction(state.ledger.total) * factor), cap * state.n)
    residual = np.array([float(x - int(y)) for x, y in zip(exact, new_h)])
    diff = goal - int(new_h.sum())
    if diff > 0:
        for i in np.argsort(-residual, kind="stable"):
            if diff == 0:
                break
            if new_h[i] < cap:
                new_h[i] += 1
                diff -= 1
    elif diff < 0:
        for i in np.argsort(residual, kind="stable"):
            if diff == 0:
                break
            if new_h[i] > 0:
                new_h[i] -= 1
                diff += 1

    excess = int(np.clip(new_h - cap, 0, None).sum())
    if excess:
        rng = rng if rng is not None else RandomStream(0)
        new_h = np.minimum(new_h, cap)
        while excess:
            room = np.flatnonzero(new_h < cap)
            new_h[room[rng.below(room.size)]] += 1
            excess -= 1

    new = state.copy()
    new.ledger = TokenLedger(unit, cap, new_h)
    return new


def needs_rescale(state: PopulationState, target_avg: Any, drift: float = 0.25) -> bool:
    if state.n == 0:
        return False
    target = Fraction(target_avg)
    return abs(state.average_tokens() - target) > Fraction(drift).limit_denominator(10**6) * target


@dataclass
class ChurnReport:
    state: PopulationState
    averages: np.ndarray
    sizes: np.ndarray
    rescales: int
    conserved: bool
    halted: bool = False


def run_churn(params: GameParams, ledger: TokenLedger, policy: ThresholdPolicy, rounds: int,
              rng: RandomStream, join_rate: float = 1e-3, leave_rate: float = 1e-3,
              target_avg: Any = None, drift: float | None = 0.25, silent: bool = True,
              sample_every: int = 1000, check_every_round: bool = True,
              schedule: dict[int, list[tuple[str, int | None]]] | None = None) -> ChurnReport:
    """Run the mechanism with random arrivals and departures.

    Each round a join happens with probability ``join_rate`` and a departure
    of a uniformly chosen agent with probability ``leave_rate``.  When
    ``drift`` is set and the average strays by more than that fraction from
    ``target_avg``, holdings are rescaled back.  ``schedule`` maps a round to
    extra ``("join", None)`` or ``("leave", agent_id)`` events.  Conservation
    is checked after every round: the total may only change through
    departures and rescales.
    """
    target = Fraction(target_avg) if target_avg is not None else Fraction(params.total_tokens, params.n)
    state = PopulationState.from_ledger(params, ledger)
    ctrl = ControllerState()
    averages, sizes = [], []
    rescales = 0
    conserved = True
    strategic = params.setting is Setting.STRATEGIC
    for t in range(rounds):
        state.t = t
        for kind, agent in (schedule or {}).get(t, ()):
            if kind == EventKind.JOIN.value:
                state = apply_join(state)
            elif agent in state.ids:
                state = apply_leave(state, agent, silent=silent)
        if rng.random() < join_rate:
            state = apply_join(state)
        if state.n > 0 and rng.random() < leave_rate:
            active = np.flatnonzero(~state.departed)
            if active.size:
                victim = state.ids[int(active[rng.below(active.size)])]
                state = apply_leave(state, victim, silent=silent)
        if state.n == 0:
            return ChurnReport(state, np.array(averages), np.array(sizes), rescales, conserved, halted=True)
        if drift is not None and needs_rescale(state, target, drift):
            state = rescale(state, target, rng)
            rescales += 1
        before = state.ledger.total
        p = state.current_params()
        if strategic:
            led, outcome, ctrl = step_strategic(state.ledger, p, policy, ctrl, rng, t, state.departed)
        else:
            led, outcome = step_inadvertent(state.ledger, p, policy, rng, t, state.departed)
        if check_every_round and (led.total != before or led.holdings.min() < 0 or led.holdings.max() > led.cap):
            conserved = False
        state.ledger = led
        state = detect_leaves(state, outcome.detected_leaves)
        if sample_every and t % sample_every == 0:
            averages.append(float(state.average_tokens()))
            sizes.append(state.n)
    return ChurnReport(state, np.array(averages), np.array(sizes), rescales, conserved)
