"""Domain types, parameter validation, exact token arithmetic and the random stream.

Token balances are integers in base units.  One whole token is ``unit`` base
units, where ``unit`` is the smallest positive integer that makes the
detection reward 1/b integral, so every transfer is an exact integer move.
"""
from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

from .errors import EmptyPool, IrrationalReward, RangeError

# Rewards whose base unit would exceed this are treated as unrepresentable.
MAX_UNIT = 10_000


class Setting(str, enum.Enum):
    INADVERTENT = "inadvertent"
    STRATEGIC = "strategic"


class PaymentVariant(str, enum.Enum):
    SINGLE = "single"
    SPLIT = "split"


def as_fraction(value: Any) -> Fraction:
    """Convert ``value`` to an exact rational.

    Floats go through their shortest decimal repr, so ``0.2`` becomes 1/5
    rather than the binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not probabilities")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise RangeError(f"non-finite value {value!r}")
        return Fraction(repr(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


@dataclass(frozen=True)
class GameParams:
    """Validated mechanism constants.  Build through :func:`validate_params`."""

    n: int
    setting: Setting
    k: int
    total_tokens: int
    alpha: float
    delta: float
    b: Fraction | None = None
    beta_star: Fraction | None = None
    kappa: float | None = None
    payment_variant: PaymentVariant = PaymentVariant.SINGLE

    @property
    def bad_prob(self) -> Fraction:
        """b in the inadvertent setting, beta* in the strategic one."""
        return self.b if self.setting is Setting.INADVERTENT else self.beta_star

    @property
    def reward(self) -> Fraction:
        return 1 / self.bad_prob

    @property
    def unit(self) -> int:
        return self.reward.denominator

    @property
    def reward_units(self) -> int:
        return int(self.reward * self.unit)

    @property
    def threshold_units(self) -> int:
        """Agents volunteer iff their holdings are strictly below this many units."""
        return volunteer_limit_units(self.k, self.unit)

    @property
    def cap_units(self) -> int:
        return self.k * self.unit + self.reward_units

    @property
    def total_units(self) -> int:
        return self.total_tokens * self.unit

    @property
    def cap_tokens(self) -> Fraction:
        return self.k + self.reward

    @property
    def tokens_per_agent(self) -> Fraction:
        return Fraction(self.total_tokens, self.n)

    @property
    def n_token_levels(self) -> int:
        """Number of whole-token histogram buckets, 0..floor(cap)."""
        return self.cap_units // self.unit + 1

    def with_(self, **changes: Any) -> GameParams:
        """Return re-validated params with some fields replaced."""
        return validate_params(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "setting": self.setting.value,
            "b": None if self.b is None else str(self.b),
            "beta_star": None if self.beta_star is None else str(self.beta_star),
            "alpha": self.alpha,
            "kappa": self.kappa,
            "delta": self.delta,
            "k": self.k,
            "total_tokens": self.total_tokens,
            "payment_variant": self.payment_variant.value,
        }


def _probability(name: str, value: Any) -> Fraction:
    try:
        frac = as_fraction(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise IrrationalReward(f"{name}={value!r} is not a rational number") from exc
    if not 0 < frac < 1:
        raise RangeError(f"{name} must lie in (0, 1), got {value!r}")
    unit = (1 / frac).denominator
    if unit > MAX_UNIT:
        raise IrrationalReward(
            f"reward 1/{name} = {1 / frac} needs a base unit of {unit} (limit {MAX_UNIT})"
        )
    return frac


def _open_unit(name: str, value: Any) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise RangeError(f"{name} must lie in (0, 1), got {value}")
    return value


def volunteer_limit_units(k: int, unit: int) -> int:
    """Exclusive volunteering bound in base units for threshold k.

    An agent volunteers while it holds at most k - 1 tokens.  With whole-token
    holdings that is the same as "fewer than k"; with fractional holdings it
    keeps a monitor that also receives the posting token within the cap.
    """
    return (k - 1) * unit + 1 if k > 0 else 0


def validate_params(raw: GameParams | Mapping[str, Any] | None = None, **overrides: Any) -> GameParams:
    """Check bounds and return an immutable :class:`GameParams`.

    ``raw`` may be a mapping with keys ``n, b | beta_star, alpha, kappa, delta,
    k, total_tokens | tokens_per_agent, payment_variant``; keyword overrides win.
    The setting is inferred from whether ``b`` or ``beta_star`` is supplied.
    """
    if isinstance(raw, GameParams):
        record: dict[str, Any] = raw.to_dict()
    else:
        record = dict(raw or {})
    record.update(overrides)

    b, beta_star = record.get("b"), record.get("beta_star")
    setting = record.get("setting")
    if isinstance(setting, str):
        setting = Setting(setting)
    if b is not None and beta_star is not None:
        raise RangeError("give either b (inadvertent) or beta_star (strategic), not both")
    if b is None and beta_star is None:
        raise RangeError("one of b or beta_star is required")
    inferred = Setting.INADVERTENT if b is not None else Setting.STRATEGIC
    if setting is not None and setting is not inferred:
        raise RangeError(f"setting {setting.value} contradicts the supplied probability")
    setting = inferred

    n = record.get("n")
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise RangeError(f"n must be a positive integer, got {n!r}")
    n = int(n)

    k = record.get("k")
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 0:
        raise RangeError(f"k must be a nonnegative integer, got {k!r}")
    k = int(k)

    if record.get("total_tokens") is not None:
        total = as_fraction(record["total_tokens"])
    elif record.get("tokens_per_agent") is not None:
        total = as_fraction(record["tokens_per_agent"]) * n
    else:
        raise RangeError("total_tokens or tokens_per_agent is required")
    if total.denominator != 1 or total < 0:
        raise RangeError(f"total tokens must be a nonnegative whole number, got {total}")

    alpha = _open_unit("alpha", record.get("alpha", 0.05))
    delta = _open_unit("delta", record.get("delta", 0.99))

    kappa = record.get("kappa")
    if setting is Setting.STRATEGIC:
        if kappa is None or not float(kappa) > 1.0:
            raise RangeError(f"kappa must exceed 1 in the strategic setting, got {kappa!r}")
        kappa = float(kappa)
        beta_star = _probability("beta_star", beta_star)
    else:
        if kappa is not None:
            raise RangeError("kappa only applies to the strategic setting")
        b = _probability("b", b)

    variant = PaymentVariant(record.get("payment_variant", PaymentVariant.SINGLE))

    params = GameParams(
        n=n, setting=setting, k=k, total_tokens=int(total), alpha=alpha, delta=delta,
        b=b if setting is Setting.INADVERTENT else None,
        beta_star=beta_star if setting is Setting.STRATEGIC else None,
        kappa=kappa if setting is Setting.STRATEGIC else None,
        payment_variant=variant,
    )
    if params.total_units > params.n * params.cap_units:
        raise RangeError(
            f"{params.total_tokens} tokens cannot fit under the cap of "
            f"{params.cap_tokens} tokens for {n} agents"
        )
    return params


@dataclass
class TokenLedger:
    """Per-agent balances in base units.  ``cap`` is in base units as well."""

    unit: int
    cap: int
    holdings: np.ndarray

    def __post_init__(self) -> None:
        self.holdings = np.asarray(self.holdings, dtype=np.int64)

    @classmethod
    def from_tokens(cls, params: GameParams, tokens: Iterable[Any]) -> TokenLedger:
        units = []
        for t in tokens:
            u = as_fraction(t) * params.unit
            if u.denominator != 1:
                raise RangeError(f"{t} tokens is not a whole number of base units")
            units.append(int(u))
        return cls(params.unit, params.cap_units, np.array(units, dtype=np.int64))

    @property
    def n(self) -> int:
        return len(self.holdings)

    @property
    def total(self) -> int:
        return int(self.holdings.sum())

    def tokens(self) -> np.ndarray:
        return self.holdings / self.unit

    def copy(self) -> TokenLedger:
        return TokenLedger(self.unit, self.cap, self.holdings.copy())

    def check(self) -> None:
        if self.holdings.size and (self.holdings.min() < 0 or self.holdings.max() > self.cap):
            raise AssertionError(f"holdings outside [0, {self.cap}]: {self.holdings}")


@dataclass(frozen=True)
class RoundOutcome:
    """Record of one round.  ``monitor`` is None when nobody monitored."""

    t: int
    poster: int
    posted: bool
    monitored: bool
    violation: bool
    monitor: int | None = None
    recipient: int | None = None
    payers: tuple[int, ...] = ()
    utilities: dict[int, float] = field(default_factory=dict)
    frozen: bool = False
    no_volunteer: bool = False
    payer_fallback: bool = False
    anomaly: bool = False
    detected_leaves: tuple[int, ...] = ()

    def utility(self, agent: int) -> float:
        return self.utilities.get(agent, 0.0)


@dataclass(frozen=True)
class DistributionVector:
    """Fraction of agents at each holdings level."""

    fractions: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.fractions, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("distribution must be a nonempty vector")
        if np.any(arr < -1e-15) or abs(arr.sum() - 1.0) > 1e-12:
            raise ValueError(f"fractions must be nonnegative and sum to 1 (sum={arr.sum()!r})")
        object.__setattr__(self, "fractions", arr)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> DistributionVector:
        counts = np.asarray(counts, dtype=float)
        return cls(counts / counts.sum())

    @classmethod
    def from_holdings(cls, holdings: np.ndarray, unit: int = 1, n_levels: int | None = None) -> DistributionVector:
        """Whole-token histogram: base-unit levels aggregate to their floor token."""
        buckets = np.asarray(holdings, dtype=np.int64) // unit
        size = n_levels if n_levels is not None else int(buckets.max()) + 1
        return cls.from_counts(np.bincount(buckets, minlength=size))

    def __len__(self) -> int:
        return self.fractions.size

    def padded(self, length: int) -> np.ndarray:
        out = np.zeros(max(length, len(self)))
        out[: len(self)] = self.fractions
        return out

    def mass_below(self, level: int) -> float:
        return float(self.fractions[:level].sum())

    def mean(self) -> float:
        return float(np.arange(len(self)) @ self.fractions)


def unit_counts_to_tokens(counts: np.ndarray, unit: int) -> np.ndarray:
    """Aggregate counts indexed by base-unit level into whole-token buckets."""
    counts = np.asarray(counts)
    n_tok = (counts.shape[-1] - 1) // unit + 1
    pad = n_tok * unit - counts.shape[-1]
    if pad:
        counts = np.concatenate([counts, np.zeros(counts.shape[:-1] + (pad,), counts.dtype)], axis=-1)
    return counts.reshape(counts.shape[:-1] + (n_tok, unit)).sum(axis=-1)


class RandomStream:
    """Seeded counter-based (Philox) stream of uniform doubles.

    Doubles are produced in fixed-size blocks, so the sequence is the same no
    matter how it is consumed; the Python step functions and the compiled
    engine read from the same buffer and therefore see identical draws.
    """

    BLOCK = 1 << 16

    def __init__(self, seed: int | Sequence[int] = 0):
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(seed))
        self._buf = self._gen.random(self.BLOCK)
        self._pos = 0
        self.consumed = 0

    def random(self) -> float:
        if self._pos == self._buf.size:
            self._buf = self._gen.random(self.BLOCK)
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        self.consumed += 1
        return float(x)

    def below(self, m: int) -> int:
        """Uniform integer in [0, m)."""
        return min(int(self.random() * m), m - 1)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def window(self, at_least: int) -> tuple[np.ndarray, int]:
        """Expose the buffer with at least ``at_least`` unread doubles after the cursor."""
        remaining = self._buf.size - self._pos
        if remaining < at_least:
            blocks = -(-(at_least - remaining) // self.BLOCK)
            fresh = [self._gen.random(self.BLOCK) for _ in range(blocks)]
            self._buf = np.concatenate([self._buf[self._pos:], *fresh])
            self._pos = 0
        return self._buf, self._pos

    def advance(self, pos: int) -> None:
        """Move the cursor after an engine call consumed ``pos - cursor`` doubles."""
        self.consumed += pos - self._pos
        self._pos = pos


def uniform_choice(pool: Iterable[int] | np.ndarray, rng: RandomStream) -> int:
    """Pick one id uniformly.  Unordered pools are sorted first for reproducibility."""
    if isinstance(pool, np.ndarray):
        seq = pool
    elif isinstance(pool, (list, tuple, range)):
        seq = pool
    else:
        seq = sorted(pool)
    if len(seq) == 0:
        raise EmptyPool("cannot choose from an empty pool")
    return int(seq[rng.below(len(seq))])
