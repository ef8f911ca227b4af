"""Exception hierarchy shared by every scripmon module."""


class ScripError(Exception):
    """Base class for all scripmon errors."""


class RangeError(ScripError, ValueError):
    """A parameter lies outside its admissible range."""


class IrrationalReward(ScripError, ValueError):
    """The detection reward 1/b cannot be represented in integral base units."""


class EmptyPool(ScripError, ValueError):
    """A uniform choice was requested from an empty candidate set."""


class NoEligibleRecipient(ScripError):
    """No agent other than the poster can accept the posting token."""


class NoEligiblePayer(ScripError):
    """No agent other than the monitor can pay the detection reward."""


class StateSpaceTooLarge(ScripError):
    pass


class NotIrreducible(ScripError):
    pass


class Periodic(ScripError):
    pass


class InfeasibleMean(ScripError, ValueError):
    pass


class NoVolunteers(ScripError):
    """The population mass below the threshold is zero."""


class NoFixedPoint(ScripError):
    def __init__(self, k_max: int):
        super().__init__(f"no best-response fixed point at or below k_max={k_max}")
        self.k_max = k_max


class UnknownAgent(ScripError, KeyError):
    pass


class ZeroAverage(ScripError, ValueError):
    pass


class InfeasibleInit(ScripError, ValueError):
    pass


class NeverConverged(ScripError):
    def __init__(self, horizon: int):
        super().__init__(f"distance never settled below tolerance within {horizon} rounds")
        self.horizon = horizon
