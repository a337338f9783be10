from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import ConfigError

P_OPT = 0.5 + 1.0 / (2.0 * math.sqrt(2.0))
DELTA_MIN = 0.75


@dataclass(frozen=True)
class WseParams:
    """Protocol parameters.

    ``d`` bounds the dishonest receiver's quantum memory dimension and only
    enters the analytic bounds.
    """

    n: int
    mu: float
    delta: float
    eps: float
    d: int = 1

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"must be a positive integer, got {self.n!r}", field="n")
        object.__setattr__(self, "n", int(self.n))
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"test probability must lie in (0, 1), got {self.mu}", field="mu")
        if not DELTA_MIN < self.delta < P_OPT:
            raise ConfigError(
                f"threshold must lie in the open interval (0.75, {P_OPT:.10f}), got {self.delta}",
                field="delta",
            )
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"security parameter must lie in (0, 1), got {self.eps}", field="eps")
        if isinstance(self.d, bool) or int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"memory dimension must be an integer >= 1, got {self.d!r}", field="d")
        object.__setattr__(self, "d", int(self.d))

    @property
    def bob_threshold(self) -> float:
        return self.mu * self.n + math.sqrt(self.n * math.log(1.0 / self.eps) / 2.0)

    def replace(self, **changes) -> "WseParams":
        return WseParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)
