"""Named parametric forms for model coefficients.

Two call conventions are used across the package:

* time coefficients (mu, F, delta, generator): ``f(t) -> ndarray``
* state coefficients (sigma, sigma_bar, rho): ``f(t, S, Y) -> ndarray`` of
  shape ``(P, rows, cols)`` for ``P`` paths.

Any callable with the right convention may be used in place of these classes;
the registry below exists so that configs can name a form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _arr(x) -> np.ndarray:
    return np.array(x, dtype=float)


@dataclass(frozen=True)
class Constant:
    value: np.ndarray
    constant: bool = field(default=True, init=False)

    def __post_init__(self):
        object.__setattr__(self, "value", _arr(self.value))

    def __call__(self, t, S=None, Y=None):
        if S is None:
            return self.value
        return np.broadcast_to(self.value, (S.shape[0],) + self.value.shape)


@dataclass(frozen=True)
class Affine:
    """``value + slope * t``."""

    value: np.ndarray
    slope: np.ndarray
    constant: bool = field(default=False, init=False)

    def __post_init__(self):
        object.__setattr__(self, "value", _arr(self.value))
        object.__setattr__(self, "slope", _arr(self.slope))

    def __call__(self, t, S=None, Y=None):
        out = self.value + self.slope * float(t)
        if S is None:
            return out
        return np.broadcast_to(out, (S.shape[0],) + out.shape)


@dataclass(frozen=True)
class LogLinear:
    """Level-proportional coefficient.

    As a state coefficient, row ``i`` is multiplied by the current level of the
    process it drives (``on="s"`` for sigma, ``on="y"`` for sigma_bar and rho),
    which gives lognormal dynamics. As a time coefficient it is
    ``value * exp(rate * t)``.
    """

    value: np.ndarray
    on: str = "s"
    rate: float = 0.0
    constant: bool = field(default=False, init=False)

    def __post_init__(self):
        object.__setattr__(self, "value", _arr(self.value))
        if self.on not in ("s", "y"):
            raise ValueError("on must be 's' or 'y'")

    def __call__(self, t, S=None, Y=None):
        if S is None:
            return self.value * np.exp(self.rate * float(t))
        level = S if self.on == "s" else Y
        return self.value[None, :, :] * level[:, :, None]


FORMS = {"constant": Constant, "affine": Affine, "log-linear": LogLinear}


def is_constant(f) -> bool:
    return bool(getattr(f, "constant", False))
