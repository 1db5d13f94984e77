from __future__ import annotations

import numpy as np
import pytest

from flowhedge.claims import ClaimSpec, flat_cash, running_fee
from flowhedge.coefficients import Constant
from flowhedge.market import (
    ChainModel,
    CountingChannel,
    MarketSpec,
    MarkLaw,
    Model,
    RiskPremiumModel,
    StateRates,
    inflow,
    outflow,
)


def scalar_market(sigma=0.2, s0=1.0) -> MarketSpec:
    return MarketSpec(1, 0, Constant([[sigma]]), Constant(np.zeros((0, 1))), Constant(np.zeros((0, 0))), [s0], [])


def hidden_premium(z0=0.1, delta=0.3, F=1.0, sigma0=0.05) -> RiskPremiumModel:
    return RiskPremiumModel(Constant([0.0]), Constant([[F]]), Constant([[delta]]), [z0], [[sigma0]])


def trivial_chain() -> ChainModel:
    return ChainModel(1, Constant([[0.0]]), [1.0])


def two_state_chain(up=1.0, down=2.0, x0=(0.5, 0.5)) -> ChainModel:
    return ChainModel(2, Constant([[-up, down], [up, -down]]), list(x0))


def two_factor_model(marked=False) -> Model:
    """One traded asset, one index, hidden 2-d premium, 2-state regime, one fund with A/D flows."""
    mk = MarketSpec(1, 1, Constant([[0.2]]), Constant([[0.1]]), Constant([[0.3]]), [1.0], [0.0])
    rp = RiskPremiumModel(Constant([0.0, 0.0]), Constant(np.eye(2)), Constant(0.3 * np.eye(2)), [0.1, 0.0],
                          0.05 * np.eye(2))
    chans = [
        CountingChannel("A", StateRates([1.0, 3.0]), effect=inflow(0)),
        CountingChannel("D", StateRates([0.5, 2.0]), gate=0, effect=outflow(0)),
    ]
    if marked:
        chans.append(CountingChannel("C", StateRates([0.2, 0.4]), gate=0, effect=outflow(0),
                                     mark=MarkLaw.uniform((1.0, 2.0))))
    return Model(mk, rp, two_state_chain(), chans, (2,))


def fee_claim(queue_weight=0.1, kappa=0.05, entry=0.02, exit_=-0.03) -> ClaimSpec:
    return ClaimSpec(lambda s: s.S[:, 0] + queue_weight * s.Q[:, 0], running_fee(kappa),
                     {"A": flat_cash(entry), "D": flat_cash(exit_)})


@pytest.fixture
def model2():
    return two_factor_model()


# ----------------------------------------------------------- acceptance log

CRITERIA: dict = {}


class Criterion:
    """Collects the checks of one acceptance criterion and logs a single verdict.

    Used as a context manager; an exception inside the block is logged as a
    failure and re-raised.
    """

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.parts: list = []

    def check(self, name: str, ok, detail: str) -> bool:
        self.parts.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def ok(self) -> bool:
        return bool(self.parts) and all(p[1] for p in self.parts)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.parts.append(("error", False, f"{exc_type.__name__}: {exc}"))
        CRITERIA[self.number] = (self.title, self.ok, "; ".join(f"{n} {'ok' if o else 'FAILED'} ({d})"
                                                                    for n, o, d in self.parts))
        if exc is None:
            failed = [p for p in self.parts if not p[1]]
            assert not failed, f"criterion {self.number} failed: {failed}"
        return False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {title} :: {detail}")
