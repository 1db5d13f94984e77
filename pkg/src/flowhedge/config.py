"""TOML experiment configs.

Units: rates are per year, times in years. Every block is validated before
anything is simulated; errors carry the dotted path of the offending field,
e.g. ``channels[1].gate``.

Schema
------
``[run]``
    ``pipeline`` (simulate | filter | riccati | price | hedge | value |
    compare-policies), ``seed``, ``threads`` (default 1), ``horizon``,
    ``step``, ``paths``, ``train_paths`` (default ``paths``), ``out``
    (default ``"out"``).
``[market]``
    ``d``, ``m``, ``s0``, ``y0``, and coefficients ``sigma`` (d x d),
    ``sigma_bar`` (m x d), ``rho`` (m x m).
``[premium]``
    ``mu`` (n), ``F`` (n x n), ``delta`` (n x n), ``z0``, ``Sigma0``;
    ``n = d + m``.
``[chain]``
    ``generator`` (N x N, entry ``[i, j]`` is the rate of ``j -> i``), ``x0``.
``[funds]``
    ``names`` and ``q0`` (initial units per fund).
``[[channels]]``
    ``name``, ``intensity``, optional ``effect`` (none | inflow | outflow |
    transfer), ``fund``, ``to``, ``gate`` and ``mark``.
``[insurance]``
    ``fund``, ``[[insurance.grades]]`` (``index``, ``support``,
    ``intensity``, optional ``law``/``rate``) and ``[insurance.loss]``
    (``scale``, ``deductible``, ``cap``): payout ``scale * min((x - deductible)+, cap)``.
``[network]``
    Per-fund tables ``inflows``, ``outflows`` and ``kappa``/``e``/``g`` keyed by
    fund name; arrays ``[[network.switches]]`` (``from``, ``to``,
    ``intensity``, ``fee``) and ``[[network.losses]]`` (``fund``,
    ``intensity``, ``mark``, ``scale``); ``switch_fee_sign``.
``[claim]``
    Terminal payoff ``constant + price . S_T + sum(queue[f] * Q_T[f])``;
    ``running`` (fund -> charge per unit and year), ``event_cash`` (channel ->
    amount per event), ``losses`` (include insured payouts, default true).
``[[policies]]``
    ``name`` plus ``running`` and/or ``event_cash`` overriding the claim's.
``[value]``
    ``w_grid`` as a list or ``{start, stop, num}``.
``[hedge]``
    ``scale`` (default 1), ``bins`` (default 40), ``anchor_paths``.

Coefficients are given as a bare array (constant) or a table
``{form = "constant" | "affine" | "log-linear", value, slope, on, rate}``.
Intensities are a bare per-state array or
``{form = "state" | "log-linear", rates, b_s, b_y, b_q, b_c}``; ``b_q`` and
``b_c`` are keyed by fund and channel name. Marks are
``{law = "uniform" | "exponential", support, rate}``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import tomli

from .claims import ClaimSpec
from .coefficients import FORMS
from .errors import ConfigInvalid
from .insurance import LossSpec, SeverityGrade, check_disjoint
from .market import (
    NO_EFFECT,
    ChainModel,
    CountingChannel,
    LogLinearRates,
    MarketSpec,
    MarkLaw,
    Model,
    RiskPremiumModel,
    StateRates,
    check_generator,
    inflow,
    outflow,
    transfer,
)
from .network import NetworkSpec

PIPELINES = ("simulate", "filter", "riccati", "price", "hedge", "value", "compare-policies")


class _Block:
    """A config table that remembers which keys were read, so leftovers can be rejected."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigInvalid(path, "expected a table")
        self.data = data
        self.path = path
        self.used: set = set()

    def sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default=...):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigInvalid(self.sub(key), "missing required field")
            return default
        return self.data[key]

    def num(self, key: str, default=..., positive=False, nonneg=False) -> float:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigInvalid(self.sub(key), "expected a number")
        v = float(v)
        if not math.isfinite(v) and not (key == "cap" and v == math.inf):
            raise ConfigInvalid(self.sub(key), "must be finite")
        if positive and not v > 0:
            raise ConfigInvalid(self.sub(key), "must be > 0")
        if nonneg and v < 0:
            raise ConfigInvalid(self.sub(key), "must be >= 0")
        return v

    def int(self, key: str, default=..., minimum: Optional[int] = None) -> int:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigInvalid(self.sub(key), "expected an integer")
        if minimum is not None and v < minimum:
            raise ConfigInvalid(self.sub(key), f"must be >= {minimum}")
        return v

    def str(self, key: str, default=..., choices=None) -> str:
        v = self.raw(key, default)
        if not isinstance(v, str):
            raise ConfigInvalid(self.sub(key), "expected a string")
        if choices is not None and v not in choices:
            raise ConfigInvalid(self.sub(key), f"must be one of {', '.join(choices)}")
        return v

    def array(self, key: str, shape=None, default=...) -> np.ndarray:
        return _as_array(self.raw(key, default), self.sub(key), shape)

    def block(self, key: str, default=...) -> "_Block":
        v = self.raw(key, default)
        return _Block({} if v is None else v, self.sub(key))

    def blocks(self, key: str) -> list:
        v = self.raw(key, [])
        if not isinstance(v, list):
            raise ConfigInvalid(self.sub(key), "expected an array of tables")
        return [_Block(x, f"{self.sub(key)}[{i}]") for i, x in enumerate(v)]

    def done(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigInvalid(self.sub(extra[0]), "unknown field")


def _as_array(v, path: str, shape=None) -> np.ndarray:
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigInvalid(path, "expected a numeric array") from None
    if not np.all(np.isfinite(a)):
        raise ConfigInvalid(path, "entries must be finite")
    if shape is not None:
        if a.size != int(np.prod(shape)):
            raise ConfigInvalid(path, f"expected shape {tuple(shape)}, got {a.shape}")
        a = a.reshape(shape)
    return a


# ------------------------------------------------------------ model pieces


def _coefficient(v, path: str, shape, state: bool):
    """Build a coefficient from a bare array or a ``{form = ...}`` table."""
    if not isinstance(v, dict):
        return FORMS["constant"](_as_array(v, path, shape))
    b = _Block(v, path)
    form = b.str("form", choices=tuple(FORMS))
    value = b.array("value", shape)
    if form == "constant":
        out = FORMS[form](value)
    elif form == "affine":
        out = FORMS[form](value, b.array("slope", shape))
    else:
        on = b.str("on", "s", choices=("s", "y"))
        if state and len(shape) != 2:
            raise ConfigInvalid(path, "log-linear needs a matrix coefficient")
        out = FORMS[form](value, on, b.num("rate", 0.0))
    b.done()
    return out


@dataclass
class _Names:
    funds: list
    channels: list = field(default_factory=list)

    def fund(self, v, path: str) -> int:
        if isinstance(v, str) and v in self.funds:
            return self.funds.index(v)
        if isinstance(v, int) and not isinstance(v, bool) and 0 <= v < len(self.funds):
            return v
        raise ConfigInvalid(path, f"undeclared fund {v!r}")


def _intensity(v, path: str, N: int, names: _Names):
    if not isinstance(v, dict):
        return StateRates(_nonneg(_as_array(v, path, (N,)), path))
    b = _Block(v, path)
    form = b.str("form", "state", choices=("state", "log-linear"))
    rates = _nonneg(b.array("rates", (N,)), b.sub("rates"))
    if form == "state":
        b.done()
        return StateRates(rates)
    kw = {}
    for key, labels in (("b_q", names.funds), ("b_c", names.channels)):
        if b.has(key):
            tbl = b.block(key)
            vec = np.zeros(len(labels))
            for k in tbl.data:
                if k not in labels:
                    raise ConfigInvalid(tbl.sub(k), f"undeclared {'fund' if key == 'b_q' else 'channel'} {k!r}")
                vec[labels.index(k)] = tbl.num(k)
            tbl.done()
            kw[key] = vec
    for key in ("b_s", "b_y"):
        if b.has(key):
            kw[key] = b.array(key)
    b.done()
    return LogLinearRates(rates, **kw)


def _nonneg(a: np.ndarray, path: str) -> np.ndarray:
    if np.any(a < 0):
        raise ConfigInvalid(path, "intensities must be >= 0")
    return a


def _mark(v, path: str) -> MarkLaw:
    b = _Block(v, path)
    law = b.str("law", "uniform", choices=("uniform", "exponential"))
    sup = b.array("support", (2,))
    if not sup[0] < sup[1]:
        raise ConfigInvalid(b.sub("support"), "need lo < hi")
    out = MarkLaw.uniform(tuple(sup)) if law == "uniform" else MarkLaw.truncated_exponential(
        tuple(sup), b.num("rate", positive=True))
    b.done()
    return out


def _channel(b: _Block, N: int, names: _Names) -> CountingChannel:
    name = b.str("name")
    effect = b.str("effect", "none", choices=("none", "inflow", "outflow", "transfer"))
    eff = NO_EFFECT
    gate = None
    if b.has("gate"):
        gate = names.fund(b.raw("gate"), b.sub("gate"))
    if effect != "none":
        f = names.fund(b.raw("fund"), b.sub("fund"))
        if effect == "inflow":
            eff = inflow(f)
        elif effect == "outflow":
            eff = outflow(f)
        else:
            eff = transfer(f, names.fund(b.raw("to"), b.sub("to")))
        if effect != "inflow":
            if gate is not None and gate != f:
                raise ConfigInvalid(b.sub("gate"), "a channel that removes units must be gated on its source fund")
            gate = f
    mark = _mark(b.raw("mark"), b.sub("mark")) if b.has("mark") else None
    lam = _intensity(b.raw("intensity"), b.sub("intensity"), N, names)
    b.done()
    return CountingChannel(name, lam, gate, eff, mark)


# ------------------------------------------------------------------ config


@dataclass
class RunOptions:
    pipeline: str
    seed: int
    threads: int
    horizon: float
    step: float
    paths: int
    train_paths: int
    out: str


@dataclass
class ExperimentConfig:
    """Validated experiment: the model, the claim, the policies and run options."""

    run: RunOptions
    model: Model
    claim: ClaimSpec
    policies: list
    w_grid: np.ndarray
    grades: list = field(default_factory=list)
    loss: Optional[LossSpec] = None
    network: Optional[NetworkSpec] = None
    hedge_scale: float = 1.0
    hist_bins: int = 40
    anchor_paths: Optional[int] = None
    digest: str = ""


def load(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        text = fh.read()
    return loads(text.decode("utf-8"))


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigInvalid("<document>", str(exc)) from None
    cfg = parse(data)
    cfg.digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return cfg


def parse(data: dict) -> ExperimentConfig:
    top = _Block(data, "")
    run = _run_options(top.block("run"))

    mk = top.block("market")
    d = mk.int("d", minimum=1)
    m = mk.int("m", 0, minimum=0)
    market = MarketSpec(
        d, m,
        _coefficient(mk.raw("sigma"), mk.sub("sigma"), (d, d), True),
        _coefficient(mk.raw("sigma_bar", np.zeros((m, d))), mk.sub("sigma_bar"), (m, d), True),
        _coefficient(mk.raw("rho", np.zeros((m, m))), mk.sub("rho"), (m, m), True),
        mk.array("s0", (d,)),
        mk.array("y0", (m,), np.zeros(m)),
    )
    mk.done()

    n = d + m
    pr = top.block("premium")
    mu = _coefficient(pr.raw("mu", np.zeros(n)), pr.sub("mu"), (n,), False)
    F = _coefficient(pr.raw("F", np.zeros((n, n))), pr.sub("F"), (n, n), False)
    delta = _coefficient(pr.raw("delta"), pr.sub("delta"), (n, n), False)
    z0 = pr.array("z0", (n,))
    S0 = pr.array("Sigma0", (n, n), np.zeros((n, n)))
    try:
        premium = RiskPremiumModel(mu, F, delta, z0, S0)
    except ValueError as exc:
        raise ConfigInvalid(pr.sub("Sigma0"), str(exc)) from None
    pr.done()

    ch = top.block("chain", {"generator": [[0.0]], "x0": [1.0]})
    gen_raw = ch.raw("generator")
    N = int(np.array(gen_raw if not isinstance(gen_raw, dict) else gen_raw.get("value", [[0]]), float).shape[0])
    gen = _coefficient(gen_raw, ch.sub("generator"), (N, N), False)
    try:
        check_generator(np.asarray(gen(0.0), float))
        chain = ChainModel(N, gen, ch.array("x0", (N,)))
    except ValueError as exc:
        raise ConfigInvalid(ch.sub("generator"), str(exc)) from None
    ch.done()

    fb = top.block("funds", {"names": [], "q0": []})
    fund_names = fb.raw("names")
    if not isinstance(fund_names, list) or not all(isinstance(x, str) for x in fund_names):
        raise ConfigInvalid(fb.sub("names"), "expected a list of strings")
    if len(set(fund_names)) != len(fund_names):
        raise ConfigInvalid(fb.sub("names"), "fund names must be unique")
    q0 = fb.raw("q0")
    if (not isinstance(q0, list) or len(q0) != len(fund_names)
            or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in q0)):
        raise ConfigInvalid(fb.sub("q0"), "expected one nonnegative integer per fund")
    fb.done()

    names = _Names(list(fund_names))
    chan_blocks = top.blocks("channels")
    # names first, so log-linear intensities may refer to any channel
    for cb in chan_blocks:
        names.channels.append(cb.data.get("name"))
    channels = []
    for cb in chan_blocks:
        channels.append(_channel(cb, N, names))

    grades, loss = [], None
    if top.has("insurance"):
        grades, loss, fund = _insurance(top.block("insurance"), N, names)
        channels += [g.channel(fund) for g in grades]

    network = None
    if top.has("network"):
        network = _network(top.block("network"), N, names, len(fund_names), q0)
        channels += network.channels()

    seen = {}
    for i, c in enumerate(channels):
        if c.name in seen:
            raise ConfigInvalid(f"channels[{i}].name", f"duplicate channel name {c.name!r}")
        seen[c.name] = i
    names.channels = [c.name for c in channels]

    try:
        model = Model(market, premium, chain, tuple(channels), tuple(q0), tuple(fund_names))
    except ValueError as exc:
        raise ConfigInvalid("channels", str(exc)) from None

    claim_blk = top.block("claim", {})
    base = _ClaimParts.parse(claim_blk, model, names, grades, loss, network)
    claim_blk.done()
    policies = []
    pol_names = set()
    for pb in top.blocks("policies"):
        name = pb.str("name")
        if name in pol_names:
            raise ConfigInvalid(pb.sub("name"), f"duplicate policy {name!r}")
        pol_names.add(name)
        policies.append((name, base.override(pb, names).claim()))
        pb.done()

    vb = top.block("value", {})
    w_grid = _w_grid(vb.raw("w_grid", {"start": -2.0, "stop": 2.0, "num": 41}), vb.sub("w_grid"))
    vb.done()

    hb = top.block("hedge", {})
    scale = hb.num("scale", 1.0)
    bins = hb.int("bins", 40, minimum=1)
    anchor = hb.int("anchor_paths", None, minimum=2) if hb.has("anchor_paths") else None
    hb.done()
    top.done()
    return ExperimentConfig(run, model, base.claim(), policies, w_grid, grades, loss, network, scale, bins, anchor)


def _run_options(b: _Block) -> RunOptions:
    pipeline = b.str("pipeline", "simulate", choices=PIPELINES)
    seed = b.int("seed", 0, minimum=0)
    threads = b.int("threads", 1, minimum=1)
    horizon = b.num("horizon", positive=True)
    step = b.num("step", positive=True)
    if step > horizon:
        raise ConfigInvalid(b.sub("step"), "step exceeds horizon")
    ratio = horizon / step
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ConfigInvalid(b.sub("step"), "horizon must be a whole number of steps")
    paths = b.int("paths", 1000, minimum=1)
    train = b.int("train_paths", paths, minimum=1)
    out = b.str("out", "out")
    b.done()
    return RunOptions(pipeline, seed, threads, horizon, step, paths, train, out)


def _w_grid(v, path: str) -> np.ndarray:
    if isinstance(v, dict):
        b = _Block(v, path)
        lo, hi, num = b.num("start"), b.num("stop"), b.int("num", minimum=2)
        b.done()
        if not lo < hi:
            raise ConfigInvalid(path, "need start < stop")
        return np.linspace(lo, hi, num)
    a = _as_array(v, path)
    if a.ndim != 1 or a.size < 1:
        raise ConfigInvalid(path, "expected a nonempty list")
    return a


def _insurance(b: _Block, N: int, names: _Names):
    fund = names.fund(b.raw("fund", 0), b.sub("fund"))
    grades = []
    for gb in b.blocks("grades"):
        idx = gb.int("index", minimum=1)
        sup = gb.array("support", (2,))
        if not 0 < sup[0] < sup[1]:
            raise ConfigInvalid(gb.sub("support"), "need 0 < lo < hi")
        law = gb.str("law", "uniform", choices=("uniform", "exponential"))
        if law == "uniform":
            dens = _uniform_density
        else:
            rate = gb.num("rate", positive=True)
            dens = _ExpDensity(rate)
        lam = _intensity(gb.raw("intensity"), gb.sub("intensity"), N, names)
        grades.append(SeverityGrade(idx, tuple(float(x) for x in sup), dens, lam))
        gb.done()
    if len({g.index for g in grades}) != len(grades):
        raise ConfigInvalid(b.sub("grades"), "grade indices must be unique")
    try:
        check_disjoint(grades)
    except ValueError as exc:
        raise ConfigInvalid(b.sub("grades"), str(exc)) from None
    lb = b.block("loss", {})
    loss = LossSpec(Payout(lb.num("scale", 1.0, nonneg=True), lb.num("deductible", 0.0, nonneg=True),
                           lb.num("cap", math.inf, positive=True)))
    lb.done()
    b.done()
    return grades, loss, fund


def _uniform_density(t, x):
    return np.ones_like(np.asarray(x, float))


@dataclass(frozen=True)
class _ExpDensity:
    rate: float

    def __call__(self, t, x):
        return np.exp(-self.rate * np.asarray(x, float))


@dataclass(frozen=True)
class Payout:
    """``scale * min((x - deductible)+, cap)``."""

    scale: float = 1.0
    deductible: float = 0.0
    cap: float = math.inf

    def __call__(self, t, x):
        x = np.asarray(x, float)
        return self.scale * np.minimum(np.maximum(x - self.deductible, 0.0), self.cap)


def _per_fund(b: _Block, key: str, names: _Names, fn) -> dict:
    out = {}
    if not b.has(key):
        return out
    tbl = b.block(key)
    for k in tbl.data:
        i = names.fund(k, tbl.sub(k))
        out[i] = fn(tbl, k)
    tbl.done()
    return out


def _network(b: _Block, N: int, names: _Names, n_p: int, q0) -> NetworkSpec:
    def lam(tbl, k):
        tbl.used.add(k)
        return _intensity(tbl.data[k], tbl.sub(k), N, names)

    def num(tbl, k):
        return tbl.num(k, nonneg=True)

    inflows = _per_fund(b, "inflows", names, lam)
    outflows = _per_fund(b, "outflows", names, lam)
    kappa = _per_fund(b, "kappa", names, lambda t, k: t.num(k))
    e = _per_fund(b, "e", names, num)
    g = _per_fund(b, "g", names, num)
    switches, fees = {}, {}
    for sb in b.blocks("switches"):
        ij = (names.fund(sb.raw("from"), sb.sub("from")), names.fund(sb.raw("to"), sb.sub("to")))
        if ij in switches:
            raise ConfigInvalid(sb.sub("to"), f"duplicate switch {ij}")
        switches[ij] = _intensity(sb.raw("intensity"), sb.sub("intensity"), N, names)
        if sb.has("fee"):
            fees[ij] = sb.num("fee", nonneg=True)
        sb.done()
    losses = {}
    for lb in b.blocks("losses"):
        i = names.fund(lb.raw("fund"), lb.sub("fund"))
        if i in losses:
            raise ConfigInvalid(lb.sub("fund"), "one loss stream per fund")
        mark = _mark(lb.raw("mark"), lb.sub("mark"))
        pay = Payout(lb.num("scale", 1.0, nonneg=True), lb.num("deductible", 0.0, nonneg=True))
        losses[i] = (_intensity(lb.raw("intensity"), lb.sub("intensity"), N, names), mark, pay)
        lb.done()
    sign = b.num("switch_fee_sign", -1.0)
    b.done()
    return NetworkSpec(n_p, tuple(q0), inflows, outflows, switches, losses, kappa, e, g, fees, sign)


# ------------------------------------------------------------------- claim


@dataclass(frozen=True)
class LinearPayoff:
    constant: float
    price: np.ndarray
    queue: np.ndarray

    def __call__(self, snap):
        out = np.full(snap.P, self.constant)
        if self.price.size:
            out = out + snap.S @ self.price
        if self.queue.size:
            out = out + snap.Q.astype(float) @ self.queue
        return out


@dataclass(frozen=True)
class RunningCharge:
    kappa: np.ndarray

    def __call__(self, t, snap):
        return snap.Q.astype(float) @ self.kappa


@dataclass(frozen=True)
class FlatCash:
    amount: float

    def __call__(self, t, snap, x):
        return np.full(snap.P, self.amount)


@dataclass
class _ClaimParts:
    payoff: LinearPayoff
    running: np.ndarray
    event_cash: dict
    fixed_cash: dict

    @classmethod
    def parse(cls, b: _Block, model: Model, names: _Names, grades, loss, network) -> "_ClaimParts":
        d, F = model.market.d, model.F
        const = b.num("constant", 0.0)
        price = b.array("price", (d,), np.zeros(d))
        queue = np.zeros(F)
        if b.has("queue"):
            qb = b.block("queue")
            for k in qb.data:
                queue[names.fund(k, qb.sub(k))] = qb.num(k)
            qb.done()
        parts = cls(LinearPayoff(const, price, queue), np.zeros(F), {}, {})
        parts._read_flows(b, names)
        fixed = {}
        if network is not None:
            net = network.claim(parts.payoff)
            fixed.update(net.event_cash)
            if net.running is not None:
                parts.running = parts.running + np.array([network.kappa.get(i, 0.0) for i in range(F)])
        if b.raw("losses", True) and loss is not None:
            for g in grades:
                fixed[g.name] = loss.cash()
        parts.fixed_cash = fixed
        return parts

    def _read_flows(self, b: _Block, names: _Names) -> None:
        if b.has("running"):
            rb = b.block("running")
            kap = np.zeros_like(self.running)
            for k in rb.data:
                kap[names.fund(k, rb.sub(k))] = rb.num(k)
            rb.done()
            self.running = kap
        if b.has("event_cash"):
            eb = b.block("event_cash")
            cash = {}
            for k in eb.data:
                if k not in names.channels:
                    raise ConfigInvalid(eb.sub(k), f"undeclared channel {k!r}")
                cash[k] = eb.num(k)
            eb.done()
            self.event_cash = cash

    def override(self, b: _Block, names: _Names) -> "_ClaimParts":
        out = _ClaimParts(self.payoff, self.running.copy(), dict(self.event_cash), self.fixed_cash)
        out._read_flows(b, names)
        return out

    def claim(self) -> ClaimSpec:
        cash = dict(self.fixed_cash)
        for k, v in self.event_cash.items():
            cash[k] = FlatCash(v) if k not in cash else _Sum(cash[k], FlatCash(v))
        running = RunningCharge(self.running) if np.any(self.running) else None
        return ClaimSpec(self.payoff, running, cash)


@dataclass(frozen=True)
class _Sum:
    a: Any
    b: Any

    def __call__(self, t, snap, x):
        return self.a(t, snap, x) + self.b(t, snap, x)
