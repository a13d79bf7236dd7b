"""Scalar gradient flows of deep linear MAE and JEPA objectives.

Each eigendirection with regression coefficient ``rho`` evolves the balanced
end-to-end weight ``w`` of a depth ``L`` linear network::

    JEPA:  dw/dt = lam * w**(3 - 1/L) - (lam / rho) * w**3   ->  w(inf) = rho**L
    MAE:   dw/dt = lam * w**(2 - 1/L) - (lam / rho) * w**3   ->  w(inf) = rho**(L/(L+1))

Starting from a small ``eps`` both flows sit on a plateau before escaping.
The escape time is the first ``t`` with ``w(t) >= 0.5 * w(inf)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq

OBJECTIVES = ("mae", "jepa")
ESCAPE_FRACTION = 0.5


class FlowLabError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FlowLabSpec:
    depth: int
    rho: float
    eps: float = 1e-3
    objective: str = "jepa"
    lam: float = 1.0
    w0: float | None = None  # overrides eps as the initial value (warm start)
    t_max: float | None = None  # escape-phase horizon; derived when None
    rtol: float = 1e-10
    atol: float = 1e-14
    settle_tol: float = 1e-9  # stop once the linearised distance to the fixed point is this relative size

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if not self.eps > 0 or (self.w0 is not None and not self.w0 > 0):
            raise ValueError("initial value must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    @property
    def initial(self) -> float:
        return self.eps if self.w0 is None else self.w0

    @property
    def growth_exponent(self) -> float:
        L = self.depth
        return 3.0 - 1.0 / L if self.objective == "jepa" else 2.0 - 1.0 / L

    def rhs(self, w):
        return self.lam * (w ** self.growth_exponent - w ** 3 / self.rho)


def closed_form_fixed_point(depth: int, rho: float, objective: str) -> float:
    return rho ** depth if objective == "jepa" else rho ** (depth / (depth + 1))


def leading_escape_time(spec: FlowLabSpec) -> float:
    """Plateau time ``int_eps^inf dw / (lam * w**p)`` with the decay term dropped."""
    q = spec.growth_exponent - 1.0  # (2L-1)/L for JEPA, (L-1)/L for MAE
    return spec.initial ** (-q) / (spec.lam * q)


def numeric_fixed_point(spec: FlowLabSpec) -> float:
    """Positive root of the flow's right-hand side."""
    f = lambda w: w ** (spec.growth_exponent - 3.0) - 1.0 / spec.rho  # rhs / (lam * w**3)
    if spec.rho == 1.0:
        return 1.0
    return brentq(f, 1e-100, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def escape_time_quadrature(spec: FlowLabSpec, w_fix: float | None = None) -> float:
    """Escape time by quadrature of ``dt = dw / f(w)``, integrated in ``log w``."""
    w_fix = numeric_fixed_point(spec) if w_fix is None else w_fix
    target = ESCAPE_FRACTION * w_fix
    if spec.initial >= target:
        return 0.0
    val, _ = quad(lambda s: math.exp(s) / spec.rhs(math.exp(s)),
                  math.log(spec.initial), math.log(target), limit=500,
                  epsabs=0.0, epsrel=1e-11)
    return val


@dataclass
class FlowResult:
    spec: FlowLabSpec
    t: np.ndarray
    w: np.ndarray
    w_fix: float
    escape_time: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def terminal(self) -> float:
        return float(self.w[-1])

    def csv(self) -> str:
        rows = ["t,w"] + [f"{ti!r},{wi!r}" for ti, wi in zip(self.t, self.w)]
        return "\n".join(rows) + "\n"


def _solve(spec, t0, t1, w_start, event):
    sol = solve_ivp(lambda t, y: spec.rhs(y), (t0, t1), [w_start], method="DOP853",
                    rtol=spec.rtol, atol=spec.atol, events=event)
    diag = {"status": int(sol.status), "message": sol.message, "nfev": int(sol.nfev),
            "t_last": float(sol.t[-1]), "w_last": float(sol.y[0, -1])}
    if sol.status < 0 or not np.all(np.isfinite(sol.y)):
        raise FlowLabError("integrator failed", diag)
    return sol, diag


def deep_linear_flow(spec: FlowLabSpec) -> FlowResult:
    """Integrate to the escape event, then on until the flow has settled."""
    w_fix = numeric_fixed_point(spec)
    target = ESCAPE_FRACTION * w_fix
    w_init = spec.initial
    ts, ws = [np.array([0.0])], [np.array([w_init])]
    t_esc, w_esc = 0.0, w_init

    if w_init < target:
        horizon = spec.t_max or 10.0 * leading_escape_time(spec) + 100.0 / spec.lam

        def hit(t, y):
            return y[0] - target
        hit.terminal, hit.direction = True, 1
        sol, diag = _solve(spec, 0.0, horizon, w_init, hit)
        if sol.status != 1:
            raise FlowLabError("no escape within horizon", {**diag, "horizon": horizon})
        t_esc, w_esc = float(sol.t_events[0][0]), float(sol.y_events[0][0][0])
        ts.append(sol.t[1:])
        ws.append(sol.y[0, 1:])

    # settle: |f(w)| / rate estimates the remaining distance to the fixed point
    dw = 1e-6 * w_fix
    rate = abs(spec.rhs(w_fix + dw) - spec.rhs(w_fix - dw)) / (2 * dw)

    def settled(t, y):
        return abs(spec.rhs(y[0])) / rate - spec.settle_tol * abs(y[0])
    settled.terminal, settled.direction = True, -1
    # the collapse from above the fixed point takes about rho / (lam * w_fix**2)
    t_end = t_esc + 100.0 / rate + 100.0 * spec.rho / (spec.lam * w_fix ** 2)
    sol, diag = _solve(spec, t_esc, t_end, w_esc, settled)
    if sol.status != 1:
        raise FlowLabError("flow did not settle", {**diag, "t_end": t_end})
    ts.append(sol.t[1:])
    ws.append(sol.y[0, 1:])
    t, w = np.concatenate(ts), np.concatenate(ws)
    diag.update(rate=rate)
    return FlowResult(spec, t, w, w_fix, t_esc, diag)


def escape_slope(depth: int, rho: float, eps_values, lam: float = 1.0) -> float:
    """Least-squares slope of ``log t*`` against ``log eps`` for the JEPA flow."""
    times = [deep_linear_flow(FlowLabSpec(depth, rho, e, "jepa", lam)).escape_time for e in eps_values]
    return float(np.polyfit(np.log(eps_values), np.log(times), 1)[0])
