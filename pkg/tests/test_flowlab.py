from __future__ import annotations

import math

import numpy as np
import pytest

from streamssm.flowlab import (FlowLabError, FlowLabSpec, closed_form_fixed_point,
                               deep_linear_flow, escape_time_quadrature, leading_escape_time,
                               numeric_fixed_point)


@pytest.mark.parametrize("objective", ["mae", "jepa"])
def test_rho_one_terminal_is_one(objective):
    assert deep_linear_flow(FlowLabSpec(2, 1.0, objective=objective)).terminal == pytest.approx(1.0, abs=1e-9)


def test_worked_example_terminals():
    mae = deep_linear_flow(FlowLabSpec(2, 0.5, objective="mae"))
    jepa = deep_linear_flow(FlowLabSpec(2, 0.5, objective="jepa"))
    assert mae.terminal == pytest.approx(0.5 ** (2 / 3), abs=1e-6)
    assert round(mae.terminal, 4) == 0.6300
    assert jepa.terminal == pytest.approx(0.25, abs=1e-6)


@pytest.mark.parametrize("L", [2, 3, 4])
@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("objective", ["mae", "jepa"])
def test_root_finder_matches_closed_form(L, rho, objective):
    spec = FlowLabSpec(L, rho, objective=objective)
    assert numeric_fixed_point(spec) == pytest.approx(closed_form_fixed_point(L, rho, objective), rel=1e-12)
    assert spec.rhs(closed_form_fixed_point(L, rho, objective)) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("objective", ["mae", "jepa"])
def test_integrated_escape_time_matches_quadrature(objective):
    spec = FlowLabSpec(3, 0.6, eps=1e-3, objective=objective, lam=2.0)
    r = deep_linear_flow(spec)
    assert r.escape_time == pytest.approx(escape_time_quadrature(spec), rel=1e-6)
    # the event lands on the threshold
    i = np.searchsorted(r.t, r.escape_time)
    assert r.w[i] == pytest.approx(0.5 * r.w_fix, rel=1e-6)


def test_leading_term_dominates_for_small_eps():
    gaps = []
    for eps in (1e-4, 1e-6, 1e-8):
        spec = FlowLabSpec(2, 0.5, eps=eps, objective="jepa")
        gaps.append(escape_time_quadrature(spec) / leading_escape_time(spec) - 1.0)
    assert gaps[0] > gaps[1] > gaps[2] > 0 and gaps[2] < 1e-3


def test_trajectory_is_monotone_from_below():
    r = deep_linear_flow(FlowLabSpec(2, 0.7, eps=1e-2, objective="mae"))
    assert np.all(np.diff(r.w) >= -1e-15) and np.all(np.diff(r.t) > 0)
    lines = r.csv().splitlines()
    assert lines[0] == "t,w" and len(lines) == len(r.t) + 1


def test_warm_start_escape_is_bounded():
    for rho in (0.5, 0.1, 0.01):
        w0 = rho ** (2 / 3)
        r = deep_linear_flow(FlowLabSpec(2, rho, objective="jepa", w0=w0))
        # starting above half the fixed point there is no plateau to escape
        assert r.escape_time == 0.0
        assert r.terminal == pytest.approx(rho ** 2, abs=1e-3 * rho ** 2)


def test_spec_validation_and_failure_diagnostics():
    for kw in [dict(depth=1, rho=0.5), dict(depth=2, rho=0.0), dict(depth=2, rho=1.5),
               dict(depth=2, rho=0.5, eps=0.0), dict(depth=2, rho=0.5, objective="vae"),
               dict(depth=2, rho=0.5, lam=-1.0)]:
        with pytest.raises(ValueError):
            FlowLabSpec(**kw)
    with pytest.raises(FlowLabError) as exc:
        deep_linear_flow(FlowLabSpec(2, 0.5, eps=1e-4, t_max=1.0))
    assert exc.value.diagnostics["horizon"] == 1.0 and "t_last" in exc.value.diagnostics


def test_growth_exponents():
    assert FlowLabSpec(2, 0.5, objective="jepa").growth_exponent == 2.5
    assert FlowLabSpec(3, 0.5, objective="mae").growth_exponent == pytest.approx(5 / 3)
    assert math.isclose(leading_escape_time(FlowLabSpec(2, 0.5, eps=1e-2)), (1e-2) ** -1.5 / 1.5)
