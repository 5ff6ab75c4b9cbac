"""Tests for the discretized selective state-space scan.

Oracles used here:
  * the analytic solution of h' = -h + x for constant x (ZOH reproduces the
    continuous solution exactly for piecewise-constant input);
  * hand-evaluated ZOH factors and a geometric-series recurrence;
  * a deliberately slow per-step scalar reference implementation in float64;
  * central finite differences for every gradient.
"""

import math

import numpy as np
import pytest

from scst.core import NonFiniteValueError, Rng, finite_diff_grad, gradient_rel_error
from scst.ssm import (
    SelectiveInputs,
    SelectiveProj,
    SsmParams,
    discretize_zoh,
    init_ssm_params,
    make_selective_inputs,
    scan_parallel,
    scan_sequential,
    selective_scan,
    sigmoid,
    softplus,
    ssm_backward,
    _forward_batched,
    _input_factor,
)


def constant_inputs(L, n, b, c, delta):
    return SelectiveInputs(
        b=np.tile(np.asarray(b, dtype=np.float64), (L, 1)),
        c=np.tile(np.asarray(c, dtype=np.float64), (L, 1)),
        delta=np.full(L, delta, dtype=np.float64),
    )


def reference_selective_scan(params, proj, x, h0=None):
    """Independent scalar implementation: explicit loops, float64 math."""
    x = np.asarray(x, dtype=np.float64)
    n = params.n
    h = list(np.zeros(n) if h0 is None else np.asarray(h0, dtype=np.float64))
    y = np.zeros(x.shape[0])
    for t, xt in enumerate(x):
        dpre = float(proj.wd) * xt + float(params.delta_bias)
        delta = math.log1p(math.exp(dpre)) if dpre <= 30 else dpre
        acc = 0.0
        for i in range(n):
            a = float(params.a[i])
            bt = float(params.b_static[i]) + float(proj.wb[i]) * xt
            ct = float(params.c_static[i]) + float(proj.wc[i]) * xt
            z = delta * a
            abar = math.exp(z)
            if abs(z) < 1e-4:
                bbar = delta * (1.0 + z / 2.0 + z * z / 6.0) * bt
            else:
                bbar = math.expm1(z) / a * bt
            h[i] = abar * h[i] + bbar * xt
            acc += ct * h[i]
        y[t] = acc + float(params.d) * xt
    return y


# ---------------------------------------------------------------------------
# ZOH discretization
# ---------------------------------------------------------------------------


def test_zoh_closed_form():
    abar, bbar = discretize_zoh(np.array([-1.0]), np.array([1.0]), 0.1)
    assert abs(abar[0] - 0.9048374180359595) < 1e-12
    assert abs(bbar[0] - 0.09516258196404048) < 1e-12


def test_zoh_zero_delta():
    abar, bbar = discretize_zoh(np.array([-1.0, -2.5]), np.array([1.0, 3.0]), 0.0)
    assert np.all(abar == 1.0)
    assert np.all(bbar == 0.0)


def test_zoh_negative_delta_rejected():
    with pytest.raises(ValueError):
        discretize_zoh(np.array([-1.0]), np.array([1.0]), -0.1)


def test_zoh_nonfinite_rejected():
    with pytest.raises(NonFiniteValueError):
        discretize_zoh(np.array([np.nan]), np.array([1.0]), 0.1)


def test_taylor_branch_matches_exact_at_threshold():
    # the series and exact formulas must agree to ~1e-12 around the switch
    delta = 1.0
    for scale in (0.2, 0.9, 0.999, 1.001, 1.5, 3.0):
        a = np.array([1e-4 * scale, -1e-4 * scale])
        z = delta * a
        exact = np.expm1(z) / a
        series = delta * (1.0 + z / 2.0 + z * z / 6.0)
        # leading truncation term is z^3/24 ~ 1.1e-12 at |z| = 3e-4
        assert np.max(np.abs(exact - series)) < 5e-12
        got = _input_factor(a, z, delta)
        assert np.max(np.abs(got - exact)) < 5e-12


def test_softplus_sigmoid_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    sp = softplus(x)
    sg = sigmoid(x)
    assert np.all(np.isfinite(sp)) and np.all(np.isfinite(sg))
    assert sp[0] == 0.0 and abs(sp[2] - math.log(2.0)) < 1e-12 and sp[4] == 800.0
    assert sg[2] == 0.5 and sg[0] < 1e-100 and sg[4] == 1.0


# ---------------------------------------------------------------------------
# Scan values against analytic oracles
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
def test_first_order_lowpass_matches_ode_solution(scan):
    # h' = -h + 1, h(0) = 0  =>  h(t) = 1 - e^{-t}; ZOH sampling is exact
    params = SsmParams(np.array([-1.0]), np.array([1.0]), np.array([1.0]),
                       d=0.0, delta_bias=0.0)
    L = 50
    sel = constant_inputs(L, 1, [1.0], [1.0], 0.1)
    y, h_final = scan(params, sel, np.ones(L, dtype=np.float64))
    k = np.arange(1, L + 1)
    expected = 1.0 - np.exp(-0.1 * k)
    assert np.max(np.abs(y - expected)) < 1e-6
    assert abs(h_final - expected[-1]) < 1e-9


@pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
def test_geometric_series_state(scan):
    # abar = 1/2 and bbar*x = 1 give h_k = 2 - 2^{-(k-1)}; h_4 = 1.875
    delta = 1.0
    a = math.log(0.5)
    b = a / (0.5 - 1.0)  # makes bbar = ((abar - 1)/a) * b = 1
    params = SsmParams(np.array([a]), np.array([b]), np.array([1.0]),
                       d=0.0, delta_bias=0.0)
    sel = constant_inputs(4, 1, [b], [1.0], delta)
    y, h_final = scan(params, sel, np.ones(4, dtype=np.float64))
    assert np.max(np.abs(y - np.array([1.0, 1.5, 1.75, 1.875]))) < 1e-9
    assert abs(h_final - 1.875) < 1e-6


def test_state_carry_across_segments():
    rng = Rng(11)
    params, proj = init_ssm_params(rng, 4, dtype=np.float64)
    x = rng.normal((32,))
    sel = make_selective_inputs(params, proj, x)
    y_full, h_full = scan_sequential(params, sel, x)
    sel_a = SelectiveInputs(sel.b[:20], sel.c[:20], sel.delta[:20])
    sel_b = SelectiveInputs(sel.b[20:], sel.c[20:], sel.delta[20:])
    y_a, h_mid = scan_sequential(params, sel_a, x[:20])
    y_b, h_end = scan_sequential(params, sel_b, x[20:], h0=h_mid)
    assert np.allclose(np.concatenate([y_a, y_b]), y_full, atol=1e-12)
    assert np.allclose(h_end, h_full, atol=1e-12)


# ---------------------------------------------------------------------------
# Engine agreement and the selective path
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("L", [1, 2, 3, 16, 257, 1024])
def test_sequential_vs_parallel_agreement(L):
    rng = Rng(100 + L)
    params, proj = init_ssm_params(rng, 8)
    x = rng.normal((L,)).astype(np.float32)
    sel = make_selective_inputs(params, proj, x)
    y_seq, hs = scan_sequential(params, sel, x)
    y_par, hp = scan_parallel(params, sel, x)
    assert np.max(np.abs(y_seq - y_par)) < 1e-5
    assert np.max(np.abs(hs - hp)) < 1e-5


@pytest.mark.parametrize("engine", ["sequential", "parallel"])
@pytest.mark.parametrize("L", [1, 2, 5, 33, 128])
def test_selective_scan_matches_scalar_reference(engine, L):
    rng = Rng(7000 + L)
    params, proj = init_ssm_params(rng, 5, dtype=np.float64)
    x = rng.normal((L,))
    y = selective_scan(params, proj, x, engine=engine)
    ref = reference_selective_scan(params, proj, x)
    assert gradient_rel_error(y, ref) < 1e-10


def test_selective_scan_with_initial_state():
    rng = Rng(77)
    params, proj = init_ssm_params(rng, 3, dtype=np.float64)
    x = rng.normal((17,))
    h0 = rng.normal((3,))
    y = selective_scan(params, proj, x, h0=h0)
    ref = reference_selective_scan(params, proj, x, h0=h0)
    assert np.max(np.abs(y - ref)) < 1e-10


def test_selective_scan_equals_manual_composition():
    rng = Rng(5)
    params, proj = init_ssm_params(rng, 6, dtype=np.float64)
    x = rng.normal((40,))
    sel = make_selective_inputs(params, proj, x)
    y_manual, _ = scan_sequential(params, sel, x)
    y = selective_scan(params, proj, x, engine="sequential")
    assert np.max(np.abs(y - y_manual)) < 1e-12


def test_unknown_engine_rejected():
    params, proj = init_ssm_params(Rng(1), 2)
    with pytest.raises(ValueError):
        selective_scan(params, proj, np.ones(4), engine="quantum")


def test_nan_input_reported():
    params, proj = init_ssm_params(Rng(1), 2, dtype=np.float64)
    x = np.ones(8)
    x[3] = np.nan
    with pytest.raises(NonFiniteValueError):
        selective_scan(params, proj, x)


def test_negative_delta_in_inputs_rejected():
    params, _ = init_ssm_params(Rng(2), 2, dtype=np.float64)
    sel = constant_inputs(4, 2, [1.0, 1.0], [1.0, 1.0], 0.1)
    sel.delta[2] = -0.5
    with pytest.raises(ValueError):
        scan_sequential(params, sel, np.ones(4))


def test_state_bounded_for_decaying_dynamics():
    # |h_t| <= |h0| + max|bbar*x| / (1 - max abar) whenever all a < 0
    rng = Rng(909)
    for trial in range(20):
        params, proj = init_ssm_params(rng.spawn(trial), 6, dtype=np.float64)
        x = rng.normal((64,)) * 2.0
        _, ctx = _forward_batched(params, proj, x[None], engine="sequential")
        h = ctx["h"][0]
        abar_max = ctx["abar"].max()
        assert abar_max < 1.0
        drive = np.abs(ctx["bbar"][0] * x[:, None]).max()
        bound = drive / (1.0 - abar_max) + 1e-9
        assert np.abs(h).max() <= bound


def test_float32_inputs_stay_float32():
    params, proj = init_ssm_params(Rng(3), 4)
    x = Rng(4).normal((16,)).astype(np.float32)
    assert selective_scan(params, proj, x).dtype == np.float32
    sel = make_selective_inputs(params, proj, x)
    y, _ = scan_sequential(params, sel, x)
    assert y.dtype == np.float32


# ---------------------------------------------------------------------------
# Gradients against finite differences
# ---------------------------------------------------------------------------


def _fd_case(seed=42, n=3, L=9):
    rng = Rng(seed)
    params, proj = init_ssm_params(rng, n, dtype=np.float64)
    x = rng.normal((L,))
    g = rng.normal((L,))
    h0 = rng.normal((n,)) * 0.3
    return params, proj, x, g, h0


def _loss(params, proj, x, g, h0, engine):
    return float(np.sum(g * selective_scan(params, proj, x, h0=h0, engine=engine)))


@pytest.mark.parametrize("engine", ["sequential", "parallel"])
def test_gradients_match_finite_differences(engine):
    params, proj, x, g, h0 = _fd_case()
    grads = ssm_backward(params, proj, x, g, h0=h0, engine=engine)

    def repack(params, proj, field, v):
        kwargs = dict(a=params.a, b_static=params.b_static, c_static=params.c_static,
                      d=params.d, delta_bias=params.delta_bias)
        pkw = dict(wb=proj.wb, wc=proj.wc, wd=proj.wd)
        if field in kwargs:
            kwargs[field] = v if np.ndim(kwargs[field]) else float(v)
        else:
            pkw[field] = v if np.ndim(pkw[field]) else float(v)
        return SsmParams(**kwargs), SelectiveProj(**pkw)

    checks = {
        "x": (x, lambda v: _loss(params, proj, v, g, h0, engine)),
        "h0": (h0, lambda v: _loss(params, proj, x, g, v, engine)),
    }
    for field in ("a", "b_static", "c_static", "d", "delta_bias", "wb", "wc", "wd"):
        base = getattr(params, field, None)
        if base is None:
            base = getattr(proj, field)
        checks[field] = (
            np.atleast_1d(np.asarray(base, dtype=np.float64)),
            lambda v, f=field: _loss(*repack(params, proj, f, v if v.size > 1 else v[0]),
                                     x, g, h0, engine),
        )

    for name, (value, fn) in checks.items():
        fd = finite_diff_grad(fn, np.asarray(value, dtype=np.float64))
        got = np.atleast_1d(np.asarray(grads[name], dtype=np.float64))
        rel = gradient_rel_error(got, fd)
        assert rel < 1e-5, f"gradient {name}: rel error {rel:.3e}"


def test_gradient_d_analytic():
    # with all other paths off, y = d*x so dL/dd = sum(g*x) exactly
    params = SsmParams(np.array([-1.0]), np.array([0.0]), np.array([0.0]),
                       d=1.7, delta_bias=0.0)
    proj = SelectiveProj.zeros(1)
    rng = Rng(8)
    x, g = rng.normal((25,)), rng.normal((25,))
    grads = ssm_backward(params, proj, x, g)
    assert abs(grads["d"] - float(np.sum(g * x))) < 1e-12
    assert np.max(np.abs(grads["x"] - 1.7 * g)) < 1e-12


def test_gradient_engines_agree():
    params, proj, x, g, h0 = _fd_case(seed=9, n=4, L=30)
    gs = ssm_backward(params, proj, x, g, h0=h0, engine="sequential")
    gp = ssm_backward(params, proj, x, g, h0=h0, engine="parallel")
    for k in gs:
        assert gradient_rel_error(np.atleast_1d(gs[k]), np.atleast_1d(gp[k])) < 1e-9


def test_backward_shape_mismatch_rejected():
    params, proj = init_ssm_params(Rng(1), 2)
    with pytest.raises(ValueError):
        ssm_backward(params, proj, np.ones(5), np.ones(4))
