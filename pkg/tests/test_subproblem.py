import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsmcast import subproblem as sp
from rsmcast.ao import AoConfig, MrtSvd, init_precoders, optimize
from rsmcast.channel import deterministic_channel, random_channel
from rsmcast.core import ChannelSet, InvalidArgument, PrecoderMatrix, Scenario, Strategy
from rsmcast.rates import rate_report
from rsmcast.wmmse import mmse_state, mse, wmse

from conftest import crandn

PT = 100.0


def _spec(ch, strategy, r0=0.5, w=(1.0, 1.0), p=None, order=None, seed=0):
    ch = ch.with_power(PT)
    if p is None:
        p = PrecoderMatrix(crandn(np.random.default_rng(seed), ch.num_antennas, ch.num_users + 1) * 3)
    return sp.SubproblemSpec(ch, np.array(w), mmse_state(ch, p), r0, PT, strategy, order), p


@pytest.fixture
def fig_channel():
    return deterministic_channel(4, 1.0, math.pi / 9)


@pytest.mark.parametrize(
    "strategy, order, n", [(Strategy.RS, None, 27), (Strategy.MULP, None, 25), (Strategy.SCSIC, (0, 1), 18)]
)
def test_variable_counts(fig_channel, strategy, order, n):
    spec, _ = _spec(fig_channel, strategy, order=order)
    assert sp.build(spec).num_variables == n


def test_builders_check_strategy(fig_channel):
    spec, _ = _spec(fig_channel, Strategy.RS)
    with pytest.raises(InvalidArgument):
        sp.build_mulp_subproblem(spec)
    with pytest.raises(InvalidArgument):
        sp.build_scsic_subproblem(spec)
    assert sp.build_rs_subproblem(spec).num_variables == 27


def test_spec_validation(fig_channel):
    with pytest.raises(InvalidArgument):
        _spec(fig_channel, Strategy.SCSIC)  # no order
    with pytest.raises(InvalidArgument):
        _spec(random_channel(0, 4, 3), Strategy.SCSIC, w=(1, 1, 1), order=(0, 1, 2))
    with pytest.raises(InvalidArgument):
        _spec(fig_channel, Strategy.RS, w=(1.0, 0.0))


@pytest.mark.parametrize("strategy, order", [(Strategy.RS, None), (Strategy.MULP, None), (Strategy.SCSIC, (1, 0))])
def test_objective_is_weighted_wmse_sum(fig_channel, strategy, order):
    w = np.array([1.0, 2.5])
    spec, p = _spec(fig_channel, strategy, w=w, order=order)
    prog = sp.build(spec)
    rng = np.random.default_rng(5)
    q = PrecoderMatrix(crandn(rng, 4, 3))
    if order is not None:
        cols = q.columns.copy()
        cols[:, order[0] + 1] = 0
        q = PrecoderMatrix(cols)
    x = -rng.uniform(0.0, 1.0, 1 + len(prog.x_users))
    v = sp.pack(prog, q, x)
    expect = 0.0
    for k in range(2):
        _, ek = mse(spec.channel, q, spec.wmmse_state, k)
        xk = x[1 + prog.x_users.index(k)] if k in prog.x_users else 0.0
        xi_k = 0.0 if (order is not None and k == order[0]) else wmse(spec.wmmse_state.u_private[k], ek)
        expect += w[k] * (xk + xi_k)
    # the first-decoded SC-SIC user has no private stream: its xi_k is the constant w_k * xi(u, 1)
    if order is not None:
        _, ek = mse(spec.channel, q, spec.wmmse_state, order[0])
        expect += w[order[0]] * wmse(spec.wmmse_state.u_private[order[0]], ek)
    assert prog.objective(v) == pytest.approx(expect, rel=1e-12, abs=1e-10)


def test_quadratic_forms_are_psd(fig_channel):
    spec, _ = _spec(fig_channel, Strategy.RS, w=(1.0, 7.0))
    P = sp.build(spec).P.toarray()
    S = P + P.T - np.diag(np.diag(P))
    assert np.min(np.linalg.eigvalsh(S)) > -1e-9


def test_mulp_point_is_rs_feasible(fig_channel):
    spec_m, p = _spec(fig_channel, Strategy.MULP)
    spec_r = sp.SubproblemSpec(spec_m.channel, spec_m.wsr_weights, spec_m.wmmse_state, 0.5, PT, Strategy.RS)
    sol = sp.solve(sp.build(spec_m))
    assert sol.status is sp.Status.OPTIMAL
    prog_r = sp.build(spec_r)
    x_r = np.array([sol.x[0], 0.0, 0.0])
    assert sp.residual(prog_r, sol.precoder, x_r) <= sp.FEAS_TOL


def test_mulp_without_multicast_is_unicast_only(fig_channel):
    # private rates never see p0 after cancellation, so at R0th = 0 dropping p0 changes nothing
    ch = fig_channel.with_power(PT)
    sc = Scenario(4, 2, 20.0, 1.0, math.pi / 9, 0.0, Strategy.MULP)
    sol = optimize(ch, sc, (1.0, 1.0), AoConfig(restarts=1))
    cols = sol.precoder.columns.copy()
    cols[:, 0] = 0
    rep = rate_report(ch, PrecoderMatrix(cols))
    assert rep.private_rates.sum() == pytest.approx(sol.wsr, abs=1e-12)
    assert rep.common_rate == 0.0


def test_scsic_first_user_column_is_zero(fig_channel):
    spec, _ = _spec(fig_channel, Strategy.SCSIC, order=(0, 1))
    sol = sp.solve(sp.build(spec))
    assert sol.status is sp.Status.OPTIMAL
    assert np.all(sol.precoder.private(0) == 0)
    c = sp.common_rates_from_x(sp.build(spec), sol.x)
    assert c.ck0[1] == 0.0


@pytest.mark.parametrize("strategy, order", [(Strategy.RS, None), (Strategy.MULP, None), (Strategy.SCSIC, (1, 0))])
def test_solution_invariants_and_improvement(fig_channel, strategy, order):
    ch = fig_channel.with_power(PT)
    p_hat = init_precoders(ch, strategy, MrtSvd(), PT, 0.5, order)
    spec = sp.SubproblemSpec(ch, np.array([1.0, 2.0]), mmse_state(ch, p_hat), 0.5, PT, strategy, order)
    prog = sp.build(spec)
    # a feasible x at p_hat: the multicast threshold plus the slack on the first unicast entry
    r0 = rate_report(ch, p_hat).common_rate
    x_hat = np.zeros(1 + len(prog.x_users))
    x_hat[0] = -0.5 if prog.x_users else -r0
    if prog.x_users:
        x_hat[1] = -(r0 - 0.5)
    assert sp.residual(prog, p_hat, x_hat) < 1e-9
    sol = sp.solve(prog)
    assert sol.status is sp.Status.OPTIMAL
    assert sol.objective <= prog.objective(sp.pack(prog, p_hat, x_hat)) + 1e-9
    assert sol.precoder.total_power <= PT * (1 + 1e-7)
    assert sol.x[0] <= -0.5 + 1e-7
    assert np.all(sol.x[1:] <= 1e-7)
    xi0 = sp.common_wmse(prog, sol.precoder)
    assert np.all(sol.x.sum() + 1 >= xi0 - 1e-7)
    again = sp.solve(prog)
    assert abs(again.objective - sol.objective) <= 1e-9


@settings(max_examples=10)
@given(phi=st.floats(0.0, 2 * math.pi), seed=st.integers(0, 1000))
def test_objective_invariant_to_channel_phase(phi, seed):
    ch = random_channel(seed, 4, 2).with_power(PT)
    p = PrecoderMatrix(crandn(np.random.default_rng(seed), 4, 3) * 3)
    rot = ChannelSet(ch.channels * np.exp(1j * phi), PT)
    a = sp.solve(sp.build(sp.SubproblemSpec(ch, np.ones(2), mmse_state(ch, p), 0.3, PT, Strategy.RS)))
    b = sp.solve(sp.build(sp.SubproblemSpec(rot, np.ones(2), mmse_state(rot, p), 0.3, PT, Strategy.RS)))
    assert a.objective == pytest.approx(b.objective, rel=1e-6, abs=1e-6)


def test_infeasible_threshold_certificate():
    ch = deterministic_channel(4, 1.0, math.pi / 9).with_power(PT)
    assert sp.multicast_rate_bound(ch, PT) == pytest.approx(math.log2(401))
    assert sp.prescreen_infeasible(ch, PT, 50.0)
    assert not sp.prescreen_infeasible(ch, PT, 8.0)
    p = init_precoders(ch, Strategy.RS, MrtSvd(), PT, 50.0)
    for strategy, order in [(Strategy.RS, None), (Strategy.MULP, None), (Strategy.SCSIC, (0, 1))]:
        spec = sp.SubproblemSpec(ch, np.ones(2), mmse_state(ch, p), 50.0, PT, strategy, order)
        assert sp.solve(sp.build(spec)).status is sp.Status.INFEASIBLE


def test_single_user_mrt():
    h = np.ones((1, 4), dtype=complex)
    ch = ChannelSet(h, PT)
    sc = Scenario(4, 1, 20.0, 1.0, 0.0, 0.0, Strategy.MULP)
    sol = optimize(ch, sc, (1.0,), AoConfig())
    p1 = sol.precoder.private(0)
    assert np.linalg.norm(p1) ** 2 == pytest.approx(PT, rel=1e-4)
    align = abs(np.vdot(h[0], p1)) / (np.linalg.norm(h[0]) * np.linalg.norm(p1))
    assert align == pytest.approx(1.0, abs=1e-6)
    # 1-D oracle over the private power along h1
    q = np.linspace(0, PT, 1001)
    assert sol.wsr == pytest.approx(np.max(np.log2(1 + 4 * q)), abs=1e-4)


def test_dump_round_trip(fig_channel):
    spec, _ = _spec(fig_channel, Strategy.RS)
    prog = sp.build(spec)
    buf = io.StringIO()
    sp.dump(prog, buf)
    buf.seek(0)
    d = sp.load_dump(buf)
    assert d["cones"] == prog.cones and d["const"] == prog.const
    assert (d["P"] != prog.P).nnz == 0 and (d["A"] != prog.A).nnz == 0
    assert np.array_equal(d["q"], prog.q) and np.array_equal(d["b"], prog.b)
    assert d["weight_scale"] == prog.weight_scale == 1.0
