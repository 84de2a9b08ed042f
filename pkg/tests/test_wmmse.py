import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsmcast.channel import random_channel
from rsmcast.core import ChannelSet, InvalidArgument, PrecoderMatrix
from rsmcast.rates import LN2, rate_report, sinrs
from rsmcast.wmmse import (
    WEIGHT_CLAMP,
    WmmseState,
    mmse_equalizers,
    mmse_state,
    mmse_values,
    mmse_weights,
    mse,
    power_terms,
    rate_wmmse_gap,
    wmse,
)

from conftest import crandn


def _toy():
    return ChannelSet(np.array([[1.0]], dtype=complex), 10.0), PrecoderMatrix(np.array([[1.0, 1.0]], dtype=complex))


def test_power_terms_example():
    ch, p = _toy()
    assert power_terms(ch, p, 0) == pytest.approx((3.0, 2.0, 2.0, 1.0))
    z = PrecoderMatrix(np.zeros((1, 2), dtype=complex))
    assert power_terms(ch, z, 0) == pytest.approx((1.0, 1.0, 1.0, 1.0))
    with pytest.raises(InvalidArgument):
        power_terms(ch, p, 1)


def test_mse_examples():
    ch, p = _toy()
    zero = WmmseState(np.zeros(1), np.zeros(1), np.ones(1), np.ones(1))
    assert mse(ch, p, zero, 0) == pytest.approx((1.0, 1.0))
    st_ = WmmseState(np.array([1 / 3]), np.zeros(1), np.ones(1), np.ones(1))
    assert mse(ch, p, st_, 0)[0] == pytest.approx(2 / 3)


def test_mmse_examples():
    ch, p = _toy()
    gc, gp = mmse_equalizers(ch, p)
    assert gc[0] == pytest.approx(1 / 3)
    ec, ep = mmse_values(ch, p)
    assert ec[0] == pytest.approx(2 / 3)
    uc, up = mmse_weights(ch, p)
    assert uc[0] == pytest.approx(1.5)
    p0 = PrecoderMatrix(np.array([[0.0, 1.0]], dtype=complex))
    assert mmse_equalizers(ch, p0)[0][0] == 0
    assert mmse_values(ch, p0)[0][0] == pytest.approx(1.0)
    z = PrecoderMatrix(np.zeros((1, 2), dtype=complex))
    assert np.all(np.concatenate(mmse_weights(ch, z)) == 1.0)


def test_rate_wmmse_identity_example():
    ch, p = _toy()
    st_ = mmse_state(ch, p)
    e0, _ = mse(ch, p, st_, 0)
    xi0 = wmse(st_.u_common[0], e0)
    assert xi0 == pytest.approx(1.5 * (2 / 3) - math.log2(1.5), abs=1e-14)
    assert xi0 == pytest.approx(1 - 0.5849625007211562, abs=1e-12)
    assert rate_wmmse_gap(ch, PrecoderMatrix(np.zeros((1, 2), dtype=complex)), 0) == pytest.approx((0.0, 0.0), abs=1e-15)


def test_state_validation():
    with pytest.raises(InvalidArgument):
        WmmseState(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))


def test_weight_clamp(caplog):
    ch = ChannelSet(np.array([[1.0]], dtype=complex), 1e30)
    p = PrecoderMatrix(np.array([[0.0, 1e14]], dtype=complex))
    uc, up = mmse_weights(ch, p)
    assert up[0] == WEIGHT_CLAMP
    assert "clamp" in caplog.text


def test_wmse_matches_log2_form_at_mmse_weight():
    e = np.linspace(0.01, 1.0, 50)
    assert np.allclose(wmse(1 / e, e), 1 - np.log2(1 / e), atol=1e-14)
    assert np.allclose(wmse(1 / e, e), (1 / e) * e - np.log(1 / e) / LN2, atol=1e-14)


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 30.0))
def test_identity_and_mmse_properties(seed, scale):
    ch = random_channel(seed, 4, 2).with_power(100.0)
    rng = np.random.default_rng(seed)
    p = PrecoderMatrix(scale * crandn(rng, 4, 3))
    for k in range(2):
        gap = rate_wmmse_gap(ch, p, k)
        assert abs(gap[0]) < 1e-10 and abs(gap[1]) < 1e-10
    ec, ep = mmse_values(ch, p)
    assert np.all((ec > 0) & (ec <= 1)) and np.all((ep > 0) & (ep <= 1))
    gc, _ = sinrs(ch, p)
    assert np.allclose(gc, 1 / ec - 1, rtol=1e-9, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1), u=st.floats(1e-6, 1e6))
def test_mmse_weight_minimises_wmse(seed, u):
    ch = random_channel(seed, 4, 2).with_power(100.0)
    p = PrecoderMatrix(crandn(np.random.default_rng(seed), 4, 3) * 4)
    rep = rate_report(ch, p)
    ec, ep = mmse_values(ch, p)
    assert wmse(u, ec[0]) >= 1 - rep.common_rate_per_user[0] - 1e-12
    assert wmse(u, ep[1]) >= 1 - rep.private_rates[1] - 1e-12
