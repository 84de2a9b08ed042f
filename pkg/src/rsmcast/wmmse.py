"""MSEs, MMSE equalizers and weights, and the rate/weighted-MMSE identity.

For each user two scalar receivers are in play: ``g_common`` estimates the
common stream from y_k, ``g_private`` estimates the user's own stream after the
common stream has been cancelled.

The weighted MSE ``xi(u, e)`` is written in bit units so that at the MMSE
equalizer and weight it equals ``1 - R`` with R in bit/s/Hz, and so that the
MMSE weight ``1/e`` is its minimiser over ``u``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ChannelSet, InvalidArgument, PrecoderMatrix
from .rates import LN2, rate_report

log = logging.getLogger(__name__)

WEIGHT_CLAMP = 1e12


@dataclass(frozen=True)
class WmmseState:
    g_common: np.ndarray
    g_private: np.ndarray
    u_common: np.ndarray
    u_private: np.ndarray

    def __post_init__(self):
        for name in ("u_common", "u_private"):
            u = np.asarray(getattr(self, name), dtype=float)
            if np.any(~(u > 0)):
                raise InvalidArgument(f"{name} must be strictly positive, got {u}")
            object.__setattr__(self, name, u)
        object.__setattr__(self, "g_common", np.asarray(self.g_common, dtype=complex))
        object.__setattr__(self, "g_private", np.asarray(self.g_private, dtype=complex))


def _effective(ch: ChannelSet, p: PrecoderMatrix) -> np.ndarray:
    p.check_shape(ch)
    return ch.channels.conj() @ p.columns  # a[k, j] = h_k^H p_j


def _all_power_terms(a: np.ndarray):
    g = np.abs(a) ** 2
    t_common = g.sum(axis=1) + 1.0
    t_private = t_common - g[:, 0]
    own = np.diag(g[:, 1:])
    return t_common, t_private, t_private, t_private - own


def power_terms(ch: ChannelSet, p: PrecoderMatrix, k: int) -> tuple[float, float, float, float]:
    """``(T_k0, T_k, I_k0, I_k)``: total received power for the common and private
    layers and the corresponding interference-plus-noise terms."""
    if not 0 <= k < ch.num_users:
        raise InvalidArgument(f"user index {k} out of range")
    terms = _all_power_terms(_effective(ch, p))
    return tuple(float(t[k]) for t in terms)


def mse(ch: ChannelSet, p: PrecoderMatrix, state: WmmseState, k: int) -> tuple[float, float]:
    a = _effective(ch, p)
    tc, tp, _, _ = _all_power_terms(a)
    gc, gp = state.g_common[k], state.g_private[k]
    e0 = abs(gc) ** 2 * tc[k] - 2 * np.real(gc * a[k, 0]) + 1.0
    ek = abs(gp) ** 2 * tp[k] - 2 * np.real(gp * a[k, k + 1]) + 1.0
    return float(e0), float(ek)


def mmse_equalizers(ch: ChannelSet, p: PrecoderMatrix) -> tuple[np.ndarray, np.ndarray]:
    a = _effective(ch, p)
    tc, tp, _, _ = _all_power_terms(a)
    k = np.arange(ch.num_users)
    return a[:, 0].conj() / tc, a[k, k + 1].conj() / tp


def mmse_values(ch: ChannelSet, p: PrecoderMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Minimum MSEs ``I/T`` of the common and private layers, per user."""
    tc, tp, ic, ip = _all_power_terms(_effective(ch, p))
    return ic / tc, ip / tp


def mmse_weights(ch: ChannelSet, p: PrecoderMatrix) -> tuple[np.ndarray, np.ndarray]:
    ec, ep = mmse_values(ch, p)
    with np.errstate(divide="ignore"):  # eps can round to 0; the clamp handles inf
        uc, up = 1.0 / ec, 1.0 / ep
    if np.any(uc > WEIGHT_CLAMP) or np.any(up > WEIGHT_CLAMP):
        log.warning("MMSE weight clamp at %g activated", WEIGHT_CLAMP)
        uc, up = np.minimum(uc, WEIGHT_CLAMP), np.minimum(up, WEIGHT_CLAMP)
    return uc, up


def mmse_state(ch: ChannelSet, p: PrecoderMatrix) -> WmmseState:
    gc, gp = mmse_equalizers(ch, p)
    uc, up = mmse_weights(ch, p)
    return WmmseState(gc, gp, uc, up)


def wmse(u, e):
    """Weighted MSE in bit units: ``1 + (u*e - ln u - 1) / ln 2``.

    At ``u = 1/e`` this equals ``u*e - log2(u) = 1 + log2(e)``; unlike that
    expression it is minimised over ``u`` exactly at ``u = 1/e``, so
    ``wmse(u, e) >= 1 + log2(e)`` for every ``u > 0``.
    """
    return 1.0 + (u * e - np.log(u) - 1.0) / LN2


def rate_wmmse_gap(ch: ChannelSet, p: PrecoderMatrix, k: int) -> tuple[float, float]:
    """Deviation of the weighted MMSE at the optimal (g, u) from ``1 - R`` for both layers.

    Both entries are zero up to rounding; anything else means the closed forms
    and the rate expressions disagree.
    """
    state = mmse_state(ch, p)
    e0, ek = mse(ch, p, state, k)
    xi0 = wmse(state.u_common[k], e0)
    xik = wmse(state.u_private[k], ek)
    rep = rate_report(ch, p)
    r0, rk = rep.common_rate_per_user[k], rep.private_rates[k]
    return float(xi0 - (1.0 - r0)), float(xik - (1.0 - rk))
