"""SINRs and achievable rates for a channel set and precoder.

The common stream is decoded first at every user treating all unicast/private
streams as noise; it is then cancelled and the user's own stream is decoded
treating the other users' streams as noise. Noise variance is one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChannelSet, CommonRateAllocation, InvalidArgument, PrecoderMatrix

LN2 = np.log(2.0)


def log2_1p(x):
    return np.log1p(x) / LN2


def channel_gains(ch: ChannelSet, p: PrecoderMatrix) -> np.ndarray:
    """|h_k^H p_j|^2 as a K x (K+1) array."""
    p.check_shape(ch)
    return np.abs(ch.channels.conj() @ p.columns) ** 2


def _check_user(ch: ChannelSet, k: int) -> None:
    if not 0 <= k < ch.num_users:
        raise InvalidArgument(f"user index {k} out of range for K={ch.num_users}")


def sinr_common(ch: ChannelSet, p: PrecoderMatrix, k: int) -> float:
    _check_user(ch, k)
    g = channel_gains(ch, p)[k]
    return float(g[0] / (g[1:].sum() + 1.0))


def sinr_private(ch: ChannelSet, p: PrecoderMatrix, k: int) -> float:
    _check_user(ch, k)
    g = channel_gains(ch, p)[k]
    return float(g[k + 1] / (g[1:].sum() - g[k + 1] + 1.0))


def sinrs(ch: ChannelSet, p: PrecoderMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``(common, private)`` SINRs of all users."""
    g = channel_gains(ch, p)
    uni = g[:, 1:].sum(axis=1)
    own = np.diag(g[:, 1:])
    return g[:, 0] / (uni + 1.0), own / (uni - own + 1.0)


@dataclass(frozen=True)
class RateReport:
    common_rate_per_user: np.ndarray
    common_rate: float
    private_rates: np.ndarray
    total_unicast_rates: np.ndarray

    def to_dict(self) -> dict:
        return {
            "common_rate_per_user": self.common_rate_per_user.tolist(),
            "common_rate": self.common_rate,
            "private_rates": self.private_rates.tolist(),
            "total_unicast_rates": self.total_unicast_rates.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RateReport":
        return cls(
            np.asarray(d["common_rate_per_user"], dtype=float),
            float(d["common_rate"]),
            np.asarray(d["private_rates"], dtype=float),
            np.asarray(d["total_unicast_rates"], dtype=float),
        )


def rate_report(ch: ChannelSet, p: PrecoderMatrix, c: CommonRateAllocation | None = None) -> RateReport:
    """Per-user common/private rates; ``total_unicast_rates`` adds the common shares of ``c``."""
    gc, gp = sinrs(ch, p)
    r0k = log2_1p(gc)
    rk = log2_1p(gp)
    tot = rk.copy()
    if c is not None:
        if c.ck0.shape != rk.shape:
            raise InvalidArgument("common-rate allocation does not match number of users")
        tot = tot + c.ck0
    return RateReport(r0k, float(r0k.min()), rk, tot)


def weighted_sum_rate(report: RateReport, weights) -> float:
    return float(np.dot(np.asarray(weights, dtype=float), report.total_unicast_rates))


def constraint_residuals(ch: ChannelSet, p: PrecoderMatrix, c: CommonRateAllocation, r0_threshold: float) -> dict:
    """Signed violations (positive means violated) of the joint-transmission constraints.

    Covers the rate-sharing constraint, the multicast QoS threshold, non-negative
    common shares and the total power budget.
    """
    rep = rate_report(ch, p, c)
    pt = ch.require_power()
    return {
        "rate_sharing": c.total - rep.common_rate,
        "multicast_qos": r0_threshold - c.c0,
        "common_share_nonneg": float(max(0.0, -np.min(c.ck0))) if c.ck0.size else 0.0,
        "power": p.total_power - pt,
    }


def check_constraints(
    ch: ChannelSet, p: PrecoderMatrix, c: CommonRateAllocation, r0_threshold: float, tol: float = 1e-6
) -> list[str]:
    """Names of violated constraints; power is checked relatively, rates absolutely."""
    res = constraint_residuals(ch, p, c, r0_threshold)
    pt = ch.require_power()
    bad = []
    for name, v in res.items():
        lim = tol * pt if name == "power" else tol
        if v > lim:
            bad.append(name)
    return bad
