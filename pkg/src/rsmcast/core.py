"""Shared domain types: channels, precoders, common-rate splits, scenarios, solutions.

All rates are in bit/s/Hz (log base 2). Powers are linear; dB only appears in
``Scenario.snr_db``. User indices are 0-based throughout the package: user ``k``
owns precoder column ``k + 1``, column 0 is the (super-)common stream.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

if TYPE_CHECKING:
    from .rates import RateReport


class InvalidArgument(ValueError):
    """Raised when a type or operation receives arguments violating its contract."""


class ScenarioInfeasible(RuntimeError):
    """The multicast QoS constraint cannot be met for the given instance."""


class SolverFailure(RuntimeError):
    """The interior-point solver did not converge.

    ``trace`` carries the partial WSR trace of the AO run, if any.
    """

    def __init__(self, msg: str, trace: Sequence[float] = ()):
        super().__init__(msg)
        self.trace = list(trace)


class Strategy(str, enum.Enum):
    RS = "RS"
    MULP = "MULP"
    SCSIC = "SCSIC"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def complex_to_json(z) -> Any:
    """Complex scalars/arrays -> nested lists with [re, im] leaves."""
    z = np.asarray(z)
    if z.ndim == 0:
        return [float(z.real), float(z.imag)]
    return [complex_to_json(v) for v in z]


def complex_from_json(obj) -> np.ndarray:
    a = np.asarray(obj, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


@dataclass(frozen=True)
class ChannelSet:
    """Channel vectors of all users (rows of ``channels``, shape K x Nt).

    ``power_budget`` may be ``None`` for a channel built before the SNR is
    known; use :meth:`with_power` to attach it.
    """

    channels: np.ndarray
    power_budget: float | None = None

    def __post_init__(self):
        h = np.asarray(self.channels, dtype=complex)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise InvalidArgument(f"channels must be a non-empty K x Nt array, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise InvalidArgument("channels contain non-finite entries")
        zero = ~np.any(h != 0, axis=1)
        if np.any(zero):
            raise InvalidArgument(f"channel of user(s) {np.flatnonzero(zero).tolist()} is identically zero")
        if self.power_budget is not None:
            pt = float(self.power_budget)
            if not (pt > 0 and math.isfinite(pt)):
                raise InvalidArgument(f"power_budget must be > 0, got {self.power_budget}")
            object.__setattr__(self, "power_budget", pt)
        object.__setattr__(self, "channels", _frozen(h))

    @property
    def num_users(self) -> int:
        return self.channels.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.channels.shape[1]

    @property
    def noise_variance(self) -> np.ndarray:
        return np.ones(self.num_users)

    def with_power(self, power_budget: float) -> "ChannelSet":
        return ChannelSet(self.channels, power_budget)

    def require_power(self) -> float:
        if self.power_budget is None:
            raise InvalidArgument("channel set has no power budget attached")
        return self.power_budget

    def to_dict(self) -> dict:
        return {
            "num_antennas": self.num_antennas,
            "num_users": self.num_users,
            "channels": complex_to_json(self.channels),
            "noise_variance": self.noise_variance.tolist(),
            "power_budget": self.power_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSet":
        nv = d.get("noise_variance")
        if nv is not None and any(float(v) != 1.0 for v in nv):
            raise InvalidArgument("only unit noise variances are supported")
        h = complex_from_json(d["channels"])
        if "num_antennas" in d and h.shape[1] != d["num_antennas"]:
            raise InvalidArgument("num_antennas does not match channel length")
        return cls(h, d.get("power_budget"))


@dataclass(frozen=True)
class PrecoderMatrix:
    """Precoder columns, shape Nt x (K+1); column 0 is the common stream."""

    columns: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.columns, dtype=complex)
        if p.ndim != 2 or p.shape[1] < 2:
            raise InvalidArgument(f"precoder must be Nt x (K+1) with K >= 1, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidArgument("precoder contains non-finite entries")
        object.__setattr__(self, "columns", _frozen(p))

    @property
    def num_users(self) -> int:
        return self.columns.shape[1] - 1

    @property
    def num_antennas(self) -> int:
        return self.columns.shape[0]

    @property
    def common(self) -> np.ndarray:
        return self.columns[:, 0]

    def private(self, k: int) -> np.ndarray:
        return self.columns[:, k + 1]

    @property
    def total_power(self) -> float:
        return float(np.sum(np.abs(self.columns) ** 2))

    def check_shape(self, ch: ChannelSet) -> None:
        if self.columns.shape != (ch.num_antennas, ch.num_users + 1):
            raise InvalidArgument(
                f"precoder shape {self.columns.shape} does not match channel set "
                f"(Nt={ch.num_antennas}, K={ch.num_users})"
            )

    def to_dict(self) -> dict:
        return {"columns": complex_to_json(self.columns.T)}

    @classmethod
    def from_dict(cls, d: dict) -> "PrecoderMatrix":
        return cls(complex_from_json(d["columns"]).T)


@dataclass(frozen=True)
class CommonRateAllocation:
    """Split of the common-stream rate: multicast part ``c0`` and unicast parts ``ck0``.

    The joint constraint ``c0 + sum(ck0) <= min_k R_{k,0}`` depends on the precoder
    and is checked by :func:`rsmcast.rates.check_constraints`.
    """

    c0: float
    ck0: np.ndarray

    def __post_init__(self):
        ck0 = np.asarray(self.ck0, dtype=float).reshape(-1)
        c0 = float(self.c0)
        if not (c0 >= 0 and math.isfinite(c0)):
            raise InvalidArgument(f"c0 must be finite and >= 0, got {c0}")
        if np.any(~np.isfinite(ck0)) or np.any(ck0 < 0):
            raise InvalidArgument(f"ck0 entries must be finite and >= 0, got {ck0}")
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "ck0", _frozen(ck0))

    @classmethod
    def zeros(cls, k: int, c0: float = 0.0) -> "CommonRateAllocation":
        return cls(c0, np.zeros(k))

    @property
    def total(self) -> float:
        return self.c0 + float(np.sum(self.ck0))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.c0], self.ck0])

    def to_dict(self) -> dict:
        return {"c0": self.c0, "ck0": self.ck0.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CommonRateAllocation":
        return cls(d["c0"], d["ck0"])


@dataclass(frozen=True)
class Scenario:
    nt: int
    k: int
    snr_db: float
    gamma: float
    theta: float
    r0_threshold: float
    strategy: Strategy
    weight_grid: tuple = ()

    def __post_init__(self):
        if int(self.nt) < 1 or int(self.k) < 1:
            raise InvalidArgument(f"nt and k must be >= 1, got nt={self.nt}, k={self.k}")
        if not (0 < self.gamma <= 1):
            raise InvalidArgument(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (self.r0_threshold >= 0):
            raise InvalidArgument(f"r0_threshold must be >= 0, got {self.r0_threshold}")
        if not math.isfinite(self.snr_db):
            raise InvalidArgument("snr_db must be finite")
        grid = tuple(tuple(float(x) for x in u) for u in self.weight_grid)
        for u in grid:
            if len(u) != self.k:
                raise InvalidArgument(f"weight vector {u} has length != k={self.k}")
            if not all(x > 0 and math.isfinite(x) for x in u):
                raise InvalidArgument(f"weight vector {u} must be strictly positive")
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "weight_grid", grid)

    @property
    def power(self) -> float:
        return scenario_power(self)

    def replace(self, **kw) -> "Scenario":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return Scenario(**d)

    def key(self) -> tuple:
        """Identity of the physical setting, ignoring strategy and weights."""
        return (self.nt, self.k, self.snr_db, self.gamma, self.theta, self.r0_threshold)

    def to_dict(self) -> dict:
        return {
            "nt": self.nt,
            "k": self.k,
            "snr_db": self.snr_db,
            "gamma": self.gamma,
            "theta": self.theta,
            "r0_threshold": self.r0_threshold,
            "strategy": self.strategy.value,
            "weight_grid": [list(u) for u in self.weight_grid],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            nt=d["nt"],
            k=d["k"],
            snr_db=d["snr_db"],
            gamma=d["gamma"],
            theta=d["theta"],
            r0_threshold=d["r0_threshold"],
            strategy=Strategy(d["strategy"]),
            weight_grid=tuple(tuple(u) for u in d.get("weight_grid", ())),
        )


def scenario_power(s: Scenario) -> float:
    """Transmit power Pt in linear scale (noise is normalised to one)."""
    return 10.0 ** (s.snr_db / 10.0)


@dataclass(frozen=True)
class Solution:
    """Output of one AO run (or the best of several restarts).

    ``order`` is the SC-SIC decoding order ``(first, second)``; ``lineage``
    names the initialisation that produced the solution.
    """

    precoder: PrecoderMatrix
    common_rates: CommonRateAllocation
    rate_report: "RateReport"
    trace: tuple = ()
    iterations: int = 0
    converged: bool = False
    strategy: Strategy = Strategy.RS
    wsr_weights: tuple = ()
    wsr: float = 0.0
    order: tuple | None = None
    lineage: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple(float(v) for v in self.trace))
        object.__setattr__(self, "wsr_weights", tuple(float(v) for v in self.wsr_weights))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.order is not None:
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "order": list(self.order) if self.order is not None else None,
            "wsr_weights": list(self.wsr_weights),
            "wsr": self.wsr,
            "precoder": self.precoder.to_dict(),
            "common_rates": self.common_rates.to_dict(),
            "rate_report": self.rate_report.to_dict(),
            "trace": list(self.trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "lineage": self.lineage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Solution":
        from .rates import RateReport

        return cls(
            precoder=PrecoderMatrix.from_dict(d["precoder"]),
            common_rates=CommonRateAllocation.from_dict(d["common_rates"]),
            rate_report=RateReport.from_dict(d["rate_report"]),
            trace=tuple(d.get("trace", ())),
            iterations=d.get("iterations", 0),
            converged=d.get("converged", False),
            strategy=Strategy(d.get("strategy", "RS")),
            wsr_weights=tuple(d.get("wsr_weights", ())),
            wsr=d.get("wsr", 0.0),
            order=tuple(d["order"]) if d.get("order") is not None else None,
            lineage=d.get("lineage", ""),
        )
