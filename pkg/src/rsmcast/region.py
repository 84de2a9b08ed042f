"""Rate-region sweeps over WSR weights, region comparison and a brute-force oracle."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .ao import AoConfig, verify_solution
from .core import (
    ChannelSet,
    InvalidArgument,
    PrecoderMatrix,
    Scenario,
    ScenarioInfeasible,
    Solution,
    SolverFailure,
    Strategy,
)
from .rates import log2_1p, rate_report
from .strategies import StrategyOutcome, solve_all

log = logging.getLogger(__name__)

OK, INFEASIBLE, FAILED = "ok", "infeasible", "failed"
CSV_COLUMNS = ("strategy", "u1", "u2", "R1", "R2", "wsr", "iterations", "status")
RECHECK_TOL = 1e-6
DOMINANCE_TOL = 1e-5


def weight_exponents() -> list[float]:
    """log10(u2) values: -3, then -1 to 1 in steps of 0.05, then 3."""
    return [-3.0] + [round(-1.0 + 0.05 * i, 2) for i in range(41)] + [3.0]


def weight_grid() -> list[tuple[float, float]]:
    """The 43 two-user weight vectors; user 1's weight is fixed at one."""
    return [(1.0, float(10.0**e)) for e in weight_exponents()]


@dataclass(frozen=True)
class RegionPoint:
    weights: tuple
    rates: tuple
    wsr: float
    iterations: int
    status: str
    solution: Solution | None = None
    order: tuple | None = None
    lineage: str = ""
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "rates": list(self.rates),
            "wsr": self.wsr,
            "iterations": self.iterations,
            "status": self.status,
            "order": list(self.order) if self.order is not None else None,
            "lineage": self.lineage,
            "message": self.message,
            "solution": self.solution.to_dict() if self.solution is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPoint":
        sol = Solution.from_dict(d["solution"]) if d.get("solution") else None
        return cls(
            weights=tuple(d["weights"]),
            rates=tuple(float(r) for r in d["rates"]),
            wsr=float(d["wsr"]),
            iterations=int(d["iterations"]),
            status=d["status"],
            solution=sol,
            order=tuple(d["order"]) if d.get("order") is not None else None,
            lineage=d.get("lineage", ""),
            message=d.get("message", ""),
        )


def _failed_point(weights, k: int, status: str, message: str) -> RegionPoint:
    return RegionPoint(tuple(weights), (math.nan,) * k, math.nan, 0, status, message=message)


def _point(weights, outcome) -> RegionPoint:
    sol = outcome.solution
    return RegionPoint(
        weights=tuple(float(u) for u in weights),
        rates=tuple(float(r) for r in sol.rate_report.total_unicast_rates),
        wsr=float(sol.wsr),
        iterations=int(sol.iterations),
        status=OK,
        solution=sol,
        order=outcome.order,
        lineage=outcome.warm_start_lineage,
    )


def pareto_frontier(points: Iterable[RegionPoint]) -> tuple[RegionPoint, ...]:
    """Non-dominated successful points sorted by R1 (strictly increasing).

    Ties in R1 keep the point with the larger R2; exact duplicates keep the first.
    """
    pts = [p for p in points if p.ok and len(p.rates) == 2]
    pts.sort(key=lambda p: (-p.rates[0], -p.rates[1]))  # stable: duplicates keep the first
    # sweep from the right keeping points whose R2 beats everything with larger R1
    out: list[RegionPoint] = []
    best_r2 = -math.inf
    for p in pts:
        if p.rates[1] > best_r2:
            out.append(p)
            best_r2 = p.rates[1]
    return tuple(reversed(out))


@dataclass(frozen=True)
class RateRegionResult:
    """Swept region of one strategy; ``strategy`` is None for a combined region."""

    strategy: Strategy | None
    scenario: Scenario
    points: tuple
    channel: ChannelSet | None = None
    label: str = ""
    pareto_frontier: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if self.strategy is not None:
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.label:
            object.__setattr__(self, "label", self.strategy.value if self.strategy else "combined")
        object.__setattr__(self, "pareto_frontier", pareto_frontier(self.points))

    @property
    def weights(self) -> list[tuple]:
        return [p.weights for p in self.points]

    @property
    def wsr(self) -> np.ndarray:
        return np.array([p.wsr for p in self.points])

    @property
    def num_failed(self) -> int:
        return sum(1 for p in self.points if not p.ok)

    def frontier_indices(self) -> list[int]:
        pos = {id(p): i for i, p in enumerate(self.points)}
        return [pos[id(p)] for p in self.pareto_frontier]

    def frontier_rates(self) -> np.ndarray:
        return np.array([p.rates for p in self.pareto_frontier], dtype=float).reshape(-1, 2)

    # ---- export

    def to_csv(self, fh: IO[str]) -> None:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for p in self.points:
            u1, u2 = (p.weights + (math.nan, math.nan))[:2]
            r1, r2 = (p.rates + (math.nan, math.nan))[:2]
            wr.writerow([self.label, repr(u1), repr(u2), repr(r1), repr(r2), repr(p.wsr), p.iterations, p.status])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value if self.strategy else None,
            "label": self.label,
            "scenario": self.scenario.to_dict(),
            "channel": self.channel.to_dict() if self.channel is not None else None,
            "points": [p.to_dict() for p in self.points],
            "pareto_frontier": self.frontier_indices(),
        }

    def to_json(self, fh: IO[str]) -> None:
        json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RateRegionResult":
        return cls(
            strategy=Strategy(d["strategy"]) if d.get("strategy") else None,
            scenario=Scenario.from_dict(d["scenario"]),
            points=tuple(RegionPoint.from_dict(p) for p in d["points"]),
            channel=ChannelSet.from_dict(d["channel"]) if d.get("channel") else None,
            label=d.get("label", ""),
        )

    @classmethod
    def from_json(cls, fh: IO[str]) -> "RateRegionResult":
        return cls.from_dict(json.load(fh))


def read_region_csv(fh: IO[str]) -> list[dict]:
    """Rows of a region CSV with numeric fields parsed."""
    rows = []
    for r in csv.DictReader(fh):
        if tuple(r) != CSV_COLUMNS:
            raise InvalidArgument(f"unexpected CSV header {list(r)}")
        rows.append(
            {
                "strategy": r["strategy"],
                "u1": float(r["u1"]),
                "u2": float(r["u2"]),
                "R1": float(r["R1"]),
                "R2": float(r["R2"]),
                "wsr": float(r["wsr"]),
                "iterations": int(r["iterations"]),
                "status": r["status"],
            }
        )
    return rows


# ------------------------------------------------------------------ sweeps


def scenario_weights(scenario: Scenario) -> list[tuple]:
    if scenario.weight_grid:
        return [tuple(u) for u in scenario.weight_grid]
    if scenario.k != 2:
        raise InvalidArgument("the default weight grid is defined for K = 2; give scenario.weight_grid")
    return weight_grid()


def _solve_point(args) -> dict:
    ch, scenario, weights, config, strategies = args
    k = ch.num_users
    try:
        outs = solve_all(ch, scenario, weights, config, strategies)
    except SolverFailure as e:
        return {s: _failed_point(weights, k, FAILED, str(e)) for s in strategies}
    res = {}
    for s in strategies:
        o = outs.get(s)
        if isinstance(o, StrategyOutcome):
            res[s] = _point(weights, o)
        elif isinstance(o, ScenarioInfeasible):
            res[s] = _failed_point(weights, k, INFEASIBLE, str(o))
        elif isinstance(o, Exception):
            res[s] = _failed_point(weights, k, FAILED, str(o))
        else:
            res[s] = _failed_point(weights, k, FAILED, "not solved")
    return res


def sweep_strategies(
    ch: ChannelSet,
    scenario: Scenario,
    config: AoConfig | None = None,
    strategies: Sequence[Strategy] = tuple(Strategy),
    weights: Sequence | None = None,
    parallelism: int = 1,
) -> dict:
    """Regions for several strategies, solved weight by weight so RS can warm start
    from the MU-LP and SC-SIC outcomes at the same weights.

    Weight vectors run independently (in worker processes if ``parallelism > 1``);
    results are assembled in grid order, so the output does not depend on
    completion order. A strategy whose points all fail raises ScenarioInfeasible
    only via :func:`sweep`; here failed points are just flagged.
    """
    if parallelism < 1:
        raise InvalidArgument(f"parallelism must be >= 1, got {parallelism}")
    config = config or AoConfig()
    if ch.power_budget is None:
        ch = ch.with_power(scenario.power)
    strategies = tuple(Strategy(s) for s in strategies)
    weights = [tuple(float(x) for x in u) for u in (weights if weights is not None else scenario_weights(scenario))]
    tasks = [(ch, scenario, u, config, strategies) for u in weights]
    if parallelism == 1 or len(tasks) <= 1:
        results = [_solve_point(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            results = list(ex.map(_solve_point, tasks))
    out = {}
    for s in strategies:
        sc = scenario.replace(strategy=s, weight_grid=tuple(weights))
        out[s] = RateRegionResult(s, sc, tuple(r[s] for r in results), ch)
    return out


def sweep(
    ch: ChannelSet, scenario: Scenario, config: AoConfig | None = None, parallelism: int = 1
) -> RateRegionResult:
    """Region of ``scenario.strategy``; raises ScenarioInfeasible if no point succeeds."""
    res = sweep_strategies(ch, scenario, config, (scenario.strategy,), parallelism=parallelism)[scenario.strategy]
    if res.points and all(not p.ok for p in res.points):
        raise ScenarioInfeasible(f"every weight vector failed for {scenario.strategy.value}: {res.points[0].message}")
    return res


def pointwise_max(regions: Sequence[RateRegionResult], label: str = "") -> RateRegionResult:
    """Per weight vector, the best successful point among ``regions``."""
    if not regions:
        raise InvalidArgument("need at least one region")
    base = regions[0]
    for r in regions[1:]:
        _check_comparable(base, r)
    pts = []
    for i in range(len(base.points)):
        cands = [r.points[i] for r in regions if r.points[i].ok]
        pts.append(max(cands, key=lambda p: p.wsr) if cands else base.points[i])
    label = label or "max(" + ",".join(r.label for r in regions) + ")"
    return RateRegionResult(None, base.scenario, tuple(pts), base.channel, label)


# ------------------------------------------------------------------ comparison


def _check_comparable(a: RateRegionResult, b: RateRegionResult) -> None:
    if a.scenario.key() != b.scenario.key():
        raise InvalidArgument(f"regions come from different scenarios: {a.scenario.key()} vs {b.scenario.key()}")
    wa = [tuple(w) for w in a.weights]
    wb = [tuple(w) for w in b.weights]
    if wa != wb:
        raise InvalidArgument("regions were swept over different weight vectors")


def staircase_contains(outer: np.ndarray, inner: np.ndarray, tol: float = DOMINANCE_TOL) -> bool:
    """True if every row of ``inner`` is weakly dominated (within tol) by some row of ``outer``."""
    if inner.size == 0:
        return True
    if outer.size == 0:
        return False
    dom = (outer[None, :, 0] >= inner[:, None, 0] - tol) & (outer[None, :, 1] >= inner[:, None, 1] - tol)
    return bool(np.all(dom.any(axis=1)))


def hull_contains(outer: np.ndarray, inner: np.ndarray, tol: float = DOMINANCE_TOL) -> bool:
    """Containment in the convex hull of ``outer`` closed towards the origin."""
    if inner.size == 0:
        return True
    if outer.size == 0:
        return False
    m1, m2 = outer[:, 0].max(), outer[:, 1].max()
    pts = np.vstack([outer, [[0.0, 0.0], [m1, 0.0], [0.0, m2]]])
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # degenerate (collinear) hull: fall back to the staircase
        return staircase_contains(outer, inner, tol)
    eq = hull.equations
    return bool(np.all(inner @ eq[:, :2].T + eq[:, 2] <= tol))


@dataclass(frozen=True)
class DominanceReport:
    label_a: str
    label_b: str
    weights: tuple
    deltas: np.ndarray  # WSR(a) - WSR(b) per weight vector; nan where either failed
    a_contains_b: bool
    b_contains_a: bool
    a_hull_contains_b: bool

    @property
    def min_delta(self) -> float:
        d = self.deltas[np.isfinite(self.deltas)]
        return float(d.min()) if d.size else math.nan

    @property
    def max_delta(self) -> float:
        d = self.deltas[np.isfinite(self.deltas)]
        return float(d.max()) if d.size else math.nan

    def to_dict(self) -> dict:
        return {
            "a": self.label_a,
            "b": self.label_b,
            "weights": [list(w) for w in self.weights],
            "deltas": [float(d) for d in self.deltas],
            "min_delta": self.min_delta,
            "max_delta": self.max_delta,
            "a_contains_b": self.a_contains_b,
            "b_contains_a": self.b_contains_a,
            "a_hull_contains_b": self.a_hull_contains_b,
        }


def region_dominance(a: RateRegionResult, b: RateRegionResult, tol: float = DOMINANCE_TOL) -> DominanceReport:
    _check_comparable(a, b)
    deltas = np.array(
        [pa.wsr - pb.wsr if pa.ok and pb.ok else math.nan for pa, pb in zip(a.points, b.points)], dtype=float
    )
    fa, fb = a.frontier_rates(), b.frontier_rates()
    return DominanceReport(
        a.label,
        b.label,
        tuple(a.weights),
        deltas,
        staircase_contains(fa, fb, tol),
        staircase_contains(fb, fa, tol),
        hull_contains(fa, fb, tol),
    )


def recheck_region(region: RateRegionResult, tol: float = RECHECK_TOL) -> list[str]:
    """Problems found when rechecking every successful point against its Solution."""
    ch = region.channel
    if ch is None:
        return ["region carries no channel"]
    issues = []
    r0th = region.scenario.r0_threshold
    for i, p in enumerate(region.points):
        if not p.ok:
            continue
        if p.solution is None:
            issues.append(f"point {i}: no solution recorded")
            continue
        for msg in verify_solution(ch, p.solution, r0th, tol):
            issues.append(f"point {i}: {msg}")
        rep = rate_report(ch, p.solution.precoder, p.solution.common_rates)
        if np.any(np.abs(rep.total_unicast_rates - np.asarray(p.rates)) > tol):
            issues.append(f"point {i}: rates do not match the solution")
        wsr = float(np.dot(p.weights, rep.total_unicast_rates))
        if abs(wsr - p.wsr) > tol * max(1.0, abs(wsr)):
            issues.append(f"point {i}: wsr does not match the solution")
    fr = region.pareto_frontier
    for p in fr:
        if any(q.ok and q.rates[0] >= p.rates[0] and q.rates[1] >= p.rates[1] and q.rates != p.rates for q in region.points):
            issues.append("frontier contains a dominated point")
            break
    if any(fr[i].rates[0] >= fr[i + 1].rates[0] for i in range(len(fr) - 1)):
        issues.append("frontier not strictly increasing in R1")
    return issues


# ------------------------------------------------------------------ oracle


@dataclass(frozen=True)
class GridSpec:
    """Discretisation for :func:`brute_force_oracle`.

    Columns are ``sqrt(q) * (cos a, sin a * exp(1j b))`` with ``a`` on
    ``alpha_levels`` points of [0, pi/2] and ``b`` on ``beta_levels`` points of
    [0, 2pi). Powers are fractions of Pt on a simplex lattice with step
    ``1/power_levels`` (the full budget is always spent). ``directions`` and
    ``power_splits`` override the generated grids when given: ``directions`` is
    one (n_i, Nt) array of unit vectors per precoder column, ``power_splits`` an
    (m, K+1) array of power fractions.
    """

    power_levels: int = 8
    alpha_levels: int = 7
    beta_levels: int = 12
    directions: tuple | None = None
    power_splits: np.ndarray | None = None

    @classmethod
    def from_precoder(cls, p: PrecoderMatrix, power_budget: float) -> "GridSpec":
        """Single-point grid reproducing ``p`` exactly."""
        cols = p.columns
        dirs = []
        for j in range(cols.shape[1]):
            n = np.linalg.norm(cols[:, j])
            d = cols[:, j] / n if n > 0 else np.eye(cols.shape[0])[0].astype(complex)
            dirs.append(d[None, :])
        q = np.sum(np.abs(cols) ** 2, axis=0) / power_budget
        return cls(directions=tuple(dirs), power_splits=q[None, :])


ORACLE_MAX_NT = 2
ORACLE_MAX_K = 2


def _direction_grid(nt: int, spec: GridSpec) -> np.ndarray:
    if nt == 1:
        return np.ones((1, 1), dtype=complex)
    al = np.linspace(0.0, np.pi / 2, spec.alpha_levels)
    be = np.arange(spec.beta_levels) * 2 * np.pi / spec.beta_levels
    d = []
    for a in al:
        # at the poles the phase is irrelevant
        for b in be if 0 < a < np.pi / 2 else be[:1]:
            d.append([np.cos(a), np.sin(a) * np.exp(1j * b)])
    return np.array(d, dtype=complex)


def _power_grid(ncols: int, levels: int) -> np.ndarray:
    out = [c for c in itertools.product(range(levels + 1), repeat=ncols) if sum(c) == levels]
    return np.array(out, dtype=float) / levels


def brute_force_oracle(
    ch: ChannelSet,
    scenario: Scenario,
    wsr_weights,
    grid_spec: GridSpec | None = None,
    strategy: Strategy | None = None,
) -> float:
    """Best exact WSR over a grid of precoders: a certified lower bound on the optimum.

    For each grid precoder the common-rate split is chosen in closed form (all
    slack above R0th goes to the highest-weight user, or to the first-decoded
    user under SC-SIC, whose order is enumerated). Returns -inf when no grid
    point meets the multicast threshold.
    """
    grid_spec = grid_spec or GridSpec()
    strategy = Strategy(strategy or scenario.strategy)
    nt, k = ch.num_antennas, ch.num_users
    if nt > ORACLE_MAX_NT or k > ORACLE_MAX_K:
        raise InvalidArgument(f"oracle limited to Nt <= {ORACLE_MAX_NT}, K <= {ORACLE_MAX_K}; got Nt={nt}, K={k}")
    if strategy is Strategy.SCSIC and k != 2:
        raise InvalidArgument("SC-SIC oracle needs K = 2")
    pt = ch.power_budget if ch.power_budget is not None else scenario.power
    w = np.asarray(wsr_weights, dtype=float)
    r0th = scenario.r0_threshold
    ncols = k + 1
    if grid_spec.directions is not None:
        dirs = [np.asarray(d, dtype=complex) for d in grid_spec.directions]
        if len(dirs) != ncols:
            raise InvalidArgument("directions must give one array per precoder column")
    else:
        dirs = [_direction_grid(nt, grid_spec)] * ncols
    q = grid_spec.power_splits if grid_spec.power_splits is not None else _power_grid(ncols, grid_spec.power_levels)
    q = np.asarray(q, dtype=float)
    # gains per column and direction: G[j][k, d] = |h_k^H d|^2
    G = [np.abs(ch.channels.conj() @ d.T) ** 2 for d in dirs]

    orders = [(0, 1), (1, 0)] if strategy is Strategy.SCSIC else [None]
    best = -math.inf
    for order in orders:
        active = list(range(ncols))
        if order is not None:
            active.remove(order[0] + 1)
        qa = q if order is None else q[q[:, order[0] + 1] == 0]
        if qa.size == 0:
            continue
        # private-column direction combos; the common column's direction is looped
        # over to bound memory
        shapes = [G[j].shape[1] if j in active else 1 for j in range(1, ncols)]
        idx = np.indices(shapes).reshape(k, -1)
        recv_priv = np.zeros((k, k, idx.shape[1]))
        for j in range(1, ncols):
            if j in active:
                recv_priv[j - 1] = G[j][:, idx[j - 1]]
        # received powers (column, user, direction combo, power split)
        pw_priv = recv_priv[:, :, :, None] * (pt * qa[:, 1:].T)[:, None, None, :]
        uni = pw_priv.sum(axis=0)
        own = np.stack([pw_priv[u, u] for u in range(k)])
        r_priv = log2_1p(own / (uni - own + 1.0))
        if strategy is Strategy.SCSIC:
            base = w[order[1]] * r_priv[order[1]]
        else:
            base = np.tensordot(w, r_priv, axes=1)
        slack_w = 0.0 if strategy is Strategy.MULP else (w[order[0]] if order else w.max())
        for d0 in range(G[0].shape[1]):
            pw0 = G[0][:, d0, None, None] * (pt * qa[:, 0])[None, None, :]
            r0 = log2_1p(pw0 / (uni + 1.0)).min(axis=0)
            feasible = r0 >= r0th
            if not feasible.any():
                continue
            val = base + slack_w * (r0 - r0th)
            best = max(best, float(np.max(np.where(feasible, val, -np.inf))))
    return best
