"""Alternating optimisation: closed-form (g, u) updates against the convex subproblem.

One AO run starts from a precoder, and at every iteration recomputes the MMSE
equalizers and weights at the current precoder, then solves the convex
subproblem for (P, x). The WSR recorded per iteration is evaluated with the
exact rate expressions and the split c = -x, so the trace is a true achievable
WSR at every step. :func:`optimize` runs several initialisations and keeps the
best.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Sequence, Union

import numpy as np

from . import subproblem as sp
from .core import (
    ChannelSet,
    CommonRateAllocation,
    InvalidArgument,
    PrecoderMatrix,
    Scenario,
    ScenarioInfeasible,
    Solution,
    SolverFailure,
    Strategy,
)
from .rates import RateReport, check_constraints, constraint_residuals, rate_report
from .wmmse import mmse_state

log = logging.getLogger(__name__)

TIE_TOL = 1e-9
# a rejected step this small relative to the WSR is subproblem round-off at a fixed point
REJECT_RTOL = 1e-6


@dataclass(frozen=True)
class MrtSvd:
    common_fraction: float | None = None


@dataclass(frozen=True)
class RandomInit:
    seed: int = 0
    common_fraction: float | None = None


@dataclass(frozen=True)
class SingleUser:
    """Serve only ``user``'s private stream next to a multicast beam."""

    user: int = 0


@dataclass(frozen=True)
class WarmStart:
    solution: Solution
    lineage: str = "warm"


InitMethod = Union[MrtSvd, RandomInit, SingleUser, WarmStart]


@dataclass(frozen=True)
class AoConfig:
    epsilon: float = 1e-4
    max_iterations: int = 300
    init_method: InitMethod = field(default_factory=MrtSvd)
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgument(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise InvalidArgument(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.restarts < 1:
            raise InvalidArgument(f"restarts must be >= 1, got {self.restarts}")

    def replace(self, **kw) -> "AoConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return AoConfig(**d)


# ---------------------------------------------------------------- initialisation


def _default_fraction(r0_threshold: float) -> float:
    return 0.5 if r0_threshold > 0 else 0.1


def _dominant_direction(ch: ChannelSet) -> np.ndarray:
    # left singular vector of the Nt x K matrix [h_1 ... h_K]
    u, _, _ = np.linalg.svd(ch.channels.T)
    return u[:, 0]


def _maxmin_direction(ch: ChannelSet) -> np.ndarray:
    """Unit vector roughly maximising min_k |h_k^H d|^2 (multicast beam).

    Searches a grid over the span of the channel directions for K = 2 and
    otherwise picks the best of the individual channel directions and the
    dominant singular vector.
    """
    h = ch.channels
    dirs = [h[k] / np.linalg.norm(h[k]) for k in range(ch.num_users)] + [_dominant_direction(ch)]
    if ch.num_users == 2:
        a = np.linspace(0.0, np.pi / 2, 31)[:, None, None]
        b = np.linspace(0.0, 2 * np.pi, 36, endpoint=False)[None, :, None]
        grid = np.cos(a) * dirs[0] + np.sin(a) * np.exp(1j * b) * dirs[1]
        dirs += list(grid.reshape(-1, ch.num_antennas))
    d = np.array([v / np.linalg.norm(v) for v in dirs if np.linalg.norm(v) > 0])
    gains = np.abs(h.conj() @ d.T) ** 2
    return d[int(np.argmax(gains.min(axis=0)))]


def _assemble(common_dir, private_dirs, active, pt, t) -> np.ndarray:
    nt, k = private_dirs.shape
    cols = np.zeros((nt, k + 1), dtype=complex)
    cols[:, 0] = math.sqrt(t * pt) * common_dir / np.linalg.norm(common_dir)
    n_act = int(np.sum(active))
    if n_act == 0:
        cols[:, 0] = math.sqrt(pt) * common_dir / np.linalg.norm(common_dir)
        return cols
    q = (1.0 - t) * pt / n_act
    for j in range(k):
        if active[j]:
            d = private_dirs[:, j]
            cols[:, j + 1] = math.sqrt(q) * d / np.linalg.norm(d)
    return cols


def _min_common_share(ch, common_dir, private_dirs, active, pt, r0_threshold) -> np.ndarray:
    # the common rate grows with t, so bisect for the smallest share meeting R0th
    chp = ch.with_power(pt)

    def cols(t):
        return _assemble(common_dir, private_dirs, active, pt, t)

    def ok(t):
        return rate_report(chp, PrecoderMatrix(cols(t))).common_rate >= r0_threshold

    if r0_threshold <= 0:
        return cols(0.0)
    if not ok(1.0):
        return cols(1.0)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return cols(hi)


def init_precoders(
    ch: ChannelSet,
    strategy: Strategy,
    method: InitMethod,
    power_budget: float,
    r0_threshold: float = 0.0,
    order: tuple | None = None,
) -> PrecoderMatrix:
    """Initial precoder using the full power budget.

    ``MrtSvd`` puts a fraction ``t`` of the power on the dominant left singular
    vector of the channel matrix (common stream) and splits the rest equally
    over matched filters ``h_k/||h_k||``. ``RandomInit`` uses Gaussian
    directions with the same power split. SC-SIC leaves the first-decoded
    user's private column empty. ``SingleUser`` starts from a max-min
    multicast beam plus the matched filter of one user, other private columns
    off; it reaches corner points where a stream is switched off, which AO
    otherwise approaches very slowly.

    When ``t`` is not fixed by the method and the resulting point misses the
    multicast threshold, ``t`` is raised step by step towards 1. If even t = 1
    misses it, the common column is replaced by a max-min multicast beam and
    the search is repeated, so the first subproblem starts QoS-feasible
    whenever a point of this form exists.
    """
    strategy = Strategy(strategy)
    k = ch.num_users
    active = np.ones(k, dtype=bool)
    if strategy is Strategy.SCSIC:
        if order is None:
            raise InvalidArgument("SC-SIC initialisation needs a decoding order")
        active[order[0]] = False
    if isinstance(method, WarmStart):
        cols = np.array(method.solution.precoder.columns, copy=True)
        cols[:, 1:][:, ~active] = 0.0
        pw = np.sum(np.abs(cols) ** 2)
        if pw > power_budget:
            cols *= math.sqrt(power_budget / pw)
        return PrecoderMatrix(cols)
    if isinstance(method, RandomInit):
        rng = np.random.Generator(np.random.PCG64(method.seed))
        nt = ch.num_antennas
        raw = rng.standard_normal((nt, k + 1)) + 1j * rng.standard_normal((nt, k + 1))
        common_dir, private_dirs = raw[:, 0], raw[:, 1:]
    elif isinstance(method, SingleUser):
        if not 0 <= method.user < k:
            raise InvalidArgument(f"user index {method.user} out of range")
        active &= np.arange(k) == method.user
        common_dir = _maxmin_direction(ch)
        private_dirs = ch.channels.T.copy()
    else:
        common_dir = _dominant_direction(ch)
        private_dirs = ch.channels.T.copy()
    fixed = getattr(method, "common_fraction", None)
    t = _default_fraction(r0_threshold) if fixed is None else float(fixed)
    if isinstance(method, SingleUser):
        return PrecoderMatrix(_min_common_share(ch, common_dir, private_dirs, active, power_budget, r0_threshold))
    cols = _assemble(common_dir, private_dirs, active, power_budget, t)
    if fixed is None and r0_threshold > 0:
        chp = ch.with_power(power_budget)
        t0 = t
        for direction in (common_dir, None):
            if direction is None:
                # the first direction cannot carry R0th at any split: use a multicast beam
                direction, t = _maxmin_direction(ch), t0
                cols = _assemble(direction, private_dirs, active, power_budget, t)
            for t_next in (0.7, 0.9, 0.97, 0.99, 1.0, None):
                if rate_report(chp, PrecoderMatrix(cols)).common_rate >= r0_threshold:
                    return PrecoderMatrix(cols)
                if t_next is None:
                    break
                if t_next <= t:
                    continue
                t = t_next
                cols = _assemble(direction, private_dirs, active, power_budget, t)
    return PrecoderMatrix(cols)


# ---------------------------------------------------------------- evaluation


def best_common_split(
    report: RateReport, wsr_weights, r0_threshold: float, strategy: Strategy, order: tuple | None = None
) -> CommonRateAllocation | None:
    """WSR-maximising common-rate split for a fixed precoder, or ``None`` if the
    common stream cannot carry the multicast threshold."""
    r0 = report.common_rate
    k = report.private_rates.size
    if r0 < r0_threshold:
        return None
    slack = r0 - r0_threshold
    ck0 = np.zeros(k)
    strategy = Strategy(strategy)
    if strategy is Strategy.MULP:
        return CommonRateAllocation(r0, ck0)
    if strategy is Strategy.SCSIC:
        ck0[order[0]] = slack
    else:
        ck0[int(np.argmax(np.asarray(wsr_weights)))] = slack
    return CommonRateAllocation(r0_threshold, ck0)


def wsr_of(solution: Solution, wsr_weights) -> float:
    """Weighted sum of per-user unicast rates (private rate plus any common share)."""
    w = np.asarray(wsr_weights, dtype=float)
    return float(w @ solution.rate_report.total_unicast_rates)


def _make_solution(ch, p, c, weights, strategy, order, trace, iterations, converged, lineage) -> Solution:
    rep = rate_report(ch, p, c)
    return Solution(
        precoder=p,
        common_rates=c,
        rate_report=rep,
        trace=tuple(trace),
        iterations=iterations,
        converged=converged,
        strategy=strategy,
        wsr_weights=tuple(weights),
        wsr=float(np.dot(weights, rep.total_unicast_rates)),
        order=order,
        lineage=lineage,
    )


# ---------------------------------------------------------------- AO


def run_ao(
    ch: ChannelSet,
    p0: PrecoderMatrix,
    wsr_weights,
    r0_threshold: float,
    strategy: Strategy,
    epsilon: float = 1e-4,
    max_iterations: int = 300,
    order: tuple | None = None,
    lineage: str = "",
    residuals: list | None = None,
) -> Solution:
    """Single AO run from ``p0``.

    The trace starts with the WSR of ``p0`` (under its best common split) when
    ``p0`` already meets the multicast threshold. A subproblem solution whose
    exact WSR is below the current one ends the run without being accepted;
    it counts as converged when the drop is within ``epsilon`` or within
    ``REJECT_RTOL`` of the WSR (solver round-off, which scales with the
    weights). ``residuals``, if given, receives one dict of constraint
    residuals per accepted iterate.
    """
    strategy = Strategy(strategy)
    pt = ch.require_power()
    w = np.asarray(wsr_weights, dtype=float)
    p = p0
    trace: list[float] = []
    c = best_common_split(rate_report(ch, p), w, r0_threshold, strategy, order)
    if c is not None:
        trace.append(float(w @ rate_report(ch, p, c).total_unicast_rates))
        if residuals is not None:
            residuals.append(constraint_residuals(ch, p, c, r0_threshold))
    converged = False
    n = 0
    for n in range(1, max_iterations + 1):
        spec = sp.SubproblemSpec(ch, w, mmse_state(ch, p), r0_threshold, pt, strategy, order)
        program = sp.build(spec)
        res = sp.solve(program)
        if res.status is sp.Status.INFEASIBLE:
            if not trace:
                raise ScenarioInfeasible(
                    f"subproblem infeasible at iteration {n} (strategy {strategy.value}, R0th={r0_threshold})"
                )
            # the previous iterate is feasible for this subproblem, so this is a solver artefact
            raise SolverFailure(f"subproblem reported infeasible at iteration {n} from a feasible point", trace)
        if res.status is not sp.Status.OPTIMAL:
            raise SolverFailure(f"interior-point solver failed at iteration {n} ({res.status.value})", trace)
        p_new = res.precoder
        c_new = sp.common_rates_from_x(program, res.x)
        wsr = float(w @ rate_report(ch, p_new, c_new).total_unicast_rates)
        if trace and wsr < trace[-1]:
            # subproblem solved only to tolerance; never accept a worse iterate
            converged = trace[-1] - wsr <= max(epsilon, REJECT_RTOL * abs(trace[-1]))
            n -= 1
            break
        p, c = p_new, c_new
        trace.append(wsr)
        if residuals is not None:
            residuals.append(constraint_residuals(ch, p, c, r0_threshold))
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) <= epsilon:
            converged = True
            break
    if c is None:
        raise ScenarioInfeasible("no feasible iterate produced")
    return _make_solution(ch, p, c, w, strategy, order, trace, n, converged, lineage)


def restart_methods(config: AoConfig, extra: Sequence[InitMethod] = ()) -> list[tuple[str, InitMethod]]:
    """Initialisations tried by :func:`optimize`, with their lineage tags.

    The configured method comes first, then ``restarts - 1`` random draws whose
    seeds derive from ``config.seed``, then any extra warm starts.
    """
    methods: list[tuple[str, InitMethod]] = []
    first = config.init_method
    methods.append((_tag(first, 0), first))
    for r in range(1, config.restarts):
        seed = int(np.random.SeedSequence([config.seed, r]).generate_state(1)[0])
        methods.append((f"random[{r}]", RandomInit(seed)))
    for m in extra:
        methods.append((_tag(m, len(methods)), m))
    return methods


def _tag(m: InitMethod, idx: int) -> str:
    if isinstance(m, WarmStart):
        return m.lineage
    if isinstance(m, RandomInit):
        return f"random[{idx}]"
    if isinstance(m, SingleUser):
        return f"single-user[{m.user}]"
    return "mrt-svd"


def _better(a: Solution, b: Solution | None) -> bool:
    if b is None:
        return True
    if a.wsr > b.wsr + TIE_TOL:
        return True
    if a.wsr < b.wsr - TIE_TOL:
        return False
    return a.iterations < b.iterations


def optimize(
    ch: ChannelSet,
    scenario: Scenario,
    wsr_weights,
    config: AoConfig | None = None,
    order: tuple | None = None,
    extra_starts: Sequence[InitMethod] = (),
    strategy: Strategy | None = None,
) -> Solution:
    """Best AO solution over all restarts for ``scenario.strategy`` (or ``strategy``).

    Restarts that hit an infeasible first subproblem or a solver failure are
    skipped; if every restart is infeasible :class:`ScenarioInfeasible` is
    raised, otherwise the last :class:`SolverFailure` propagates.
    """
    config = config or AoConfig()
    strategy = Strategy(strategy or scenario.strategy)
    w = np.asarray(wsr_weights, dtype=float)
    if w.shape != (ch.num_users,) or np.any(~(w > 0)):
        raise InvalidArgument(f"wsr_weights must be {ch.num_users} strictly positive values, got {w}")
    if ch.power_budget is None:
        ch = ch.with_power(scenario.power)
    pt = ch.power_budget
    if sp.prescreen_infeasible(ch, pt, scenario.r0_threshold):
        raise ScenarioInfeasible(
            f"R0th={scenario.r0_threshold} exceeds the multicast rate bound {sp.multicast_rate_bound(ch, pt):.4f}"
        )
    best = None
    failure: Exception | None = None
    for idx, (tag, method) in enumerate(restart_methods(config, extra_starts)):
        p0 = init_precoders(ch, strategy, method, pt, scenario.r0_threshold, order)
        try:
            sol = run_ao(
                ch, p0, w, scenario.r0_threshold, strategy, config.epsilon, config.max_iterations, order, tag
            )
        except ScenarioInfeasible as e:
            log.debug("restart %s infeasible: %s", tag, e)
            failure = failure or e
            continue
        except SolverFailure as e:
            log.warning("restart %s failed: %s", tag, e)
            failure = e
            continue
        if _better(sol, best):
            best = sol
    if best is None:
        assert failure is not None
        raise failure
    return best


def verify_solution(ch: ChannelSet, sol: Solution, r0_threshold: float, tol: float = 1e-6) -> list[str]:
    """Recheck a solution against the original problem; returns a list of problems found."""
    issues = check_constraints(ch, sol.precoder, sol.common_rates, r0_threshold, tol)
    rep = rate_report(ch, sol.precoder, sol.common_rates)
    ref = np.concatenate([rep.common_rate_per_user, rep.private_rates, rep.total_unicast_rates])
    got = np.concatenate(
        [sol.rate_report.common_rate_per_user, sol.rate_report.private_rates, sol.rate_report.total_unicast_rates]
    )
    if np.any(np.abs(ref - got) > tol * np.maximum(1.0, np.abs(ref))):
        issues.append("rate_report_mismatch")
    if sol.strategy is Strategy.MULP and np.any(sol.common_rates.ck0 > 0):
        issues.append("mulp_common_share")
    if sol.strategy is Strategy.SCSIC and sol.order is not None:
        first, *rest = sol.order
        if np.any(np.abs(sol.precoder.private(first)) > 0):
            issues.append("scsic_first_private_nonzero")
        if np.any(sol.common_rates.ck0[list(rest)] > 0):
            issues.append("scsic_second_common_share")
    tr = np.asarray(sol.trace)
    if tr.size > 1 and np.any(np.diff(tr) < -tol):
        issues.append("trace_not_monotone")
    return issues


def write_trace_csv(fh: IO[str], sol: Solution, residuals: Sequence[dict] | None = None) -> None:
    """Per-iteration export: iteration, WSR and (if available) constraint residuals."""
    cols = ["iteration", "wsr"]
    keys = list(residuals[0]) if residuals else []
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(cols + keys)
    offset = sol.iterations + 1 - len(sol.trace)
    for i, v in enumerate(sol.trace):
        row = [i + offset, repr(v)]
        if residuals:
            row += [repr(float(residuals[i][k])) for k in keys]
        wr.writerow(row)
