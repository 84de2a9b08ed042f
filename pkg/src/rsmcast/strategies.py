"""Per-strategy orchestration and the solution maps MU-LP -> RS and SC-SIC -> RS."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .ao import AoConfig, SingleUser, WarmStart, _better, optimize
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
from .rates import rate_report

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StrategyOutcome:
    strategy: Strategy
    solution: Solution
    order: tuple | None = None
    warm_start_lineage: str = ""

    def __post_init__(self):
        if Strategy(self.strategy) is Strategy.SCSIC and self.order is None:
            raise InvalidArgument("SC-SIC outcome must record its decoding order")

    @property
    def wsr(self) -> float:
        return self.solution.wsr


def scsic_orders(k: int) -> list[tuple]:
    if k > 2:
        raise InvalidArgument("SC-SIC is only supported for K <= 2")
    return [tuple(o) for o in itertools.permutations(range(k))]


def _relabel(ch: ChannelSet, sol: Solution, c: CommonRateAllocation, strategy: Strategy, lineage: str) -> Solution:
    rep = rate_report(ch, sol.precoder, c)
    w = np.asarray(sol.wsr_weights)
    return Solution(
        precoder=sol.precoder,
        common_rates=c,
        rate_report=rep,
        trace=sol.trace,
        iterations=sol.iterations,
        converged=sol.converged,
        strategy=strategy,
        wsr_weights=sol.wsr_weights,
        wsr=float(w @ rep.total_unicast_rates) if w.size else 0.0,
        order=None,
        lineage=lineage,
    )


def lift_mulp_to_rs(sol: Solution, ch: ChannelSet | None = None) -> Solution:
    """The same precoder viewed as an RS point with zero unicast common shares."""
    if Strategy(sol.strategy) is not Strategy.MULP:
        raise InvalidArgument(f"expected an MU-LP solution, got {sol.strategy}")
    k = sol.precoder.num_users
    c = CommonRateAllocation(sol.common_rates.c0, np.zeros(k))
    if ch is None:
        rep = sol.rate_report
        return Solution(
            precoder=sol.precoder,
            common_rates=c,
            rate_report=type(rep)(rep.common_rate_per_user, rep.common_rate, rep.private_rates, rep.private_rates.copy()),
            trace=sol.trace,
            iterations=sol.iterations,
            converged=sol.converged,
            strategy=Strategy.RS,
            wsr_weights=sol.wsr_weights,
            wsr=sol.wsr,
            lineage="lift:MULP",
        )
    return _relabel(ch, sol, c, Strategy.RS, "lift:MULP")


def lift_scsic_to_rs(outcome: StrategyOutcome, ch: ChannelSet | None = None) -> Solution:
    """An SC-SIC point as an RS point: the first-decoded user has no private stream and
    its whole unicast rate is its common share; the second user's share is zero."""
    if Strategy(outcome.strategy) is not Strategy.SCSIC:
        raise InvalidArgument("expected an SC-SIC outcome")
    sol = outcome.solution
    if sol.precoder.num_users != 2:
        raise InvalidArgument("SC-SIC lifting is defined for K = 2")
    first, second = outcome.order
    ck0 = np.array(sol.common_rates.ck0, dtype=float)
    ck0[second] = 0.0
    c = CommonRateAllocation(sol.common_rates.c0, ck0)
    cols = np.array(sol.precoder.columns, copy=True)
    cols[:, first + 1] = 0.0
    base = Solution(
        precoder=PrecoderMatrix(cols),
        common_rates=c,
        rate_report=sol.rate_report,
        trace=sol.trace,
        iterations=sol.iterations,
        converged=sol.converged,
        strategy=Strategy.RS,
        wsr_weights=sol.wsr_weights,
        wsr=sol.wsr,
        lineage=f"lift:SCSIC{list(outcome.order)}",
    )
    if ch is None:
        return base
    return _relabel(ch, base, c, Strategy.RS, base.lineage)


def _corner_starts(ch, scenario, wsr_weights, config, order) -> tuple:
    """Warm start at the SC-SIC corner where only the last-decoded user is served.

    AO approaches such corners very slowly (the vanishing stream's gradient
    shrinks with its rate), so the corner is settled first by MU-LP AO from a
    single-user start, where the unused private column stays at zero.
    """
    if len(order) < 2:
        return ()
    cfg = config.replace(restarts=1, init_method=SingleUser(order[-1]))
    try:
        sol = optimize(ch, scenario, wsr_weights, cfg, strategy=Strategy.MULP)
    except (ScenarioInfeasible, SolverFailure) as e:
        log.debug("corner start for order %s skipped: %s", order, e)
        return ()
    return (WarmStart(sol, f"corner[{order[-1]}]"),)


def solve_strategy(
    ch: ChannelSet,
    scenario: Scenario,
    wsr_weights,
    config: AoConfig | None = None,
    strategy: Strategy | None = None,
    warm_from: dict | None = None,
    cross_warm_start: bool = True,
) -> StrategyOutcome:
    """Solve one strategy at one weight vector.

    SC-SIC tries every decoding order and keeps the best; each order also
    warm starts from the corner where the first-decoded user gets no unicast
    rate (see :func:`_corner_starts`). RS additionally
    restarts from the lifted MU-LP and SC-SIC outcomes; pass them in
    ``warm_from`` ({Strategy: StrategyOutcome}) to reuse earlier work, otherwise
    they are computed here when ``cross_warm_start`` is on.
    """
    config = config or AoConfig()
    strategy = Strategy(strategy or scenario.strategy)
    if ch.power_budget is None:
        ch = ch.with_power(scenario.power)
    if strategy is Strategy.MULP:
        sol = optimize(ch, scenario, wsr_weights, config, strategy=Strategy.MULP)
        return StrategyOutcome(Strategy.MULP, sol, None, sol.lineage)
    if strategy is Strategy.SCSIC:
        best = None
        failure = None
        for order in scsic_orders(ch.num_users):
            extra = _corner_starts(ch, scenario, wsr_weights, config, order)
            try:
                sol = optimize(
                    ch, scenario, wsr_weights, config, order=order, extra_starts=extra, strategy=Strategy.SCSIC
                )
            except ScenarioInfeasible as e:
                failure = e
                continue
            if _better(sol, best.solution if best else None):
                best = StrategyOutcome(Strategy.SCSIC, sol, order, sol.lineage)
        if best is None:
            raise failure
        return best

    warm_from = dict(warm_from or {})
    if cross_warm_start:
        for other in (Strategy.MULP, Strategy.SCSIC):
            if other in warm_from:
                continue
            if other is Strategy.SCSIC and ch.num_users > 2:
                continue
            try:
                warm_from[other] = solve_strategy(ch, scenario, wsr_weights, config, other, cross_warm_start=False)
            except ScenarioInfeasible:
                pass
    extra = []
    if cross_warm_start:
        for other in (Strategy.MULP, Strategy.SCSIC):
            out = warm_from.get(other)
            if out is None:
                continue
            if other is Strategy.MULP:
                lifted = lift_mulp_to_rs(out.solution, ch)
                extra.append(WarmStart(lifted, "warm:MULP"))
            elif ch.num_users == 2:
                lifted = lift_scsic_to_rs(out, ch)
                extra.append(WarmStart(lifted, f"warm:SCSIC{list(out.order)}"))
            elif ch.num_users == 1:
                extra.append(WarmStart(out.solution, "warm:SCSIC[0]"))
    sol = optimize(ch, scenario, wsr_weights, config, extra_starts=extra, strategy=Strategy.RS)
    return StrategyOutcome(Strategy.RS, sol, None, sol.lineage)


def solve_all(
    ch: ChannelSet, scenario: Scenario, wsr_weights, config: AoConfig | None = None, strategies=tuple(Strategy)
) -> dict:
    """Outcomes for several strategies at one weight vector, sharing the MU-LP and
    SC-SIC work with the RS warm starts. Infeasible strategies map to the exception."""
    config = config or AoConfig()
    if ch.power_budget is None:
        ch = ch.with_power(scenario.power)
    wanted = [Strategy(s) for s in strategies]
    order = [s for s in (Strategy.MULP, Strategy.SCSIC) if s in wanted or Strategy.RS in wanted]
    if ch.num_users > 2:
        order = [s for s in order if s is not Strategy.SCSIC]
    out: dict = {}
    for s in order:
        try:
            out[s] = solve_strategy(ch, scenario, wsr_weights, config, s, cross_warm_start=False)
        except ScenarioInfeasible as e:
            out[s] = e
    if Strategy.RS in wanted:
        warm = {s: o for s, o in out.items() if isinstance(o, StrategyOutcome)}
        try:
            out[Strategy.RS] = solve_strategy(ch, scenario, wsr_weights, config, Strategy.RS, warm_from=warm)
        except ScenarioInfeasible as e:
            out[Strategy.RS] = e
    return {s: out[s] for s in wanted if s in out}
