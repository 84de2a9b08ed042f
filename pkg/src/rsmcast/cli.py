"""Batch front-end: ``rsmcast run|plot-data|verify|oracle``.

Exit codes: 0 success, 1 config or input error, 2 infeasible-scenario budget
exceeded, 3 solver-failure budget exceeded, 4 verification or oracle check failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import platform
import re
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .ao import AoConfig, optimize
from .channel import GENERATOR_NAME, deterministic_channel, random_channel
from .core import InvalidArgument, Scenario, ScenarioInfeasible, SolverFailure, Strategy
from .region import (
    FAILED,
    INFEASIBLE,
    GridSpec,
    RateRegionResult,
    brute_force_oracle,
    pareto_frontier,
    read_region_csv,
    recheck_region,
    sweep_strategies,
)

log = logging.getLogger("rsmcast")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3, 4
ORACLE_MARGIN = 0.05

_ANGLE = re.compile(r"^\s*(?P<num>[0-9.]+)?\s*\*?\s*pi\s*(?:/\s*(?P<den>[0-9.]+))?\s*$")


def parse_angle(v) -> float:
    """Radians from a number or a rational multiple of pi such as "2*pi/9" or "pi/3"."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if not isinstance(v, str):
        raise InvalidArgument(f"cannot read angle {v!r}")
    m = _ANGLE.match(v)
    if m is None:
        try:
            return float(v)
        except ValueError:
            raise InvalidArgument(f"cannot read angle {v!r}") from None
    num = float(m["num"]) if m["num"] else 1.0
    den = float(m["den"]) if m["den"] else 1.0
    if den == 0:
        raise InvalidArgument(f"zero denominator in angle {v!r}")
    return num * math.pi / den


def _angle_label(v) -> str:
    s = str(v) if isinstance(v, str) else repr(float(v))
    return re.sub(r"[^0-9A-Za-z.]+", "_", s.replace("*", "")).strip("_")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass(frozen=True)
class ScenarioGroup:
    """One physical setting; all strategies share its per-weight solves."""

    name: str
    scenario: Scenario
    strategies: tuple
    channel_kind: str
    channel_seed: int


@dataclass
class ExperimentConfig:
    groups: list
    ao: AoConfig
    output_dir: Path
    seed: int = 0
    parallelism: int = 1
    max_infeasible_regions: int = 0
    max_failure_rate: float = 0.01
    raw: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def scenarios(self) -> list[Scenario]:
        return [g.scenario.replace(strategy=s) for g in self.groups for s in g.strategies]


def load_config(path: Path, overrides: argparse.Namespace | None = None) -> ExperimentConfig:
    data = path.read_bytes()
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise InvalidArgument(f"{path}: {e}") from None
    return config_from_dict(raw, path.parent, overrides, hashlib.sha256(data).hexdigest())


def config_from_dict(raw: dict, base: Path, overrides=None, config_hash: str = "") -> ExperimentConfig:
    known = {"seed", "parallelism", "output_dir", "scenario", "ao", "budget", "weights"}
    extra = set(raw) - known
    if extra:
        raise InvalidArgument(f"unknown config keys: {sorted(extra)}")
    o = overrides or argparse.Namespace()
    seed = int(getattr(o, "seed", None) if getattr(o, "seed", None) is not None else raw.get("seed", 0))
    par = getattr(o, "parallelism", None) or raw.get("parallelism", 1)
    if int(par) < 1:
        raise InvalidArgument(f"parallelism must be >= 1, got {par}")
    out = getattr(o, "output_dir", None) or raw.get("output_dir", "results")
    out = Path(out)
    if not out.is_absolute() and getattr(o, "output_dir", None) is None:
        out = base / out

    aod = dict(raw.get("ao", {}))
    if getattr(o, "epsilon", None) is not None:
        aod["epsilon"] = o.epsilon
    if getattr(o, "max_iter", None) is not None:
        aod["max_iterations"] = o.max_iter
    bad = set(aod) - {"epsilon", "max_iterations", "restarts"}
    if bad:
        raise InvalidArgument(f"unknown [ao] keys: {sorted(bad)}")
    ao = AoConfig(
        epsilon=float(aod.get("epsilon", 1e-4)),
        max_iterations=int(aod.get("max_iterations", 300)),
        restarts=int(aod.get("restarts", 3)),
        seed=seed,
    )

    wd = raw.get("weights", {})
    if "u2_exponents" in wd:
        wgrid = tuple((1.0, float(10.0 ** float(e))) for e in wd["u2_exponents"])
    elif "vectors" in wd:
        wgrid = tuple(tuple(float(x) for x in u) for u in wd["vectors"])
    else:
        wgrid = ()

    sd = dict(raw.get("scenario", {}))
    allowed = {"nt", "k", "snr_db", "gamma", "theta", "r0_threshold", "strategies", "channel", "channel_seed"}
    bad = set(sd) - allowed
    if bad:
        raise InvalidArgument(f"unknown [scenario] keys: {sorted(bad)}")
    kind = sd.get("channel", "deterministic")
    if kind not in ("deterministic", "random"):
        raise InvalidArgument(f"channel must be 'deterministic' or 'random', got {kind!r}")
    strategies = tuple(Strategy(s) for s in _as_list(sd.get("strategies", [s.value for s in Strategy])))
    groups = []
    axes = [
        _as_list(sd.get("nt", 4)),
        _as_list(sd.get("k", 2)),
        _as_list(sd.get("snr_db", 20.0)),
        _as_list(sd.get("gamma", 1.0)),
        _as_list(sd.get("theta", 0.0)),
        _as_list(sd.get("r0_threshold", 0.5)),
    ]
    if strategies:
        for nt, k, snr, gamma, theta, r0 in itertools.product(*axes):
            sc = Scenario(int(nt), int(k), float(snr), float(gamma), parse_angle(theta), float(r0), strategies[0], wgrid)
            if not wgrid and sc.k != 2:
                raise InvalidArgument("K != 2 needs explicit [weights] vectors")
            name = f"nt{sc.nt}_k{sc.k}_snr{snr:g}_g{gamma:g}_th{_angle_label(theta)}_r{r0:g}"
            groups.append(ScenarioGroup(name, sc, strategies, kind, int(sd.get("channel_seed", seed))))
    bd = raw.get("budget", {})
    return ExperimentConfig(
        groups=groups,
        ao=ao,
        output_dir=out,
        seed=seed,
        parallelism=int(par),
        max_infeasible_regions=int(bd.get("max_infeasible_regions", 0)),
        max_failure_rate=float(bd.get("max_failure_rate", 0.01)),
        raw=raw,
        config_hash=config_hash,
    )


def channel_for(group: ScenarioGroup):
    sc = group.scenario
    if group.channel_kind == "random":
        ch = random_channel(group.channel_seed, sc.nt, sc.k)
    else:
        if sc.k != 2:
            raise InvalidArgument("the deterministic channel is defined for K = 2")
        ch = deterministic_channel(sc.nt, sc.gamma, sc.theta)
    return ch.with_power(sc.power)


# ------------------------------------------------------------------ file helpers


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _trace_csv(region: RateRegionResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["u1", "u2", "iteration", "wsr", "lineage"])
    for p in region.points:
        if p.solution is None:
            continue
        sol = p.solution
        offset = sol.iterations + 1 - len(sol.trace)
        for i, v in enumerate(sol.trace):
            wr.writerow([repr(p.weights[0]), repr(p.weights[1]) if len(p.weights) > 1 else "", i + offset, repr(v), sol.lineage])
    return buf.getvalue()


def _versions() -> dict:
    import clarabel
    import cvxopt
    import scipy

    return {
        "rsmcast": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "clarabel": clarabel.__version__,
        "cvxopt": cvxopt.__version__,
    }


# ------------------------------------------------------------------ verbs


def cmd_run(args) -> int:
    cfg = load_config(Path(args.config), args)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": str(Path(args.config).resolve()),
        "config_hash": cfg.config_hash,
        "generator": GENERATOR_NAME,
        "seed": cfg.seed,
        "restart_seeds": [
            int(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0]) for r in range(1, cfg.ao.restarts)
        ],
        "ao": {"epsilon": cfg.ao.epsilon, "max_iterations": cfg.ao.max_iterations, "restarts": cfg.ao.restarts},
        "parallelism": cfg.parallelism,
        "versions": _versions(),
        "scenarios": [],
    }
    infeasible_regions = 0
    failed = total = 0
    t_all = time.perf_counter()
    for g in cfg.groups:
        t0 = time.perf_counter()
        ch = channel_for(g)
        regions = sweep_strategies(ch, g.scenario, cfg.ao, g.strategies, parallelism=cfg.parallelism)
        entry = {"name": g.name, "scenario": g.scenario.to_dict(), "channel": g.channel_kind, "channel_seed": g.channel_seed, "regions": []}
        for s, reg in regions.items():
            stem = f"{g.name}_{s.value}"
            csv_text = reg.to_csv_string()
            buf = io.StringIO()
            reg.to_json(buf)
            atomic_write(out / f"{stem}.csv", csv_text)
            atomic_write(out / f"{stem}.json", buf.getvalue())
            atomic_write(out / "traces" / f"{stem}.csv", _trace_csv(reg))
            n_inf = sum(p.status == INFEASIBLE for p in reg.points)
            n_fail = sum(p.status == FAILED for p in reg.points)
            total += len(reg.points)
            failed += n_fail
            if reg.points and n_inf == len(reg.points):
                infeasible_regions += 1
                log.warning("%s: every weight vector infeasible for %s", g.name, s.value)
            entry["regions"].append(
                {"strategy": s.value, "csv": f"{stem}.csv", "json": f"{stem}.json", "csv_sha256": _sha256(csv_text),
                 "points": len(reg.points), "infeasible": n_inf, "failed": n_fail}
            )
        entry["seconds"] = round(time.perf_counter() - t0, 3)
        manifest["scenarios"].append(entry)
        log.info("%s done in %.1fs", g.name, entry["seconds"])
    manifest["seconds"] = round(time.perf_counter() - t_all, 3)
    manifest["ao_runs"] = total
    manifest["failed_points"] = failed
    manifest["infeasible_regions"] = infeasible_regions
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if total and failed / total > cfg.max_failure_rate:
        log.error("solver failures %d/%d exceed budget %.3g", failed, total, cfg.max_failure_rate)
        return EXIT_SOLVER
    if infeasible_regions > cfg.max_infeasible_regions:
        log.error("%d infeasible regions exceed budget %d", infeasible_regions, cfg.max_infeasible_regions)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _load_region_any(path: Path) -> tuple[RateRegionResult | None, list[dict]]:
    """(JSON region if available, CSV-style rows)."""
    if path.suffix == ".json":
        with path.open() as fh:
            try:
                reg = RateRegionResult.from_json(fh)
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise InvalidArgument(f"{path} is not a region file ({e!r})") from None
        rows = [
            {"strategy": reg.label, "u1": p.weights[0], "u2": p.weights[1], "R1": p.rates[0], "R2": p.rates[1],
             "wsr": p.wsr, "iterations": p.iterations, "status": p.status}
            for p in reg.points
        ]
        return reg, rows
    with path.open(newline="") as fh:
        rows = read_region_csv(fh)
    side = path.with_suffix(".json")
    reg = None
    if side.exists():
        with side.open() as fh:
            reg = RateRegionResult.from_json(fh)
    return reg, rows


@dataclass(frozen=True)
class _Row:
    rates: tuple
    weights: tuple
    status: str

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def frontier_table(rows: list[dict]) -> list[_Row]:
    pts = [_Row((r["R1"], r["R2"]), (r["u1"], r["u2"]), r["status"]) for r in rows]
    return list(pareto_frontier(pts))


def cmd_plot_data(args) -> int:
    out = Path(args.output_dir or ".")
    tables = []
    key = None
    for f in args.files:
        path = Path(f)
        reg, rows = _load_region_any(path)
        if reg is not None:
            k = reg.scenario.key()
            if key is not None and k != key:
                raise InvalidArgument(f"{path} comes from a different scenario ({k} vs {key})")
            key = k
        label = rows[0]["strategy"] if rows else path.stem
        tables.append((path.stem, label, frontier_table(rows)))
    combined = io.StringIO()
    for i, (stem, label, fr) in enumerate(tables):
        buf = io.StringIO()
        buf.write(f"# {label} pareto frontier: R1 R2 u1 u2\n")
        for p in fr:
            buf.write(f"{p.rates[0]!r} {p.rates[1]!r} {p.weights[0]!r} {p.weights[1]!r}\n")
        atomic_write(out / f"{stem}.frontier.dat", buf.getvalue())
        if i:
            combined.write("\n\n")
        combined.write(buf.getvalue())
    # gnuplot: one index block per strategy
    atomic_write(out / "combined.frontier.dat", combined.getvalue())
    for stem, label, fr in tables:
        print(f"{label}: {len(fr)} frontier points -> {out / (stem + '.frontier.dat')}")
    return EXIT_OK


def cmd_verify(args) -> int:
    path = Path(args.region_file)
    reg, rows = _load_region_any(path)
    if reg is None:
        raise InvalidArgument(f"{path}: verification needs the JSON region file")
    issues = recheck_region(reg)
    if path.suffix == ".csv" and path.read_text() != reg.to_csv_string():
        issues.append("CSV does not match the JSON region file")
    for msg in issues:
        print(f"FAIL {msg}")
    print(f"{path}: {len(reg.points)} points, {len(reg.pareto_frontier)} on the frontier, {len(issues)} issue(s)")
    return EXIT_OK if not issues else EXIT_CHECK


def cmd_oracle(args) -> int:
    path = Path(args.config)
    try:
        raw = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise InvalidArgument(f"{path}: {e}") from None
    nt, k = int(raw.get("nt", 2)), int(raw.get("k", 2))
    power = float(raw.get("power", 10.0))
    weights = tuple(float(x) for x in raw.get("weights", [1.0] * k))
    seeds = [int(s) for s in raw.get("seeds", range(5))]
    thresholds = [float(r) for r in _as_list(raw.get("r0_threshold", [0.0, 0.3]))]
    strategy = Strategy(raw.get("strategy", "RS"))
    grid = GridSpec(**raw.get("grid", {}))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    ao = AoConfig(
        epsilon=args.epsilon if args.epsilon is not None else 1e-4,
        max_iterations=args.max_iter if args.max_iter is not None else 300,
        seed=seed,
    )
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["seed", "r0_threshold", "ao_wsr", "oracle_wsr", "gap", "pass"])
    ok_all = True
    for s, r0 in itertools.product(seeds, thresholds):
        ch = random_channel(s, nt, k).with_power(power)
        sc = Scenario(nt, k, 10 * math.log10(power), 1.0, 0.0, r0, strategy)
        orc = brute_force_oracle(ch, sc, weights, grid)
        try:
            ao_wsr = optimize(ch, sc, weights, ao).wsr
        except (ScenarioInfeasible, SolverFailure):
            ao_wsr = -math.inf
        ok = ao_wsr >= orc - ORACLE_MARGIN
        ok_all &= ok
        wr.writerow([s, repr(r0), repr(ao_wsr), repr(orc), repr(ao_wsr - orc), "yes" if ok else "no"])
        print(f"seed={s} R0th={r0:g}: AO {ao_wsr:.6f}  oracle {orc:.6f}  {'PASS' if ok else 'FAIL'}")
    if args.output_dir:
        atomic_write(Path(args.output_dir) / "oracle.csv", buf.getvalue())
    return EXIT_OK if ok_all else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsmcast", description="Precoder optimisation and rate-region sweeps.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--parallelism", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--output-dir")

    p = sub.add_parser("run", help="run every scenario x strategy sweep in a config")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("plot-data", help="frontier tables for plotting")
    p.add_argument("files", nargs="+")
    common(p)
    p.set_defaults(func=cmd_plot_data)
    p = sub.add_parser("verify", help="recheck every invariant of a region file")
    p.add_argument("region_file")
    common(p)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("oracle", help="compare AO against the grid oracle on tiny instances")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
