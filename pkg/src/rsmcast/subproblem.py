"""Convex precoder / common-rate subproblem for fixed equalizers and MSE weights.

With (g, u) fixed every weighted MSE is a convex quadratic in the precoder, so
the joint (P, x) update is a convex QCQP. It is assembled here directly as a
second-order cone program over real variables

    v = [z, x],   z = [Re p_j, Im p_j for each optimised column j]

and handed to Clarabel (primal-dual interior point, returns infeasibility
certificates). Each quadratic constraint ``||L z||^2 + a.z + c - sum(x) <= 0``
becomes a rotated cone ``||L z||^2 <= t * 1`` written as a standard SOC.

The three strategies differ only in which precoder columns and which entries
of ``x`` exist:

* RS    - all K+1 columns, x = [X0, X_{1,0}, ..., X_{K,0}]
* MULP  - all K+1 columns, x = [X0]
* SCSIC - column of the first-decoded user removed, x = [X0, X_{first,0}]

``x`` is the negated common-rate split: C0 = -X0, C_{k,0} = -X_{k,0}.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import IO

import clarabel
import numpy as np
from scipy import sparse

from .core import ChannelSet, CommonRateAllocation, InvalidArgument, PrecoderMatrix, Strategy
from .rates import LN2, log2_1p
from .wmmse import WmmseState, wmse

FEAS_TOL = 1e-7
SOLVER_TOL = 1e-8
MAX_IPM_ITER = 100


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True)
class SubproblemSpec:
    channel: ChannelSet
    wsr_weights: np.ndarray
    wmmse_state: WmmseState
    r0_threshold: float
    power_budget: float
    strategy: Strategy
    order: tuple | None = None

    def __post_init__(self):
        w = np.asarray(self.wsr_weights, dtype=float)
        if w.shape != (self.channel.num_users,) or np.any(~(w > 0)):
            raise InvalidArgument(f"wsr_weights must be {self.channel.num_users} positive reals, got {w}")
        object.__setattr__(self, "wsr_weights", w)
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.strategy is Strategy.SCSIC:
            k = self.channel.num_users
            if k > 2:
                raise InvalidArgument("SC-SIC is only supported for K <= 2")
            if self.order is None or sorted(self.order) != list(range(k)):
                raise InvalidArgument(f"SC-SIC needs an explicit decoding order over {k} users, got {self.order}")
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if self.r0_threshold < 0:
            raise InvalidArgument("r0_threshold must be >= 0")
        if not self.power_budget > 0:
            raise InvalidArgument("power_budget must be > 0")


@dataclass
class ConeProgram:
    """minimize ½ vᵀPv + qᵀv + const  s.t.  A v + s = b,  s ∈ cones.

    The WSR weights are divided by ``weight_scale`` (their maximum) before
    assembly; :meth:`objective` multiplies it back.

    ``cones`` is a list of ``("zero"|"nonneg"|"soc", dim)``. ``columns`` lists
    the precoder columns carried by ``z`` (each 2*Nt reals); ``x_labels`` names
    the x entries, e.g. ``["X0", "X1"]`` (user indices 0-based).
    """

    P: sparse.csc_matrix
    q: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    cones: list
    const: float
    spec: SubproblemSpec
    columns: list
    x_labels: list
    x_users: list = field(default_factory=list)
    weight_scale: float = 1.0

    @property
    def num_variables(self) -> int:
        return self.q.size

    @property
    def num_z(self) -> int:
        return 2 * self.spec.channel.num_antennas * len(self.columns)

    def objective(self, v: np.ndarray) -> float:
        """sum_k w_k xi_{k,tot} at ``v``, in the caller's (unscaled) weights."""
        # P holds the upper triangle only
        Pv = self.P @ v + self.P.T @ v - self.P.diagonal() * v
        return self.weight_scale * float(0.5 * v @ Pv + self.q @ v + self.const)


@dataclass(frozen=True)
class SubproblemSolution:
    precoder: PrecoderMatrix | None
    x: np.ndarray | None
    objective: float
    status: Status
    iterations: int = 0
    residual: float = 0.0


def _embed(h: np.ndarray) -> np.ndarray:
    """2 x 2Nt real matrix E with E @ [Re p, Im p] = [Re h^H p, Im h^H p]."""
    hr, hi = h.real, h.imag
    return np.vstack([np.concatenate([hr, hi]), np.concatenate([-hi, hr])])


def _layout(spec: SubproblemSpec):
    k = spec.channel.num_users
    if spec.strategy is Strategy.SCSIC:
        first = spec.order[0]
        columns = [0] + [j + 1 for j in range(k) if j != first]
        x_users = [first]
    elif spec.strategy is Strategy.MULP:
        columns = list(range(k + 1))
        x_users = []
    else:
        columns = list(range(k + 1))
        x_users = list(range(k))
    return columns, x_users


def _wmse_coeffs(u: float) -> tuple[float, float]:
    """xi = a * mse + b for a fixed MSE weight (see :func:`rsmcast.wmmse.wmse`)."""
    return u / LN2, 1.0 - (math.log(u) + 1.0) / LN2


def _build(spec: SubproblemSpec) -> ConeProgram:
    ch = spec.channel
    h = ch.channels
    k_users, nt = ch.num_users, ch.num_antennas
    st = spec.wmmse_state
    # solve with weights scaled to max 1; objective() undoes the scaling
    scale = float(np.max(spec.wsr_weights))
    w = spec.wsr_weights / scale
    columns, x_users = _layout(spec)
    ncol = len(columns)
    nz = 2 * nt * ncol
    nx = 1 + len(x_users)
    nv = nz + nx
    blk = {c: slice(2 * nt * i, 2 * nt * (i + 1)) for i, c in enumerate(columns)}
    emb = [_embed(h[k]) for k in range(k_users)]

    # objective: sum_k w_k (X_{k,0} + xi_k)
    Q = np.zeros((nz, nz))
    q = np.zeros(nv)
    const = 0.0
    for k in range(k_users):
        u, kappa = _wmse_coeffs(st.u_private[k])
        g = st.g_private[k]
        EtE = emb[k].T @ emb[k]
        coef = w[k] * u * abs(g) ** 2
        for c in columns[1:]:
            Q[blk[c], blk[c]] += coef * EtE
        if k + 1 in blk:
            q[blk[k + 1]] += -2.0 * w[k] * u * (g.real * emb[k][0] - g.imag * emb[k][1])
        const += w[k] * (u * (abs(g) ** 2 + 1.0) + kappa)
    for i, k in enumerate(x_users):
        q[nz + 1 + i] += w[k]
    Pm = sparse.csc_matrix(np.triu(2.0 * np.pad(Q, ((0, nx), (0, nx)))))

    rows_A, rows_b, cones = [], [], []

    # common-stream constraints, one rotated cone per user
    for k in range(k_users):
        u, kappa = _wmse_coeffs(st.u_common[k])
        g = st.g_common[k]
        L = np.zeros((2 * ncol, nv))
        s = math.sqrt(u) * abs(g)
        for i, c in enumerate(columns):
            L[2 * i : 2 * i + 2, blk[c]] = s * emb[k]
        a = np.zeros(nv)
        a[blk[0]] = -2.0 * u * (g.real * emb[k][0] - g.imag * emb[k][1])
        a[nz:] = -1.0
        c0 = u * (abs(g) ** 2 + 1.0) + kappa - 1.0
        # t = -(a.v + c0) >= ||L z||^2 ; cone s = [(t+1)/2, (t-1)/2, L z]
        F = np.vstack([-a / 2.0, -a / 2.0, L])
        f = np.concatenate([[(1.0 - c0) / 2.0, (-1.0 - c0) / 2.0], np.zeros(2 * ncol)])
        rows_A.append(-F)
        rows_b.append(f)
        cones.append(("soc", F.shape[0]))

    # X0 <= -R0th and X_{k,0} <= 0
    lin = np.zeros((nx, nv))
    lin[np.arange(nx), nz + np.arange(nx)] = 1.0
    lb = np.zeros(nx)
    lb[0] = -spec.r0_threshold
    rows_A.append(lin)
    rows_b.append(lb)
    cones.append(("nonneg", nx))

    # ||z|| <= sqrt(Pt)
    F = np.zeros((1 + nz, nv))
    F[1:, :nz] = np.eye(nz)
    rows_A.append(-F)
    rows_b.append(np.concatenate([[math.sqrt(spec.power_budget)], np.zeros(nz)]))
    cones.append(("soc", 1 + nz))

    A = sparse.csc_matrix(np.vstack(rows_A))
    b = np.concatenate(rows_b)
    labels = ["X0"] + [f"X{k}" for k in x_users]
    return ConeProgram(Pm, q, A, b, cones, float(const), spec, columns, labels, x_users, scale)


def build_rs_subproblem(spec: SubproblemSpec) -> ConeProgram:
    if spec.strategy is not Strategy.RS:
        raise InvalidArgument("build_rs_subproblem needs an RS spec")
    return _build(spec)


def build_mulp_subproblem(spec: SubproblemSpec) -> ConeProgram:
    if spec.strategy is not Strategy.MULP:
        raise InvalidArgument("build_mulp_subproblem needs an MULP spec")
    return _build(spec)


def build_scsic_subproblem(spec: SubproblemSpec) -> ConeProgram:
    if spec.strategy is not Strategy.SCSIC:
        raise InvalidArgument("build_scsic_subproblem needs an SCSIC spec")
    return _build(spec)


def build(spec: SubproblemSpec) -> ConeProgram:
    return _build(spec)


def multicast_rate_bound(ch: ChannelSet, power_budget: float) -> float:
    """Upper bound on any achievable common-stream rate: the weakest user with all power on it."""
    return float(log2_1p(power_budget * np.min(np.sum(np.abs(ch.channels) ** 2, axis=1))))


def prescreen_infeasible(ch: ChannelSet, power_budget: float, r0_threshold: float) -> bool:
    """Cheap necessary condition; ``True`` means the threshold is certainly unattainable."""
    return r0_threshold > multicast_rate_bound(ch, power_budget)


def _cone_objects(cones):
    out = []
    for kind, dim in cones:
        if kind == "zero":
            out.append(clarabel.ZeroConeT(dim))
        elif kind == "nonneg":
            out.append(clarabel.NonnegativeConeT(dim))
        else:
            out.append(clarabel.SecondOrderConeT(dim))
    return out


def _settings(max_iter: int):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = SOLVER_TOL
    s.tol_gap_rel = SOLVER_TOL
    s.tol_feas = SOLVER_TOL
    s.max_threads = 1
    return s


def unpack(program: ConeProgram, v: np.ndarray) -> tuple[PrecoderMatrix, np.ndarray]:
    ch = program.spec.channel
    nt = ch.num_antennas
    cols = np.zeros((nt, ch.num_users + 1), dtype=complex)
    for i, c in enumerate(program.columns):
        seg = v[2 * nt * i : 2 * nt * (i + 1)]
        cols[:, c] = seg[:nt] + 1j * seg[nt:]
    return PrecoderMatrix(cols), np.asarray(v[program.num_z :], dtype=float)


def common_wmse(program: ConeProgram, p: PrecoderMatrix) -> np.ndarray:
    """Weighted MSE of the common layer at fixed (g, u), per user."""
    spec = program.spec
    st = spec.wmmse_state
    a = spec.channel.channels.conj() @ p.columns
    t = np.sum(np.abs(a) ** 2, axis=1) + 1.0
    e = np.abs(st.g_common) ** 2 * t - 2.0 * np.real(st.g_common * a[:, 0]) + 1.0
    return wmse(st.u_common, e)


def residual(program: ConeProgram, p: PrecoderMatrix, x: np.ndarray) -> float:
    """Largest constraint violation of (P, x); power measured relative to the budget."""
    spec = program.spec
    xi = common_wmse(program, p)
    viol = [
        float(np.max(xi - 1.0 - np.sum(x))),
        x[0] + spec.r0_threshold,
        float(np.max(x[1:], initial=-np.inf)),
        p.total_power / spec.power_budget - 1.0,
    ]
    return max(0.0, max(viol))


def _repair(program: ConeProgram, v: np.ndarray) -> np.ndarray:
    """Pull a solver point (feasible to ~1e-8) exactly inside the feasible set.

    The precoder is scaled onto the power ball and the x bounds are clipped.
    Any remaining shortfall in a common-stream constraint is then absorbed by
    raising the unicast entries of x towards zero, cheapest weight first. All
    moves are of the order of the solver tolerance.
    """
    v = v.copy()
    nz = program.num_z
    pt = program.spec.power_budget
    pw = float(v[:nz] @ v[:nz])
    if pw > pt:
        v[:nz] *= math.sqrt(pt / pw)
    x = v[nz:]
    x[0] = min(x[0], -program.spec.r0_threshold)
    x[1:] = np.minimum(x[1:], 0.0)
    p, _ = unpack(program, v)
    deficit = float(np.max(common_wmse(program, p))) - 1.0 - float(np.sum(x))
    if deficit > 0 and len(x) > 1:
        w = program.spec.wsr_weights[program.x_users]  # order only
        for i in np.argsort(w, kind="stable"):
            step = min(deficit, -x[1 + i])
            x[1 + i] += step
            deficit -= step
            if deficit <= 0:
                break
    return v


def _clarabel(program: ConeProgram, max_iter: int, equilibrate: bool = True):
    settings = _settings(max_iter)
    settings.equilibrate_enable = equilibrate
    solver = clarabel.DefaultSolver(
        program.P, program.q, program.A, program.b, _cone_objects(program.cones), settings
    )
    sol = solver.solve()
    return str(sol.status), np.asarray(sol.x, dtype=float), sol.iterations


def _cvxopt(program: ConeProgram, max_iter: int):
    import cvxopt

    rows_l, rows_q, dims_q = [], [], []
    r = 0
    for kind, dim in program.cones:
        if kind == "nonneg":
            rows_l.extend(range(r, r + dim))
        elif kind == "soc":
            rows_q.extend(range(r, r + dim))
            dims_q.append(dim)
        else:  # pragma: no cover - builders emit no equality rows
            raise NotImplementedError(kind)
        r += dim
    rows = rows_l + rows_q
    G = program.A.toarray()[rows]
    h = program.b[rows]
    P = program.P.toarray()
    P = P + P.T - np.diag(np.diag(P))
    opts = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-10, "maxiters": max_iter}
    try:
        res = cvxopt.solvers.coneqp(
            cvxopt.matrix(P),
            cvxopt.matrix(program.q),
            cvxopt.matrix(G),
            cvxopt.matrix(h),
            {"l": len(rows_l), "q": dims_q, "s": []},
            options=opts,
        )
    except (ValueError, ArithmeticError) as e:
        return f"error: {e}", None, 0
    if res["x"] is None:
        return str(res["status"]), None, res.get("iterations", 0)
    return str(res["status"]), np.asarray(res["x"], dtype=float).ravel(), res.get("iterations", 0)


def solve(program: ConeProgram, max_iter: int = MAX_IPM_ITER) -> SubproblemSolution:
    """Solve with Clarabel; on an inconclusive exit retry without equilibration and,
    if that is inconclusive too, with CVXOPT's cone QP. The best point that passes
    the feasibility check wins.

    Infeasibility is reported only on a primal-infeasibility certificate from Clarabel.
    """
    status, v, iters = _clarabel(program, max_iter)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SubproblemSolution(None, None, math.inf, Status.INFEASIBLE, iters)
    candidates = []
    if status in ("Solved", "AlmostSolved"):
        candidates.append((v, iters))
    if status != "Solved":
        st2, v2, it2 = _clarabel(program, max_iter, equilibrate=False)
        if st2 in ("Solved", "AlmostSolved"):
            candidates.append((v2, iters + it2))
        if st2 != "Solved":
            st3, v3, it3 = _cvxopt(program, max_iter)
            if v3 is not None and st3 in ("optimal", "unknown"):
                candidates.append((v3, iters + it2 + it3))
    best = None
    for v, it in candidates:
        if not np.all(np.isfinite(v)):
            continue
        v = _repair(program, v)
        p, x = unpack(program, v)
        res = residual(program, p, x)
        if res > FEAS_TOL:
            continue
        obj = program.objective(v)
        if best is None or obj < best.objective:
            best = SubproblemSolution(p, x, obj, Status.OPTIMAL, it, res)
    if best is None:
        return SubproblemSolution(None, None, math.nan, Status.NUMERICAL_FAILURE, iters)
    return best


def common_rates_from_x(program: ConeProgram, x: np.ndarray) -> CommonRateAllocation:
    """Map the solver's x back to a common-rate split (c = -x, clipped at zero)."""
    k = program.spec.channel.num_users
    ck0 = np.zeros(k)
    for i, user in enumerate(program.x_users):
        ck0[user] = max(0.0, -x[1 + i])
    return CommonRateAllocation(max(0.0, -x[0]), ck0)


def pack(program: ConeProgram, p: PrecoderMatrix, x) -> np.ndarray:
    """Inverse of :func:`unpack`; columns not carried by the program are dropped."""
    z = np.concatenate([np.concatenate([p.columns[:, c].real, p.columns[:, c].imag]) for c in program.columns])
    return np.concatenate([z, np.asarray(x, dtype=float)])


def dump(program: ConeProgram, fh: IO[str]) -> None:
    """Write the cone program as plain text.

    Format::

        # rsmcast cone program
        strategy <RS|MULP|SCSIC>
        dims <n variables> <m constraint rows>
        columns <precoder column indices carried by z>
        x <labels>
        const <objective constant>
        weight_scale <factor applied to the objective>
        cones <count>
        <kind> <dim>            (one line each, in row order)
        q <n>
        <i> <value>             (nonzeros)
        P <nnz>                 (upper triangle)
        <i> <j> <value>
        A <nnz>
        <i> <j> <value>
        b <m>
        <i> <value>             (nonzeros)

    Indices are 0-based; floats use ``repr`` so the round trip is exact.
    """
    P = sparse.coo_matrix(program.P)
    A = sparse.coo_matrix(program.A)
    w = fh.write
    w("# rsmcast cone program\n")
    w(f"strategy {program.spec.strategy.value}\n")
    w(f"dims {program.num_variables} {A.shape[0]}\n")
    w("columns " + " ".join(str(c) for c in program.columns) + "\n")
    w("x " + " ".join(program.x_labels) + "\n")
    w(f"const {float(program.const)!r}\n")
    w(f"weight_scale {float(program.weight_scale)!r}\n")
    w(f"cones {len(program.cones)}\n")
    for kind, dim in program.cones:
        w(f"{kind} {dim}\n")
    nzq = np.flatnonzero(program.q)
    w(f"q {nzq.size}\n")
    for i in nzq:
        w(f"{i} {float(program.q[i])!r}\n")
    w(f"P {P.nnz}\n")
    for i, j, val in zip(P.row, P.col, P.data):
        w(f"{i} {j} {float(val)!r}\n")
    w(f"A {A.nnz}\n")
    for i, j, val in zip(A.row, A.col, A.data):
        w(f"{i} {j} {float(val)!r}\n")
    nzb = np.flatnonzero(program.b)
    w(f"b {nzb.size}\n")
    for i in nzb:
        w(f"{i} {float(program.b[i])!r}\n")


def load_dump(fh: IO[str]) -> dict:
    """Parse :func:`dump` output into ``{"P", "q", "A", "b", "cones", "const", ...}``."""
    lines = [ln.split() for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    it = iter(lines)
    out: dict = {}
    out["strategy"] = next(it)[1]
    _, n, m = next(it)
    n, m = int(n), int(m)
    out["columns"] = [int(c) for c in next(it)[1:]]
    out["x_labels"] = next(it)[1:]
    out["const"] = float(next(it)[1])
    out["weight_scale"] = float(next(it)[1])
    ncones = int(next(it)[1])
    out["cones"] = [(kind, int(d)) for kind, d in (next(it) for _ in range(ncones))]

    def triplets(count):
        rows = [next(it) for _ in range(count)]
        return rows

    q = np.zeros(n)
    for i, val in triplets(int(next(it)[1])):
        q[int(i)] = float(val)
    rows = triplets(int(next(it)[1]))
    P = sparse.csc_matrix(
        ([float(r[2]) for r in rows], ([int(r[0]) for r in rows], [int(r[1]) for r in rows])), shape=(n, n)
    )
    rows = triplets(int(next(it)[1]))
    A = sparse.csc_matrix(
        ([float(r[2]) for r in rows], ([int(r[0]) for r in rows], [int(r[1]) for r in rows])), shape=(m, n)
    )
    b = np.zeros(m)
    for i, val in triplets(int(next(it)[1])):
        b[int(i)] = float(val)
    out.update(P=P, q=q, A=A, b=b)
    return out
