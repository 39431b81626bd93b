"""Small dense second-order cone programs.

Programs are stated over named vector blocks with a linear objective, an
acyclic chain of affine equalities, ellipsoid constraints ``||x||_M <= beta``,
Euclidean balls ``||x||_2 <= D`` and plain linear inequalities. Equalities are
eliminated symbolically so the solver only sees the free blocks; the reduced
problem is solved by a log-barrier interior-point method with a phase-I
feasibility stage. Barrier iterates are strictly feasible, so reported
solutions satisfy every cone constraint exactly rather than to a tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .mdp import ValidationError


class StructuralError(ValidationError):
    """The equality graph is cyclic or references unknown blocks."""


@dataclass
class Equality:
    target: str
    terms: dict  # block -> matrix (d_target x d_block)
    const: np.ndarray


@dataclass
class ConicProgram:
    """Container for a program over named blocks; see the module docstring."""

    blocks: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    objective_const: float = 0.0
    equalities: list = field(default_factory=list)
    ellipsoids: list = field(default_factory=list)  # (block, M, radius)
    balls: list = field(default_factory=list)       # (block, radius)
    linear: list = field(default_factory=list)      # ({block: G}, rhs): sum G x <= rhs

    def add_block(self, name: str, dim: int) -> str:
        if name in self.blocks:
            raise StructuralError(f"duplicate block {name!r}")
        self.blocks[name] = int(dim)
        return name

    def set_objective(self, block: str, coef) -> None:
        self._check(block)
        self.objective[block] = np.asarray(coef, dtype=float).reshape(self.blocks[block])

    def add_equality(self, target: str, terms: dict, const=None) -> None:
        self._check(target)
        d = self.blocks[target]
        mats = {}
        for b, m in terms.items():
            self._check(b)
            m = np.asarray(m, dtype=float)
            if m.shape != (d, self.blocks[b]):
                raise StructuralError(f"equality {target} <- {b}: matrix shape {m.shape}")
            mats[b] = m
        c = np.zeros(d) if const is None else np.asarray(const, dtype=float).reshape(d)
        if any(e.target == target for e in self.equalities):
            raise StructuralError(f"block {target!r} defined twice")
        self.equalities.append(Equality(target, mats, c))

    def add_ellipsoid(self, block: str, matrix, radius: float) -> None:
        self._check(block)
        m = np.asarray(matrix, dtype=float)
        if radius < 0:
            raise ValidationError("ellipsoid radius must be non-negative")
        if m.shape != (self.blocks[block],) * 2 or np.linalg.eigvalsh(0.5 * (m + m.T)).min() <= 0:
            raise ValidationError("ellipsoid matrix must be SPD of the block's size")
        self.ellipsoids.append((block, m, float(radius)))

    def add_ball(self, block: str, radius: float) -> None:
        self._check(block)
        if radius < 0:
            raise ValidationError("ball radius must be non-negative")
        self.balls.append((block, float(radius)))

    def add_linear(self, terms: dict, rhs) -> None:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        mats = {}
        for b, g in terms.items():
            self._check(b)
            g = np.asarray(g, dtype=float).reshape(rhs.size, self.blocks[b])
            mats[b] = g
        self.linear.append((mats, rhs))

    def _check(self, block):
        if block not in self.blocks:
            raise StructuralError(f"unknown block {block!r}")


@dataclass
class ReducedProgram:
    """Program over the concatenated free blocks ``x``.

    ``maps[name] = (T, t0)`` reconstructs every block as ``T @ x + t0``.
    Cone constraints are ``||A x + b||_2 <= r`` and linear ones ``G x <= g``.
    """

    source: ConicProgram
    free: list
    n: int
    c: np.ndarray
    c0: float
    maps: dict
    socs: list   # (A, b, r, tag)
    G: np.ndarray
    g: np.ndarray

    def reconstruct(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        return {name: T @ x + t0 for name, (T, t0) in self.maps.items()}

    def objective(self, x) -> float:
        return float(self.c @ x + self.c0)


def eliminate_equalities(program: ConicProgram) -> ReducedProgram:
    """Rewrite the program over its free blocks by substituting the equality chain."""
    defs = {e.target: e for e in program.equalities}
    free = [b for b in program.blocks if b not in defs]
    offsets, n = {}, 0
    for b in free:
        offsets[b] = n
        n += program.blocks[b]

    maps: dict = {}
    visiting: set = set()

    def resolve(name):
        if name in maps:
            return maps[name]
        if name in visiting:
            raise StructuralError(f"cyclic equality through block {name!r}")
        d = program.blocks[name]
        if name not in defs:
            T = np.zeros((d, n))
            T[:, offsets[name]:offsets[name] + d] = np.eye(d)
            maps[name] = (T, np.zeros(d))
            return maps[name]
        visiting.add(name)
        eq = defs[name]
        T, t0 = np.zeros((d, n)), eq.const.copy()
        for b, m in eq.terms.items():
            Tb, tb = resolve(b)
            T += m @ Tb
            t0 += m @ tb
        visiting.discard(name)
        maps[name] = (T, t0)
        return maps[name]

    for b in program.blocks:
        resolve(b)

    c, c0 = np.zeros(n), float(program.objective_const)
    for b, coef in program.objective.items():
        T, t0 = maps[b]
        c += coef @ T
        c0 += float(coef @ t0)

    socs = []
    for i, (b, m, r) in enumerate(program.ellipsoids):
        T, t0 = maps[b]
        Lt = np.linalg.cholesky(0.5 * (m + m.T)).T
        socs.append((Lt @ T, Lt @ t0, r, ("ellipsoid", i, b)))
    for i, (b, r) in enumerate(program.balls):
        T, t0 = maps[b]
        socs.append((T.copy(), t0.copy(), r, ("ball", i, b)))

    rows, rhs = [], []
    for mats, h in program.linear:
        G = np.zeros((h.size, n))
        hh = h.copy()
        for b, g in mats.items():
            T, t0 = maps[b]
            G += g @ T
            hh -= g @ t0
        rows.append(G)
        rhs.append(hh)
    G = np.vstack(rows) if rows else np.zeros((0, n))
    g = np.concatenate(rhs) if rhs else np.zeros(0)
    return ReducedProgram(program, free, n, c, c0, maps, socs, G, g)


# ---------------------------------------------------------------------------
# Solver


@dataclass
class SolveReport:
    status: str                  # "optimal" | "infeasible" | "max_iters"
    x: np.ndarray
    blocks: dict
    objective: float
    max_violation: float
    iterations: int
    wall_time: float
    kkt_residual: float = float("nan")
    gap_bound: float = float("nan")
    certificate: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class Tolerances:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-7
    gap_target: float = 1e-11   # barrier stops once m/t falls below this (scaled objective)
    newton_tol: float = 1e-10


class _Constraints:
    """Normalized constraint functions f_i(y) < 0 of the reduced problem.

    Linear rows are scaled to unit norm; cone constraints use
    ``f = (||A y + b||^2 - r^2) / (2 r)`` so both kinds carry distance units.
    With ``phase1`` an extra trailing variable ``s`` is subtracted from each f.
    """

    def __init__(self, G, g, socs, phase1=False):
        norms = np.linalg.norm(G, axis=1) if G.size else np.zeros(0)
        self.G, self.g = G / norms[:, None], g / norms
        if phase1:
            # floor row 0.z - 1 - s < 0 keeps phase I bounded below at s = -1
            self.G = np.vstack([self.G, np.zeros((1, G.shape[1]))])
            self.g = np.append(self.g, 1.0)
        self.socs = socs
        self.phase1 = phase1
        self.m = self.G.shape[0] + len(socs)

    def _split(self, y):
        return (y[:-1], y[-1]) if self.phase1 else (y, 0.0)

    def values(self, y):
        z, s = self._split(y)
        f = [self.G @ z - self.g]
        for A, b, r in self.socs:
            u = A @ z + b
            f.append(np.array([(u @ u - r * r) / (2 * r)]))
        return np.concatenate(f) - s

    def derivs(self, y):
        z, s = self._split(y)
        n = z.size
        J = np.zeros((self.m, y.size))
        f = np.empty(self.m)
        k = self.G.shape[0]
        J[:k, :n] = self.G
        f[:k] = self.G @ z - self.g
        hess = []
        for j, (A, b, r) in enumerate(self.socs):
            u = A @ z + b
            f[k + j] = (u @ u - r * r) / (2 * r)
            J[k + j, :n] = A.T @ u / r
            hess.append(A.T @ A / r)
        if self.phase1:
            J[:, -1] = -1.0
            f = f - s

        def weighted_hessian(w):
            out = np.zeros((y.size, y.size))
            for wj, Hj in zip(w[k:], hess):
                out[:n, :n] += wj * Hj
            return out

        return f, J, weighted_hessian


def _newton_solve(Hm, rhs):
    scale = max(np.abs(np.diag(Hm)).max(initial=0.0), 1e-300)
    for ridge in (0.0, 1e-14, 1e-10):
        try:
            L = np.linalg.cholesky(Hm + ridge * scale * np.eye(Hm.shape[0]))
            return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        except np.linalg.LinAlgError:
            continue
    return np.linalg.lstsq(Hm, rhs, rcond=None)[0]


def _center(cons, cvec, y, t, tol, budget, stop=None):
    """Newton's method on t*c.y - sum log(-f(y)); returns (y, newton_steps, converged)."""
    steps = 0
    while steps < budget:
        f, J, whess = cons.derivs(y)
        inv = 1.0 / (-f)
        grad = t * cvec + J.T @ inv
        Hm = (J * (inv ** 2)[:, None]).T @ J + whess(inv)
        dy = _newton_solve(Hm, -grad)
        dec = -grad @ dy
        if not np.isfinite(dec):
            return y, steps, False
        if dec / 2 <= tol:
            return y, steps, True
        step, slope = 1.0, grad @ dy
        while True:
            yn = y + step * dy
            fn = cons.values(yn)
            if np.all(fn < 0):
                dF = t * step * (cvec @ dy) - np.sum(np.log(fn / f))
                if dF <= 0.25 * step * slope:
                    break
            step *= 0.5
            if step < 1e-20:
                return y, steps, True  # no further progress at this precision
        moved = step * np.linalg.norm(dy)
        y = yn
        steps += 1
        if moved <= 1e-15 * (1.0 + np.linalg.norm(y)):
            return y, steps, True  # roundoff floor
        if stop is not None and stop(y):
            return y, steps, True
    return y, steps, False


def _nullspace(E, e, feas_tol):
    """Parametrize {x : E x = e} as x_p + N z; returns None if inconsistent."""
    x_p = np.linalg.lstsq(E, e, rcond=None)[0]
    resid = np.abs(E @ x_p - e).max() if e.size else 0.0
    if resid > feas_tol:
        return None, None, resid
    _, sv, vt = np.linalg.svd(E)
    tol = max(E.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int((sv > max(tol, 1e-13)).sum())
    return x_p, vt[rank:].T, resid


def _violation(reduced: ReducedProgram, x) -> float:
    """Largest violation of the original (unnormalized) constraints at x."""
    blocks = reduced.reconstruct(x)
    prog = reduced.source
    worst = 0.0
    for b, m, r in prog.ellipsoids:
        v = blocks[b]
        worst = max(worst, np.sqrt(max(v @ m @ v, 0.0)) - r)
    for b, r in prog.balls:
        worst = max(worst, np.linalg.norm(blocks[b]) - r)
    for mats, h in prog.linear:
        lhs = sum(g @ blocks[b] for b, g in mats.items())
        worst = max(worst, float(np.max(lhs - h)))
    for eq in prog.equalities:
        rhs = eq.const + sum(mm @ blocks[b] for b, mm in eq.terms.items())
        worst = max(worst, float(np.abs(blocks[eq.target] - rhs).max(initial=0.0)))
    return float(max(worst, 0.0))


def solve(program, tolerances: Tolerances | None = None, max_iters: int = 500, x0=None) -> SolveReport:
    """Minimize the program; accepts a ConicProgram or an already reduced one."""
    tol = tolerances or Tolerances()
    reduced = program if isinstance(program, ReducedProgram) else eliminate_equalities(program)
    start = time.perf_counter()
    n = reduced.n

    def report(status, x, iters, **kw):
        x = np.asarray(x, dtype=float)
        return SolveReport(status, x, reduced.reconstruct(x), reduced.objective(x),
                           _violation(reduced, x), iters, time.perf_counter() - start, **kw)

    # zero-radius cones are equalities A x = -b
    eq_rows, eq_rhs, socs = [], [], []
    for A, b, r, tag in reduced.socs:
        if r <= 0.0:
            eq_rows.append(A)
            eq_rhs.append(-b)
        else:
            socs.append((A, b, r))
    if eq_rows:
        E, e = np.vstack(eq_rows), np.concatenate(eq_rhs)
        x_p, N, resid = _nullspace(E, e, tol.feas_tol)
        if x_p is None:
            return report("infeasible", np.zeros(n), 0,
                          certificate={"kind": "degenerate-cone equality", "residual": float(resid)})
    else:
        x_p, N = np.zeros(n), np.eye(n)

    # restrict to x = x_p + N z
    k = N.shape[1]
    c = reduced.c @ N
    G = reduced.G @ N
    g = reduced.g - reduced.G @ x_p
    sub_socs = [(A @ N, A @ x_p + b, r) for A, b, r in socs]

    # drop constant constraints, flag violated ones
    keep = np.linalg.norm(G, axis=1) > 1e-14 if G.size else np.zeros(0, dtype=bool)
    if G.size and (g[~keep] < -tol.feas_tol).any():
        return report("infeasible", x_p, 0, certificate={"kind": "constant linear row", "violation": float(-g[~keep].min())})
    G, g = G[keep], g[keep]
    live = []
    for A, b, r in sub_socs:
        if np.abs(A).max(initial=0.0) <= 1e-14:
            if np.linalg.norm(b) > r + tol.feas_tol:
                return report("infeasible", x_p, 0, certificate={"kind": "constant cone", "violation": float(np.linalg.norm(b) - r)})
        else:
            live.append((A, b, r))

    if k == 0 or (G.shape[0] == 0 and not live):
        if k > 0 and np.linalg.norm(c) > 1e-14:
            return report("infeasible", x_p, 0, certificate={"kind": "unbounded"})
        status = "optimal" if _violation(reduced, x_p) <= tol.feas_tol else "infeasible"
        return report(status, x_p, 0, kkt_residual=0.0, gap_bound=0.0)

    cons = _Constraints(G, g, live)
    z = np.zeros(k) if x0 is None else np.linalg.lstsq(N, np.asarray(x0, float) - x_p, rcond=None)[0]
    iters = 0

    # phase I: minimize s subject to f_i(z) < s
    f0 = cons.values(z)
    if not np.all(f0 < 0):
        # a large ball keeps the phase-I barrier bounded along recession directions
        R = 1e3 * (1.0 + np.linalg.norm(z) + np.abs(g).max(initial=0.0)
                   + max((r + np.linalg.norm(b) for _, b, r in live), default=0.0))
        p1 = _Constraints(G, g, live + [(np.eye(k), np.zeros(k), R)], phase1=True)
        y = np.append(z, f0.max() + 1.0)
        cvec = np.zeros(k + 1)
        cvec[-1] = 1.0
        t = 1.0
        feasible = False
        while iters < max_iters:
            y, steps, _ = _center(p1, cvec, y, t, tol.newton_tol, max_iters - iters, stop=lambda yy: yy[-1] < 0)
            iters += steps
            if y[-1] < 0:
                feasible = True
                break
            if p1.m / t < tol.feas_tol * 1e-2:
                break
            t *= 20.0
        if not feasible:
            f = p1.values(y)
            lam = 1.0 / (t * (-f))
            x = x_p + N @ y[:-1]
            if iters >= max_iters:
                return report("max_iters", x, iters)
            if y[-1] > tol.feas_tol:
                return report("infeasible", x, iters, certificate={
                    "kind": "phase-I", "min_max_violation": float(y[-1]),
                    "multipliers": (lam / lam.sum()).tolist()})
            # feasible set has empty interior at working precision; accept the phase-I point
            return report("optimal", x, iters, kkt_residual=float("nan"), gap_bound=float("nan"),
                          certificate={"kind": "degenerate", "min_max_violation": float(y[-1])})
        z = y[:-1]

    # phase II: barrier path
    cnorm = np.linalg.norm(c)
    cvec = c / cnorm if cnorm > 0 else c
    t = 1.0
    converged = False
    while iters < max_iters:
        budget = min(_CENTER_BUDGET, max_iters - iters)
        z, steps, ok = _center(cons, cvec, z, t, tol.newton_tol, budget)
        iters += steps
        if not ok and steps == budget and iters >= max_iters:
            break
        if cons.m / t < tol.gap_target:
            converged = True
            break
        t *= 20.0
    x = x_p + N @ z
    kkt, lam = _kkt_residual(cons, cvec, z)
    status = "optimal" if converged else "max_iters"
    return report(status, x, iters, kkt_residual=kkt, gap_bound=float(cons.m / t * cnorm),
                  certificate={"multipliers": lam.tolist()})


_CENTER_BUDGET = 80


def _kkt_residual(cons, cvec, z, active_tol=1e-7):
    """A posteriori KKT residual for the normalized objective.

    Multipliers are fitted by non-negative least squares on the near-active
    constraints; the residual is the larger of the stationarity error and the
    complementarity products of the fitted multipliers.
    """
    f, J, _ = cons.derivs(z)
    lam = np.zeros(f.size)
    active = np.flatnonzero(-f <= active_tol)
    if active.size:
        lam[active] = nnls(J[active].T, -cvec)[0]
    stationarity = float(np.linalg.norm(cvec + J.T @ lam))
    complementarity = float(np.max(lam * np.abs(f), initial=0.0))
    return max(stationarity, complementarity), lam
