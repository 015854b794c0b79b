"""Exact and entropic solvers for the discrete transportation problem."""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

BALANCE_TOL = 1e-9


@dataclass
class TransportInstance:
    h: np.ndarray       # supply, length n
    q_w: np.ndarray     # demand, length m
    cost: np.ndarray    # n x m ground cost

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        self.q_w = np.asarray(self.q_w, dtype=np.float64).reshape(-1)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        n, m = self.h.size, self.q_w.size
        if self.cost.shape != (n, m):
            raise ValueError(f"cost shape {self.cost.shape} does not match marginals ({n}, {m})")
        for label, arr in (("supply", self.h), ("demand", self.q_w), ("cost", self.cost)):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite {label}")
            if (arr < 0).any():
                raise ValueError(f"negative {label} entry")
        if abs(self.h.sum() - self.q_w.sum()) > BALANCE_TOL:
            raise ValueError(f"unbalanced instance: supply {self.h.sum()!r} != demand {self.q_w.sum()!r}")

    @classmethod
    def uniform(cls, cost) -> "TransportInstance":
        cost = np.asarray(cost, dtype=np.float64)
        n, m = cost.shape
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m), cost)


@dataclass
class TransportResult:
    plan: np.ndarray
    cost: float
    iterations: int
    converged: bool


def marginal_violation(plan: np.ndarray, h: np.ndarray, q_w: np.ndarray) -> float:
    """Largest absolute row/column sum error of a plan (or a batch of plans)."""
    rows = np.abs(plan.sum(axis=-1) - h).max()
    cols = np.abs(plan.sum(axis=-2) - q_w).max()
    return float(max(rows, cols))


# --------------------------------------------------------------------------
# exact: transportation simplex (u-v method) with Bland's rule


def _northwest_corner(h: np.ndarray, q_w: np.ndarray):
    """Initial basic feasible solution with exactly n + m - 1 basic cells."""
    n, m = h.size, q_w.size
    flow = np.zeros((n, m))
    basis: list[tuple[int, int]] = []
    supply, demand = h.copy(), q_w.copy()
    i = j = 0
    while i < n and j < m:
        amount = min(supply[i], demand[j])
        flow[i, j] = amount
        basis.append((i, j))
        supply[i] -= amount
        demand[j] -= amount
        if i == n - 1 and j == m - 1:
            break
        # advance exactly one index so degenerate ties still add a zero basic cell
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif supply[i] <= demand[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(cost: np.ndarray, basis: list[tuple[int, int]], n: int, m: int):
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    by_row: dict[int, list[int]] = {}
    by_col: dict[int, list[int]] = {}
    for i, j in basis:
        by_row.setdefault(i, []).append(j)
        by_col.setdefault(j, []).append(i)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in by_row.get(k, ()):
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in by_col.get(k, ()):
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _cycle(basis: list[tuple[int, int]], enter: tuple[int, int], n: int) -> list[tuple[int, int]]:
    """Cells of the unique cycle closed by ``enter``, starting with ``enter``.

    Nodes 0..n-1 are rows, n.. are columns; the basis is a spanning tree.
    """
    adj: dict[int, list[int]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append(n + j)
        adj.setdefault(n + j, []).append(i)
    start, goal = n + enter[1], enter[0]
    parent = {start: start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in adj.get(node, ()):
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    # path runs row(enter) -> ... -> col(enter); consecutive nodes are basic cells
    cells = [enter]
    for a, b in zip(path, path[1:]):
        cells.append((a, b - n) if a < n else (b, a - n))
    return cells


def emd_exact(inst: TransportInstance, max_pivots: int = 100_000) -> TransportResult:
    """Globally optimal transport plan by the transportation simplex method."""
    inst.validate()
    h, q_w, cost = inst.h, inst.q_w, inst.cost
    n, m = h.size, q_w.size
    flow, basis = _northwest_corner(h, q_w)
    scale = max(1.0, float(np.abs(cost).max()))
    pivots = 0
    while True:
        u, v = _potentials(cost, basis, n, m)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((n, m), dtype=bool)
        for cell in basis:
            in_basis[cell] = True
        candidates = np.argwhere((reduced < -1e-12 * scale) & ~in_basis)
        if candidates.size == 0:
            break
        if pivots >= max_pivots:
            raise RuntimeError("transportation simplex exceeded its pivot budget")
        enter = tuple(int(k) for k in candidates[0])  # Bland: lowest index
        cycle = _cycle(basis, enter, n)
        minus = cycle[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * m + c[1])
        for k, c in enumerate(cycle):
            flow[c] += theta if k % 2 == 0 else -theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.append(enter)
        pivots += 1
    flow = np.maximum(flow, 0.0)
    return TransportResult(plan=flow, cost=float((flow * cost).sum()), iterations=pivots,
                           converged=True)


def assignment_oracle(cost) -> float:
    """min over permutations of the mean matched cost; for n <= 8 only."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("assignment oracle needs a square cost matrix")
    if n > 8:
        raise ValueError(f"assignment oracle enumerates n! permutations; n={n} exceeds 8")
    rows = np.arange(n)
    best = min(cost[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(best) / n


# --------------------------------------------------------------------------
# entropic: log-domain Sinkhorn, batched over leading axes


def default_eps(cost: np.ndarray, scale: float = 0.05) -> np.ndarray:
    """Scale-adaptive regularization ``scale * mean(cost)`` per instance."""
    mean = cost.mean(axis=(-2, -1))
    return np.maximum(scale * mean, 1e-12)


def _row_violation(plan: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.abs(plan.sum(axis=-1) - h).max(axis=-1) if plan.size else np.zeros(plan.shape[:-2])


def _row_l1(plan: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.abs(plan.sum(axis=-1) - h).sum(axis=-1)


def _newton_polish(a, b, logk, h, q_w, tol, max_steps, history):
    """Damped Newton ascent on the entropic dual of one instance.

    Potentials ``a``, ``b`` are in units of eps. Each accepted step is
    followed by an exact column scaling, so the iterate keeps the
    ``diag(u) K diag(v)`` form and columns stay exact.
    """
    n, m = logk.shape

    def dual(a, b):
        with np.errstate(over="ignore"):
            return a @ h + b @ q_w - np.exp(a[:, None] + b[None, :] + logk).sum()

    def residual(a, b):
        with np.errstate(over="ignore"):
            p = np.exp(a[:, None] + b[None, :] + logk)
        return np.abs(p.sum(axis=1) - h).sum() + np.abs(p.sum(axis=0) - q_w).sum()

    def col_scale(a):
        return np.log(q_w) - logsumexp(a[:, None] + logk, axis=0)

    steps = 0
    viol = np.inf
    while steps < max_steps:
        plan = np.exp(a[:, None] + b[None, :] + logk)
        r = plan.sum(axis=1) - h
        c = plan.sum(axis=0) - q_w
        viol = float(np.abs(r).max())
        if viol < tol:
            return a, b, steps, True
        steps += 1
        M = np.zeros((n + m - 1, n + m - 1))
        M[:n, :n] = np.diag(plan.sum(axis=1))
        M[n:, n:] = np.diag(plan.sum(axis=0)[:-1])
        M[:n, n:] = plan[:, :-1]
        M[n:, :n] = plan[:, :-1].T
        rhs = -np.concatenate([r, c[:-1]])
        base, base_res = dual(a, b), residual(a, b)
        scale = float(np.diag(M).mean())
        accepted = False
        # Levenberg-Marquardt damping keeps near-isolated blocks of the plan from
        # turning rounding noise into enormous steps
        for damping in (1e-10, 1e-8, 1e-6, 1e-4, 1e-2):
            delta = np.linalg.solve(M + damping * scale * np.eye(n + m - 1), rhs)
            da, db = delta[:n], np.append(delta[n:], 0.0)
            t = 1.0
            while t > 1e-6:
                na, nb = a + t * da, b + t * db
                # the dual gain drowns in rounding near the optimum; the residual does not
                if dual(na, nb) >= base or residual(na, nb) < base_res:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            return a, b, steps, False
        a = na
        b = col_scale(a)
        if history is not None:
            history.append(float(np.abs(np.exp(a[:, None] + b[None, :] + logk).sum(axis=1) - h).sum()))
    return a, b, steps, viol < tol


def sinkhorn_batch(h: np.ndarray, q_w: np.ndarray, cost: np.ndarray, eps,
                   tol: float = 1e-6, max_iter: int = 1000, history: list | None = None,
                   eps_scaling: bool = True, newton: bool = True):
    """Log-domain Sinkhorn on a stack of instances ``cost[..., n, m]``.

    Returns ``(plan, iterations, converged)``. ``eps`` may be a scalar or one
    value per instance.

    Two accelerations leave the fixed point unchanged. ``eps_scaling`` warm
    starts the potentials from a geometric ladder of larger regularizations.
    ``newton`` switches stalled instances (violation shrinking by less than
    half over 50 sweeps at the target eps) to damped Newton steps on the dual.
    When ``history`` is a list, the worst L1 marginal violation after every
    iteration at the target eps is appended to it.
    """
    cost = np.asarray(cost, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if (eps <= 0).any():
        raise ValueError("eps must be positive")
    batch = cost.shape[:-2]
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), batch + cost.shape[-2:-1])
    q_w = np.broadcast_to(np.asarray(q_w, dtype=np.float64), batch + cost.shape[-1:])
    target = np.broadcast_to(eps, batch)[..., None, None]
    with np.errstate(divide="ignore"):
        log_h, log_q = np.log(h), np.log(q_w)

    ladder = [target]
    if eps_scaling:
        spread = cost.max(axis=(-2, -1), keepdims=True) - cost.min(axis=(-2, -1), keepdims=True)
        e = np.maximum(spread, target)
        while (e > target).any():
            ladder.insert(-1, e)
            e = np.maximum(e * 0.25, target)

    # dual potentials in cost units
    f = np.zeros(h.shape)
    g = np.zeros(q_w.shape)
    it = 0
    plan = np.zeros(cost.shape)
    converged = False
    stalled = False
    for stage, e in enumerate(ladder):
        final = stage == len(ladder) - 1
        stage_tol = tol if final else max(tol, 1e-3)
        checkpoint = None
        while it < max_iter:
            it += 1
            f = e[..., 0] * (log_h - logsumexp((g[..., None, :] - cost) / e, axis=-1))
            g = e[..., 0, :] * (log_q - logsumexp((f[..., :, None] - cost) / e, axis=-2))
            plan = np.exp((f[..., :, None] + g[..., None, :] - cost) / e)
            # columns are exact after the g update; rows carry the violation
            viol = float(_row_violation(plan, h).max()) if plan.size else 0.0
            if final and history is not None:
                history.append(float(_row_l1(plan, h).max()) if plan.size else 0.0)
            if viol < stage_tol:
                converged = final
                break
            if final and newton and it % 50 == 0:
                if checkpoint is not None and viol > 0.5 * checkpoint:
                    stalled = True
                    break
                checkpoint = viol
        if it >= max_iter:
            break

    if stalled and (h > 0).all() and (q_w > 0).all():
        e = target[..., 0, 0]
        flat_plan = plan.reshape((-1,) + cost.shape[-2:])
        fa = (f / target[..., 0]).reshape(-1, h.shape[-1])
        gb = (g / target[..., 0, :]).reshape(-1, q_w.shape[-1])
        logk = (-cost / target).reshape(flat_plan.shape)
        hh = h.reshape(fa.shape)
        qq = q_w.reshape(gb.shape)
        viols = _row_violation(flat_plan, hh)
        extra = 0
        ok = True
        for k in np.flatnonzero(viols >= tol):
            a, b, steps, done = _newton_polish(fa[k], gb[k], logk[k], hh[k], qq[k], tol,
                                               max(1, max_iter - it), None)
            extra = max(extra, steps)
            ok &= done
            flat_plan[k] = np.exp(a[:, None] + b[None, :] + logk[k])
        plan = flat_plan.reshape(cost.shape)
        it += extra
        converged = bool(ok and _row_violation(plan, h).max() < tol)
        if history is not None:
            history.append(float(_row_l1(plan, h).max()))
    return plan, it, converged


def sinkhorn(inst: TransportInstance, eps: float | None = None, tol: float = 1e-6,
             max_iter: int = 1000, history: list | None = None) -> TransportResult:
    """Entropic approximation; ``cost`` in the result excludes the entropy term."""
    inst.validate()
    if eps is None:
        eps = float(default_eps(inst.cost))
    if eps <= 0:
        raise ValueError("eps must be positive")
    plan, it, converged = sinkhorn_batch(inst.h, inst.q_w, inst.cost, eps, tol, max_iter, history)
    if not converged:
        log.warning("sinkhorn did not converge in %d iterations (violation above %g)", max_iter, tol)
    return TransportResult(plan=plan, cost=float((plan * inst.cost).sum()), iterations=it,
                           converged=converged)
