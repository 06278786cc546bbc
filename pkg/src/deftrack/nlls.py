"""Sparse robust Levenberg-Marquardt on block-structured problems.

Parameters come in two flavors: Euclidean blocks (an (n, d) array of
independent instances updated additively) and a rigid-transform block
(updated by a left-multiplicative twist, T <- exp(xi) * T). Residuals
are held as vectorized groups: one callback evaluates every residual of
a kind at once and returns, per item, the residual and the Jacobian
w.r.t. each parameter slot it touches. Per item the semantics are plain
small residual blocks; grouping only buys batch evaluation.

Per item with residual r and diagonal noise sigma, the squared
Mahalanobis norm is e = || r / sigma ||^2 and the contribution to the
cost is loss_scale * rho(e) with the Huber-style kernel

    rho(e) = e                          e <= delta^2
    rho(e) = 2 * delta * sqrt(e) - delta^2   otherwise

implemented by iteratively reweighted least squares: rows are scaled by
sqrt(loss_scale * w), w = drho/de in {1, delta/sqrt(e)}. delta^2
defaults to the 95th chi-square percentile for the residual dimension
(5.991 for 2 dof, 7.815 for 3 dof).

Damping: (H + lambda * diag(H)) step, lambda * 10 on a rejected step,
lambda * 0.5 on an accepted one. Termination: relative cost decrease
below tol_cost, gradient infinity norm below tol_grad, the iteration
cap, or damping overflow. The normal system keeps the arrow sparsity
(one dense pose block bordered by small independent blocks) in a scipy
CSC matrix and is solved by a sparse LU factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SolverConfig
from .geometry import Pose, se3_exp

# 95th percentile of the chi-square distribution (residual gating).
CHI2_95_2DOF = 5.991
CHI2_95_3DOF = 7.815


def huber(e: np.ndarray, delta_sq: float):
    """Robust kernel on squared norms: returns (rho(e), drho/de)."""
    e = np.asarray(e, dtype=np.float64)
    delta = np.sqrt(delta_sq)
    inlier = e <= delta_sq
    root = np.sqrt(np.maximum(e, 1e-300))
    rho = np.where(inlier, e, 2.0 * delta * root - delta_sq)
    w = np.where(inlier, 1.0, delta / root)
    return rho, w


class EuclideanParams:
    """(n, d) array of instances; tangent = value space, additive update."""

    def __init__(self, name: str, values: np.ndarray, fixed: bool = False):
        self.name = name
        self.values = np.atleast_2d(np.asarray(values, dtype=np.float64)).copy()
        self.fixed = fixed

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def tangent_dim(self) -> int:
        return self.values.shape[1]

    def snapshot(self):
        return self.values.copy()

    def restore(self, snap):
        self.values = snap.copy()

    def retract(self, deltas: np.ndarray) -> None:
        self.values = self.values + deltas


class PoseParams:
    """A single rigid transform, tangent dim 6, left-multiplicative update."""

    def __init__(self, name: str, pose: Pose, fixed: bool = False):
        self.name = name
        self.pose = pose.copy()
        self.fixed = fixed

    n_instances = 1

    @property
    def tangent_dim(self) -> int:
        return 6

    def snapshot(self):
        return self.pose.copy()

    def restore(self, snap):
        self.pose = snap.copy()

    def retract(self, deltas: np.ndarray) -> None:
        xi = np.asarray(deltas, dtype=np.float64).ravel()
        self.pose = se3_exp(xi).compose(self.pose)

    @property
    def values(self):
        return self.pose


@dataclass
class ResidualGroup:
    """A batch of same-structured residuals.

    eval_fn(problem) returns (residuals (count, dim), jacobians), where
    jacobians[slot] has shape (count, dim, block.tangent_dim) and slot
    runs over ``params``. Each params entry is (block, indices): indices
    maps item -> instance of the block (None means the single shared
    instance, e.g. the pose). Jacobians for fixed blocks may be None.
    """

    name: str
    dim: int
    params: list
    eval_fn: Callable
    sigma: np.ndarray
    delta_sq: Optional[float] = None   # None disables the robust kernel
    loss_scale: float = 1.0

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64).ravel()
        if self.sigma.shape != (self.dim,):
            raise ValueError(f"group {self.name}: sigma must have length {self.dim}")
        if np.any(self.sigma <= 0):
            raise ValueError(f"group {self.name}: sigma entries must be positive")
        if self.loss_scale < 0:
            raise ValueError(f"group {self.name}: loss_scale must be >= 0")


class Problem:
    """Parameter blocks plus residual groups."""

    def __init__(self):
        self.blocks: list = []
        self.groups: list[ResidualGroup] = []

    def add_block(self, block):
        if any(b.name == block.name for b in self.blocks):
            raise ValueError(f"duplicate parameter block {block.name!r}")
        self.blocks.append(block)
        return block

    def add_group(self, group: ResidualGroup):
        for blk, _ in group.params:
            if blk not in self.blocks:
                raise ValueError(f"group {group.name} references unknown block")
        self.groups.append(group)
        return group

    # -------------------------------------------------------------- structure
    def _offsets(self):
        """Tangent column offset per free block; fixed blocks get None."""
        offsets = {}
        col = 0
        for blk in self.blocks:
            if blk.fixed:
                offsets[id(blk)] = None
            else:
                offsets[id(blk)] = col
                col += blk.n_instances * blk.tangent_dim
        return offsets, col

    # ------------------------------------------------------------- evaluation
    def evaluate(self):
        """Evaluate all groups; returns (total cost, per-group details)."""
        total = 0.0
        details = []
        for g in self.groups:
            r, jacs = g.eval_fn(self)
            r = np.atleast_2d(np.asarray(r, dtype=np.float64))
            white = r / g.sigma
            e = np.einsum("ij,ij->i", white, white)
            if g.delta_sq is None:
                rho = e
                w = np.ones_like(e)
            else:
                rho, w = huber(e, g.delta_sq)
            cost = g.loss_scale * float(np.sum(rho))
            total += cost
            details.append({
                "group": g, "residuals": r, "jacobians": jacs,
                "white": white, "e": e, "weights": w, "cost": cost,
            })
        return total, details

    def cost(self) -> float:
        return self.evaluate()[0]


def _assemble(problem: Problem, details, offsets, n_cols):
    """Whitened, robust-weighted sparse Jacobian and residual vector."""
    rows_data = []
    rows_i = []
    rows_j = []
    rhs = []
    row0 = 0
    for det in details:
        g = det["group"]
        r = det["white"]
        count = r.shape[0]
        scale = np.sqrt(g.loss_scale * det["weights"])  # (count,)
        rhs.append((r * scale[:, None]).ravel())
        if det["jacobians"] is not None:
            for slot, (blk, idx) in enumerate(g.params):
                off = offsets[id(blk)]
                if off is None:
                    continue
                J = det["jacobians"][slot]
                if J is None:
                    raise ValueError(
                        f"group {g.name}: missing jacobian for free block {blk.name}")
                J = np.asarray(J, dtype=np.float64)
                td = blk.tangent_dim
                Jw = J * (scale[:, None, None] / g.sigma[None, :, None])
                if idx is None:
                    col_base = np.full(count, off, dtype=np.int64)
                else:
                    col_base = off + np.asarray(idx, dtype=np.int64) * td
                rr = (row0 + np.arange(count * g.dim, dtype=np.int64)
                      .reshape(count, g.dim))
                rows_i.append(np.broadcast_to(rr[:, :, None], Jw.shape).ravel())
                cc = col_base[:, None, None] + np.arange(td, dtype=np.int64)[None, None, :]
                rows_j.append(np.broadcast_to(cc, Jw.shape).ravel())
                rows_data.append(Jw.ravel())
        row0 += count * g.dim
    rhs = np.concatenate(rhs) if rhs else np.zeros(0)
    if rows_data:
        data = np.concatenate(rows_data)
        ii = np.concatenate(rows_i)
        jj = np.concatenate(rows_j)
    else:
        data = np.zeros(0)
        ii = np.zeros(0, dtype=np.int64)
        jj = np.zeros(0, dtype=np.int64)
    J = sp.coo_matrix((data, (ii, jj)), shape=(row0, n_cols)).tocsr()
    return J, rhs


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    lamb: float
    step_norm: float
    accepted: bool


@dataclass
class SolveReport:
    status: str
    iterations: int
    initial_cost: float
    final_cost: float
    grad_inf_norm: float
    lambda_final: float
    group_costs: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in ("converged_cost", "converged_grad")


def solve(problem: Problem, cfg: SolverConfig | None = None) -> SolveReport:
    """Minimize the robustified cost; parameters are updated in place."""
    cfg = cfg or SolverConfig()
    offsets, n_cols = problem._offsets()
    cost, details = problem.evaluate()
    initial_cost = cost
    lamb = cfg.lambda_init
    records: list[IterationRecord] = []
    status = "max_iterations"
    grad_inf = np.inf
    it = 0
    if n_cols == 0:
        return SolveReport("converged_grad", 0, cost, cost, 0.0, lamb,
                           _group_costs(details), records)
    for it in range(1, cfg.max_iterations + 1):
        J, r = _assemble(problem, details, offsets, n_cols)
        g = J.T @ r
        grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_inf < cfg.tol_grad:
            status = "converged_grad"
            break
        H = (J.T @ J).tocsc()
        diag = np.maximum(H.diagonal(), 1e-12)
        accepted = False
        for _ in range(cfg.max_rejects):
            A = H + sp.diags(lamb * diag)
            try:
                step = spla.spsolve(A, -g)
            except RuntimeError:
                step = np.full(n_cols, np.nan)
            if not np.all(np.isfinite(step)):
                lamb *= cfg.lambda_up
                if lamb > cfg.lambda_max:
                    break
                continue
            snaps = [blk.snapshot() for blk in problem.blocks]
            _apply_step(problem, offsets, step)
            new_cost, new_details = problem.evaluate()
            step_norm = float(np.linalg.norm(step))
            if np.isfinite(new_cost) and new_cost < cost:
                records.append(IterationRecord(it, new_cost, lamb, step_norm, True))
                rel_drop = (cost - new_cost) / max(cost, 1e-300)
                cost, details = new_cost, new_details
                lamb = max(lamb * cfg.lambda_down, 1e-12)
                accepted = True
                if rel_drop < cfg.tol_cost:
                    status = "converged_cost"
                break
            for blk, snap in zip(problem.blocks, snaps):
                blk.restore(snap)
            records.append(IterationRecord(it, cost, lamb, step_norm, False))
            lamb *= cfg.lambda_up
            if lamb > cfg.lambda_max:
                break
        if not accepted:
            status = "stalled" if status == "max_iterations" else status
            break
        if status == "converged_cost":
            break
    return SolveReport(status, it, initial_cost, cost, grad_inf, lamb,
                       _group_costs(details), records)


def _group_costs(details):
    return {d["group"].name: d["cost"] for d in details}


def _apply_step(problem: Problem, offsets, step: np.ndarray) -> None:
    for blk in problem.blocks:
        off = offsets[id(blk)]
        if off is None:
            continue
        td = blk.tangent_dim
        n = blk.n_instances * td
        seg = step[off:off + n]
        if isinstance(blk, PoseParams):
            blk.retract(seg)
        else:
            blk.retract(seg.reshape(blk.n_instances, td))


def check_jacobians(problem: Problem, h: float = 1e-6) -> dict:
    """Compare analytic Jacobians against central differences.

    Returns {group name: max relative discrepancy}, using
    |Ja - Jn| / max(1, |Ja|, |Jn|) elementwise. Evaluates raw (un-whitened)
    residuals, so sigma and robust weights do not enter.
    """
    worst = {g.name: 0.0 for g in problem.groups}
    _, details = problem.evaluate()
    analytic = {id(d["group"]): d["jacobians"] for d in details}

    def raw_residuals():
        return {id(g): np.atleast_2d(np.asarray(g.eval_fn(problem)[0], dtype=np.float64))
                for g in problem.groups}

    for blk in problem.blocks:
        if blk.fixed:
            continue
        td = blk.tangent_dim
        for inst in range(blk.n_instances):
            for k in range(td):
                snap = blk.snapshot()
                delta = np.zeros((blk.n_instances, td))
                delta[inst, k] = h
                blk.retract(delta if not isinstance(blk, PoseParams) else delta.ravel())
                r_plus = raw_residuals()
                blk.restore(snap)
                delta[inst, k] = -h
                blk.retract(delta if not isinstance(blk, PoseParams) else delta.ravel())
                r_minus = raw_residuals()
                blk.restore(snap)
                for g in problem.groups:
                    slots = [s for s, (b, _) in enumerate(g.params) if b is blk]
                    if not slots:
                        continue
                    Jn = (r_plus[id(g)] - r_minus[id(g)]) / (2.0 * h)
                    count = Jn.shape[0]
                    # an item may touch this instance through several slots
                    # (e.g. both ends of a smoothness edge): sum them
                    expect = np.zeros((count, g.dim))
                    for slot in slots:
                        Ja_full = analytic[id(g)][slot]
                        idx = g.params[slot][1]
                        if idx is None:
                            touched = np.arange(count)
                        else:
                            touched = np.nonzero(np.asarray(idx) == inst)[0]
                        if touched.size:
                            expect[touched] += Ja_full[touched, :, k]
                    # items not touching this instance must not respond
                    denom = np.maximum(1.0, np.maximum(np.abs(expect), np.abs(Jn)))
                    rel = np.abs(expect - Jn) / denom
                    worst[g.name] = max(worst[g.name], float(rel.max()))
    return worst


def iteration_rows(report: SolveReport):
    """CSV rows (iteration, cost, lambda, step_norm, accepted)."""
    return [(r.iteration, r.cost, r.lamb, r.step_norm, int(r.accepted))
            for r in report.records]
