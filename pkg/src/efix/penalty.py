"""Penalty linear systems A x = c and their Jacobi over-relaxation splitting.

A = H + theta * (I - W (x) I) where H is the block-diagonal of local
Hessians.  Off-diagonal blocks are -theta * w_ij * I, i.e. scalar multiples
of the identity, so only the diagonal blocks are ever stored densely; that
is what makes one JOR sweep an O(n)-per-neighbor update.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .topology import MixingMatrix


class NonContractiveError(RuntimeError):
    """The JOR iteration matrix is not a contraction (q outside the valid range)."""


@dataclass
class PenaltySubproblem:
    """Assembled blocks of A x = c and the JOR step data for one theta.

    ``A_self[i]`` is the diagonal block H_i + theta (1 - w_ii) I, ``d[i]``
    its diagonal, ``M_self[i]`` the corresponding JOR self block, ``p[i]``
    the offset q D_ii^{-1} c_i.  Neighbor coupling is implicit:
    M_ij x_j = q theta w_ij D_ii^{-1} x_j.
    """

    theta: float
    q: float
    w: MixingMatrix
    A_self: np.ndarray   # (N, n, n)
    d: np.ndarray        # (N, n) positive diagonals
    dinv: np.ndarray
    M_self: np.ndarray
    p: np.ndarray        # (N, n)
    c: np.ndarray        # (N, n)
    rho: float = field(default=None)

    @property
    def node_count(self):
        return self.A_self.shape[0]

    @property
    def dim(self):
        return self.A_self.shape[1]


def assemble(h_blocks, c_blocks, w: MixingMatrix, theta, q) -> PenaltySubproblem:
    """Build the subproblem from local Hessian blocks and right-hand sides."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    N = w.node_count
    H = np.asarray(h_blocks, dtype=float)
    c = np.asarray(c_blocks, dtype=float)
    n = H.shape[1]
    I = np.eye(n)
    A_self = np.empty_like(H)
    d = np.empty((N, n))
    M_self = np.empty_like(H)
    p = np.empty((N, n))
    for i in range(N):
        A_self[i] = H[i] + theta * (1.0 - w.diag[i]) * I
        d[i] = np.diag(A_self[i])
        if np.any(d[i] <= 0):
            raise ValueError(f"nonpositive diagonal in block {i}; input violates strong convexity")
        G_ii = np.diag(d[i]) - A_self[i]
        M_self[i] = q * (G_ii / d[i][:, None]) + (1.0 - q) * I
        p[i] = q * c[i] / d[i]
    return PenaltySubproblem(theta=float(theta), q=float(q), w=w, A_self=A_self,
                             d=d, dinv=1.0 / d, M_self=M_self, p=p, c=c)


def assemble_quadratic(problem, w: MixingMatrix, theta, q) -> PenaltySubproblem:
    """Subproblem of the quadratic family: H_i = B_ii, c_i = B_ii b_i."""
    pairs = [problem.model_terms(i, None) for i in range(problem.node_count)]
    return assemble([H for H, _ in pairs], [ci for _, ci in pairs], w, theta, q)


def assemble_model(problem, x_prev, w: MixingMatrix, theta, q) -> PenaltySubproblem:
    """Subproblem of the quadratic model built at the stacked point x_prev.

    H_i = local Hessian at x_prev_i and c_i = H_i x_prev_i - grad f_i(x_prev_i);
    for quadratic problems this reproduces ``assemble_quadratic`` exactly.
    """
    X = np.asarray(x_prev, dtype=float).reshape(problem.node_count, -1)
    pairs = [problem.model_terms(i, X[i]) for i in range(problem.node_count)]
    return assemble([H for H, _ in pairs], [ci for _, ci in pairs], w, theta, q)


def relaxation_bound(theta, L, w_bar):
    """Upper endpoint 2 theta (1 - w_bar) / (L + 2 theta) of the safe q interval."""
    if theta <= 0 or L <= 0 or not (0 <= w_bar < 1):
        raise ValueError("need theta > 0, L > 0, w_bar in [0, 1)")
    return 2.0 * theta * (1.0 - w_bar) / (L + 2.0 * theta)


def jor_local_update(M_self, p, dinv, qtheta, neighbor_ids, neighbor_weights,
                     z_own, values_by_id):
    """One node's JOR update from its own block data and neighbor vectors.

    ``values_by_id`` maps a neighbor id to that neighbor's current vector
    (an inbox dict or a row-indexable array).  Neighbors are accumulated
    in list order, so results are bit-reproducible across callers.
    """
    wsum = None
    for k in range(len(neighbor_ids)):
        v = neighbor_weights[k] * values_by_id[neighbor_ids[k]]
        wsum = v if wsum is None else wsum + v
    acc = M_self @ z_own + p
    if wsum is not None:
        acc = acc + qtheta * (dinv * wsum)
    return acc


def jor_step(z, sub: PenaltySubproblem):
    """One synchronous JOR sweep M z + p over the stacked vector z."""
    z = np.asarray(z, dtype=float)
    N, n = sub.node_count, sub.dim
    if z.size != N * n:
        raise ValueError(f"vector of size {z.size}, expected {N * n}")
    Z = z.reshape(N, n)
    qtheta = sub.q * sub.theta
    out = np.empty_like(Z)
    for i in range(N):
        out[i] = jor_local_update(sub.M_self[i], sub.p[i], sub.dinv[i], qtheta,
                                  sub.w.neighbor_lists[i], sub.w.off_diag[i], Z[i], Z)
    return out.reshape(z.shape)


def penalty_gradient(sub: PenaltySubproblem, z):
    """A z - c and its norm: the gradient of the penalty (or model) objective."""
    z = np.asarray(z, dtype=float)
    N, n = sub.node_count, sub.dim
    Z = z.reshape(N, n)
    g = np.empty_like(Z)
    for i in range(N):
        acc = sub.A_self[i] @ Z[i]
        for k, j in enumerate(sub.w.neighbor_lists[i]):
            acc = acc - (sub.theta * sub.w.off_diag[i][k]) * Z[j]
        g[i] = acc - sub.c[i]
    g = g.reshape(z.shape)
    return g, float(np.linalg.norm(g))


def dense_system(sub: PenaltySubproblem):
    """(A, c) as dense arrays; desk-scale helper for oracles and tests."""
    N, n = sub.node_count, sub.dim
    A = np.zeros((N * n, N * n))
    for i in range(N):
        A[i * n:(i + 1) * n, i * n:(i + 1) * n] = sub.A_self[i]
        for k, j in enumerate(sub.w.neighbor_lists[i]):
            A[i * n:(i + 1) * n, j * n:(j + 1) * n] = -sub.theta * sub.w.off_diag[i][k] * np.eye(n)
    return A, sub.c.reshape(-1)


def dense_iteration_matrix(sub: PenaltySubproblem):
    """The dense JOR matrix M = q D^{-1} (D - A) + (1 - q) I."""
    A, _ = dense_system(sub)
    dinv = sub.dinv.reshape(-1)
    return np.eye(A.shape[0]) - sub.q * (dinv[:, None] * A)


def contraction_estimate(sub: PenaltySubproblem) -> float:
    """Upper estimate of ||M||, the JOR convergence factor, in (0, 1).

    The spectral norm is used when it certifies contraction; when it
    reaches 1 while the spectrum still contracts, the spectral radius
    (inflated by 1e-6) is substituted with a warning, because the 2-norm
    of the nonsymmetric M can exceed 1 even for convergent iterations.
    """
    M = dense_iteration_matrix(sub)
    rho = float(np.linalg.norm(M, 2))
    if rho >= 1.0:
        sr = float(np.max(np.abs(np.linalg.eigvals(M)))) * (1.0 + 1e-6)
        if sr >= 1.0:
            raise NonContractiveError(
                f"iteration matrix is not contractive (norm {rho:.6g}, spectral radius {sr:.6g}); "
                f"q={sub.q:.6g} lies outside the convergence region")
        warnings.warn(f"spectral norm {rho:.6g} >= 1; falling back to spectral radius {sr:.6g}")
        rho = sr
    rho = max(rho, 1e-12)
    sub.rho = rho
    return rho
