"""Symplectic residual and penalty for truncated polynomial maps.

For a map M with Jacobian D(X0) the residual is D^T J D - J, expanded as
polynomials in X0.  The penalty is the sum of squares of all coefficients
of that expansion, so it does not depend on inputs: it vanishes exactly
when the map is symplectic as a polynomial identity up to its own degree.
"""

from __future__ import annotations

import numpy as np

from .basis import get_basis
from .polymap import PolyMatrix, TaylorMap, jacobian


def symplectic_form(dim: int) -> np.ndarray:
    """The block matrix J = [[0, I], [-I, 0]] in (q1..qm, p1..pm) order."""
    if dim % 2:
        raise ValueError("symplectic form needs even dimension")
    m = dim // 2
    j = np.zeros((dim, dim))
    j[:m, m:] = np.eye(m)
    j[m:, :m] = -np.eye(m)
    return j


def _interleaved_form(dim: int) -> np.ndarray:
    """J for coordinates ordered (x, x', y, y', ...)."""
    if dim % 2:
        raise ValueError("phase-space dimension must be even")
    j = np.zeros((dim, dim))
    for i in range(0, dim, 2):
        j[i, i + 1] = 1.0
        j[i + 1, i] = -1.0
    return j


def _check(tmap: TaylorMap, phase_dim: int | None) -> int:
    pd = tmap.n_out if phase_dim is None else phase_dim
    if pd % 2:
        raise ValueError("phase-space dimension must be even")
    if tmap.n_out != pd:
        raise ValueError(f"map outputs {tmap.n_out} coordinates, expected {pd}")
    if tmap.n_in < pd:
        raise ValueError("map has fewer inputs than phase-space coordinates")
    return pd


def symplectic_residual(tmap: TaylorMap, phase_dim: int | None = None) -> PolyMatrix:
    """Coefficients of D^T J D - J over the degree-2(k-1) basis.

    Trailing inputs beyond `phase_dim` are treated as frozen parameters: the
    Jacobian is taken only with respect to phase-space coordinates, and the
    parameter symbols stay inside the coefficients.
    """
    pd = _check(tmap, phase_dim)
    k = tmap.order
    jac = jacobian(tmap, wrt=pd)  # (n_out, pd) polys over basis(n_in, k-1)
    target = get_basis(tmap.n_in, max(2 * (k - 1), 0))
    j = _interleaved_form(pd)
    nsrc = jac.basis.size
    d = np.zeros((tmap.n_out, pd, target.size))
    d[:, :, :nsrc] = jac.coeffs  # same ordering: lower basis is a prefix
    res = np.zeros((pd, pd, target.size))
    for a in range(pd):
        for b in range(a + 1, pd):
            # R is antisymmetric; compute the upper triangle only
            acc = np.zeros(target.size)
            for i in range(tmap.n_out):
                for ip in range(tmap.n_out):
                    if j[i, ip] != 0:
                        acc += j[i, ip] * target.multiply(d[i, a], d[ip, b])
            acc[0] -= j[a, b]
            res[a, b] = acc
            res[b, a] = -acc
    return PolyMatrix(pd, pd, target, res)


def symplectic_penalty(tmap: TaylorMap, phase_dim: int | None = None) -> float:
    """Sum of squares of all residual coefficients (input-independent)."""
    return float(np.sum(symplectic_residual(tmap, phase_dim).coeffs ** 2))


def penalty_gradient(tmap: TaylorMap, phase_dim: int | None = None) -> list[np.ndarray]:
    """d(penalty)/d(weight entry) for every weight block (W0 block is zero)."""
    pd = _check(tmap, phase_dim)
    k = tmap.order
    jac = jacobian(tmap, wrt=pd)
    target = get_basis(tmap.n_in, max(2 * (k - 1), 0))
    j = _interleaved_form(pd)
    nsrc = jac.basis.size
    d = np.zeros((tmap.n_out, pd, target.size))
    d[:, :, :nsrc] = jac.coeffs
    table = target.product_table[:nsrc, :nsrc]

    r = symplectic_residual(tmap, phase_dim).coeffs

    # Adjoint of the Jacobian coefficients: S = sum_q R[a,b,q]^2 with
    # R[a,b,q] = sum J[i,i'] D[i,a,p] D[i',b,p'] over table[p,p']=q.
    g = np.zeros((tmap.n_out, pd, nsrc))
    for p in range(nsrc):
        for pp in range(nsrc):
            q = table[p, pp]
            if q < 0:
                continue
            # first-factor term: dR[a,b,q]/dD[i,a,p] = J[i,i'] D[i',b,pp]
            g[:, :, p] += 2.0 * (j @ d[:, :, pp]) @ r[:, :, q].T
            # second-factor term: dR[a,b,q]/dD[i',b,pp] handled by symmetry
            g[:, :, pp] += 2.0 * (j.T @ d[:, :, p]) @ r[:, :, q]

    # Chain back to the weights: D[r, v, idx(e - e_v)] += e_v * W_d[r, c].
    grads = [np.zeros_like(w) for w in tmap.weights]
    src = get_basis(tmap.n_in, k)
    jbasis = jac.basis
    for deg in range(1, k + 1):
        exps = src.blocks[deg]
        for c in range(exps.shape[0]):
            e = exps[c]
            for v in range(pd):
                if e[v] == 0:
                    continue
                de = e.copy()
                de[v] -= 1
                grads[deg][:, c] += e[v] * g[:, v, jbasis.index_of(de)]
    return grads
