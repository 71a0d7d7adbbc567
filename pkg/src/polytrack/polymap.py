"""Truncated multivariate polynomial maps: evaluation, composition, Jacobians.

A map of order k sends X to W0 + W1 X + W2 X^[2] + ... + Wk X^[k], where
X^[d] lists the degree-d monomials of X in the basis order of
:mod:`polytrack.basis`.  Weight block d has one column per degree-d monomial.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .basis import MonomialBasis, get_basis, n_monomials
from . import kernels


class ShapeError(ValueError):
    """Input or weight dimensions do not match the map."""


def kron_power(x, degree: int, n_vars: int | None = None) -> np.ndarray:
    """Vector of all degree-`degree` monomials of x (non-redundant listing)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n_vars is None else n_vars
    if degree == 0:
        return np.ones(1)
    exps = get_basis(n, degree).blocks[degree]
    return np.prod(x[None, :] ** exps, axis=1)


@dataclass(frozen=True, eq=False)
class TaylorMap:
    """Immutable truncated polynomial map R^n_in -> R^n_out of given order."""

    n_in: int
    n_out: int
    order: int
    weights: tuple  # (W0, W1, ..., Wk); W_d has shape (n_out, C(n_in+d-1, d))

    def __post_init__(self):
        if len(self.weights) != self.order + 1:
            raise ShapeError(f"expected {self.order + 1} weight blocks, got {len(self.weights)}")
        ws = []
        for d, w in enumerate(self.weights):
            w = np.array(w, dtype=np.float64)
            want = (self.n_out, n_monomials(self.n_in, d))
            if w.shape != want:
                raise ShapeError(f"weight block {d} has shape {w.shape}, expected {want}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"non-finite entries in weight block {d}")
            w.setflags(write=False)
            ws.append(w)
        object.__setattr__(self, "weights", tuple(ws))

    @property
    def basis(self) -> MonomialBasis:
        return get_basis(self.n_in, self.order)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zero_weights(n_in: int, n_out: int, order: int) -> list[np.ndarray]:
        return [np.zeros((n_out, n_monomials(n_in, d))) for d in range(order + 1)]

    @classmethod
    def identity(cls, n: int, order: int) -> "TaylorMap":
        w = cls.zero_weights(n, n, order)
        w[1] = np.eye(n)
        return cls(n, n, order, tuple(w))

    @classmethod
    def from_linear(cls, matrix, offset=None, order: int = 1) -> "TaylorMap":
        matrix = np.asarray(matrix, dtype=np.float64)
        n_out, n_in = matrix.shape
        w = cls.zero_weights(n_in, n_out, order)
        w[1] = matrix
        if offset is not None:
            w[0] = np.asarray(offset, dtype=np.float64).reshape(n_out, 1)
        return cls(n_in, n_out, order, tuple(w))

    def with_weights(self, weights) -> "TaylorMap":
        return TaylorMap(self.n_in, self.n_out, self.order, tuple(weights))

    # -- flat-coefficient view -------------------------------------------------

    def flat_coefficients(self) -> np.ndarray:
        """(n_out, basis.size) coefficient matrix over the flat basis."""
        return np.concatenate(self.weights, axis=1)

    @classmethod
    def from_flat(cls, coeffs: np.ndarray, n_in: int, order: int) -> "TaylorMap":
        basis = get_basis(n_in, order)
        n_out = coeffs.shape[0]
        ws = []
        for d in range(order + 1):
            off = basis.offsets[d]
            ws.append(coeffs[:, off:off + basis.block_size(d)].copy())
        return cls(n_in, n_out, order, tuple(ws))

    # -- evaluation ------------------------------------------------------------

    def __call__(self, x0) -> np.ndarray:
        return evaluate(self, x0)

    def linear_block(self) -> np.ndarray:
        return np.array(self.weights[1])


def evaluate(tmap: TaylorMap, x0) -> np.ndarray:
    """Apply the map to a single phase-space vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (tmap.n_in,):
        raise ShapeError(f"input has shape {x0.shape}, map expects ({tmap.n_in},)")
    y = tmap.weights[0][:, 0].copy()
    for d in range(1, tmap.order + 1):
        y += tmap.weights[d] @ kron_power(x0, d, tmap.n_in)
    return y


def evaluate_batch(tmap: TaylorMap, x0s) -> np.ndarray:
    """Apply the map to each row of a batch; rows are independent."""
    x0s = np.asarray(x0s, dtype=np.float64)
    if x0s.ndim != 2 or x0s.shape[1] != tmap.n_in:
        raise ShapeError(f"batch has shape {x0s.shape}, map expects (N, {tmap.n_in})")
    if x0s.shape[0] == 0:
        return np.empty((0, tmap.n_out))
    return kernels.batch_apply(tmap, x0s)


def compose(first: TaylorMap, second: TaylorMap) -> TaylorMap:
    """Map of second∘first (apply `first`, then `second`), truncated.

    Both maps must share the same truncation order; monomials of the
    substituted polynomial above that order are discarded.
    """
    if first.n_out != second.n_in:
        raise ShapeError(f"cannot compose: first.n_out={first.n_out} != second.n_in={second.n_in}")
    if first.order != second.order:
        raise ShapeError(f"cannot compose maps of different order ({first.order} vs {second.order})")
    k = first.order
    basis = get_basis(first.n_in, k)
    coords = first.flat_coefficients()  # (n_mid, N) polynomials in the inputs

    # Polynomials of every monomial of `second`'s input variables, built by
    # degree so each combo extends an already-computed suffix.
    one = np.zeros(basis.size)
    one[0] = 1.0
    polys: dict[tuple[int, ...], np.ndarray] = {(): one}
    n_mid = first.n_out
    result = np.zeros((second.n_out, basis.size))
    result[:, 0] = second.weights[0][:, 0]
    for d in range(1, k + 1):
        wd = second.weights[d]
        for j, combo in enumerate(itertools.combinations_with_replacement(range(n_mid), d)):
            p = basis.multiply(coords[combo[0]], polys[combo[1:]])
            polys[combo] = p
            col = wd[:, j]
            nz = np.nonzero(col)[0]
            if len(nz):
                result[nz, :] += np.outer(col[nz], p)
    return TaylorMap.from_flat(result, first.n_in, k)


def compose_chain(maps) -> TaylorMap:
    """Compose a sequence of maps applied left to right."""
    maps = list(maps)
    if not maps:
        raise ValueError("empty chain")
    acc = maps[0]
    for m in maps[1:]:
        acc = compose(acc, m)
    return acc


@dataclass(frozen=True, eq=False)
class PolyMatrix:
    """Matrix whose entries are truncated polynomials over a shared basis."""

    n_rows: int
    n_cols: int
    basis: MonomialBasis
    coeffs: np.ndarray  # (n_rows, n_cols, basis.size)

    def __call__(self, x) -> np.ndarray:
        mono = self.basis.eval_flat(np.asarray(x, dtype=np.float64))
        return self.coeffs @ mono


def jacobian(tmap: TaylorMap, wrt: int | None = None) -> PolyMatrix:
    """Polynomial Jacobian d(output)/d(input).

    `wrt` limits differentiation to the first `wrt` input variables (used to
    freeze trailing parameter inputs); coefficients stay polynomials in all
    inputs.
    """
    n_cols = tmap.n_in if wrt is None else wrt
    k = tmap.order
    jbasis = get_basis(tmap.n_in, max(k - 1, 0))
    coeffs = np.zeros((tmap.n_out, n_cols, jbasis.size))
    src = get_basis(tmap.n_in, k)
    for d in range(1, k + 1):
        exps = src.blocks[d]
        wd = tmap.weights[d]
        for j in range(exps.shape[0]):
            e = exps[j]
            for v in range(n_cols):
                if e[v] == 0:
                    continue
                de = e.copy()
                de[v] -= 1
                coeffs[:, v, jbasis.index_of(de)] += e[v] * wd[:, j]
    return PolyMatrix(tmap.n_out, n_cols, jbasis, coeffs)
