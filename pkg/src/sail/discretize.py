"""Finite-difference operators on the reference geometry.

Grid fields are (nx, ny) arrays, flattened in C order for the sparse
operators. Neumann conditions use ghost nodes; after ghost elimination the
5-point Laplacian L satisfies M L = -K with M the diagonal trapezoidal
mass and K symmetric positive semidefinite, so the weak form -K is what
gets exposed as the symmetric operator. A boundary flux g on Gamma0 enters
as the load P^T W g, W being the Gamma0 arclength weights; this is exactly
what the ghost nodes contribute.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CompatibilityWarning, SolverError, ValidationError
from .geometry import DomainGeometry


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    domain: str
    codomain: str
    symmetric: bool = False

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


@dataclass(frozen=True)
class NeumannLaplacian(SparseOperator):
    """Weak-form zero-flux Laplacian plus what is needed for nodal use.

    ``matrix`` is -K. ``mass`` holds the diagonal of M and ``injection``
    maps a flux on the Gamma0 nodes (arclength order) to the load vector.
    """

    mass: np.ndarray = None
    injection: sp.csr_matrix = None
    geometry: DomainGeometry = None

    @property
    def stiffness(self) -> sp.csr_matrix:
        return -self.matrix

    @property
    def nodal(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.mass) @ self.matrix

    def apply(self, z, flux=None) -> np.ndarray:
        """Nodal Laplacian of z with flux on Gamma0 and zero flux on Gamma1."""
        z = np.asarray(z, dtype=float)
        load = self.matrix @ z.reshape(-1)
        if flux is not None:
            load = load + self.injection @ np.asarray(flux, dtype=float)
        return (load / self.mass).reshape(z.shape)


def _neumann_1d(n: int, h: float) -> tuple[sp.csr_matrix, np.ndarray]:
    main = np.full(n, -2.0)
    up = np.ones(n - 1)
    lo = np.ones(n - 1)
    up[0] = 2.0
    lo[-1] = 2.0
    D = sp.diags([lo, main, up], [-1, 0, 1]) / h**2
    w = np.full(n, h)
    w[[0, -1]] *= 0.5
    return D.tocsr(), w


def laplacian_neumann(geometry: DomainGeometry) -> NeumannLaplacian:
    g = geometry
    Dx, wx = _neumann_1d(g.nx, g.hx)
    Dy, wy = _neumann_1d(g.ny, g.hy)
    weak = sp.kron(sp.diags(wx) @ Dx, sp.diags(wy)) + sp.kron(sp.diags(wx), sp.diags(wy) @ Dy)
    weak = weak.tocsr()
    # exact symmetrization removes roundoff from the two scaled products
    weak = (0.5 * (weak + weak.T)).tocsr()
    mass = np.outer(wx, wy).ravel()
    inj = sp.csr_matrix((g.arc_weights, (g.gamma0, np.arange(g.beam_nodes))),
                        shape=(g.size, g.beam_nodes))
    return NeumannLaplacian(weak, "omega", "omega", True, mass=mass, injection=inj,
                            geometry=g)


def biharmonic_clamped(geometry: DomainGeometry) -> SparseOperator:
    """Fourth difference on the interior beam nodes.

    The clamp v = v' = 0 is imposed by storing interior nodes only and the
    reflected ghost v[-1] = v[1], which turns the first and last diagonal
    entries into 7.
    """
    n = geometry.beam_nodes - 2
    if geometry.beam_nodes < 7:
        raise ValidationError(f"beam too short: {geometry.beam_nodes} nodes (need >= 7)")
    hs = geometry.hs
    main = np.full(n, 6.0)
    main[[0, -1]] = 7.0
    D4 = sp.diags([np.ones(n - 2), -4 * np.ones(n - 1), main, -4 * np.ones(n - 1),
                   np.ones(n - 2)], [-2, -1, 0, 1, 2]) / hs**4
    return SparseOperator(D4.tocsr(), "beam", "beam", True)


def beam_interior(geometry: DomainGeometry) -> slice:
    return slice(1, geometry.beam_nodes - 1)


def pad_beam(v) -> np.ndarray:
    """Interior beam values -> all Gamma0 nodes (zero at the clamps)."""
    v = np.asarray(v)
    pad = [(0, 0)] * v.ndim
    pad[-1] = (1, 1)
    return np.pad(v, pad)


def neumann_map(geometry: DomainGeometry, g, lap: NeumannLaplacian | None = None,
                tol: float = 1e-10) -> np.ndarray:
    """Harmonic extension with flux g on Gamma0, zero flux on Gamma1,
    normalised to zero mean. Fluxes violating the compatibility condition
    are mean-projected with a :class:`CompatibilityWarning`."""
    lap = lap or laplacian_neumann(geometry)
    g = np.asarray(g, dtype=float)
    w = geometry.arc_weights
    total = float(w @ g)
    if abs(total) > tol * max(1.0, float(w @ np.abs(g))):
        warnings.warn(f"flux has nonzero mean {total:.3e}; projecting", CompatibilityWarning,
                      stacklevel=2)
        g = g - total / w.sum()
    solver = _bordered_solver(geometry, lap)
    rhs = np.r_[lap.injection @ g, 0.0]
    sol = solver(rhs)
    if not np.all(np.isfinite(sol)):
        raise SolverError("Neumann map solve failed")
    return sol[:-1].reshape(geometry.shape)


_BORDERED_CACHE: dict = {}


def _bordered_solver(geometry: DomainGeometry, lap: NeumannLaplacian):
    key = (geometry, "bordered")
    if key not in _BORDERED_CACHE:
        m = lap.mass[:, None]
        A = sp.bmat([[lap.stiffness, sp.csr_matrix(m)], [sp.csr_matrix(m.T), None]]).tocsc()
        try:
            _BORDERED_CACHE[key] = spla.factorized(A)
        except RuntimeError as exc:
            raise SolverError(f"Neumann map factorization failed: {exc}") from exc
    return _BORDERED_CACHE[key]


class TraceFlux(NamedTuple):
    trace_gamma0: np.ndarray
    trace_gamma1: np.ndarray
    flux_gamma0: np.ndarray
    flux_gamma1: np.ndarray


def _interior_laplacian(z: np.ndarray, hx: float, hy: float) -> np.ndarray:
    out = np.full(z.shape, np.nan)
    out[1:-1, 1:-1] = ((z[2:, 1:-1] - 2 * z[1:-1, 1:-1] + z[:-2, 1:-1]) / hx**2
                       + (z[1:-1, 2:] - 2 * z[1:-1, 1:-1] + z[1:-1, :-2]) / hy**2)
    return out


def _extrapolate(lap, a, b):
    """Linear extrapolation of the interior Laplacian to the boundary."""
    if b is None:
        return lap[a]
    return 2 * lap[a] - lap[b]


def normal_flux(geometry: DomainGeometry, z) -> np.ndarray:
    """Outward normal derivative at every boundary node, shape (nx, ny).

    The ghost value on each edge is chosen so that the ghost-node Laplacian
    at the boundary node matches the interior Laplacian extrapolated
    linearly along the inward normal. The formula is second order for
    smooth fields and reproduces the flux that a discrete Neumann solve
    was driven with. At the top corners both Gamma0 edges are assumed to
    carry the same flux; at the bottom corners the Gamma1 side is zero.
    Interior entries are NaN.
    """
    z = np.asarray(z, dtype=float).reshape(geometry.shape)
    nx, ny, hx, hy = geometry.nx, geometry.ny, geometry.hx, geometry.hy
    lap = _interior_laplacian(z, hx, hy)
    g = np.full(z.shape, np.nan)
    far_x = 2 if nx >= 4 else None
    far_y = 2 if ny >= 4 else None
    J = np.arange(1, ny - 1)
    I = np.arange(1, nx - 1)
    dyy = lambda i: (z[i, 2:] - 2 * z[i, 1:-1] + z[i, :-2]) / hy**2
    dxx = lambda j: (z[2:, j] - 2 * z[1:-1, j] + z[:-2, j]) / hx**2
    # left / right edges
    for i0, i1, i2 in ((0, 1, far_x), (nx - 1, nx - 2, None if far_x is None else nx - 3)):
        E = _extrapolate(lap, (i1, J), None if i2 is None else (i2, J))
        g[i0, J] = 0.5 * hx * (E - dyy(i0)) - (z[i1, J] - z[i0, J]) / hx
    # top / bottom edges
    for j0, j1, j2 in ((ny - 1, ny - 2, None if far_y is None else ny - 3), (0, 1, far_y)):
        E = _extrapolate(lap, (I, j1), None if j2 is None else (I, j2))
        g[I, j0] = 0.5 * hy * (E - dxx(j0)) - (z[I, j1] - z[I, j0]) / hy
    # corners: (i0, j0, inward i, inward j, Gamma1 on the y side)
    corners = ((0, ny - 1, 1, ny - 2, False), (nx - 1, ny - 1, nx - 2, ny - 2, False),
               (0, 0, 1, 1, True), (nx - 1, 0, nx - 2, 1, True))
    for i0, j0, i1, j1, rigid_y in corners:
        di, dj = i1 - i0, j1 - j0
        far = (i0 + 2 * di, j0 + 2 * dj)
        E = lap[i1, j1] if (far_x is None or far_y is None) else 2 * lap[i1, j1] - lap[far]
        rest = E - 2 * (z[i1, j0] - z[i0, j0]) / hx**2 - 2 * (z[i0, j1] - z[i0, j0]) / hy**2
        g[i0, j0] = rest / (2 / hx) if rigid_y else rest / (2 / hx + 2 / hy)
    return g


def trace_and_flux(geometry: DomainGeometry, field) -> TraceFlux:
    """Boundary values and outward normal derivatives, Gamma0 in arclength
    order, Gamma1 left to right. The Gamma1 channel is returned separately;
    B* in the operator form is the Gamma0 trace alone."""
    z = np.asarray(field, dtype=float).reshape(-1)
    flux = normal_flux(geometry, z).reshape(-1)
    return TraceFlux(z[geometry.gamma0], z[geometry.gamma1], flux[geometry.gamma0],
                     flux[geometry.gamma1])


def beam_transfer(geometry: DomainGeometry, n_beam: int | None = None):
    """Permutation matrices between beam (arclength) order and boundary
    (ascending flat index) order of the Gamma0 nodes."""
    n = geometry.beam_nodes
    if n_beam is not None and n_beam != n:
        raise ValidationError(f"mismatched node counts: beam has {n_beam}, Gamma0 has {n}")
    order = np.argsort(geometry.gamma0)
    to_boundary = sp.csr_matrix((np.ones(n), (np.arange(n), order)), shape=(n, n))
    return to_boundary, to_boundary.T.tocsr()


def trace_operator(geometry: DomainGeometry, interior_only: bool = True) -> sp.csr_matrix:
    """Sparse restriction of a grid field to the Gamma0 nodes."""
    nodes = geometry.gamma0[beam_interior(geometry)] if interior_only else geometry.gamma0
    return sp.csr_matrix((np.ones(len(nodes)), (np.arange(len(nodes)), nodes)),
                         shape=(len(nodes), geometry.size))
