"""Reference geometry, the convex weight d(x) and the pseudo-convex
Carleman weight phi(x, t) = d(x) - c (t - T/2)^2.

The domain is the rectangle [0, Lx] x [0, Ly]. The bottom edge y = 0 is
the rigid wall Gamma1; the left, top and right edges form one polyline
Gamma0 carrying the flexible plate (a beam in two dimensions), clamped at
the two bottom corners.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ValidationError

HNU_TOL = 1e-12
LAPLACIAN_D = 4.0  # Laplacian of |x - x0|^2 in two dimensions
DEFAULT_TAU_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class Edge:
    name: str
    nodes: np.ndarray  # flat grid indices, ordered along the tangent
    normal: tuple[float, float]
    tangent: tuple[float, float]
    spacing: float
    gamma0: bool

    @property
    def weights(self) -> np.ndarray:
        w = np.full(len(self.nodes), self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w


@dataclass(frozen=True)
class DomainGeometry:
    Lx: float
    Ly: float
    nx: int
    ny: int

    @property
    def extent(self) -> tuple[float, float]:
        return (self.Lx, self.Ly)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.Lx, self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, self.Ly, self.ny)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def flat(self, i, j):
        return np.asarray(i) * self.ny + np.asarray(j)

    @cached_property
    def area_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights on the (nx, ny) grid."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    # -- boundary partition -------------------------------------------------

    @cached_property
    def edges(self) -> tuple[Edge, ...]:
        nx, ny = self.nx, self.ny
        jj = np.arange(ny)
        ii = np.arange(nx)
        return (
            Edge("left", self.flat(0, jj), (-1.0, 0.0), (0.0, 1.0), self.hy, True),
            Edge("top", self.flat(ii, ny - 1), (0.0, 1.0), (1.0, 0.0), self.hx, True),
            Edge("right", self.flat(nx - 1, jj[::-1]), (1.0, 0.0), (0.0, -1.0), self.hy, True),
            Edge("bottom", self.flat(ii, 0), (0.0, -1.0), (1.0, 0.0), self.hx, False),
        )

    @cached_property
    def gamma0(self) -> np.ndarray:
        """Flat indices of the Gamma0 polyline in arclength order."""
        nx, ny = self.nx, self.ny
        left = [(0, j) for j in range(ny)]
        top = [(i, ny - 1) for i in range(1, nx)]
        right = [(nx - 1, j) for j in range(ny - 2, -1, -1)]
        ij = np.array(left + top + right)
        return self.flat(ij[:, 0], ij[:, 1])

    @cached_property
    def gamma1(self) -> np.ndarray:
        """Flat indices of the open bottom edge."""
        return self.flat(np.arange(1, self.nx - 1), 0)

    @property
    def beam_nodes(self) -> int:
        return len(self.gamma0)

    @property
    def beam_length(self) -> float:
        return 2 * self.Ly + self.Lx

    @cached_property
    def arclength(self) -> np.ndarray:
        seg = np.r_[np.full(self.ny - 1, self.hy), np.full(self.nx - 1, self.hx),
                    np.full(self.ny - 1, self.hy)]
        return np.r_[0.0, np.cumsum(seg)]

    @cached_property
    def arc_weights(self) -> np.ndarray:
        """Trapezoidal weights along Gamma0 (arclength)."""
        seg = np.diff(self.arclength)
        w = np.zeros(self.beam_nodes)
        w[:-1] += 0.5 * seg
        w[1:] += 0.5 * seg
        return w

    @property
    def clamp_points(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return ((0.0, 0.0), (self.Lx, 0.0))

    @property
    def uniform_beam(self) -> bool:
        return abs(self.hx - self.hy) <= 1e-12 * max(self.hx, self.hy)

    @property
    def hs(self) -> float:
        if not self.uniform_beam:
            raise ValidationError("beam arclength spacing is nonuniform (hx != hy)")
        return self.hx

    def gamma0_points(self) -> np.ndarray:
        X, Y = self.mesh
        return np.c_[X.ravel()[self.gamma0], Y.ravel()[self.gamma0]]

    def refined(self, factor: int = 2) -> "DomainGeometry":
        return DomainGeometry(self.Lx, self.Ly, factor * (self.nx - 1) + 1,
                              factor * (self.ny - 1) + 1)

    def to_dict(self) -> dict:
        return {"extent": [self.Lx, self.Ly], "nx": self.nx, "ny": self.ny}


def build_reference_domain(nx: int = 33, ny: int = 33, Lx: float = 1.0,
                           Ly: float = 1.0) -> DomainGeometry:
    if nx < 3 or ny < 3:
        raise ValidationError(f"resolution too small: nx={nx}, ny={ny} (need >= 3)")
    if not (Lx > 0 and Ly > 0):
        raise ValidationError(f"nonpositive extent: Lx={Lx}, Ly={Ly}")
    return DomainGeometry(float(Lx), float(Ly), int(nx), int(ny))


# -- convex weight -------------------------------------------------------------


@dataclass(frozen=True)
class ConvexWeight:
    """d(x) = |x - x0|^2 with h = grad d = 2 (x - x0) and Hessian 2 I."""

    geometry: DomainGeometry
    x0: tuple[float, float]

    def d(self, x, y):
        return (np.asarray(x) - self.x0[0]) ** 2 + (np.asarray(y) - self.x0[1]) ** 2

    def h(self, x, y):
        return np.stack([2.0 * (np.asarray(x) - self.x0[0]),
                         2.0 * (np.asarray(y) - self.x0[1])], axis=-1)

    def hessian(self, x=None, y=None):
        shape = np.broadcast(np.asarray(x if x is not None else 0.0),
                             np.asarray(y if y is not None else 0.0)).shape
        return np.broadcast_to(2.0 * np.eye(2), shape + (2, 2))

    laplacian = LAPLACIAN_D

    @cached_property
    def d_grid(self) -> np.ndarray:
        return self.d(*self.geometry.mesh)

    @property
    def max_d(self) -> float:
        return float(self.d_grid.max())

    @property
    def min_d(self) -> float:
        return float(self.d_grid.min())


def eval_weight(geometry: DomainGeometry, x0, check_anchor: bool = True) -> ConvexWeight:
    """Anchor the canonical weight at x0.

    x0 must lie outside the closed rectangle. An anchor off the Gamma1 line
    is accepted and left for :func:`verify_assumptions` to flag. Pass
    ``check_anchor=False`` to build deliberately bad weights for diagnostics.
    """
    x0 = (float(x0[0]), float(x0[1]))
    if check_anchor and 0.0 <= x0[0] <= geometry.Lx and 0.0 <= x0[1] <= geometry.Ly:
        raise ValidationError(f"anchor on closure: x0={x0} lies in the closed domain")
    return ConvexWeight(geometry, x0)


@dataclass(frozen=True)
class AssumptionReport:
    rho: float
    s: float
    max_d: float
    min_d: float
    max_hnu_gamma1: float
    convex_ok: bool
    no_critical_point_ok: bool
    hnu_ok: bool
    anchor_on_line: bool

    @property
    def passed(self) -> bool:
        return self.convex_ok and self.no_critical_point_ok and self.hnu_ok

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["passed"] = self.passed
        return d


def verify_assumptions(geometry: DomainGeometry, weight: ConvexWeight,
                       tol: float = HNU_TOL) -> AssumptionReport:
    X, Y = geometry.mesh
    H = weight.hessian(X, Y)
    rho = float(np.linalg.eigvalsh(H).min())
    hmag = np.linalg.norm(weight.h(X, Y), axis=-1)
    s = float(hmag.min())
    pts = np.c_[X.ravel()[geometry.gamma1], Y.ravel()[geometry.gamma1]]
    hnu = np.abs(weight.h(pts[:, 0], pts[:, 1]) @ np.array([0.0, -1.0]))
    max_hnu = float(hnu.max()) if hnu.size else 0.0
    return AssumptionReport(
        rho=rho, s=s, max_d=weight.max_d, min_d=weight.min_d, max_hnu_gamma1=max_hnu,
        convex_ok=rho > 0, no_critical_point_ok=s > 0, hnu_ok=max_hnu < tol,
        anchor_on_line=weight.x0[1] == 0.0,
    )


def min_observation_time(weight: ConvexWeight) -> float:
    return 2.0 * np.sqrt(weight.max_d)


# -- Carleman weight ------------------------------------------------------------


@dataclass(frozen=True)
class CarlemanParams:
    x0: tuple[float, float]
    T: float
    c: float
    delta: float
    sigma: float
    t0: float
    t1: float
    k: float
    alpha: float
    max_d: float
    min_d: float
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID

    def phi(self, x, y, t):
        return phi(x, y, t, self)

    def with_sigma(self, sigma: float) -> "CarlemanParams":
        t0, t1 = sigma_window(self, sigma)
        return replace(self, sigma=sigma, t0=t0, t1=t1)

    def to_dict(self) -> dict:
        return {"x0": list(self.x0), "T": self.T, "c": self.c, "delta": self.delta,
                "sigma": self.sigma, "t0": self.t0, "t1": self.t1, "k": self.k,
                "alpha": self.alpha, "tau_grid": list(self.tau_grid),
                "max_d": self.max_d, "min_d": self.min_d}


def select_time_params(weight: ConvexWeight, T: float, k: float = 0.5,
                       sigma: float | None = None,
                       tau_grid=DEFAULT_TAU_GRID) -> CarlemanParams:
    """Pick delta and c by the midpoint rule so that T^2 > 4 max d + 4 delta
    and c T^2 > 4 max d + 4 delta with 0 < c < 1."""
    max_d, min_d = weight.max_d, weight.min_d
    T_min = min_observation_time(weight)
    if not T > T_min:
        raise ValidationError(f"horizon too short: T={T} <= T_min={T_min:.12g}")
    if not 0 < k < 1:
        raise ValidationError(f"k must lie in (0, 1), got {k}")
    delta = (T * T - 4 * max_d) / 8.0
    c_low = (4 * max_d + 4 * delta) / (T * T)
    c = 0.5 * (c_low + 1.0)
    alpha = weight.laplacian - 2 * c - 1 + k
    if sigma is None:
        sigma = 0.5 * min_d
    params = CarlemanParams(weight.x0, float(T), c, delta, 0.0, T / 2, T / 2, k, alpha,
                            max_d, min_d, tuple(float(t) for t in tau_grid))
    return params.with_sigma(sigma)


def phi(x, y, t, params: CarlemanParams):
    d = (np.asarray(x) - params.x0[0]) ** 2 + (np.asarray(y) - params.x0[1]) ** 2
    return d - params.c * (np.asarray(t) - params.T / 2) ** 2


def sigma_window(params: CarlemanParams, sigma: float) -> tuple[float, float]:
    if not 0 < sigma < params.min_d:
        raise ValidationError(f"sigma too large: need 0 < sigma < min d = {params.min_d}, got {sigma}")
    half = np.sqrt((params.min_d - sigma) / params.c)
    return params.T / 2 - half, params.T / 2 + half


@dataclass(frozen=True)
class RegionMask:
    """Indicator of Q(sigma) = {phi >= sigma} on a (nt, nx, ny) grid."""

    mask: np.ndarray
    times: np.ndarray
    sigma: float
    t0: float
    t1: float
    spacing: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def sandwich_holds(self, T: float) -> bool:
        window = (self.times >= self.t0) & (self.times <= self.t1)
        inner = bool(self.mask[window].all())
        outer = bool(((self.times >= 0) & (self.times <= T))[self.mask.any(axis=(1, 2))].all())
        return inner and outer


def locate_sigma_window(params: CarlemanParams, sigma: float, geometry: DomainGeometry,
                        times: np.ndarray):
    t0, t1 = sigma_window(params, sigma)
    X, Y = geometry.mesh
    ph = phi(X[None], Y[None], np.asarray(times)[:, None, None], params)
    mask = RegionMask(ph >= sigma - 1e-12, np.asarray(times, dtype=float), sigma, t0, t1,
                      (geometry.hx, geometry.hy))
    if not mask.sandwich_holds(params.T):
        raise ValidationError("Q(sigma) sandwich property failed")
    return t0, t1, mask
