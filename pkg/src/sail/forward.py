"""Time integration of the coupled wave/beam system and of the pure wave
system with prescribed Gamma0 flux.

Data are prescribed at t = T/2. ``two_sided`` runs cover [0, T] by
stepping forward on [T/2, T] and backward on [0, T/2]; ``forward_only``
covers [T/2, T]. The scheme is Crank-Nicolson on  Mb y' = Lb y + G(t)
with one sparse LU per step direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretize import beam_interior, biharmonic_clamped, laplacian_neumann, pad_beam
from .errors import GrowthGuardTripped, SolverError, ValidationError
from .geometry import DomainGeometry
from .operators import CoupledState, OperatorBundle, assemble_generator

log = logging.getLogger(__name__)

MODES = ("two_sided", "forward_only")


# -- source profiles ---------------------------------------------------------------


@dataclass(frozen=True)
class PolynomialProfile:
    """sum_k coeffs[k] (t - center)^k."""

    coeffs: tuple[float, ...]
    center: float = 0.0

    def __call__(self, t, order: int = 0):
        p = np.polynomial.Polynomial(self.coeffs).deriv(order) if order else \
            np.polynomial.Polynomial(self.coeffs)
        return p(np.asarray(t, dtype=float) - self.center)


@dataclass(frozen=True)
class TrigProfile:
    """offset + amplitude sin(omega (t - center) + phase)."""

    amplitude: float
    omega: float
    phase: float = 0.0
    offset: float = 0.0
    center: float = 0.0

    def __call__(self, t, order: int = 0):
        arg = self.omega * (np.asarray(t, dtype=float) - self.center) + self.phase
        val = self.amplitude * self.omega**order * np.sin(arg + order * np.pi / 2)
        return val + (self.offset if order == 0 else 0.0)


@dataclass(frozen=True)
class SeparableSource:
    """R(x, t) = spatial(x) * profile(t), with exact time derivatives."""

    spatial: np.ndarray
    profile: Callable

    def __call__(self, t, order: int = 0) -> np.ndarray:
        return np.asarray(self.spatial) * self.profile(t, order)

    def at_nodes(self, nodes, t) -> np.ndarray:
        return np.asarray(self.spatial).ravel()[nodes] * self.profile(t)


@dataclass(frozen=True)
class TabulatedSource:
    """R(x, t) given on a time grid, e.g. R = z(p) from a forward run.
    Time derivatives are second-order finite differences."""

    times: np.ndarray
    values: np.ndarray  # (nt, nx, ny)

    def _index(self, t) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError(f"tabulated source has no sample at t={t}")
        return k

    def __call__(self, t, order: int = 0) -> np.ndarray:
        vals = self.values
        for _ in range(order):
            vals = np.gradient(vals, self.times, axis=0, edge_order=2)
        return vals[self._index(t)]

    def at_nodes(self, nodes, t) -> np.ndarray:
        return self.values[self._index(t)].ravel()[nodes]


@dataclass
class SourceSpec:
    f: np.ndarray
    R: object  # SeparableSource | TabulatedSource
    r0: float | None = None
    r1: float | None = None

    def load(self, t) -> np.ndarray:
        return np.asarray(self.f) * self.R(t)

    def check_bounds(self, T: float) -> tuple[bool, bool]:
        """Whether |R(., T/2)| >= r0 and |R_t(., T/2)| >= r1 at every node."""
        R0 = np.abs(self.R(T / 2))
        R1 = np.abs(self.R(T / 2, 1))
        ok0 = self.r0 is None or bool(np.all(R0 >= self.r0))
        ok1 = self.r1 is None or bool(np.all(R1 >= self.r1))
        return ok0, ok1


# -- trajectories ---------------------------------------------------------------------


@dataclass
class Trajectory:
    geometry: DomainGeometry
    times: np.ndarray
    states: np.ndarray  # (nt, ndof)
    kind: str  # "coupled" | "wave"
    mode: str
    kappa: float
    dt: float
    center: int  # index of t = T/2
    flux: np.ndarray | None = None  # (nt, beam_nodes) Gamma0 flux
    stride: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.geometry.size

    @property
    def nb(self) -> int:
        return self.geometry.beam_nodes - 2

    @property
    def z(self) -> np.ndarray:
        return self.states[:, :self.n].reshape((-1,) + self.geometry.shape)

    @property
    def zt(self) -> np.ndarray:
        return self.states[:, self.n:2 * self.n].reshape((-1,) + self.geometry.shape)

    @property
    def v(self) -> np.ndarray:
        self._need_beam()
        return self.states[:, 2 * self.n:2 * self.n + self.nb]

    @property
    def vt(self) -> np.ndarray:
        self._need_beam()
        return self.states[:, 2 * self.n + self.nb:]

    def _need_beam(self):
        if self.kind != "coupled":
            raise ValidationError("wave trajectories carry no beam component")

    def state(self, k: int) -> CoupledState:
        self._need_beam()
        return CoupledState.from_vector(self.geometry, self.states[k])

    @property
    def window(self) -> float:
        return float(self.times[-1] - self.times[0])


def _time_grid(T: float, dt: float, mode: str) -> tuple[int, float]:
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    n_half = max(1, int(round(T / 2 / dt)))
    return n_half, T / 2 / n_half


class _Factorized:
    """splu with a multi-column solve."""

    def __init__(self, A):
        self.lu = spla.splu(A.tocsc())

    def __call__(self, b):
        return self.lu.solve(np.asarray(b))


def integrate(Mb, Lb, y_center, times: np.ndarray, center: int, load: Callable | None,
              observe: Callable | None = None, guard: Callable | None = None):
    """Core Crank-Nicolson loop.

    ``load(t)`` returns the load vector G(t) (shape of y) or None;
    ``observe(y)`` maps a state (or a batch of states as columns) to what
    is stored. Returns an array stacked along time. ``guard(y, k)`` is
    called after every step with the step direction and may raise.
    """
    observe = observe or (lambda y: y.copy())
    nt = len(times)
    out = [None] * nt
    out[center] = observe(y_center)
    for direction, idx in ((+1, range(center, nt - 1)), (-1, range(center, 0, -1))):
        if len(idx) == 0:
            continue
        dt = times[idx[0] + direction] - times[idx[0]]
        try:
            lu = _Factorized(Mb - 0.5 * dt * Lb)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        rhs_op = (Mb + 0.5 * dt * Lb).tocsr()
        y = y_center
        g_now = load(times[center]) if load else None
        for k in idx:
            k1 = k + direction
            rhs = rhs_op @ y
            if load:
                g_next = load(times[k1])
                if g_now is not None:
                    rhs = rhs + 0.5 * dt * (g_now + g_next)
                g_now = g_next
            y = lu(rhs)
            if guard is not None:
                guard(y, k1, direction)
            out[k1] = observe(y)
    return np.stack(out)


def _check_initial(initial: CoupledState, geometry: DomainGeometry) -> None:
    initial.check(geometry)


def simulate_coupled(geometry: DomainGeometry, q_field=None, source: SourceSpec | None = None,
                     initial: CoupledState | None = None, T: float = 4.6, dt: float = 1 / 256,
                     mode: str = "forward_only", kappa: float = 1.0,
                     growth_guard: float = 1e6, stride: int = 1,
                     bundle: OperatorBundle | None = None) -> Trajectory:
    """Coupled system with data at T/2 and source f R on the wave equation.

    ``kappa`` scales the structural damping; kappa = 1 is the physical
    model. Backward integration of the damped plate is anti-dissipative, so
    the two-sided branch is watched by a growth guard.
    """
    bundle = bundle or assemble_generator(geometry, q_field, kappa)
    if bundle.kappa != kappa:
        raise ValidationError("bundle kappa does not match requested kappa")
    initial = initial if initial is not None else CoupledState.zeros(geometry)
    _check_initial(initial, geometry)
    n_half, dt_eff = _time_grid(T, dt, mode)
    if mode == "two_sided":
        times = T / 2 + dt_eff * np.arange(-n_half, n_half + 1)
        center = n_half
    else:
        times = T / 2 + dt_eff * np.arange(0, n_half + 1)
        center = 0
    Mb, Lb = bundle.blocks
    n, nb = bundle.n, bundle.nb
    mass = bundle.lap.mass

    load = None
    if source is not None:
        f = np.asarray(source.f, dtype=float).ravel()

        def load(t):
            G = np.zeros(bundle.ndof)
            G[n:2 * n] = mass * f * np.ravel(source.R(t))
            return G

    y0 = initial.as_vector()
    E = bundle.energy_matrix
    norm = lambda y: float(np.sqrt(max(y @ (E @ y) + y[:n] @ (mass * y[:n]), 0.0)))
    guard = None
    if mode == "two_sided":
        ref = [norm(y0)]

        def guard(y, k, direction):
            size = norm(y)
            if direction > 0:
                ref[0] = max(ref[0], size)
            elif not size <= growth_guard * max(ref[0], 1e-300):
                raise GrowthGuardTripped(
                    f"backward branch exceeded {growth_guard:g} x the reference energy norm "
                    f"at t={times[k]:.4g} (anti-dissipative plate damping, kappa={kappa})")

    if stride < 1 or center % stride:
        raise ValidationError(f"stride {stride} does not sample t = T/2")
    states = integrate(Mb, Lb, y0, times, center, load, guard=guard)[::stride]
    flux = pad_beam(states[:, 2 * n + nb:])
    return Trajectory(geometry, times[::stride], states, "coupled", mode, kappa, dt_eff,
                      center // stride, flux, stride, {"T": T})


def wave_blocks(geometry: DomainGeometry, q_field=None, lap=None):
    lap = lap or laplacian_neumann(geometry)
    n = geometry.size
    q = np.zeros(n) if q_field is None else np.ravel(q_field)
    M = sp.diags(lap.mass)
    In = sp.identity(n)
    Mb = sp.block_diag([In, M]).tocsr()
    Lb = sp.bmat([[None, In], [lap.matrix + M @ sp.diags(q), None]], format="csr")
    return Mb, Lb, lap


def simulate_wave(geometry: DomainGeometry, q_field=None, w0=None, w1=None, g=None,
                  T: float = 4.6, dt: float = 1 / 256, mode: str = "two_sided",
                  source: Callable | None = None) -> Trajectory:
    """Wave equation with zero flux on Gamma1 and flux g on Gamma0.

    g is None, a callable t -> values on the Gamma0 nodes, or an array of
    shape (nt, beam_nodes) on the run's time grid. ``source`` is a callable
    t -> interior forcing field.
    """
    n_half, dt_eff = _time_grid(T, dt, mode)
    if mode == "two_sided":
        times = T / 2 + dt_eff * np.arange(-n_half, n_half + 1)
        center = n_half
    else:
        times = T / 2 + dt_eff * np.arange(0, n_half + 1)
        center = 0
    Mb, Lb, lap = wave_blocks(geometry, q_field)
    n = geometry.size
    w0 = np.zeros(geometry.shape) if w0 is None else np.asarray(w0, dtype=float)
    w1 = np.zeros(geometry.shape) if w1 is None else np.asarray(w1, dtype=float)
    g_of_t = _flux_function(g, times, geometry)
    load = None
    if g_of_t is not None or source is not None:
        def load(t):
            G = np.zeros(2 * n)
            if g_of_t is not None:
                G[n:] += lap.injection @ g_of_t(t)
            if source is not None:
                G[n:] += lap.mass * np.ravel(source(t))
            return G
    states = integrate(Mb, Lb, np.r_[w0.ravel(), w1.ravel()], times, center, load)
    flux = np.stack([g_of_t(t) for t in times]) if g_of_t is not None else \
        np.zeros((len(times), geometry.beam_nodes))
    return Trajectory(geometry, times, states, "wave", mode, 0.0, dt_eff, center, flux,
                      meta={"T": T})


def _flux_function(g, times, geometry):
    if g is None:
        return None
    if callable(g):
        return lambda t: np.asarray(g(t), dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape != (len(times), geometry.beam_nodes):
        raise ValidationError(f"flux series shape {g.shape} != {(len(times), geometry.beam_nodes)}")

    def lookup(t):
        k = int(np.argmin(np.abs(times - t)))
        return g[k]
    return lookup


# -- traces ------------------------------------------------------------------------------


@dataclass
class TraceSeries:
    times: np.ndarray
    u: np.ndarray      # (nt, nb) on the interior beam nodes
    ut: np.ndarray
    utt: np.ndarray
    uttt: np.ndarray
    bilap_utt: np.ndarray
    hs: float
    provenance: str = "simulated"

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def norm(self, name: str) -> float:
        """L2(Gamma0 x window) norm by trapezoidal quadrature."""
        return l2_space_time(getattr(self, name), self.times, self.hs)


def l2_space_time(values, times, hs) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        spatial = hs * np.sum(np.asarray(values) ** 2, axis=1)
        return float(np.sqrt(np.trapezoid(spatial, times)))


def time_derivative(values, dt: float) -> np.ndarray:
    """Centered differences, second-order one-sided at the ends."""
    return np.gradient(values, dt, axis=0, edge_order=2)


def traces_from_displacement(u, times, geometry: DomainGeometry, ut=None,
                             provenance: str = "simulated") -> TraceSeries:
    dt = float(times[1] - times[0])
    ut = time_derivative(u, dt) if ut is None else ut
    utt = time_derivative(ut, dt)
    uttt = time_derivative(utt, dt)
    D4 = biharmonic_clamped(geometry).matrix
    bilap = (D4 @ utt.T).T
    return TraceSeries(np.asarray(times), np.asarray(u), ut, utt, uttt, bilap, geometry.hs,
                       provenance)


def extract_traces(traj: Trajectory, source: str = "velocity") -> TraceSeries:
    """Observation traces on Gamma0.

    ``source="velocity"`` takes u_t from the stored beam velocity;
    ``"displacement"`` differentiates u itself, which is the pipeline
    used when noise is added to u.
    """
    if traj.stride != 1:
        raise ValidationError("stride too coarse: traces need full-stride snapshots")
    if len(traj.times) < 4:
        raise ValidationError("stride too coarse: fewer than four time samples")
    ut = traj.vt if source == "velocity" else None
    return traces_from_displacement(traj.v, traj.times, traj.geometry, ut)


# -- energy -------------------------------------------------------------------------------


class EnergySeries(NamedTuple):
    times: np.ndarray
    wave: np.ndarray    # int (w^2 + w_t^2 + |grad w|^2)
    plate: np.ndarray   # int_Gamma0 ((v'')^2 + v_t^2)
    total: np.ndarray   # 1/2 (|grad z|^2 + zt^2 + (v'')^2 + vt^2), conserved at kappa = q = 0


def energy(traj: Trajectory) -> EnergySeries:
    g = traj.geometry
    lap = laplacian_neumann(g)
    K, m = lap.stiffness, lap.mass
    n = g.size
    Z = traj.states[:, :n]
    Zt = traj.states[:, n:2 * n]
    grad = np.einsum("ti,ti->t", Z, (K @ Z.T).T)
    wave = Z**2 @ m + Zt**2 @ m + grad
    if traj.kind == "coupled":
        D4 = biharmonic_clamped(g).matrix
        wb = g.arc_weights[beam_interior(g)]
        V, Vt = traj.v, traj.vt
        plate = np.einsum("ti,ti->t", V * wb, (D4 @ V.T).T) + Vt**2 @ wb
    else:
        plate = np.zeros(len(traj.times))
    total = 0.5 * (grad + Zt**2 @ m + plate)
    return EnergySeries(traj.times, wave, plate, total)


def differentiate_system_in_time(traj: Trajectory, order: int = 1) -> Trajectory:
    """Trajectory of w_t (order 1) or w_tt (order 2).

    The displacement components of the result are the stored velocities of
    the input; only the new velocities are differenced.
    """
    if order not in (1, 2):
        raise ValidationError(f"order out of range: {order}")
    out = traj
    for _ in range(order):
        n = out.n
        S = out.states
        new = np.empty_like(S)
        new[:, :n] = S[:, n:2 * n]
        new[:, n:2 * n] = time_derivative(S[:, n:2 * n], out.dt)
        if out.kind == "coupled":
            nb = out.nb
            new[:, 2 * n:2 * n + nb] = S[:, 2 * n + nb:]
            new[:, 2 * n + nb:] = time_derivative(S[:, 2 * n + nb:], out.dt)
            flux = pad_beam(new[:, 2 * n + nb:])
        else:
            flux = time_derivative(out.flux, out.dt) if out.flux is not None else None
        out = Trajectory(out.geometry, out.times, new, out.kind, out.mode, out.kappa, out.dt,
                         out.center, flux, out.stride, dict(out.meta))
    return out


def second_derivative_at(values: np.ndarray, k: int, dt: float) -> np.ndarray:
    """d^2/dt^2 of a time series at index k (centered, or one-sided at ends)."""
    nt = len(values)
    if 0 < k < nt - 1:
        return (values[k + 1] - 2 * values[k] + values[k - 1]) / dt**2
    if k == 0:
        return (2 * values[0] - 5 * values[1] + 4 * values[2] - values[3]) / dt**2
    return (2 * values[-1] - 5 * values[-2] + 4 * values[-3] - values[-4]) / dt**2


def initial_time_identity(traj: Trajectory, source: SourceSpec) -> float:
    """Relative misfit of  wbar_tt(T/2) = f R_t(T/2)  for wbar = w_t of a
    zero-data linear run."""
    wbar = differentiate_system_in_time(traj, 1)
    lhs = second_derivative_at(wbar.z, traj.center, traj.dt)
    rhs = np.asarray(source.f) * source.R(traj.meta["T"] / 2, 1)
    w = traj.geometry.area_weights
    return float(np.sqrt(np.sum(w * (lhs - rhs) ** 2) / np.sum(w * rhs**2)))
