"""Linear inverse source problem, its regularized solvers, stability and
splitting diagnostics, and the iterative recovery of the potential q.

The forward map takes the values of f at the interior grid nodes to the
u_tt trace on the interior beam nodes, stacked time-major. Norms are the
discrete L2 norms: area weights on f, arclength-times-time trapezoid
weights on the data. Solvers work on the weighted matrix so that the
Euclidean geometry they use is the L2 geometry of the continuous problem.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .discretize import beam_interior, biharmonic_clamped
from .errors import DivergenceError, HypothesisWarning, SolverError, ValidationError
from .forward import (SourceSpec, TabulatedSource, TraceSeries, _time_grid, integrate,
                      l2_space_time, simulate_coupled, simulate_wave, time_derivative,
                      differentiate_system_in_time, traces_from_displacement, wave_blocks)
from .geometry import DomainGeometry
from .operators import CoupledState, assemble_generator
from .verify import time_weights

MAX_UNKNOWNS = 2000
RANK_RTOL = 1e-10
TWO_SIDED_KAPPA_MAX = 0.01


def _window(T: float, dt: float, mode: str):
    n_half, dt_eff = _time_grid(T, dt, mode)
    if mode == "two_sided":
        return T / 2 + dt_eff * np.arange(-n_half, n_half + 1), n_half
    return T / 2 + dt_eff * np.arange(0, n_half + 1), 0


def interior_nodes(geometry: DomainGeometry) -> np.ndarray:
    return np.flatnonzero(geometry.interior_mask.ravel())


def embed(geometry: DomainGeometry, f_interior) -> np.ndarray:
    """Interior-node vector -> grid field (zero on the boundary)."""
    out = np.zeros(geometry.size)
    out[interior_nodes(geometry)] = f_interior
    return out.reshape(geometry.shape)


# -- forward map ----------------------------------------------------------------------------


@dataclass
class ForwardMapMatrix:
    matrix: np.ndarray         # (nt * nb, n_f), rows time-major
    times: np.ndarray
    nodes: np.ndarray          # flat indices of the unknowns
    row_weights: np.ndarray    # data quadrature weights
    col_weights: np.ndarray    # area weights of the unknowns
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nb(self) -> int:
        return self.matrix.shape[0] // len(self.times)

    def __matmul__(self, f):
        return self.matrix @ f

    def rmatvec(self, b):
        return self.matrix.T @ b

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.matrix.__matmul__,
                              rmatvec=lambda b: self.matrix.T @ b, dtype=float)

    def weighted(self) -> np.ndarray:
        return np.sqrt(self.row_weights)[:, None] * self.matrix / np.sqrt(self.col_weights)[None, :]

    def data_vector(self, observation) -> np.ndarray:
        """Stack an observation (TraceSeries or (nt, nb) u_tt array)."""
        utt = observation.utt if isinstance(observation, TraceSeries) else np.asarray(observation)
        if isinstance(observation, TraceSeries) and (
                len(observation.times) != len(self.times)
                or not np.allclose(observation.times, self.times, rtol=0, atol=1e-9)):
            raise ValidationError("shape mismatch: observation time grid differs from the map")
        if utt.shape != (len(self.times), self.nb):
            raise ValidationError(f"shape mismatch: observation {utt.shape} vs map "
                                  f"{(len(self.times), self.nb)}")
        return utt.ravel()


def _hash_config(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return hashlib.sha256(np.ascontiguousarray(o, dtype=float).tobytes()).hexdigest()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return repr(o)


def _source_fingerprint(R, times) -> str:
    vals = np.stack([np.asarray(R(t), dtype=float) for t in times[:: max(1, len(times) // 8)]])
    return hashlib.sha256(vals.tobytes()).hexdigest()[:16]


def simulate_columns(geometry: DomainGeometry, q_field, R, F: np.ndarray, T: float, dt: float,
                     mode: str = "forward_only", kappa: float = 1.0, record: str = "vt",
                     batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Zero-data coupled runs for the source columns F (n, k), all at once.

    Returns the times and the recorded beam quantity ('vt' or 'v') with
    shape (nt, nb, k).
    """
    bundle = assemble_generator(geometry, q_field, kappa)
    Mb, Lb = bundle.blocks
    n, nb = bundle.n, bundle.nb
    times, center = _window(T, dt, mode)
    if mode == "two_sided" and kappa > TWO_SIDED_KAPPA_MAX:
        raise ValidationError(f"two-sided source runs need kappa <= {TWO_SIDED_KAPPA_MAX} "
                              f"(backward plate damping is ill-posed), got {kappa}")
    sl = slice(2 * n + nb, None) if record == "vt" else slice(2 * n, 2 * n + nb)
    F = np.asarray(F, dtype=float).reshape(n, -1)
    out = np.empty((len(times), nb, F.shape[1]))
    for start in range(0, F.shape[1], batch):
        cols = F[:, start:start + batch]
        mF = bundle.lap.mass[:, None] * cols

        def load(t, mF=mF):
            G = np.zeros((bundle.ndof, mF.shape[1]))
            G[n:2 * n] = np.ravel(R(t))[:, None] * mF
            return G

        y0 = np.zeros((bundle.ndof, cols.shape[1]))
        obs = integrate(Mb, Lb, y0, times, center, load, observe=lambda y: y[sl].copy())
        if not np.all(np.isfinite(obs)):
            raise SolverError(f"non-finite trace in columns {start}..{start + cols.shape[1] - 1}"
                              f" (mode={mode}, kappa={kappa})")
        out[:, :, start:start + cols.shape[1]] = obs
    return times, out


def _utt_from(record: str, values: np.ndarray, dt: float) -> np.ndarray:
    if record == "vt":
        return time_derivative(values, dt)
    return time_derivative(time_derivative(values, dt), dt)


def data_weights(geometry: DomainGeometry, times: np.ndarray) -> np.ndarray:
    wb = geometry.arc_weights[beam_interior(geometry)]
    return np.outer(time_weights(times), wb).ravel()


def assemble_forward_map(geometry: DomainGeometry, q_field, R, T: float = 4.6,
                         dt: float = 1 / 128, mode: str = "forward_only", kappa: float = 1.0,
                         pipeline: str = "velocity", cache_dir: str | Path | None = None,
                         batch: int = 256) -> ForwardMapMatrix:
    """Column j is the u_tt trace produced by f = indicator of interior node j.

    ``pipeline='displacement'`` differentiates the beam displacement twice
    (the pipeline noisy data go through); ``'velocity'`` differentiates the
    stored beam velocity once.
    """
    nodes = interior_nodes(geometry)
    if len(nodes) > MAX_UNKNOWNS:
        raise ValidationError(f"scale too large: {len(nodes)} unknowns > {MAX_UNKNOWNS}")
    times, _ = _window(T, dt, mode)
    meta = {"geometry": geometry.to_dict(), "T": T, "dt": float(times[1] - times[0]),
            "mode": mode, "kappa": kappa, "pipeline": pipeline,
            "q": None if q_field is None else np.asarray(q_field, dtype=float),
            "R": _source_fingerprint(R, times)}
    key = _hash_config(meta)
    meta = {k: v for k, v in meta.items() if k != "q"}
    meta["config_hash"] = key
    if cache_dir is not None:
        cached = _load_cached(Path(cache_dir), key)
        if cached is not None:
            return cached
    F = np.zeros((geometry.size, len(nodes)))
    F[nodes, np.arange(len(nodes))] = 1.0
    record = "vt" if pipeline == "velocity" else "v"
    times, obs = simulate_columns(geometry, q_field, R, F, T, dt, mode, kappa, record, batch)
    utt = _utt_from(record, obs, times[1] - times[0])
    A = utt.reshape(-1, len(nodes))
    fmap = ForwardMapMatrix(A, times, nodes, data_weights(geometry, times),
                            geometry.area_weights.ravel()[nodes], meta)
    if cache_dir is not None:
        _store_cached(Path(cache_dir), key, fmap)
    return fmap


def _load_cached(d: Path, key: str):
    from .io import read_field
    path = d / f"forward_map_{key}.saif"
    if not path.exists():
        return None
    header, arrays = read_field(path)
    return ForwardMapMatrix(arrays["matrix"], arrays["times"], arrays["nodes"].astype(int),
                            arrays["row_weights"], arrays["col_weights"], header["meta"])


def _store_cached(d: Path, key: str, fmap: ForwardMapMatrix) -> None:
    from .io import write_field
    d.mkdir(parents=True, exist_ok=True)
    write_field(d / f"forward_map_{key}.saif",
                {"matrix": fmap.matrix, "times": fmap.times, "nodes": fmap.nodes.astype(float),
                 "row_weights": fmap.row_weights, "col_weights": fmap.col_weights},
                {"meta": fmap.meta})


# -- injectivity ----------------------------------------------------------------------------


@dataclass
class InjectivityReport:
    singular_values: np.ndarray
    rank: int
    n_unknowns: int
    sigma_min: float

    @property
    def full_rank(self) -> bool:
        return self.rank == self.n_unknowns

    def to_dict(self) -> dict:
        s = self.singular_values
        return {"rank": self.rank, "n_unknowns": self.n_unknowns, "full_rank": self.full_rank,
                "sigma_max": float(s[0]) if len(s) else 0.0, "sigma_min": self.sigma_min,
                "singular_values": s.tolist()}


def _svd(fmap: ForwardMapMatrix):
    cache = getattr(fmap, "_svd_cache", None)
    if cache is None:
        try:
            cache = np.linalg.svd(fmap.weighted(), full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"SVD failure: {exc}") from exc
        fmap._svd_cache = cache
    return cache


def injectivity_diagnostics(fmap: ForwardMapMatrix) -> InjectivityReport:
    """Singular spectrum of the weighted map and its numerical rank at the
    threshold 1e-10 sigma_max (an identically zero map has rank 0)."""
    _, s, _ = _svd(fmap)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
    return InjectivityReport(s, rank, fmap.shape[1], float(s[-1]))


# -- reconstruction -------------------------------------------------------------------------


@dataclass
class InversionResult:
    f: np.ndarray                 # grid field
    alpha: float
    residual: float
    rel_error: float | None
    iterations: int
    method: str
    sweep: list[tuple[float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "residual": self.residual, "rel_error": self.rel_error,
                "iterations": self.iterations, "method": self.method,
                "sweep": [list(r) for r in self.sweep]}


def _rel_error(geometry, f, f_true):
    if f_true is None:
        return None
    w = geometry.area_weights
    f_true = np.asarray(f_true).reshape(geometry.shape)
    den = np.sqrt(np.sum(w * f_true**2))
    return float(np.sqrt(np.sum(w * (f - f_true) ** 2)) / den) if den > 0 else None


def _tikhonov(U, s, Vt, bw, alpha):
    coef = U.T @ bw
    filt = s / (s**2 + alpha)
    return Vt.T @ (filt * coef)


def cgls(A: np.ndarray, b: np.ndarray, alpha: float = 0.0, maxiter: int = 500,
         tol: float = 1e-12, stop_residual: float | None = None):
    """Conjugate gradients on (A^T A + alpha I) x = A^T b.

    Stops when the normal-equation residual falls below ``tol`` relative to
    ||A^T b|| or, if ``stop_residual`` is given, as soon as ||A x - b|| drops
    below it (discrepancy stopping).
    """
    x = np.zeros(A.shape[1])
    r = b.copy()
    s = A.T @ r
    p = s.copy()
    gamma = s @ s
    norm0 = np.sqrt(gamma)
    if norm0 == 0:
        return x, 0
    for k in range(1, maxiter + 1):
        q = A @ p
        delta = q @ q + alpha * (p @ p)
        if delta <= 0:
            return x, k - 1
        a = gamma / delta
        x += a * p
        r -= a * q
        s = A.T @ r - alpha * x
        gamma_new = s @ s
        if stop_residual is not None and np.linalg.norm(r) <= stop_residual:
            return x, k
        if np.sqrt(gamma_new) <= tol * norm0:
            return x, k
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, maxiter


DISCREPANCY_FACTOR = 1.1


def reconstruct_f(fmap: ForwardMapMatrix, observation, alpha=1e-10, method: str = "tikhonov_svd",
                  noise_level: float | None = None, f_true=None, geometry: DomainGeometry | None = None,
                  maxiter: int = 500, sweep=None) -> InversionResult:
    """Regularized least squares  min ||M f - b||^2 + alpha ||f||^2  (L2 norms).

    ``alpha='discrepancy'`` picks, from a logarithmic sweep, the largest
    alpha whose residual does not exceed 1.1 x ``noise_level``. For
    ``method='cgne'`` with a declared noise level, iterations stop by the
    same discrepancy rule.
    """
    geometry = geometry or _geometry_of(fmap)
    b = fmap.data_vector(observation)
    rw = np.sqrt(fmap.row_weights)
    cw = np.sqrt(fmap.col_weights)
    bw = rw * b
    if method not in ("tikhonov_svd", "cgne"):
        raise ValidationError(f"unknown method {method!r}")
    rows = []
    if isinstance(alpha, str):
        if alpha != "discrepancy" or noise_level is None:
            raise ValidationError("alpha='discrepancy' needs a declared noise level")
        U, s, Vt = _svd(fmap)
        grid = np.asarray(sweep) if sweep is not None else \
            s[0] ** 2 * np.logspace(0, -16, 65)
        chosen = None
        for a in grid:
            x = _tikhonov(U, s, Vt, bw, a)
            res = _residual(U, s, Vt, bw, x)
            err = _rel_error(geometry, embed(geometry, x / cw), f_true)
            rows.append((float(a), res, float("nan") if err is None else err))
            if chosen is None and res <= DISCREPANCY_FACTOR * noise_level:
                chosen = a
        alpha = float(chosen if chosen is not None else grid[-1])
    if alpha < 0:
        raise ValidationError(f"alpha must be nonnegative, got {alpha}")
    its = 0
    if method == "tikhonov_svd":
        U, s, Vt = _svd(fmap)
        x = _tikhonov(U, s, Vt, bw, alpha)
        res = _residual(U, s, Vt, bw, x)
    else:
        A = fmap.weighted()
        stop = DISCREPANCY_FACTOR * noise_level if noise_level is not None else None
        x, its = cgls(A, bw, alpha, maxiter, stop_residual=stop)
        res = float(np.linalg.norm(A @ x - bw))
    f = embed(geometry, x / cw)
    return InversionResult(f, float(alpha), res, _rel_error(geometry, f, f_true), its, method, rows)


def _residual(U, s, Vt, bw, x):
    """||A x - b|| with A = U diag(s) Vt, including the part of b outside range(U)."""
    coef = U.T @ bw
    inside = s * (Vt @ x) - coef
    outside = max(float(bw @ bw - coef @ coef), 0.0)
    return float(np.sqrt(inside @ inside + outside))


def _geometry_of(fmap: ForwardMapMatrix) -> DomainGeometry:
    g = fmap.meta["geometry"]
    return DomainGeometry(float(g["extent"][0]), float(g["extent"][1]), g["nx"], g["ny"])


# -- noise ---------------------------------------------------------------------------------


def add_trace_noise(u: np.ndarray, level: float, seed: int = 0) -> np.ndarray:
    """u + level * rms(u) * N(0, 1), from a counter-based generator."""
    rng = np.random.Generator(np.random.Philox(seed))
    scale = level * float(np.sqrt(np.mean(np.asarray(u) ** 2)))
    return u + scale * rng.standard_normal(np.shape(u))


def noise_level_utt(geometry: DomainGeometry, times: np.ndarray, sigma_u: float) -> float:
    """Expected weighted L2 norm of the u_tt perturbation caused by i.i.d.
    N(0, sigma_u^2) noise on u passed through the differencing pipeline."""
    nt = len(times)
    D = time_derivative(time_derivative(np.eye(nt), times[1] - times[0]), times[1] - times[0])
    tw = time_weights(times)
    wb = geometry.arc_weights[beam_interior(geometry)]
    return float(sigma_u * np.sqrt(np.sum(tw[:, None] * D**2) * np.sum(wb)))


# -- stability probe -------------------------------------------------------------------------


@dataclass
class StabilityProbeReport:
    ratios: np.ndarray
    C_stab: float
    sigma_min: float | None = None
    rank: int | None = None
    refined_C_stab: float | None = None
    norms: np.ndarray | None = None   # (k, 4): ||f||, ||u_tt||, ||u_ttt||, ||bilap u_tt||

    @property
    def refinement_change(self) -> float | None:
        if self.refined_C_stab is None:
            return None
        return abs(self.refined_C_stab - self.C_stab) / self.C_stab

    def to_dict(self) -> dict:
        return {"ratios": self.ratios.tolist(), "C_stab": self.C_stab,
                "sigma_min": self.sigma_min, "rank": self.rank,
                "refined_C_stab": self.refined_C_stab,
                "refinement_change": self.refinement_change,
                "norms": None if self.norms is None else self.norms.tolist()}


def probe_ensemble(n: int = 30, seed: int = 0, modes: int = 3) -> list[Callable]:
    """Random smooth fields and localized bumps, as callables (X, Y) -> f."""
    rng = np.random.Generator(np.random.Philox(seed))
    out: list[Callable] = []
    n_bumps = n // 3
    for _ in range(n - n_bumps):
        coef = rng.standard_normal((modes, modes)) / (1.0 + np.add.outer(
            np.arange(1, modes + 1) ** 2, np.arange(1, modes + 1) ** 2))
        out.append(_SineField(coef))
    for _ in range(n_bumps):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        width = rng.uniform(0.08, 0.2)
        out.append(_Bump(cx, cy, width, 1.0))
    return out


class _SineField:
    def __init__(self, coef):
        self.coef = coef

    def __call__(self, X, Y):
        k = np.arange(1, self.coef.shape[0] + 1)
        sx = np.sin(np.pi * np.multiply.outer(X, k))
        sy = np.sin(np.pi * np.multiply.outer(Y, k))
        return np.einsum("...k,kl,...l->...", sx, self.coef, sy)


@dataclass(frozen=True)
class _Bump:
    cx: float
    cy: float
    width: float
    height: float

    def __call__(self, X, Y):
        r2 = ((X - self.cx) ** 2 + (Y - self.cy) ** 2) / self.width**2
        out = np.where(r2 < 1, np.exp(-1.0 / np.maximum(1 - r2, 1e-300)) * np.e, 0.0)
        return self.height * out


def smooth_bump(cx=0.5, cy=0.5, width=0.3, height=1.0) -> Callable:
    """C-infinity compactly supported bump of the given radius and peak height."""
    return _Bump(cx, cy, width, height)


def _fields_on(geometry: DomainGeometry, ensemble) -> np.ndarray:
    X, Y = geometry.mesh
    cols = []
    for f in ensemble:
        F = f(X, Y) if callable(f) else np.asarray(f, dtype=float)
        F = np.where(geometry.interior_mask, F, 0.0)
        cols.append(F.ravel())
    return np.stack(cols, axis=1)


def _trace_norms(geometry, times, v_all, vt_all=None):
    """Observation norms per column from recorded beam displacement/velocity."""
    dt = times[1] - times[0]
    D4 = biharmonic_clamped(geometry).matrix
    hs = geometry.hs
    out = []
    for k in range(v_all.shape[2]):
        ut = vt_all[:, :, k] if vt_all is not None else time_derivative(v_all[:, :, k], dt)
        utt = time_derivative(ut, dt)
        uttt = time_derivative(utt, dt)
        bil = (D4 @ utt.T).T
        out.append([l2_space_time(utt, times, hs), l2_space_time(uttt, times, hs),
                    l2_space_time(bil, times, hs)])
    return np.array(out)


def stability_probe(geometry: DomainGeometry, q_field, R, ensemble, T: float = 4.6,
                    dt: float = 1 / 128, mode: str = "forward_only", kappa: float = 1.0,
                    refine: bool = False, fmap: ForwardMapMatrix | None = None) -> StabilityProbeReport:
    """||f||_L2 / (||u_tt|| + ||u_ttt|| + ||bilap u_tt||) over an ensemble."""
    if len(ensemble) < 1:
        raise ValidationError("empty ensemble")

    def run(g: DomainGeometry, step: float, q):
        F = _fields_on(g, ensemble)
        times, vt = simulate_columns(g, q, R if g is geometry else _resample_R(R, g), F, T, step,
                                     mode, kappa, "vt")
        norms = _trace_norms(g, times, np.zeros_like(vt), vt)
        fn = np.sqrt(g.area_weights.ravel() @ F**2)
        if np.any(fn == 0):
            raise ValidationError("zero field in stability ensemble")
        return fn / norms.sum(axis=1), np.column_stack([fn, norms])

    ratios, norms = run(geometry, dt, q_field)
    if not np.all(np.isfinite(ratios)):
        raise SolverError("non-finite stability ratio")
    rep = StabilityProbeReport(ratios, float(ratios.max()), norms=norms)
    if fmap is not None:
        inj = injectivity_diagnostics(fmap)
        rep.sigma_min, rep.rank = inj.sigma_min, inj.rank
    if refine:
        g2 = geometry.refined(2)
        r2, _ = run(g2, dt / 2, _resample_field(q_field, g2))
        rep.refined_C_stab = float(r2.max())
    return rep


def _resample_field(q, g: DomainGeometry):
    if q is None:
        return None
    if callable(q):
        X, Y = g.mesh
        return q(X, Y)
    raise ValidationError("array potentials cannot be resampled; pass a callable")


def _resample_R(R, g: DomainGeometry):
    from .forward import SeparableSource
    if isinstance(R, SeparableSource):
        sp_ = np.asarray(R.spatial)
        if np.ptp(sp_) == 0:
            return SeparableSource(np.full(g.shape, sp_.flat[0]), R.profile)
    if isinstance(R, FieldSource):
        return R.on(g)
    raise ValidationError("source profile cannot be resampled to the refined grid")


@dataclass(frozen=True)
class FieldSource:
    """R(x, t) = spatial(X, Y) * profile(t) with a callable spatial factor,
    so it can be evaluated on any grid."""

    spatial: Callable
    profile: Callable
    geometry: DomainGeometry

    def on(self, g: DomainGeometry) -> "FieldSource":
        return FieldSource(self.spatial, self.profile, g)

    def __call__(self, t, order: int = 0):
        X, Y = self.geometry.mesh
        return self.spatial(X, Y) * self.profile(t, order)


# -- psi / y splitting ------------------------------------------------------------------------


@dataclass
class SplitReport:
    rel_error: float
    K_singular_values: np.ndarray
    K1_singular_values: np.ndarray
    psi: object = None
    y: object = None
    wbar: object = None

    def decay(self, k: int = 20) -> float:
        s = self.K_singular_values
        if len(s) < k:
            raise ValidationError(f"basis too small for sigma_{k}: {len(s)} functions")
        return float(s[k - 1] / s[0])

    def to_dict(self) -> dict:
        return {"rel_error": self.rel_error, "K_singular_values": self.K_singular_values.tolist(),
                "K1_singular_values": self.K1_singular_values.tolist(),
                "sigma20_over_sigma1": self.decay(20) if len(self.K_singular_values) >= 20 else None}


def coarse_basis(geometry: DomainGeometry, modes: int = 5) -> np.ndarray:
    """sin(k pi x) sin(l pi y), 1 <= k, l <= modes, as columns."""
    X, Y = geometry.mesh
    cols = [np.ravel(np.sin(k * np.pi * X) * np.sin(l * np.pi * Y))
            for k in range(1, modes + 1) for l in range(1, modes + 1)]
    return np.stack(cols, axis=1)


def psi_y_split(geometry: DomainGeometry, q_field, source: SourceSpec, T: float = 4.6,
                dt: float = 1 / 128, mode: str = "forward_only", kappa: float = 1.0,
                basis_modes: int = 5) -> SplitReport:
    """Split wbar = w_t of the linear system into psi (flux u_tt, data
    (0, f R(T/2))) and y (zero flux, source f R_t, zero data); check the
    sum and the singular values of f -> y|Gamma0 and f -> y_t|Gamma0."""
    traj = simulate_coupled(geometry, q_field, source, None, T, dt, mode, kappa)
    wbar = differentiate_system_in_time(traj, 1)
    f = np.asarray(source.f, dtype=float)
    R = source.R
    utt_flux = wbar.flux  # padded v_tt on Gamma0
    psi = simulate_wave(geometry, q_field, None, f * R(T / 2), utt_flux, T, dt, mode)
    y = simulate_wave(geometry, q_field, None, None, None, T, dt, mode,
                      source=lambda t: f * R(t, 1))
    w = geometry.area_weights.ravel()
    tw = time_weights(traj.times)
    diff = wbar.states[:, :geometry.size] - psi.states[:, :geometry.size] - y.states[:, :geometry.size]
    num = np.sqrt(np.einsum("t,n,tn->", tw, w, diff**2))
    den = np.sqrt(np.einsum("t,n,tn->", tw, w, wbar.states[:, :geometry.size] ** 2))
    rel = float(num / den) if den > 0 else float(num)
    sK, sK1 = smoothing_spectrum(geometry, q_field, R, T, dt, mode, basis_modes)
    return SplitReport(rel, sK, sK1, psi, y, wbar)


def smoothing_spectrum(geometry: DomainGeometry, q_field, R, T, dt, mode="forward_only",
                       basis_modes: int = 5):
    """Singular values of f -> y|Gamma0 and f -> y_t|Gamma0 on the coarse
    basis, in L2(Omega) -> L2(Gamma0 x window) norms."""
    B = coarse_basis(geometry, basis_modes)
    Mb, Lb, lap = wave_blocks(geometry, q_field)
    n = geometry.size
    times, center = _window(T, dt, mode)
    mB = lap.mass[:, None] * B

    def load(t):
        G = np.zeros((2 * n, B.shape[1]))
        G[n:] = np.ravel(R(t, 1))[:, None] * mB
        return G

    idx = np.r_[geometry.gamma0, n + geometry.gamma0]
    obs = integrate(Mb, Lb, np.zeros((2 * n, B.shape[1])), times, center, load,
                    observe=lambda yv: yv[idx].copy())
    nb = geometry.beam_nodes
    rw = np.sqrt(np.outer(time_weights(times), geometry.arc_weights).ravel())
    # orthonormalize the basis in L2(Omega)
    G = B.T @ (lap.mass[:, None] * B)
    Linv = np.linalg.inv(np.linalg.cholesky(G)).T
    out = []
    for part in (obs[:, :nb], obs[:, nb:]):
        K = rw[:, None] * part.reshape(-1, B.shape[1]) @ Linv
        out.append(np.linalg.svd(K, compute_uv=False))
    return out[0], out[1]


# -- nonlinear recovery of q -------------------------------------------------------------------


@dataclass
class RecoveryResult:
    q: np.ndarray
    history: list[dict]
    converged: bool
    hypothesis_ok: bool

    def to_dict(self) -> dict:
        return {"converged": self.converged, "hypothesis_ok": self.hypothesis_ok,
                "history": self.history}


def observe_coupled(geometry: DomainGeometry, q_field, initial: CoupledState, T: float,
                    dt: float, kappa: float = 1.0, pipeline: str = "velocity"):
    """Forward run of the coupled system (no source) and its traces."""
    traj = simulate_coupled(geometry, q_field, None, initial, T, dt, "forward_only", kappa)
    ut = traj.vt if pipeline == "velocity" else None
    return traj, traces_from_displacement(traj.v, traj.times, geometry, ut)


def recover_q(observation: TraceSeries, geometry: DomainGeometry, p0, initial: CoupledState,
              T: float = 4.6, dt: float = 1 / 128, iterations: int = 10, alpha="lm",
              tol: float = 1e-8, s0: float | None = None, s1: float | None = None,
              kappa: float = 1.0, noise_level: float | None = None,
              q_true=None, lm_rho: float = 0.1) -> RecoveryResult:
    """Frozen-point linearization: with R = z(p_k), the misfit
    v_tt(q) - v_tt(p_k) is (to first order) the trace of the linear
    problem with source f R, f = q - p_k. Each outer step is one linear
    reconstruction; p_{k+1} = p_k + f_k on the interior nodes.

    ``alpha='lm'`` chooses each step's alpha by the discrepancy rule with
    target ``lm_rho`` times the current misfit (regularizing
    Levenberg-Marquardt), which keeps early steps from fitting the
    linearization error. A residual that is non-finite or grows on two
    consecutive iterations raises :class:`DivergenceError`.
    """
    p = np.zeros(geometry.shape) if p0 is None else np.array(p0, dtype=float)
    z0, z1 = np.abs(initial.z), np.abs(initial.zt)
    hyp = True
    if s0 is not None and not np.all(z0 >= s0):
        hyp = False
        warnings.warn(f"|z0| >= s0={s0} fails (min {z0.min():.3g}); convergence not guaranteed",
                      HypothesisWarning, stacklevel=2)
    if s1 is not None and not np.all(z1 >= s1):
        hyp = False
        warnings.warn(f"|z1| >= s1={s1} fails (min {z1.min():.3g}); convergence not guaranteed",
                      HypothesisWarning, stacklevel=2)
    history: list[dict] = []
    increases = 0
    prev = None
    w = geometry.area_weights
    for k in range(iterations + 1):
        traj, traces = observe_coupled(geometry, p, initial, T, dt, kappa)
        if traces.utt.shape != observation.utt.shape:
            raise ValidationError("shape mismatch between observation and model traces")
        misfit = observation.utt - traces.utt
        res = l2_space_time(misfit, traces.times, geometry.hs)
        rec = {"iteration": k, "residual": res}
        if q_true is not None:
            qt = np.asarray(q_true)
            rec["rel_error"] = float(np.sqrt(np.sum(w * (p - qt) ** 2) / max(np.sum(w * qt**2), 1e-300)))
        history.append(rec)
        if not np.isfinite(res):
            raise DivergenceError(f"non-finite residual at iteration {k}")
        if prev is not None and res > prev:
            increases += 1
            if increases >= 2:
                raise DivergenceError(f"residual increased on two consecutive iterations "
                                      f"(iteration {k}: {res:.3e})")
        else:
            increases = 0
        prev = res
        if k == iterations:
            break
        scale = l2_space_time(observation.utt, traces.times, geometry.hs)
        if res <= tol * max(scale, 1e-300):
            return RecoveryResult(p, history, True, hyp)
        R = TabulatedSource(traj.times, traj.z)
        fmap = assemble_forward_map(geometry, p, R, T, dt, "forward_only", kappa)
        if alpha == "lm":
            target = lm_rho * np.linalg.norm(np.sqrt(fmap.row_weights) * misfit.ravel())
            if noise_level is not None:
                target = max(target, noise_level)
            out = reconstruct_f(fmap, misfit, "discrepancy", noise_level=target, geometry=geometry)
        else:
            out = reconstruct_f(fmap, misfit, alpha, noise_level=noise_level, geometry=geometry)
        step = out.f
        rec["step_norm"] = float(np.sqrt(np.sum(w * step**2)))
        rec["alpha"] = out.alpha
        if not np.all(np.isfinite(step)):
            raise SolverError("non-finite update")
        p = p + step
        if rec["step_norm"] <= tol * max(1.0, float(np.sqrt(np.sum(w * p**2)))):
            traj, traces = observe_coupled(geometry, p, initial, T, dt, kappa)
            history.append({"iteration": k + 1, "residual": l2_space_time(
                observation.utt - traces.utt, traces.times, geometry.hs)})
            return RecoveryResult(p, history, True, hyp)
    if history[-1]["residual"] > history[0]["residual"]:
        raise DivergenceError(f"residual {history[-1]['residual']:.3e} still above its initial "
                              f"value {history[0]['residual']:.3e} after {iterations} iterations")
    return RecoveryResult(p, history, False, hyp)
