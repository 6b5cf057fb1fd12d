"""Numerical evaluation of the weighted (Carleman) estimate and of the
boundary observability inequality.

Both inequalities carry constants that are only known to exist. The scan
therefore fits them: the coefficient of the Q(sigma) term is measured per
tau, its growth exponent is regressed, and the remaining constants are
chosen as small as possible so that the inequality holds from some tau*
on. All integrals are trapezoidal in space and time; weights e^{2 tau phi}
are formed in log space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .forward import Trajectory, integrate, wave_blocks
from .geometry import (LAPLACIAN_D, CarlemanParams, DomainGeometry, RegionMask,
                       locate_sigma_window, min_observation_time, eval_weight)

LOG_MAX = 700.0
EPSILON = 0.01  # the small epsilon multiplying the gradient term
C_T = 0.0
C_T_ENDPOINT = 1.0


def tau_cap(params: CarlemanParams) -> float:
    return LOG_MAX / (2.0 * params.max_d)


def time_weights(times: np.ndarray) -> np.ndarray:
    if len(times) < 2:
        return np.ones(len(times))
    w = np.full(len(times), times[1] - times[0])
    w[[0, -1]] *= 0.5
    return w


def pointwise_gradient(geometry: DomainGeometry, z: np.ndarray):
    """(d/dx, d/dy) of snapshots (..., nx, ny), second-order one-sided at edges."""
    gx = np.gradient(z, geometry.hx, axis=-2, edge_order=2)
    gy = np.gradient(z, geometry.hy, axis=-1, edge_order=2)
    return gx, gy


# -- per-tau evaluation -------------------------------------------------------------


@dataclass
class CarlemanRecord:
    tau: float
    grad_term: float      # int_Q e^{2 tau phi} (w_t^2 + |grad w|^2)
    qsigma_term: float    # int_{Q(sigma)} e^{2 tau phi} w^2
    bt: tuple[float, float, float, float, float]
    rhs_f: float          # 2 int_Q e^{2 tau phi} F^2
    lot: float            # int_Q w^2 (multiplied by C1 e^{2 tau sigma} in the margin)
    endpoint: float       # tau^3 e^{-2 tau delta} [E(0) + E(T)]
    margin: float = float("nan")

    @property
    def bt_total(self) -> float:
        return float(sum(self.bt))


def _boundary_terms(traj: Trajectory, params: CarlemanParams, tau: float, W, Wt, tw):
    g = traj.geometry
    X, Y = (a.ravel() for a in g.mesh)
    beam_pos = {int(k): i for i, k in enumerate(g.gamma0)}
    flux_all = traj.flux if traj.flux is not None else np.zeros((len(tw), g.beam_nodes))
    s = (traj.times - params.T / 2)[:, None]
    c, alpha = params.c, params.alpha
    bt = np.zeros(5)
    for edge in g.edges:
        nodes = edge.nodes
        w = W[:, nodes]
        wt = Wt[:, nodes]
        if edge.gamma0:
            flux = flux_all[:, [beam_pos[int(k)] for k in nodes]]
        else:
            flux = np.zeros_like(w)
        hx = 2 * (X[nodes] - params.x0[0])
        hy = 2 * (Y[nodes] - params.x0[1])
        hnu = hx * edge.normal[0] + hy * edge.normal[1]
        htan = hx * edge.tangent[0] + hy * edge.tangent[1]
        h2 = hx**2 + hy**2
        wtan = np.gradient(w, edge.spacing, axis=1, edge_order=2)
        grad2 = wtan**2 + flux**2
        h_grad = wtan * htan + flux * hnu
        logw = 2 * tau * (h2 / 4 - params.c * s**2)  # d = |h|^2 / 4
        q = np.exp(logw) * tw[:, None] * edge.weights[None, :]
        poly = h2 - 4 * c**2 * s**2
        if edge.gamma0:
            bt[0] += 2 * tau * np.sum(q * (wt**2 - grad2) * hnu)
            bt[4] += 2 * tau * np.sum(q * (2 * tau**2 * poly + tau * (alpha - LAPLACIAN_D - 2 * c))
                                      * w**2 * hnu)
        bt[1] += 8 * c * tau * np.sum(q * s * wt * flux)
        bt[2] += 4 * tau * np.sum(q * h_grad * flux)
        bt[3] += np.sum(q * (4 * tau**2 * poly + 2 * tau * alpha) * w * flux)
    return tuple(float(b) for b in bt)


class _Fields:
    """Per-trajectory quantities reused across tau."""

    def __init__(self, traj: Trajectory, F, params: CarlemanParams, mask: RegionMask | None):
        g = traj.geometry
        self.traj = traj
        self.W = traj.z.reshape(len(traj.times), -1)
        self.Wt = traj.zt.reshape(len(traj.times), -1)
        gx, gy = pointwise_gradient(g, traj.z)
        self.grad2 = (gx**2 + gy**2).reshape(len(traj.times), -1)
        self.tw = time_weights(traj.times)
        self.wts = self.tw[:, None] * g.area_weights.ravel()[None, :]
        X, Y = g.mesh
        self.phi = params.phi(X[None], Y[None], traj.times[:, None, None]).reshape(len(traj.times), -1)
        if mask is None:
            _, _, mask = locate_sigma_window(params, params.sigma, g, traj.times)
        self.mask = mask.mask.reshape(len(traj.times), -1)
        if F is None:
            self.F = np.zeros_like(self.W)
        elif callable(F):
            self.F = np.stack([np.ravel(F(t)) for t in traj.times])
        else:
            self.F = np.asarray(F, dtype=float).reshape(self.W.shape)
        aw = g.area_weights.ravel()
        E = lambda k: float(aw @ (self.W[k] ** 2 + self.Wt[k] ** 2 + self.grad2[k]))
        self.E0, self.ET = E(0), E(-1)


def carleman_sides(traj: Trajectory, F, q_field, params: CarlemanParams, tau: float,
                   mask: RegionMask | None = None, _fields: _Fields | None = None) -> CarlemanRecord:
    """Every integral of the weighted estimate at one tau.

    ``F`` is the right-hand side of w_tt - Delta w - q w = F (callable of t,
    an array on the space-time grid, or None). ``q_field`` enters only
    through F and is accepted for interface symmetry.
    """
    if traj.stride != 1:
        raise ValidationError("carleman_sides needs a full-stride trajectory")
    if tau < 0:
        raise ValidationError(f"tau must be nonnegative, got {tau}")
    if 2 * tau * params.max_d > LOG_MAX:
        raise ValidationError(f"tau overflow: tau={tau} exceeds the cap {tau_cap(params):.4g}")
    fl = _fields or _Fields(traj, F, params, mask)
    e = np.exp(2 * tau * fl.phi) * fl.wts
    grad_term = float(np.sum(e * (fl.Wt**2 + fl.grad2)))
    qsigma = float(np.sum(e * fl.W**2 * fl.mask))
    rhs_f = 2 * float(np.sum(e * fl.F**2))
    lot = float(np.sum(fl.wts * fl.W**2))
    endpoint = tau**3 * np.exp(-2 * tau * params.delta) * (fl.E0 + fl.ET)
    bt = _boundary_terms(traj, params, tau, fl.W, fl.Wt, fl.tw)
    return CarlemanRecord(float(tau), grad_term, qsigma, bt, rhs_f, lot, float(endpoint))


# -- scan and constant fitting --------------------------------------------------------


@dataclass
class CarlemanReport:
    records: list[CarlemanRecord]
    slope: float          # fitted exponent of the Q(sigma) coefficient
    r2: float
    beta: float           # from the fit with the exponent fixed at 3
    C_T: float
    c_T: float
    C1_T: float
    epsilon: float
    rho: float
    tau_star: float | None
    fit_taus: list[float] = field(default_factory=list)
    degenerate: bool = False
    sigma: float = 0.0

    @property
    def passed(self) -> bool:
        return self.tau_star is not None

    def coefficient(self, rec: CarlemanRecord) -> float:
        """Largest Q(sigma) coefficient the measured terms admit (C1 = 0)."""
        return admissible_coefficient(rec, self.epsilon, self.rho, self.c_T)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "records"}
        d["records"] = [dict(asdict(r), bt_total=r.bt_total) for r in self.records]
        d["passed"] = self.passed
        return d

    def table(self) -> list[list[float]]:
        rows = []
        for r in self.records:
            rows.append([r.tau, r.grad_term, r.qsigma_term, *r.bt, r.rhs_f,
                         self.C1_T * np.exp(2 * r.tau * self.sigma) * r.lot,
                         self.c_T * r.endpoint, r.margin])
        return rows


TABLE_HEADER = ["tau", "grad_term", "qsigma_term", "bt_1", "bt_2", "bt_3", "bt_4", "bt_5",
                "rhs_f", "rhs_lot", "rhs_endpoint", "margin"]


def admissible_coefficient(rec: CarlemanRecord, epsilon: float, rho: float,
                           c_T: float = C_T_ENDPOINT) -> float:
    if rec.qsigma_term <= 0:
        return float("nan")
    slack = (rec.bt_total + rec.rhs_f + c_T * rec.endpoint
             - (rec.tau * epsilon * rho - 2 * C_T) * rec.grad_term)
    return (slack + 2 * C_T * rec.qsigma_term) / rec.qsigma_term


def _margin(rec: CarlemanRecord, beta, C1, sigma, epsilon, rho, c_T) -> float:
    lhs = rec.bt_total + rec.rhs_f + C1 * np.exp(2 * rec.tau * sigma) * rec.lot
    rhs = ((rec.tau * epsilon * rho - 2 * C_T) * rec.grad_term
           + (2 * rec.tau**3 * beta - 2 * C_T) * rec.qsigma_term - c_T * rec.endpoint)
    return float(lhs - rhs)


def carleman_scan(traj: Trajectory, F, q_field, params: CarlemanParams,
                  rho: float | None = None, epsilon: float = EPSILON,
                  fit_min_tau: float = 1.0) -> CarlemanReport:
    """Evaluate the estimate over ``params.tau_grid`` and fit its constants.

    The exponent is regressed on grid points with tau >= ``fit_min_tau``
    and a positive admissible coefficient. tau* is the smallest grid tau
    whose margin is nonnegative with C1 = 0; C1 is then the least value
    that keeps every larger grid tau nonnegative too.
    """
    taus = [t for t in params.tau_grid if 2 * t * params.max_d <= LOG_MAX]
    if len(taus) < 5:
        raise ValidationError(f"tau grid needs >= 5 non-overflowing points, got {len(taus)}")
    if rho is None:
        rho = float(np.linalg.eigvalsh(eval_weight(traj.geometry, params.x0).hessian()).min())
    fields_ = _Fields(traj, F, params, None)
    recs = [carleman_sides(traj, F, q_field, params, t, _fields=fields_) for t in taus]
    if all(r.qsigma_term == 0 and r.grad_term == 0 and r.bt_total == 0 for r in recs):
        for r in recs:
            r.margin = 0.0
        rep = CarlemanReport(recs, float("nan"), float("nan"), 0.0, C_T, C_T_ENDPOINT, 0.0,
                             epsilon, rho, recs[0].tau, [], True, params.sigma)
        return rep
    coef = np.array([admissible_coefficient(r, epsilon, rho) for r in recs])
    tau_arr = np.array(taus)
    sel = (tau_arr >= fit_min_tau) & np.isfinite(coef) & (coef > 0)
    if sel.sum() < 2:
        raise ValidationError("fit window empty: fewer than two positive coefficients")
    lx, ly = np.log(tau_arr[sel]), np.log(coef[sel])
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = float(1 - np.sum(resid**2) / ss) if ss > 0 else 1.0
    beta = float(np.exp(np.mean(ly - 3 * lx)) / 2)
    base = [_margin(r, beta, 0.0, params.sigma, epsilon, rho, C_T_ENDPOINT) for r in recs]
    tau_star = next((r.tau for r, m in zip(recs, base) if m >= 0), None)
    C1 = 0.0
    if tau_star is not None:
        for r, m in zip(recs, base):
            if r.tau >= tau_star and m < 0 and r.lot > 0:
                C1 = max(C1, -m / (np.exp(2 * r.tau * params.sigma) * r.lot))
    for r in recs:
        r.margin = _margin(r, beta, C1, params.sigma, epsilon, rho, C_T_ENDPOINT)
    rep = CarlemanReport(recs, float(slope), r2, beta, C_T, C_T_ENDPOINT, float(C1), epsilon,
                         rho, tau_star, [float(t) for t in tau_arr[sel]], False, params.sigma)
    return rep


def endpoint_factor(tau, delta: float):
    """tau^3 e^{-2 tau delta}; decreasing for tau > 3 / (2 delta)."""
    tau = np.asarray(tau, dtype=float)
    return tau**3 * np.exp(-2 * tau * delta)


# -- observability -------------------------------------------------------------------


@dataclass(frozen=True)
class ObservabilitySample:
    """Continuous data so the same sample can be evaluated on any grid.

    w0, w1: callables (X, Y) -> field; g: callable (s, t) -> flux on Gamma0,
    s being the arclength parameter (arrays broadcast).
    """

    w0: Callable
    w1: Callable
    g: Callable | None = None


def random_ensemble(n: int, seed: int = 0, modes: int = 3, with_flux: bool = True,
                    beam_length: float = 3.0) -> list[ObservabilitySample]:
    """Random smooth (w0, w1, g) from a counter-based generator."""
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    k = np.arange(modes + 1)
    decay = 1.0 / (1.0 + k[:, None] ** 2 + k[None, :] ** 2)
    for _ in range(n):
        a = rng.standard_normal((modes + 1, modes + 1)) * decay
        b = rng.standard_normal((modes + 1, modes + 1)) * decay
        cg = rng.standard_normal((modes, 2)) / (1.0 + np.arange(1, modes + 1)[:, None] ** 2)
        omega = rng.uniform(0.5, 3.0, modes)
        scale = 1.0 if with_flux else 0.0
        out.append(ObservabilitySample(_cosine_field(a), _cosine_field(b),
                                       _beam_flux(cg * scale, omega, beam_length)))
    return out


class _cosine_field:
    def __init__(self, coef):
        self.coef = coef

    def __call__(self, X, Y):
        K = np.arange(self.coef.shape[0])
        cx = np.cos(np.pi * np.multiply.outer(X, K))
        cy = np.cos(np.pi * np.multiply.outer(Y, K))
        return np.einsum("...k,kl,...l->...", cx, self.coef, cy)


class _beam_flux:
    def __init__(self, coef, omega, L):
        self.coef, self.omega, self.L = coef, omega, L

    def __call__(self, s, t):
        m = np.arange(1, len(self.omega) + 1)
        modes = np.sin(np.pi * np.multiply.outer(s, m) / self.L)
        amp = self.coef[:, 0] * np.cos(self.omega * t) + self.coef[:, 1] * np.sin(self.omega * t)
        return modes @ amp


@dataclass
class ObservabilityReport:
    ratios: np.ndarray
    C_hat: float
    T: float
    nx: int
    refined_C_hat: float | None = None
    refined_ratios: np.ndarray | None = None
    N_T: np.ndarray | None = None

    @property
    def refinement_change(self) -> float | None:
        if self.refined_C_hat is None:
            return None
        return abs(self.refined_C_hat - self.C_hat) / self.C_hat

    @property
    def passed(self) -> bool:
        ok = bool(np.all(np.isfinite(self.ratios)) and np.all(self.ratios > 0))
        if self.refinement_change is not None:
            ok = ok and self.refinement_change <= 0.5
        return ok

    def to_dict(self) -> dict:
        return {"ratios": self.ratios.tolist(), "C_hat": self.C_hat, "T": self.T,
                "nx": self.nx, "refined_C_hat": self.refined_C_hat,
                "refinement_change": self.refinement_change,
                "refined_ratios": None if self.refined_ratios is None else self.refined_ratios.tolist(),
                "N_T": None if self.N_T is None else self.N_T.tolist(), "passed": self.passed}


def _observe_batch(geometry: DomainGeometry, q_field, samples: Sequence[ObservabilitySample],
                   T: float, dt: float):
    """Two-sided wave runs for all samples at once; returns the Gamma0
    traces of w and w_t, the flux, the data norms and the N(T) terms."""
    from .forward import _time_grid
    n_half, dt_eff = _time_grid(T, dt, "two_sided")
    times = T / 2 + dt_eff * np.arange(-n_half, n_half + 1)
    Mb, Lb, lap = wave_blocks(geometry, q_field)
    n = geometry.size
    X, Y = geometry.mesh
    s = geometry.arclength
    W0 = np.stack([np.ravel(smp.w0(X, Y)) for smp in samples], axis=1)
    W1 = np.stack([np.ravel(smp.w1(X, Y)) for smp in samples], axis=1)
    has_flux = [smp.g is not None for smp in samples]

    def flux(t):
        return np.stack([smp.g(s, t) if smp.g is not None else np.zeros_like(s)
                         for smp in samples], axis=1)

    def load(t):
        G = np.zeros((2 * n, len(samples)))
        if any(has_flux):
            G[n:] = lap.injection @ flux(t)
        return G

    idx = np.r_[geometry.gamma0, n + geometry.gamma0]
    obs = integrate(Mb, Lb, np.vstack([W0, W1]), times, n_half, load if any(has_flux) else None,
                    observe=lambda y: y[idx].copy())
    nb = geometry.beam_nodes
    w, wt = obs[:, :nb], obs[:, nb:]
    gs = np.stack([flux(t) for t in times])
    data = np.einsum("nk,n,nk->k", W0, lap.mass, W0) \
        + np.einsum("nk,nk->k", W0, lap.stiffness @ W0) \
        + np.einsum("nk,n,nk->k", W1, lap.mass, W1)
    return times, w, wt, gs, data


def observability_estimate(geometry: DomainGeometry, q_field, params_or_T,
                           ensemble: Sequence[ObservabilitySample], dt: float = 1 / 256,
                           refine: bool = False, x0=(-1.0, 0.0)) -> ObservabilityReport:
    """Ratio of interior data energy at T/2 to boundary observation energy,
    maximized over the ensemble; optionally repeated on the once-refined
    grid with dt halved."""
    T = params_or_T.T if isinstance(params_or_T, CarlemanParams) else float(params_or_T)
    T_min = min_observation_time(eval_weight(geometry, x0))
    if not T > T_min:
        raise ValidationError(f"T={T} <= T_min={T_min:.6g}: observation time too short")
    if not ensemble:
        raise ValidationError("empty ensemble")

    def ratios_on(g: DomainGeometry, step: float):
        times, w, wt, gs, data = _observe_batch(g, _resample_q(q_field, g), ensemble, T, step)
        tw = time_weights(times)
        aw = g.arc_weights
        boundary = np.einsum("t,n,tnk->k", tw, aw, w**2 + wt**2 + gs**2)
        nt_terms = 2 * np.einsum("t,n,tnk->k", tw, aw, np.abs(gs * wt)) \
            + 2 * np.einsum("t,n,tnk->k", tw, aw, np.abs(w * wt))
        if np.any(boundary <= 0):
            raise ValidationError("ensemble contains a sample with zero boundary observation")
        return data / boundary, nt_terms

    r, N = ratios_on(geometry, dt)
    rep = ObservabilityReport(r, float(r.max()), T, geometry.nx, N_T=N)
    if refine:
        rr, _ = ratios_on(geometry.refined(2), dt / 2)
        rep.refined_ratios = rr
        rep.refined_C_hat = float(rr.max())
    return rep


def _resample_q(q_field, geometry: DomainGeometry):
    if q_field is None or callable(q_field) is False and np.ndim(q_field) == 0:
        return None if q_field is None else np.full(geometry.shape, float(q_field))
    if callable(q_field):
        X, Y = geometry.mesh
        return q_field(X, Y)
    q = np.asarray(q_field, dtype=float)
    if q.shape == geometry.shape:
        return q
    raise ValidationError("array potential cannot be resampled; pass a callable")


def btbar_terms(traj: Trajectory, params: CarlemanParams, f_field=None) -> dict:
    """Lower-order boundary terms of the corollary and the N(T) bookkeeping:
    int |dw/dnu w_t|, int_{t0}^{t1} int_Gamma0 w^2, int |w w_t| on Gamma0,
    and N(T) = int f^2 + 2 int |dw/dnu w_t| + 2 int |w w_t|."""
    g = traj.geometry
    tw = time_weights(traj.times)
    aw = g.arc_weights
    W = traj.z.reshape(len(traj.times), -1)[:, g.gamma0]
    Wt = traj.zt.reshape(len(traj.times), -1)[:, g.gamma0]
    flux = traj.flux if traj.flux is not None else np.zeros_like(W)
    win = (traj.times >= params.t0) & (traj.times <= params.t1)
    flux_wt = float(np.einsum("t,n,tn->", tw, aw, np.abs(flux * Wt)))
    w2 = float(np.einsum("t,n,tn->", tw[win], aw, W[win] ** 2))
    wwt = float(np.einsum("t,n,tn->", tw, aw, np.abs(W * Wt)))
    f2 = 0.0
    if f_field is not None:
        f2 = float(np.sum(tw) * np.sum(g.area_weights * np.asarray(f_field) ** 2))
    return {"flux_wt": flux_wt, "w2_window": w2, "w_wt": wwt, "N_T": f2 + 2 * flux_wt + 2 * wwt}


# -- norm equivalence -------------------------------------------------------------------


@dataclass
class NormEquivalenceReport:
    ratios: np.ndarray
    k1: float
    k2: float

    @property
    def passed(self) -> bool:
        return bool(0 < self.k1 <= self.k2 < np.inf)

    def to_dict(self) -> dict:
        return {"k1": self.k1, "k2": self.k2, "n": len(self.ratios), "passed": self.passed}


def norm_equivalence_probe(geometry: DomainGeometry, ensemble) -> NormEquivalenceReport:
    """Fitted k1, k2 with  k1 ||u||_{H1}^2 <= |grad u|^2 + int_Gamma0 u^2 <= k2 ||u||_{H1}^2."""
    from .discretize import laplacian_neumann
    lap = laplacian_neumann(geometry)
    ratios = []
    for u in ensemble:
        u = np.ravel(u)
        grad = float(u @ (lap.stiffness @ u))
        full = grad + float(u @ (lap.mass * u))
        middle = grad + float(geometry.arc_weights @ u[geometry.gamma0] ** 2)
        if full <= 0:
            raise ValidationError("zero field in norm-equivalence ensemble")
        ratios.append(middle / full)
    r = np.array(ratios)
    return NormEquivalenceReport(r, float(r.min()), float(r.max()))
