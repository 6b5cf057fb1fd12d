"""Configuration, orchestration and the ``sail`` command.

    sail <subcommand> --config <path> [--out <dir>] [--force] [--threads N]

Configs are JSON. Every block has defaults; unknown keys anywhere are
rejected (a ``_doc`` key is allowed at every level for comments). Exit
codes: 0 all asserted invariants passed, 2 validation, 3 solver,
4 assertion.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import InvariantViolation, SailError, ValidationError
from .io import sha256, write_csv, write_field, write_json, write_traces

TASKS = ("verify-geometry", "carleman-check", "observability", "simulate", "invert",
         "stability-probe", "recover-q", "domain-check")

TASK_DEFAULTS: dict[str, dict] = {
    "verify-geometry": {},
    "carleman-check": {"dt": 1 / 128, "epsilon": 0.01, "fit_min_tau": 1.0},
    "observability": {"samples": 50, "refine": True, "dt": 1 / 128},
    "simulate": {"initial": "zero", "with_source": True, "stride": 1},
    "invert": {"observation": None, "alpha": 1e-10, "method": "tikhonov_svd",
               "noise_level": None, "truth": None},
    "stability-probe": {"samples": 30, "refine": True},
    "recover-q": {"observation": None, "p0": 0.0, "iterations": 10, "alpha": "lm",
                  "lm_rho": 0.1, "s0": 0.5, "s1": 0.5, "truth": None},
    "domain-check": {"initial": "compatible", "order": 1},
}

DEFAULTS: dict[str, Any] = {
    "task": None,
    "seed": 0,
    "output": "sail_out",
    "geometry": {"nx": 33, "ny": 33, "extent": [1.0, 1.0]},
    "weight": {"x0": [-1.0, 0.0]},
    "time": {"T": 4.6, "dt": 1 / 256, "mode": "forward_only", "kappa": 1.0,
             "sigma": 0.5, "k": 0.5, "tau_grid": [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]},
    "potential": {"family": "zero", "value": 0.0, "center": [0.5, 0.5], "width": 0.3,
                  "height": 0.0, "path": None},
    "source": {"f": {"family": "bump", "center": [0.5, 0.5], "width": 0.35, "height": 1.0,
                     "value": 1.0, "path": None},
               "R": {"family": "polynomial", "coeffs": [1.0, 1.0], "amplitude": 1.0,
                     "omega": 1.0, "phase": 0.0, "offset": 1.0},
               "r0": 1.0, "r1": 1.0},
    "options": {},
}

FIELD_FAMILIES = ("zero", "constant", "bump", "file")
R_FAMILIES = ("zero", "constant", "polynomial", "trig")


@dataclass
class ExperimentConfig:
    data: dict
    path: Path | None = None

    def __getitem__(self, k):
        return self.data[k]

    @property
    def task(self) -> str:
        return self.data["task"]

    @property
    def options(self) -> dict:
        return self.data["options"]

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


# -- loading and validation ----------------------------------------------------------------


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k == "_doc":
            continue
        if k not in defaults:
            raise ValidationError(f"unknown key {where}{k!r}")
        if isinstance(defaults[k], dict) and k != "options":
            if not isinstance(v, dict):
                raise ValidationError(f"{where}{k} must be an object")
            out[k] = _merge(defaults[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path, task: str | None = None) -> ExperimentConfig:
    """Parse, fill defaults, and validate. ``task`` (from the command line)
    overrides the config's task block."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: JSON parse error at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw, task, path)


def config_from_dict(raw: dict, task: str | None = None, path=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    data = _merge(DEFAULTS, raw, "")
    if task is not None:
        if data["task"] is not None and data["task"] != task:
            raise ValidationError(f"config task {data['task']!r} does not match subcommand {task!r}")
        data["task"] = task
    if data["task"] not in TASKS:
        raise ValidationError(f"task must be one of {', '.join(TASKS)}; got {data['task']!r}")
    opts = data["options"] or {}
    if not isinstance(opts, dict):
        raise ValidationError("options must be an object")
    data["options"] = _merge(TASK_DEFAULTS[data["task"]], opts, "options.")
    if isinstance(data["options"].get("truth"), dict):
        data["options"]["truth"] = _merge(DEFAULTS["source"]["f"], data["options"]["truth"],
                                          "options.truth.")
    cfg = ExperimentConfig(data, Path(path) if path else None)
    validate(cfg)
    return cfg


def _require(cond: bool, msg: str):
    if not cond:
        raise ValidationError(msg)


def validate(cfg: ExperimentConfig) -> None:
    """Every precondition checkable from the config alone."""
    from .geometry import eval_weight, min_observation_time
    d = cfg.data
    g, tm = d["geometry"], d["time"]
    _require(isinstance(g["nx"], int) and isinstance(g["ny"], int),
             "geometry.nx/ny must be integers")
    _require(g["nx"] >= 5 and g["ny"] >= 5, "geometry: resolution too small (need >= 5 nodes per side)")
    _require(len(g["extent"]) == 2 and min(g["extent"]) > 0, "geometry.extent: nonpositive extent")
    Lx, Ly = g["extent"]
    hx, hy = Lx / (g["nx"] - 1), Ly / (g["ny"] - 1)
    _require(abs(hx - hy) <= 1e-12 * max(hx, hy),
             "geometry: the beam needs equal spacing hx == hy")
    geom = _geometry(cfg)
    weight = eval_weight(geom, tuple(d["weight"]["x0"]))
    T_min = min_observation_time(weight)
    _require(tm["T"] > T_min, f"time.T={tm['T']} <= T_min={T_min:.6g}: the observation time must "
             f"exceed 2 sqrt(max d) (time threshold)")
    _require(tm["dt"] > 0, "time.dt must be positive")
    _require(tm["mode"] in ("two_sided", "forward_only"), "time.mode must be two_sided or forward_only")
    _require(tm["kappa"] >= 0, "time.kappa must be nonnegative")
    _require(0 < tm["sigma"] < weight.min_d,
             f"time.sigma must lie in (0, min d = {weight.min_d:.6g})")
    _require(0 < tm["k"] < 1, "time.k must lie in (0, 1)")
    _require(len(tm["tau_grid"]) >= 5 and all(t >= 0 for t in tm["tau_grid"]),
             "time.tau_grid needs >= 5 nonnegative values")
    blocks = [("potential", d["potential"]), ("source.f", d["source"]["f"])]
    if isinstance(d["options"].get("truth"), dict):
        blocks.append(("options.truth", d["options"]["truth"]))
    for name, block in blocks:
        _require(block["family"] in FIELD_FAMILIES,
                 f"{name}.family must be one of {FIELD_FAMILIES}")
        if block["family"] == "file":
            _require(block["path"] is not None and Path(block["path"]).exists(),
                     f"{name}.path: file not found: {block['path']}")
    _require(d["source"]["R"]["family"] in R_FAMILIES, f"source.R.family must be one of {R_FAMILIES}")
    o = d["options"]
    t = d["task"]
    if t in ("invert", "recover-q"):
        obs = o["observation"]
        if obs is None and o["truth"] is None:
            raise ValidationError(f"{t}: options.observation (TraceSeries CSV) is required "
                                  f"unless options.truth requests synthetic data")
        if obs is not None:
            _require(Path(obs).exists(), f"{t}: observation file not found: {obs}")
    if t == "invert":
        _require(o["method"] in ("tikhonov_svd", "cgne"), "options.method must be tikhonov_svd or cgne")
        _require(o["alpha"] == "discrepancy" or (isinstance(o["alpha"], (int, float)) and o["alpha"] >= 0),
                 "options.alpha must be >= 0 or 'discrepancy'")
        if o["alpha"] == "discrepancy":
            _require(o["noise_level"] is not None, "options.alpha='discrepancy' needs options.noise_level")
    if t in ("invert", "stability-probe", "recover-q") and tm["mode"] == "two_sided":
        _require(tm["kappa"] <= 0.01, "two-sided source runs need time.kappa <= 0.01")
    if t == "recover-q":
        _require(tm["mode"] == "forward_only", "recover-q requires time.mode = forward_only")
    if t == "domain-check":
        _require(o["order"] in (1, 2, 3), "options.order must be 1, 2 or 3")
        _require(o["initial"] in ("zero", "compatible", "incompatible", "recover"),
                 "options.initial must be zero, compatible, incompatible or recover")
    if t == "observability":
        _require(int(o["samples"]) >= 1, "options.samples must be >= 1")
    if t == "stability-probe":
        _require(int(o["samples"]) >= 1, "options.samples must be >= 1")


# -- builders -------------------------------------------------------------------------------------


def _geometry(cfg: ExperimentConfig):
    from .geometry import build_reference_domain
    g = cfg["geometry"]
    return build_reference_domain(g["nx"], g["ny"], float(g["extent"][0]), float(g["extent"][1]))


def _field_fn(block: dict) -> Callable:
    from .inverse import smooth_bump
    fam = block["family"]
    if fam == "zero":
        return lambda X, Y: np.zeros_like(X)
    if fam == "constant":
        return lambda X, Y: np.full_like(X, float(block["value"]))
    if fam == "bump":
        cx, cy = block["center"]
        return smooth_bump(cx, cy, block["width"], block["height"])
    raise ValidationError("file fields cannot be used as callables")


def _field(block: dict, geom) -> np.ndarray:
    if block["family"] == "file":
        from .io import read_field
        _, arrays = read_field(block["path"])
        arr = next(iter(arrays.values()))
        if arr.shape != geom.shape:
            raise ValidationError(f"{block['path']}: field shape {arr.shape} != grid {geom.shape}")
        return arr
    X, Y = geom.mesh
    return np.asarray(_field_fn(block)(X, Y), dtype=float)


def _profile(cfg: ExperimentConfig):
    from .forward import PolynomialProfile, TrigProfile
    R = cfg["source"]["R"]
    c = cfg["time"]["T"] / 2
    fam = R["family"]
    if fam == "zero":
        return PolynomialProfile((0.0,), c)
    if fam == "constant":
        return PolynomialProfile((float(R["offset"]),), c)
    if fam == "polynomial":
        return PolynomialProfile(tuple(float(x) for x in R["coeffs"]), c)
    return TrigProfile(R["amplitude"], R["omega"], R["phase"], R["offset"], c)


def _source(cfg: ExperimentConfig, geom, f=None):
    from .forward import SeparableSource, SourceSpec
    f = _field(cfg["source"]["f"], geom) if f is None else f
    R = SeparableSource(np.ones(geom.shape), _profile(cfg))
    s = cfg["source"]
    return SourceSpec(f, R, s["r0"], s["r1"])


def _params(cfg: ExperimentConfig, geom):
    from .geometry import eval_weight, select_time_params
    tm = cfg["time"]
    w = eval_weight(geom, tuple(cfg["weight"]["x0"]))
    return w, select_time_params(w, tm["T"], tm["k"], tm["sigma"], tuple(tm["tau_grid"]))


def _initial(kind: str, geom):
    from .discretize import beam_interior, neumann_map
    from .operators import CoupledState
    nb = geom.beam_nodes - 2
    X, Y = geom.mesh
    if kind == "zero":
        return CoupledState.zeros(geom)
    if kind == "recover":
        return CoupledState(1 + 0.2 * np.cos(np.pi * X) * np.cos(np.pi * Y), np.ones(geom.shape),
                            np.zeros(nb), np.zeros(nb))
    s = geom.arclength
    L = geom.beam_length
    v1 = np.sin(np.pi * s / L) ** 2 * (s - L / 2)
    if kind == "compatible":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            z0 = neumann_map(geom, v1)
        return CoupledState(z0, np.zeros(geom.shape), np.zeros(nb), v1[beam_interior(geom)])
    return CoupledState(np.zeros(geom.shape), np.zeros(geom.shape), np.zeros(nb),
                        v1[beam_interior(geom)])


def _potential(cfg: ExperimentConfig, geom):
    p = cfg["potential"]
    if p["family"] == "zero":
        return None
    if p["family"] == "bump":
        blk = dict(p, height=p["height"])
        return _field(blk, geom)
    return _field(p, geom)


# -- tasks ----------------------------------------------------------------------------------------


class Outcome:
    """Collects files and named checks for one run."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[Path] = []
        self.checks: dict[str, bool] = {}
        self.reports: dict[str, Any] = {}

    def json(self, name: str, obj) -> None:
        self.files.append(write_json(self.out / name, obj))

    def csv(self, name: str, header, rows) -> None:
        self.files.append(write_csv(self.out / name, header, rows))

    def field(self, name: str, arrays: dict, meta: dict) -> None:
        self.files.append(write_field(self.out / name, arrays, meta))

    def check(self, name: str, ok: bool) -> None:
        self.checks[name] = bool(ok)


def task_verify_geometry(cfg, out: Outcome):
    from .geometry import locate_sigma_window, verify_assumptions
    geom = _geometry(cfg)
    w, params = _params(cfg, geom)
    rep = verify_assumptions(geom, w)
    times = np.linspace(0.0, params.T, 257)
    t0, t1, mask = locate_sigma_window(params, params.sigma, geom, times)
    pd = params.to_dict()
    out.json("assumptions.json", rep.to_dict())
    out.json("params.json", {"extent": list(geom.extent), "nx": geom.nx, "ny": geom.ny,
                             **{k: pd[k] for k in ("x0", "T", "c", "delta", "sigma", "t0", "t1",
                                                   "k", "alpha", "tau_grid")}})
    (out.out / "region_mask.bin").write_bytes(np.ascontiguousarray(mask.mask, dtype=np.uint8).tobytes())
    out.files.append(out.out / "region_mask.bin")
    out.json("region_mask.json", {"shape": list(mask.mask.shape), "dt": mask.dt,
                                  "dx": [geom.hx, geom.hy], "dtype": "uint8",
                                  "t0": float(t0), "t1": float(t1), "sigma": params.sigma})
    out.check("assumptions", rep.passed)
    out.check("sandwich", mask.sandwich_holds(params.T))


def _standard_trajectory(cfg, geom, dt):
    from .forward import simulate_coupled
    src = _source(cfg, geom)
    q = _potential(cfg, geom)
    traj = simulate_coupled(geom, q, src, None, cfg["time"]["T"], dt, "two_sided", 0.0)
    return traj, src, q


def task_carleman_check(cfg, out: Outcome):
    from .verify import TABLE_HEADER, carleman_scan
    geom = _geometry(cfg)
    _, params = _params(cfg, geom)
    o = cfg.options
    traj, src, q = _standard_trajectory(cfg, geom, o["dt"])
    F = src.load
    rep = carleman_scan(traj, F, q, params, epsilon=o["epsilon"], fit_min_tau=o["fit_min_tau"])
    d = rep.to_dict()
    d["slope_target"] = [2.5, 3.5]
    d["slope_in_target"] = bool(2.5 <= rep.slope <= 3.5) if np.isfinite(rep.slope) else None
    d["window"] = "two-sided [0, T], kappa = 0"
    out.json("carleman.json", d)
    out.csv("carleman.csv", TABLE_HEADER, rep.table())
    out.check("tau_star_exists", rep.passed)
    out.check("fit_r2", rep.degenerate or rep.r2 >= 0.99)
    out.check("finite", all(np.isfinite([r.grad_term, r.qsigma_term, *r.bt]).all()
                            for r in rep.records))


def task_observability(cfg, out: Outcome):
    from .verify import observability_estimate, random_ensemble
    geom = _geometry(cfg)
    o = cfg.options
    ens = random_ensemble(int(o["samples"]), cfg["seed"], beam_length=geom.beam_length)
    q = cfg["potential"]
    qf = None if q["family"] == "zero" else _field_fn(q) if q["family"] != "file" else _field(q, geom)
    rep = observability_estimate(geom, qf, cfg["time"]["T"], ens, o["dt"], bool(o["refine"]),
                                 tuple(cfg["weight"]["x0"]))
    out.json("observability.json", rep.to_dict())
    out.check("finite_positive", bool(np.all(np.isfinite(rep.ratios)) and np.all(rep.ratios > 0)))
    if rep.refinement_change is not None:
        out.check("refinement_stable", rep.refinement_change <= 0.5)


def task_simulate(cfg, out: Outcome):
    from .forward import energy, extract_traces, simulate_coupled
    geom = _geometry(cfg)
    tm, o = cfg["time"], cfg.options
    src = _source(cfg, geom) if o["with_source"] else None
    q = _potential(cfg, geom)
    init = _initial(o["initial"], geom)
    traj = simulate_coupled(geom, q, src, init, tm["T"], tm["dt"], tm["mode"], tm["kappa"],
                            stride=int(o["stride"]))
    qhash = hashlib.sha256(np.ascontiguousarray(q if q is not None else np.zeros(geom.shape))
                           .tobytes()).hexdigest()
    out.field("trajectory.saif", {"times": traj.times, "states": traj.states},
              {"dt": traj.dt, "stride": traj.stride, "mode": traj.mode, "kappa": traj.kappa,
               "scheme": "crank-nicolson", "q_hash": qhash, "geometry": geom.to_dict()})
    if traj.stride == 1:
        out.files.append(write_traces(out.out / "traces.csv", extract_traces(traj)))
        E = energy(traj)
        out.csv("energy.csv", ["t", "wave", "plate", "total"],
                zip(E.times, E.wave, E.plate, E.total))
        if tm["kappa"] > 0 and tm["mode"] == "forward_only" and src is None:
            out.check("energy_monotone", bool(np.all(np.diff(E.total) <= 1e-10 * max(E.total[0], 1e-300))))
    out.check("finite", bool(np.all(np.isfinite(traj.states))))


def _linear_map(cfg, geom, q):
    from .forward import SeparableSource
    from .inverse import assemble_forward_map
    tm = cfg["time"]
    R = SeparableSource(np.ones(geom.shape), _profile(cfg))
    return R, assemble_forward_map(geom, q, R, tm["T"], tm["dt"], tm["mode"], tm["kappa"])


def task_invert(cfg, out: Outcome):
    from .forward import extract_traces, simulate_coupled
    from .inverse import injectivity_diagnostics, reconstruct_f
    from .io import read_traces
    geom = _geometry(cfg)
    tm, o = cfg["time"], cfg.options
    q = _potential(cfg, geom)
    R, fmap = _linear_map(cfg, geom, q)
    truth = _field(o["truth"], geom) if isinstance(o["truth"], dict) else None
    if o["observation"] is not None:
        obs = read_traces(o["observation"], geom.hs)
    else:
        truth = _field(o["truth"] if isinstance(o["truth"], dict) else cfg["source"]["f"], geom)
        traj = simulate_coupled(geom, q, _source(cfg, geom, truth), None, tm["T"], tm["dt"],
                                tm["mode"], tm["kappa"])
        obs = extract_traces(traj)
    res = reconstruct_f(fmap, obs, o["alpha"], o["method"], o["noise_level"], truth, geom)
    inj = injectivity_diagnostics(fmap)
    d = res.to_dict()
    d["injectivity"] = inj.to_dict()
    d["window"] = f"{tm['mode']} (kappa = {tm['kappa']})"
    out.json("inversion.json", d)
    out.csv("sweep.csv", ["alpha", "residual", "rel_error"], res.sweep)
    out.field("f_hat.saif", {"f": res.f}, {"alpha": res.alpha, "method": res.method})
    out.check("finite", bool(np.all(np.isfinite(res.f))))
    out.check("full_rank", inj.full_rank)


def task_stability_probe(cfg, out: Outcome):
    from .forward import SeparableSource
    from .inverse import probe_ensemble, stability_probe
    geom = _geometry(cfg)
    tm, o = cfg["time"], cfg.options
    q = cfg["potential"]
    if q["family"] not in ("zero",) and o["refine"]:
        raise ValidationError("stability-probe refinement supports potential.family = zero only")
    R = SeparableSource(np.ones(geom.shape), _profile(cfg))
    ens = probe_ensemble(int(o["samples"]), cfg["seed"])
    rep = stability_probe(geom, _potential(cfg, geom), R, ens, tm["T"], tm["dt"], tm["mode"],
                          tm["kappa"], bool(o["refine"]))
    out.json("stability.json", rep.to_dict())
    out.check("finite", bool(np.all(np.isfinite(rep.ratios))))
    if rep.refinement_change is not None:
        out.check("refinement_stable", rep.refinement_change <= 0.5)


def task_recover_q(cfg, out: Outcome):
    from .inverse import observe_coupled, recover_q
    from .io import read_traces
    geom = _geometry(cfg)
    tm, o = cfg["time"], cfg.options
    init = _initial("recover", geom)
    truth = None
    if o["observation"] is not None:
        obs = read_traces(o["observation"], geom.hs)
    else:
        truth = _field(o["truth"], geom) if isinstance(o["truth"], dict) else _potential(cfg, geom)
        truth = np.zeros(geom.shape) if truth is None else truth
        _, obs = observe_coupled(geom, truth, init, tm["T"], tm["dt"], tm["kappa"])
    p0 = np.full(geom.shape, float(o["p0"]))
    res = recover_q(obs, geom, p0, init, tm["T"], tm["dt"], int(o["iterations"]), o["alpha"],
                    s0=o["s0"], s1=o["s1"], kappa=tm["kappa"], q_true=truth, lm_rho=o["lm_rho"])
    out.json("recovery.json", res.to_dict())
    out.csv("history.csv", ["iteration", "residual"],
            [(h["iteration"], h["residual"]) for h in res.history])
    out.field("q_hat.saif", {"q": res.q}, {"converged": res.converged})
    resid = [h["residual"] for h in res.history]
    out.check("residual_monotone", bool(np.all(np.diff(resid) <= 0)))
    out.check("hypotheses", res.hypothesis_ok)


def task_domain_check(cfg, out: Outcome):
    from .operators import assemble_generator, check_domain_membership
    geom = _geometry(cfg)
    o = cfg.options
    b = assemble_generator(geom, _potential(cfg, geom), cfg["time"]["kappa"])
    rep = check_domain_membership(_initial(o["initial"], geom), int(o["order"]), b)
    out.json("domain.json", rep.to_dict())
    out.check("membership", rep.passed)


RUNNERS = {"verify-geometry": task_verify_geometry, "carleman-check": task_carleman_check,
           "observability": task_observability, "simulate": task_simulate,
           "invert": task_invert, "stability-probe": task_stability_probe,
           "recover-q": task_recover_q, "domain-check": task_domain_check}


# -- run / reports --------------------------------------------------------------------------------


def prepare_outdir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def emit_reports(reports: dict[str, dict], out: Path, force: bool = False) -> list[Path]:
    """Write each report as JSON plus a summary aggregating pass/fail."""
    prepare_outdir(out, force)
    files = [write_json(out / f"{name}.json", rep) for name, rep in sorted(reports.items())]
    summary = {"count": len(reports),
               "passed": all(bool(r.get("passed", True)) for r in reports.values()),
               "entries": {k: bool(r.get("passed", True)) for k, r in sorted(reports.items())}}
    files.append(write_json(out / "summary.json", summary))
    return files


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def run(cfg: ExperimentConfig, out: str | Path | None = None, force: bool = False,
        threads: int | None = None) -> dict:
    """Execute the configured task, write reports and the manifest.

    Raises :class:`InvariantViolation` (after writing everything) when an
    asserted invariant failed.
    """
    out_dir = Path(out if out is not None else cfg["output"])
    prepare_outdir(out_dir, force)
    threads = threads or int(os.environ.get("SAIL_THREADS", "0") or 0) or None
    started = _timestamp()
    res = Outcome(out_dir)
    with _thread_limit(threads):
        RUNNERS[cfg.task](cfg, res)
    summary = {"task": cfg.task, "config_hash": cfg.hash, "checks": res.checks,
               "passed": all(res.checks.values())}
    res.files.append(write_json(out_dir / "summary.json", summary))
    res.files.append(write_json(out_dir / "config.json", cfg.data))
    manifest = {"config_hash": cfg.hash, "tool": "sail", "version": __version__,
                "started": started, "finished": _timestamp(), "task": cfg.task,
                "inputs": _inputs(cfg),
                "outputs": [{"path": p.name, "sha256": sha256(p)} for p in sorted(res.files)],
                "passed": summary["passed"]}
    write_json(out_dir / "manifest.json", manifest)
    if not summary["passed"]:
        failed = [k for k, v in res.checks.items() if not v]
        raise InvariantViolation(f"{cfg.task}: invariants failed: {', '.join(failed)}")
    return manifest


def _inputs(cfg: ExperimentConfig) -> list[dict]:
    paths = []
    if cfg.path is not None:
        paths.append(cfg.path)
    for blk in (cfg["potential"], cfg["source"]["f"]):
        if blk["family"] == "file":
            paths.append(Path(blk["path"]))
    obs = cfg.options.get("observation")
    if obs:
        paths.append(Path(obs))
    return [{"path": str(p), "sha256": sha256(p)} for p in paths]


class _thread_limit:
    def __init__(self, n):
        self.n = n
        self.ctx = None

    def __enter__(self):
        if self.n:
            from threadpoolctl import threadpool_limits
            self.ctx = threadpool_limits(limits=self.n)
            self.ctx.__enter__()
        return self

    def __exit__(self, *exc):
        if self.ctx is not None:
            self.ctx.__exit__(*exc)
        return False


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sail", description="Structural-acoustic inverse-problem toolkit")
    ap.add_argument("subcommand", choices=TASKS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out")
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.subcommand)
        run(cfg, args.out, args.force, args.threads)
    except SailError as exc:
        print(f"sail: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"sail: solver failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
