"""Experiment configuration, training runs, the least-squares oracle, studies, sweeps and export."""

from __future__ import annotations

import dataclasses
import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .errors import ConfigurationError, NumericalFailure
from .fem import TrialFunction, h1_error, h1_norm, quadrature_points
from .mesh import generate_mesh, refine_to_pair, uniform_points
from .nn import MlpArchitecture, init_weights, weight_gradient
from .optim import AdamConfig, QuasiNewtonConfig, TrainRecord, train_schedule
from .problems import ProblemSpec, catalog, load_reference, parametric_instance
from .quadrature import quadrature_for_order
from .residuals import (
    BLayer,
    Nitsche,
    Penalty,
    PinnModel,
    VpinnDiscretization,
    VpinnModel,
    is_exact,
    make_method,
    trial_refinement_factor,
)

log = logging.getLogger(__name__)

MODELS = ("pinn", "vpinn")
POINT_MODES = ("mesh-nodes", "uniform-draw")


@dataclass
class ExperimentConfig:
    problem: str = "elliptic_sol2"
    domain: Optional[str] = None
    model: str = "vpinn"
    method: str = "mb"
    lam: float = 1e3
    m: int = 1
    gamma: float = 1.0
    nitsche_variant: str = "nonsymmetric"
    levels: List[int] = field(default_factory=lambda: [2])
    k_int: int = 4
    k_test: int = 1
    q: int = 3
    depth: int = 2
    width: int = 20
    activation: str = "tanh"
    seeds: List[int] = field(default_factory=lambda: [0])
    adam_epochs: int = 2000
    lr0: float = 1e-3
    decay_rate: Optional[float] = None
    qn_iters: int = 500
    qn_memory: Optional[int] = 50
    lam_reg: Optional[float] = None  # None: 1e-6 for PINN, 0 for VPINN
    points: str = "mesh-nodes"
    interpolate: bool = True
    log_every: int = 50
    n_p_train: int = 13
    n_p_test: int = 100
    reference_mesh: Optional[str] = None
    reference_coefficients: Optional[str] = None

    def __post_init__(self):
        self.levels = [int(v) for v in np.atleast_1d(self.levels)]
        self.seeds = [int(v) for v in np.atleast_1d(self.seeds)]

    def validate(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.points not in POINT_MODES:
            raise ConfigurationError(f"points must be one of {POINT_MODES}, got {self.points!r}")
        if not self.levels or min(self.levels) < 0:
            raise ConfigurationError("mesh levels must be non-negative and non-empty")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.model == "pinn" and self.method == "md":
            raise ConfigurationError("Nitsche's method is only available for VPINNs")
        if min(self.k_int, self.k_test, self.q) < 1:
            raise ConfigurationError("k_int, k_test and q must be >= 1")
        if self.depth < 1 or self.width < 1:
            raise ConfigurationError("network depth and width must be >= 1")
        self.bc_method()
        catalog(self.problem, self.domain if self.problem != "convection" else None)
        return self

    def bc_method(self):
        return make_method(self.method, lam=self.lam, m=self.m, gamma=self.gamma, nitsche_variant=self.nitsche_variant)

    @property
    def regularization(self):
        if self.lam_reg is not None:
            return self.lam_reg
        return 1e-6 if self.model == "pinn" else 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Full-size presets (4x50 networks, long schedules, original domains); no acceptance guarantees.
PRESETS: Dict[str, dict] = {
    "desk": {},
    "full-sol2-q3": dict(domain="square_with_hole", depth=4, width=50, adam_epochs=5000, qn_iters=5000,
                          k_int=4, k_test=1, q=3, levels=[0, 1, 2, 3]),
    "full-sol2-q5": dict(domain="square_with_hole", depth=4, width=50, adam_epochs=5000, qn_iters=5000,
                          k_int=6, k_test=1, q=5, levels=[0, 1, 2, 3]),
    "full-sol2-q5-k2": dict(domain="square_with_hole", depth=4, width=50, adam_epochs=5000, qn_iters=5000,
                             k_int=5, k_test=2, q=5, levels=[0, 1, 2, 3]),
    "full-sol5": dict(problem="elliptic_sol5", domain="square_with_hole", depth=4, width=50, adam_epochs=5000,
                       qn_iters=5000, levels=[2]),
    "full-parametric": dict(problem="parametric", domain="unit_square", depth=4, width=50, adam_epochs=10000,
                             qn_iters=5000, levels=[2]),
    "full-elasticity": dict(problem="elasticity", domain="l_shape", depth=4, width=50, adam_epochs=5000,
                             qn_iters=5000, levels=[2]),
    "full-eikonal": dict(problem="eikonal", domain="l_shape", depth=4, width=50, adam_epochs=5000, qn_iters=5000,
                          levels=[2]),
    "full-convection": dict(problem="convection", domain=None, model="pinn", depth=4, width=50,
                             adam_epochs=5000, qn_iters=5000, levels=[3]),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}")
    d = dict(PRESETS[name])
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: Optional[int] = None
    train: Optional[dict] = None
    final_error: Optional[float] = None
    relative_error: Optional[float] = None
    level_errors: List[list] = field(default_factory=list)  # [level, h, error]
    rate: Optional[float] = None
    noisy: bool = False
    wall_time: float = 0.0
    status: str = "ok"
    stage: str = ""
    message: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def train_record(self) -> Optional[TrainRecord]:
        return None if self.train is None else TrainRecord.from_dict(self.train)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


# ---------------------------------------------------------------- shared setup


def build_problem(cfg: ExperimentConfig) -> ProblemSpec:
    spec = catalog(cfg.problem, None if cfg.problem == "convection" else cfg.domain)
    if spec.family == "parametric":
        from .problems import ParameterRange

        rng = ParameterRange(n_train=cfg.n_p_train, n_test=cfg.n_p_test)
        spec = dataclasses.replace(spec, params={**spec.params, "range": rng})
    if cfg.reference_mesh and cfg.reference_coefficients:
        spec = spec.with_reference(load_reference(cfg.reference_mesh, cfg.reference_coefficients))
    return spec


def _can_measure(spec: ProblemSpec):
    return spec.exact is not None or spec.reference is not None or spec.family == "parametric"


def error_of(spec: ProblemSpec, field_, mesh, rule=None, pair=None):
    """Absolute H1 error and the H1 norm of the exact (or reference) solution."""
    rule = rule or quadrature_for_order(10)
    err = h1_error(field_, spec.exact_sample, rule, mesh=None if pair is not None else mesh, pair=pair)
    return err, h1_norm(spec.exact_sample, pair.fine if pair is not None else mesh, rule)


def _pinn_points(spec, cfg, method, level, seed):
    """Interior collocation points and, for the penalty method, boundary control points."""
    from .fem import LagrangeSpace

    mesh = generate_mesh(spec.domain, level)
    space = LagrangeSpace(mesh, cfg.k_int, spec.boundary)
    n_int = space.dim
    rng = np.random.default_rng(seed + 7919)
    if cfg.points == "mesh-nodes":
        interior = space.dof_points[~space.on_boundary_mask]
        bnd = space.dof_points[space.boundary_dof_mask]
    else:
        interior = uniform_points(spec.domain, n_int, rng, margin=1e-6)
        n_b = max(4, int(round(math.sqrt(n_int))))
        segs = spec.boundary.dirichlet_segments
        lengths = np.array([s.length for s in segs])
        which = rng.choice(len(segs), size=n_b, p=lengths / lengths.sum())
        t = rng.uniform(0, 1, n_b)
        bnd = np.array([segs[k].point_at(np.array([tt]))[0] for k, tt in zip(which, t)])
    if is_exact(method):
        layer = BLayer.for_problem(spec, method)
        keep = ~layer.adf.near_vertex(interior)
        interior = interior[keep]
    return interior, (bnd if isinstance(method, Penalty) else None)


class _Setup:
    """Everything a training run needs at one mesh level."""

    def __init__(self, cfg: ExperimentConfig, level: int, seed: int):
        self.cfg, self.level = cfg, level
        self.spec = spec = build_problem(cfg)
        self.method = method = cfg.bc_method()
        n_in = 3 if spec.family == "parametric" else 2
        self.arch = MlpArchitecture.hidden(n_in, cfg.depth, cfg.width, spec.n_out, cfg.activation)
        self.p_train = spec.params["range"].train_values() if spec.family == "parametric" else None
        if cfg.model == "vpinn":
            pair = refine_to_pair(generate_mesh(spec.domain, level), trial_refinement_factor(cfg.k_int, cfg.k_test))
            self.pair = pair
            self.disc = VpinnDiscretization(spec, pair, cfg.k_int, cfg.k_test, cfg.q, enlarged=isinstance(method, Nitsche))
            self.model = VpinnModel(spec, method, self.arch, self.disc, self.p_train, cfg.regularization, cfg.interpolate)
            self.error_mesh = pair.fine
        else:
            interior, bnd = _pinn_points(spec, cfg, method, level, seed)
            self.model = PinnModel(spec, method, self.arch, interior, bnd, self.p_train, cfg.regularization)
            self.pair = None
            self.error_mesh = refine_to_pair(generate_mesh(spec.domain, level), 2).fine
        self.rule = quadrature_for_order(10)

    def error(self, w):
        """Absolute and relative H1 error of the trained field (averaged over test parameters when parametric)."""
        spec = self.spec
        if spec.family == "parametric":
            ps = spec.params["range"].test_values()
            if self.cfg.model == "vpinn":
                model = VpinnModel(spec, self.method, self.arch, self.disc, ps, 0.0, self.cfg.interpolate)
            else:
                model = PinnModel(spec, self.method, self.arch, self.model.points,
                                  self.model.bdata[0][0] if self.model.bdata else None, ps)
            errs, norms = [], []
            for k, inst in enumerate(model.instances):
                e, n = error_of(inst, model.field(w, k), self.error_mesh, self.rule, self._error_pair(model))
                errs.append(e)
                norms.append(n)
            return float(np.mean(errs)), float(np.mean(np.array(errs) / np.array(norms)))
        if not _can_measure(spec):
            return None, None
        e, n = error_of(spec, self.model.field(w), self.error_mesh, self.rule, self._error_pair(self.model))
        return e, e / n

    def _error_pair(self, model):
        return self.pair if self.pair is not None and getattr(model, "interpolate", False) else None


def _train_one(cfg: ExperimentConfig, level: int, seed: int):
    st = _Setup(cfg, level, seed)
    w0 = init_weights(st.arch, seed)

    def oracle(w):
        return weight_gradient(st.model.loss, w)

    monitor = None
    if cfg.log_every and (_can_measure(st.spec)) and st.spec.family != "parametric":
        monitor = lambda w: st.error(w)[0]  # noqa: E731
    adam = AdamConfig(lr0=cfg.lr0, decay_rate=cfg.decay_rate, epochs=cfg.adam_epochs)
    qn = QuasiNewtonConfig(memory=cfg.qn_memory, max_iters=cfg.qn_iters)
    w, rec = train_schedule(oracle, w0, adam, qn, monitor, cfg.log_every)
    if rec.stop_reason.startswith("non-finite"):
        raise NumericalFailure(rec.stop_reason)
    err, rel = st.error(w)
    return st, w, rec, err, rel


def run_experiment(cfg: ExperimentConfig, level: Optional[int] = None, out_dir: Optional[str] = None) -> RunRecord:
    """Train at one mesh level for every seed and keep the lowest-error (or lowest-loss) run.

    Failures are recorded with the stage at which they occurred.
    """
    t0 = time.time()
    level = cfg.levels[-1] if level is None else level
    rec = RunRecord(cfg.to_dict(), cfg.hash())
    stage = "setup"
    try:
        cfg.validate()
        stage = "train"
        best = None
        seed_results = []
        for seed in cfg.seeds:
            st, w, tr, err, rel = _train_one(cfg, level, seed)
            key = err if err is not None else tr.loss[-1]
            seed_results.append({"seed": seed, "error": err, "relative_error": rel, "final_loss": tr.loss[-1]})
            if best is None or key < best[0]:
                best = (key, seed, w, tr, err, rel, st)
        _, seed, w, tr, err, rel, st = best
        stage = "report"
        rec.seed, rec.train, rec.final_error, rec.relative_error = seed, tr.to_dict(), err, rel
        rec.level_errors = [[level, float(st.error_mesh.meshsize if st.pair is None else st.pair.coarse.meshsize),
                             err]]
        rec.extra = {"seed_results": seed_results, "n_params": st.arch.n_params, "weights": w.tolist()}
        if st.p_train is not None:
            rec.extra["p_train"] = st.p_train.tolist()
    except (ConfigurationError, NumericalFailure) as exc:
        rec.status, rec.stage, rec.message = "failed", stage, f"{type(exc).__name__}: {exc}"
        rec.wall_time = time.time() - t0
        if out_dir:
            export([rec], out_dir, ("json",))
        raise
    except Exception as exc:  # any module error becomes a recorded failure
        log.exception("run failed during %s", stage)
        rec.status, rec.stage, rec.message = "failed", stage, f"{type(exc).__name__}: {exc}"
    rec.wall_time = time.time() - t0
    if out_dir:
        export([rec], out_dir, ("json", "csv", "plot"))
    return rec


# ---------------------------------------------------------------- least-squares oracle


def _lstsq(M, b):
    """Minimum of ``|M x - b|`` for full-column-rank sparse ``M`` via the augmented system."""
    m, n = M.shape
    K = sp.bmat([[sp.identity(m, format="csr"), M], [M.T, None]], format="csc")
    try:
        sol = spl.spsolve(K, np.concatenate([b, np.zeros(n)]))
    except RuntimeError as exc:  # singular factorization
        raise NumericalFailure(f"least-squares solve failed: {exc}") from exc
    x = sol[m:]
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("least-squares solve produced non-finite values (rank-deficient system?)")
    return x


@dataclass
class OracleSolution:
    trial: TrialFunction
    error: Optional[float]
    relative_error: Optional[float]
    residual_norm: float
    pair: object
    system: tuple  # (matrix, rhs, map z -> c) of the reduced least-squares problem


def least_squares_oracle(spec: ProblemSpec, method, level: int, k_int: int, k_test: int, q: int) -> OracleSolution:
    """Training-free minimizer of the VPINN loss over all trial coefficient vectors.

    Penalty stacks ``sqrt(lam) (c_B - g_B)`` rows under the residual rows;
    exact modes write ``c = gbar + phi z`` at the nodes and solve for ``z`` on
    nodes where ``phi > 0``; Nitsche solves the enlarged residual system.
    """
    if spec.family not in ("elliptic", "convection", "elasticity"):
        raise ConfigurationError(f"the oracle needs residuals affine in the trial coefficients, not {spec.family!r}")
    pair = refine_to_pair(generate_mesh(spec.domain, level), trial_refinement_factor(k_int, k_test))
    disc = VpinnDiscretization(spec, pair, k_int, k_test, q, enlarged=isinstance(method, Nitsche))
    A, F = disc.assemble(method)
    nc, dim = spec.n_out, disc.trial.dim
    if isinstance(method, Penalty):
        B = disc.boundary_dofs
        rows = np.concatenate([B + k * dim for k in range(nc)])
        E = sp.csr_matrix((np.ones(len(rows)), (np.arange(len(rows)), rows)), shape=(len(rows), nc * dim))
        s = math.sqrt(method.lam)
        M = sp.vstack([A, s * E]).tocsr()
        b = np.concatenate([F, s * disc.boundary_values().T.ravel()])
        lift = lambda z: z  # noqa: E731
    elif is_exact(method):
        layer = BLayer.for_problem(spec, method)
        phi, gb = layer.nodal(disc.trial.dof_points)
        free = np.flatnonzero(phi > 0)
        cols = np.concatenate([free + k * dim for k in range(nc)])
        phis = np.tile(phi[free], nc)
        gflat = gb.T.ravel()
        M = (A[:, cols] @ sp.diags(phis)).tocsr()
        b = F - A @ gflat

        def lift(z):
            c = gflat.copy()
            c[cols] += phis * z
            return c
    else:
        M, b, lift = A, F, (lambda z: z)
    z = _lstsq(M, b)
    c = lift(z)
    res = float(np.linalg.norm(F - A @ c))
    coefs = c.reshape(nc, dim).T
    trial = TrialFunction(disc.trial, coefs[:, 0] if nc == 1 else coefs)
    err = rel = None
    if _can_measure(spec):
        err, norm = error_of(spec, trial, None, quadrature_for_order(10), pair=pair)
        rel = err / norm
    return OracleSolution(trial, err, rel, res, pair, (M, b, lift))


# ---------------------------------------------------------------- studies and sweeps


def fit_rate(h: Sequence[float], errors: Sequence[float]):
    """Least-squares slope of ``log(error)`` against ``log(h)`` and the noisy flag
    (any refinement raising the error by more than 10%)."""
    h = np.asarray(h, float)
    e = np.asarray(errors, float)
    if len(h) < 3:
        raise ConfigurationError("a convergence rate needs at least 3 levels")
    slope = float(np.polyfit(np.log(h), np.log(e), 1)[0])
    noisy = bool(np.any(e[1:] > 1.1 * e[:-1]))
    return slope, noisy


def convergence_study(cfg: ExperimentConfig, levels: Optional[Sequence[int]] = None, mode: str = "oracle",
                      out_dir: Optional[str] = None) -> RunRecord:
    """Errors over mesh levels (oracle or trained) and the fitted H1 rate."""
    levels = list(cfg.levels if levels is None else levels)
    cfg = cfg.replace(levels=levels)
    cfg.validate()
    if len(levels) < 3:
        raise ConfigurationError("a convergence study needs at least 3 levels")
    if cfg.model == "vpinn" and cfg.q != cfg.k_int + cfg.k_test - 2:
        raise ConfigurationError(f"rate studies need q = k_int + k_test - 2 (got q={cfg.q}, k_int={cfg.k_int}, "
                                 f"k_test={cfg.k_test})")
    if mode not in ("oracle", "train"):
        raise ConfigurationError("mode must be 'oracle' or 'train'")
    t0 = time.time()
    rec = RunRecord(cfg.to_dict(), cfg.hash(), seed=cfg.seeds[0])
    spec = build_problem(cfg)
    method = cfg.bc_method()
    for level in levels:
        if mode == "oracle":
            sol = least_squares_oracle(spec, method, level, cfg.k_int, cfg.k_test, cfg.q)
            rec.level_errors.append([level, sol.pair.coarse.meshsize, sol.error])
        else:
            r = run_experiment(cfg, level)
            if r.status != "ok":
                raise NumericalFailure(f"level {level} failed: {r.message}")
            rec.level_errors.append(r.level_errors[0])
    hs = [le[1] for le in rec.level_errors]
    errs = [le[2] for le in rec.level_errors]
    rec.rate, rec.noisy = fit_rate(hs, errs)
    rec.final_error = errs[-1]
    rec.extra = {"mode": mode}
    rec.wall_time = time.time() - t0
    if out_dir:
        export([rec], out_dir, ("json", "csv", "plot"))
    return rec


def _grid_points(grid: Dict[str, Sequence]):
    keys = list(grid)
    if not keys:
        raise ConfigurationError("sweep grid is empty")
    combos = [{}]
    for k in keys:
        vals = list(grid[k])
        if not vals:
            raise ConfigurationError(f"sweep axis {k!r} is empty")
        combos = [dict(c, **{k: v}) for c in combos for v in vals]
    return combos


def _sweep_one(args):
    base, overrides = args
    try:
        cfg = base.replace(**overrides)
        return run_experiment(cfg)
    except (ConfigurationError, NumericalFailure) as exc:
        rec = RunRecord(base.to_dict() | overrides, "", status="failed", stage="setup", message=str(exc))
        return rec


def sweep(cfg: ExperimentConfig, grid: Dict[str, Sequence], workers: int = 1,
          out_dir: Optional[str] = None) -> List[RunRecord]:
    """One run per grid point; failures are kept as failed records."""
    jobs = [(cfg, o) for o in _grid_points(grid)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_sweep_one, jobs))
    else:
        records = [_sweep_one(j) for j in jobs]
    for r, (_, o) in zip(records, jobs):
        r.extra["grid_point"] = o
    if out_dir:
        export(records, out_dir, ("json", "csv", "plot"))
    return records


# ---------------------------------------------------------------- export


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _stem(rec: RunRecord, i: int):
    c = rec.config
    return f"{c.get('problem', 'run')}_{c.get('model', '')}_{c.get('method', '')}_{rec.config_hash or i}"


def _series_label(c):
    m = c.get("method", "")
    extra = {"ma": f"lam={c.get('lam')}", "mb": f"m={c.get('m')}", "md": f"gamma={c.get('gamma')}"}.get(m, "")
    return f"{m}{'(' + extra + ')' if extra else ''}"


TABLE_COLUMNS = ["config_hash", "seed", "problem", "model", "method", "lam", "m", "gamma", "k_int", "k_test", "q",
                 "depth", "width", "level", "h", "final_error", "relative_error", "rate", "noisy", "status",
                 "wall_time"]


def export(records: Sequence[RunRecord], out_dir: str, formats=("json", "csv", "plot")) -> List[str]:
    """Write records as JSON (full), CSV (summary table plus per-run training history)
    and plot-data files. Every file names the config hash and seed."""
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot write to {out_dir}: {exc}") from exc
    if "json" in formats:
        path = os.path.join(out_dir, "records.json")
        _atomic_write(path, json.dumps([r.to_dict() for r in records], indent=1))
        written.append(path)
    if "csv" in formats:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(TABLE_COLUMNS)
        for r in records:
            c = r.config
            for level, h, err in (r.level_errors or [[None, None, r.final_error]]):
                wr.writerow([r.config_hash, r.seed, c.get("problem"), c.get("model"), c.get("method"), c.get("lam"),
                             c.get("m"), c.get("gamma"), c.get("k_int"), c.get("k_test"), c.get("q"), c.get("depth"),
                             c.get("width"), level, h, err, r.relative_error, r.rate, r.noisy, r.status,
                             f"{r.wall_time:.3f}"])
        path = os.path.join(out_dir, "summary.csv")
        _atomic_write(path, buf.getvalue())
        written.append(path)
        for i, r in enumerate(records):
            tr = r.train_record
            if tr is None:
                continue
            path = os.path.join(out_dir, f"history_{_stem(r, i)}.csv")
            _atomic_write(path, history_csv(tr, r))
            written.append(path)
    if "plot" in formats:
        written += _plot_data(records, out_dir)
    return written


def history_csv(tr: TrainRecord, rec: Optional[RunRecord] = None) -> str:
    """Columns ``epoch, phase, loss, h1_error``; one row per logged epoch after a provenance comment."""
    buf = io.StringIO()
    if rec is not None:
        buf.write(f"# config_hash={rec.config_hash} seed={rec.seed}\n")
    errs = dict((int(k), v) for k, v in tr.errors)
    wr = csv.writer(buf)
    wr.writerow(["epoch", "phase", "loss", "h1_error"])
    for k, (l, p) in enumerate(zip(tr.loss, tr.phase)):
        e = errs.get(k)
        wr.writerow([k, p, repr(l), "" if e is None else repr(e)])
    return buf.getvalue()


def _plot_data(records, out_dir):
    """Plain ``series x y`` tables: error vs h for studies, loss and H1 error vs epoch for runs."""
    written = []
    studies = [r for r in records if r.rate is not None]
    if studies:
        lines = [f"# convergence: H1 error vs meshsize; config_hash={','.join(r.config_hash for r in studies)} "
                 f"seed={','.join(str(r.seed) for r in studies)}", "series h error"]
        for r in studies:
            label = _series_label(r.config) + f"[rate={r.rate:.2f}]"
            for _, h, e in r.level_errors:
                lines.append(f"{label} {h!r} {e!r}")
        path = os.path.join(out_dir, "plot_convergence.dat")
        _atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    runs = [r for r in records if r.train is not None]
    if runs:
        lines = [f"# training curves; config_hash={','.join(r.config_hash for r in runs)} "
                 f"seed={','.join(str(r.seed) for r in runs)}", "series epoch loss h1_error"]
        for r in runs:
            tr = r.train_record
            errs = dict((int(k), v) for k, v in tr.errors)
            label = _series_label(r.config)
            for k, l in enumerate(tr.loss):
                e = errs.get(k)
                lines.append(f"{label} {k} {l!r} {'nan' if e is None else repr(e)}")
        path = os.path.join(out_dir, "plot_training.dat")
        _atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    swept = [r for r in records if "grid_point" in r.extra]
    if swept:
        keys = sorted({k for r in swept for k in r.extra["grid_point"]})
        lines = [f"# sweep; config_hash={','.join(r.config_hash for r in swept)} "
                 f"seed={','.join(str(r.seed) for r in swept)}", " ".join(keys + ["final_error", "status"])]
        for r in swept:
            gp = r.extra["grid_point"]
            lines.append(" ".join([str(gp.get(k)) for k in keys] + [repr(r.final_error), r.status]))
        path = os.path.join(out_dir, "plot_sweep.dat")
        _atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    return written


def load_records(path) -> List[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(d) for d in json.load(fh)]
