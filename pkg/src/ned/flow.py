"""NED parameter flow, SGD baselines and the epoch loop.

Every NED step solves ``A alpha ~= b`` in the least-squares sense and moves
``theta <- theta + eta * alpha``. For regression A = dU/dtheta and
b = y - U. For steady PDEs two row forms are available:

``"flow"``
    A = dU/dtheta, b = R = Lap U + f(U). alpha is the tangent-space velocity
    of the parabolic flow u_t = Lap u + f(u), so an FE step is one explicit
    Euler step of that PDE projected onto the network manifold.
``"residual"``
    A = dR/dtheta, b = -R. This is a Gauss-Newton step on the residual.

Boundary rows (only when boundary samples are passed) are
A = dU/dtheta, b = -(U - h) in both forms.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import deriv
from .linalg import SolverError, pinv_solve
from .net import NetworkSpec, forward_batch, init_params, load_checkpoint, save_checkpoint
from .problems import (
    ProblemDef,
    energy_j1,
    energy_pde,
    relative_l2,
    sample_boundary,
    sample_interior,
)
from .rng import derive_seed, stream

METHODS = ("ned_fe", "ned_rk2", "sgd")
ROW_FORMS = ("flow", "residual")


class TrainingAborted(RuntimeError):
    """Raised on divergence; ``trace`` holds every record up to the failure."""

    def __init__(self, message: str, trace: "FlowTrace"):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# configuration and schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    method: str
    tau0: float
    epochs: int
    q: float = 0.5
    rel_tol: float | None = None  # None: the problem's cutoff, else the linalg default
    sgd_lambda: float = 1.0
    schedule: bool = True  # cosine schedule; False keeps tau0 fixed
    resample: str = "per_epoch"  # or "fixed"
    pde_rows: str = "residual"
    n_boundary: int = 0
    init_mode: str = "scaled"
    eval_points: int = 10_000
    workers: int = 1
    record_wall: bool = False
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.tau0 > 0.0:
            raise ValueError("tau0 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.q <= 1.0:
            raise ValueError("q must lie in (0, 1]")
        if self.resample not in ("per_epoch", "fixed"):
            raise ValueError("resample must be 'per_epoch' or 'fixed'")
        if self.pde_rows not in ROW_FORMS:
            raise ValueError(f"pde_rows must be one of {ROW_FORMS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, problem: ProblemDef | None = None, spec: NetworkSpec | None = None) -> str:
        # wall-time recording and worker count do not change results
        doc = {k: v for k, v in self.to_dict().items() if k not in ("workers", "record_wall")}
        if problem is not None:
            doc["problem"] = problem.name
        if spec is not None:
            doc["spec"] = spec.to_dict()
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(n: int, cfg: TrainerConfig) -> float:
    """tau_n = q tau0 (cos(pi n / K) + 1)."""
    K = cfg.epochs
    if not 0 <= n <= K:
        raise ValueError(f"epoch {n} outside [0, {K}]")
    if not cfg.schedule:
        return cfg.tau0
    if K == 0:
        return 2.0 * cfg.q * cfg.tau0
    return cfg.q * cfg.tau0 * (math.cos(math.pi * n / K) + 1.0)


# ---------------------------------------------------------------------------
# assembly and direction
# ---------------------------------------------------------------------------


@dataclass
class ResidualSystem:
    A: np.ndarray
    b: np.ndarray
    tags: np.ndarray  # "interior" / "boundary" per row, interior first

    def __post_init__(self):
        if self.A.shape[0] != self.b.shape[0] or self.tags.shape[0] != self.b.shape[0]:
            raise ValueError("A, b and tags disagree on the number of rows")


def _tags(n_in: int, n_bd: int) -> np.ndarray:
    return np.array(["interior"] * n_in + ["boundary"] * n_bd, dtype=object)


def assemble_supervised(spec: NetworkSpec, theta, X, y, workers: int = 1) -> ResidualSystem:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty sample set")
    if len(X) != len(y):
        raise ValueError("X and y differ in length")
    A = deriv.param_jacobian(spec, theta, X, workers=workers)
    b = y - forward_batch(spec, theta, X)
    return ResidualSystem(A, b, _tags(len(b), 0))


def assemble_pde(problem: ProblemDef, spec: NetworkSpec, theta, X_in, X_bd=None, rows: str = "residual", workers: int = 1) -> ResidualSystem:
    if rows not in ROW_FORMS:
        raise ValueError(f"rows must be one of {ROW_FORMS}")
    X_in = np.asarray(X_in, dtype=np.float64)
    if rows == "flow":
        A_in = deriv.param_jacobian(spec, theta, X_in, workers=workers)
        _, b_in = deriv.residual_values(problem, spec, theta, X_in)
    else:
        A_in, res = deriv.pde_residual_jacobian(problem, spec, theta, X_in, workers=workers)
        b_in = -res
    if X_bd is None or len(X_bd) == 0:
        return ResidualSystem(A_in, b_in, _tags(len(b_in), 0))
    X_bd = np.asarray(X_bd, dtype=np.float64)
    if spec.ansatz is not None:
        warnings.warn("boundary rows with an exact-boundary ansatz are identically zero", stacklevel=2)
    A_bd = deriv.param_jacobian(spec, theta, X_bd, workers=workers)
    b_bd = -(forward_batch(spec, theta, X_bd) - problem.h(X_bd))
    return ResidualSystem(np.vstack([A_in, A_bd]), np.concatenate([b_in, b_bd]), _tags(len(b_in), len(b_bd)))


def ned_direction(system: ResidualSystem, rel_tol: float | None = None) -> tuple[np.ndarray, int]:
    """alpha = A^+ b and the numerical rank used (0 means alpha = 0)."""
    return pinv_solve(system.A, system.b, rel_tol)


# ---------------------------------------------------------------------------
# steppers
# ---------------------------------------------------------------------------


def fe_step(theta, gamma, eta: float) -> np.ndarray:
    return np.asarray(theta, dtype=np.float64) + eta * np.asarray(gamma, dtype=np.float64)


def rk2_step(theta, gamma: Callable[[np.ndarray], np.ndarray], eta: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi1 = eta * gamma(theta)
    phi2 = eta * gamma(theta + 0.5 * phi1)
    return theta + phi2


def sgd_step_supervised(spec: NetworkSpec, theta, X, y, eta: float, workers: int = 1) -> np.ndarray:
    """theta + eta (2/N) (dU/dtheta)^T (y - U): plain descent on the mean squared error."""
    theta = np.asarray(theta, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - forward_batch(spec, theta, X)
    g = deriv.weighted_param_grad(spec, theta, X, 2.0 * r / len(r), workers=workers)
    return theta + eta * g


def pde_loss_grad(problem: ProblemDef, spec: NetworkSpec, theta, X_in, X_bd=None, lam: float = 1.0, workers: int = 1):
    """Gradient of (1/N) sum R^2 + (lam/M) sum B^2; boundary term skipped under an ansatz."""
    g, _ = deriv.residual_sq_grad(problem, spec, theta, X_in, workers=workers)
    if X_bd is not None and len(X_bd) and spec.ansatz is None and lam != 0.0:
        X_bd = np.asarray(X_bd, dtype=np.float64)
        B = forward_batch(spec, theta, X_bd) - problem.h(X_bd)
        g = g + deriv.weighted_param_grad(spec, theta, X_bd, 2.0 * lam * B / len(B), workers=workers)
    return g


def sgd_step_pde(problem: ProblemDef, spec: NetworkSpec, theta, X_in, X_bd, eta: float, lam: float = 1.0, workers: int = 1) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return theta - eta * pde_loss_grad(problem, spec, theta, X_in, X_bd, lam, workers)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

CSV_HEADER = "epoch,lr,rel_l2,residual_rms,energy,wall_s"


@dataclass
class TraceRecord:
    epoch: int
    lr: float
    rel_l2: float
    residual_rms: float
    energy: float
    wall_s: float | None = None


@dataclass
class FlowTrace:
    records: list[TraceRecord] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""
    method: str = ""
    problem: str = ""
    energy_label: str = ""
    aborted: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def final_rel_l2(self) -> float:
        return self.records[-1].rel_l2 if self.records else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.records:
            wall = "" if r.wall_s is None else repr(float(r.wall_s))
            buf.write(f"{r.epoch},{float(r.lr)!r},{float(r.rel_l2)!r},{float(r.residual_rms)!r},{float(r.energy)!r},{wall}\n")
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path) -> "FlowTrace":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError("not a trace file")
        recs = []
        for line in lines[1:]:
            e, lr, rel, res, en, wall = line.split(",")
            recs.append(TraceRecord(int(e), float(lr), float(rel), float(res), float(en), float(wall) if wall else None))
        return cls(recs)

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "method": self.method,
            "problem": self.problem,
            "energy_label": self.energy_label,
            "aborted": self.aborted,
        }


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


def eval_points(problem: ProblemDef, seed: int, n: int) -> np.ndarray:
    return sample_interior(problem, n, stream(seed, "eval")).interior


def epoch_samples(problem: ProblemDef, cfg: TrainerConfig, seed: int, epoch: int):
    """(interior, boundary) training points of one epoch."""
    k = 0 if cfg.resample == "fixed" else epoch
    X = sample_interior(problem, problem.n_samples, stream(seed, "train", k)).interior
    X_bd = None
    if problem.is_pde and cfg.n_boundary > 0:
        X_bd = sample_boundary(problem, cfg.n_boundary, stream(seed, "boundary", k)).boundary
    return X, X_bd


def initial_theta(spec: NetworkSpec, seed: int, mode: str = "scaled") -> np.ndarray:
    return init_params(spec, derive_seed(seed, "init"), mode)


def _metrics(problem, spec, theta, X, X_bd, X_eval):
    rel = relative_l2(spec, theta, problem, X_eval)
    if problem.is_pde:
        _, r = deriv.residual_values(problem, spec, theta, X)
        en = energy_pde(spec, theta, problem, X, X_bd)
        return rel, float(np.sqrt(np.mean(r * r))), en.value, en.label
    y = problem.u_s(X)
    r = y - forward_batch(spec, theta, X)
    return rel, float(np.sqrt(np.mean(r * r))), energy_j1(spec, theta, X, y), "J1"


def _gamma_fn(problem, spec, cfg, X, X_bd):
    """theta -> NED direction on a fixed sample set."""
    tol = cfg.rel_tol if cfg.rel_tol is not None else problem.rel_tol

    def gamma(th):
        if problem.is_pde:
            sys = assemble_pde(problem, spec, th, X, X_bd, rows=cfg.pde_rows, workers=cfg.workers)
        else:
            sys = assemble_supervised(spec, th, X, problem.u_s(X), workers=cfg.workers)
        alpha, _ = ned_direction(sys, tol)
        return alpha

    return gamma


def step(problem: ProblemDef, spec: NetworkSpec, cfg: TrainerConfig, theta, X, X_bd, eta: float) -> np.ndarray:
    """One update of ``cfg.method`` with step size ``eta`` on a fixed sample set."""
    if cfg.method == "sgd":
        if problem.is_pde:
            return sgd_step_pde(problem, spec, theta, X, X_bd, eta, cfg.sgd_lambda, cfg.workers)
        return sgd_step_supervised(spec, theta, X, problem.u_s(X), eta, cfg.workers)
    gamma = _gamma_fn(problem, spec, cfg, X, X_bd)
    if cfg.method == "ned_fe":
        return fe_step(theta, gamma(theta), eta)
    return rk2_step(theta, gamma, eta)


def train(
    problem: ProblemDef,
    spec: NetworkSpec | None,
    cfg: TrainerConfig,
    seed: int,
    theta0=None,
    checkpoint: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    progress: Callable[[TraceRecord], None] | None = None,
) -> tuple[FlowTrace, np.ndarray]:
    """Run ``cfg.epochs`` epochs and record the state before each step and after the last.

    Record n holds the metrics of theta_n; the step from theta_n uses
    tau_n and epoch n's sample set. ``resume`` continues from a checkpoint
    written by an earlier call; ``stop_after`` ends the loop early (just
    before epoch ``stop_after`` is recorded, writing a checkpoint) to
    emulate an interruption.
    """
    spec = spec or problem.network
    X_eval = eval_points(problem, seed, cfg.eval_points)
    trace = FlowTrace(seed=seed, config_hash=cfg.digest(problem, spec), method=cfg.method, problem=problem.name)
    start = 0
    if resume is not None:
        spec_r, theta, doc = load_checkpoint(resume)
        if spec_r != spec or doc.get("config_hash") != trace.config_hash or doc["seed"] != seed:
            raise ValueError("checkpoint was written by a different run")
        start = doc["epoch"]
        trace.records = [TraceRecord(**r) for r in doc["records"]]
    else:
        theta = initial_theta(spec, seed, cfg.init_mode) if theta0 is None else np.array(theta0, dtype=np.float64)

    def save(epoch, th):
        save_checkpoint(
            checkpoint,
            spec,
            th,
            seed,
            epoch,
            config_hash=trace.config_hash,
            records=[asdict(r) for r in trace.records],
        )

    t0 = time.perf_counter()
    for n in range(start, cfg.epochs + 1):
        if stop_after is not None and n == stop_after and n > start:
            if checkpoint is not None:
                save(n, theta)
            return trace, theta
        X, X_bd = epoch_samples(problem, cfg, seed, n)
        if not np.all(np.isfinite(theta)):
            trace.aborted = f"non-finite parameters at epoch {n}"
            raise TrainingAborted(trace.aborted, trace)
        rel, rms, en, label = _metrics(problem, spec, theta, X, X_bd, X_eval)
        trace.energy_label = label
        lr = lr_schedule(n, cfg)
        rec = TraceRecord(n, lr, rel, rms, en, time.perf_counter() - t0 if cfg.record_wall else None)
        trace.records.append(rec)
        if progress is not None:
            progress(rec)
        if not all(math.isfinite(v) for v in (rel, rms, en)):
            trace.aborted = f"non-finite metrics at epoch {n}"
            raise TrainingAborted(trace.aborted, trace)
        if rms > cfg.divergence_factor * max(trace.records[0].residual_rms, 1e-300):
            trace.aborted = f"residual RMS {rms:.3e} exceeded {cfg.divergence_factor:g} x initial at epoch {n}"
            raise TrainingAborted(trace.aborted, trace)
        if n == cfg.epochs:
            break
        try:
            theta = step(problem, spec, cfg, theta, X, X_bd, lr)
        except SolverError as exc:
            # e.g. an RK2 midpoint with overflowed entries
            trace.aborted = f"step from epoch {n} failed: {exc}"
            raise TrainingAborted(trace.aborted, trace) from exc
        if checkpoint is not None and checkpoint_every and (n + 1) % checkpoint_every == 0:
            # state after the step: theta_{n+1}, records 0..n
            save(n + 1, theta)
    return trace, theta
