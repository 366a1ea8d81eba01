"""Comparison runs, plot data and validation suites behind the ``ned`` CLI.

Config files are JSON::

    {
      "preset": "normsq_d2",          # registry name (required)
      "methods": ["ned_fe", "sgd"],   # default: all three
      "seed": 0,
      "out": "runs/normsq_d2",
      "smoke": false,                 # use the *_smoke variant
      "parallel": false,              # run methods in threads
      "trainer": {"eval_points": 10000, "workers": 1},   # shared overrides
      "per_method": {"sgd": {"tau0": 0.02}}              # method overrides
    }

Any TrainerConfig field may appear under ``trainer`` or ``per_method``;
``tau0`` and ``epochs`` default to the preset's values.
"""

from __future__ import annotations

import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__, constructions, deriv
from .flow import (
    METHODS,
    FlowTrace,
    TrainerConfig,
    TrainingAborted,
    fe_step,
    initial_theta,
    lr_schedule,
    rk2_step,
    train,
)
from .linalg import pinv, pinv_solve, svd
from .net import NetworkSpec, flatten, init_params, unflatten
from .problems import ProblemDef, preset, preset_names

_TRAINER_FIELDS = {f.name for f in fields(TrainerConfig)}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    preset: str | None = None
    problem: ProblemDef | None = None  # inline problem, wins over ``preset``
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    out: str = "runs"
    smoke: bool = False
    parallel: bool = False
    trainer: dict = field(default_factory=dict)
    per_method: dict = field(default_factory=dict)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ValueError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.problem is None and self.preset is None:
            raise ValueError("a preset name or an inline problem is required")
        for key in list(self.trainer) + [k for d in self.per_method.values() for k in d]:
            if key not in _TRAINER_FIELDS or key == "method":
                raise ValueError(f"unknown trainer field {key!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"preset", "methods", "seed", "out", "smoke", "parallel", "trainer", "per_method"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def resolve_problem(self) -> ProblemDef:
        if self.problem is not None:
            return self.problem
        name = self.preset
        if self.smoke and not name.endswith("_smoke"):
            name += "_smoke"
        return preset(name)

    def trainer_config(self, problem: ProblemDef, method: str) -> TrainerConfig:
        kw = {"tau0": problem.tau0[method], "epochs": problem.epochs, "rel_tol": problem.rel_tol}
        kw.update(self.trainer)
        kw.update(self.per_method.get(method, {}))
        return TrainerConfig(method=method, **kw)


# ---------------------------------------------------------------------------
# comparison runs
# ---------------------------------------------------------------------------


def verdicts_from_finals(finals: dict[str, float]) -> list[str]:
    """Pairwise statements about final rel_l2, in method order."""
    out = []
    for a, b in combinations(list(finals), 2):
        ea, eb = finals[a], finals[b]
        if math.isnan(ea) or math.isnan(eb):
            out.append(f"{a} ? {b} at final epoch (incomplete run)")
        elif ea < eb:
            out.append(f"{a} < {b} at final epoch")
        elif ea > eb:
            out.append(f"{a} > {b} at final epoch")
        else:
            out.append(f"{a} = {b} at final epoch")
    return out


@dataclass
class MethodResult:
    name: str
    trace: FlowTrace
    trace_path: str
    completed: bool
    error: str | None = None

    @property
    def final_rel_l2(self) -> float:
        # aborted runs report NaN: their last record is not a final state
        return self.trace.final_rel_l2 if self.completed else math.nan


@dataclass
class ComparisonReport:
    preset: str
    seed: int
    results: list[MethodResult]
    verdicts: list[str]
    report_path: str | None = None

    @property
    def ok(self) -> bool:
        return all(r.completed for r in self.results)

    def finals(self) -> dict[str, float]:
        return {r.name: r.final_rel_l2 for r in self.results}

    def trace(self, method: str) -> FlowTrace:
        for r in self.results:
            if r.name == method:
                return r.trace
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "methods": [
                {
                    "name": r.name,
                    "final_rel_l2": None if math.isnan(r.final_rel_l2) else r.final_rel_l2,
                    "trace_path": r.trace_path,
                    "completed": r.completed,
                    "error": r.error,
                    "epochs_recorded": len(r.trace.records),
                    "config_hash": r.trace.config_hash,
                }
                for r in self.results
            ],
            "verdicts": self.verdicts,
            "seed": self.seed,
            "versions": versions(),
        }

    @classmethod
    def load(cls, path) -> "ComparisonReport":
        """Rebuild from a report JSON and its trace CSVs; verdicts are recomputed."""
        path = Path(path)
        doc = json.loads(path.read_text())
        results = []
        for m in doc["methods"]:
            tp = Path(m["trace_path"])
            if not tp.is_absolute():
                tp = path.parent / tp
            results.append(MethodResult(m["name"], FlowTrace.read_csv(tp), m["trace_path"], m["completed"], m.get("error")))
        rep = cls(doc["preset"], doc["seed"], results, [], str(path))
        rep.verdicts = verdicts_from_finals(rep.finals())
        return rep


def versions() -> dict:
    import scipy

    return {"ned": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _run_one(problem, cfg: TrainerConfig, seed, theta0, out: Path, progress) -> MethodResult:
    name = cfg.method
    path = out / f"{problem.name}_{name}.csv"
    try:
        trace, _ = train(problem, None, cfg, seed, theta0=theta0, progress=progress)
        ok, err = True, None
    except TrainingAborted as exc:
        trace, ok, err = exc.trace, False, str(exc)
    trace.write_csv(path)
    return MethodResult(name, trace, path.name, ok, err)


def run(config: RunConfig, progress=None) -> ComparisonReport:
    """Train every requested method from one shared initial state.

    All methods see the same theta_0 (drawn from the seed's init stream)
    and the same evaluation points. Writes ``<problem>_<method>.csv`` per
    method and ``report.json`` into ``config.out``. Aborted runs keep their
    partial trace and are flagged in the report.
    """
    problem = config.resolve_problem()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgs = [config.trainer_config(problem, m) for m in config.methods]
    modes = {c.init_mode for c in cfgs}
    if len(modes) != 1:
        raise ValueError("all methods of one comparison must share init_mode")
    theta0 = initial_theta(problem.network, config.seed, modes.pop())

    def job(cfg):
        cb = None if progress is None else (lambda rec, m=cfg.method: progress(m, rec))
        return _run_one(problem, cfg, config.seed, theta0, out, cb)

    if config.parallel and len(cfgs) > 1:
        with ThreadPoolExecutor(len(cfgs)) as pool:
            results = list(pool.map(job, cfgs))
    else:
        results = [job(c) for c in cfgs]

    rep = ComparisonReport(problem.name, config.seed, results, [])
    rep.verdicts = verdicts_from_finals(rep.finals())
    rpath = out / "report.json"
    rpath.write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    rep.report_path = str(rpath)
    return rep


def emit_plotdata(report: ComparisonReport, out_dir) -> list[Path]:
    """One ``epoch,rel_l2`` series per method plus a gnuplot stub."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in report.results:
        p = out / f"{report.preset}_{r.name}_rel_l2.csv"
        lines = ["epoch,rel_l2"] + [f"{rec.epoch},{float(rec.rel_l2)!r}" for rec in r.trace.records]
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
    plots = ", \\\n     ".join(f"'{p.name}' using 1:2 with lines title '{r.name}'" for p, r in zip(written, report.results))
    stub = out / f"{report.preset}.gp"
    stub.write_text(
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set logscale y\n"
        "set xlabel 'epoch'\n"
        "set ylabel 'relative L2 error'\n"
        f"set title '{report.preset}'\n"
        f"plot {plots}\n"
    )
    written.append(stub)
    return written


# ---------------------------------------------------------------------------
# validation suites
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    suite: str
    checks: list[Check]
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'}  {self.suite}: {c.name}  {c.detail}".rstrip() for c in self.checks]


def _preset_architectures() -> dict[str, ProblemDef]:
    """One representative problem per distinct network (first preset wins)."""
    seen: dict[NetworkSpec, ProblemDef] = {}
    for name in preset_names():
        p = preset(name)
        if p.smoke:
            continue
        seen.setdefault(p.network, p)
    return {p.name: p for p in seen.values()}


def _random_theta(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Scaled init with trainable activation slopes jittered away from their defaults."""
    theta = init_params(spec, int(rng.integers(2**62)))
    params = unflatten(spec, theta)
    for layer in params:
        for key in layer:
            if key.startswith("act"):
                layer[key] = layer[key] + rng.uniform(-0.2, 0.2, layer[key].shape)
    return flatten(spec, params)


def _column_sample(spec: NetworkSpec, k: int, rng: np.random.Generator) -> np.ndarray | None:
    """About ``k`` parameter indices with every weight/bias/slope block represented; None = all."""
    if k >= spec.n_params:
        return None
    blocks = [s for entry in spec.layout for s in entry.values()]
    picked = {int(s.offset + rng.integers(s.size)) for s in blocks}
    rest = np.setdiff1d(np.arange(spec.n_params), sorted(picked))
    extra = rng.choice(rest, size=max(0, k - len(picked)), replace=False)
    return np.sort(np.concatenate([np.fromiter(picked, dtype=np.intp), extra.astype(np.intp)]))


def deriv_suite(
    draws: int = 100, per_theta: int = 10, columns: int = 40, seed: int = 0, tol: float = 1e-5, lap_step: float = 4e-3
) -> list[Check]:
    """FD checks on every preset network: ``draws`` (theta, x) pairs each.

    Parameters are redrawn ``draws // per_theta`` times and each draw is
    checked at ``per_theta`` points. Jacobians are compared on a fresh
    random set of ``columns`` parameter indices per theta that touches every
    weight, bias and slope block. Laplacian and residual-Jacobian checks
    apply to the twice-differentiable networks only. Second differences at
    a 1e-3 step sit at the rounding floor (~1e-9 absolute) where the box
    Laplacians are small, hence the wider ``lap_step``.
    """
    rng = np.random.default_rng(seed)
    checks = []
    for name, p in _preset_architectures().items():
        spec = p.network
        ops = ["param_jacobian"]
        if spec.supports_laplacian():
            ops += ["laplacian", "pde_residual_jacobian"] if p.is_pde else ["laplacian"]
        worst = {op: 0.0 for op in ops}
        excluded = {op: 0 for op in ops}
        total = {op: 0 for op in ops}
        for _ in range(max(1, draws // per_theta)):
            theta = _random_theta(spec, rng)
            x = rng.uniform(p.lo, p.hi, (per_theta, p.dim))
            cols = _column_sample(spec, columns, rng)
            for op in ops:
                rep = deriv.fd_validate(
                    op,
                    spec,
                    theta,
                    x,
                    problem=p if op == "pde_residual_jacobian" else None,
                    tol=tol,
                    step=lap_step if op == "laplacian" else 1e-3,
                    columns=None if op == "laplacian" else cols,
                )
                worst[op] = max(worst[op], rep.max_rel)
                excluded[op] += rep.n_excluded
                total[op] += rep.excluded.size
        for op in ops:
            checks.append(
                Check(
                    f"{op} [{name}]",
                    worst[op] <= tol,
                    f"max rel {worst[op]:.2e} <= {tol:g}; kink-excluded entries {excluded[op]}/{total[op]}",
                )
            )
    return checks


def linalg_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []

    worst = 0.0
    for _ in range(20):
        m, n = rng.integers(1, 51, size=2)
        r = int(rng.integers(1, min(m, n) + 1))
        A = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
        s_max = svd(A).s[0]
        worst = max(worst, float(np.max(np.abs(A @ pinv(A, 1e-12) @ A - A))) / s_max)
    checks.append(Check("A A+ A = A", worst <= 1e-8, f"max |AA+A - A| / s_max = {worst:.2e}"))

    gap = -np.inf
    for _ in range(20):
        m = int(rng.integers(2, 20))
        n = int(rng.integers(m + 1, 40))
        A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        x, _ = pinv_solve(A, b)
        null = np.linalg.svd(A)[2][m:].T
        for _ in range(5):
            other = x + null @ rng.standard_normal(n - m)
            gap = max(gap, np.linalg.norm(x) - np.linalg.norm(other))
    checks.append(Check("minimum norm", gap <= 1e-12, f"max(|x| - |x'|) = {gap:.2e}"))

    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(3, 60))
        n = int(rng.integers(1, m + 1))
        A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        x, _ = pinv_solve(A, b)
        ref = gauss_solve(A.T @ A, A.T @ b)
        worst = max(worst, np.linalg.norm(x - ref) / np.linalg.norm(ref))
    checks.append(Check("normal-equations agreement", worst <= 1e-9, f"max rel {worst:.2e}"))
    return checks


def gauss_solve(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting; an oracle independent of LAPACK's SVD path."""
    M = np.array(M, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    n = len(v)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if M[p, k] == 0.0:
            raise np.linalg.LinAlgError("singular matrix")
        M[[k, p]], v[[k, p]] = M[[p, k]], v[[p, k]]
        f = M[k + 1 :, k] / M[k, k]
        M[k + 1 :, k:] -= np.outer(f, M[k, k:])
        v[k + 1 :] -= f * v[k]
    x = np.zeros(n)
    for k in range(n - 1, -1, -1):
        x[k] = (v[k] - M[k, k + 1 :] @ x[k + 1 :]) / M[k, k]
    return x


# constant-net model: U = theta, target c, so gamma(theta) = c - theta and the
# exact flow is theta(t) = c + exp(-t)(theta_0 - c)


def constant_model_error(stepper: str, eta: float, t_end: float = 1.0, c: float = 0.7, g: float = -0.3) -> float:
    K = round(t_end / eta)
    th = np.array([g])
    gamma = lambda t: c - t  # noqa: E731
    for _ in range(K):
        th = fe_step(th, gamma(th), eta) if stepper == "fe" else rk2_step(th, gamma, eta)
    return abs(float(th[0]) - (c + math.exp(-K * eta) * (g - c)))


def richardson_ratios(stepper: str, etas=(0.1, 0.05, 0.025)) -> list[float]:
    errs = [constant_model_error(stepper, e) for e in etas]
    return [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]


def constant_net_problem(c: float = 0.7, samples: int = 8) -> tuple[ProblemDef, np.ndarray]:
    """A real network that is constant in x with only the output bias live.

    One hidden relu neuron with zero weights and bias -1 stays switched off,
    so dU/dtheta is a ones-column on the output bias and zero elsewhere.
    """
    spec = NetworkSpec(1, (1,), "relu")
    problem = ProblemDef(
        name="constant_net",
        kind="supervised",
        dim=1,
        lo=0.0,
        hi=1.0,
        u_s=lambda x: np.full(x.shape[0], c),
        network=spec,
        n_samples=samples,
        epochs=10,
        tau0={m: 0.1 for m in METHODS},
    )
    params = unflatten(spec, np.zeros(spec.n_params))
    params[0]["b"][:] = -1.0
    params[1]["b"][:] = -0.3
    return problem, flatten(spec, params)


def energy_is_monotone(eta: float, epochs: int = 40, method: str = "ned_fe") -> tuple[bool, str]:
    """J1 per record on the constant net: nonincreasing, strictly while J1 > 1e-12."""
    problem, theta0 = constant_net_problem()
    cfg = TrainerConfig(method, eta, epochs, schedule=False, eval_points=16)
    trace, _ = train(problem, None, cfg, 0, theta0=theta0)
    j = trace.column("energy")
    d = np.diff(j)
    nonincreasing = bool(np.all(d <= 0.0))
    strict = bool(np.all(d[j[:-1] > 1e-12] < 0.0))
    return nonincreasing and strict, f"eta={eta:g}: J1 {j[0]:.3e} -> {j[-1]:.3e}"


def integrators_suite() -> list[Check]:
    checks = []
    for stepper, lo, hi in (("fe", 1.8, 2.2), ("rk2", 3.6, 4.4)):
        ratios = richardson_ratios(stepper)
        ok = all(lo <= r <= hi for r in ratios)
        checks.append(Check(f"{stepper} Richardson ratios", ok, f"{', '.join(f'{r:.4f}' for r in ratios)} in [{lo}, {hi}]"))
    for eta in (0.05, 0.5, 1.0):
        ok, detail = energy_is_monotone(eta)
        checks.append(Check(f"J1 monotone, eta={eta:g}", ok, detail))
    # the same recursion through the full training loop on a real network
    problem, theta0 = constant_net_problem()
    eta, K = 0.1, 30
    trace, theta = train(problem, None, TrainerConfig("ned_fe", eta, K, schedule=False, eval_points=16), 0, theta0=theta0)
    expect = 0.7 + (1 - eta) ** K * (-0.3 - 0.7)
    gap = abs(theta[-1] - expect)
    checks.append(Check("train() matches geometric decay", gap <= 1e-12, f"|theta_K - closed form| = {gap:.1e}"))
    sched = [lr_schedule(n, TrainerConfig("ned_fe", 1.0, 4)) for n in range(5)]
    want = [1.0, 0.5 * (math.cos(math.pi / 4) + 1), 0.5, 0.5 * (math.cos(3 * math.pi / 4) + 1), 0.0]
    checks.append(Check("cosine schedule", np.allclose(sched, want, atol=1e-15), " ".join(f"{v:.4f}" for v in sched)))
    return checks


def constructions_suite(n_exact: int = 100_000, seed: int = 0) -> list[Check]:
    """Bound, oracle and width/depth-budget checks for every gadget family."""
    C = constructions
    rng = np.random.default_rng(seed)
    checks = []

    def add(g, x=None, tol=1e-12):
        v = C.verify(g, x, exact_tol=tol)
        ptxt = ",".join(f"{k}={val}" for k, val in g.params.items())
        checks.append(Check(f"{g.name}({ptxt}) error", v["error_ok"], f"{v['measured_error']:.2e} <= {g.bound if not g.exact else tol:.3g}"))
        checks.append(
            Check(
                f"{g.name}({ptxt}) budget",
                v["budget_ok"],
                f"width {v['width']}/{v['width_budget']}, depth {v['depth']}/{v['depth_budget']}",
            )
        )

    for N in (1, 2, 3):
        for L in (1, 2, 3):
            add(C.sigma1_square(N, L))
            add(C.sigma1_product(N, L, 0.0, 1.0))
    add(C.sigma1_product(2, 2, -1.0, 2.0))
    for n in (2, 3, 5, 8):
        add(C.sigma1_min(n), rng.uniform(-5, 5, (n_exact, n)))
    for d in (1, 2, 3, 4):
        add(C.spike(d), rng.uniform(-2, 2, (n_exact, d)))
    for d in (1, 2, 3):
        add(C.identity(d, "relu"), rng.uniform(-5, 5, (n_exact, d)))
        add(C.identity(d, "sigma2"), rng.uniform(-5, 5, (n_exact, d)))
    add(C.sigma2_square(), rng.uniform(-10, 10, (n_exact, 1)))
    add(C.sigma2_product(), rng.uniform(-10, 10, (n_exact, 2)))
    for alpha, N, L in (((2, 1), 1, 3), ((1, 2, 3), 2, 3), ((4, 0, 2), 2, 3), ((0, 0), 1, 1)):
        add(C.sigma2_monomial(alpha, N, L), rng.uniform(-2, 2, (n_exact // 10, len(alpha))))
    terms = [(1.5, (2, 0, 1)), (-2.0, (0, 1, 0)), (0.5, (1, 1, 1)), (3.0, (0, 0, 0))]
    add(C.sigma2_polynomial(terms, 1, 14, 2, 2), rng.uniform(-2, 2, (n_exact // 10, 3)))

    for d in (1, 2, 3):
        for K in (2, 4):
            x = rng.uniform(0, 1, (1000, d))
            for form in ("sigma1", "sigma2"):
                gs = C.partition_of_unity(d, K, form)
                vals = np.stack([g(x) for g in gs])
                dev = float(np.max(np.abs(vals.sum(axis=0) - 1.0)))
                oracle = float(max(np.max(np.abs(g(x) - g.oracle(x))) for g in gs))
                checks.append(Check(f"pu {form} d={d} K={K} sum", dev <= 1e-12, f"|sum - 1| = {dev:.1e}"))
                checks.append(Check(f"pu {form} d={d} K={K} oracle", oracle <= 1e-12, f"{oracle:.1e}"))
                widths = max(g.width for g in gs)
                depths = max(g.depth for g in gs)
                ok = all(g.within_budget() for g in gs)
                checks.append(
                    Check(
                        f"pu {form} d={d} K={K} budget",
                        ok,
                        f"width {widths}/{gs[0].width_budget}, depth {depths}/{gs[0].depth_budget}",
                    )
                )
    return checks


SUITES = {
    "deriv": deriv_suite,
    "linalg": linalg_suite,
    "constructions": constructions_suite,
    "integrators": integrators_suite,
}


def validate(suite: str) -> ValidationReport:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    t0 = time.perf_counter()
    checks = SUITES[suite]()
    return ValidationReport(suite, checks, time.perf_counter() - t0)

