import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ned.deriv import fd_validate, laplacian_batch, param_jacobian, rel_discrepancy
from ned.flow import (
    CSV_HEADER,
    FlowTrace,
    ResidualSystem,
    TrainerConfig,
    TrainingAborted,
    assemble_pde,
    assemble_supervised,
    fe_step,
    lr_schedule,
    ned_direction,
    pde_loss_grad,
    rk2_step,
    sgd_step_pde,
    sgd_step_supervised,
    train,
)
from ned.harness import constant_net_problem, richardson_ratios
from ned.net import NetworkSpec, flatten, forward_batch, unflatten
from ned.problems import energy_j1, preset, residual, sample_boundary


def bias_index(spec):
    return spec.layout[-1]["b"].offset


# -- schedule -----------------------------------------------------------------


def test_schedule_endpoints():
    cfg = TrainerConfig("ned_fe", 2e-3, 10)
    assert lr_schedule(0, cfg) == pytest.approx(2e-3, rel=1e-15)
    assert lr_schedule(5, cfg) == pytest.approx(1e-3, rel=1e-15)
    assert lr_schedule(10, cfg) == pytest.approx(0.0, abs=1e-18)
    assert lr_schedule(3, replace(cfg, schedule=False)) == 2e-3
    with pytest.raises(ValueError):
        lr_schedule(11, cfg)


@pytest.mark.parametrize("kw", [{"tau0": 0.0}, {"q": 0.0}, {"q": 1.5}, {"epochs": -1}, {"method": "adam"}, {"pde_rows": "x"}])
def test_bad_config(kw):
    base = {"method": "ned_fe", "tau0": 1e-3, "epochs": 3}
    with pytest.raises(ValueError):
        TrainerConfig(**{**base, **kw})


# -- assembly -----------------------------------------------------------------


def test_supervised_assembly_constant_net():
    problem, theta = constant_net_problem(c=0.7, samples=5)
    spec = problem.network
    X = np.linspace(0.1, 0.9, 5)[:, None]
    sys = assemble_supervised(spec, theta, X, problem.u_s(X))
    col = np.zeros(spec.n_params)
    col[bias_index(spec)] = 1.0
    assert np.array_equal(sys.A, np.tile(col, (5, 1)))
    assert np.allclose(sys.b, 0.7 - (-0.3), atol=1e-15)


def test_supervised_assembly_perfect_fit_and_rows(rng):
    spec = NetworkSpec(2, (6,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((9, 2))
    sys = assemble_supervised(spec, theta, X, forward_batch(spec, theta, X))
    assert np.all(sys.b == 0)
    assert np.array_equal(sys.A, param_jacobian(spec, theta, X))
    assert list(sys.tags) == ["interior"] * 9


def test_supervised_assembly_errors():
    spec = NetworkSpec(1, (2,), "relu")
    with pytest.raises(ValueError):
        assemble_supervised(spec, np.zeros(spec.n_params), np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        assemble_supervised(spec, np.zeros(spec.n_params), np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        ResidualSystem(np.zeros((2, 1)), np.zeros(3), np.array(["interior"] * 3))


def test_react_steady_state_has_zero_rhs():
    p = preset("react_d5")
    spec = NetworkSpec(5, (4,), "relu3")
    theta = np.zeros(spec.n_params)
    theta[bias_index(spec)] = 1.0
    X = np.random.default_rng(0).uniform(0, 1, (12, 5))
    for rows in ("residual", "flow"):
        assert np.all(assemble_pde(p, spec, theta, X, rows=rows).b == 0.0)


def test_ansatz_boundary_rows_vanish_with_warning(rng):
    p = preset("heat_d5")
    theta = rng.standard_normal(p.network.n_params) * 0.3
    X = rng.uniform(0, 1, (10, 5))
    Xb = sample_boundary(p, 7, 0).boundary
    with pytest.warns(UserWarning):
        sys = assemble_pde(p, p.network, theta, X, Xb)
    assert sys.A.shape == (17, p.network.n_params)
    assert list(sys.tags) == ["interior"] * 10 + ["boundary"] * 7
    assert np.max(np.abs(sys.A[10:])) <= 1e-12 and np.max(np.abs(sys.b[10:])) <= 1e-12


def test_boundary_rows_without_ansatz(rng):
    p = preset("react_d5")
    spec = NetworkSpec(5, (6,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    Xb = sample_boundary(p, 4, 1).boundary
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sys = assemble_pde(p, spec, theta, rng.uniform(0, 1, (3, 5)), Xb)
    assert np.array_equal(sys.A[3:], param_jacobian(spec, theta, Xb))
    assert np.allclose(sys.b[3:], 1.0 - forward_batch(spec, theta, Xb), rtol=1e-15, atol=1e-15)


def test_bvp_assembly_matches_brute_force(rng):
    p = preset("bvp_1d")
    spec = p.network
    theta = rng.uniform(-0.5, 0.5, spec.n_params)
    X = rng.uniform(-1, 0, (5, 1))
    sys = assemble_pde(p, spec, theta, X)

    def R(t):
        u = forward_batch(spec, t, X)
        return laplacian_batch(spec, t, X) - 2.0 * u**3

    assert np.allclose(sys.b, -R(theta), rtol=1e-14, atol=1e-14)
    cols = []
    for j in range(spec.n_params):
        d = []
        for h in (1e-3, 2e-3):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            d.append((R(tp) - R(tm)) / (2 * h))
        cols.append((4 * d[0] - d[1]) / 3)
    N = np.stack(cols, axis=1)
    skip = fd_validate("pde_residual_jacobian", spec, theta, X, problem=p).excluded
    assert np.max(rel_discrepancy(sys.A, N)[~skip]) <= 1e-5
    flow = assemble_pde(p, spec, theta, X, rows="flow")
    assert np.array_equal(flow.A, param_jacobian(spec, theta, X))
    assert np.array_equal(flow.b, -sys.b)


# -- direction ------------------------------------------------------------------


def test_direction_zero_rhs():
    A = np.random.default_rng(0).standard_normal((5, 3))
    alpha, rank = ned_direction(ResidualSystem(A, np.zeros(5), np.array(["interior"] * 5)))
    assert np.all(alpha == 0) and rank == 3


def test_direction_constant_net_is_ode_rhs():
    problem, theta = constant_net_problem(c=0.7, samples=6)
    X = np.linspace(0, 1, 6)[:, None]
    alpha, rank = ned_direction(assemble_supervised(problem.network, theta, X, problem.u_s(X)))
    expect = np.zeros_like(theta)
    expect[bias_index(problem.network)] = 1.0
    assert rank == 1 and np.allclose(alpha, expect, atol=1e-15)


def test_direction_rank_zero():
    alpha, rank = ned_direction(ResidualSystem(np.zeros((3, 2)), np.ones(3), np.array(["interior"] * 3)))
    assert rank == 0 and np.all(alpha == 0)


def test_direction_consistent_overdetermined(rng):
    A = rng.standard_normal((30, 6))
    b = A @ rng.standard_normal(6)
    alpha, _ = ned_direction(ResidualSystem(A, b, np.array(["interior"] * 30)))
    assert np.linalg.norm(A @ alpha - b) <= 1e-9 * np.linalg.norm(b)


@given(st.integers(0, 2**31))
def test_direction_in_row_space(seed):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(1, (4,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    X = rng.uniform(-1, 1, (5, 1))
    sys = assemble_supervised(spec, theta, X, np.sin(X[:, 0]))
    alpha, rank = ned_direction(sys)
    if rank == 0:
        return
    V = np.linalg.svd(sys.A)[2][:rank].T
    assert np.linalg.norm(alpha - V @ (V.T @ alpha)) <= 1e-9 * np.linalg.norm(alpha)


# -- steppers -------------------------------------------------------------------


def test_zero_direction_is_fixed_point():
    th = np.array([0.3, -1.0])
    assert np.array_equal(fe_step(th, np.zeros(2), 0.5), th)
    assert np.array_equal(rk2_step(th, lambda t: np.zeros(2), 0.5), th)


def test_rk2_with_constant_field_equals_fe():
    th = np.array([0.3, -1.0])
    v = np.array([2.0, 0.5])
    assert np.array_equal(rk2_step(th, lambda t: v, 0.1), fe_step(th, v, 0.1))


def test_fe_recursion_closed_form():
    c, th, eta, K = 0.7, np.array([-0.3]), 0.05, 20
    for _ in range(K):
        th = fe_step(th, c - th, eta)
    assert th[0] == pytest.approx(c + (1 - eta) ** K * (-0.3 - c), abs=1e-15)


def test_richardson_orders():
    assert all(1.8 <= r <= 2.2 for r in richardson_ratios("fe"))
    assert all(3.6 <= r <= 4.4 for r in richardson_ratios("rk2"))


def test_fe_approaches_exact_flow():
    c, g = 0.7, -0.3
    errs = []
    for K in (10, 100, 1000):
        eta = 1.0 / K
        errs.append(abs(c + (1 - eta) ** K * (g - c) - (c + math.exp(-1.0) * (g - c))))
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-3


# -- SGD ------------------------------------------------------------------------


def test_sgd_hand_gradient_linear_unit():
    # U = w2 * relu(w1 x) with w1 = 1 acts as w x for x > 0
    spec = NetworkSpec(1, (1,), "relu")
    p = unflatten(spec, np.zeros(spec.n_params))
    p[0]["W"][:] = 1.0
    p[1]["W"][:] = 0.4
    theta = flatten(spec, p)
    x, y, eta = 1.5, 2.0, 0.1
    new = sgd_step_supervised(spec, theta, [[x]], [y], eta)
    w = spec.layout[1]["W"].offset
    assert new[w] - theta[w] == pytest.approx(eta * 2 * x * (y - 0.4 * x), rel=1e-14)


def test_sgd_fixed_at_zero_residual(rng):
    spec = NetworkSpec(2, (5,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((7, 2))
    assert np.array_equal(sgd_step_supervised(spec, theta, X, forward_batch(spec, theta, X), 0.3), theta)


def test_sgd_direction_descends_j1(rng):
    spec = NetworkSpec(2, (5,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((7, 2))
    y = np.cos(X[:, 0])
    eta = 1e-3
    d = (sgd_step_supervised(spec, theta, X, y, eta) - theta) / eta
    # J1 carries a 1/2, the update uses the gradient of the plain mean square
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        grad[j] = (energy_j1(spec, theta + e, X, y) - energy_j1(spec, theta - e, X, y)) / 2e-6
    assert np.allclose(d, -2.0 * grad, rtol=1e-5, atol=1e-8)
    J = param_jacobian(spec, theta, X)
    coef, *_ = np.linalg.lstsq(J.T, d, rcond=None)
    assert np.linalg.norm(J.T @ coef - d) <= 1e-9 * np.linalg.norm(d)


def test_sgd_pde_gradient_matches_penalized_loss(rng):
    p = preset("react_d5")
    spec = NetworkSpec(5, (4, 4), "relu3")
    theta = rng.uniform(-0.5, 0.5, spec.n_params)
    X = rng.uniform(0, 1, (6, 5))
    Xb = sample_boundary(p, 5, 2).boundary
    lam = 0.7

    def loss(t):
        R = residual(p, spec, t, X)
        B = forward_batch(spec, t, Xb) - p.h(Xb)
        return np.mean(R**2) + lam * np.mean(B**2)

    g = pde_loss_grad(p, spec, theta, X, Xb, lam)
    num = np.zeros_like(g)
    for j in range(g.size):
        d = []
        for h in (1e-3, 2e-3):
            e = np.zeros_like(theta)
            e[j] = h
            d.append((loss(theta + e) - loss(theta - e)) / (2 * h))
        num[j] = (4 * d[0] - d[1]) / 3
    skip = fd_validate("pde_residual_jacobian", spec, theta, X, problem=p).excluded.any(axis=0)
    skip |= fd_validate("param_jacobian", spec, theta, Xb).excluded.any(axis=0)
    assert (~skip).sum() >= g.size // 2
    assert np.max(rel_discrepancy(g, num)[~skip]) <= 1e-5
    new = sgd_step_pde(p, spec, theta, X, Xb, 0.01, lam)
    assert np.allclose(new, theta - 0.01 * g, rtol=0, atol=1e-15)


def test_sgd_pde_lambda_zero_is_interior_only(rng):
    p = preset("react_d5")
    spec = NetworkSpec(5, (4,), "relu3")
    theta = rng.standard_normal(spec.n_params)
    X = rng.uniform(0, 1, (6, 5))
    Xb = sample_boundary(p, 5, 2).boundary
    assert np.array_equal(pde_loss_grad(p, spec, theta, X, Xb, lam=0.0), pde_loss_grad(p, spec, theta, X, None))


def test_sgd_pde_steady_state_is_fixed():
    p = preset("react_d5")
    spec = NetworkSpec(5, (4,), "relu3")
    theta = np.zeros(spec.n_params)
    theta[bias_index(spec)] = 1.0
    X = np.random.default_rng(0).uniform(0, 1, (6, 5))
    Xb = sample_boundary(p, 5, 2).boundary
    assert np.array_equal(sgd_step_pde(p, spec, theta, X, Xb, 0.5), theta)


# -- training loop ----------------------------------------------------------------


def test_zero_epochs_records_initial_state():
    problem, theta0 = constant_net_problem()
    trace, theta = train(problem, None, TrainerConfig("ned_fe", 0.1, 0, eval_points=8), 0, theta0=theta0)
    assert len(trace.records) == 1 and np.array_equal(theta, theta0)


@pytest.mark.parametrize("method", ["ned_fe", "ned_rk2"])
def test_constant_net_geometric_decay(method):
    problem, theta0 = constant_net_problem(c=0.7)
    eta, K = 0.2, 25
    trace, theta = train(problem, None, TrainerConfig(method, eta, K, schedule=False, eval_points=8), 0, theta0=theta0)
    factor = 1 - eta if method == "ned_fe" else 1 - eta + eta**2 / 2
    expect = 0.7 + factor**K * (-0.3 - 0.7)
    assert abs(theta[bias_index(problem.network)] - expect) <= 1e-12
    j = trace.column("energy")
    assert np.all(np.diff(j) < 0)


def test_same_seed_gives_identical_csv():
    p = preset("sin_2pi_smoke")
    cfg = TrainerConfig("ned_fe", 1e-3, 5, eval_points=200)
    a, _ = train(p, None, cfg, 3)
    b, _ = train(p, None, replace(cfg, workers=2), 3)
    assert a.to_csv() == b.to_csv()
    c, _ = train(p, None, cfg, 4)
    assert c.to_csv() != a.to_csv()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    p = preset("sin_2pi_smoke")
    cfg = TrainerConfig("ned_rk2", 1e-3, 6, eval_points=100)
    full, th_full = train(p, None, cfg, 1)
    ck = tmp_path / "ck.json"
    train(p, None, cfg, 1, checkpoint=ck, stop_after=3)
    rest, th = train(p, None, cfg, 1, resume=ck)
    assert rest.to_csv() == full.to_csv() and np.array_equal(th, th_full)
    with pytest.raises(ValueError):
        train(p, None, replace(cfg, tau0=2e-3), 1, resume=ck)


def test_divergence_aborts_with_partial_trace():
    p = preset("sin_2pi_smoke")
    with pytest.raises(TrainingAborted) as info:
        train(p, None, TrainerConfig("sgd", 1e4, 20, schedule=False, eval_points=50), 0)
    tr = info.value.trace
    assert tr.aborted and 1 <= len(tr.records) <= 21


def test_csv_roundtrip(tmp_path):
    p = preset("sin_2pi_smoke")
    tr, _ = train(p, None, TrainerConfig("sgd", 1e-3, 4, eval_points=50), 0)
    path = tr.write_csv(tmp_path / "t.csv")
    assert path.read_text().splitlines()[0] == CSV_HEADER
    back = FlowTrace.read_csv(path)
    assert back.records == tr.records
    epochs = back.column("epoch")
    assert np.all(np.diff(epochs) > 0)
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        FlowTrace.read_csv(tmp_path / "bad.csv")


def test_solver_failure_inside_a_step_aborts_cleanly(monkeypatch):
    import ned.flow as flow
    from ned.linalg import SolverError

    calls = []
    real = flow.pinv_solve

    def flaky(A, b, rel_tol):
        calls.append(1)
        if len(calls) == 2:  # the RK2 midpoint solve
            raise SolverError("non-finite entries in A")
        return real(A, b, rel_tol)

    monkeypatch.setattr(flow, "pinv_solve", flaky)
    cfg = TrainerConfig("ned_rk2", 1e-3, 3, eval_points=50)
    with pytest.raises(TrainingAborted) as info:
        train(preset("sin_2pi_smoke"), None, cfg, 0)
    assert "epoch 0" in info.value.trace.aborted and len(info.value.trace.records) == 1
