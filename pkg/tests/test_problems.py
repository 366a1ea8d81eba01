import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ned.net import NetworkSpec, flatten, forward_batch, unflatten
from ned.problems import (
    energy_j1,
    energy_pde,
    preset,
    preset_names,
    relative_l2,
    residual,
    sample_boundary,
    sample_interior,
    self_check,
    steady_residual,
)


def quadratic_net(scale=1.0):
    """sigma2 net computing scale * |x|^2 / 2 on R^5 exactly."""
    spec = NetworkSpec(5, (10,), "sigma2")
    p = unflatten(spec, np.zeros(spec.n_params))
    p[0]["W"][:] = np.vstack([np.eye(5), -np.eye(5)])
    p[0]["act0"][:] = 0.0
    p[0]["act1"][:] = 1.0
    p[1]["W"][:] = 0.5 * scale
    return spec, flatten(spec, p)


# -- samplers -------------------------------------------------------------------


def test_empty_samples():
    p = preset("heat_d5")
    assert sample_interior(p, 0, 0).interior.shape == (0, 5)
    assert sample_boundary(p, 0, 0).boundary.shape == (0, 5)
    with pytest.raises(ValueError):
        sample_interior(p, -1, 0)


@pytest.mark.parametrize("name", ["bvp_1d", "heat_d5", "normsq_d10"])
def test_samples_in_bounds(name):
    p = preset(name)
    x = sample_interior(p, 5000, 1).interior
    assert np.all(x > p.lo) and np.all(x < p.hi)
    xb = sample_boundary(p, 500, 2).boundary
    assert np.all(xb >= p.lo) and np.all(xb <= p.hi)
    on_face = np.any((xb == p.lo) | (xb == p.hi), axis=1)
    assert np.all(on_face)


def test_samplers_deterministic():
    p = preset("react_d5")
    assert np.array_equal(sample_interior(p, 50, 7).interior, sample_interior(p, 50, 7).interior)
    assert not np.array_equal(sample_interior(p, 50, 7).interior, sample_interior(p, 50, 8).interior)


def test_interior_uniform_ks():
    p = preset("bvp_1d")
    x = sample_interior(p, 10_000, 3).interior[:, 0]
    assert stats.kstest(x, stats.uniform(loc=-1, scale=1).cdf).statistic <= 0.02


def test_boundary_faces_balanced():
    p = preset("heat_d5")
    xb = sample_boundary(p, 20_000, 4).boundary
    counts = [np.sum(xb[:, k] == v) for k in range(5) for v in (0.0, 1.0)]
    assert min(counts) > 0.8 * 2000 and max(counts) < 1.2 * 2000


# -- metrics --------------------------------------------------------------------


def test_relative_l2_examples():
    p = preset("heat_d5")
    spec, theta = quadratic_net()
    X = sample_interior(p, 300, 0).interior
    assert relative_l2(spec, theta, p, X) <= 1e-15
    spec2, theta2 = quadratic_net(2.0)
    assert relative_l2(spec2, theta2, p, X) == pytest.approx(1.0, rel=1e-14)


def test_relative_l2_two_pass_oracle(rng):
    p = preset("normsq_d2")
    spec = p.network
    theta = rng.standard_normal(spec.n_params)
    X = rng.uniform(-1, 1, (400, 2))
    U = forward_batch(spec, theta, X)
    ref = np.sum(X**2, axis=1)
    num = sum((a - b) ** 2 for a, b in zip(U, ref))
    den = sum(b**2 for b in ref)
    assert relative_l2(spec, theta, p, X) == pytest.approx((num / den) ** 0.5, rel=1e-12)


def test_relative_l2_zero_denominator():
    p = replace(preset("react_d5"), u_s=lambda x: np.zeros(x.shape[0]))
    with pytest.raises(ZeroDivisionError):
        relative_l2(p.network, np.zeros(p.network.n_params), p, np.full((3, 5), 0.5))


def perturbed_quadratic_net(c, rng_seed):
    """sigma2 net equal to |x|^2/2 + c * (a fixed relu perturbation)."""
    rng = np.random.default_rng(rng_seed)
    spec = NetworkSpec(5, (14,), "sigma2")
    p = unflatten(spec, np.zeros(spec.n_params))
    p[0]["W"][:10] = np.vstack([np.eye(5), -np.eye(5)])
    p[0]["W"][10:] = rng.standard_normal((4, 5))
    p[0]["b"][10:] = rng.standard_normal(4)
    p[0]["act0"][:] = np.r_[np.zeros(10), np.ones(4)]
    p[0]["act1"][:] = np.r_[np.ones(10), np.zeros(4)]
    p[1]["W"][0, :10] = 0.5
    p[1]["W"][0, 10:] = c * rng.standard_normal(4)
    return spec, flatten(spec, p)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.integers(0, 2**31))
def test_relative_l2_scale_covariant(c1, c2, seed):
    p = preset("heat_d5")
    X = np.random.default_rng(seed).uniform(0, 1, (200, 5))
    e1 = relative_l2(*perturbed_quadratic_net(c1, seed), p, X)
    e2 = relative_l2(*perturbed_quadratic_net(c2, seed), p, X)
    unit = relative_l2(*perturbed_quadratic_net(1.0, seed), p, X)
    if c1 < c2:
        assert e1 <= e2
    assert e1 == pytest.approx(c1 * unit, rel=1e-9, abs=1e-14)


def test_energy_j1_values():
    spec = NetworkSpec(1, (1,), "relu")
    p = unflatten(spec, np.zeros(spec.n_params))
    p[0]["b"][:] = -1.0
    p[1]["b"][:] = 0.25
    theta = flatten(spec, p)
    X = np.linspace(0, 1, 9)[:, None]
    assert energy_j1(spec, theta, X, np.full(9, 0.25)) == 0.0
    assert energy_j1(spec, theta, X, np.full(9, 1.0)) == pytest.approx(0.75**2 / 2, rel=1e-15)


def test_heat_energy_matches_monte_carlo():
    # integrand at u_s: 1/2 (-d) |x|^2/2 + d |x|^2/2 = d |x|^2 / 4
    p = preset("heat_d5")
    spec, theta = quadratic_net()
    X = sample_interior(p, 20_000, 11).interior
    e = energy_pde(spec, theta, p, X)
    assert e.label == "J2+J3"
    oracle = np.random.default_rng(99).uniform(0, 1, (20_000, 5))
    vals = 5 * np.sum(oracle**2, axis=1) / 4
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(e.value - vals.mean()) <= 3 * np.sqrt(2) * se
    assert abs(e.value - 25 / 12) <= 3 * se * np.sqrt(2)


def test_heat_energy_boundary_term_and_vanishing_net():
    p = preset("heat_d5")
    X = sample_interior(p, 500, 0).interior
    spec, theta = quadratic_net()
    xb = sample_boundary(p, 100, 1).boundary
    a = energy_pde(spec, theta, p, X).value
    assert energy_pde(spec, theta, p, X, np.empty((0, 5))).value == a
    assert energy_pde(spec, theta, p, X, xb).value == pytest.approx(a, abs=1e-15)
    spec0, theta0 = quadratic_net(1e-9)
    assert abs(energy_pde(spec0, theta0, p, X).value) <= 1e-8


def test_reaction_energy_is_residual_surrogate():
    p = preset("react_d5")
    X = sample_interior(p, 100, 0).interior
    theta = np.random.default_rng(0).standard_normal(p.network.n_params) * 0.2
    e = energy_pde(p.network, theta, p, X)
    assert e.label == "residual_rms"
    assert e.value == pytest.approx(np.sqrt(np.mean(residual(p, p.network, theta, X) ** 2)), rel=1e-14)


# -- presets --------------------------------------------------------------------


def test_preset_values():
    assert preset("bvp_1d").u_s(np.array([[-1.0]]))[0] == 0.5
    assert preset("bvp_1d").u_s(np.array([[0.0]]))[0] == pytest.approx(1 / 3, rel=1e-15)
    assert np.all(preset("react_d5").u_s(np.random.default_rng(0).uniform(0, 1, (20, 5))) == 1.0)
    s = preset("sin_2pi")
    assert (s.tau0["ned_fe"], s.epochs, s.n_samples, s.hi) == (1e-3, 200, 200, pytest.approx(2 * np.pi))
    n = preset("normsq_d30")
    assert (n.network.widths, n.tau0["ned_fe"], n.tau0["sgd"], n.epochs, n.n_samples) == ((50,), 3e-3, 1e-2, 2500, 2000)
    b = preset("bvp_1d")
    assert (b.network.arch, b.network.blocks, b.network.block_width, b.n_samples, b.epochs) == ("resnet", 2, 20, 10000, 3000)
    assert (b.tau0["ned_fe"], b.tau0["sgd"]) == (3e-4, 5e-3)
    h, r = preset("heat_d5"), preset("react_d5")
    assert h.network.widths == (20, 20, 20) and h.n_samples == 10000 and h.tau0 == {"ned_fe": 8e-3, "ned_rk2": 8e-3, "sgd": 1e-1}
    assert r.n_samples == 20000 and r.tau0["ned_fe"] == 5e-7 and r.tau0["sgd"] == 5e-1
    assert preset("sin_10pi").network.activation == "relu_plus_sin"


def test_smoke_variants_are_quarter_scale():
    for name in preset_names():
        if name.endswith("_smoke"):
            base = preset(name[: -len("_smoke")])
            s = preset(name)
            assert s.n_samples == base.n_samples // 4 and s.epochs == base.epochs // 4


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("wave_d3")


@pytest.mark.parametrize("name", preset_names())
def test_every_preset_passes_self_check(name):
    assert self_check(preset(name), n=100, seed=5) <= 1e-8


def test_bvp_steady_state_by_differences():
    p = preset("bvp_1d")
    x = np.linspace(-0.95, -0.05, 19)[:, None]
    h = 1e-4
    lap = (p.u_s(x + h) - 2 * p.u_s(x) + p.u_s(x - h)) / h**2
    assert np.max(np.abs(lap + p.f(p.u_s(x), x))) <= 1e-6
    assert np.max(np.abs(steady_residual(p, x))) <= 1e-14


def test_self_check_catches_wrong_solution():
    p = replace(preset("react_d5"), u_s=lambda x: np.full(x.shape[0], 2.0))
    with pytest.raises(AssertionError):
        self_check(p)


def test_dump_is_json():
    from ned.problems import dump_preset

    doc = json.loads(dump_preset("heat_d5"))
    assert doc["name"] == "heat_d5" and doc["dim"] == 5
