"""Exact parameter Jacobians, input Laplacians and PDE-residual Jacobians.

Input derivatives come from the Taylor streams of :func:`ned.net.propagate`.
Parameter derivatives are a hand-written reverse sweep through that tape,
seeded with per-sample output adjoints, so one sweep yields the rows of
d/dtheta of any linear combination of U, dU/dx_k and d2U/dx_k2.

Rows are computed in fixed-size chunks. Chunk boundaries do not depend on
the worker count, so the assembled matrices are bitwise identical for any
``workers`` value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .net import NetworkSpec, Streams, _as_points, _basis, forward_batch, propagate

CHUNK = 512


class UnsupportedActivation(ValueError):
    pass


def _require_second_order(spec: NetworkSpec):
    if not spec.supports_laplacian():
        raise UnsupportedActivation(
            "input Laplacian needs activations with a.e. nonzero second derivative "
            f"(relu3, sigma2); got {spec.activation!r}"
        )


def _chunked(m: int, fn: Callable[[slice], None], workers: int):
    slices = [slice(i, min(i + CHUNK, m)) for i in range(0, m, CHUNK)]
    if workers <= 1 or len(slices) == 1:
        for sl in slices:
            fn(sl)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(fn, slices))


# ---------------------------------------------------------------------------
# network values with input derivatives
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    """U, its input Laplacian and the pieces needed to differentiate them."""

    x: np.ndarray
    u: np.ndarray
    lap: np.ndarray | None
    raw: Streams  # raw network output streams (before the ansatz)
    ld: tuple | None  # (L_D, grad, pure second partials) or None
    tape: list = field(repr=False, default_factory=list)


def evaluate(spec: NetworkSpec, theta, x, taylor: bool = True, keep_tape: bool = False) -> Evaluation:
    x = _as_points(spec, x)
    if taylor:
        _require_second_order(spec)
    tape = [] if keep_tape else None
    out = propagate(spec, theta, x, taylor=taylor, tape=tape)
    n = out.v[:, 0]
    lap = None
    if taylor:
        n_lap = out.s[:, :, 0].sum(axis=1)
    if spec.ansatz is None:
        u, ld = n, None
        if taylor:
            lap = n_lap
    else:
        ld = spec.ansatz.distance(x)
        lift, lift_lap = spec.ansatz.lift(x)
        u = ld[0] * n + lift
        if taylor:
            grad_n = out.g[:, :, 0]
            lap = ld[2].sum(axis=1) * n + 2.0 * np.sum(ld[1] * grad_n, axis=1) + ld[0] * n_lap + lift_lap
    return Evaluation(x, u, lap, out, ld, tape or [])


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _reverse(spec: NetworkSpec, tape, seed: Streams, sum_rows: bool) -> np.ndarray:
    """Push output adjoints back through ``tape``.

    ``seed`` holds adjoints of the raw output streams, shapes (m, 1) and
    (m, d, 1). Returns per-sample gradient rows (m, n_params) or, with
    ``sum_rows``, their sum over samples.
    """
    m = seed.v.shape[0]
    taylor = seed.g is not None
    rows = np.zeros(spec.n_params) if sum_rows else np.zeros((m, spec.n_params))
    sub = "mo,mi->oi" if sum_rows else "mo,mi->moi"
    sub_k = "mko,mki->oi" if sum_rows else "mko,mki->moi"

    def put(slot, val):
        if sum_rows:
            rows[slot.offset : slot.offset + slot.size] = val.ravel()
        else:
            rows[:, slot.offset : slot.offset + slot.size] = val.reshape(m, -1)

    adj = seed
    pending: Streams | None = None
    for li in range(len(spec.layers) - 1, -1, -1):
        layer, slots, rec = spec.layers[li], spec.layout[li], tape[li]
        if layer.add:
            pending = adj
        if layer.act is None:
            az = adj
        else:
            d1 = rec.derivs[1]
            z = rec.z
            av = adj.v * d1
            if taylor:
                zg, zs = z.g, z.s
                s1, s2, s3 = (rec.derivs[k][:, None, :] for k in (1, 2, 3))
                av = av + np.sum(adj.g * s2 * zg + adj.s * (s3 * zg * zg + s2 * zs), axis=1)
                az = Streams(av, adj.g * s1 + adj.s * 2.0 * s2 * zg, adj.s * s1)
            else:
                az = Streams(av)
            if rec.coefs is not None:
                bases = [_basis(layer.act, z.v, j) for j in range(3 if taylor else 1)]
                for k in range(len(rec.coefs)):
                    ga = adj.v * bases[0][k]
                    if taylor:
                        b1, b2 = bases[1][k][:, None, :], bases[2][k][:, None, :]
                        ga = ga + np.sum(adj.g * b1 * zg + adj.s * (b2 * zg * zg + b1 * zs), axis=1)
                    put(slots[f"act{k}"], ga.sum(axis=0) if sum_rows else ga)
        inp = rec.inp
        gw = np.einsum(sub, az.v, inp.v)
        if taylor:
            gw = gw + np.einsum(sub_k, az.g, inp.g) + np.einsum(sub_k, az.s, inp.s)
        put(slots["W"], gw)
        put(slots["b"], az.v.sum(axis=0) if sum_rows else az.v)
        if li == 0:
            break
        W = rec.W
        adj = Streams(az.v @ W, az.g @ W if taylor else None, az.s @ W if taylor else None)
        if layer.save and pending is not None:
            adj = adj + pending
            pending = None
    return rows


def _seeded_rows(spec, theta, x, seed_fn, taylor, sum_rows, workers):
    """Run forward+reverse on chunks; ``seed_fn(x_chunk, out_streams)`` builds output adjoints."""
    x = _as_points(spec, x)
    m = x.shape[0]
    result = np.zeros(spec.n_params) if sum_rows else np.zeros((m, spec.n_params))
    partial: dict[int, np.ndarray] = {}

    def work(sl: slice):
        xc = x[sl]
        tape: list = []
        out = propagate(spec, theta, xc, taylor=taylor, tape=tape)
        seed = seed_fn(sl, xc, out)
        r = _reverse(spec, tape, seed, sum_rows)
        if sum_rows:
            partial[sl.start] = r
        else:
            result[sl] = r

    _chunked(m, work, workers)
    if sum_rows:
        for k in sorted(partial):
            result += partial[k]
    return result


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def param_jacobian(spec: NetworkSpec, theta, x, workers: int = 1) -> np.ndarray:
    """Rows dU(x_i; theta)/dtheta, shape (m, n_params)."""
    if spec.output_dim != 1:
        raise ValueError("parameter Jacobians are defined for scalar networks")

    def seed(sl, xc, out):
        w = np.ones((xc.shape[0], 1))
        if spec.ansatz is not None:
            w = spec.ansatz.distance(xc)[0][:, None]
        return Streams(w)

    return _seeded_rows(spec, theta, x, seed, False, False, workers)


def weighted_param_grad(spec: NetworkSpec, theta, x, weights, workers: int = 1) -> np.ndarray:
    """sum_i weights_i dU(x_i)/dtheta without forming the Jacobian."""
    weights = np.asarray(weights, dtype=np.float64)

    def seed(sl, xc, out):
        w = weights[sl][:, None]
        if spec.ansatz is not None:
            w = w * spec.ansatz.distance(xc)[0][:, None]
        return Streams(w)

    return _seeded_rows(spec, theta, x, seed, False, True, workers)


def laplacian_batch(spec: NetworkSpec, theta, x) -> np.ndarray:
    return evaluate(spec, theta, x, taylor=True).lap


def laplacian_x(spec: NetworkSpec, theta, x) -> float:
    """Sum of pure second input derivatives of U at one point."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(laplacian_batch(spec, theta, x)[0])


def _residual_seed(spec, problem, theta, coef_fn):
    """Output adjoints for d/dtheta of  Lap U + c(x) * U  with per-sample c."""

    def seed(sl, xc, out):
        m, d = xc.shape
        c = coef_fn(sl, xc, out)
        if spec.ansatz is None:
            return Streams(c[:, None], np.zeros((m, d, 1)), np.ones((m, d, 1)))
        ld, gld, hld = spec.ansatz.distance(xc)
        v = hld.sum(axis=1) + c * ld
        return Streams(v[:, None], (2.0 * gld)[:, :, None], np.repeat(ld[:, None], d, axis=1)[:, :, None])

    return seed


def residual_values(problem, spec: NetworkSpec, theta, x) -> tuple[np.ndarray, np.ndarray]:
    """(U, Lap U + f(U, x)) at the rows of ``x``."""
    ev = evaluate(spec, theta, x, taylor=True)
    return ev.u, ev.lap + problem.f(ev.u, ev.x)


def pde_residual_jacobian(problem, spec: NetworkSpec, theta, x, workers: int = 1):
    """Rows d/dtheta [Lap U + f(U, x)] and the residual vector itself.

    The chain rule through f uses the closed-form ``problem.fprime``.
    """
    _require_second_order(spec)
    x = _as_points(spec, x)
    u, res = residual_values(problem, spec, theta, x)
    fp = problem.fprime(u, x)
    seed = _residual_seed(spec, problem, theta, lambda sl, xc, out: fp[sl])
    jac = _seeded_rows(spec, theta, x, seed, True, False, workers)
    return jac, res


def residual_sq_grad(problem, spec: NetworkSpec, theta, x, workers: int = 1):
    """Gradient of sum_i R(x_i)^2 / N and the residual vector."""
    _require_second_order(spec)
    x = _as_points(spec, x)
    u, res = residual_values(problem, spec, theta, x)
    w = 2.0 * res / max(len(res), 1)
    fp = problem.fprime(u, x)

    def seed_fn(sl, xc, out):
        s = _residual_seed(spec, problem, theta, lambda sl_, xc_, out_: fp[sl])(sl, xc, out)
        ws = w[sl]
        return Streams(s.v * ws[:, None], s.g * ws[:, None, None], s.s * ws[:, None, None])

    return _seeded_rows(spec, theta, x, seed_fn, True, True, workers), res


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------


@dataclass
class FDReport:
    op: str
    max_rel: float
    excluded: np.ndarray  # same shape as ``analytic``; True where a stencil crossed a break
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float = 1e-5
    columns: np.ndarray | None = None  # parameter indices of the Jacobian columns checked; None = all

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    @property
    def n_checked(self) -> int:
        return int(self.excluded.size - self.excluded.sum())

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol


def _kink_pattern(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Sign of every activated pre-activation, per sample.

    Every supported activation has a break at 0 (relu3 is only C^2 there),
    and a difference stencil straddling a break loses its accuracy order.
    """
    tape = []
    propagate(spec, theta, x, tape=tape)
    cols = [rec.z.v > 0.0 for layer, rec in zip(spec.layers, tape) if layer.act is not None]
    if not cols:
        return np.zeros((x.shape[0], 0), dtype=bool)
    return np.concatenate(cols, axis=1)


def rel_discrepancy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| relative to |b|, floored at 1e-3 of the largest |b| to tame near-zero entries."""
    a, b = np.asarray(a), np.asarray(b)
    floor = max(1e-3 * float(np.max(np.abs(b), initial=0.0)), 1e-300)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def _extrapolate(d_h: np.ndarray, d_2h: np.ndarray) -> np.ndarray:
    # both stencils are central, so the leading error is O(h^2)
    return (4.0 * d_h - d_2h) / 3.0


def fd_validate(
    op: str, spec: NetworkSpec, theta, x, step: float = 1e-3, tol: float = 1e-5, problem=None, columns=None
) -> FDReport:
    """Compare an analytic derivative with Richardson-extrapolated central differences.

    ``op`` is ``"param_jacobian"``, ``"laplacian"`` or ``"pde_residual_jacobian"``
    (the last needs ``problem``). Differences at ``step`` and ``2 * step``
    are combined to cancel the O(h^2) term. Entries whose stencil moves an
    activation sign anywhere (per sample for the Laplacian, per sample and
    parameter for the Jacobians) are flagged and left out of ``max_rel``.
    ``columns`` restricts a Jacobian check to those parameter indices; the
    report's arrays then hold only those columns.
    """
    if not 0.0 < step < 1e-2:
        raise ValueError("step must lie in (0, 1e-2)")
    theta = np.asarray(theta, dtype=np.float64)
    x = _as_points(spec, x)
    m = x.shape[0]
    base = _kink_pattern(spec, theta, x)
    excluded = np.zeros(m, dtype=bool)
    reach = 2.0 * step  # widest offset used

    def moved(th, xx):
        return np.any(_kink_pattern(spec, th, xx) != base, axis=1)

    if op == "laplacian":
        analytic = laplacian_batch(spec, theta, x)
        u0 = forward_batch(spec, theta, x)
        d_h = np.zeros(m)
        d_2h = np.zeros(m)
        for k in range(spec.input_dim):
            e = np.zeros(spec.input_dim)
            e[k] = 1.0
            for h, acc in ((step, d_h), (2.0 * step, d_2h)):
                acc += (forward_batch(spec, theta, x + h * e) - 2.0 * u0 + forward_batch(spec, theta, x - h * e)) / h**2
            # a sign flip inside the segment shows at one of a few probes
            for t in (-1.0, -0.5, 0.5, 1.0):
                excluded |= moved(theta, x + t * reach * e)
        numeric = _extrapolate(d_h, d_2h)
        rel = rel_discrepancy(analytic, numeric)
        return FDReport(op, float(np.max(rel[~excluded], initial=0.0)), excluded, analytic, numeric, tol)

    if op == "param_jacobian":
        analytic = param_jacobian(spec, theta, x)

        def f(t):
            return forward_batch(spec, t, x)
    elif op == "pde_residual_jacobian":
        if problem is None:
            raise ValueError("pde_residual_jacobian validation needs a problem")
        analytic, _ = pde_residual_jacobian(problem, spec, theta, x)

        def f(t):
            return residual_values(problem, spec, t, x)[1]
    else:
        raise ValueError(f"unknown op {op!r}")

    cols = np.arange(spec.n_params) if columns is None else np.asarray(columns, dtype=np.intp)
    if cols.ndim != 1 or np.any((cols < 0) | (cols >= spec.n_params)):
        raise ValueError("columns must be parameter indices")
    analytic = analytic[:, cols]
    numeric = np.zeros_like(analytic)
    excluded = np.zeros(analytic.shape, dtype=bool)
    for i, j in enumerate(cols):
        d = []
        for h in (step, 2.0 * step):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            d.append((f(tp) - f(tm)) / (2.0 * h))
        numeric[:, i] = _extrapolate(*d)
        if base.shape[1]:
            for t in (-1.0, 1.0):
                tt = theta.copy()
                tt[j] += t * reach
                excluded[:, i] |= moved(tt, x)
    rel = rel_discrepancy(analytic, numeric)
    return FDReport(op, float(np.max(rel[~excluded], initial=0.0)), excluded, analytic, numeric, tol, None if columns is None else cols)
