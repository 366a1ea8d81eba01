"""Hand-wired ReLU (sigma1) and ReLU/ReLU^2 (sigma2) networks.

Each constructor returns a :class:`GadgetNet`: an ordinary ``NetworkSpec``
with a fixed parameter vector, its declared width/depth budget and its
declared error bound (0 for exact gadgets). Evaluation goes through
:func:`ned.net.forward_batch`, the same code path used for training.

sigma2 networks use the trainable two-parameter activation
a*relu(z) + b*z*relu(z) with per-neuron (a, b) fixed to (1, 0) for relu
neurons and (0, 1) for squared-relu neurons.

Networks are assembled by :class:`_Builder`, which tracks every signal as an
affine form in the outputs of the most recent layer.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .net import NetworkSpec, checkpoint_dict, flatten, forward_batch

# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


class _Aff:
    """c . h + k over the outputs h of layer ``level``."""

    __slots__ = ("coef", "const", "level")

    def __init__(self, coef, const, level):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.const = float(const)
        self.level = level

    def _check(self, other):
        if isinstance(other, _Aff) and other.level != self.level:
            raise ValueError("mixing signals from different layers")

    def __add__(self, other):
        if isinstance(other, _Aff):
            self._check(other)
            return _Aff(self.coef + other.coef, self.const + other.const, self.level)
        return _Aff(self.coef, self.const + other, self.level)

    __radd__ = __add__

    def __neg__(self):
        return _Aff(-self.coef, -self.const, self.level)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        return _Aff(self.coef * c, self.const * c, self.level)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / c)


class _Later:
    """Value available once the layer it belongs to is committed."""

    def __init__(self, fn):
        self._fn = fn
        self._outs = None

    def get(self) -> _Aff:
        if self._outs is None:
            raise RuntimeError("layer not committed yet")
        return self._fn(self._outs)


class _Plan:
    def __init__(self, builder):
        self.b = builder
        self.rows: list[tuple[_Aff, str]] = []
        self.pending: list[_Later] = []

    def _neuron(self, aff: _Aff, kind: str) -> int:
        if aff.level != self.b.level:
            raise ValueError("neuron input from a stale layer")
        if kind == "sq" and self.b.kind != "sigma2":
            raise ValueError("squared-relu neurons need a sigma2 network")
        self.rows.append((aff, kind))
        return len(self.rows) - 1

    def _later(self, fn) -> _Later:
        h = _Later(fn)
        self.pending.append(h)
        return h

    def relu(self, aff) -> _Later:
        i = self._neuron(aff, "relu")
        return self._later(lambda o: o[i])

    def carry(self, v) -> _Later:
        """Identity of R with two relu neurons."""
        i, j = self._neuron(v, "relu"), self._neuron(-v, "relu")
        return self._later(lambda o: o[i] - o[j])

    def carry_pos(self, v) -> _Later:
        """Identity on [0, inf) with one neuron."""
        return self.relu(v)

    def abs(self, v) -> _Later:
        i, j = self._neuron(v, "relu"), self._neuron(-v, "relu")
        return self._later(lambda o: o[i] + o[j])

    def min2(self, u, v) -> _Later:
        """min(u, v) = ((u+v) - |u-v|)/2 with four relu neurons."""
        s = self.carry(u + v)
        a = self.abs(u - v)
        return self._later(lambda o: 0.5 * (s._fn(o) - a._fn(o)))

    def square(self, v) -> _Later:
        """v^2 = relu(v)^2 + relu(-v)^2 with two squared-relu neurons."""
        i, j = self._neuron(v, "sq"), self._neuron(-v, "sq")
        return self._later(lambda o: o[i] + o[j])

    def product(self, u, v) -> _Later:
        """uv = ((u+v)^2 - (u-v)^2)/4 with four squared-relu neurons."""
        p, m = self.square(u + v), self.square(u - v)
        return self._later(lambda o: 0.25 * (p._fn(o) - m._fn(o)))


class _Builder:
    def __init__(self, d: int, kind: str):
        if kind not in ("relu", "sigma2"):
            raise ValueError(kind)
        self.d = d
        self.kind = kind
        self.level = 0
        self.width = d
        self.layers: list[tuple[np.ndarray, np.ndarray, list[str]]] = []

    def inputs(self) -> list[_Aff]:
        eye = np.eye(self.d)
        return [_Aff(eye[i], 0.0, 0) for i in range(self.d)]

    def const(self, c: float) -> _Aff:
        return _Aff(np.zeros(self.width), c, self.level)

    def plan(self) -> _Plan:
        return _Plan(self)

    def commit(self, plan: _Plan) -> None:
        if not plan.rows:
            raise ValueError("empty layer")
        W = np.array([a.coef for a, _ in plan.rows])
        b = np.array([a.const for a, _ in plan.rows])
        self.layers.append((W, b, [k for _, k in plan.rows]))
        self.level += 1
        self.width = len(plan.rows)
        eye = np.eye(self.width)
        outs = [_Aff(eye[i], 0.0, self.level) for i in range(self.width)]
        for h in plan.pending:
            h._outs = outs

    def finish(self, outputs: Sequence[_Aff]) -> tuple[NetworkSpec, np.ndarray]:
        if not self.layers:
            raise ValueError("a gadget needs at least one hidden layer")
        for o in outputs:
            if o.level != self.level:
                raise ValueError("output read from a stale layer")
        widths = tuple(W.shape[0] for W, _, _ in self.layers)
        act = "relu" if self.kind == "relu" else "sigma2"
        spec = NetworkSpec(self.d, widths, act, output_dim=len(outputs))
        params = []
        for W, b, kinds in self.layers:
            p = {"W": W, "b": b}
            if self.kind == "sigma2":
                p["act0"] = np.array([1.0 if k == "relu" else 0.0 for k in kinds])
                p["act1"] = np.array([0.0 if k == "relu" else 1.0 for k in kinds])
            params.append(p)
        params.append(
            {"W": np.array([o.coef for o in outputs]), "b": np.array([o.const for o in outputs])}
        )
        return spec, flatten(spec, params)


def _carry_all(plan: _Plan, xs: Sequence[_Aff]) -> list[_Later]:
    return [plan.carry(x) for x in xs]


# ---------------------------------------------------------------------------
# gadget container
# ---------------------------------------------------------------------------


@dataclass
class GadgetNet:
    name: str
    spec: NetworkSpec
    theta: np.ndarray
    width_budget: int
    depth_budget: int
    bound: float  # declared sup-error bound on ``domain``; 0 for exact gadgets
    oracle: Callable[[np.ndarray], np.ndarray]
    domain: tuple[float, float] | None = None  # box where ``bound`` applies; None = all of R^d
    params: dict = field(default_factory=dict)
    combine: str | None = None  # "product": multiply the outputs

    @property
    def exact(self) -> bool:
        return self.bound == 0.0

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def depth(self) -> int:
        return self.spec.depth

    def within_budget(self) -> bool:
        return self.width <= self.width_budget and self.depth <= self.depth_budget

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :] if self.input_dim > 1 else x[:, None]
        out = forward_batch(self.spec, self.theta, x)
        if self.combine == "product" and out.ndim == 2:
            return np.prod(out, axis=1)
        return out

    def checkpoint(self) -> dict:
        return checkpoint_dict(
            self.spec,
            self.theta,
            seed=0,
            epoch=0,
            gadget=self.name,
            gadget_params=self.params,
            combine=self.combine,
        )


def _gadget(builder, outputs, **kw) -> GadgetNet:
    spec, theta = builder.finish(outputs)
    return GadgetNet(spec=spec, theta=theta, **kw)


# ---------------------------------------------------------------------------
# sigma1 approximate gadgets: square and product
# ---------------------------------------------------------------------------


def _pwl_coefficients(values: np.ndarray) -> np.ndarray:
    """Weights c_j with f(u) = values[0] + sum_j c_j relu(u - j/M) on [0, 1].

    ``values`` are f at the M+1 nodes j/M.
    """
    M = len(values) - 1
    slopes = np.diff(values) * M
    return np.concatenate([[slopes[0]], np.diff(slopes)])


class _SquareProgram:
    """Approximates u0^2 for u0 in [0, 1], one layer at a time.

    With M teeth per layer, q(u) = u(1-u) splits as I_M q(u) + M^-2 q(z(u)),
    I_M the piecewise-linear interpolant on the grid j/M and z the zigzag
    folding [0,1] onto itself M times. Iterating gives
    u^2 = u - sum_k M^-2k I_M q(u_k) - M^-2L q(u_L).
    """

    def __init__(self, M: int, u0: _Aff):
        self.M = M
        self.u = u0
        self.S = u0
        self.k = 0
        nodes = np.arange(M + 1) / M
        self.cz = _pwl_coefficients((np.arange(M + 1) % 2).astype(np.float64))
        self.cq = _pwl_coefficients(nodes * (1.0 - nodes))

    def neurons(self, plan: _Plan):
        teeth = [plan.relu(self.u - j / self.M) for j in range(self.M)]
        carry = plan.carry_pos(self.S)
        return teeth, carry

    def advance(self, teeth, carry):
        t = [h.get() for h in teeth]
        z = sum((c * ti for c, ti in zip(self.cz, t)), 0.0 * t[0])
        iq = sum((c * ti for c, ti in zip(self.cq, t)), 0.0 * t[0])
        self.S = carry.get() - iq * float(self.M) ** (-2 * self.k)
        self.u = z
        self.k += 1


def sigma1_square(N: int, L: int) -> GadgetNet:
    """ReLU net of width 3N and depth L with |phi(x) - x^2| <= N^-L on [0, 1]."""
    if N < 1 or L < 1:
        raise ValueError("N and L must be >= 1")
    M = 3 * N - 1
    b = _Builder(1, "relu")
    prog = _SquareProgram(M, b.inputs()[0])
    for _ in range(L):
        plan = b.plan()
        teeth, carry = prog.neurons(plan)
        b.commit(plan)
        prog.advance(teeth, carry)
    return _gadget(
        b,
        [prog.S],
        name="sigma1_square",
        width_budget=3 * N,
        depth_budget=L,
        bound=float(N) ** (-L),
        oracle=lambda x: x[:, 0] ** 2,
        domain=(0.0, 1.0),
        params={"N": N, "L": L},
    )


def sigma1_product(N: int, L: int, a: float = 0.0, b_: float = 1.0) -> GadgetNet:
    """ReLU net of width 9N+1, depth L with |phi(x,y) - xy| <= 6 (b-a)^2 N^-L on [a,b]^2.

    With x = a + (b-a)x' and y = a + (b-a)y',
    xy = a^2 + a(b-a)(x'+y') + (b-a)^2 (2((x'+y')/2)^2 - x'^2/2 - y'^2/2),
    and the three squares run side by side.
    """
    a, b = float(a), float(b_)
    if not a < b:
        raise ValueError("need a < b")
    if N < 1 or L < 1:
        raise ValueError("N and L must be >= 1")
    M = 3 * N - 1
    bld = _Builder(2, "relu")
    x, y = bld.inputs()
    xs, ys = (x - a) / (b - a), (y - a) / (b - a)
    progs = [_SquareProgram(M, 0.5 * (xs + ys)), _SquareProgram(M, xs), _SquareProgram(M, ys)]
    total = xs + ys
    for _ in range(L):
        plan = bld.plan()
        parts = [p.neurons(plan) for p in progs]
        t_carry = plan.carry_pos(total)
        bld.commit(plan)
        for p, (teeth, carry) in zip(progs, parts):
            p.advance(teeth, carry)
        total = t_carry.get()
    sq_mid, sq_x, sq_y = (p.S for p in progs)
    out = a * a + a * (b - a) * total + (b - a) ** 2 * (2.0 * sq_mid - 0.5 * sq_x - 0.5 * sq_y)
    return _gadget(
        bld,
        [out],
        name="sigma1_product",
        width_budget=9 * N + 1,
        depth_budget=L,
        bound=6.0 * (b - a) ** 2 * float(N) ** (-L),
        oracle=lambda z: z[:, 0] * z[:, 1],
        domain=(a, b),
        params={"N": N, "L": L, "a": a, "b": b},
    )


# ---------------------------------------------------------------------------
# sigma1 exact gadgets: identity, min, spike, partition of unity
# ---------------------------------------------------------------------------


def identity(d: int, kind: str = "relu") -> GadgetNet:
    """x -> x on R^d with one hidden layer of 2d neurons."""
    b = _Builder(d, kind)
    plan = b.plan()
    hs = _carry_all(plan, b.inputs())
    b.commit(plan)
    return _gadget(
        b,
        [h.get() for h in hs],
        name=f"{'sigma1' if kind == 'relu' else 'sigma2'}_identity",
        width_budget=2 * d,
        depth_budget=1,
        bound=0.0,
        oracle=lambda x: x[:, 0] if x.shape[1] == 1 else x,
        params={"d": d, "kind": kind},
    )


def sigma1_min(n: int) -> GadgetNet:
    """Exact min of n reals: a chain of pairwise mins, width 2n, depth n-1."""
    if n < 2:
        raise ValueError("n must be >= 2")
    b = _Builder(n, "relu")
    xs = b.inputs()
    m = None
    rest = list(xs)
    while rest:
        plan = b.plan()
        if m is None:
            hm = plan.min2(rest[0], rest[1])
            rest = rest[2:]
        else:
            hm = plan.min2(m, rest[0])
            rest = rest[1:]
        hr = _carry_all(plan, rest)
        b.commit(plan)
        m = hm.get()
        rest = [h.get() for h in hr]
    return _gadget(
        b,
        [m],
        name="sigma1_min",
        width_budget=2 * n,
        depth_budget=n - 1,
        bound=0.0,
        oracle=lambda x: np.min(x, axis=1),
        params={"n": n},
    )


def spike_function(x: np.ndarray) -> np.ndarray:
    """max(0, min(min_{k!=s}(1 + x_k - x_s), min_k(1 + x_k), min_k(1 - x_k)))."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, :, None] - x[:, None, :]  # x_k - x_s
    d = x.shape[1]
    off = ~np.eye(d, dtype=bool)
    terms = [np.min(1.0 + x, axis=1), np.min(1.0 - x, axis=1)]
    if d > 1:
        terms.append(np.min((1.0 + diff)[:, off], axis=1))
    return np.maximum(0.0, np.minimum.reduce(terms))


class _MinStream:
    """Running minimum over a list of terms, one pairwise min per layer."""

    def __init__(self, terms: list[Callable[[list[_Aff]], _Aff]]):
        self.terms = list(terms)
        self.m: _Aff | None = None

    def step(self, plan: _Plan, xs: list[_Aff]) -> _Later:
        if self.m is None:
            t1, t2 = self.terms.pop(0), self.terms.pop(0)
            return plan.min2(t1(xs), t2(xs))
        return plan.min2(self.m, self.terms.pop(0)(xs))


def spike(d: int) -> GadgetNet:
    """Exact ReLU realization of the lattice spike function on R^d.

    Budget: width 12 + 2d, depth d^2 - d + 1. For d >= 3 three running-min
    streams (difference terms, 1 + x_k, 1 - x_k) advance in parallel next to
    a 2d-neuron copy of x; the two short streams merge at layer d.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    b = _Builder(d, "relu")
    xs = b.inputs()
    if d == 1:
        plan = b.plan()
        h = [plan.relu(xs[0] + 1.0), plan.relu(xs[0]), plan.relu(xs[0] - 1.0)]
        b.commit(plan)
        out = h[0].get() - 2.0 * h[1].get() + h[2].get()
    elif d == 2:
        # u = x1 - x2, s = x1 + x2:
        # phi = relu(1 - |u|/2 - (|u| + |s|)/4 - ||u| - |s||/4)
        plan = b.plan()
        au, as_ = plan.abs(xs[0] - xs[1]), plan.abs(xs[0] + xs[1])
        b.commit(plan)
        u, s = au.get(), as_.get()
        plan = b.plan()
        gap = plan.abs(u - s)
        cu, cs = plan.carry_pos(u), plan.carry_pos(s)
        b.commit(plan)
        u, s = cu.get(), cs.get()
        m = 1.0 - 0.5 * u - 0.25 * (u + s) - 0.25 * gap.get()
        plan = b.plan()
        h = plan.relu(m)
        b.commit(plan)
        out = h.get()
    else:
        pairs = [(k, s) for k in range(d) for s in range(d) if k != s]
        streams = {
            "A": _MinStream([lambda X, k=k, s=s: 1.0 + X[k] - X[s] for k, s in pairs]),
            "B": _MinStream([lambda X, k=k: 1.0 + X[k] for k in range(d)]),
            "C": _MinStream([lambda X, k=k: 1.0 - X[k] for k in range(d)]),
        }
        A, B, C = streams["A"], streams["B"], streams["C"]
        bc = None  # merged min of the B and C streams
        while True:
            plan = b.plan()
            pend = {key: st.step(plan, xs) for key, st in streams.items() if st.terms}
            final = bc_h = None
            if bc is None and not (B.terms or C.terms or "B" in pend or "C" in pend):
                bc_h = plan.min2(B.m, C.m)
                B.m = C.m = None
            elif bc is not None:
                if not A.terms and "A" not in pend:
                    final = plan.min2(A.m, bc)
                    A.m = None
                else:
                    bc_h = plan.carry(bc)
            for key, st in streams.items():
                if key not in pend and st.m is not None:
                    pend[key] = plan.carry(st.m)
            hx = _carry_all(plan, xs) if any(st.terms for st in streams.values()) else []
            b.commit(plan)
            if final is not None:
                m = final.get()
                break
            for key, h in pend.items():
                streams[key].m = h.get()
            if bc_h is not None:
                bc = bc_h.get()
            xs = [h.get() for h in hx]
        plan = b.plan()
        h = plan.relu(m)
        b.commit(plan)
        out = h.get()
    return _gadget(
        b,
        [out],
        name="spike",
        width_budget=12 + 2 * d,
        depth_budget=d * d - d + 1,
        bound=0.0,
        oracle=spike_function,
        params={"d": d},
    )


def psi(y):
    """Trapezoid: 1 on |y| <= 1, 0 on |y| >= 2, linear in between."""
    y = np.asarray(y, dtype=np.float64)
    return np.clip(2.0 - np.abs(y), 0.0, 1.0)


def pu_function(k: Sequence[int], K: int):
    k = np.asarray(k, dtype=np.float64)

    def phi(x):
        return np.prod(psi(3.0 * K * (np.asarray(x) - k / K)), axis=1)

    return phi


def _psi_factor(plan: _Plan, x: _Aff, center: float, K: int):
    y = 3.0 * K * (x - center)
    h = [plan.relu(y + 2.0), plan.relu(y + 1.0), plan.relu(y - 1.0), plan.relu(y - 2.0)]
    return lambda: h[0].get() - h[1].get() - h[2].get() + h[3].get()


def partition_of_unity(d: int, K: int, form: str = "sigma1") -> list[GadgetNet]:
    """(K+1)^d bumps phi_k(x) = prod_l psi(3K(x_l - k_l/K)), k in {0..K}^d.

    ``form="sigma1"``: one hidden ReLU layer with 4d neurons and d outputs,
    the factors, multiplied by the caller (``combine="product"``).
    ``form="sigma2"``: a single network; factors as above, then a binary
    tree of exact four-neuron products.
    """
    if d < 1 or K < 1:
        raise ValueError("d and K must be >= 1")
    if form not in ("sigma1", "sigma2"):
        raise ValueError("form must be 'sigma1' or 'sigma2'")
    nets = []
    for k in itertools.product(range(K + 1), repeat=d):
        b = _Builder(d, "relu" if form == "sigma1" else "sigma2")
        xs = b.inputs()
        plan = b.plan()
        fac = [_psi_factor(plan, xs[l], k[l] / K, K) for l in range(d)]
        b.commit(plan)
        vals = [f() for f in fac]
        params = {"d": d, "K": K, "k": list(k), "form": form}
        if form == "sigma1":
            nets.append(
                _gadget(
                    b,
                    vals,
                    name="pu_sigma1",
                    width_budget=6 * d,
                    depth_budget=1,
                    bound=0.0,
                    oracle=pu_function(k, K),
                    params=params,
                    combine="product",
                )
            )
            continue
        while len(vals) > 1:
            plan = b.plan()
            hs = [plan.product(vals[i], vals[i + 1]) for i in range(0, len(vals) - 1, 2)]
            if len(vals) % 2:
                hs.append(plan.carry_pos(vals[-1]))  # factors are >= 0
            b.commit(plan)
            vals = [h.get() for h in hs]
        nets.append(
            _gadget(
                b,
                vals,
                name="pu_sigma2",
                width_budget=max(4, 2 * d),
                depth_budget=1 + math.ceil(math.log2(d)),
                bound=0.0,
                oracle=pu_function(k, K),
                params=params,
            )
        )
    return nets


# ---------------------------------------------------------------------------
# sigma2 exact gadgets
# ---------------------------------------------------------------------------


def sigma2_square() -> GadgetNet:
    b = _Builder(1, "sigma2")
    plan = b.plan()
    h = plan.square(b.inputs()[0])
    b.commit(plan)
    return _gadget(
        b, [h.get()], name="sigma2_square", width_budget=2, depth_budget=1, bound=0.0,
        oracle=lambda x: x[:, 0] ** 2,
    )


def sigma2_product() -> GadgetNet:
    b = _Builder(2, "sigma2")
    x, y = b.inputs()
    plan = b.plan()
    h = plan.product(x, y)
    b.commit(plan)
    return _gadget(
        b, [h.get()], name="sigma2_product", width_budget=4, depth_budget=1, bound=0.0,
        oracle=lambda z: z[:, 0] * z[:, 1],
    )


def _check_alpha(alpha) -> tuple[int, ...]:
    alpha = tuple(int(a) for a in alpha)
    if not alpha or min(alpha) < 0:
        raise ValueError("alpha must be a nonempty multi-index of nonnegative integers")
    return alpha


def monomial_oracle(alpha):
    alpha = np.asarray(alpha)

    def P(x):
        return np.prod(np.asarray(x, dtype=np.float64) ** alpha, axis=1)

    return P


class _MonomialProgram:
    """Exact x^alpha with N accumulators, laid out layer by layer.

    Layer 1 gives each accumulator up to two factors, later layers one
    each; a dyadic tree of products then merges the accumulators. Values
    still affine in x (1 or a lone factor) are kept symbolic and rebuilt
    from the copy of x that travels alongside.
    """

    def __init__(self, alpha, N):
        self.factors = [i for i, a in enumerate(alpha) for _ in range(a)]
        self.N = N
        # slots: ("one", None) | ("x", i) | ("val", _Aff)
        self.acc: list[tuple[str, object]] = [("one", None)] * N
        self.first = True
        self.phase = "absorb"
        if len(self.factors) <= 1:
            if self.factors:
                self.acc[0] = ("x", self.factors.pop())
            self.phase = "done"

    @property
    def done(self) -> bool:
        return self.phase == "done"

    @staticmethod
    def _value(slot, xs, b: _Builder) -> _Aff:
        kind, v = slot
        if kind == "one":
            return b.const(1.0)
        if kind == "x":
            return xs[v]
        return v

    def value(self, xs, b: _Builder) -> _Aff:
        return self._value(self.acc[0], xs, b)

    def step(self, plan: _Plan, xs, b: _Builder) -> Callable[[], None]:
        """Add one layer of neurons; the returned callback reads them back after commit."""
        new: list[tuple[str, object]] = []
        if self.phase == "absorb":
            take = 2 if self.first else 1
            self.first = False
            for slot in self.acc:
                got = [self.factors.pop(0) for _ in range(min(take, len(self.factors)))]
                kind = slot[0]
                if not got:
                    new.append(("h", plan.carry(slot[1])) if kind == "val" else slot)
                elif kind == "one" and len(got) == 1:
                    new.append(("x", got[0]))
                elif kind == "one":
                    new.append(("h", plan.product(xs[got[0]], xs[got[1]])))
                else:
                    new.append(("h", plan.product(self._value(slot, xs, b), xs[got[0]])))
            if not self.factors:
                self.phase = "tree"
        else:
            vals = [self._value(s_, xs, b) for s_ in self.acc if s_[0] != "one"]
            for i in range(0, len(vals) - 1, 2):
                new.append(("h", plan.product(vals[i], vals[i + 1])))
            if len(vals) % 2:
                new.append(("h", plan.carry(vals[-1])))

        def read():
            acc = [("val", v.get()) if k == "h" else (k, v) for k, v in new]
            self.acc = acc + [("one", None)] * (self.N - len(acc))
            if self.phase == "tree" and sum(1 for s_ in self.acc if s_[0] != "one") <= 1:
                self.phase = "done"

        return read


def _monomial_budget_ok(k: int, N: int, L: int) -> bool:
    return N * L + 2 ** int(math.floor(math.log2(N))) >= k


def sigma2_monomial(alpha, N: int, L: int) -> GadgetNet:
    """Exact x^alpha with width 4N + 2d and depth L + ceil(log2 N).

    Requires N L + 2^floor(log2 N) >= |alpha|.
    """
    alpha = _check_alpha(alpha)
    if N < 1 or L < 1:
        raise ValueError("N and L must be >= 1")
    d, k = len(alpha), sum(alpha)
    if not _monomial_budget_ok(k, N, L):
        raise ValueError(f"N L + 2^floor(log2 N) = {N * L + 2 ** int(math.log2(N))} < |alpha| = {k}")
    b = _Builder(d, "sigma2")
    xs = b.inputs()
    prog = _MonomialProgram(alpha, N)
    while True:
        plan = b.plan()
        read = None if prog.done else prog.step(plan, xs, b)
        hx = _carry_all(plan, xs)
        b.commit(plan)
        xs = [h.get() for h in hx]
        if read is not None:
            read()
        if prog.done:
            break
    out = prog.value(xs, b)
    return _gadget(
        b,
        [out],
        name="sigma2_monomial",
        width_budget=4 * N + 2 * d,
        depth_budget=L + math.ceil(math.log2(N)),
        bound=0.0,
        oracle=monomial_oracle(alpha),
        params={"alpha": list(alpha), "N": N, "L": L},
    )


def polynomial_oracle(terms):
    def P(x):
        x = np.asarray(x, dtype=np.float64)
        return sum(c * np.prod(x ** np.asarray(a), axis=1) for c, a in terms)

    return P


def sigma2_polynomial(terms, N: int, L: int, a: int, b_: int) -> GadgetNet:
    """Exact sum_j c_j x^alpha_j with width 4Na + 2d + 2 and depth L.

    Requires a b >= J and (L - 2b - b log2 N) N >= b max_j |alpha_j|. The
    J monomials are laid out in b columns of at most a blocks; columns run
    one after another, each adding its monomials into a running sum that a
    two-neuron identity carries forward.
    """
    terms = [(float(c), _check_alpha(al)) for c, al in terms]
    if not terms:
        raise ValueError("need at least one term")
    d = len(terms[0][1])
    if any(len(al) != d for _, al in terms):
        raise ValueError("all multi-indices must have the same length")
    if min(N, L, a, b_) < 1:
        raise ValueError("N, L, a, b must be >= 1")
    J = len(terms)
    kmax = max(sum(al) for _, al in terms)
    if a * b_ < J:
        raise ValueError(f"a b = {a * b_} < J = {J}")
    if (L - 2 * b_ - b_ * math.log2(N)) * N < b_ * kmax:
        raise ValueError("(L - 2b - b log2 N) N < b max|alpha|")
    bld = _Builder(d, "sigma2")
    xs = bld.inputs()
    total = bld.const(0.0)  # running sum, affine in the current layer
    for start in range(0, J, a):
        progs = [(c, _MonomialProgram(al, N)) for c, al in terms[start : start + a]]
        for c, p in progs:
            if p.done:
                total = total + c * p.value(xs, bld)
        live = [(c, p) for c, p in progs if not p.done]
        while live:
            plan = bld.plan()
            reads = [p.step(plan, xs, bld) for _, p in live]
            hx = _carry_all(plan, xs)
            hs = plan.carry(total)
            bld.commit(plan)
            xs = [h.get() for h in hx]
            total = hs.get()
            for r in reads:
                r()
            for c, p in live:
                if p.done:
                    total = total + c * p.value(xs, bld)
            live = [(c, p) for c, p in live if not p.done]
    if bld.level == 0:
        # only constant and linear terms: one identity layer for the sum
        plan = bld.plan()
        hs = plan.carry(total)
        bld.commit(plan)
        total = hs.get()
    return _gadget(
        bld,
        [total],
        name="sigma2_polynomial",
        width_budget=4 * N * a + 2 * d + 2,
        depth_budget=L,
        bound=0.0,
        oracle=polynomial_oracle(terms),
        params={"terms": [[c, list(al)] for c, al in terms], "N": N, "L": L, "a": a, "b": b_},
    )


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def sample_points(g: GadgetNet, n_grid: int = 10_001, n_mc: int = 100_000, seed: int = 0, span: float = 2.0) -> np.ndarray:
    """Grid (d <= 2) or Monte-Carlo (d > 2) points on the gadget's domain.

    In 2-D the grid has ``isqrt(n_grid * 100)`` points per axis. Exact
    gadgets without a domain are probed on [-span, span]^d.
    """
    lo, hi = g.domain if g.domain is not None else (-span, span)
    d = g.input_dim
    if d == 1:
        return np.linspace(lo, hi, n_grid)[:, None]
    if d == 2:
        t = np.linspace(lo, hi, math.isqrt(n_grid * 100))
        X, Y = np.meshgrid(t, t, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])
    return np.random.default_rng(seed).uniform(lo, hi, (n_mc, d))


def measured_error(g: GadgetNet, x: np.ndarray, relative: bool = False) -> float:
    """Max |phi - oracle|; ``relative`` divides by max(1, |oracle|)."""
    ref = g.oracle(x)
    err = np.abs(g(x) - ref)
    if relative:
        err = err / np.maximum(1.0, np.abs(ref))
    return float(np.max(err, initial=0.0))


def verify(g: GadgetNet, x: np.ndarray | None = None, exact_tol: float = 1e-12) -> dict:
    """Bound and budget report for one gadget."""
    if x is None:
        x = sample_points(g)
    err = measured_error(g, x, relative=g.exact)
    limit = exact_tol if g.exact else g.bound
    return {
        "gadget": g.name,
        "params": g.params,
        "bound": g.bound,
        "measured_error": err,
        "error_ok": bool(err <= limit),
        "width": g.width,
        "depth": g.depth,
        "width_budget": g.width_budget,
        "depth_budget": g.depth_budget,
        "budget_ok": g.within_budget(),
        "points": int(len(x)),
    }


BUILDERS = {
    "sigma1_square": sigma1_square,
    "sigma1_product": sigma1_product,
    "sigma1_min": sigma1_min,
    "spike": spike,
    "sigma2_square": sigma2_square,
    "sigma2_product": sigma2_product,
    "sigma2_monomial": sigma2_monomial,
    "sigma2_polynomial": sigma2_polynomial,
    "identity": identity,
}
