"""Fully connected and residual networks with optional boundary ansatz.

Parameters live in one flat float64 vector. ``NetworkSpec.layout`` maps
each weight matrix, bias and activation-parameter vector to a slice of it.

The forward pass can carry, next to the values, first and pure second
derivatives along every input axis (Taylor streams). Input Laplacians and
the parameter derivatives of PDE residuals are built from those streams in
:mod:`ned.deriv`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _relu(z):
    return np.maximum(z, 0.0)


def _step(z):
    return (z > 0.0).astype(np.float64)


def _basis(name: str, z: np.ndarray, k: int) -> list[np.ndarray]:
    """k-th derivative of each basis function of activation ``name``.

    Parametric activations are linear in their parameters,
    ``sigma = a * phi_a(z) + b * phi_b(z)``; the list has one entry per
    basis function. relu derivatives at 0 are taken to be 0.
    """
    if name == "relu":
        if k == 0:
            return [_relu(z)]
        return [_step(z) if k == 1 else np.zeros_like(z)]
    if name == "relu3":
        if k == 3:
            return [6.0 * _step(z)]
        r = _relu(z)
        return [r**3 if k == 0 else 3.0 * r * r if k == 1 else 6.0 * r]
    if name == "sigma2":
        # phi_b(z) = z * max(z, 0) = max(z, 0)**2
        if k == 0:
            r = _relu(z)
            return [r, r * r]
        if k == 1:
            return [_step(z), 2.0 * _relu(z)]
        if k == 2:
            return [np.zeros_like(z), 2.0 * _step(z)]
        return [np.zeros_like(z), np.zeros_like(z)]
    if name == "relu_plus_sin":
        a = _relu(z) if k == 0 else _step(z) if k == 1 else np.zeros_like(z)
        b = (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t))[k](z)
        return [a, b]
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class ActivationInfo:
    name: str
    n_params: int
    init: tuple[float, ...]
    # usable where input Laplacians are taken
    second_order: bool
    # has a relu kink somewhere
    kinked: bool


ACTIVATIONS = {
    "relu": ActivationInfo("relu", 0, (), False, True),
    "relu3": ActivationInfo("relu3", 0, (), True, False),
    "sigma2": ActivationInfo("sigma2", 2, (1.0, 1.0), True, True),
    "relu_plus_sin": ActivationInfo("relu_plus_sin", 2, (1.0, 0.0), False, True),
}


def activation_derivs(name: str, z: np.ndarray, coefs: Sequence[np.ndarray] | None, upto: int):
    """Return ``[sigma(z), sigma'(z), ...]`` up to derivative order ``upto``."""
    out = []
    for k in range(upto + 1):
        parts = _basis(name, z, k)
        if coefs is None:
            out.append(parts[0])
        else:
            out.append(sum(c * p for c, p in zip(coefs, parts)))
    return out


# ---------------------------------------------------------------------------
# boundary-conforming ansatz
# ---------------------------------------------------------------------------


def _box_bump(x: np.ndarray):
    """P(x) = prod_i x_i (1 - x_i) with its gradient and pure second partials."""
    q = x * (1.0 - x)
    dq = 1.0 - 2.0 * x
    m, d = x.shape
    # products over j != i without dividing by q (q vanishes on the faces)
    left = np.ones((m, d))
    right = np.ones((m, d))
    for i in range(1, d):
        left[:, i] = left[:, i - 1] * q[:, i - 1]
        right[:, d - 1 - i] = right[:, d - i] * q[:, d - i]
    others = left * right
    p = others[:, 0] * q[:, 0]
    return p, others * dq, -2.0 * others


@dataclass(frozen=True)
class AnsatzSpec:
    """U(x) = L_D(x) N(x) + lift(x), with L_D = 0 and lift = h on the boundary.

    kind ``"interval"``: L_D = (x - lo)(hi - x), lift interpolates the two
    endpoint values linearly.
    kind ``"unit_box"``: L_D = prod x_i (1 - x_i) on [0,1]^d, lift =
    base(x) + sin(2 pi sum x) L_D(x) where base is ``half_normsq``
    (0.5 |x|^2) or ``one``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("interval", "unit_box"):
            raise ValueError(f"unknown ansatz kind {self.kind!r}")
        if self.kind == "unit_box" and self.params.get("base", "one") not in ("one", "half_normsq"):
            raise ValueError("unit_box base must be 'one' or 'half_normsq'")

    def __hash__(self):
        return hash((self.kind, json.dumps(self.params, sort_keys=True)))

    def distance(self, x: np.ndarray):
        """(L_D, grad L_D, pure second partials of L_D) at rows of ``x``."""
        if self.kind == "interval":
            lo, hi = self.params["lo"], self.params["hi"]
            t = x[:, 0]
            val = (t - lo) * (hi - t)
            grad = (hi + lo - 2.0 * t)[:, None]
            return val, grad, np.full_like(grad, -2.0)
        return _box_bump(x)

    def boundary_value(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "interval":
            lo, hi = self.params["lo"], self.params["hi"]
            ya, yb = self.params["left"], self.params["right"]
            return ya + (yb - ya) * (x[:, 0] - lo) / (hi - lo)
        if self.params.get("base", "one") == "half_normsq":
            return 0.5 * np.sum(x * x, axis=1)
        return np.ones(x.shape[0])

    def lift(self, x: np.ndarray):
        """(lift value, Laplacian of lift)."""
        if self.kind == "interval":
            return self.boundary_value(x), np.zeros(x.shape[0])
        d = x.shape[1]
        base = self.boundary_value(x)
        base_lap = float(d) if self.params.get("base", "one") == "half_normsq" else 0.0
        if not self.params.get("bump", True):
            return base, np.full(x.shape[0], base_lap)
        p, dp, d2p = _box_bump(x)
        arg = 2.0 * np.pi * np.sum(x, axis=1)
        s, c = np.sin(arg), np.cos(arg)
        w = 2.0 * np.pi
        lap = (-(w * w) * d * s * p) + 2.0 * w * c * np.sum(dp, axis=1) + s * np.sum(d2p, axis=1)
        return base + s * p, base_lap + lap

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnsatzSpec":
        return cls(d["kind"], dict(d.get("params", {})))


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    act: str | None
    save: bool = False  # remember the input for a skip connection
    add: bool = False  # add the remembered input after the activation


@dataclass(frozen=True)
class Slot:
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``arch="fnn"``: hidden layers of ``widths`` with ``activation`` (one name
    or one per layer), then an affine output layer.
    ``arch="resnet"``: linear embedding to ``block_width``, then ``blocks``
    blocks of two dense layers with an identity skip added after the second
    activation, then an affine output layer.
    """

    input_dim: int
    widths: tuple[int, ...] = ()
    activation: str | tuple[str, ...] = "relu"
    arch: str = "fnn"
    blocks: int = 0
    block_width: int = 0
    output_dim: int = 1
    ansatz: AnsatzSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if isinstance(self.activation, list):
            object.__setattr__(self, "activation", tuple(self.activation))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be >= 1")
        if self.arch == "fnn":
            if not self.widths or min(self.widths) < 1:
                raise ValueError("fnn needs at least one hidden layer, all widths >= 1")
            if isinstance(self.activation, tuple) and len(self.activation) != len(self.widths):
                raise ValueError("one activation per hidden layer expected")
        elif self.arch == "resnet":
            if self.blocks < 1 or self.block_width < 1:
                raise ValueError("resnet needs blocks >= 1 and block_width >= 1")
        else:
            raise ValueError(f"unknown arch {self.arch!r}")
        for a in self._acts():
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.ansatz is not None and self.output_dim != 1:
            raise ValueError("an ansatz needs a scalar network")

    def _acts(self) -> tuple[str, ...]:
        n = len(self.widths) if self.arch == "fnn" else self.blocks * 2
        if isinstance(self.activation, tuple):
            return self.activation
        return (self.activation,) * n

    @cached_property
    def layers(self) -> tuple[Layer, ...]:
        acts = self._acts()
        out: list[Layer] = []
        if self.arch == "fnn":
            prev = self.input_dim
            for w, a in zip(self.widths, acts):
                out.append(Layer(prev, w, a))
                prev = w
            out.append(Layer(prev, self.output_dim, None))
        else:
            w = self.block_width
            out.append(Layer(self.input_dim, w, None))
            for k in range(self.blocks):
                out.append(Layer(w, w, acts[2 * k], save=True))
                out.append(Layer(w, w, acts[2 * k + 1], add=True))
            out.append(Layer(w, self.output_dim, None))
        return tuple(out)

    @cached_property
    def layout(self) -> tuple[dict[str, Slot], ...]:
        slots = []
        off = 0
        for layer in self.layers:
            entry = {"W": Slot(off, (layer.out_dim, layer.in_dim))}
            off += layer.out_dim * layer.in_dim
            entry["b"] = Slot(off, (layer.out_dim,))
            off += layer.out_dim
            if layer.act is not None:
                for k in range(ACTIVATIONS[layer.act].n_params):
                    entry[f"act{k}"] = Slot(off, (layer.out_dim,))
                    off += layer.out_dim
            slots.append(entry)
        return tuple(slots)

    @property
    def n_params(self) -> int:
        last = self.layout[-1]
        return max(s.offset + s.size for s in last.values())

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers if layer.act is not None]

    @property
    def depth(self) -> int:
        """Number of hidden (activated) layers."""
        return len(self.hidden_widths)

    @property
    def width(self) -> int:
        return max(self.hidden_widths, default=0)

    def supports_laplacian(self) -> bool:
        return all(ACTIVATIONS[a].second_order for a in self._acts())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activation": list(self.activation) if isinstance(self.activation, tuple) else self.activation,
            "arch": self.arch,
            "blocks": self.blocks,
            "block_width": self.block_width,
            "output_dim": self.output_dim,
            "ansatz": None if self.ansatz is None else self.ansatz.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        if d.get("ansatz") is not None:
            d["ansatz"] = AnsatzSpec.from_dict(d["ansatz"])
        act = d.get("activation", "relu")
        d["activation"] = tuple(act) if isinstance(act, list) else act
        d["widths"] = tuple(d.get("widths", ()))
        return cls(**d)


def unflatten(spec: NetworkSpec, theta: np.ndarray) -> list[dict[str, np.ndarray]]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({spec.n_params},)")
    return [
        {k: theta[s.offset : s.offset + s.size].reshape(s.shape) for k, s in entry.items()}
        for entry in spec.layout
    ]


def flatten(spec: NetworkSpec, params: Sequence[dict[str, np.ndarray]]) -> np.ndarray:
    theta = np.empty(spec.n_params)
    for entry, p in zip(spec.layout, params):
        for k, s in entry.items():
            theta[s.offset : s.offset + s.size] = np.asarray(p[k], dtype=np.float64).ravel()
    return theta


def init_params(spec: NetworkSpec, seed: int, mode: str = "scaled") -> np.ndarray:
    """Uniform(-c, c) weights and biases, c depending on the layer fan-in.

    ``scaled``: c = 1/sqrt(fan_in). ``paper_literal``: c = sqrt(fan_in).
    Trainable activation parameters start at their fixed defaults.
    """
    if mode not in ("scaled", "paper_literal"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    theta = np.empty(spec.n_params)
    for layer, entry in zip(spec.layers, spec.layout):
        c = math.sqrt(layer.in_dim) if mode == "paper_literal" else 1.0 / math.sqrt(layer.in_dim)
        for key in ("W", "b"):
            s = entry[key]
            theta[s.offset : s.offset + s.size] = rng.uniform(-c, c, size=s.size)
        if layer.act is not None:
            for k, v in enumerate(ACTIVATIONS[layer.act].init):
                s = entry[f"act{k}"]
                theta[s.offset : s.offset + s.size] = v
    return theta


# ---------------------------------------------------------------------------
# forward propagation
# ---------------------------------------------------------------------------


@dataclass
class Streams:
    """Values ``v`` (m, w); first ``g`` and pure second ``s`` input derivatives (m, d, w)."""

    v: np.ndarray
    g: np.ndarray | None = None
    s: np.ndarray | None = None

    def __add__(self, other: "Streams") -> "Streams":
        if self.g is None:
            return Streams(self.v + other.v)
        return Streams(self.v + other.v, self.g + other.g, self.s + other.s)


@dataclass
class TapeEntry:
    inp: Streams
    z: Streams
    derivs: list[np.ndarray] | None  # sigma^(k)(z), k = 0..3 (0..1 without Taylor streams)
    coefs: list[np.ndarray] | None
    W: np.ndarray | None = None


def _as_points(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if spec.input_dim > 1 or x.size == 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"points have shape {x.shape}, expected (m, {spec.input_dim})")
    return x


def propagate(spec: NetworkSpec, theta, x, taylor: bool = False, tape: list | None = None) -> Streams:
    """Run the raw network (no ansatz) on the rows of ``x``.

    With ``taylor`` the returned streams also hold first and pure second
    derivatives with respect to every input coordinate. When ``tape`` is a
    list, per-layer intermediates are appended for a reverse sweep.
    """
    params = unflatten(spec, theta)
    x = _as_points(spec, x)
    m, d = x.shape
    if taylor:
        g0 = np.broadcast_to(np.eye(d), (m, d, d))
        cur = Streams(x, g0, np.zeros((m, d, d)))
    else:
        cur = Streams(x)
    saved = None
    for layer, p in zip(spec.layers, params):
        if layer.save:
            saved = cur
        W, b = p["W"], p["b"]
        z = Streams(cur.v @ W.T + b)
        if taylor:
            z.g = cur.g @ W.T
            z.s = cur.s @ W.T
        if layer.act is None:
            out, derivs, coefs = z, None, None
        else:
            n_act = ACTIVATIONS[layer.act].n_params
            coefs = [p[f"act{k}"] for k in range(n_act)] or None
            derivs = activation_derivs(layer.act, z.v, coefs, 3 if taylor else 1 if tape is not None else 0)
            out = Streams(derivs[0])
            if taylor:
                s1 = derivs[1][:, None, :]
                s2 = derivs[2][:, None, :]
                out.g = s1 * z.g
                out.s = s2 * z.g * z.g + s1 * z.s
        if tape is not None:
            tape.append(TapeEntry(cur, z, derivs, coefs, W))
        if layer.add:
            out = out + saved
        cur = out
    return cur


def forward_batch(spec: NetworkSpec, theta, x) -> np.ndarray:
    """U(x; theta) at every row of ``x``; shape (m,) for scalar networks."""
    x = _as_points(spec, x)
    out = propagate(spec, theta, x).v
    if spec.output_dim == 1:
        out = out[:, 0]
    if spec.ansatz is not None:
        ld, _, _ = spec.ansatz.distance(x)
        lift, _ = spec.ansatz.lift(x)
        out = ld * out + lift
    return out


def forward(spec: NetworkSpec, theta, x):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"point has dimension {x.shape[1]}, expected {spec.input_dim}")
    out = forward_batch(spec, theta, x)
    return float(out[0]) if spec.output_dim == 1 else out[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_dict(spec: NetworkSpec, theta, seed: int, epoch: int, **extra: Any) -> dict:
    theta = np.asarray(theta, dtype=np.float64)
    layout = [
        {k: {"offset": s.offset, "shape": list(s.shape)} for k, s in entry.items()} for entry in spec.layout
    ]
    doc = {
        "spec": spec.to_dict(),
        "layout": layout,
        "params": [float(v) for v in theta],
        "seed": int(seed),
        "epoch": int(epoch),
    }
    doc.update(extra)
    return doc


def save_checkpoint(path, spec: NetworkSpec, theta, seed: int, epoch: int, **extra: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(spec, theta, seed, epoch, **extra), indent=1))
    return path


def load_checkpoint(path) -> tuple[NetworkSpec, np.ndarray, dict]:
    doc = json.loads(Path(path).read_text())
    spec = NetworkSpec.from_dict(doc["spec"])
    theta = np.array(doc["params"], dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ValueError("checkpoint parameter count does not match its spec")
    return spec, theta, doc
