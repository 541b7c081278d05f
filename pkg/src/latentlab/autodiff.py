"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records a closed primitive set -- matmul, add (plus bias-add
over batch rows, the only broadcasting allowed), hadamard, scalar-scale,
square, exp, log, tanh, relu, softplus, and a full reduce-sum -- and replays
exact vector-Jacobian products in reverse order.  Nodes are appended in
evaluation order, so the tape is topologically sorted by construction and the
backward pass visits each node exactly once.  Every primitive checks its
output for NaN/Inf and raises instead of propagating silently.

The same primitives are enough to express feed-forward networks
(:class:`Mlp`) and the Gaussian VAE objectives built on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

ACTIVATIONS = ("tanh", "relu", "softplus", "identity")


class AutodiffError(RuntimeError):
    """Shape violation, illegal primitive use, or tape misuse."""


class NonFiniteError(AutodiffError):
    """A primitive produced NaN or Inf."""


class TapeConsumedError(AutodiffError):
    """backward() was called twice on the same tape."""


class Tensor:
    """Dense row-major float64 array with a finiteness guarantee."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.values = arr

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Recorded computation; single-use, confined to one thread."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple] = []
        self._leaves: list[int] = []
        self._consumed = False
        # populated by forward() so backward() can map grads to the net
        self.input_ref: int | None = None
        self.layer_refs: list[tuple[int, int]] = []
        self.output_ref: int | None = None

    def __len__(self):
        return len(self._values)

    def value(self, ref: int) -> np.ndarray:
        return self._values[ref]

    def _emit(self, value, parents, vjps, op: str) -> int:
        self._values.append(_finite(np.asarray(value, dtype=np.float64), op))
        self._parents.append(parents)
        self._vjps.append(vjps)
        return len(self._values) - 1

    def leaf(self, value) -> int:
        """Register an input/parameter/constant; grads flow back to leaves."""
        ref = self._emit(value, (), (), "leaf")
        self._leaves.append(ref)
        return ref

    # -- primitives --------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise AutodiffError(
                f"matmul shapes incompatible: {va.shape} @ {vb.shape}"
            )
        return self._emit(
            va @ vb,
            (a, b),
            (lambda g, vb=vb: g @ vb.T, lambda g, va=va: va.T @ g),
            "matmul",
        )

    def add(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        if va.shape == vb.shape:
            return self._emit(
                va + vb, (a, b), (lambda g: g, lambda g: g), "add"
            )
        if va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
            # bias-add over batch rows: the only permitted broadcast
            return self._emit(
                va + vb,
                (a, b),
                (lambda g: g, lambda g: g.sum(axis=0)),
                "add",
            )
        raise AutodiffError(f"add shapes incompatible: {va.shape} + {vb.shape}")

    def hadamard(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        if va.shape != vb.shape:
            raise AutodiffError(
                f"hadamard shapes differ: {va.shape} vs {vb.shape}"
            )
        return self._emit(
            va * vb,
            (a, b),
            (lambda g, vb=vb: g * vb, lambda g, va=va: g * va),
            "hadamard",
        )

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        return self._emit(
            self._values[a] * c, (a,), (lambda g: g * c,), "scale"
        )

    def square(self, a: int) -> int:
        va = self._values[a]
        return self._emit(
            va * va, (a,), (lambda g, va=va: 2.0 * va * g,), "square"
        )

    def exp(self, a: int) -> int:
        out = np.exp(self._values[a])
        return self._emit(out, (a,), (lambda g, out=out: out * g,), "exp")

    def log(self, a: int) -> int:
        va = self._values[a]
        return self._emit(
            np.log(va), (a,), (lambda g, va=va: g / va,), "log"
        )

    def tanh(self, a: int) -> int:
        out = np.tanh(self._values[a])
        return self._emit(
            out, (a,), (lambda g, out=out: (1.0 - out * out) * g,), "tanh"
        )

    def relu(self, a: int) -> int:
        va = self._values[a]
        mask = va > 0  # subgradient at 0 is 0
        return self._emit(
            va * mask, (a,), (lambda g, mask=mask: g * mask,), "relu"
        )

    def softplus(self, a: int) -> int:
        va = self._values[a]
        return self._emit(
            np.logaddexp(0.0, va),
            (a,),
            (lambda g, va=va: _sigmoid(va) * g,),
            "softplus",
        )

    def reduce_sum(self, a: int) -> int:
        va = self._values[a]
        return self._emit(
            np.asarray(np.sum(va)),
            (a,),
            (lambda g, shape=va.shape: np.broadcast_to(g, shape).copy(),),
            "reduce_sum",
        )

    def identity(self, a: int) -> int:
        """No-op activation; kept so layer application is uniform."""
        return a

    # -- reverse pass ------------------------------------------------------

    def gradients(self, ref: int, output_grad) -> dict[int, np.ndarray]:
        """Reverse-mode grads of node ``ref`` w.r.t. every leaf.

        Consumes the tape: a second call raises TapeConsumedError.
        Unreached leaves get zero gradients.
        """
        if self._consumed:
            raise TapeConsumedError("tape was already consumed by backward()")
        self._consumed = True
        out_val = self._values[ref]
        grad_seed = np.asarray(output_grad, dtype=np.float64)
        if grad_seed.shape != out_val.shape:
            raise AutodiffError(
                f"output_grad shape {grad_seed.shape} does not match "
                f"output shape {out_val.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[ref] = grad_seed
        for node in range(ref, -1, -1):
            g = grads[node]
            if g is None:
                continue
            for parent, vjp in zip(self._parents[node], self._vjps[node]):
                contribution = vjp(g)
                if grads[parent] is None:
                    grads[parent] = contribution
                else:
                    grads[parent] = grads[parent] + contribution
        return {
            leaf: (
                grads[leaf]
                if grads[leaf] is not None
                else np.zeros_like(self._values[leaf])
            )
            for leaf in self._leaves
        }


@dataclass
class Layer:
    """Affine map plus activation: x @ weights + bias, then the activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise AutodiffError("layer weights must be (in, out), bias (out,)")
        if self.activation not in ACTIVATIONS:
            raise AutodiffError(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    """Feed-forward stack of layers with chained dimensions."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.weights.shape[1] != cur.weights.shape[0]:
                raise AutodiffError("consecutive layer dimensions must chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


def init_mlp(dims, activations, rand: Rng) -> Mlp:
    """Layers with weights i.i.d. N(0, 1/fan_in) and zero biases."""
    dims = list(dims)
    activations = list(activations)
    if len(activations) != len(dims) - 1:
        raise AutodiffError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        w = rand.normal((fan_in, fan_out)) / math.sqrt(fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def apply_mlp(net: Mlp, batch: np.ndarray) -> np.ndarray:
    """Plain forward pass without a tape (evaluation-only path)."""
    h = np.asarray(batch, dtype=np.float64)
    for layer in net.layers:
        h = h @ layer.weights + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(h)
        elif layer.activation == "relu":
            h = h * (h > 0)
        elif layer.activation == "softplus":
            h = np.logaddexp(0.0, h)
    return h


def apply_on_tape(tape: Tape, net: Mlp, x_ref: int, layer_refs=None) -> int:
    """Record the net's forward pass on a tape; returns the output ref.

    ``layer_refs`` supplies existing parameter leaves (one (w, b) pair per
    layer); fresh leaves are created when omitted, and appended to
    ``tape.layer_refs``.
    """
    h = x_ref
    created = layer_refs is None
    if created:
        layer_refs = [
            (tape.leaf(layer.weights), tape.leaf(layer.bias))
            for layer in net.layers
        ]
        tape.layer_refs.extend(layer_refs)
    for layer, (w_ref, b_ref) in zip(net.layers, layer_refs):
        h = tape.add(tape.matmul(h, w_ref), b_ref)
        h = getattr(tape, layer.activation)(h)
    return h


def forward(net: Mlp, batch) -> tuple[Tensor, Tape]:
    """Run the net on an (n, in_dim) batch, recording the tape."""
    batch = np.asarray(
        batch.values if isinstance(batch, Tensor) else batch, dtype=np.float64
    )
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise AutodiffError(
            f"batch shape {batch.shape} does not match input dim {net.in_dim}"
        )
    tape = Tape()
    tape.input_ref = tape.leaf(batch)
    tape.output_ref = apply_on_tape(tape, net, tape.input_ref)
    return Tensor(tape.value(tape.output_ref)), tape


def backward(tape: Tape, output_grad) -> dict[int, np.ndarray]:
    """Gradients of the tape's output for all leaves (params and inputs)."""
    if tape.output_ref is None:
        raise AutodiffError("tape has no recorded output")
    return tape.gradients(tape.output_ref, output_grad)


def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Max relative gap between tape gradients and central differences.

    ``fn(tape, refs)`` must build a scalar-valued computation from parameter
    leaves.  The analytic gradient comes from one reverse pass; each entry is
    then perturbed by +/- eps for the numeric side.  The error metric is
    |analytic - numeric| / max(1, |analytic|), maximized over all entries.
    """
    if not 0.0 < eps <= 1e-2:
        raise AutodiffError("eps must be in (0, 1e-2]")
    params = [np.array(p, dtype=np.float64) for p in params]  # private copies

    def _evaluate(values):
        tape = Tape()
        refs = [tape.leaf(v) for v in values]
        out = fn(tape, refs)
        if tape.value(out).shape != ():
            raise AutodiffError("grad_check requires a scalar-valued fn")
        return tape, refs, out

    def _value_at():
        t, _, o = _evaluate(params)
        return float(t.value(o))

    tape, refs, out = _evaluate(params)
    grads = tape.gradients(out, np.asarray(1.0))
    worst = 0.0
    for k, p in enumerate(params):
        analytic = grads[refs[k]].reshape(-1)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = _value_at()
            flat[idx] = orig - eps
            lo = _value_at()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def sgd_step(params, grads, lr: float):
    """One descent update p - lr * g per array; ascent callers negate grads."""
    if lr < 0.0:
        raise AutodiffError("learning rate must be >= 0")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise AutodiffError("params and grads must have equal length")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise AutodiffError(
                f"shape mismatch in sgd_step: {p.shape} vs {g.shape}"
            )
        out.append(p - lr * g)
    return out


def mlp_to_dict(net: Mlp) -> dict:
    """JSON-ready form: {"layers":[{"w":...,"b":...,"act":...}, ...]}."""
    return {
        "layers": [
            {
                "w": layer.weights.tolist(),
                "b": layer.bias.tolist(),
                "act": layer.activation,
            }
            for layer in net.layers
        ]
    }


def mlp_from_dict(obj: dict) -> Mlp:
    return Mlp(
        [
            Layer(
                np.asarray(spec["w"], dtype=np.float64),
                np.asarray(spec["b"], dtype=np.float64),
                spec["act"],
            )
            for spec in obj["layers"]
        ]
    )
