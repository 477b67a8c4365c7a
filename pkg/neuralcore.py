"""
Minimal reverse-mode differentiation over numpy arrays, plus the MLPs and the
Adam optimizer used by the trainer.

A ``Tape`` records every operation applied to ``Tracked`` values. Tracked values
take part in ordinary numpy expressions through ``__array_ufunc__``, so code
written with numpy ufuncs (``np.exp``, ``np.sqrt``, ...) and the ``sum``/``mean``
methods runs unchanged on either plain arrays or tracked values. Complex
arithmetic is carried as ``ComplexValue`` pairs of real parts.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import structlog
from scipy.special import expit

logger = structlog.get_logger(__name__)

F_WIDTHS = (1, 32, 32, 32, 32, 1)
G_WIDTHS = (1, 32, 32, 32, 1)
HEADS = ("linear", "softplus")


class BranchCutError(ArithmeticError):
    """Raised when a complex square root leaves the principal-branch domain Re(z) > 0."""


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


@dataclass
class _Node:
    parents: tuple
    vjps: tuple
    shape: tuple


class Tape:
    """Records operations for a single backward pass."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.bound: Dict[int, List["Tracked"]] = {}

    def leaf(self, value) -> "Tracked":
        value = np.asarray(value, dtype=float)
        self.nodes.append(_Node((), (), value.shape))
        return Tracked(self, len(self.nodes) - 1, value)

    def record(self, value, parents, vjps) -> "Tracked":
        value = np.asarray(value, dtype=float)
        self.nodes.append(_Node(tuple(parents), tuple(vjps), value.shape))
        return Tracked(self, len(self.nodes) - 1, value)

    def gradient(self, root: "Tracked", wrt: Sequence["Tracked"]) -> List[np.ndarray]:
        """
        Back-propagate from a scalar root.

        Args:
            root: Scalar tracked value (the loss)
            wrt: Leaves whose gradients are wanted

        Returns:
            list: One gradient array per requested leaf (zeros if unreachable)
        """
        if not isinstance(root, Tracked) or root.tape is not self:
            return [np.zeros_like(leaf.value) for leaf in wrt]
        if root.value.size != 1:
            raise ValueError("Backward pass needs a scalar root")
        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root.index] = np.ones(root.value.shape)
        for index in range(root.index, -1, -1):
            upstream = grads[index]
            if upstream is None:
                continue
            node = self.nodes[index]
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = _unbroadcast(vjp(upstream), self.nodes[parent].shape)
                if grads[parent] is None:
                    grads[parent] = contribution
                else:
                    grads[parent] = grads[parent] + contribution
        return [
            grads[leaf.index] if grads[leaf.index] is not None else np.zeros_like(leaf.value)
            for leaf in wrt
        ]

    def bind(self, net: "Mlp") -> List["Tracked"]:
        """Register a network's parameters as leaves (once per tape)."""
        key = id(net)
        if key not in self.bound:
            self.bound[key] = [self.leaf(p) for p in net.params]
        return self.bound[key]

    def net_gradient(self, root: "Tracked", net: "Mlp") -> List[np.ndarray]:
        if id(net) not in self.bound:
            return [np.zeros_like(p) for p in net.params]
        return self.gradient(root, self.bound[id(net)])


def value_of(x):
    """Plain numpy value of a tracked or untracked quantity."""
    if isinstance(x, Tracked):
        return x.value
    return np.asarray(x, dtype=float)


def _record(value, operands, vjps: Sequence[Callable]):
    tracked = [(op, fn) for op, fn in zip(operands, vjps) if isinstance(op, Tracked)]
    if not tracked:
        return value
    tape = tracked[0][0].tape
    for op, _ in tracked[1:]:
        if op.tape is not tape:
            raise ValueError("Cannot mix values from different tapes")
    return tape.record(value, [op.index for op, _ in tracked], [fn for _, fn in tracked])


def _add(a, b):
    return _record(value_of(a) + value_of(b), (a, b), (lambda g: g, lambda g: g))


def _sub(a, b):
    return _record(value_of(a) - value_of(b), (a, b), (lambda g: g, lambda g: -g))


def _mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def _div(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av / bv, (a, b), (lambda g: g / bv, lambda g: -g * av / (bv * bv)))


def _neg(a):
    return _record(-value_of(a), (a,), (lambda g: -g,))


def _power(a, p):
    if isinstance(p, Tracked):
        raise TypeError("Only constant exponents are supported on tracked values")
    av = value_of(a)
    p = float(p)
    return _record(av ** p, (a,), (lambda g: g * p * av ** (p - 1.0),))


def _exp(a):
    out = np.exp(value_of(a))
    return _record(out, (a,), (lambda g: g * out,))


def _log(a):
    av = value_of(a)
    return _record(np.log(av), (a,), (lambda g: g / av,))


def _sqrt(a):
    out = np.sqrt(value_of(a))
    return _record(out, (a,), (lambda g: g / (2.0 * out),))


def _sin(a):
    av = value_of(a)
    return _record(np.sin(av), (a,), (lambda g: g * np.cos(av),))


def _cos(a):
    av = value_of(a)
    return _record(np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def _tanh(a):
    out = np.tanh(value_of(a))
    return _record(out, (a,), (lambda g: g * (1.0 - out * out),))


def _square(a):
    av = value_of(a)
    return _record(av * av, (a,), (lambda g: 2.0 * g * av,))


def _absolute(a):
    av = value_of(a)
    return _record(np.abs(av), (a,), (lambda g: g * np.sign(av),))


def _maximum(a, b):
    av, bv = value_of(a), value_of(b)
    take_a = av >= bv
    return _record(
        np.maximum(av, bv),
        (a, b),
        (lambda g: g * take_a, lambda g: g * ~take_a),
    )


def _matmul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.negative: _neg,
    np.power: _power,
    np.exp: _exp,
    np.log: _log,
    np.sqrt: _sqrt,
    np.sin: _sin,
    np.cos: _cos,
    np.tanh: _tanh,
    np.square: _square,
    np.absolute: _absolute,
    np.maximum: _maximum,
    np.matmul: _matmul,
}


class Tracked:
    """A numpy array whose operations are recorded on a tape."""

    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tracked({self.value!r})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None or ufunc not in _UFUNCS:
            return NotImplemented
        return _UFUNCS[ufunc](*inputs)

    def __add__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _add(self, other)

    def __radd__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _add(other, self)

    def __sub__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _sub(other, self)

    def __mul__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _div(self, other)

    def __rtruediv__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return _div(other, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _power(self, p)

    def __abs__(self):
        return _absolute(self)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __getitem__(self, index):
        shape = self.value.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return full

        return _record(self.value[index], (self,), (vjp,))

    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return _record(self.value.sum(axis=axis, keepdims=keepdims), (self,), (vjp,))

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else np.prod([self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        original = self.value.shape
        return _record(self.value.reshape(*shape), (self,), (lambda g: np.reshape(g, original),))


def elu(a):
    """ELU activation with unit scale."""
    av = value_of(a)
    with np.errstate(over="ignore"):
        out = np.where(av > 0, av, np.expm1(np.minimum(av, 0.0)))
    return _record(out, (a,), (lambda g: g * np.where(av > 0, 1.0, out + 1.0),))


def softplus(a):
    """Overflow-safe softplus, log(1 + e^a)."""
    av = value_of(a)
    return _record(np.logaddexp(0.0, av), (a,), (lambda g: g * expit(av),))


class ComplexValue:
    """
    Complex number (or array) stored as a pair of real parts.

    Either part may be a numpy array or a tracked value, so the complex arithmetic
    used for characteristic functions stays differentiable.
    """

    __array_ufunc__ = None

    def __init__(self, re, im=0.0):
        self.re = re
        self.im = im

    @classmethod
    def lift(cls, z) -> "ComplexValue":
        if isinstance(z, ComplexValue):
            return z
        if isinstance(z, Tracked):
            return cls(z, 0.0)
        arr = np.asarray(z)
        if np.iscomplexobj(arr):
            return cls(arr.real.astype(float), arr.imag.astype(float))
        return cls(arr.astype(float), 0.0)

    def to_complex(self):
        """Plain numpy complex value (drops any tape)."""
        return value_of(self.re) + 1j * value_of(self.im)

    @property
    def shape(self):
        return np.broadcast(value_of(self.re), value_of(self.im)).shape

    def __add__(self, other):
        other = ComplexValue.lift(other)
        return ComplexValue(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other):
        other = ComplexValue.lift(other)
        return ComplexValue(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return ComplexValue.lift(other) - self

    def __neg__(self):
        return ComplexValue(-self.re, -self.im)

    def __mul__(self, other):
        if not isinstance(other, ComplexValue) and not np.iscomplexobj(np.asarray(value_of(other))):
            return ComplexValue(self.re * other, self.im * other)
        other = ComplexValue.lift(other)
        return ComplexValue(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = ComplexValue.lift(other)
        denom = other.re * other.re + other.im * other.im
        return ComplexValue(
            (self.re * other.re + self.im * other.im) / denom,
            (self.im * other.re - self.re * other.im) / denom,
        )

    def __rtruediv__(self, other):
        if isinstance(other, ComplexValue):
            return NotImplemented
        return ComplexValue.lift(other) / self

    def conj(self) -> "ComplexValue":
        return ComplexValue(self.re, -self.im)

    def abs2(self):
        return self.re * self.re + self.im * self.im

    def exp(self) -> "ComplexValue":
        scale = np.exp(self.re)
        return ComplexValue(scale * np.cos(self.im), scale * np.sin(self.im))

    def sqrt(self) -> "ComplexValue":
        """
        Principal square root on the open right half-plane.

        Raises:
            BranchCutError: If any element has Re(z) <= 0
        """
        if np.any(value_of(self.re) <= 0.0):
            logger.error("Complex square root outside the principal-branch domain")
            raise BranchCutError("Complex square root requested with Re(z) <= 0")
        modulus = np.sqrt(self.re * self.re + self.im * self.im)
        root_re = np.sqrt((modulus + self.re) * 0.5)
        return ComplexValue(root_re, self.im / (2.0 * root_re))

    def sum(self, axis=None):
        shape = self.shape
        return ComplexValue(_sum(self.re, axis, shape), _sum(self.im, axis, shape))

    def __repr__(self):
        return f"ComplexValue({value_of(self.re)!r}, {value_of(self.im)!r})"


def _sum(part, axis, shape):
    if isinstance(part, Tracked):
        if part.shape != shape:
            part = part + np.zeros(shape)
        return part.sum(axis=axis)
    return np.sum(np.broadcast_to(part, shape), axis=axis)


@dataclass
class Mlp:
    """
    Fully connected network mapping a scalar state to a scalar.

    Hidden layers use ELU; the head is linear (drift) or softplus (diffusion).
    Weights are stored as (fan_in, fan_out) matrices.
    """

    widths: List[int]
    head: str
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    seed: int
    train_meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, widths: Sequence[int], head: str, seed: int) -> "Mlp":
        """
        Initialize with He-uniform weights and zero biases.

        Args:
            widths: Layer widths including input and output, e.g. (1, 32, 32, 1)
            head: "linear" or "softplus"
            seed: Initialization seed
        """
        if head not in HEADS:
            raise ValueError(f"Unknown head {head!r}, expected one of {HEADS}")
        if len(widths) < 2 or widths[0] != 1 or widths[-1] != 1:
            raise ValueError(f"Network widths must map 1 -> 1, got {list(widths)}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(list(widths), head, weights, biases, int(seed))

    @property
    def params(self) -> List[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.widths),
            self.head,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
            dict(self.train_meta),
        )

    def to_checkpoint(self) -> dict:
        return {
            "widths": list(self.widths),
            "head": self.head,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "seed": self.seed,
            "train_meta": self.train_meta,
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "Mlp":
        try:
            widths = [int(w) for w in payload["widths"]]
            weights = [
                np.asarray(w, dtype=float).reshape(fan_in, fan_out)
                for w, fan_in, fan_out in zip(payload["weights"], widths[:-1], widths[1:])
            ]
            biases = [np.asarray(b, dtype=float) for b in payload["biases"]]
            return cls(widths, payload["head"], weights, biases, int(payload.get("seed", 0)), payload.get("train_meta", {}))
        except (KeyError, TypeError, ValueError) as e:
            logger.error("Malformed network checkpoint", error=str(e))
            raise ValueError(f"Malformed network checkpoint: {e}") from e


def forward(net: Mlp, x, tape: Optional[Tape] = None):
    """
    Evaluate the network on a batch of states.

    Args:
        net: Network to evaluate
        x: States, shape (B,) or scalar
        tape: When given, parameters are tracked and the result is a Tracked value

    Returns:
        Outputs with the same shape as x
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    params = tape.bind(net) if tape is not None else net.params
    layers = len(net.weights)
    weights, biases = params[:layers], params[layers:]

    h = x.reshape(-1, 1)
    for w, b in zip(weights[:-1], biases[:-1]):
        h = elu(h @ w + b)
    out = h @ weights[-1] + biases[-1]
    if net.head == "softplus":
        out = softplus(out)
    out = out.reshape(-1)
    if scalar:
        return out[0]
    return out


def forward_with_input_deriv(net: Mlp, x, delta: float, tape: Optional[Tape] = None):
    """
    Network value and central-difference input derivative in one batched pass.

    Args:
        net: Network to evaluate
        x: States, shape (B,)
        delta: Finite-difference step
        tape: Optional tape for tracking

    Returns:
        tuple: (values, derivatives), each of shape (B,)
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    count = x.shape[0]
    stacked = np.concatenate([x, x + delta, x - delta])
    out = forward(net, stacked, tape)
    value = out[:count]
    deriv = (out[count : 2 * count] - out[2 * count :]) / (2.0 * delta)
    return value, deriv


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> bool:
    """
    Apply one bias-corrected Adam update to the parameter arrays in place.

    A gradient with any non-finite entry skips the whole update: parameters,
    moments and the step count stay unchanged and ``state.skipped`` is bumped.

    Returns:
        bool: True when the update was applied
    """
    grads = [np.asarray(g, dtype=float) for g in grads]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        logger.warning("Skipping Adam update with non-finite gradient", step=state.step, skipped=state.skipped)
        return False

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return True
