"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations execute eagerly and are appended to the active :class:`Tape`.
A tape can be replayed on new leaf values with :meth:`Tape.eval` and
differentiated with :meth:`Tape.grad`.

    >>> tape = Tape()
    >>> x = tape.variable(3.0, name="x")
    >>> y = x * x
    >>> float(y.value), float(tape.grad(y)["x"])
    (9.0, 6.0)
"""
from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "GradientError",
    "OPS",
    "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "matmul",
    "tanh", "sigmoid", "relu", "softplus", "exp", "log", "sin", "cos",
    "softmax", "log_softmax", "concat", "stack", "take", "transpose", "reshape",
    "sum", "mean", "l2norm",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, node_id: int, op: str, detail: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"node {node_id} ({op}): {detail}")


class GradientError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _sum_bwd(g, xs, out, a):
    (x,) = xs
    axis, keep = a["axis"], a["keepdims"]
    if axis is not None and not keep:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_bwd(g, xs, out, a):
    (x,) = xs
    (gx,) = _sum_bwd(g, xs, out, a)
    return (gx * (out.size / x.size),)


def _l2norm_fwd(xs, a):
    (x,) = xs
    if a["axis"] is None:
        return np.sqrt(np.sum(x * x))
    return np.sqrt(np.sum(x * x, axis=a["axis"], keepdims=a["keepdims"]))


def _l2norm_bwd(g, xs, out, a):
    (x,) = xs
    n = out
    if a["axis"] is not None and not a["keepdims"]:
        n = np.expand_dims(n, a["axis"])
        g = np.expand_dims(g, a["axis"])
    safe = np.where(n > 0, n, 1.0)
    # the norm's gradient at the origin is defined as zero
    return (np.where(n > 0, g * x / safe, 0.0),)


def _matmul_bwd(g, xs, out, a):
    x, y = xs
    gx = g @ np.swapaxes(y, -1, -2)
    gy = np.swapaxes(x, -1, -2) @ g
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def _concat_bwd(g, xs, out, a):
    axis = a["axis"]
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _stack_bwd(g, xs, out, a):
    axis = a["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))


def _getitem_bwd(g, xs, out, a):
    (x,) = xs
    gx = np.zeros_like(x)
    np.add.at(gx, a["key"], g)
    return (gx,)


def _take_bwd(g, xs, out, a):
    (x,) = xs
    gx = np.zeros_like(x)
    np.add.at(gx, a["indices"], g)
    return (gx,)


# op name -> (forward(values, attrs), backward(g, values, out, attrs))
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda xs, a: xs[0] + xs[1],
            lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape))),
    "sub": (lambda xs, a: xs[0] - xs[1],
            lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape))),
    "mul": (lambda xs, a: xs[0] * xs[1],
            lambda g, xs, o, a: (_unbroadcast(g * xs[1], xs[0].shape),
                                 _unbroadcast(g * xs[0], xs[1].shape))),
    "div": (lambda xs, a: xs[0] / xs[1],
            lambda g, xs, o, a: (_unbroadcast(g / xs[1], xs[0].shape),
                                 _unbroadcast(-g * xs[0] / (xs[1] * xs[1]), xs[1].shape))),
    "neg": (lambda xs, a: -xs[0], lambda g, xs, o, a: (-g,)),
    "matmul": (lambda xs, a: xs[0] @ xs[1], _matmul_bwd),
    "tanh": (lambda xs, a: np.tanh(xs[0]), lambda g, xs, o, a: (g * (1.0 - o * o),)),
    "sigmoid": (lambda xs, a: _sigmoid(xs[0]), lambda g, xs, o, a: (g * o * (1.0 - o),)),
    "relu": (lambda xs, a: np.maximum(xs[0], 0.0), lambda g, xs, o, a: (g * (xs[0] > 0),)),
    "softplus": (lambda xs, a: _softplus(xs[0]), lambda g, xs, o, a: (g * _sigmoid(xs[0]),)),
    "exp": (lambda xs, a: np.exp(xs[0]), lambda g, xs, o, a: (g * o,)),
    "log": (lambda xs, a: np.log(xs[0]), lambda g, xs, o, a: (g / xs[0],)),
    "sin": (lambda xs, a: np.sin(xs[0]), lambda g, xs, o, a: (g * np.cos(xs[0]),)),
    "cos": (lambda xs, a: np.cos(xs[0]), lambda g, xs, o, a: (-g * np.sin(xs[0]),)),
    "softmax": (lambda xs, a: np.exp(_log_softmax(xs[0], a["axis"])),
                lambda g, xs, o, a: (o * (g - np.sum(g * o, axis=a["axis"], keepdims=True)),)),
    "log_softmax": (lambda xs, a: _log_softmax(xs[0], a["axis"]),
                    lambda g, xs, o, a: (g - np.exp(o) * np.sum(g, axis=a["axis"], keepdims=True),)),
    "concat": (lambda xs, a: np.concatenate(xs, axis=a["axis"]), _concat_bwd),
    "stack": (lambda xs, a: np.stack(xs, axis=a["axis"]), _stack_bwd),
    "getitem": (lambda xs, a: np.array(xs[0][a["key"]], dtype=np.float64), _getitem_bwd),
    "take": (lambda xs, a: xs[0][a["indices"]], _take_bwd),
    "transpose": (lambda xs, a: np.swapaxes(xs[0], -1, -2),
                  lambda g, xs, o, a: (np.swapaxes(g, -1, -2),)),
    "reshape": (lambda xs, a: xs[0].reshape(a["shape"]),
                lambda g, xs, o, a: (g.reshape(xs[0].shape),)),
    "sum": (lambda xs, a: np.sum(xs[0], axis=a["axis"], keepdims=a["keepdims"]), _sum_bwd),
    "mean": (lambda xs, a: np.mean(xs[0], axis=a["axis"], keepdims=a["keepdims"]), _mean_bwd),
    "l2norm": (_l2norm_fwd, _l2norm_bwd),
}


class Tensor:
    """A node on a tape: holds its forward value and its position on the tape."""

    __slots__ = ("tape", "id", "_value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self._value = value

    @property
    def value(self) -> np.ndarray:
        # recorded tensors read through the tape so replays are visible
        return self.tape.values[self.id] if self.id >= 0 else self._value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, o): return add(self, self._lift(o))
    def __radd__(self, o): return add(self._lift(o), self)
    def __sub__(self, o): return sub(self, self._lift(o))
    def __rsub__(self, o): return sub(self._lift(o), self)
    def __mul__(self, o): return mul(self, self._lift(o))
    def __rmul__(self, o): return mul(self._lift(o), self)
    def __truediv__(self, o): return div(self, self._lift(o))
    def __rtruediv__(self, o): return div(self._lift(o), self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, self._lift(o))
    def __getitem__(self, key): return self.tape.record("getitem", (self,), {"key": key})

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "attrs", "name", "param")

    def __init__(self, op, inputs, attrs, name=None, param=False):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.param = param


class Tape:
    """Ordered record of primitive operations.

    With ``recording=False`` operations still compute values but nothing is
    stored, which is what inference paths use.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: _Node, value: np.ndarray) -> Tensor:
        if not self.recording:
            return Tensor(self, -1, value)
        self.nodes.append(node)
        self.values.append(value)
        return Tensor(self, len(self.nodes) - 1, value)

    def variable(self, value, name: str | None = None) -> Tensor:
        """A named differentiable leaf (a parameter)."""
        return self._push(_Node("leaf", (), None, name, True), _as_array(value))

    def constant(self, value, name: str | None = None) -> Tensor:
        return self._push(_Node("leaf", (), None, name, False), _as_array(value))

    def record(self, op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
        attrs = attrs or {}
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")
        fwd = OPS[op][0]
        try:
            value = fwd([t.value for t in inputs], attrs)
        except (ValueError, IndexError) as exc:
            raise ShapeError(len(self.nodes), op, str(exc)) from None
        ids = tuple(t.id for t in inputs)
        return self._push(_Node(op, ids, attrs), np.asarray(value, dtype=np.float64))

    def parameters(self) -> dict[str, int]:
        return {n.name: i for i, n in enumerate(self.nodes) if n.param and n.name is not None}

    def eval(self, inputs: Mapping[str, object] | None = None) -> dict[str, np.ndarray]:
        """Replay every recorded node, substituting named leaf values.

        Returns the values of all named nodes after the replay.  The tape's
        stored values are updated in place, so a following :meth:`grad` uses
        the new point.
        """
        if not self.recording:
            raise ValueError("cannot replay a non-recording tape")
        inputs = dict(inputs or {})
        values = self.values
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                if node.name in inputs:
                    new = _as_array(inputs.pop(node.name))
                    if new.shape != values[i].shape:
                        raise ShapeError(i, "leaf", f"{node.name!r} expects shape "
                                         f"{values[i].shape}, got {new.shape}")
                    values[i] = new
                continue
            try:
                values[i] = np.asarray(OPS[node.op][0]([values[j] for j in node.inputs],
                                                       node.attrs), dtype=np.float64)
            except (ValueError, IndexError) as exc:
                raise ShapeError(i, node.op, str(exc)) from None
        if inputs:
            raise KeyError(f"unbound inputs: {sorted(inputs)}")
        return {n.name: values[i] for i, n in enumerate(self.nodes) if n.name is not None}

    def grad(self, output: Tensor, wrt: Sequence[Tensor] | None = None):
        """Reverse pass from a scalar output.

        Without ``wrt`` returns ``{name: gradient}`` for every named parameter
        leaf on the tape (zeros for parameters the output does not touch).
        With ``wrt`` returns a list of gradients aligned with it.
        """
        if output.tape is not self or output.id < 0:
            raise GradientError("output is not recorded on this tape")
        if self.values[output.id].size != 1:
            raise GradientError(f"output must be scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.id: np.ones_like(self.values[output.id])}
        nodes, values = self.nodes, self.values
        for i in range(output.id, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.op == "leaf":
                continue
            xs = [values[j] for j in node.inputs]
            parts = OPS[node.op][1](g, xs, values[i], node.attrs)
            for j, gj in zip(node.inputs, parts):
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        if wrt is not None:
            return [grads.get(t.id, np.zeros_like(t.value)) for t in wrt]
        return {n.name: grads.get(i, np.zeros_like(values[i]))
                for i, n in enumerate(nodes) if n.param and n.name is not None}


def _unary(op):
    def f(x: Tensor) -> Tensor:
        return x.tape.record(op, (x,))
    f.__name__ = op
    return f


def _binary(op):
    def f(x, y) -> Tensor:
        tape = x.tape if isinstance(x, Tensor) else y.tape
        if not isinstance(x, Tensor):
            x = tape.constant(x)
        if not isinstance(y, Tensor):
            y = tape.constant(y)
        return tape.record(op, (x, y))
    f.__name__ = op
    return f


add, sub, mul, div, matmul = (_binary(o) for o in ("add", "sub", "mul", "div", "matmul"))
neg, tanh, sigmoid, relu, softplus, exp, log, sin, cos = (
    _unary(o) for o in ("neg", "tanh", "sigmoid", "relu", "softplus", "exp", "log", "sin", "cos"))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.tape.record("softmax", (x,), {"axis": axis})


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.tape.record("log_softmax", (x,), {"axis": axis})


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return xs[0].tape.record("concat", tuple(xs), {"axis": axis})


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return xs[0].tape.record("stack", tuple(xs), {"axis": axis})


def take(x: Tensor, indices) -> Tensor:
    """Row gather ``x[indices]``; used for embedding lookup."""
    return x.tape.record("take", (x,), {"indices": np.asarray(indices, dtype=np.intp)})


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return x.tape.record("transpose", (x,))


def reshape(x: Tensor, shape) -> Tensor:
    return x.tape.record("reshape", (x,), {"shape": tuple(shape)})


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return x.tape.record("sum", (x,), {"axis": axis, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.tape.record("mean", (x,), {"axis": axis, "keepdims": keepdims})


def l2norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.tape.record("l2norm", (x,), {"axis": axis, "keepdims": keepdims})


def finite_diff_check(function: Callable[[Tape, dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``function(tape, tensors)`` must build a scalar on ``tape`` from the
    parameter tensors.  The error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if not params:
        return 0.0
    arrays = {k: _as_array(v).copy() for k, v in params.items()}
    tape = Tape()
    tensors = {k: tape.variable(v, name=k) for k, v in arrays.items()}
    out = function(tape, tensors)
    if not _tape_finite(tape):
        raise GradientError("non-finite intermediate value")
    analytic = tape.grad(out)

    def value_at(name, flat_index, delta):
        trial = {k: v for k, v in arrays.items()}
        moved = arrays[name].copy()
        moved.flat[flat_index] += delta
        trial[name] = moved
        t = Tape(recording=False)
        v = float(function(t, {k: t.constant(a) for k, a in trial.items()}).value)
        if not math.isfinite(v):
            raise GradientError("non-finite intermediate value")
        return v

    worst = 0.0
    for name, arr in arrays.items():
        for idx in range(arr.size):
            numeric = (value_at(name, idx, epsilon) - value_at(name, idx, -epsilon)) / (2 * epsilon)
            err = abs(analytic[name].flat[idx] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def _tape_finite(tape: Tape) -> bool:
    return all(np.all(np.isfinite(v)) for v in tape.values)
