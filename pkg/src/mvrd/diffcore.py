"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything in this package that needs gradients runs through the small op set
below. Each forward op appends a record to a thread-local tape; ``backward``
walks the tape in reverse and accumulates gradients into ``Tensor.grad``
buffers. Gradients accumulate across calls; callers (the optimizer) zero them
between steps. The tape is freed after each backward pass.

Wherever an op is documented for 1-D or 2-D inputs, the implementation also
accepts extra leading batch axes with the same semantics applied to the
trailing axes; this is what lets the trainer vectorize over a minibatch.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "GradCheckReport",
    "InitSpec",
    "Parameter",
    "ParameterError",
    "Tensor",
    "ValidationError",
    "add",
    "backward",
    "concat",
    "cross_entropy",
    "dot",
    "grad_check",
    "kl_divergence",
    "linear",
    "make_parameter",
    "matmul",
    "mean",
    "narrow",
    "no_grad",
    "parameter_seed",
    "relu",
    "reshape",
    "scale",
    "softmax_temp",
    "tensor_sum",
    "transpose",
    "zero_grads",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op's contract."""


class ParameterError(ValueError):
    """A scalar argument (temperature, step size, ...) is out of range."""


class ValidationError(ValueError):
    """Input values violate a documented precondition (e.g. not a distribution)."""


class ContractError(RuntimeError):
    """An op was used outside its documented calling contract."""


KL_CLAMP = 1e-12
REL_ERR_FLOOR = 1e-8


class _EngineState(threading.local):
    def __init__(self):
        self.tape: list[tuple[Tensor, object]] = []
        self.grad_enabled = True


_state = _EngineState()


class no_grad:
    """Context manager that disables tape recording (pure inference)."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Shape-tagged array of 64-bit reals with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = np.zeros_like(values) if requires_grad else None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values, False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class InitSpec:
    scheme: str
    seed: int


class Parameter:
    """Named trainable tensor; init is fully determined by (scheme, seed, shape)."""

    __slots__ = ("name", "tensor", "init_spec")

    def __init__(self, name: str, tensor: Tensor, init_spec: InitSpec):
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must require gradients")
        self.name = name
        self.tensor = tensor
        self.init_spec = init_spec

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def parameter_seed(master_seed: int, name: str) -> int:
    """Stable per-name seed so init does not depend on construction order."""
    digest = hashlib.blake2b(f"{master_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_parameter(name: str, shape: tuple[int, ...], scheme: str, seed: int) -> Parameter:
    if scheme == "xavier_uniform":
        if len(shape) != 2:
            raise ParameterError(f"xavier_uniform needs a 2-D shape, got {shape}")
        fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        values = np.random.default_rng(seed).uniform(-limit, limit, size=shape)
    elif scheme == "zeros":
        values = np.zeros(shape)
    else:
        raise ParameterError(f"unknown init scheme {scheme!r}")
    return Parameter(name, Tensor(values, requires_grad=True), InitSpec(scheme, seed))


def zero_grads(params) -> None:
    for p in params:
        p.tensor.zero_grad()


# ---------------------------------------------------------------------------
# op plumbing


def _tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires)
    if requires:
        _state.tape.append((out, backward_fn))
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Tensor:
    """Matrix product a[m x k] @ b[k x n]; extra leading axes broadcast."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes disagree: {a.shape} vs {b.shape}")
    values = np.matmul(a.values, b.values)

    def backward_fn(g):
        if a.requires_grad:
            a.grad += _sum_to_shape(np.matmul(g, _swap(b.values)), a.shape)
        if b.requires_grad:
            b.grad += _sum_to_shape(np.matmul(_swap(a.values), g), b.shape)

    return _emit(values, (a, b), backward_fn)


def linear(x, weight, bias) -> Tensor:
    """x @ W + b with b broadcast over all leading axes of x."""
    x, w, b = _tensor(x), _tensor(weight), _tensor(bias)
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear parameter shapes disagree: W{w.shape}, b{b.shape}")
    if x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match W{w.shape}")
    values = np.matmul(x.values, w.values) + b.values
    n_in, n_out = w.shape

    def backward_fn(g):
        g2 = g.reshape(-1, n_out)
        if x.requires_grad:
            x.grad += np.matmul(g, w.values.T).reshape(x.shape)
        if w.requires_grad:
            w.grad += np.matmul(x.values.reshape(-1, n_in).T, g2)
        if b.requires_grad:
            b.grad += g2.sum(axis=0)

    return _emit(values, (x, w, b), backward_fn)


def add(a, b) -> Tensor:
    """Element-wise sum of two same-shape tensors."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes disagree: {a.shape} vs {b.shape}")
    values = a.values + b.values

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _emit(values, (a, b), backward_fn)


def scale(x, c: float) -> Tensor:
    """Multiply every entry by the scalar c."""
    x = _tensor(x)
    c = float(c)
    values = x.values * c

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g * c

    return _emit(values, (x,), backward_fn)


def relu(x) -> Tensor:
    x = _tensor(x)
    values = np.maximum(x.values, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g * (x.values > 0.0)

    return _emit(values, (x,), backward_fn)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got shape {x.shape}")
    values = _swap(x.values).copy()

    def backward_fn(g):
        if x.requires_grad:
            x.grad += _swap(g)

    return _emit(values, (x,), backward_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (or an explicit axis)."""
    ts = [_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of zero tensors")
    axis = axis if axis >= 0 else ts[0].ndim + axis
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            i != axis and t.shape[i] != ts[0].shape[i] for i in range(t.ndim)
        ):
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: {[t.shape for t in ts]}"
            )
    values = np.concatenate([t.values for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward_fn(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.grad += piece

    return _emit(values, tuple(ts), backward_fn)


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    x = _tensor(x)
    axis = axis if axis >= 0 else x.ndim + axis
    if not (0 <= start < stop <= x.shape[axis]):
        raise DimensionError(f"narrow [{start}:{stop}) outside axis {axis} of {x.shape}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    values = x.values[index].copy()

    def backward_fn(g):
        if x.requires_grad:
            x.grad[index] += g

    return _emit(values, (x,), backward_fn)


def reshape(x, shape) -> Tensor:
    x = _tensor(x)
    values = x.values.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g.reshape(x.shape)

    return _emit(values, (x,), backward_fn)


def mean(x, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over all entries when axis is None."""
    x = _tensor(x)
    if axis is None:
        n = x.values.size
        values = x.values.mean()

        def backward_fn(g):
            if x.requires_grad:
                x.grad += np.full(x.shape, g / n)

    else:
        ax = axis if axis >= 0 else x.ndim + axis
        n = x.shape[ax]
        values = x.values.mean(axis=ax)

        def backward_fn(g):
            if x.requires_grad:
                x.grad += np.expand_dims(g, ax) / n

    return _emit(np.asarray(values), (x,), backward_fn)


def tensor_sum(x, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all entries when axis is None."""
    x = _tensor(x)
    if axis is None:
        values = x.values.sum()

        def backward_fn(g):
            if x.requires_grad:
                x.grad += np.full(x.shape, g)

    else:
        ax = axis if axis >= 0 else x.ndim + axis
        values = x.values.sum(axis=ax)

        def backward_fn(g):
            if x.requires_grad:
                x.grad += np.expand_dims(g, ax) * np.ones(x.shape)

    return _emit(np.asarray(values), (x,), backward_fn)


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal 1-D shapes, got {a.shape} vs {b.shape}")
    values = np.dot(a.values, b.values)

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    return _emit(np.asarray(values), (a, b), backward_fn)


def softmax_temp(x, tau: float) -> Tensor:
    """Temperature-scaled softmax over the last axis, max-subtracted for stability.

    out_i = exp(x_i/tau - max(x)/tau) / sum_j exp(x_j/tau - max(x)/tau)
    """
    x = _tensor(x)
    tau = float(tau)
    if not tau > 0.0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_temp needs a nonempty last axis, got {x.shape}")
    z = x.values / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            x.grad += s * (g - inner) / tau

    return _emit(s, (x,), backward_fn)


def _check_distribution(t: Tensor, label: str) -> None:
    if np.any(t.values < 0.0):
        raise ValidationError(f"{label} has negative entries")
    sums = t.values.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValidationError(f"{label} does not sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3e})")


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) over the last axis, with 0*ln(0) := 0 and q clamped to >= 1e-12.

    p is typically the gradient-free teacher distribution; gradient flows only
    into inputs that require it.
    """
    p, q = _tensor(p), _tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes disagree: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    pc = np.maximum(p.values, KL_CLAMP)
    qc = np.maximum(q.values, KL_CLAMP)
    log_ratio = np.log(pc) - np.log(qc)
    values = np.where(p.values > 0.0, p.values * log_ratio, 0.0).sum(axis=-1)

    def backward_fn(g):
        g = np.expand_dims(g, -1)
        if q.requires_grad:
            q.grad += -g * (p.values / qc) * (q.values >= KL_CLAMP)
        if p.requires_grad:
            p.grad += g * np.where(p.values > 0.0, log_ratio + 1.0, 0.0)

    return _emit(np.asarray(values), (p, q), backward_fn)


def cross_entropy(logits, y) -> Tensor:
    """-log_softmax(logits)[y], max-subtracted; batched logits give one loss per row."""
    x = _tensor(logits)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"cross_entropy needs a class axis, got {x.shape}")
    n_classes = x.shape[-1]
    y_arr = np.asarray(y, dtype=np.int64)
    if y_arr.shape != x.shape[:-1]:
        raise DimensionError(f"labels {y_arr.shape} do not match logits {x.shape}")
    if np.any(y_arr < 0) or np.any(y_arr >= n_classes):
        raise IndexError(f"class index out of range [0, {n_classes})")
    m = x.values.max(axis=-1, keepdims=True)
    log_z = m.squeeze(-1) + np.log(np.exp(x.values - m).sum(axis=-1))
    picked = np.take_along_axis(x.values, y_arr[..., None], axis=-1).squeeze(-1)
    values = log_z - picked

    def backward_fn(g):
        if x.requires_grad:
            soft = np.exp(x.values - m)
            soft /= soft.sum(axis=-1, keepdims=True)
            onehot = np.zeros_like(x.values)
            np.put_along_axis(onehot, y_arr[..., None], 1.0, axis=-1)
            x.grad += np.expand_dims(g, -1) * (soft - onehot)

    return _emit(np.asarray(values), (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward + gradient checking


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every reachable grad buffer.

    The loss must be a scalar produced by ops above. The recording tape is
    freed afterwards; gradients add onto whatever is already in the buffers.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    _state.tape = []
    idx = None
    for i in range(len(tape) - 1, -1, -1):
        if tape[i][0] is loss:
            idx = i
            break
    if idx is None:
        return  # loss is a constant: nothing reachable
    loss.grad[...] = 1.0
    for out, backward_fn in reversed(tape[: idx + 1]):
        if out.grad.any():
            backward_fn(out.grad)


@dataclass
class GradCheckReport:
    """Comparison of backward gradients against central finite differences."""

    max_rel_error: float
    per_parameter: dict[str, float]
    deterministic: bool
    step: float
    tolerance: float
    entries_checked: int = 0
    worst: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_rel_error < self.tolerance


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check backward() against (f(p+h) - f(p-h)) / 2h for every parameter entry.

    f must be a deterministic zero-argument callable that rebuilds the forward
    pass and returns a scalar Tensor; non-determinism is detected and flagged.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ParameterError(f"step h must lie in [1e-7, 1e-3], got {h}")
    params = list(params)

    with no_grad():
        v1 = f().item()
        v2 = f().item()
    deterministic = v1 == v2

    zero_grads(params)
    backward(f())
    analytic = {p.name: np.array(p.tensor.grad) for p in params}
    zero_grads(params)

    per_parameter: dict[str, float] = {}
    worst: list[tuple[str, int, float, float, float]] = []
    checked = 0
    for p in params:
        flat = p.tensor.values.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            with no_grad():
                f_plus = f().item()
            flat[i] = saved - h
            with no_grad():
                f_minus = f().item()
            flat[i] = saved
            numeric = float((f_plus - f_minus) / (2.0 * h))
            err = float(_rel_error(ana[i], numeric))
            checked += 1
            if err > worst_here:
                worst_here = err
            if err >= tol:
                worst.append((p.name, i, float(ana[i]), numeric, err))
        per_parameter[p.name] = worst_here
    max_rel = max(per_parameter.values(), default=0.0)
    worst.sort(key=lambda e: -e[4])
    return GradCheckReport(
        max_rel_error=max_rel,
        per_parameter=per_parameter,
        deterministic=deterministic,
        step=h,
        tolerance=tol,
        entries_checked=checked,
        worst=worst[:10],
    )
