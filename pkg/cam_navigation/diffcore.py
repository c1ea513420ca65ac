"""
Reverse-mode differentiation over dense float64 arrays, plus Adam and a
plateau learning-rate schedule.

Operations executed inside ``with Tape() as tape:`` are recorded in execution
order; ``tape.backward(loss)`` walks them once in reverse. Outside a tape the
same operations only compute values, which is how inference runs.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, NumericError, ShapeError


logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, Sequence[float], Sequence[Sequence[float]]]

_TAPES: List['Tape'] = []


class Tensor:
    """A float64 array that may carry a gradient and a backward rule"""

    __slots__ = ('value', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, value: ArrayLike, requires_grad: bool = False, op: str = 'const'):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


class ParamTensor(Tensor):
    """A trainable parameter; its gradient persists across backward passes until zeroed"""

    __slots__ = ('name',)

    def __init__(self, name: str, values: ArrayLike):
        super().__init__(np.array(values, dtype=np.float64), requires_grad=True, op='param')
        if self.value.size == 0:
            raise ShapeError(f"parameter {name} has no elements")
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of the primitive operations executed while it is active"""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> 'Tape':
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        Accumulate dLoss/dParam into every reachable parameter

        Args:
            loss: Scalar tensor recorded on this tape

        Returns:
            Mapping of parameter name to its accumulated gradient
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(node is loss for node in self.nodes):
            raise ContractError("loss was not recorded on this tape")

        reached: Dict[int, ParamTensor] = {}
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent in node._parents:
                if isinstance(parent, ParamTensor):
                    reached.setdefault(id(parent), parent)
            node._backward(node.grad)

        # intermediates keep no gradient once the pass is done
        for node in self.nodes:
            node.grad = None
        return {param.name: param.grad for param in reached.values()}


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _emit(value: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(value, op=op)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _emit(a.value + b.value, (a, b), 'add', backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _emit(a.value - b.value, (a, b), 'sub', backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))
    return _emit(a.value * b.value, (a, b), 'mul', backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)
    return _emit(a.value @ b.value, (a, b), 'matmul', backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def backward(g):
        _accumulate(a, g * mask)
    return _emit(np.where(mask, a.value, 0.0), (a,), 'relu', backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for tensor, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(tensor, piece)
    return _emit(value, tensors, 'concat', backward)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor; repeated indices sum their gradients"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, index, g)
        _accumulate(a, grad)
    return _emit(a.value[index], (a,), 'take_rows', backward)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _emit(a.value.reshape(shape), (a,), 'reshape', backward)


def _reduce_arg(a: Tensor, axis: Optional[int], pick: Callable) -> Tuple[np.ndarray, np.ndarray]:
    if a.value.size == 0:
        raise ContractError("cannot reduce an empty tensor")
    if axis is None:
        flat = int(pick(a.value.reshape(-1)))
        return a.value.reshape(-1)[flat], np.unravel_index(flat, a.shape)
    arg = pick(a.value, axis=axis)
    expanded = np.expand_dims(arg, axis)
    value = np.take_along_axis(a.value, expanded, axis=axis).squeeze(axis)
    return value, expanded


def max_reduce(a, axis: Optional[int] = None) -> Tensor:
    """Maximum along an axis; the gradient goes to the first argmax only"""
    a = as_tensor(a)
    value, where = _reduce_arg(a, axis, np.argmax)

    def backward(g):
        grad = np.zeros_like(a.value)
        if axis is None:
            grad[where] = g.reshape(())
        else:
            np.put_along_axis(grad, where, np.expand_dims(g, axis), axis=axis)
        _accumulate(a, grad)
    return _emit(np.asarray(value), (a,), 'max_reduce', backward)


def min_reduce(a, axis: Optional[int] = None) -> Tensor:
    """Minimum along an axis; the gradient goes to the first argmin only"""
    a = as_tensor(a)
    value, where = _reduce_arg(a, axis, np.argmin)

    def backward(g):
        grad = np.zeros_like(a.value)
        if axis is None:
            grad[where] = g.reshape(())
        else:
            np.put_along_axis(grad, where, np.expand_dims(g, axis), axis=axis)
        _accumulate(a, grad)
    return _emit(np.asarray(value), (a,), 'min_reduce', backward)


def segment_max(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """
    Row-wise maximum of a (rows, width) tensor within each segment

    Segments without rows produce the zero vector. Ties route the gradient to
    the lowest row index.
    """
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    width = a.shape[1] if a.value.ndim == 2 else 0
    value = np.zeros((num_segments, width))
    winners = np.zeros((num_segments, width), dtype=np.int64)
    present = np.zeros(num_segments, dtype=bool)
    if len(segment_ids) and width:
        order = np.argsort(segment_ids, kind='stable')
        sorted_ids = segment_ids[order]
        is_start = np.r_[True, sorted_ids[1:] != sorted_ids[:-1]]
        starts = np.flatnonzero(is_start)
        segments = sorted_ids[starts]
        block = a.value[order]
        maxima = np.maximum.reduceat(block, starts, axis=0)
        spread = maxima[np.cumsum(is_start) - 1]
        hit = (block == spread) | (np.isnan(block) & np.isnan(spread))
        rows = np.where(hit, order[:, None], len(segment_ids))
        value[segments] = maxima
        winners[segments] = np.minimum.reduceat(rows, starts, axis=0)
        present[segments] = True

    def backward(g):
        grad = np.zeros_like(a.value)
        segments = np.flatnonzero(present)
        if len(segments):
            cols = np.broadcast_to(np.arange(width), (len(segments), width))
            np.add.at(grad, (winners[segments], cols), g[segments])
        _accumulate(a, grad)
    return _emit(value, (a,), 'segment_max', backward)


def total(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _emit(np.asarray(a.value.sum()), (a,), 'sum', backward)


def mean(a) -> Tensor:
    """Mean of all elements; the mean over an empty tensor is defined as 0"""
    a = as_tensor(a)
    count = a.value.size
    if count == 0:
        return Tensor(0.0)

    def backward(g):
        _accumulate(a, np.broadcast_to(g / count, a.shape))
    return _emit(np.asarray(a.value.mean()), (a,), 'mean', backward)


def squared_norm(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, 2.0 * a.value * g)
    return _emit(np.asarray(np.sum(a.value * a.value)), (a,), 'squared_norm', backward)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))"""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Dense:
    """Affine layer y = x W + b with an optional relu"""
    weight: ParamTensor
    bias: ParamTensor
    activation: str = 'relu'

    @property
    def in_width(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_width(self) -> int:
        return int(self.weight.shape[1])

    @classmethod
    def from_arrays(cls, name: str, weight: ArrayLike, bias: ArrayLike, activation: str = 'relu') -> 'Dense':
        return cls(ParamTensor(f"{name}.weight", weight), ParamTensor(f"{name}.bias", bias), activation)

    @classmethod
    def initialize(cls, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                   activation: str = 'relu') -> 'Dense':
        return cls.from_arrays(name, glorot_uniform(fan_in, fan_out, rng), np.zeros(fan_out), activation)


def forward_mlp(layers: Sequence[Dense], inputs: Union[Tensor, ArrayLike]) -> Tensor:
    """
    Run a stack of dense layers

    Args:
        layers: Layers in application order; each carries its activation ('relu' or 'none')
        inputs: A vector (in_width,) or a batch of rows (rows, in_width)

    Returns:
        Output of the last layer with the same leading shape as the input
    """
    x = as_tensor(inputs)
    vector_input = x.value.ndim == 1
    if vector_input:
        x = reshape(x, (1, -1))
    for index, layer in enumerate(layers):
        if x.shape[-1] != layer.in_width:
            raise ShapeError(
                f"layer {index}: expected input width {layer.in_width}, got {x.shape[-1]}"
            )
        x = add(matmul(x, layer.weight), layer.bias)
        if layer.activation == 'relu':
            x = relu(x)
        elif layer.activation != 'none':
            raise ContractError(f"layer {index}: unknown activation {layer.activation!r}")
    if vector_input:
        x = reshape(x, (-1,))
    return x


@dataclass
class Mlp:
    """A named stack of dense layers"""
    name: str
    layers: List[Dense]

    @classmethod
    def initialize(cls, name: str, widths: Sequence[int], rng: np.random.Generator,
                   final_activation: str = 'relu') -> 'Mlp':
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = index == len(widths) - 2
            layers.append(Dense.initialize(
                f"{name}.{index}", fan_in, fan_out, rng,
                activation=final_activation if last else 'relu',
            ))
        return cls(name, layers)

    def __call__(self, inputs: Union[Tensor, ArrayLike]) -> Tensor:
        return forward_mlp(self.layers, inputs)

    def parameters(self) -> List[ParamTensor]:
        params: List[ParamTensor] = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params


def finite_diff_grad(f: Callable[[Sequence[ParamTensor]], float], params: Sequence[ParamTensor],
                     eps: float = 1e-4) -> Dict[str, np.ndarray]:
    """
    Central-difference gradient of a scalar function of the parameters

    Args:
        f: Deterministic function of the (in-place perturbed) parameters
        params: Parameters to differentiate against
        eps: Perturbation size

    Returns:
        Mapping of parameter name to its numerical gradient
    """
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    grads = {}
    for param in params:
        grad = np.zeros_like(param.value)
        flat = param.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(f(params))
            flat[i] = original - eps
            minus = float(f(params))
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"non-finite objective while perturbing {param.name}[{i}]")
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        grads[param.name] = grad
    return grads


@dataclass
class GradCheckReport:
    """Outcome of comparing backward against finite differences"""
    max_relative_error: float
    per_parameter: Dict[str, float]
    checked: int
    skipped_kinks: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_relative_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[ParamTensor], eps: float = 1e-4,
                   tolerance: float = 1e-5, kink_tolerance: float = 1e-6,
                   curvature_tolerance: float = 1e-9, corrupt: float = 0.0) -> GradCheckReport:
    """
    Compare tape gradients of loss_fn against central differences

    Central differences are exact up to round-off for the piecewise-affine
    CAM loss and accurate to O(eps^2) for smooth losses. A coordinate is
    skipped as a relu/hinge kink when either
      - its central differences at eps and eps/2 disagree (kink off-centre), or
      - the gap between its one-sided differences does not shrink linearly
        with the step (kink at the current value, where both central
        differences return the same average slope).

    Args:
        loss_fn: Builds the scalar loss from the current parameter values
        params: Parameters to check
        eps: Finite-difference step
        tolerance: Pass threshold on the max relative error
        kink_tolerance: Allowed disagreement of the two central differences
        curvature_tolerance: Allowed departure of the one-sided gap from linear scaling
        corrupt: Relative perturbation applied to the analytic gradients (negative control)
    """
    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        analytic = tape.backward(loss)
    base = loss.item()
    analytic = {p.name: analytic.get(p.name, np.zeros_like(p.value)).copy() for p in params}
    if corrupt:
        for grad in analytic.values():
            grad *= 1.0 + corrupt
            grad += corrupt

    per_parameter: Dict[str, float] = {}
    checked = skipped = 0
    for param in params:
        flat = param.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            values = []
            for step in (eps, -eps, eps / 2, -eps / 2):
                flat[i] = original + step
                values.append(loss_fn().item())
            flat[i] = original
            if not np.all(np.isfinite(values)):
                raise NumericError(f"non-finite loss while perturbing {param.name}[{i}]")
            numeric = (values[0] - values[1]) / (2.0 * eps)
            numeric_half = (values[2] - values[3]) / eps
            # forward minus backward slope: f''*h when smooth, the full slope jump at a kink on x
            gap = (values[0] - 2.0 * base + values[1]) / eps
            gap_half = (values[2] - 2.0 * base + values[3]) / (eps / 2)
            off_centre = abs(numeric - numeric_half) > kink_tolerance * max(1.0, abs(numeric))
            on_value = abs(gap - 2.0 * gap_half) > curvature_tolerance * max(1.0, abs(base))
            if off_centre or on_value:
                skipped += 1
                continue
            error = float(relative_error(analytic[param.name].reshape(-1)[i], numeric))
            worst = max(worst, error)
            checked += 1
        per_parameter[param.name] = worst
    max_error = max(per_parameter.values()) if per_parameter else 0.0
    report = GradCheckReport(max_error, per_parameter, checked, skipped, tolerance)
    logger.debug(f"gradient check: max rel err {max_error:.3e}, {checked} checked, {skipped} kinks skipped")
    return report


@dataclass
class AdamState:
    """Adam moments plus the plateau learning-rate schedule"""
    lr: float = 1e-3
    min_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    factor: float = 0.5
    patience: int = 5
    bad_rounds: int = 0
    best_metric: float = float('-inf')

    def __post_init__(self):
        if self.lr < self.min_lr:
            self.lr = self.min_lr


def adam_update(params: Iterable[ParamTensor], grads: Optional[Mapping[str, np.ndarray]],
                state: AdamState) -> AdamState:
    """
    Apply one bias-corrected Adam step in place

    Args:
        params: Parameters to update
        grads: Gradient per parameter name; defaults to each parameter's .grad
        state: Optimizer state, mutated and returned
    """
    params = list(params)
    resolved = {}
    for param in params:
        grad = param.grad if grads is None else grads.get(param.name, np.zeros_like(param.value))
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {param.name} has shape {grad.shape}, expected {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {param.name}")
        resolved[param.name] = grad

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param in params:
        grad = resolved[param.name]
        m = state.first_moment.get(param.name, np.zeros_like(param.value))
        v = state.second_moment.get(param.name, np.zeros_like(param.value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[param.name] = m
        state.second_moment[param.name] = v
        param.value -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if not np.all(np.isfinite(param.value)):
            raise NumericError(f"parameter {param.name} became non-finite after step {state.step}")
    return state


def lr_plateau_step(state: AdamState, validation_metric: float) -> AdamState:
    """
    Halve the learning rate after `patience` rounds without improvement

    Higher metrics are better; the rate never drops below min_lr.
    """
    if validation_metric > state.best_metric:
        state.best_metric = validation_metric
        state.bad_rounds = 0
        return state
    state.bad_rounds += 1
    if state.bad_rounds >= state.patience:
        previous = state.lr
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.bad_rounds = 0
        if state.lr < previous:
            logger.info(f"validation plateau: learning rate {previous:.2e} -> {state.lr:.2e}")
    return state
