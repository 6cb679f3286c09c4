"""
Multilayer perceptrons with reverse-mode gradients and the Adam optimizer

Every approximator in the package (policy, critic, target critic, residual
baseline) is an MLP described by an ``MlpSpec`` whose parameters live in one
flat ``ParamVector``. Layer ``k`` occupies a contiguous block of the vector:
the weight matrix of shape ``(fan_in, fan_out)`` in row-major order followed
by the bias of length ``fan_out``.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError


ACTIVATIONS = ("tanh", "softplus", "identity")
DEFAULT_HIDDEN = (256, 256)


def softplus(x):
    """Numerically stable log(1 + exp(x))"""
    return np.logaddexp(0.0, x)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return softplus(z)
    return z


def _activation_slope(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "softplus":
        return expit(z)
    return np.ones_like(z)


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a dense network: layer widths and one activation per layer"""

    input_dim: int
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN
    output_dim: int = 1
    activations: Tuple[str, ...] = ()

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if not self.activations:
            object.__setattr__(self, "activations", ("tanh",) * len(hidden) + ("identity",))
        else:
            object.__setattr__(self, "activations", tuple(self.activations))

        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in hidden):
            raise ValueError(f"All layer widths must be positive, got {self.layer_widths}")
        if len(self.activations) != len(hidden) + 1:
            raise ValueError(
                f"Expected {len(hidden) + 1} activations (one per layer), got {len(self.activations)}"
            )
        unknown = [a for a in self.activations if a not in ACTIVATIONS]
        if unknown:
            raise ValueError(f"Unknown activation(s) {unknown}; choose from {ACTIVATIONS}")

    @classmethod
    def default(cls, input_dim: int, output_dim: int) -> "MlpSpec":
        """Two tanh hidden layers of 256 units and a linear output"""
        return cls(input_dim=input_dim, hidden_dims=DEFAULT_HIDDEN, output_dim=output_dim)

    @property
    def layer_widths(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        widths = self.layer_widths
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def layer_slices(self) -> List[Tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat parameter vector, per layer"""
        slices = []
        offset = 0
        for fan_in, fan_out in self.layer_dims:
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            slices.append((w, b))
        return slices


@dataclass
class ParamVector:
    """Flat parameter array with a gradient accumulator of the same length"""

    values: np.ndarray
    grads: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if self.grads is None:
            self.grads = np.zeros_like(self.values)
        else:
            self.grads = np.ascontiguousarray(self.grads, dtype=np.float64).ravel()
        if self.grads.shape != self.values.shape:
            raise ValueError(
                f"values and grads must have identical length ({self.values.size} != {self.grads.size})"
            )

    def __len__(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.grads.copy())

    def check_finite(self, name: str = "parameters") -> None:
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.grads))):
            raise NonFiniteError(f"Non-finite entries in {name}")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases"""
    values = np.empty(spec.n_params)
    for (w, b), (fan_in, fan_out) in zip(spec.layer_slices(), spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        values[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        values[b] = rng.uniform(-bound, bound, size=fan_out)
    return ParamVector(values)


def _as_batch(x, dim: int, what: str = "input") -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"Expected {what} with {dim} columns, got shape {np.shape(x)}")
    return arr, single


def _check_params(spec: MlpSpec, params: ParamVector) -> None:
    if len(params) != spec.n_params:
        raise ValueError(f"Parameter vector has {len(params)} entries, spec needs {spec.n_params}")


def _weights(spec: MlpSpec, vector: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [
        (vector[w].reshape(fan_in, fan_out), vector[b])
        for (w, b), (fan_in, fan_out) in zip(spec.layer_slices(), spec.layer_dims)
    ]


def _trace(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    """Layer inputs and pre-activations of a forward pass"""
    inputs, pre = [], []
    h = x
    for (W, b), act in zip(_weights(spec, params.values), spec.activations):
        z = h @ W + b
        inputs.append(h)
        pre.append(z)
        h = _activate(act, z)
    return inputs, pre, h


def forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """
    Evaluate the network

    Args:
        spec: Network shape
        params: Flat parameters matching ``spec``
        x: Input vector of length ``input_dim`` or a batch of shape (n, input_dim)

    Returns:
        np.ndarray: Output vector (or batch) with ``output_dim`` columns

    Raises:
        ValueError: On dimension mismatch
    """
    _check_params(spec, params)
    batch, single = _as_batch(x, spec.input_dim)
    _, _, out = _trace(spec, params, batch)
    return out[0] if single else out


def _deltas(spec: MlpSpec, params: ParamVector, x, output_grad):
    """Yield (layer, layer input, pre-activation delta) from the last layer down"""
    _check_params(spec, params)
    batch, single = _as_batch(x, spec.input_dim)
    g, _ = _as_batch(output_grad, spec.output_dim, "output gradient")
    if g.shape[0] != batch.shape[0]:
        raise ValueError(f"Output gradient has {g.shape[0]} rows for {batch.shape[0]} inputs")
    inputs, pre, _ = _trace(spec, params, batch)
    layers = _weights(spec, params.values)
    for k in reversed(range(len(layers))):
        delta = g * _activation_slope(spec.activations[k], pre[k])
        yield k, inputs[k], delta
        g = delta @ layers[k][0].T
    yield -1, single, g


def backward(spec: MlpSpec, params: ParamVector, x, output_grad) -> np.ndarray:
    """
    Accumulate d(output . output_grad)/d(params) into ``params.grads``

    Activations are recomputed from ``x``; nothing is cached between calls.
    For a batch the contributions of all rows are summed.

    Returns:
        np.ndarray: Gradient with respect to the input, for chaining
    """
    slices = spec.layer_slices()
    for k, layer_input, delta in _deltas(spec, params, x, output_grad):
        if k < 0:
            single, input_grad = layer_input, delta
            return input_grad[0] if single else input_grad
        w, b = slices[k]
        params.grads[w] += (layer_input.T @ delta).ravel()
        params.grads[b] += delta.sum(axis=0)


def param_gradient(spec: MlpSpec, params: ParamVector, x, output_grad) -> np.ndarray:
    """Gradient of (output . output_grad) as a fresh array; ``params.grads`` is not touched"""
    scratch = ParamVector(params.values)
    backward(spec, scratch, x, output_grad)
    return scratch.grads


def per_sample_sq_grad_norms(spec: MlpSpec, params: ParamVector, x, output_grad) -> np.ndarray:
    """Squared norm of each row's parameter gradient, without materializing the gradients"""
    total = None
    for k, layer_input, delta in _deltas(spec, params, x, output_grad):
        if k < 0:
            break
        d2 = np.sum(delta ** 2, axis=1)
        term = np.sum(layer_input ** 2, axis=1) * d2 + d2
        total = term if total is None else total + term
    return total


def jvp(spec: MlpSpec, params: ParamVector, x, tangent: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward-mode product of the parameter Jacobian with ``tangent``

    Returns:
        Tuple of (outputs, output tangents), both shaped like ``forward``'s result
    """
    _check_params(spec, params)
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != params.values.shape:
        raise ValueError(f"Tangent has shape {tangent.shape}, expected {params.values.shape}")
    batch, single = _as_batch(x, spec.input_dim)
    h, dh = batch, np.zeros_like(batch)
    for (W, b), (dW, db), act in zip(
        _weights(spec, params.values), _weights(spec, tangent), spec.activations
    ):
        z = h @ W + b
        dz = dh @ W + h @ dW + db
        h, dh = _activate(act, z), _activation_slope(act, z) * dz
    if single:
        return h[0], dh[0]
    return h, dh


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one parameter vector"""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, learning_rate: float = 3e-4, **kwargs) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(params.values),
            second_moment=np.zeros_like(params.values),
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(params: ParamVector, state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update in place and clear the gradients

    Raises:
        NonFiniteError: If the accumulated gradient contains NaN or Inf
    """
    g = params.grads
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("Non-finite gradient passed to the optimizer")
    if state.first_moment.shape != g.shape:
        raise ValueError("Optimizer state does not match the parameter vector")

    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g

    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    params.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    params.zero_grad()


def clip_grad_norm(params: ParamVector, max_norm: float) -> float:
    """Rescale the accumulated gradient to ``max_norm`` if it is longer; return the original norm"""
    norm = float(np.linalg.norm(params.grads))
    if norm > max_norm:
        params.grads *= max_norm / norm
    return norm


class Network:
    """An MLP bundled with its parameters and optimizer state"""

    def __init__(self, spec: MlpSpec, params: ParamVector, learning_rate: float = 3e-4):
        _check_params(spec, params)
        self.spec = spec
        self.params = params
        self.optimizer = AdamState.for_params(params, learning_rate=learning_rate)

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, learning_rate: float = 3e-4) -> "Network":
        return cls(spec, init_params(spec, rng), learning_rate=learning_rate)

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x)

    def backward(self, x, output_grad) -> np.ndarray:
        return backward(self.spec, self.params, x, output_grad)

    def gradient(self, x, output_grad) -> np.ndarray:
        return param_gradient(self.spec, self.params, x, output_grad)

    def step(self) -> None:
        adam_step(self.params, self.optimizer)


def save_checkpoint(path: Union[str, Path], spec: MlpSpec, params: ParamVector) -> Path:
    """
    Write ``mlp <input_dim> <hidden...> <output_dim>`` followed by one value per line

    Values are written with 17 significant digits, which round-trips float64 exactly.
    """
    _check_params(spec, params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "mlp " + " ".join(str(w) for w in spec.layer_widths)
    np.savetxt(path, params.values, fmt="%.17g", header=header, comments="")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[MlpSpec, ParamVector]:
    """
    Read a checkpoint written by ``save_checkpoint``

    Hidden layers are restored with tanh activations and the output layer as linear.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the header or the parameter count is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with path.open() as handle:
        header = handle.readline().split()
    if len(header) < 3 or header[0] != "mlp":
        raise ValueError(f"Invalid checkpoint header in {path}: {' '.join(header)!r}")
    try:
        widths = [int(w) for w in header[1:]]
    except ValueError:
        raise ValueError(f"Invalid layer widths in checkpoint header of {path}")
    spec = MlpSpec(input_dim=widths[0], hidden_dims=tuple(widths[1:-1]), output_dim=widths[-1])
    values = np.loadtxt(path, skiprows=1, ndmin=1, dtype=np.float64)
    if values.size != spec.n_params:
        raise ValueError(f"Checkpoint {path} holds {values.size} values, header implies {spec.n_params}")
    return spec, ParamVector(values)


def numerical_gradient(loss_fn: Callable[[], float], params: ParamVector, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn`` with respect to ``params.values``"""
    grad = np.zeros_like(params.values)
    for i in range(params.values.size):
        original = params.values[i]
        params.values[i] = original + h
        upper = loss_fn()
        params.values[i] = original - h
        lower = loss_fn()
        params.values[i] = original
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: Sequence[float], numeric: Sequence[float], floor: float = 1e-4) -> float:
    """Largest coordinate-wise |a - n| / max(|a|, |n|, floor)"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0
