"""LSTM cell, linear layers and their exact reverse-mode gradients.

Arrays are time-major: a sequence batch has shape ``(T, B, features)``. Stacked
gate matrices hold four row blocks in the order forget, input, output, cell
candidate, so ``bias[0:H]`` is the forget-gate bias.

The recurrence is the standard peephole-free LSTM::

    f = sigmoid(z_f)   i = sigmoid(z_i)   o = sigmoid(z_o)   g = tanh(z_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

with ``z = W_ih x_t + W_hh h_{t-1} + b``. Dropout, when active, touches only the
trailing hidden vectors that are exposed to output heads.

Determinism: for a fixed BLAS thread count every routine here is bitwise
reproducible. Kernels run on the dtype of the inputs (float64 by default).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from . import _kernels

GATE_ORDER = ("forget", "input", "output", "cell")

StepGrads = Union[None, np.ndarray, Mapping[int, np.ndarray]]


class ShapeError(ValueError):
    pass


@dataclass
class LstmWeights:
    w_ih: np.ndarray  # (4H, I)
    w_hh: np.ndarray  # (4H, H)
    bias: np.ndarray  # (4H,)

    def __post_init__(self):
        h4, _ = self.w_ih.shape
        if h4 % 4 or self.w_hh.shape != (h4, h4 // 4) or self.bias.shape != (h4,):
            raise ShapeError(
                f"inconsistent LSTM shapes w_ih={self.w_ih.shape} w_hh={self.w_hh.shape} "
                f"bias={self.bias.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    def gate(self, name: str) -> slice:
        k = GATE_ORDER.index(name)
        h = self.hidden_size
        return slice(k * h, (k + 1) * h)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}

    def astype(self, dtype) -> "LstmWeights":
        return LstmWeights(*(np.ascontiguousarray(a, dtype=dtype) for a in (self.w_ih, self.w_hh, self.bias)))

    def copy(self) -> "LstmWeights":
        return LstmWeights(self.w_ih.copy(), self.w_hh.copy(), self.bias.copy())


@dataclass
class LstmState:
    h: np.ndarray  # (B, H)
    c: np.ndarray  # (B, H)

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float64) -> "LstmState":
        return cls(np.zeros((batch, hidden), dtype), np.zeros((batch, hidden), dtype))


@dataclass
class LinearWeights:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def astype(self, dtype) -> "LinearWeights":
        return LinearWeights(np.ascontiguousarray(self.weight, dtype=dtype),
                             np.ascontiguousarray(self.bias, dtype=dtype))

    def copy(self) -> "LinearWeights":
        return LinearWeights(self.weight.copy(), self.bias.copy())

    @classmethod
    def identity(cls, size: int, dtype=np.float64) -> "LinearWeights":
        return cls(np.eye(size, dtype=dtype), np.zeros(size, dtype))


class Workspace:
    """Reusable scratch buffers keyed by name.

    Large tapes re-use the same memory from batch to batch, which avoids
    page-faulting fresh allocations on every step. A tape built from a
    workspace is only valid until the next forward pass that uses the same keys.
    """

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def get(self, key: str, shape: Tuple[int, ...], dtype) -> np.ndarray:
        buf = self._buffers.get(key)
        size = int(np.prod(shape))
        if buf is None or buf.dtype != np.dtype(dtype) or buf.size < size:
            buf = np.empty(size, dtype=dtype)
            self._buffers[key] = buf
        return buf[:size].reshape(shape)


def _buffer(workspace: Optional[Workspace], key: str, shape, dtype) -> np.ndarray:
    if workspace is None:
        return np.empty(shape, dtype=dtype)
    return workspace.get(key, shape, dtype)


@dataclass
class Tape:
    """Everything the backward pass needs from one forward call."""

    weights: LstmWeights
    inputs: np.ndarray  # (T, B, I)
    gates: np.ndarray  # (T, B, 4H) post-activation
    c: np.ndarray  # (T+1, B, H), index 0 is the initial state
    h: np.ndarray  # (T+1, B, H)
    tanh_c: np.ndarray  # (T, B, H)
    exposed: int
    mask: Optional[np.ndarray] = None  # (exposed, B, H) inverted-dropout scale

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def replay(self) -> "LstmSequence":
        """Re-run the forward pass from the recorded inputs and initial state."""
        init = LstmState(self.h[0].copy(), self.c[0].copy())
        seq, _ = lstm_forward(self.weights, init, self.inputs, exposed=self.exposed)
        if self.mask is not None:
            seq.h_exposed = seq.h[self.steps - self.exposed:] * self.mask
        return seq


@dataclass
class LstmSequence:
    h: np.ndarray  # (T, B, H): h[t] is the hidden state after consuming inputs[t]
    c: np.ndarray  # (T, B, H)
    h_exposed: np.ndarray  # (E, B, H): last E hidden vectors after dropout

    def state(self, t: int) -> LstmState:
        return LstmState(self.h[t], self.c[t])

    @property
    def final(self) -> LstmState:
        return self.state(self.h.shape[0] - 1)


@dataclass
class LstmGradients:
    w_ih: np.ndarray
    w_hh: np.ndarray
    bias: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    inputs: Optional[np.ndarray] = None

    @property
    def weights(self) -> LstmWeights:
        return LstmWeights(self.w_ih, self.w_hh, self.bias)


def init_weights(input_size: int, hidden_size: int, seed: Union[int, np.random.Generator] = 0,
                 forget_bias: float = 3.0) -> LstmWeights:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) matrices, zero bias except the forget gate."""
    if input_size < 1 or hidden_size < 1:
        raise ShapeError("sizes must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden_size)
    w_ih = rng.uniform(-bound, bound, (4 * hidden_size, input_size))
    w_hh = rng.uniform(-bound, bound, (4 * hidden_size, hidden_size))
    bias = np.zeros(4 * hidden_size)
    bias[:hidden_size] = forget_bias
    return LstmWeights(w_ih, w_hh, bias)


def init_linear(in_features: int, out_features: int,
                seed: Union[int, np.random.Generator] = 0) -> LinearWeights:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(in_features)
    return LinearWeights(rng.uniform(-bound, bound, (out_features, in_features)),
                         rng.uniform(-bound, bound, out_features))


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout scale: 0 with probability ``rate``, else ``1/(1-rate)``."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.asarray(1.0 - rate, dtype=dtype)


def _check_inputs(weights: LstmWeights, init: LstmState, inputs: np.ndarray) -> None:
    if inputs.ndim != 3 or inputs.shape[2] != weights.input_size:
        raise ShapeError(f"inputs must be (T, B, {weights.input_size}), got {inputs.shape}")
    shape = (inputs.shape[1], weights.hidden_size)
    if init.h.shape != shape or init.c.shape != shape:
        raise ShapeError(f"initial state must be {shape}, got {init.h.shape}/{init.c.shape}")
    if not np.isfinite(inputs).all():
        raise ValueError("non-finite value in LSTM inputs")


def lstm_forward(weights: LstmWeights, init: LstmState, inputs: np.ndarray,
                 dropout_rate: float = 0.0, training: bool = False,
                 rng: Optional[np.random.Generator] = None, exposed: Optional[int] = None,
                 workspace: Optional[Workspace] = None, key: str = "lstm"
                 ) -> Tuple[LstmSequence, Tape]:
    """Run the recurrence over ``inputs`` of shape ``(T, B, I)``.

    Parameters
    ----------
    exposed : int, optional
        Number of trailing hidden vectors handed to an output head; dropout is
        applied to these only. Defaults to all ``T`` steps.
    rng : numpy.random.Generator, optional
        Source of dropout masks; required when ``training`` and ``dropout_rate > 0``.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    _check_inputs(weights, init, inputs)
    dtype = inputs.dtype
    steps, nb, _ = inputs.shape
    nh = weights.hidden_size
    exposed = steps if exposed is None else int(exposed)
    if not 0 <= exposed <= steps:
        raise ShapeError(f"exposed={exposed} outside [0, {steps}]")

    gates = _buffer(workspace, key + ".gates", (steps, nb, 4 * nh), dtype)
    c = _buffer(workspace, key + ".c", (steps + 1, nb, nh), dtype)
    h = _buffer(workspace, key + ".h", (steps + 1, nb, nh), dtype)
    tanh_c = _buffer(workspace, key + ".tanh_c", (steps, nb, nh), dtype)
    expz = _buffer(workspace, "scratch.expz", (nb, 4 * nh), dtype)
    rec = _buffer(workspace, "scratch.rec", (nb, 4 * nh), dtype)
    neg2c = _buffer(workspace, "scratch.neg2c", (nb, nh), dtype)
    h[0] = init.h
    c[0] = init.c

    # input projection for every step at once; gates[s] is overwritten in place
    np.matmul(inputs.reshape(steps * nb, -1), weights.w_ih.T, out=gates.reshape(steps * nb, 4 * nh))
    gates += weights.bias
    w_hh_t = np.ascontiguousarray(weights.w_hh.T)
    with np.errstate(over="ignore"):
        for s in range(steps):
            np.matmul(h[s], w_hh_t, out=rec)
            _kernels.negate_preactivation(rec, gates[s], expz)
            np.exp(expz, out=expz)
            _kernels.cell_forward(expz, c[s], gates[s], c[s + 1], neg2c)
            np.exp(neg2c, out=neg2c)
            _kernels.hidden_forward(neg2c, gates[s], tanh_c[s], h[s + 1])

    mask = None
    h_exposed = h[steps + 1 - exposed:]
    if training and dropout_rate > 0.0 and exposed:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = dropout_mask((exposed, nb, nh), dropout_rate, rng, dtype)
        h_exposed = h_exposed * mask
    tape = Tape(weights, inputs, gates, c, h, tanh_c, exposed, mask)
    return LstmSequence(h[1:], c[1:], h_exposed), tape


def _step_grad(grads: StepGrads, s: int) -> Optional[np.ndarray]:
    if grads is None:
        return None
    if isinstance(grads, np.ndarray):
        return grads[s]
    return grads.get(s)


def lstm_backward(tape: Tape, d_exposed: Optional[np.ndarray] = None, dh: StepGrads = None,
                  dc: StepGrads = None, input_grad: bool = False,
                  workspace: Optional[Workspace] = None) -> LstmGradients:
    """Exact gradients of a recorded forward pass.

    Parameters
    ----------
    d_exposed : array (E, B, H), optional
        Gradient with respect to the exposed (post-dropout) hidden vectors.
    dh, dc : array (T, B, H) or mapping step -> (B, H), optional
        Extra gradients with respect to raw states ``h[t]`` / ``c[t]``, e.g.
        from a state handed to another branch.
    input_grad : bool
        Also return the gradient with respect to the inputs.
    """
    w = tape.weights
    steps, nb, _ = tape.inputs.shape
    nh = w.hidden_size
    dtype = tape.gates.dtype
    if d_exposed is not None and d_exposed.shape != (tape.exposed, nb, nh):
        raise ShapeError(f"d_exposed must be {(tape.exposed, nb, nh)}, got {d_exposed.shape}")
    for extra in (dh, dc):
        if isinstance(extra, np.ndarray) and extra.shape != (steps, nb, nh):
            raise ShapeError(f"state gradients must be {(steps, nb, nh)}, got {extra.shape}")
    if d_exposed is not None and tape.mask is not None:
        d_exposed = d_exposed * tape.mask

    g_ih = np.zeros_like(w.w_ih, dtype=dtype)
    g_hh = np.zeros_like(w.w_hh, dtype=dtype)
    g_b = np.zeros(4 * nh, dtype=dtype)
    d_inputs = np.empty_like(tape.inputs) if input_grad else None
    dh_run = np.zeros((nb, nh), dtype)
    dc_run = np.zeros((nb, nh), dtype)
    dz = _buffer(workspace, "scratch.dz", (nb, 4 * nh), dtype)
    first_exposed = steps - tape.exposed
    for s in range(steps - 1, -1, -1):
        if d_exposed is not None and s >= first_exposed:
            dh_run += d_exposed[s - first_exposed]
        extra = _step_grad(dh, s)
        if extra is not None:
            dh_run += extra
        extra = _step_grad(dc, s)
        if extra is not None:
            dc_run += extra
        _kernels.cell_backward(tape.gates[s], tape.c[s], tape.tanh_c[s], dh_run, dc_run, dz)
        g_hh += dz.T @ tape.h[s]
        g_ih += dz.T @ tape.inputs[s]
        g_b += dz.sum(axis=0)
        if d_inputs is not None:
            np.matmul(dz, w.w_ih, out=d_inputs[s])
        np.matmul(dz, w.w_hh, out=dh_run)
    return LstmGradients(g_ih, g_hh, g_b, dh_run, dc_run, d_inputs)


def linear_forward(weights: LinearWeights, x: np.ndarray) -> np.ndarray:
    """``x @ W.T + b`` over the last axis."""
    if x.shape[-1] != weights.in_features:
        raise ShapeError(f"linear layer expects {weights.in_features} features, got {x.shape[-1]}")
    return x @ weights.weight.T + weights.bias


def linear_backward(weights: LinearWeights, x: np.ndarray, dy: np.ndarray
                    ) -> Tuple[LinearWeights, np.ndarray]:
    """Gradients of :func:`linear_forward`: ``(d weights, d x)``."""
    if dy.shape != x.shape[:-1] + (weights.out_features,):
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match input {x.shape}")
    x2 = x.reshape(-1, weights.in_features)
    dy2 = dy.reshape(-1, weights.out_features)
    grads = LinearWeights(dy2.T @ x2, dy2.sum(axis=0))
    return grads, dy @ weights.weight


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn()
        flat[k] = orig - eps
        down = fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |analytic|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
