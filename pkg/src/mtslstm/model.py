"""Branched multi-timescale LSTM.

Branches run coarsest to finest. Branch ``b > 0`` starts from the state of
branch ``b - 1`` after ``split_indices()[b - 1]`` coarse steps, passed through
per-pair linear transfer layers (``FC_h``, ``FC_c``). With ``shared_weights``
all branches use one LSTM and one head, the transfer is the identity and each
input step carries a one-hot timescale indicator. A one-branch config is the
plain single-timescale LSTM.

Branch inputs are assembled as ``[dynamic features | static attributes | one-hot]``.
Heads emit standardized discharge; :class:`PredictionBundle` holds mm/h values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (LinearWeights, LstmState, LstmWeights, ShapeError, Tape, Workspace,
                   init_linear, init_weights, linear_backward, linear_forward, lstm_backward,
                   lstm_forward)
from .timeseries import SequenceSpec, Timescale


@dataclass(frozen=True)
class MtsConfig:
    spec: SequenceSpec
    features: Tuple[Tuple[str, ...], ...]  # dynamic inputs per branch, coarsest first
    hidden_sizes: Tuple[int, ...]
    static_features: Tuple[str, ...] = ()
    shared_weights: bool = False
    dropout_rate: float = 0.0
    forget_bias: float = 3.0
    anchor_step_hours: Optional[int] = None  # sample stride; defaults to the coarsest step

    def __post_init__(self):
        n = len(self.spec)
        object.__setattr__(self, "features", tuple(tuple(f) for f in self.features))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "static_features", tuple(self.static_features))
        if len(self.features) != n or len(self.hidden_sizes) != n:
            raise ValueError(f"need one feature list and one hidden size per timescale ({n})")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if any(len(f) + len(self.static_features) == 0 for f in self.features) and not self.shared_weights:
            raise ValueError("every branch needs at least one input feature")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.shared_weights:
            if len(set(self.hidden_sizes)) != 1:
                raise ValueError("shared weights need equal hidden sizes on all branches")
            if len({len(f) for f in self.features}) != 1:
                raise ValueError("shared weights need equal input dimension on all branches")
        if self.anchor_step_hours is not None and self.anchor_step_hours % self.spec.coarsest.step_hours:
            raise ValueError("anchor_step_hours must be a multiple of the coarsest step")

    @property
    def anchor_scale(self) -> Timescale:
        return Timescale(self.anchor_step_hours) if self.anchor_step_hours else self.spec.coarsest

    @property
    def n_branches(self) -> int:
        return len(self.spec)

    @property
    def scales(self) -> List[Timescale]:
        return [s.scale for s in self.spec]

    def input_size(self, branch: int) -> int:
        onehot = self.n_branches if self.shared_weights else 0
        return len(self.features[branch]) + len(self.static_features) + onehot

    @property
    def step_count(self) -> int:
        return self.spec.total_steps

    def to_dict(self) -> dict:
        return {
            "spec": [[s.scale.step_hours, s.seq_len, s.predict_window] for s in self.spec],
            "features": [list(f) for f in self.features],
            "hidden_sizes": list(self.hidden_sizes),
            "static_features": list(self.static_features),
            "shared_weights": self.shared_weights,
            "dropout_rate": self.dropout_rate,
            "forget_bias": self.forget_bias,
            **({"anchor_step_hours": self.anchor_step_hours} if self.anchor_step_hours else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MtsConfig":
        return cls(SequenceSpec.from_tuples([tuple(x) for x in d["spec"]]),
                   tuple(tuple(f) for f in d["features"]), tuple(d["hidden_sizes"]),
                   tuple(d.get("static_features", ())), bool(d.get("shared_weights", False)),
                   float(d.get("dropout_rate", 0.0)), float(d.get("forget_bias", 3.0)),
                   d.get("anchor_step_hours"))

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class MtsModelParams:
    lstms: List[LstmWeights]  # one per branch, or a single shared one
    heads: List[LinearWeights]
    transfer: List[Tuple[LinearWeights, LinearWeights]]  # (FC_h, FC_c) per adjacent pair
    shared: bool = False

    def lstm(self, branch: int) -> LstmWeights:
        return self.lstms[0 if self.shared else branch]

    def head(self, branch: int) -> LinearWeights:
        return self.heads[0 if self.shared else branch]

    def named(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view of every trainable array, in a fixed order."""
        out: Dict[str, np.ndarray] = {}
        for k, w in enumerate(self.lstms):
            for name, a in w.arrays().items():
                out[f"lstm{k}.{name}"] = a
        for k, w in enumerate(self.heads):
            for name, a in w.arrays().items():
                out[f"head{k}.{name}"] = a
        for k, (fh, fc) in enumerate(self.transfer):
            for tag, w in (("h", fh), ("c", fc)):
                for name, a in w.arrays().items():
                    out[f"transfer{k}.{tag}.{name}"] = a
        return out

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "MtsModelParams":
        """Same structure with arrays taken from ``arrays`` (names as in :meth:`named`)."""
        lstms = [LstmWeights(arrays[f"lstm{k}.w_ih"], arrays[f"lstm{k}.w_hh"], arrays[f"lstm{k}.bias"])
                 for k in range(len(self.lstms))]
        heads = [LinearWeights(arrays[f"head{k}.weight"], arrays[f"head{k}.bias"])
                 for k in range(len(self.heads))]
        transfer = [tuple(LinearWeights(arrays[f"transfer{k}.{t}.weight"], arrays[f"transfer{k}.{t}.bias"])
                          for t in ("h", "c")) for k in range(len(self.transfer))]
        return MtsModelParams(lstms, heads, transfer, self.shared)

    def copy(self) -> "MtsModelParams":
        return self.with_arrays({k: v.copy() for k, v in self.named().items()})

    def astype(self, dtype) -> "MtsModelParams":
        return self.with_arrays({k: np.ascontiguousarray(v, dtype=dtype) for k, v in self.named().items()})

    @property
    def dtype(self):
        return self.lstms[0].w_ih.dtype


def build(config: MtsConfig, seed: int = 0) -> MtsModelParams:
    """Fresh parameters; every array is drawn from one generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    n = config.n_branches
    if config.shared_weights:
        lstms = [init_weights(config.input_size(0), config.hidden_sizes[0], rng, config.forget_bias)]
        heads = [init_linear(config.hidden_sizes[0], 1, rng)]
        return MtsModelParams(lstms, heads, [], shared=True)
    lstms = [init_weights(config.input_size(b), config.hidden_sizes[b], rng, config.forget_bias)
             for b in range(n)]
    heads = [init_linear(config.hidden_sizes[b], 1, rng) for b in range(n)]
    transfer = [(init_linear(config.hidden_sizes[b], config.hidden_sizes[b + 1], rng),
                 init_linear(config.hidden_sizes[b], config.hidden_sizes[b + 1], rng))
                for b in range(n - 1)]
    return MtsModelParams(lstms, heads, transfer)


def assemble_inputs(config: MtsConfig, branch: int, dynamic: np.ndarray,
                    static: Optional[np.ndarray] = None, dtype=np.float64) -> np.ndarray:
    """Time-major branch input ``(T, B, input_size)`` from dynamic ``(T, B, F)`` and static ``(B, S)``."""
    steps, nb, nf = dynamic.shape
    if nf != len(config.features[branch]):
        raise ShapeError(f"branch {branch} expects {len(config.features[branch])} dynamic features, got {nf}")
    n_static = len(config.static_features)
    if n_static and (static is None or static.shape != (nb, n_static)):
        raise ShapeError(f"static attributes must have shape {(nb, n_static)}")
    out = np.empty((steps, nb, config.input_size(branch)), dtype=dtype)
    out[:, :, :nf] = dynamic
    if n_static:
        out[:, :, nf:nf + n_static] = static
    if config.shared_weights:
        out[:, :, nf + n_static:] = 0.0
        out[:, :, nf + n_static + branch] = 1.0
    return out


@dataclass
class ModelTape:
    lstm: List[Tape]
    exposed: List[np.ndarray]  # head inputs per branch (pw, B, H)
    handoff: List[Tuple[np.ndarray, np.ndarray]]  # coarse (h, c) fed to transfer, per pair


@dataclass
class PredictionBundle:
    """Per-timescale predictions in mm/h, shape ``(n_samples, predict_window)``."""

    values: Dict[Timescale, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, scale: Timescale) -> np.ndarray:
        return self.values[scale]

    @property
    def scales(self) -> List[Timescale]:
        return list(self.values)


def forward(params: MtsModelParams, config: MtsConfig, inputs: Sequence[np.ndarray],
            training: bool = False, rng: Optional[np.random.Generator] = None,
            workspace: Optional[Workspace] = None) -> Tuple[List[np.ndarray], ModelTape]:
    """Standardized predictions ``(B, predict_window)`` per branch.

    ``inputs`` are assembled branch inputs of shape ``(seq_len, B, input_size)``,
    see :func:`assemble_inputs`.
    """
    n = config.n_branches
    if len(inputs) != n:
        raise ShapeError(f"expected {n} branch inputs, got {len(inputs)}")
    splits = config.spec.split_indices()
    nb = inputs[0].shape[1]
    preds, tapes, exposed, handoff = [], [], [], []
    for b, sspec in enumerate(config.spec):
        x = inputs[b]
        if x.shape != (sspec.seq_len, nb, config.input_size(b)):
            raise ShapeError(f"branch {b} input must be {(sspec.seq_len, nb, config.input_size(b))}, got {x.shape}")
        w = params.lstm(b)
        if b == 0:
            init = LstmState.zeros(nb, config.hidden_sizes[0], x.dtype)
        else:
            i = splits[b - 1]
            h_src, c_src = tapes[b - 1].h[i], tapes[b - 1].c[i]
            handoff.append((h_src, c_src))
            if params.shared:
                init = LstmState(h_src.copy(), c_src.copy())
            else:
                fh, fc = params.transfer[b - 1]
                init = LstmState(linear_forward(fh, h_src), linear_forward(fc, c_src))
        seq, tape = lstm_forward(w, init, x, config.dropout_rate, training, rng,
                                 exposed=sspec.predict_window, workspace=workspace, key=f"branch{b}")
        y = linear_forward(params.head(b), seq.h_exposed)
        preds.append(y[:, :, 0].T)
        tapes.append(tape)
        exposed.append(seq.h_exposed)
    return preds, ModelTape(tapes, exposed, handoff)


def zeros_like_grads(params: MtsModelParams) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.named().items()}


def backward(params: MtsModelParams, config: MtsConfig, tape: ModelTape,
             d_preds: Sequence[np.ndarray], workspace: Optional[Workspace] = None
             ) -> Dict[str, np.ndarray]:
    """Gradients of a scalar with respect to every array in ``params.named()``.

    ``d_preds[b]`` is the gradient with respect to the standardized predictions
    of branch ``b``, shape ``(B, predict_window)``.
    """
    n = config.n_branches
    if len(d_preds) != n:
        raise ShapeError(f"expected {n} prediction gradients, got {len(d_preds)}")
    splits = config.spec.split_indices()
    grads = zeros_like_grads(params)
    dh_extra: List[Dict[int, np.ndarray]] = [{} for _ in range(n)]
    dc_extra: List[Dict[int, np.ndarray]] = [{} for _ in range(n)]
    for b in range(n - 1, -1, -1):
        k = 0 if params.shared else b
        h_exp = tape.exposed[b]
        dy = np.asarray(d_preds[b], dtype=h_exp.dtype)
        if dy.shape != (h_exp.shape[1], h_exp.shape[0]):
            raise ShapeError(f"branch {b} gradient must be {(h_exp.shape[1], h_exp.shape[0])}, got {dy.shape}")
        g_head, d_exp = linear_backward(params.head(b), h_exp, dy.T[:, :, None])
        grads[f"head{k}.weight"] += g_head.weight
        grads[f"head{k}.bias"] += g_head.bias
        g = lstm_backward(tape.lstm[b], d_exp, dh_extra[b], dc_extra[b], workspace=workspace)
        grads[f"lstm{k}.w_ih"] += g.w_ih
        grads[f"lstm{k}.w_hh"] += g.w_hh
        grads[f"lstm{k}.bias"] += g.bias
        if b == 0:
            continue
        i = splits[b - 1]
        if params.shared:
            dh_src, dc_src = g.h0, g.c0
        else:
            fh, fc = params.transfer[b - 1]
            h_src, c_src = tape.handoff[b - 1]
            g_fh, dh_src = linear_backward(fh, h_src, g.h0)
            g_fc, dc_src = linear_backward(fc, c_src, g.c0)
            for tag, gw in (("h", g_fh), ("c", g_fc)):
                grads[f"transfer{b - 1}.{tag}.weight"] += gw.weight
                grads[f"transfer{b - 1}.{tag}.bias"] += gw.bias
        if i > 0:
            # state after i coarse steps is the output of step i - 1
            dh_extra[b - 1][i - 1] = dh_src
            dc_extra[b - 1][i - 1] = dc_src
    return grads


def bundle(preds: Sequence[np.ndarray], config: MtsConfig, q_mean: float, q_std: float) -> PredictionBundle:
    """Destandardize branch outputs into a :class:`PredictionBundle`."""
    return PredictionBundle({s: np.asarray(p, dtype=np.float64) * q_std + q_mean
                             for s, p in zip(config.scales, preds)})
