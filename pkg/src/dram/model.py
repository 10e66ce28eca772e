"""Recurrent attention model assembly.

Wiring contract: the classifier reads only the bottom LSTM layer's state
(h1), emission and baseline read only the top layer's state (h2), and the
context network initializes h2 alone. Glimpse content therefore feeds
classification directly while whole-image context can steer only where the
model looks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .sensor import SensorConfig, context_image, glimpse_batch
from .tensor import Tensor


@dataclass
class RecurrentState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @property
    def batch(self) -> int:
        return self.h1.data.shape[0]


def _conv_out_size(size: int, kernels, strides) -> int:
    for k, s in zip(kernels, strides):
        size = (size + 2 * (k // 2) - k) // s + 1
    return size


class ModelParams:
    """Named parameter tensors for one model."""

    def __init__(self, tensors: dict):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.tensors.items():
            a = np.asarray(arrays[k])
            if a.shape != t.data.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != expected {t.data.shape}")
            t.data = a.astype(t.data.dtype)


def _fc(tensors, rng, name, d_in, d_out):
    tensors[f"{name}_w"] = Tensor(T.glorot_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
    tensors[f"{name}_b"] = Tensor(np.zeros(d_out), requires_grad=True)


def _conv(tensors, rng, name, c_in, c_out, k):
    fan_in, fan_out = c_in * k * k, c_out * k * k
    tensors[f"{name}_w"] = Tensor(T.glorot_uniform(rng, fan_in, fan_out, (c_out, c_in, k, k)), requires_grad=True)
    tensors[f"{name}_b"] = Tensor(np.zeros(c_out), requires_grad=True)


def _lstm(tensors, rng, name, d_in, units):
    w = T.glorot_uniform(rng, d_in + units, 4 * units, (d_in + units, 4 * units))
    b = np.zeros(4 * units)
    b[units: 2 * units] = 1.0  # forget gate opens at init
    tensors[f"{name}_w"] = Tensor(w, requires_grad=True)
    tensors[f"{name}_b"] = Tensor(b, requires_grad=True)


def init_params(mcfg: ModelConfig, scfg: SensorConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, forget-gate biases at 1."""
    t: dict = {}
    p = scfg.patch_size
    u = mcfg.lstm_units
    in_ch = 2  # fine + coarse

    if mcfg.glimpse_net == "fc":
        _fc(t, rng, "g_img1", in_ch * p * p, mcfg.glimpse_hidden)
        _fc(t, rng, "g_img2", mcfg.glimpse_hidden, mcfg.glimpse_dim)
    elif mcfg.glimpse_net == "conv":
        prev = in_ch
        for i, (f, k) in enumerate(zip(mcfg.glimpse_filters, mcfg.glimpse_kernels), start=1):
            _conv(t, rng, f"g_conv{i}", prev, f, k)
            prev = f
        side = _conv_out_size(p, mcfg.glimpse_kernels, mcfg.glimpse_strides)
        _fc(t, rng, "g_fc", prev * side * side, mcfg.glimpse_dim)
    else:
        raise ValueError(f"unknown glimpse_net '{mcfg.glimpse_net}'")
    _fc(t, rng, "g_loc", 2, mcfg.glimpse_dim)

    _lstm(t, rng, "lstm1", mcfg.glimpse_dim, u)
    _lstm(t, rng, "lstm2", u, u)

    _fc(t, rng, "emit1", u, mcfg.emission_hidden)
    _fc(t, rng, "emit2", mcfg.emission_hidden, 2)
    _fc(t, rng, "cls1", u, mcfg.classifier_hidden)
    _fc(t, rng, "cls2", mcfg.classifier_hidden, mcfg.num_classes)
    _fc(t, rng, "base1", u, mcfg.baseline_hidden)
    _fc(t, rng, "base2", mcfg.baseline_hidden, 1)

    prev = 1
    for i, (f, k) in enumerate(zip(mcfg.context_filters, mcfg.context_kernels), start=1):
        _conv(t, rng, f"ctx_conv{i}", prev, f, k)
        prev = f
    side = _conv_out_size(scfg.context_size, mcfg.context_kernels, mcfg.context_strides)
    _fc(t, rng, "ctx_fc", prev * side * side, u)
    return ModelParams(t)


def glimpse_network(p: ModelParams, mcfg: ModelConfig, obs: np.ndarray, locs: np.ndarray) -> Tensor:
    """Combine what (patch features) and where (location features) by elementwise product."""
    x = Tensor(obs)
    if mcfg.glimpse_net == "fc":
        h = T.relu(T.affine(T.flatten_rows(x), p["g_img1_w"], p["g_img1_b"]))
        what = T.relu(T.affine(h, p["g_img2_w"], p["g_img2_b"]))
    else:
        h = x
        for i, s in enumerate(mcfg.glimpse_strides, start=1):
            k = mcfg.glimpse_kernels[i - 1]
            h = T.relu(T.conv2d(h, p[f"g_conv{i}_w"], p[f"g_conv{i}_b"], stride=s, padding=k // 2))
        what = T.relu(T.affine(T.flatten_rows(h), p["g_fc_w"], p["g_fc_b"]))
    where = T.relu(T.affine(Tensor(locs), p["g_loc_w"], p["g_loc_b"]))
    return T.mul(what, where)


def recurrent_step(p: ModelParams, g: Tensor, state: RecurrentState) -> RecurrentState:
    """Two stacked LSTM layers; layer 2 consumes layer 1's fresh output."""
    h1, c1 = T.lstm_cell(g, state.h1, state.c1, p["lstm1_w"], p["lstm1_b"])
    h2, c2 = T.lstm_cell(h1, state.h2, state.c2, p["lstm2_w"], p["lstm2_b"])
    return RecurrentState(h1=h1, c1=c1, h2=h2, c2=c2)


def emission(p: ModelParams, state: RecurrentState) -> Tensor:
    """Next-location mean (B, 2), unbounded linear output. Reads h2 only."""
    h = T.relu(T.affine(state.h2, p["emit1_w"], p["emit1_b"]))
    return T.affine(h, p["emit2_w"], p["emit2_b"])


def classify(p: ModelParams, state: RecurrentState) -> Tensor:
    """Class log-probabilities (B, K). Reads h1 only."""
    h = T.relu(T.affine(state.h1, p["cls1_w"], p["cls1_b"]))
    return T.log_softmax(T.affine(h, p["cls2_w"], p["cls2_b"]))


def baseline(p: ModelParams, state: RecurrentState) -> Tensor:
    """Scalar reward predictor (B,). Reads h2."""
    h = T.relu(T.affine(state.h2, p["base1_w"], p["base1_b"]))
    return T.reshape(T.affine(h, p["base2_w"], p["base2_b"]), (-1,))


def init_state(p: ModelParams, mcfg: ModelConfig, scfg: SensorConfig, images: np.ndarray,
               coarse: np.ndarray | None = None) -> RecurrentState:
    """Run the context network on the coarse whole image; it seeds h2 only.

    h1, c1, c2 start at zero. With `no_context` set, h2 is zero too and the
    first glimpse location comes from emission on a blank state. `coarse`
    may carry a precomputed (B, c, s, s) context stack (it does not depend
    on parameters, so replays can reuse it).
    """
    b = images.shape[0]
    u = mcfg.lstm_units
    zeros = lambda: Tensor(np.zeros((b, u)))
    if mcfg.no_context:
        return RecurrentState(h1=zeros(), c1=zeros(), h2=zeros(), c2=zeros())
    if coarse is None:
        coarse = np.stack([context_image(img, scfg) for img in images])
    h = Tensor(coarse)
    for i, s in enumerate(mcfg.context_strides, start=1):
        k = mcfg.context_kernels[i - 1]
        h = T.relu(T.conv2d(h, p[f"ctx_conv{i}_w"], p[f"ctx_conv{i}_b"], stride=s, padding=k // 2))
    h2 = T.affine(T.flatten_rows(h), p["ctx_fc_w"], p["ctx_fc_b"])
    return RecurrentState(h1=zeros(), c1=zeros(), h2=h2, c2=zeros())


def model_step(p: ModelParams, mcfg: ModelConfig, scfg: SensorConfig, images: np.ndarray,
               locs: np.ndarray, state: RecurrentState):
    """One glimpse step: observe at `locs`, update state, read out all heads."""
    obs = glimpse_batch(images, locs, scfg)
    g = glimpse_network(p, mcfg, obs, locs)
    new_state = recurrent_step(p, g, state)
    outs = {
        "log_probs": classify(p, new_state),
        "l_hat": emission(p, new_state),
        "baseline": baseline(p, new_state),
    }
    return new_state, outs


def expected_parameter_count(mcfg: ModelConfig, scfg: SensorConfig) -> int:
    """Closed-form parameter total for the assembled model."""
    p, u, g = scfg.patch_size, mcfg.lstm_units, mcfg.glimpse_dim
    total = 0
    if mcfg.glimpse_net == "fc":
        total += (2 * p * p) * mcfg.glimpse_hidden + mcfg.glimpse_hidden
        total += mcfg.glimpse_hidden * g + g
    else:
        prev = 2
        for f, k in zip(mcfg.glimpse_filters, mcfg.glimpse_kernels):
            total += f * prev * k * k + f
            prev = f
        side = _conv_out_size(p, mcfg.glimpse_kernels, mcfg.glimpse_strides)
        total += prev * side * side * g + g
    total += 2 * g + g                                   # g_loc
    total += (g + u) * 4 * u + 4 * u                     # lstm1
    total += (u + u) * 4 * u + 4 * u                     # lstm2
    total += u * mcfg.emission_hidden + mcfg.emission_hidden + mcfg.emission_hidden * 2 + 2
    total += u * mcfg.classifier_hidden + mcfg.classifier_hidden
    total += mcfg.classifier_hidden * mcfg.num_classes + mcfg.num_classes
    total += u * mcfg.baseline_hidden + mcfg.baseline_hidden + mcfg.baseline_hidden * 1 + 1
    prev = 1
    for f, k in zip(mcfg.context_filters, mcfg.context_kernels):
        total += f * prev * k * k + f
        prev = f
    side = _conv_out_size(scfg.context_size, mcfg.context_kernels, mcfg.context_strides)
    total += prev * side * side * u + u                  # ctx_fc
    return total
