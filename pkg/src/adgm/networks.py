"""Fully connected networks with Gaussian, categorical and Bernoulli heads.

Parameters live in a flat ``{name: ndarray}`` dict owned by the model and are
fetched through ``tape.param(name)``. Names follow
``<network>/<layer>/{W,b,gamma,beta,run_mean,run_var}`` with layers
``hidden0..hidden{M-1}`` and head layers ``mu``, ``log_var`` or ``logits``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .distributions import BernoulliParams, CategoricalParams, GaussianParams

HEAD_KINDS = ("gaussian", "categorical", "bernoulli", "deterministic")


@dataclass
class MLPSpec:
    input_dim: int
    hidden_dims: Sequence[int]
    batch_norm: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"invalid MLP dims: input {self.input_dim}, hidden {self.hidden_dims}")


@dataclass
class HeadSpec:
    kind: str
    output_dim: int

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.output_dim < 1:
            raise ValueError("head output_dim must be >= 1")

    @property
    def layers(self) -> tuple[str, ...]:
        # Gaussian heads own two independent linear maps.
        return {"gaussian": ("mu", "log_var"), "deterministic": ("mu",)}.get(self.kind, ("logits",))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, dim: int, **kw) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), **kw)


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot weights in [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def batch_norm_forward(
    state: BatchNormState, h: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, mode: str = "train"
) -> Tensor:
    if mode == "train":
        if h.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mu = ad.mean(h, axis=0, keepdims=True)
        centered = ad.sub(h, mu)
        var = ad.mean(ad.square(centered), axis=0, keepdims=True)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.data.reshape(-1)
        state.running_var = m * state.running_var + (1 - m) * var.data.reshape(-1)
        inv_std = ad.exp(ad.mul(-0.5, ad.log(ad.add(var, state.epsilon))))
        out = ad.mul(centered, inv_std)
    elif mode == "eval":
        scale = 1.0 / np.sqrt(state.running_var + state.epsilon)
        out = ad.mul(ad.sub(h, state.running_mean.astype(h.data.dtype)), scale.astype(h.data.dtype))
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    if gamma is not None:
        out = ad.mul(out, gamma)
    if beta is not None:
        out = ad.add(out, beta)
    return out


def _concat_inputs(inputs: Sequence[Tensor], expected: int) -> Tensor:
    h = ad.concat(list(inputs), axis=1) if len(inputs) > 1 else inputs[0]
    if h.ndim != 2 or h.shape[1] != expected:
        raise ValueError(f"network input has {h.shape[-1]} features, expected {expected}")
    return h


def mlp_forward(
    spec: MLPSpec,
    tape: Tape,
    prefix: str,
    inputs: Sequence[Tensor],
    bn: Sequence[BatchNormState] | None = None,
    mode: str = "train",
) -> Tensor:
    """M layers of Linear (+ batch norm) + ReLU; returns h_M."""
    h = _concat_inputs(inputs, spec.input_dim)
    for j in range(len(spec.hidden_dims)):
        layer = f"{prefix}/hidden{j}"
        h = ad.add(ad.matmul(h, tape.param(f"{layer}/W")), tape.param(f"{layer}/b"))
        if spec.batch_norm:
            h = batch_norm_forward(bn[j], h, tape.param(f"{layer}/gamma"), tape.param(f"{layer}/beta"), mode)
        h = ad.relu(h)
    return h


def head_forward(head: HeadSpec, tape: Tape, prefix: str, h: Tensor):
    def linear(layer):
        return ad.add(ad.matmul(h, tape.param(f"{prefix}/{layer}/W")), tape.param(f"{prefix}/{layer}/b"))

    if head.kind == "gaussian":
        return GaussianParams(linear("mu"), linear("log_var"))
    if head.kind == "categorical":
        return CategoricalParams(linear("logits"))
    if head.kind == "bernoulli":
        return BernoulliParams(linear("logits"))
    return linear("mu")


@dataclass
class Network:
    """One conditional distribution: an MLP trunk followed by a head."""

    name: str
    mlp: MLPSpec
    head: HeadSpec
    bn_states: list[BatchNormState] = field(default_factory=list)

    def __post_init__(self):
        if self.mlp.batch_norm and not self.bn_states:
            self.bn_states = [BatchNormState.create(d) for d in self.mlp.hidden_dims]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        fan_in = self.mlp.input_dim
        for j, width in enumerate(self.mlp.hidden_dims):
            layer = f"{self.name}/hidden{j}"
            params[f"{layer}/W"] = glorot_init(fan_in, width, rng)
            params[f"{layer}/b"] = np.zeros(width)
            if self.mlp.batch_norm:
                params[f"{layer}/gamma"] = np.ones(width)
                params[f"{layer}/beta"] = np.zeros(width)
            fan_in = width
        for layer in self.head.layers:
            params[f"{self.name}/{layer}/W"] = glorot_init(fan_in, self.head.output_dim, rng)
            params[f"{self.name}/{layer}/b"] = np.zeros(self.head.output_dim)
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for j, st in enumerate(self.bn_states):
            out[f"{self.name}/hidden{j}/run_mean"] = st.running_mean
            out[f"{self.name}/hidden{j}/run_var"] = st.running_var
        return out

    def load_buffers(self, tensors: dict[str, np.ndarray]) -> None:
        for j, st in enumerate(self.bn_states):
            st.running_mean = np.asarray(tensors[f"{self.name}/hidden{j}/run_mean"], dtype=np.float64)
            st.running_var = np.asarray(tensors[f"{self.name}/hidden{j}/run_var"], dtype=np.float64)

    def __call__(self, tape: Tape, inputs: Sequence[Tensor], mode: str = "train"):
        h = mlp_forward(self.mlp, tape, self.name, inputs, self.bn_states, mode)
        return head_forward(self.head, tape, self.name, h)
