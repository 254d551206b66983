"""Diagonal Gaussian, categorical and Bernoulli families on the tape."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_VAR_CLAMP = 15.0
LOGIT_CLAMP = 15.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr if arr.dtype.kind == "f" else arr.astype(np.float64))


@dataclass
class GaussianParams:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = _t(self.mu)
        self.log_var = ad.clip(_t(self.log_var), -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def shape(self):
        return self.mu.shape

    @classmethod
    def standard(cls, shape, dtype=np.float64) -> "GaussianParams":
        z = np.zeros(shape, dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))

    def mean(self) -> np.ndarray:
        return self.mu.data


@dataclass
class CategoricalParams:
    logits: Tensor

    def __post_init__(self):
        self.logits = _t(self.logits)
        self.log_probs = ad.sub(self.logits, ad.log_sum_exp(self.logits, axis=1, keepdims=True))

    def probs(self) -> Tensor:
        return ad.exp(self.log_probs)

    def mean(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class BernoulliParams:
    logits: Tensor

    def __post_init__(self):
        self.logits = ad.clip(_t(self.logits), -LOGIT_CLAMP, LOGIT_CLAMP)

    def mean(self) -> np.ndarray:
        return ad._sigmoid(self.logits.data)


def _same_shape(name, x: Tensor, ref: Tensor) -> None:
    if x.shape != ref.shape:
        raise ValueError(f"{name}: shape {x.shape} does not match parameters {ref.shape}")


def gaussian_log_density(x, p: GaussianParams) -> Tensor:
    """Log N(x | mu, exp(log_var)) summed over the last axis."""
    x = _t(x)
    _same_shape("gaussian_log_density", x, p.mu)
    sq = ad.square(ad.sub(x, p.mu))
    per_dim = ad.add(ad.mul(-0.5, ad.add(p.log_var, ad.mul(sq, ad.exp(ad.neg(p.log_var))))), -HALF_LOG_2PI)
    return ad.sum(per_dim, axis=-1)


def standard_normal_log_density(x) -> Tensor:
    x = _t(x)
    return ad.sum(ad.add(ad.mul(-0.5, ad.square(x)), -HALF_LOG_2PI), axis=-1)


gaussian_obs_log_likelihood = gaussian_log_density


def gaussian_rsample(p: GaussianParams, eps) -> Tensor:
    eps = _t(eps)
    _same_shape("gaussian_rsample", eps, p.mu)
    return ad.add(p.mu, ad.mul(ad.exp(ad.mul(0.5, p.log_var)), eps))


def gaussian_kl_to_standard(p: GaussianParams) -> Tensor:
    """Per-dimension KL(N(mu, var) || N(0, 1))."""
    return ad.mul(0.5, ad.sub(ad.sub(ad.add(ad.square(p.mu), ad.exp(p.log_var)), p.log_var), 1.0))


def check_onehot(y: Tensor, c: int) -> None:
    d = y.data
    if d.ndim != 2 or d.shape[1] != c or not np.all((d == 0) | (d == 1)) or not np.all(d.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows")


def categorical_log_prob(y_onehot, p: CategoricalParams) -> Tensor:
    y = _t(y_onehot)
    check_onehot(y, p.logits.shape[1])
    return ad.sum(ad.mul(y, p.log_probs), axis=1)


def categorical_entropy(p: CategoricalParams) -> Tensor:
    return ad.neg(ad.sum(ad.mul(p.probs(), p.log_probs), axis=1))


def bernoulli_log_likelihood(x, p: BernoulliParams) -> Tensor:
    """Sum of x log p + (1 - x) log(1 - p), written as x*l - softplus(l)."""
    x = _t(x)
    if not np.all((x.data == 0) | (x.data == 1)):
        raise ValueError("bernoulli_log_likelihood requires binary x")
    _same_shape("bernoulli_log_likelihood", x, p.logits)
    return ad.sum(ad.sub(ad.mul(x, p.logits), ad.softplus(p.logits)), axis=-1)


def obs_log_likelihood(x, p) -> Tensor:
    if isinstance(p, BernoulliParams):
        return bernoulli_log_likelihood(x, p)
    return gaussian_log_density(x, p)
