"""Variational objectives for every model variant.

All bounds are returned as :class:`BoundEstimate` with per-item vectors.
Sign convention: ``BoundEstimate.total`` is a lower bound (larger is
better). ``labeled_objective`` and ``total_objective`` return losses, i.e.
the negated bounds plus the weighted classification term, to be minimised.

Warm-up temperature ``tau`` scales every non-reconstruction component (all
prior log-densities minus all variational log-densities, plus the entropy
of q(y|a,x)); the reconstruction term log p(x|.) is never tempered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .distributions import (
    CategoricalParams,
    categorical_entropy,
    categorical_log_prob,
    check_onehot,
    gaussian_log_density,
    gaussian_rsample,
    obs_log_likelihood,
    standard_normal_log_density,
)
from .models import SEMI_SUPERVISED, Kind, Model


class VariantError(ValueError):
    pass


@dataclass
class BoundEstimate:
    reconstruction: Tensor
    latent: Tensor
    total: Tensor
    entropy: Tensor | None = None
    tau: float = 1.0

    def mean(self) -> float:
        return float(np.mean(self.total.data))


def _estimate(recon: Tensor, latent: Tensor, entropy: Tensor | None = None, tau: float = 1.0) -> BoundEstimate:
    rest = latent if entropy is None else ad.add(latent, entropy)
    if tau != 1.0:
        rest = ad.mul(rest, float(tau))
    return BoundEstimate(recon, latent, ad.add(recon, rest), entropy, tau)


def _require(model: Model, *kinds: Kind) -> None:
    if model.kind not in kinds:
        raise VariantError(f"bound not defined for variant {model.kind.value}")


def _log_prior_y(n: int, c: int, dtype) -> np.ndarray:
    return np.full(n, -math.log(c), dtype=dtype)


# ---------------------------------------------------------------------------
# unsupervised


def vae_elbo(tape: Tape, model: Model, x, eps_z, tau: float = 1.0) -> BoundEstimate:
    _require(model, Kind.VAE)
    x = tape.constant(x)
    qz = model.dist(tape, "q_z", x=x)
    z = gaussian_rsample(qz, tape.constant(eps_z))
    px = model.dist(tape, "p_x", z=z)
    recon = obs_log_likelihood(x, px)
    latent = ad.sub(standard_normal_log_density(z), gaussian_log_density(z, qz))
    return _estimate(recon, latent, tau=tau)


def avae_elbo(tape: Tape, model: Model, x, eps_a, eps_z, tau: float = 1.0) -> BoundEstimate:
    """Auxiliary VAE bound; for two layers ``eps_a``/``eps_z`` are pairs."""
    _require(model, Kind.AVAE)
    x = tape.constant(x)
    if model.variant.layers == 1:
        qa = model.dist(tape, "q_a", x=x)
        a = gaussian_rsample(qa, tape.constant(eps_a))
        qz = model.dist(tape, "q_z", a=a, x=x)
        z = gaussian_rsample(qz, tape.constant(eps_z))
        pa = model.dist(tape, "p_a", z=z, x=x)
        px = model.dist(tape, "p_x", z=z)
        recon = obs_log_likelihood(x, px)
        z_part = ad.sub(standard_normal_log_density(z), gaussian_log_density(z, qz))
        a_part = ad.sub(gaussian_log_density(a, pa), gaussian_log_density(a, qa))
        return _estimate(recon, ad.add(z_part, a_part), tau=tau)

    (ea1, ea2), (ez1, ez2) = eps_a, eps_z
    qa1 = model.dist(tape, "q_a1", x=x)
    a1 = gaussian_rsample(qa1, tape.constant(ea1))
    qz1 = model.dist(tape, "q_z1", a1=a1, x=x)
    z1 = gaussian_rsample(qz1, tape.constant(ez1))
    qa2 = model.dist(tape, "q_a2", a1=a1, x=x)
    a2 = gaussian_rsample(qa2, tape.constant(ea2))
    qz2 = model.dist(tape, "q_z2", a2=a2, z1=z1)
    z2 = gaussian_rsample(qz2, tape.constant(ez2))

    px = model.dist(tape, "p_x", z1=z1)
    pz1 = model.dist(tape, "p_z1", z2=z2)
    pa2 = model.dist(tape, "p_a2", z2=z2)
    pa1 = model.dist(tape, "p_a1", z1=z1, z2=z2)

    recon = obs_log_likelihood(x, px)
    log_p = ad.add(
        ad.add(gaussian_log_density(z1, pz1), standard_normal_log_density(z2)),
        ad.add(gaussian_log_density(a2, pa2), gaussian_log_density(a1, pa1)),
    )
    log_q = ad.add(
        ad.add(gaussian_log_density(a1, qa1), gaussian_log_density(z1, qz1)),
        ad.add(gaussian_log_density(a2, qa2), gaussian_log_density(z2, qz2)),
    )
    return _estimate(recon, ad.sub(log_p, log_q), tau=tau)


# ---------------------------------------------------------------------------
# semi-supervised


def _infer_a(tape: Tape, model: Model, x: Tensor, eps_a):
    """Sample a ~ q(a|x); returns (a, log q(a|x) or None)."""
    k = model.kind
    if k is Kind.M2:
        return None, None
    qa = model.dist(tape, "q_a", x=x)
    if k is Kind.ADGM_DET_AUX:
        return qa, None
    a = gaussian_rsample(qa, tape.constant(eps_a))
    return a, gaussian_log_density(a, qa)


def _classifier(tape: Tape, model: Model, a, x) -> CategoricalParams:
    if model.kind is Kind.M2:
        return model.dist(tape, "q_y", x=x)
    return model.dist(tape, "q_y", a=a, x=x)


def _terms_given_a(tape: Tape, model: Model, x: Tensor, y: Tensor, a, log_qa, eps_z):
    """Reconstruction and latent log-ratio of f(a, x, y, z) with z ~ q(z|a,y,x)."""
    k = model.kind
    if k is Kind.M2:
        qz = model.dist(tape, "q_z", y=y, x=x)
    else:
        qz = model.dist(tape, "q_z", a=a, y=y, x=x)
    z = gaussian_rsample(qz, tape.constant(eps_z))
    px = model.dist(tape, "p_x", z=z, y=y, a=a) if k is Kind.SDGM else model.dist(tape, "p_x", z=z, y=y)
    recon = obs_log_likelihood(x, px)

    n = x.shape[0]
    log_p = ad.add(standard_normal_log_density(z), _log_prior_y(n, model.n_classes, tape.dtype))
    if k in (Kind.ADGM, Kind.SDGM):
        pa = model.dist(tape, "p_a", z=z, y=y, x=x)
        log_p = ad.add(log_p, gaussian_log_density(a, pa))
    elif k is Kind.ADGM_UNINFORMED_AUX:
        log_p = ad.add(log_p, standard_normal_log_density(a))
    log_q = gaussian_log_density(z, qz)
    if log_qa is not None:
        log_q = ad.add(log_qa, log_q)
    return recon, ad.sub(log_p, log_q)


def _labeled(tape, model, x, y, eps_a, eps_z, tau):
    _require(model, *SEMI_SUPERVISED)
    x, y = tape.constant(x), tape.constant(y)
    if y.shape != (x.shape[0], model.n_classes):
        raise ValueError(f"labels must be one-hot with shape {(x.shape[0], model.n_classes)}")
    check_onehot(y, model.n_classes)
    a, log_qa = _infer_a(tape, model, x, eps_a)
    recon, latent = _terms_given_a(tape, model, x, y, a, log_qa, eps_z)
    return _estimate(recon, latent, tau=tau), a, x, y


def labeled_bound(tape: Tape, model: Model, x, y, eps_a, eps_z, tau: float = 1.0) -> BoundEstimate:
    """-L(x, y): single-sample bound on log p(x, y)."""
    return _labeled(tape, model, x, y, eps_a, eps_z, tau)[0]


def _tile(t: Tensor, c: int) -> Tensor:
    return ad.concat([t] * c, axis=0)


def _per_class(t: Tensor, c: int, n: int) -> Tensor:
    """(c*n,) class-major vector -> (n, c)."""
    return ad.transpose(ad.reshape(t, (c, n)))


def unlabeled_bound(tape: Tape, model: Model, x, eps_a, eps_z_per_class, tau: float = 1.0) -> BoundEstimate:
    """-U(x): sum over y of q(y|a,x) f(a,x,y,z_y) plus the entropy of q(y|a,x).

    ``eps_z_per_class`` has shape (C, n, dim_z); class ``c`` uses slice ``c``.
    """
    _require(model, *SEMI_SUPERVISED)
    x = tape.constant(x)
    n, c = x.shape[0], model.n_classes
    eps_z = np.asarray(eps_z_per_class)
    if eps_z.shape[:2] != (c, n):
        raise ValueError(f"eps_z_per_class must have leading shape {(c, n)}, got {eps_z.shape}")
    a, log_qa = _infer_a(tape, model, x, eps_a)
    qy = _classifier(tape, model, a, x)

    y_rep = tape.constant(np.repeat(np.eye(c, dtype=tape.dtype), n, axis=0))
    x_rep = _tile(x, c)
    a_rep = _tile(a, c) if a is not None else None
    lqa_rep = _tile(log_qa, c) if log_qa is not None else None
    recon, latent = _terms_given_a(tape, model, x_rep, y_rep, a_rep, lqa_rep, eps_z.reshape(c * n, -1))

    probs = qy.probs()
    recon_u = ad.sum(ad.mul(probs, _per_class(recon, c, n)), axis=1)
    latent_u = ad.sum(ad.mul(probs, _per_class(latent, c, n)), axis=1)
    return _estimate(recon_u, latent_u, categorical_entropy(qy), tau=tau)


def m2_bounds(tape: Tape, model: Model, x, y=None, eps_z=None, tau: float = 1.0) -> BoundEstimate:
    """Labeled bound when ``y`` is given, otherwise the enumerated unlabeled bound."""
    _require(model, Kind.M2)
    if y is None:
        return unlabeled_bound(tape, model, x, None, eps_z, tau)
    return labeled_bound(tape, model, x, y, None, eps_z, tau)


def alpha(beta: float, n_labeled: int, n_unlabeled: int) -> float:
    """Classification weight beta * (N_l + N_u) / N_l."""
    if n_labeled < 1:
        raise ValueError("alpha needs at least one labeled point")
    return beta * (n_labeled + n_unlabeled) / n_labeled


@dataclass
class LabeledObjective:
    loss: Tensor  # per item, L_l(x, y)
    bound: BoundEstimate
    class_loss: Tensor  # per item, -log q(y|a,x)


def labeled_objective(tape: Tape, model: Model, x, y, alpha_: float, eps_a, eps_z, tau: float = 1.0):
    """L(x,y) + alpha * (-log q(y|a,x)) with the same a sample as the bound."""
    if alpha_ < 0:
        raise ValueError("alpha must be >= 0")
    bound, a, xt, yt = _labeled(tape, model, x, y, eps_a, eps_z, tau)
    class_loss = ad.neg(categorical_log_prob(yt, _classifier(tape, model, a, xt)))
    loss = ad.neg(bound.total)
    if alpha_:
        loss = ad.add(loss, ad.mul(class_loss, float(alpha_)))
    return LabeledObjective(loss, bound, class_loss)


# ---------------------------------------------------------------------------
# batch objective


@dataclass
class Batch:
    x_l: np.ndarray
    y_l: np.ndarray  # one-hot
    x_u: np.ndarray

    @property
    def n_l(self) -> int:
        return 0 if self.x_l is None else len(self.x_l)

    @property
    def n_u(self) -> int:
        return 0 if self.x_u is None else len(self.x_u)


@dataclass
class ObjectiveResult:
    J: Tensor  # scalar loss
    labeled: float | None  # mean L_l over labeled items
    unlabeled: float | None  # mean U over unlabeled items
    class_loss: float | None


NoiseFn = Callable[[tuple], np.ndarray]


def _eps(noise: NoiseFn, shape, dtype):
    return np.asarray(noise(shape), dtype=dtype)


def total_objective(
    tape: Tape, model: Model, batch: Batch, alpha_: float, tau: float, noise: NoiseFn, n_mc: int = 1
) -> ObjectiveResult:
    """Per-item mean of sum(L_l) + sum(U) over the batch.

    ``noise(shape)`` supplies standard normal draws; for each MC sample the
    labeled part draws (eps_a, eps_z) and then the unlabeled part draws
    (eps_a, eps_z_per_class).
    """
    n_l, n_u = batch.n_l, batch.n_u
    if n_l + n_u == 0:
        raise ValueError("empty batch")
    v = model.variant
    c = model.n_classes
    dt = tape.dtype
    losses = []
    lab = unl = cls = 0.0
    for _ in range(n_mc):
        parts = []
        if n_l:
            ea = _eps(noise, (n_l, v.a_dim), dt) if model.kind is not Kind.M2 else None
            ez = _eps(noise, (n_l, v.z_dim), dt)
            lo = labeled_objective(tape, model, batch.x_l, batch.y_l, alpha_, ea, ez, tau)
            parts.append(ad.sum(lo.loss))
            lab += float(np.mean(lo.loss.data))
            cls += float(np.mean(lo.class_loss.data))
        if n_u:
            ea = _eps(noise, (n_u, v.a_dim), dt) if model.kind is not Kind.M2 else None
            ez = _eps(noise, (c, n_u, v.z_dim), dt)
            ub = unlabeled_bound(tape, model, batch.x_u, ea, ez, tau)
            u_loss = ad.neg(ub.total)
            parts.append(ad.sum(u_loss))
            unl += float(np.mean(u_loss.data))
        total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
        losses.append(total)
    J = losses[0]
    for extra in losses[1:]:
        J = ad.add(J, extra)
    J = ad.mul(J, 1.0 / (n_mc * (n_l + n_u)))
    return ObjectiveResult(
        J,
        lab / n_mc if n_l else None,
        unl / n_mc if n_u else None,
        cls / n_mc if n_l else None,
    )


def elbo_objective(tape: Tape, model: Model, x, tau: float, noise: NoiseFn, n_mc: int = 1) -> ObjectiveResult:
    """Negative mean ELBO for the unsupervised variants."""
    _require(model, Kind.VAE, Kind.AVAE)
    v = model.variant
    n = len(x)
    dt = tape.dtype
    acc = None
    for _ in range(n_mc):
        if model.kind is Kind.VAE:
            b = vae_elbo(tape, model, x, _eps(noise, (n, v.z_dim), dt), tau)
        elif v.layers == 1:
            ea = _eps(noise, (n, v.a_dim), dt)
            b = avae_elbo(tape, model, x, ea, _eps(noise, (n, v.z_dim), dt), tau)
        else:
            ea = (_eps(noise, (n, v.a_dim), dt), _eps(noise, (n, v.a_dim), dt))
            ez = (_eps(noise, (n, v.z_dim), dt), _eps(noise, (n, v.z_dim), dt))
            b = avae_elbo(tape, model, x, ea, ez, tau)
        s = ad.sum(b.total)
        acc = s if acc is None else ad.add(acc, s)
    J = ad.mul(acc, -1.0 / (n_mc * n))
    return ObjectiveResult(J, None, float(J.data), None)


# ---------------------------------------------------------------------------
# potential fitting


def potential_fit_bound(
    tape: Tape, model: Model, log_potential: Callable[[Tensor], Tensor], eps_a, eps_z, tau: float = 1.0
) -> BoundEstimate:
    """Estimate of E_q(a,z)[U(z) + log p(a|z) - log q(a) - log q(z|a)] (bound on log Z)."""
    _require(model, Kind.POTENTIAL_FIT)
    eps_a = tape.constant(eps_a)
    qa = model.q_a_free(tape, eps_a.shape[0])
    a = gaussian_rsample(qa, eps_a)
    qz = model.dist(tape, "q_z", a=a)
    z = gaussian_rsample(qz, tape.constant(eps_z))
    pa = model.dist(tape, "p_a", z=z)
    data_term = log_potential(z)
    latent = ad.sub(gaussian_log_density(a, pa), ad.add(gaussian_log_density(a, qa), gaussian_log_density(z, qz)))
    return _estimate(data_term, latent, tau=tau)


def potential_objective(tape, model, log_potential, n: int, tau: float, noise: NoiseFn) -> ObjectiveResult:
    v = model.variant
    b = potential_fit_bound(
        tape, model, log_potential, _eps(noise, (n, v.a_dim), tape.dtype), _eps(noise, (n, v.z_dim), tape.dtype), tau
    )
    J = ad.neg(ad.mean(b.total))
    return ObjectiveResult(J, None, float(J.data), None)

