"""Finite-difference checks of every bound on small random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tape, grad_check
from .bounds import (
    avae_elbo,
    labeled_objective,
    potential_fit_bound,
    unlabeled_bound,
    vae_elbo,
)
from .datasets import bimodal_potential
from .models import Kind, Model, ModelVariant

X_DIM, LAT_DIM, N_CLASSES, BATCH, HIDDEN = 5, 3, 3, 4, (6,)


def _model(kind: Kind, rng, obs="bernoulli", **kw) -> Model:
    semi = kind in (Kind.ADGM, Kind.SDGM, Kind.M2, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX)
    x_dim = 2 if kind is Kind.POTENTIAL_FIT else X_DIM
    z_dim = 2 if kind is Kind.POTENTIAL_FIT else LAT_DIM
    v = ModelVariant(kind, x_dim=x_dim, y_dim=N_CLASSES if semi else 0, a_dim=LAT_DIM, z_dim=z_dim,
                     hidden_dims=HIDDEN, obs=obs, **kw)
    m = Model.create(v, rng)
    # non-zero biases so that bias gradients are exercised away from the init point
    for k, p in m.params.items():
        m.params[k] = p + 0.1 * rng.standard_normal(p.shape)
    return m


def _x(rng, obs):
    if obs == "bernoulli":
        return (rng.random((BATCH, X_DIM)) < 0.5).astype(np.float64)
    return rng.standard_normal((BATCH, X_DIM))


def _scalar(t) -> ad.Tensor:
    return ad.sum(t)


def build_cases(seed: int = 0) -> dict[str, tuple[Callable[[Tape], ad.Tensor], dict]]:
    """name -> (f(tape) -> scalar, params) with all noise frozen."""
    rng = np.random.default_rng(seed)
    cases = {}
    tau = 0.75

    for obs in ("bernoulli", "gaussian"):
        m = _model(Kind.VAE, rng, obs)
        x, ez = _x(rng, obs), rng.standard_normal((BATCH, LAT_DIM))
        cases[f"VAE[{obs}]"] = (lambda t, m=m, x=x, ez=ez: _scalar(vae_elbo(t, m, x, ez, tau).total), m.params)

    m = _model(Kind.AVAE, rng)
    x = _x(rng, "bernoulli")
    ea, ez = rng.standard_normal((BATCH, LAT_DIM)), rng.standard_normal((BATCH, LAT_DIM))
    cases["AVAE L=1"] = (lambda t, m=m, x=x, ea=ea, ez=ez: _scalar(avae_elbo(t, m, x, ea, ez, tau).total), m.params)

    m = _model(Kind.AVAE, rng, layers=2)
    x = _x(rng, "bernoulli")
    ea = tuple(rng.standard_normal((BATCH, LAT_DIM)) for _ in range(2))
    ez = tuple(rng.standard_normal((BATCH, LAT_DIM)) for _ in range(2))
    cases["AVAE L=2"] = (lambda t, m=m, x=x, ea=ea, ez=ez: _scalar(avae_elbo(t, m, x, ea, ez, tau).total), m.params)

    for kind in (Kind.ADGM, Kind.SDGM, Kind.M2, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX):
        m = _model(kind, rng)
        x = _x(rng, "bernoulli")
        y = np.eye(N_CLASSES)[rng.integers(0, N_CLASSES, BATCH)]
        ea = None if kind is Kind.M2 else rng.standard_normal((BATCH, LAT_DIM))
        ez = rng.standard_normal((BATCH, LAT_DIM))
        cases[f"{kind.value} labeled"] = (
            lambda t, m=m, x=x, y=y, ea=ea, ez=ez: _scalar(labeled_objective(t, m, x, y, 2.0, ea, ez, tau).loss),
            m.params,
        )
        ezc = rng.standard_normal((N_CLASSES, BATCH, LAT_DIM))
        cases[f"{kind.value} unlabeled"] = (
            lambda t, m=m, x=x, ea=ea, ezc=ezc: _scalar(unlabeled_bound(t, m, x, ea, ezc, tau).total),
            m.params,
        )

    m = _model(Kind.ADGM, rng, obs="gaussian", aux_generative_conditions_on_x=True)
    x = _x(rng, "gaussian")
    ea, ezc = rng.standard_normal((BATCH, LAT_DIM)), rng.standard_normal((N_CLASSES, BATCH, LAT_DIM))
    cases["ADGM unlabeled[gaussian, p(a|z,y,x)]"] = (
        lambda t, m=m, x=x, ea=ea, ezc=ezc: _scalar(unlabeled_bound(t, m, x, ea, ezc, tau).total),
        m.params,
    )

    m = _model(Kind.POTENTIAL_FIT, rng)
    target = bimodal_potential()
    ea, ez = rng.standard_normal((BATCH, LAT_DIM)), rng.standard_normal((BATCH, 2))
    cases["PotentialFit"] = (
        lambda t, m=m, ea=ea, ez=ez: _scalar(potential_fit_bound(t, m, target.log_potential, ea, ez, tau).total),
        m.params,
    )
    return cases


def run_suite(seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> dict[str, GradCheckReport]:
    return {name: grad_check(f, params, step=step, tol=tol) for name, (f, params) in build_cases(seed).items()}
