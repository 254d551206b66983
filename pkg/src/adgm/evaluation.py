"""Post-training measurements: IW likelihood, classification, latent diagnostics, samples."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bounds import avae_elbo, vae_elbo
from .distributions import GaussianParams, gaussian_kl_to_standard, gaussian_rsample
from .models import SEMI_SUPERVISED, Kind, Model


@dataclass
class IwEstimate:
    value: float
    K: int
    per_datapoint: np.ndarray


@dataclass
class UnitActivity:
    a: np.ndarray | None
    z: np.ndarray | None


def _nograd(model: Model):
    return model.tape(requires_grad=False)


def iw_log_likelihood(x, model: Model, K: int, rng: np.random.Generator, chunk: int = 250) -> IwEstimate:
    """log (1/K) sum_k p(x, latents_k) / q(latents_k | x) for VAE/AVAE.

    Noise is drawn per block of at most ``chunk`` samples with shape
    (block, n, dim); for AVAE the a-noise is drawn before the z-noise (two
    layers: a1, a2, z1, z2).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if model.kind not in (Kind.VAE, Kind.AVAE):
        raise ValueError("importance weighting is defined for VAE and AVAE")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    v = model.variant
    log_w = []
    done = 0
    with model.evaluating():
        while done < K:
            k = min(chunk, K - done)
            xr = np.tile(x, (k, 1))
            tape = _nograd(model)
            if model.kind is Kind.VAE:
                ez = rng.standard_normal((k, n, v.z_dim)).reshape(k * n, -1)
                b = vae_elbo(tape, model, xr, ez)
            elif v.layers == 1:
                ea = rng.standard_normal((k, n, v.a_dim)).reshape(k * n, -1)
                ez = rng.standard_normal((k, n, v.z_dim)).reshape(k * n, -1)
                b = avae_elbo(tape, model, xr, ea, ez)
            else:
                ea = tuple(rng.standard_normal((k, n, v.a_dim)).reshape(k * n, -1) for _ in range(2))
                ez = tuple(rng.standard_normal((k, n, v.z_dim)).reshape(k * n, -1) for _ in range(2))
                b = avae_elbo(tape, model, xr, ea, ez)
            log_w.append(b.total.data.reshape(k, n))
            done += k
    lw = np.concatenate(log_w, axis=0)
    m = lw.max(axis=0)
    per = m + np.log(np.exp(lw - m).sum(axis=0)) - math.log(K)
    return IwEstimate(float(per.mean()), K, per)


def class_probabilities(x, model: Model, n_mc: int, rng: np.random.Generator) -> np.ndarray:
    """(1/n_mc) sum_i q(y | a_i, x), a_i ~ q(a|x)."""
    if model.kind not in SEMI_SUPERVISED:
        raise ValueError(f"{model.kind.value} has no classifier")
    x = np.asarray(x, dtype=np.float64)
    tape = _nograd(model)
    xt = tape.constant(x)
    with model.evaluating():
        if model.kind is Kind.M2:
            return model.dist(tape, "q_y", x=xt).mean()
        qa = model.dist(tape, "q_a", x=xt)
        if model.kind is Kind.ADGM_DET_AUX:
            return model.dist(tape, "q_y", a=qa, x=xt).mean()
        acc = np.zeros((len(x), model.n_classes))
        for _ in range(n_mc):
            a = gaussian_rsample(qa, tape.constant(rng.standard_normal(qa.shape)))
            acc += model.dist(tape, "q_y", a=a, x=xt).mean()
    return acc / n_mc


def classify(x, model: Model, n_mc: int, rng: np.random.Generator) -> np.ndarray:
    """Argmax of the MC-averaged class probabilities (ties go to the lowest index)."""
    return np.argmax(class_probabilities(x, model, n_mc, rng), axis=1)


def classification_error(preds, truth) -> float:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError("preds and truth differ in length")
    return float(np.mean(preds != truth)) if preds.size else 0.0


def kl_per_unit(x, model: Model, n_mc: int, rng: np.random.Generator) -> UnitActivity:
    """Mean per-dimension KL of each latent unit from its prior.

    z units use the analytic KL to N(0, 1) (weighted by q(y|a,x) for the
    semi-supervised variants); a units use an MC estimate of
    E[log q(a|x) - log p(a|.)] with ``n_mc`` samples per datapoint.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    k = model.kind
    tape = _nograd(model)
    xt = tape.constant(x)

    def per_dim_logpdf(a, p: GaussianParams):
        return (-0.5 * (np.log(2 * np.pi) + p.log_var.data + (a - p.mu.data) ** 2 * np.exp(-p.log_var.data)))

    with model.evaluating():
        if k is Kind.VAE:
            q = model.dist(tape, "q_z", x=xt)
            return UnitActivity(None, gaussian_kl_to_standard(q).data.mean(axis=0))
        if k is Kind.POTENTIAL_FIT:
            raise ValueError("kl_per_unit needs a data-conditioned model")

        kl_a = np.zeros(model.variant.a_dim) if k not in (Kind.M2, Kind.ADGM_DET_AUX) else None
        kl_z = np.zeros(model.variant.z_dim)
        for _ in range(n_mc):
            if k is Kind.AVAE:
                lname = "q_a" if model.variant.layers == 1 else "q_a1"
                qa = model.dist(tape, lname, x=xt)
                a = gaussian_rsample(qa, tape.constant(rng.standard_normal(qa.shape)))
                if model.variant.layers == 1:
                    qz = model.dist(tape, "q_z", a=a, x=xt)
                    z = gaussian_rsample(qz, tape.constant(rng.standard_normal(qz.shape)))
                    pa = model.dist(tape, "p_a", z=z, x=xt)
                else:
                    qz = model.dist(tape, "q_z1", a1=a, x=xt)
                    z = gaussian_rsample(qz, tape.constant(rng.standard_normal(qz.shape)))
                    qa2 = model.dist(tape, "q_a2", a1=a, x=xt)
                    a2 = gaussian_rsample(qa2, tape.constant(rng.standard_normal(qa2.shape)))
                    qz2 = model.dist(tape, "q_z2", a2=a2, z1=z)
                    z2 = gaussian_rsample(qz2, tape.constant(rng.standard_normal(qz2.shape)))
                    pa = model.dist(tape, "p_a1", z1=z, z2=z2)
                kl_z += gaussian_kl_to_standard(qz).data.mean(axis=0)
                kl_a += (per_dim_logpdf(a.data, qa) - per_dim_logpdf(a.data, pa)).mean(axis=0)
                continue

            c = model.n_classes
            if k is Kind.M2:
                a = None
                probs = model.dist(tape, "q_y", x=xt).mean()
            else:
                qa = model.dist(tape, "q_a", x=xt)
                if k is Kind.ADGM_DET_AUX:
                    a = qa
                else:
                    a = gaussian_rsample(qa, tape.constant(rng.standard_normal(qa.shape)))
                probs = model.dist(tape, "q_y", a=a, x=xt).mean()
            for cls in range(c):
                y = tape.constant(np.eye(c)[np.full(n, cls)])
                w = probs[:, cls : cls + 1]
                qz = model.dist(tape, "q_z", y=y, x=xt) if k is Kind.M2 else model.dist(tape, "q_z", a=a, y=y, x=xt)
                kl_z += (w * gaussian_kl_to_standard(qz).data).mean(axis=0)
                if kl_a is None:
                    continue
                z = gaussian_rsample(qz, tape.constant(rng.standard_normal(qz.shape)))
                if k is Kind.ADGM_UNINFORMED_AUX:
                    prior = per_dim_logpdf(a.data, GaussianParams.standard(a.shape))
                else:
                    prior = per_dim_logpdf(a.data, model.dist(tape, "p_a", z=z, y=y, x=xt))
                kl_a += (w * (per_dim_logpdf(a.data, qa) - prior)).mean(axis=0)
    # MC noise can push an inactive a-unit slightly below zero
    return UnitActivity(None if kl_a is None else np.maximum(kl_a / n_mc, 0.0), kl_z / n_mc)


def _decode_mean(model: Model, tape, **inputs) -> np.ndarray:
    return model.dist(tape, "p_x", **inputs).mean()


def analogies(x, model: Model, rng: np.random.Generator) -> np.ndarray:
    """Push one datapoint through q(a|x) and q(z|a,y_j,x), decode p(x|y_j,z_j) for every class."""
    if model.kind not in SEMI_SUPERVISED:
        raise ValueError("analogies need a semi-supervised variant")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    c = model.n_classes
    tape = _nograd(model)
    with model.evaluating():
        xt = tape.constant(np.repeat(x, c, axis=0))
        y = tape.constant(np.eye(c))
        if model.kind is Kind.M2:
            a = None
            qz = model.dist(tape, "q_z", y=y, x=xt)
        else:
            qa = model.dist(tape, "q_a", x=tape.constant(x))
            if model.kind is Kind.ADGM_DET_AUX:
                a1 = qa
            else:
                a1 = gaussian_rsample(qa, tape.constant(rng.standard_normal(qa.shape)))
            a = tape.constant(np.repeat(a1.data, c, axis=0))
            qz = model.dist(tape, "q_z", a=a, y=y, x=xt)
        z = gaussian_rsample(qz, tape.constant(rng.standard_normal(qz.shape)))
        if model.kind is Kind.SDGM:
            return _decode_mean(model, tape, z=z, y=y, a=a)
        return _decode_mean(model, tape, z=z, y=y)


def sample_prior(model: Model, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws z ~ N(0, I), each decoded once per class; rows are sample-major."""
    v = model.variant
    tape = _nograd(model)
    with model.evaluating():
        if model.kind in (Kind.VAE, Kind.AVAE):
            zname = "z1" if model.kind is Kind.AVAE and v.layers == 2 else "z"
            if zname == "z1":
                z2 = tape.constant(rng.standard_normal((n, v.z_dim)))
                z = gaussian_rsample(model.dist(tape, "p_z1", z2=z2), tape.constant(rng.standard_normal((n, v.z_dim))))
                return _decode_mean(model, tape, z1=z)
            return _decode_mean(model, tape, z=tape.constant(rng.standard_normal((n, v.z_dim))))
        if model.kind not in SEMI_SUPERVISED:
            raise ValueError("sample_prior needs a generative model over x")
        c = model.n_classes
        z = tape.constant(np.repeat(rng.standard_normal((n, v.z_dim)), c, axis=0))
        y = tape.constant(np.tile(np.eye(c), (n, 1)))
        if model.kind is Kind.SDGM:
            pa = model.dist(tape, "p_a", z=z, y=y)
            a = gaussian_rsample(pa, tape.constant(rng.standard_normal(pa.shape)))
            return _decode_mean(model, tape, z=z, y=y, a=a)
        return _decode_mean(model, tape, z=z, y=y)


def auxiliary_means(x, model: Model) -> np.ndarray:
    """Mean of q(a|x); the auxiliary-space representation used for PCA plots."""
    tape = _nograd(model)
    with model.evaluating():
        qa = model.dist(tape, "q_a" if "q_a" in model.networks else "q_a1", x=tape.constant(np.asarray(x, float)))
    return qa.data if isinstance(qa, ad.Tensor) else qa.mu.data


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    projections: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, d), orthonormal rows
    eigenvalues: np.ndarray  # (2,)
    explained_variance_ratio: np.ndarray  # (2,)
    rank_deficient: bool = False


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int):
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        lam_new = float(w @ cov @ w)
        converged = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
        v, lam = w, lam_new
        if converged:
            break
    return v, lam


def _sign_fix(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def pca_2d(points, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> PCAResult:
    """Top-2 principal components by power iteration with deflation."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("pca_2d needs at least 2 points in at least 2 dimensions")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    rng = np.random.default_rng(seed)
    v1, l1 = _power_iteration(cov, rng, tol, max_iter)
    v1 = _sign_fix(v1)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, l2 = _power_iteration(deflated, rng, tol, max_iter)
    # re-orthogonalise against v1 to kill drift
    v2 = v2 - (v2 @ v1) * v1
    deficient = l2 <= 1e-12 * max(l1, 1e-300) or np.linalg.norm(v2) < 1e-8
    if np.linalg.norm(v2) < 1e-8:
        e = np.zeros_like(v1)
        e[np.argmin(np.abs(v1))] = 1.0
        v2 = e - (e @ v1) * v1
    v2 = _sign_fix(v2 / np.linalg.norm(v2))
    comps = np.stack([v1, v2])
    total = float(np.trace(cov))
    eig = np.array([l1, max(l2, 0.0)])
    ratio = eig / total if total > 0 else np.zeros(2)
    return PCAResult(centered @ comps.T, comps, eig, ratio, bool(deficient))


# ---------------------------------------------------------------------------
# dumps


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, images: np.ndarray, kept_columns=None, shape=(28, 28), cols: int | None = None) -> None:
    """Tile images into one binary PGM, re-inserting pruned pixel columns as 0."""
    imgs = np.asarray(images, dtype=np.float64)
    h, w = shape
    if kept_columns is not None:
        full = np.zeros((len(imgs), h * w))
        full[:, np.asarray(kept_columns)] = imgs
        imgs = full
    imgs = imgs.reshape(len(imgs), h, w)
    cols = cols or min(len(imgs), 10)
    rows = math.ceil(len(imgs) / cols)
    grid = np.zeros((rows * h, cols * w))
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = im
    pix = np.clip(np.round(grid * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode() + pix.tobytes())
