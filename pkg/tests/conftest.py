import numpy as np
import pytest

from adgm.models import Kind, Model, ModelVariant


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_variant(kind: Kind, **kw) -> ModelVariant:
    semi = kind in (Kind.ADGM, Kind.SDGM, Kind.M2, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX)
    base = dict(x_dim=5, y_dim=3 if semi else 0, a_dim=3, z_dim=3, hidden_dims=(6,))
    base.update(kw)
    return ModelVariant(kind, **base)


def small_model(kind: Kind, seed: int = 0, jitter: float = 0.1, **kw) -> Model:
    r = np.random.default_rng(seed)
    m = Model.create(small_variant(kind, **kw), r)
    if jitter:
        for k, p in m.params.items():
            m.params[k] = p + jitter * r.standard_normal(p.shape)
    return m


def zero_model(kind: Kind, **kw) -> Model:
    m = Model.create(small_variant(kind, **kw), np.random.default_rng(0))
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


def set_linear(model: Model, name: str, head: str, weight: np.ndarray, bias: np.ndarray, log_var=None) -> None:
    """Make a one-hidden-layer ReLU net exactly affine via relu(h) - relu(-h) = h.

    Hidden units beyond the first 2 * in_dim are left dead.
    """
    d = weight.shape[0]
    P = model.params
    h = P[f"{name}/hidden0/b"].shape[0]
    W0 = np.zeros((d, h))
    W0[:, :d], W0[:, d : 2 * d] = np.eye(d), -np.eye(d)
    P[f"{name}/hidden0/W"] = W0
    P[f"{name}/hidden0/b"] = np.zeros(h)
    out = np.zeros((h, weight.shape[1]))
    out[:d], out[d : 2 * d] = weight, -weight
    P[f"{name}/{head}/W"] = out
    P[f"{name}/{head}/b"] = np.asarray(bias, dtype=float)
    if log_var is not None:
        P[f"{name}/log_var/W"] = np.zeros_like(P[f"{name}/log_var/W"])
        P[f"{name}/log_var/b"] = np.asarray(log_var, dtype=float)


def linear_gaussian_vae(seed: int = 0, x_dim: int = 3, z_dim: int = 2):
    """VAE with p(x|z) = N(Wz + c, diag s2) and a deliberately imperfect affine q(z|x).

    Returns the model and the exact log marginal log N(x; c, W W^T + diag s2).
    """
    r = np.random.default_rng(seed)
    v = ModelVariant("VAE", x_dim=x_dim, z_dim=z_dim, hidden_dims=(2 * max(x_dim, z_dim),), obs="gaussian")
    m = Model.create(v, r)
    W = r.normal(0, 1, (z_dim, x_dim))
    c = r.normal(0, 0.5, x_dim)
    s2 = r.uniform(0.3, 0.8, x_dim)
    # q(z|x): the exact posterior with its mean map scaled by 1.1 and its variance inflated
    prec = np.eye(z_dim) + (W / s2) @ W.T
    post_cov = np.linalg.inv(prec)
    A = 1.1 * (W / s2).T @ post_cov  # (x_dim, z_dim): mean = (x - c) A
    set_linear(m, "p_x", "mu", W, c, np.log(s2))
    set_linear(m, "q_z", "mu", A, -c @ A, np.log(np.diag(post_cov)) + 0.3)
    cov = W.T @ W + np.diag(s2)

    def log_marginal(x):
        x = np.atleast_2d(x)
        diff = x - c
        sol = np.linalg.solve(cov, diff.T).T
        _, logdet = np.linalg.slogdet(cov)
        return -0.5 * (x_dim * np.log(2 * np.pi) + logdet + np.sum(diff * sol, axis=1))

    return m, log_marginal


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
