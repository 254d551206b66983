import numpy as np
import pytest

from adgm.models import SEMI_SUPERVISED, Kind, Model, ModelVariant, network_table

from conftest import small_model, small_variant

ALL = list(Kind)


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(kind="ADGM", y_dim=1), "y_dim"),
        (dict(kind="VAE", y_dim=3), "no class variable"),
        (dict(kind="AVAE", a_dim=0), "a_dim"),
        (dict(kind="AVAE", layers=3), "1 or 2"),
        (dict(kind="ADGM", y_dim=2, layers=2), "multiple"),
        (dict(kind="SDGM", y_dim=2, aux_generative_conditions_on_x=True), "ADGM only"),
        (dict(kind="VAE", obs="poisson"), "obs"),
    ],
)
def test_variant_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        ModelVariant(**kwargs)


def test_unknown_kind():
    with pytest.raises(ValueError):
        ModelVariant("ResNet")


@pytest.mark.parametrize(
    "kind, names",
    [
        (Kind.VAE, {"q_z", "p_x"}),
        (Kind.AVAE, {"q_a", "q_z", "p_a", "p_x"}),
        (Kind.M2, {"q_z", "q_y", "p_x"}),
        (Kind.ADGM, {"q_a", "q_z", "q_y", "p_a", "p_x"}),
        (Kind.SDGM, {"q_a", "q_z", "q_y", "p_a", "p_x"}),
        (Kind.ADGM_DET_AUX, {"q_a", "q_z", "q_y", "p_x"}),
        (Kind.ADGM_UNINFORMED_AUX, {"q_a", "q_z", "q_y", "p_x"}),
        (Kind.POTENTIAL_FIT, {"q_z", "p_a"}),
    ],
)
def test_network_sets(kind, names):
    assert set(network_table(small_variant(kind))) == names


def test_concatenation_orders():
    t = network_table(small_variant(Kind.ADGM))
    assert t["q_z"][0] == ("a", "y", "x")
    assert t["q_y"][0] == ("a", "x")
    assert t["p_a"][0] == ("z", "y")
    assert t["p_x"][0] == ("z", "y")
    assert network_table(small_variant(Kind.ADGM, aux_generative_conditions_on_x=True))["p_a"][0] == ("z", "y", "x")
    assert network_table(small_variant(Kind.SDGM))["p_x"][0] == ("z", "y", "a")
    assert network_table(small_variant(Kind.M2))["q_z"][0] == ("y", "x")


def test_first_layer_fan_in_matches_concatenation():
    # x=5, y=3, a=3, z=3
    m = small_model(Kind.SDGM)
    fan_in = {n: m.params[f"{n}/hidden0/W"].shape[0] for n in m.networks}
    assert fan_in == {"q_a": 5, "q_z": 11, "q_y": 8, "p_a": 6, "p_x": 9}


def test_two_layer_avae_tables():
    t = network_table(small_variant(Kind.AVAE, layers=2))
    assert set(t) == {"q_a1", "q_z1", "q_a2", "q_z2", "p_x", "p_z1", "p_a2", "p_a1"}
    m = small_model(Kind.AVAE, layers=2)
    assert m.params["p_a1/hidden0/W"].shape[0] == 6
    assert m.params["q_z2/hidden0/W"].shape[0] == 6


def test_det_aux_has_no_variance_head():
    m = small_model(Kind.ADGM_DET_AUX)
    assert "q_a/mu/W" in m.params
    assert not any(k.startswith("q_a/log_var") for k in m.params)


def test_potential_fit_free_q_a():
    m = Model.create(ModelVariant("PotentialFit", x_dim=2, a_dim=3, z_dim=2, hidden_dims=(4,)), np.random.default_rng(0))
    np.testing.assert_array_equal(m.params["q_a/mu"], np.zeros(3))
    q = m.q_a_free(m.tape(), 5)
    assert q.mu.shape == (5, 3)


@pytest.mark.parametrize("kind", ALL)
def test_phi_theta_partition(kind):
    kw = {"x_dim": 2, "z_dim": 2} if kind is Kind.POTENTIAL_FIT else {}
    m = small_model(kind, **kw)
    phi, theta = set(m.phi_names()), set(m.theta_names())
    assert phi.isdisjoint(theta)
    assert phi | theta == set(m.params)
    assert phi and theta


@pytest.mark.parametrize("kind", ALL)
def test_state_dict_round_trip(kind):
    kw = {"x_dim": 2, "z_dim": 2} if kind is Kind.POTENTIAL_FIT else {}
    src = small_model(kind, seed=1, batch_norm=True, **kw)
    dst = small_model(kind, seed=2, batch_norm=True, **kw)
    dst.load_state_dict(src.state_dict())
    for k in src.params:
        np.testing.assert_array_equal(dst.params[k], src.params[k])
    for k, v in src.state_dict().items():
        np.testing.assert_array_equal(dst.state_dict()[k], v)


def test_load_state_dict_missing_key():
    m = small_model(Kind.VAE)
    sd = m.state_dict()
    sd.pop("p_x/logits/W")
    with pytest.raises(KeyError, match="p_x/logits/W"):
        m.load_state_dict(sd)


def test_dist_requires_inputs():
    m = small_model(Kind.ADGM)
    t = m.tape()
    with pytest.raises(ValueError, match="q_z"):
        m.dist(t, "q_z", x=t.constant(np.zeros((1, 5))))


def test_evaluating_restores_mode():
    m = small_model(Kind.VAE)
    with m.evaluating():
        assert m.mode == "eval"
    assert m.mode == "train"


def test_semi_supervised_have_classifier():
    for kind in ALL:
        assert small_variant(kind, **({"x_dim": 2} if kind is Kind.POTENTIAL_FIT else {})).has_classifier == (
            kind in SEMI_SUPERVISED
        )


def test_variant_to_dict():
    d = small_variant(Kind.ADGM).to_dict()
    assert d["kind"] == "ADGM" and d["hidden_dims"] == [6]
    assert ModelVariant(**d) == small_variant(Kind.ADGM)
