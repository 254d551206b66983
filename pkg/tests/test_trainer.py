import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adgm.datasets import halfmoons, label_subset
from adgm.models import Kind, Model, ModelVariant
from adgm.trainer import (
    METRIC_COLUMNS,
    AdamState,
    RngStream,
    TrainConfig,
    TrainData,
    TrainingAborted,
    adam_step,
    assemble_batch,
    iter_batches,
    resolve_labeled_per_batch,
    train,
    warmup_temperature,
    write_metrics_csv,
)

from conftest import small_model

# --------------------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(AdamState(), p, {"w": np.zeros(2)}, 3e-4)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = {"w": np.array(0.0)}
    adam_step(AdamState(), p, {"w": np.array(1.0)}, 3e-4)
    assert p["w"] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_second_step_not_larger():
    p = {"w": np.array(0.0)}
    s = AdamState()
    adam_step(s, p, {"w": np.array(1.0)}, 3e-4)
    d1 = float(p["w"])
    adam_step(s, p, {"w": np.array(1.0)}, 3e-4)
    d2 = float(p["w"]) - d1
    assert abs(d2) <= abs(d1) * (1 + 1e-6)
    assert d1 == pytest.approx(-3e-4, rel=1e-6) and d2 == pytest.approx(-3e-4, rel=1e-6)


def test_adam_matches_scalar_reference():
    r = np.random.default_rng(0)
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    p = {"w": np.array(0.3)}
    s = AdamState()
    w, m, v = 0.3, 0.0, 0.0
    for t in range(1, 101):
        g = float(r.standard_normal())
        adam_step(s, p, {"w": np.array(g)}, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(float(p["w"]) - w) <= 1e-12
    assert s.t == 100 and np.all(s.v["w"] >= 0)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)}, 1e-3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(labeled_per_batch=101, batch_size=100)
    assert TrainConfig().lr == 3e-4
    assert TrainConfig().resolved_warmup(Kind.AVAE) == 200
    assert TrainConfig().resolved_warmup(Kind.ADGM) == 0


# --------------------------------------------------------------------------- warm-up


@pytest.mark.parametrize("epoch, w, tau", [(0, 200, 0.0), (100, 200, 0.5), (200, 200, 1.0), (350, 200, 1.0), (5, 0, 1.0)])
def test_warmup_examples(epoch, w, tau):
    assert warmup_temperature(epoch, w) == tau


@given(w=st.integers(1, 500), e=st.integers(0, 1000))
def test_warmup_monotone(w, e):
    assert 0 <= warmup_temperature(e, w) <= warmup_temperature(e + 1, w) <= 1


def test_warmup_negative_epoch():
    with pytest.raises(ValueError):
        warmup_temperature(-1, 10)


# --------------------------------------------------------------------------- randomness


def test_rng_stream_keyed_and_order_free():
    s = RngStream(5)
    a = s.generator(3, 1, "noise").standard_normal(4)
    s.generator(0, "other").standard_normal(100)
    b = RngStream(5).generator(3, 1, "noise").standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, s.generator(3, 2, "noise").standard_normal(4))
    assert not np.array_equal(a, RngStream(6).generator(3, 1, "noise").standard_normal(4))


# --------------------------------------------------------------------------- batches


def _pool(n_lab, n_unl, c=10, d=3):
    r = np.random.default_rng(0)
    return r.random((n_lab, d)), np.arange(n_lab) % c, r.random((n_unl, d))


def test_batch_all_labels_fit():
    lx, ly, ux = _pool(100, 500)
    b = assemble_batch(lx, ly, ux, TrainConfig(batch_size=200), np.random.default_rng(0), 10)
    assert b.x_l.shape == (100, 3) and b.x_u.shape == (100, 3)
    np.testing.assert_array_equal(b.x_l, lx)


def test_batch_halfmoons_protocol():
    lx, ly, ux = _pool(6, 500, c=2, d=2)
    b = assemble_batch(lx, ly, ux, TrainConfig(batch_size=100), np.random.default_rng(0), 2)
    assert len(b.x_l) == 6 and len(b.x_u) == 94


def test_batch_purely_unsupervised():
    lx, ly, ux = _pool(10, 500)
    b = assemble_batch(lx, ly, ux, TrainConfig(batch_size=50, labeled_per_batch=0), np.random.default_rng(0), 10)
    assert b.x_l is None and b.y_l is None and len(b.x_u) == 50


def test_batch_even_draw_when_labels_exceed():
    lx, ly, ux = _pool(600, 500)
    cfg = TrainConfig(batch_size=200, labeled_per_batch=100)
    b = assemble_batch(lx, ly, ux, cfg, np.random.default_rng(0), 10)
    assert np.bincount(b.y_l.argmax(1), minlength=10).tolist() == [10] * 10


def test_batch_too_many_labels_requested():
    lx, ly, ux = _pool(6, 100, c=2)
    with pytest.raises(ValueError, match="only 6"):
        assemble_batch(lx, ly, ux, TrainConfig(batch_size=100, labeled_per_batch=10), np.random.default_rng(0), 2)


def test_epoch_unlabeled_without_replacement_labeled_every_batch():
    r = np.random.default_rng(1)
    x = np.arange(200, dtype=float)[:, None]
    y = np.arange(200) % 2
    lab, unl = np.arange(6), np.arange(6, 200)
    cfg = TrainConfig(batch_size=100)
    assert resolve_labeled_per_batch(cfg, 6) == 6
    seen = []
    for b in iter_batches(x, lab, unl, y, 2, cfg, r):
        np.testing.assert_array_equal(np.sort(b.x_l[:, 0]), np.arange(6))
        seen.extend(b.x_u[:, 0].tolist())
    assert len(seen) == len(set(seen)) == 188


# --------------------------------------------------------------------------- training loop


def _moons(n=200, labels=6, seed=0):
    r = np.random.default_rng(seed)
    tr, te = halfmoons(n, 0.1, r), halfmoons(n, 0.1, r)
    tr.mask = label_subset(tr, labels, r)
    return TrainData(tr, te)


def _moon_model(kind="ADGM", seed=1):
    v = ModelVariant(kind, x_dim=2, y_dim=2, a_dim=2, z_dim=2, hidden_dims=(8,), obs="gaussian")
    return Model.create(v, np.random.default_rng(seed))


def test_zero_epochs(tmp_path):
    m = _moon_model()
    before = {k: v.copy() for k, v in m.params.items()}
    res = train(m, _moons(), TrainConfig(epochs=0), out_dir=tmp_path)
    assert res.history == []
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])
    assert (tmp_path / "metrics.csv").read_text() == ",".join(METRIC_COLUMNS) + "\n"


def test_determinism_two_epochs(tmp_path):
    runs = []
    for i in range(2):
        m = _moon_model()
        res = train(m, _moons(), TrainConfig(epochs=2, seed=4, batch_size=50), out_dir=tmp_path / str(i))
        runs.append(([{k: v for k, v in r.items() if k != "_elapsed"} for r in res.history], m.params))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])
    assert (tmp_path / "0" / "metrics.csv").read_bytes() == (tmp_path / "1" / "metrics.csv").read_bytes()
    assert (tmp_path / "0" / "model.axdg").read_bytes() == (tmp_path / "1" / "model.axdg").read_bytes()


def test_history_rows_complete():
    res = train(_moon_model(), _moons(), TrainConfig(epochs=2, batch_size=50))
    row = res.history[-1]
    assert row["epoch"] == 2 and row["tau"] == 1.0
    for key in ("J", "L_labeled", "U_unlabeled", "class_loss", "train_err", "test_err"):
        assert np.isfinite(row[key])
    assert row["wallclock_s"] is None


def test_warmup_recorded_in_history():
    res = train(_moon_model(), _moons(), TrainConfig(epochs=3, batch_size=50, warmup_epochs=2))
    assert [r["tau"] for r in res.history] == [0.0, 0.5, 1.0]


def test_nan_aborts():
    m = _moon_model()
    m.params["q_z/mu/b"][:] = np.nan
    with pytest.raises(TrainingAborted, match="non-finite"):
        train(m, _moons(), TrainConfig(epochs=1, batch_size=50))


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dim"):
        train(small_model(Kind.ADGM), _moons(), TrainConfig(epochs=1))


@pytest.mark.parametrize("kind", ["VAE", "AVAE"])
def test_unsupervised_training_improves(kind):
    r = np.random.default_rng(0)
    x = (r.random((400, 6)) < np.linspace(0.1, 0.9, 6)).astype(float)
    from adgm.datasets import LabeledDataset

    data = TrainData(LabeledDataset(x, np.zeros(400, dtype=int), 1), binary=True)
    v = ModelVariant(kind, x_dim=6, a_dim=2, z_dim=2, hidden_dims=(16,))
    res = train(Model.create(v, r), data, TrainConfig(epochs=15, batch_size=40, lr=3e-3, warmup_epochs=0))
    assert res.history[-1]["J"] < res.history[0]["J"]
    assert res.history[-1].get("test_err") is None


def test_potential_training_runs():
    from adgm.datasets import bimodal_potential

    v = ModelVariant("PotentialFit", x_dim=2, a_dim=2, z_dim=2, hidden_dims=(8,))
    res = train(Model.create(v, np.random.default_rng(0)), TrainData(target=bimodal_potential()),
                TrainConfig(epochs=3, steps_per_epoch=20, batch_size=16, lr=1e-2))
    assert res.history[-1]["J"] < res.history[0]["J"]


def test_metrics_csv_empty_fields(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [{"epoch": 1, "tau": 1.0, "J": 2.5}])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[1] == "1,1.0,2.5,,,,,,"


def test_smoothed_loss_trend_halfmoons():
    """Smoothed (window 5) training loss falls over 30 epochs with defaults."""
    r = np.random.default_rng(0)
    tr, te = halfmoons(10_000, 0.1, r), halfmoons(1000, 0.1, r)
    tr.mask = label_subset(tr, 6, r)
    v = ModelVariant("ADGM", x_dim=2, y_dim=2, a_dim=10, z_dim=10, hidden_dims=(100, 100), obs="gaussian")
    res = train(Model.create(v, np.random.default_rng(1)), TrainData(tr, te), TrainConfig(epochs=30, eval_every=30, eval_n_mc=1))
    j = np.array([row["J"] for row in res.history])
    smooth = np.convolve(j, np.ones(5) / 5, mode="valid")
    slope = np.polyfit(np.arange(len(smooth)), smooth, 1)[0]
    assert slope < 0
    assert smooth[-1] < smooth[0]
