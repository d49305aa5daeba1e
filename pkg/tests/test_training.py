import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastinet import data
from elastinet import elasticity as el
from elastinet import networks as nw
from elastinet import plasticity as pl
from elastinet import training as tr

SMALL = nw.NetworkArch(2, 6)


def small_setup(n=6, mu=0.5, seed=0, arch=SMALL):
    ds = data.generate_elastic_dataset(data.GridSpec(n, n), 1.0, mu)
    model = nw.build_field_model(el.ELASTIC_FIELDS, arch, seed=seed)
    return model, ds


# --- config -----------------------------------------------------------------------

def test_config_defaults():
    c = tr.TrainingConfig()
    assert (c.batch_size, c.max_epochs, c.patience, c.learning_rate) == (64, 10000, 500, 1e-3)
    assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)


@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"patience": 20, "max_epochs": 10},
                                {"patience": 0}, {"mode": "fit"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tr.TrainingConfig(**kw)


# --- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_first_step():
    state = tr.AdamState()
    out = tr.adam_step({"w": np.array([1.5])}, {"w": np.array([0.0])}, state, tr.TrainingConfig())
    assert out["w"][0] == 1.5


def test_adam_unit_gradient_first_step():
    state = tr.AdamState()
    out = tr.adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, state, tr.TrainingConfig())
    assert float(out["w"]) == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-15)
    assert float(out["w"]) == pytest.approx(-0.000999999990, abs=1e-15)


def test_adam_two_steps_monotone():
    cfg = tr.TrainingConfig()
    state = tr.AdamState()
    p = {"w": np.array(0.0)}
    p1 = tr.adam_step(p, {"w": np.array(1.0)}, state, cfg)
    p2 = tr.adam_step(p1, {"w": np.array(1.0)}, state, cfg)
    assert p2["w"] < p1["w"] < p["w"]
    assert state.t == 2


def test_adam_nonfinite_names_parameter():
    with pytest.raises(tr.NonFiniteGradientError, match="'b'"):
        tr.adam_step({"a": np.zeros(2), "b": np.zeros(2)},
                     {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, tr.AdamState(), tr.TrainingConfig())


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.integers(1, 50))
def test_adam_flat_update_matches_per_array(gs, steps):
    cfg = tr.TrainingConfig(learning_rate=0.01)
    g = np.array(gs)
    state = tr.AdamState()
    p = {"a": np.zeros_like(g)}
    theta, m, v = np.zeros_like(g), np.zeros_like(g), np.zeros_like(g)
    for t in range(1, steps + 1):
        p = tr.adam_step(p, {"a": g}, state, cfg)
        theta, m, v = tr.adam_update(theta, g, m, v, t, cfg)
    assert np.array_equal(p["a"], theta)


# --- batching and patience ----------------------------------------------------------

@settings(max_examples=50)
@given(st.integers(1, 300), st.integers(1, 80), st.integers(0, 1000))
def test_shuffle_visits_each_row_once(n, bs, seed):
    batches = list(tr.epoch_batches(n, bs, np.random.default_rng(seed)))
    assert all(len(b) <= bs for b in batches)
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))


@pytest.mark.parametrize("plateau", [1, 37, 1200])
def test_patience_stops_at_plateau_plus_patience(plateau):
    stopper = tr.EarlyStopping(500)
    stopper.update(0, 10.0)
    for epoch in range(1, 10_000):
        loss = 1.0 / epoch if epoch <= plateau else 1.0 / plateau
        if stopper.update(epoch, loss):
            break
    assert epoch == plateau + 500


def test_train_stops_on_patience():
    model, ds = small_setup(4)
    cfg = tr.TrainingConfig(max_epochs=50, patience=3, learning_rate=0.0)
    hist, _ = tr.train(model, el.MaterialParams(1.0, 0.5), ds, cfg)
    # with no updates the initial loss is never beaten
    assert hist.stop_reason == "patience" and hist.last_epoch == 3


# --- training loop ------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    model, ds = small_setup(5)
    before = {k: v.copy() for k, v in model.parameters().items()}
    cfg = tr.TrainingConfig(max_epochs=4, patience=4, learning_rate=0.0, batch_size=7)
    hist, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
    for k, v in model.parameters().items():
        assert np.array_equal(v, before[k])
    assert all(p["lambda"] == 2.0 and p["mu"] == 2.0 for p in hist.params)


def test_history_records_and_best_checkpoint():
    model, ds = small_setup(6)
    cfg = tr.TrainingConfig(max_epochs=30, patience=30, learning_rate=0.01, batch_size=16,
                            normalize=True, term_every=10)
    hist, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
    assert hist.epochs == list(range(1, 31))
    assert len(hist.total) == len(hist.params) == len(hist.seconds) == 30
    assert hist.terms[9] is not None and hist.terms[0] is None
    assert set(hist.terms[9]) == set(el.ELASTIC_TERMS)
    assert hist.best_epoch <= hist.last_epoch
    assert hist.best_loss <= min(hist.total + [hist.initial_loss])
    report = tr.evaluate_loss(ck, ds)
    assert report.total == pytest.approx(hist.best_loss, rel=1e-10)
    assert all(report.total <= v * (1 + 1e-10) for v in hist.total)


def test_training_reduces_loss_and_moves_parameters():
    model, ds = small_setup(8)
    cfg = tr.TrainingConfig(max_epochs=40, patience=40, learning_rate=0.01, batch_size=16, normalize=True)
    hist, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
    assert hist.best_loss < 0.5 * hist.initial_loss
    assert ck.params.lam < 2.0 and ck.params.mu < 2.0
    assert ck.params.trainable == {"lambda", "mu"}


def test_solve_mode_keeps_material_fixed():
    model, ds = small_setup(4)
    cfg = tr.TrainingConfig(max_epochs=3, patience=3, mode="solve")
    hist, ck = tr.train(model, el.MaterialParams(1.0, 0.5), ds, cfg)
    assert ck.params.trainable == frozenset()
    assert hist.params[-1]["lambda"] == 1.0


def test_deterministic_replay():
    runs = []
    for _ in range(2):
        model, ds = small_setup(5, seed=3)
        cfg = tr.TrainingConfig(max_epochs=8, patience=8, batch_size=9, seed=42, normalize=True)
        hist, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
        runs.append((hist, ck))
    (h1, c1), (h2, c2) = runs
    assert h1.total == h2.total and h1.params == h2.params
    for k, v in c1.model.parameters().items():
        assert np.array_equal(v, c2.model.parameters()[k])


def test_different_seed_changes_history():
    totals = []
    for seed in (1, 2):
        model, ds = small_setup(5)
        cfg = tr.TrainingConfig(max_epochs=3, patience=3, batch_size=9, seed=seed)
        totals.append(tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)[0].total)
    assert totals[0] != totals[1]


def test_nonfinite_loss_aborts_with_record():
    model, ds = small_setup(4)
    ds.columns["ux"][3] = np.nan
    with pytest.raises(tr.TrainingError) as info:
        tr.train(model, el.MaterialParams(1.0, 0.5), ds, tr.TrainingConfig(max_epochs=2, patience=2))
    assert info.value.history.aborted["epoch"] == 0


def test_divergence_records_epoch_and_batch():
    model, ds = small_setup(4)
    cfg = tr.TrainingConfig(max_epochs=50, patience=50, learning_rate=1e200, batch_size=4)
    with pytest.raises(tr.TrainingError) as info:
        tr.train(model, el.MaterialParams(1.0, 0.5), ds, cfg)
    aborted = info.value.history.aborted
    assert aborted["epoch"] >= 1
    assert aborted["batch"] is None or aborted["batch"] >= 0


def test_stress_mode_gets_central_difference_forces():
    ds = data.generate_elastic_dataset(data.GridSpec(6, 6), 1.0, 0.5, mode="stress")
    prep = tr.prepare_dataset(ds, tr.TrainingConfig())
    assert {"fx", "fy"} <= set(prep.columns)


def test_history_csv(tmp_path):
    model, ds = small_setup(4)
    hist, _ = tr.train(model, el.MaterialParams(2.0, 2.0), ds,
                       tr.TrainingConfig(max_epochs=10, patience=10, term_every=5))
    hist.to_csv(tmp_path / "h.csv")
    rows = list(csv.DictReader((tmp_path / "h.csv").open()))
    assert len(rows) == 10
    assert {"epoch", "total_loss", "term_data_ux", "term_momentum_x", "lambda", "mu", "sigma_y",
            "seconds"} <= set(rows[0])
    assert float(rows[-1]["total_loss"]) == hist.total[-1]


def test_plastic_identification_smoke():
    strain, stress = (5e-3, -3e-3, 2e-3), None
    from oracles import return_mapping, stress_components

    out = return_mapping(strain, 19.44e9, 29.17e9, 243e6)
    stress = stress_components(out["stress"])
    ds = pl.homogeneous_dataset(data.sample_grid(data.GridSpec(5, 5)), strain, stress, 243e6)
    model = nw.build_field_model(pl.PLASTIC_FIELDS, nw.NetworkArch(2, 4), seed=0)
    params = el.MaterialParams(19.44e9, 29.17e9, 300e6, trainable={"sigma_y"})
    cfg = tr.TrainingConfig(max_epochs=5, patience=5, normalize=True)
    hist, ck = tr.train(model, params, ds, cfg)
    assert np.isfinite(hist.total).all()
    assert set(hist.params[-1]) == {"lambda", "mu", "sigma_y"}
    assert ck.params.sigma_y != 300e6


# --- checkpoints ----------------------------------------------------------------------

@pytest.fixture
def trained():
    model, ds = small_setup(5)
    cfg = tr.TrainingConfig(max_epochs=5, patience=5, normalize=True)
    return tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg) + (ds,)


def test_checkpoint_round_trip(trained, tmp_path):
    hist, ck, ds = trained
    path = tmp_path / "c.json"
    tr.save_checkpoint(ck, path)
    back = tr.load_checkpoint(path)
    pts = np.random.default_rng(0).uniform(size=(100, 2))
    a, b = ck.predict(pts), back.predict(pts)
    for k in a:
        assert np.array_equal(a[k], b[k])
    assert back.params == ck.params
    assert back.normalization.to_dict() == ck.normalization.to_dict()
    assert back.adam.t == ck.adam.t
    for k in ck.adam.m:
        assert np.array_equal(back.adam.m[k], ck.adam.m[k])
    assert back.seed == ck.seed and back.loss == ck.loss


def test_checkpoint_layout(trained, tmp_path):
    _, ck, _ = trained
    tr.save_checkpoint(ck, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["version"] == 1
    assert set(doc) >= {"arch", "fields", "material", "normalization", "adam", "seed"}
    assert set(doc["fields"]) == set(el.ELASTIC_FIELDS)
    assert set(doc["material"]) >= {"lambda", "mu", "sigma_y", "trainable"}


def test_checkpoint_version_mismatch(trained, tmp_path):
    _, ck, _ = trained
    path = tmp_path / "c.json"
    tr.save_checkpoint(ck, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(tr.CheckpointError, match="version 99"):
        tr.load_checkpoint(path)


def test_checkpoint_truncated(trained, tmp_path):
    _, ck, _ = trained
    path = tmp_path / "c.json"
    tr.save_checkpoint(ck, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(path)


def test_checkpoint_without_moments_retrains_from_zero(trained, tmp_path):
    _, ck, ds = trained
    ck.adam = None
    tr.save_checkpoint(ck, tmp_path / "c.json")
    back = tr.load_checkpoint(tmp_path / "c.json")
    assert back.adam is None
    hist, ck2 = tr.retrain(back, ds, tr.TrainingConfig(max_epochs=2, patience=2))
    assert ck2.adam.t == 2 * int(np.ceil(ds.n_points / 64))


# --- transfer and surrogate --------------------------------------------------------------

def test_retrain_starts_below_scratch():
    model, ds = small_setup(8)
    cfg = tr.TrainingConfig(max_epochs=150, patience=150, batch_size=16, normalize=True, learning_rate=3e-3)
    _, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
    new = data.generate_elastic_dataset(data.GridSpec(8, 8), 1.0, 1.0)
    hist, _ = tr.retrain(ck, new, tr.TrainingConfig(max_epochs=5, patience=5, batch_size=16))
    assert hist.initial_loss < hist.scratch_initial_loss
    assert hist.initial_loss_ratio < 1.0


def test_retrain_identical_data_stops_no_later_than_scratch():
    model, ds = small_setup(6)
    cfg = tr.TrainingConfig(max_epochs=300, patience=20, batch_size=16, normalize=True, learning_rate=3e-3)
    scratch_hist, ck = tr.train(model, el.MaterialParams(2.0, 2.0), ds, cfg)
    hist, _ = tr.retrain(ck, ds, cfg)
    assert hist.last_epoch <= scratch_hist.last_epoch


def test_retrain_architecture_mismatch(trained):
    _, ck, ds = trained
    cfg = tr.TrainingConfig(max_epochs=2, patience=2, arch=nw.NetworkArch(3, 6))
    with pytest.raises(ValueError, match="architecture mismatch"):
        tr.retrain(ck, ds, cfg)


def test_surrogate_needs_two_mu_values():
    ds = data.generate_elastic_dataset(data.GridSpec(4, 4), 1.0, 0.5)
    with pytest.raises(ValueError, match="two or more"):
        tr.train_surrogate([ds, ds], tr.TrainingConfig(max_epochs=1, patience=1))


def test_surrogate_smoke():
    parts = [data.generate_elastic_dataset(data.GridSpec(4, 4), 1.0, m) for m in data.SURROGATE_MU]
    hist, ck = tr.train_surrogate(parts, tr.TrainingConfig(max_epochs=3, patience=3, normalize=True), SMALL)
    assert ck.model.inputs == ("x", "y", "mu")
    assert ck.params.trainable == frozenset()
    pred = ck.predict(np.array([[0.5, 0.5, 1.0]]))
    assert set(pred) == set(el.ELASTIC_FIELDS)
