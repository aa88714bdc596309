import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperkd import downstream as dn
from hyperkd.datastore import generate_store
from hyperkd.vitmae import MaskedAutoencoder, ModelConfig, save_checkpoint, init_params

from oracles import confusion_loops, metrics_from_confusion


def small_encoder(seed=0, channels=6, size=16):
    cfg = ModelConfig(channels, size, 8, 16, 2, 2, 32, 16, 1, 2, 32, 1)
    return MaskedAutoencoder(cfg, seed=seed)


# -- metrics -----------------------------------------------------------------

def test_perfect_predictions():
    y = np.random.default_rng(0).integers(0, 4, size=(2, 8, 8))
    r = dn.classification_metrics(y, y, 4)
    assert r.top1 == 1.0 and r.miou == 1.0


def test_constant_class_on_balanced_data():
    truth = np.repeat(np.arange(4), 16).reshape(4, 4, 4)
    r = dn.classification_metrics(np.zeros_like(truth), truth, 4)
    assert r.top1 == 0.25
    assert r.miou == 0.0625
    np.testing.assert_array_equal(r.iou, [0.25, 0.0, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_metrics_match_pixel_loop_oracle(seed, k):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, k, size=(2, 6, 6))
    pred = rng.integers(0, k, size=(2, 6, 6))
    cm = dn.confusion_matrix(pred, truth, k)
    np.testing.assert_array_equal(cm, confusion_loops(pred, truth, k))
    top1, ious, miou = metrics_from_confusion(cm)
    r = dn.classification_metrics(pred, truth, k)
    assert r.top1 == top1
    assert r.miou == pytest.approx(miou, abs=1e-15)
    np.testing.assert_allclose(r.iou[~np.isnan(r.iou)], ious, atol=1e-15)
    assert cm.sum() == truth.size


def test_absent_classes_excluded_from_miou():
    truth = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 1, 2])
    r = dn.classification_metrics(pred, truth, 4)
    assert np.isnan(r.iou[2]) and np.isnan(r.iou[3])
    assert r.miou == pytest.approx((1.0 + 0.5) / 2)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        dn.confusion_matrix(np.zeros(3, int), np.array([0, 1, 4]), 4)


def test_mae_examples():
    t = np.random.default_rng(1).normal(size=(2, 4, 4))
    assert dn.mae(t, t) == 0.0
    assert dn.mae(t + 1.0, t) == pytest.approx(1.0, abs=1e-15)
    p = np.random.default_rng(2).normal(size=(2, 4, 4))
    ref = sum(abs(a - b) for a, b in zip(p.ravel(), t.ravel())) / t.size
    assert dn.mae(p, t) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        dn.mae(p, t[0])


# -- model -------------------------------------------------------------------

def test_head_config_invariants():
    with pytest.raises(ValueError):
        dn.HeadConfig(num_classes=1)
    with pytest.raises(ValueError):
        dn.HeadConfig(task="detection")
    assert dn.HeadConfig("regression").out_channels == 1


def test_feature_and_output_shapes():
    enc = small_encoder()
    x = np.random.default_rng(3).normal(size=(3, 6, 16, 16))
    m = dn.DownstreamModel(enc, dn.HeadConfig())
    assert m.features(x).shape == (3, 16, 2, 2)
    assert m.predict(x).shape == (3, 16, 16)
    r = dn.DownstreamModel(enc, dn.HeadConfig("regression"))
    assert r.forward(x[0]).shape == (1, 1, 16, 16)


def test_incompatible_dims():
    m = dn.DownstreamModel(small_encoder(), dn.HeadConfig())
    with pytest.raises(ValueError, match="incompatible"):
        m.features(np.zeros((1, 5, 16, 16)))


def test_features_use_all_tokens():
    enc = small_encoder(seed=4)
    x = np.random.default_rng(4).normal(size=(1, 6, 16, 16))
    from hyperkd.vitmae import patchify
    lat, _ = enc.encode(patchify(x, 8))
    f = dn.DownstreamModel(enc, dn.HeadConfig()).features(x)
    np.testing.assert_array_equal(f[0, :, 0, 1], lat.data[0, 1])


def test_attach_head_from_checkpoint(tmp_path):
    cfg = small_encoder().config
    params = init_params(cfg, 5)
    path = save_checkpoint(tmp_path / "c.hkd", cfg, params)
    m = dn.attach_head(path, dn.HeadConfig())
    assert "dec_embed.weight" not in m.encoder_params
    np.testing.assert_array_equal(m.encoder_params["patch_embed.weight"],
                                  params["patch_embed.weight"])
    bad = {k: v for k, v in params.items() if k != "enc_norm.g"}
    save_checkpoint(tmp_path / "bad.hkd", cfg, bad)
    with pytest.raises(ValueError, match="enc_norm.g"):
        dn.attach_head(tmp_path / "bad.hkd", dn.HeadConfig())


def test_head_gradient():
    from hyperkd.numerics import grad_check_params, Tensor
    m = dn.DownstreamModel(small_encoder(), dn.HeadConfig(widths=(3, 3)))
    feats = np.random.default_rng(6).normal(size=(1, 16, 2, 2))
    y = np.random.default_rng(7).integers(0, 4, size=(1, 16, 16))
    err = grad_check_params(lambda P: dn._task_loss(m, m.head(feats, P), y), m.head_params,
                            max_per_param=4)
    assert err <= 1e-4


def test_training_freezes_encoder_and_beats_baseline():
    store = generate_store(None, seed=2, n_train=16, n_eval=4, bands=6, size=16)
    enc = small_encoder()
    m = dn.DownstreamModel(enc, dn.HeadConfig(), stats=store.stats)
    before = dn.encoder_hash(enc.params)
    train, ev = store.split("train"), store.split("eval")
    losses = dn.train_head(m, train, np.stack([store.labels[t.tile_id] for t in train]),
                           steps=60)
    assert dn.encoder_hash(enc.params) == before
    assert losses[-1] < losses[0]
    r = dn.eval_classification(m, ev, np.stack([store.labels[t.tile_id] for t in ev]))
    assert 0.0 <= r.miou <= 1.0 and r.confusion.sum() == 4 * 16 * 16


def test_regression_training_and_eval():
    store = generate_store(None, seed=3, n_train=8, n_eval=2, bands=6, size=16)
    m = dn.DownstreamModel(small_encoder(), dn.HeadConfig("regression"), stats=store.stats)
    train = store.split("train")
    y = np.stack([store.targets[t.tile_id] for t in train])
    with pytest.raises(ValueError):
        dn.eval_regression(m, train, y)
    losses = dn.train_head(m, train, y, steps=40)
    assert losses[-1] < losses[0]
    assert dn.eval_regression(m, train, y) >= 0.0


def test_wrong_target_shape():
    m = dn.DownstreamModel(small_encoder(), dn.HeadConfig())
    with pytest.raises(ValueError):
        dn.train_head(m, np.zeros((2, 6, 16, 16)), np.zeros((2, 8, 8), int), steps=1)


def test_result_csvs(tmp_path):
    truth = np.repeat(np.arange(4), 16).reshape(4, 4, 4)
    dn.write_classification_csv(tmp_path / "r.csv",
                                dn.classification_metrics(np.zeros_like(truth), truth, 4))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,top1,iou" and lines[1] == "0,1.0,0.25"
    assert lines[-1] == "all,0.25,0.0625"
    dn.write_regression_csv(tmp_path / "m.csv", 0.5)
    assert (tmp_path / "m.csv").read_text() == "mae\n0.5\n"
