import numpy as np
import pytest

from advlab.acm import (
    AcmConfig,
    AcmModel,
    acm_forward,
    compress_high_band,
    compress_ll_band,
    defend_predict,
    extract_features,
    load_acm,
    save_acm,
    saturation_fraction,
    tanh_histogram,
    train_acm,
)
from advlab.checkpoint import CheckpointError
from advlab.classifier import ClassifierConfig, build_cnn
from advlab.data import synth_dataset
from advlab.tensor import Tensor, clip, finite_diff_grad_check, l1_loss, no_grad
from advlab.wavelet import BANDS, dwt2, idwt2

ALL_OFF = {b: False for b in BANDS}


def rand_x(seed=0, n=2, side=8):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, side, side)).astype(np.float32))


def test_config_defaults_and_validation():
    cfg = AcmConfig()
    assert cfg.feature_channels == 32 and cfg.compressed_channels == 5 == 32 // 6
    assert cfg.band_enabled == {b: True for b in BANDS}
    assert (cfg.lr, cfg.batch_size, cfg.beta1, cfg.beta2, cfg.eps) == (2e-4, 64, 0.9, 0.999, 1e-8)
    with pytest.raises(ValueError):
        AcmConfig(compressed_channels=32)
    with pytest.raises(ValueError):
        AcmConfig(noise_sigma=-1)
    with pytest.raises(ValueError):
        AcmConfig(band_enabled={"XX": False})


def test_lr_halving():
    cfg = AcmConfig(lr=2e-4, lr_halving_interval=100)
    assert cfg.lr_at(0) == cfg.lr_at(99) == 2e-4
    assert cfg.lr_at(100) == 1e-4
    assert cfg.lr_at(200) == 2e-4 / 4


def test_parameter_layout():
    m = AcmModel(AcmConfig())
    assert m.params["HH.com.weight"].shape == (5, 32, 3, 3)
    assert m.params["LH.rec0.weight"].shape == (32, 5, 3, 3)
    assert m.params["out.weight"].shape == (3, 32, 3, 3)
    off = AcmModel(AcmConfig(band_enabled={"HL": False, "LL": False}))
    assert not any(k.startswith(("HL.", "LL.")) for k in off.params)
    # remaining layers share their initial weights with the full model
    for k, v in off.params.items():
        assert np.array_equal(v.data, m.params[k].data)


@pytest.mark.parametrize("side", [8, 12, 16])
def test_shape_preserved(side):
    m = AcmModel(AcmConfig(feature_channels=8, compressed_channels=2))
    out = m(rand_x(side=side))
    assert out.shape == (2, 3, side, side)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_odd_input_rejected():
    with pytest.raises(ValueError):
        AcmModel()(np.zeros((1, 3, 7, 8), np.float32))


def test_extractor():
    m = AcmModel()
    with no_grad():
        f = extract_features(m, Tensor(np.zeros((1, 3, 8, 8), np.float32)))
    assert f.shape[1] == 32
    assert np.all(np.isfinite(f.data))


def test_inference_deterministic_training_noisy():
    m = AcmModel(AcmConfig(feature_channels=8, compressed_channels=2))
    x = rand_x()
    with no_grad():
        assert np.array_equal(m(x).data, m(x).data)
        a = acm_forward(m, x, training=True, seed=1).data
        b = acm_forward(m, x, training=True, seed=2).data
        c = acm_forward(m, x, training=True, seed=1).data
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_disabled_band_is_identity():
    m = AcmModel(AcmConfig(band_enabled={"HH": False, "LL": False}))
    f = Tensor(np.random.default_rng(1).standard_normal((1, 32, 4, 4)).astype(np.float32))
    assert compress_high_band(m, f, "HH") is f
    assert compress_ll_band(m, f) is f
    assert compress_high_band(m, f, "HL").shape == f.shape
    with pytest.raises(ValueError):
        compress_high_band(m, f, "LL")


def test_all_bands_disabled_bypasses_compression():
    m = AcmModel(AcmConfig(band_enabled=ALL_OFF))
    x = rand_x()
    with no_grad():
        ref = clip(m.conv("out", idwt2(dwt2(extract_features(m, x)))), 0.0, 1.0).data
        assert np.array_equal(m(x).data, ref)


def test_ll_identity_init_preserves_constants():
    m = AcmModel(AcmConfig(band_enabled={b: b == "LL" for b in BANDS}), ll_identity_init=True)
    f = Tensor(np.full((1, 32, 8, 8), 0.37, dtype=np.float32))
    with no_grad():
        out = compress_ll_band(m, f)
    assert out.shape == f.shape
    np.testing.assert_allclose(out.data, 0.37, atol=1e-5)


def test_band_toggles_are_independent():
    x = rand_x(3)
    full = AcmModel()
    taps_full: dict = {}
    with no_grad():
        acm_forward(full, x, taps=taps_full)
    for b in BANDS:
        off = AcmModel(AcmConfig(band_enabled={b: False}))
        taps: dict = {}
        with no_grad():
            acm_forward(off, x, taps=taps)
        assert b not in taps
        for other in BANDS:
            if other != b:
                assert np.array_equal(taps[other].data, taps_full[other].data)


def test_end_to_end_gradient_check():
    cfg = AcmConfig(feature_channels=8, compressed_channels=2)
    m = AcmModel(cfg, seed=3)
    x = Tensor(np.random.default_rng(4).uniform(0.2, 0.8, size=(1, 3, 8, 8)).astype(np.float32))
    target = x.data.copy()
    loss = lambda _: l1_loss(acm_forward(m, x, training=False), target)  # noqa: E731
    assert finite_diff_grad_check(loss, x, max_coords=60) <= 1e-3
    for name, p in m.params.items():
        assert finite_diff_grad_check(loss, p, max_coords=12, seed=len(name)) <= 1e-3, name


def test_defend_predict_identity_and_determinism():
    clf = build_cnn(ClassifierConfig(side=8, classes=3, widths=(4, 4)))
    x = rand_x()
    with no_grad():
        assert np.array_equal(defend_predict(clf, None, x).data, clf(x).data)
        m = AcmModel(AcmConfig(feature_channels=8, compressed_channels=2))
        assert np.array_equal(defend_predict(clf, m, x).data, defend_predict(clf, m, x).data)


def test_histogram_conservation_and_centre():
    m = AcmModel()
    batch = np.random.default_rng(0).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    counts = tanh_histogram(m, batch, bins=10)
    assert counts.sum() == 3 * 2 * 5 * 4 * 4
    zero = tanh_histogram(AcmModel(), np.zeros((1, 3, 8, 8), np.float32), bins=21)
    assert zero[10] == zero.sum()
    with pytest.raises(ValueError):
        tanh_histogram(m, batch, bins=1)
    assert 0.0 <= saturation_fraction(m, batch) <= 1.0


def test_training_descends_deterministic_and_persists(tmp_path):
    ds = synth_dataset(2, 4, 8, seed=0)
    cfg = AcmConfig(feature_channels=8, compressed_channels=2, batch_size=4, total_steps=6, lr=1e-3)
    a, trace = train_acm(AcmModel(cfg), ds, cfg)
    b, trace_b = train_acm(AcmModel(cfg), ds, cfg)
    assert len(trace) == 6 and trace == trace_b
    assert min(trace[3:]) < trace[0]
    path = tmp_path / "acm.plab"
    save_acm(a, path)
    loaded = load_acm(path, cfg)
    x = Tensor(ds.images)
    with no_grad():
        assert np.array_equal(loaded(x).data, a(x).data)
    with pytest.raises(CheckpointError):
        load_acm(path, AcmConfig(feature_channels=8, compressed_channels=2, band_enabled={"HH": False}))

