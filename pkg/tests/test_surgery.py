import numpy as np
import pytest

from advlab.attacks import AdversarialExample, AttackConfig
from advlab.data import synth_dataset
from advlab.surgery import (
    Autoencoder,
    SurgerySpec,
    apply_surgery,
    filtered_perturbation,
    gaussian_control,
    latent_ablate,
    latent_eta,
    remove_frequency_bands,
    remove_spatial_fraction,
    spatial_keep_mask,
    train_autoencoder,
)
from advlab.tensor import Tensor, no_grad
from advlab.wavelet import BANDS

EPS = 8 / 255


def make_pair(seed=0, n=3, side=8, interior=True):
    rng = np.random.default_rng(seed)
    lo, hi = (0.1, 0.9) if interior else (0.0, 1.0)
    x = rng.uniform(lo, hi, size=(n, 3, side, side)).astype(np.float32)
    eta = (EPS * rng.choice([-1.0, 1.0], size=x.shape)).astype(np.float32)
    x_star = np.clip(x + eta, 0, 1)
    return AdversarialExample(x, x_star, np.zeros(n, dtype=np.int64), "fgsm", AttackConfig(epsilon=EPS))


@pytest.fixture(scope="module")
def ae():
    return Autoencoder(seed=0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SurgerySpec("blur")
    with pytest.raises(ValueError):
        SurgerySpec("frequency", ratio=1.5)
    with pytest.raises(ValueError):
        SurgerySpec("spatial_patch", patch_side=0)
    with pytest.raises(ValueError):
        SurgerySpec("frequency", band_mask={"LX"})


@pytest.mark.parametrize("mode", ["element", "patch"])
def test_spatial_extremes(mode):
    pair = make_pair(interior=False)
    assert np.array_equal(remove_spatial_fraction(pair, 1.0, 0, mode), pair.x)
    assert np.array_equal(remove_spatial_fraction(pair, 0.0, 0, mode), pair.x_star)


def test_spatial_element_count():
    pair = make_pair(n=2)
    out = remove_spatial_fraction(pair, 0.5, seed=4)
    per_example = pair.x[0].size
    for i in range(2):
        # positions restored to benign were zeroed; everywhere else the attack survives
        zeroed = int(np.sum((out[i] == pair.x[i]) & (pair.x_star[i] != pair.x[i])))
        assert zeroed == round(0.5 * per_example)


def test_spatial_patch_grid():
    keep = spatial_keep_mask((1, 3, 8, 8), 0.5, seed=1, mode="patch", patch_side=4)
    blocks = keep[0].reshape(3, 2, 4, 2, 4)
    assert np.all(blocks == blocks[:1, :, :1, :, :1])  # constant per patch across channels
    assert int((~blocks[0, :, 0, :, 0]).sum()) == 2
    with pytest.raises(ValueError):
        spatial_keep_mask((1, 3, 8, 8), 0.5, seed=1, mode="patch", patch_side=3)


def test_spatial_nested_and_monotone():
    pair = make_pair(n=2)
    prev = None
    for r in (0.0, 0.3, 0.5, 0.8, 1.0):
        removed = ~spatial_keep_mask(pair.x.shape, r, seed=9)
        linf = np.max(np.abs(remove_spatial_fraction(pair, r, 9) - pair.x))
        if prev is not None:
            assert np.all(removed >= prev[0])
            assert linf <= prev[1]
        prev = removed, linf


def test_spatial_deterministic():
    pair = make_pair()
    assert np.array_equal(remove_spatial_fraction(pair, 0.4, 2), remove_spatial_fraction(pair, 0.4, 2))


def test_gaussian_control_degenerate():
    x = make_pair().x
    assert np.array_equal(gaussian_control(x, 0.5, 0.0, 1), x)
    assert np.array_equal(gaussian_control(x, 0.0, 0.1, 1), x)
    out = gaussian_control(x, 0.5, 0.1, 1)
    changed = np.mean(out != x)
    assert 0.45 <= changed <= 0.5
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        gaussian_control(x, 0.5, -1.0, 1)


def test_frequency_extremes():
    pair = make_pair(interior=True)
    np.testing.assert_allclose(remove_frequency_bands(pair, BANDS), pair.x, atol=1e-6)
    np.testing.assert_allclose(remove_frequency_bands(pair, ()), pair.x_star, atol=1e-6)


@pytest.mark.parametrize("mask", [{"LL"}, {"LH", "HL"}, {"HH", "LL", "HL"}])
def test_complementary_masks_add_up(mask):
    eta = make_pair(seed=2).eta
    rest = set(BANDS) - mask
    np.testing.assert_allclose(filtered_perturbation(eta, mask) + filtered_perturbation(eta, rest), eta, atol=1e-6)


def test_frequency_odd_dims():
    pair = make_pair(side=8)
    odd = AdversarialExample(pair.x[..., :7], pair.x_star[..., :7], pair.labels, "fgsm", pair.config)
    with pytest.raises(ValueError):
        remove_frequency_bands(odd, {"LL"})


def test_autoencoder_shapes(ae):
    with no_grad():
        z = ae.encode(Tensor(np.zeros((2, 3, 8, 8), np.float32)))
        assert z.shape == (2, 32, 8, 8)
        assert ae.decode(z).shape == (2, 3, 8, 8)


def test_latent_eta(ae):
    pair = make_pair()
    same = AdversarialExample(pair.x, pair.x.copy(), pair.labels, "none", pair.config)
    assert np.all(latent_eta(ae, same) == 0)
    eta = latent_eta(ae, pair)
    assert eta.shape == (3, 32, 8, 8)
    assert np.abs(eta).sum() > 0


@pytest.mark.parametrize("mode", ["channel", "spatial"])
def test_latent_extremes(ae, mode):
    pair = make_pair()
    with no_grad():
        dex = np.clip(ae(Tensor(pair.x)).data, 0, 1)
        dexs = np.clip(ae(Tensor(pair.x_star)).data, 0, 1)
    assert np.array_equal(latent_ablate(ae, pair, 1.0, mode, 0), dex)
    assert np.array_equal(latent_ablate(ae, pair, 0.0, mode, 0), dexs)


@pytest.mark.parametrize("mode,unit", [("channel", 32), ("spatial", 64)])
def test_latent_removal_counts_and_monotone(ae, mode, unit):
    pair = make_pair()
    norms = []
    for r in (0.0, 0.25, 0.5, 0.75, 1.0):
        _, eta = latent_ablate(ae, pair, r, mode, seed=3, return_eta=True)
        norms.append(np.abs(eta).sum())
        zero_units = np.all(eta[0] == 0, axis=(1, 2) if mode == "channel" else 0)
        assert zero_units.sum() >= round(r * unit)
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    with pytest.raises(ValueError):
        latent_ablate(ae, pair, 0.5, "pixel", 0)


def test_apply_surgery_dispatch(ae):
    pair = make_pair()
    assert np.array_equal(apply_surgery(SurgerySpec("spatial_random", 1.0), pair), pair.x)
    assert np.array_equal(apply_surgery(SurgerySpec("spatial_patch", 0.0), pair), pair.x_star)
    np.testing.assert_allclose(apply_surgery(SurgerySpec("frequency", band_mask=BANDS), pair), pair.x, atol=1e-6)
    assert np.array_equal(apply_surgery(SurgerySpec("gaussian_control", 0.0), pair), pair.x)
    assert apply_surgery(SurgerySpec("latent_channel", 0.5), pair, ae).shape == pair.x.shape
    with pytest.raises(ValueError):
        apply_surgery(SurgerySpec("latent_spatial", 0.5), pair)


def test_autoencoder_training():
    ds = synth_dataset(2, 4, 8, seed=0)
    a, trace = train_autoencoder(ds, epochs=3, lr=1e-3, seed=1, batch_size=4)
    b, _ = train_autoencoder(ds, epochs=3, lr=1e-3, seed=1, batch_size=4)
    assert trace[-1] < trace[0]
    with no_grad():
        assert np.array_equal(a(Tensor(ds.images)).data, b(Tensor(ds.images)).data)
    frozen, _ = train_autoencoder(ds, epochs=1, lr=0.0, seed=1, batch_size=4)
    fresh = Autoencoder(seed=1)
    for k, v in frozen.params.items():
        assert np.array_equal(v.data, fresh.params[k].data)
