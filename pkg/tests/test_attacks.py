import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import (
    AdversarialExample,
    AttackConfig,
    UnsupportedDefenseError,
    adaptive_attack,
    attack_success_rate,
    default_config,
    fgsm,
    load_adversarial,
    mi_fgsm,
    mi_fgsm_config,
    perturbation_of,
    pgd,
    pgd_config,
    predictions,
    run_attack,
    save_adversarial,
)
from advlab.classifier import ClassifierConfig, build_cnn, evaluate_accuracy, train_classifier
from advlab.data import synth_dataset
from advlab.tensor import Tensor, mul, reduce_sum

CFG = ClassifierConfig(side=8, classes=3, widths=(6, 8), epochs=3, lr=5e-3, batch_size=16)


@pytest.fixture(scope="module")
def trained():
    ds = synth_dataset(3, 30, 8, seed=0, contrast=0.3)
    model, _ = train_classifier(build_cnn(CFG), ds, CFG)
    return model, ds.images, ds.labels


class Linear:
    """Toy model whose logits are ``w * x`` so the summed loss is w . x."""

    def __init__(self, w):
        self.w = Tensor(np.asarray(w, dtype=np.float32))

    def __call__(self, x):
        return mul(x, self.w)


def sum_loss(out, _labels):
    return reduce_sum(out)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, step_size=0.0)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, steps=0)
    assert pgd_config(8 / 255).alpha(0.25) == pytest.approx(2 / 255)
    assert mi_fgsm_config(0.1).step_size == pytest.approx(0.01)
    with pytest.raises(KeyError):
        default_config("cw", 0.1)


def test_fgsm_zero_radius(trained):
    model, x, y = trained
    ex = fgsm(model, x[:5], y[:5], AttackConfig(epsilon=0.0))
    assert np.array_equal(ex.x_star, ex.x)
    assert np.all(perturbation_of(ex) == 0)


def test_fgsm_linear_toy():
    x = np.random.default_rng(0).uniform(size=(2, 3, 4, 4)).astype(np.float32)
    ex = fgsm(Linear(np.full((1, 3, 4, 4), 0.5)), x, [0, 0], AttackConfig(epsilon=0.1), loss_fn=sum_loss)
    assert np.array_equal(ex.x_star, np.clip(x + np.float32(0.1), 0, 1))
    assert not ex.zero_gradient.any()


def test_zero_gradient_flagged():
    x = np.full((1, 3, 2, 2), 0.5, np.float32)
    ex = fgsm(Linear(np.zeros((1, 3, 2, 2))), x, [0], AttackConfig(epsilon=0.1), loss_fn=sum_loss)
    assert np.array_equal(ex.x_star, x)
    assert ex.zero_gradient.all()


def test_pgd_single_step_equals_fgsm(trained):
    model, x, y = trained
    a = fgsm(model, x, y, AttackConfig(epsilon=8 / 255))
    b = pgd(model, x, y, AttackConfig(epsilon=8 / 255, steps=1, step_size=8 / 255))
    assert np.array_equal(a.x_star, b.x_star)


def test_mi_fgsm_without_momentum_equals_fgsm(trained):
    model, x, y = trained
    a = fgsm(model, x, y, AttackConfig(epsilon=4 / 255))
    b = mi_fgsm(model, x, y, AttackConfig(epsilon=4 / 255, steps=1, step_size=4 / 255, decay_mu=0.0))
    assert np.array_equal(a.x_star, b.x_star)


@pytest.mark.parametrize("attack", ["pgd", "mi_fgsm"])
def test_every_iterate_is_projected(trained, attack):
    model, x, y = trained
    eps = 6 / 255
    seen = []

    def cb(t, xt):
        seen.append(t)
        assert np.max(np.abs(xt - x)) <= eps + 1e-6
        assert xt.min() >= 0 and xt.max() <= 1

    fn = pgd if attack == "pgd" else mi_fgsm
    fn(model, x, y, default_config(attack, eps, random_start=True, seed=3), callback=cb)
    assert seen == list(range(11))


def test_pgd_deterministic(trained):
    model, x, y = trained
    cfg = pgd_config(8 / 255, seed=5)
    assert np.array_equal(pgd(model, x, y, cfg).x_star, pgd(model, x, y, cfg).x_star)
    other = pgd(model, x, y, pgd_config(8 / 255, seed=6)).x_star
    assert not np.array_equal(pgd(model, x, y, cfg).x_star, other)


def test_attack_lowers_accuracy(trained):
    model, x, y = trained
    clean = np.mean(predictions(model, x) == y)
    adv = pgd(model, x, y, pgd_config(16 / 255))
    assert np.mean(predictions(model, adv.x_star) == y) < clean


def test_targeted_pgd_moves_toward_target(trained):
    model, x, y = trained
    target = (y + 1) % 3
    cfg = pgd_config(16 / 255, targeted=True, steps=20)
    ex = pgd(model, x, y, cfg, target=target)
    assert np.mean(predictions(model, ex.x_star) == target) > np.mean(predictions(model, x) == target)
    with pytest.raises(ValueError):
        pgd(model, x, y, cfg)


def test_run_attack_unknown(trained):
    model, x, y = trained
    with pytest.raises(KeyError):
        run_attack("deepfool", model, x, y, AttackConfig(epsilon=0.1))


@settings(max_examples=40, deadline=None)
@given(
    attack=st.sampled_from(["fgsm", "pgd", "mi_fgsm"]),
    k=st.integers(0, 16),
    steps=st.integers(1, 4),
    start=st.booleans(),
    seed=st.integers(0, 2**32 - 1),
)
def test_soundness_property(trained, attack, k, steps, start, seed):
    model, x, y = trained
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(x), size=4, replace=False)
    cfg = default_config(attack, k / 255, steps=steps, random_start=start, seed=seed)
    ex = run_attack(attack, model, x[idx], y[idx], cfg)
    assert np.max(np.abs(ex.eta)) <= k / 255 + 1e-6
    assert ex.x_star.min() >= 0 and ex.x_star.max() <= 1
    np.testing.assert_allclose(ex.x + ex.eta, ex.x_star, atol=1e-7)


def test_success_rate_identity(trained):
    model, x, y = trained
    ok = predictions(model, x) == y
    ex = pgd(model, x[ok], y[ok], pgd_config(8 / 255))
    acc = evaluate_accuracy(model, [(ex.x_star, ex.labels)])
    assert attack_success_rate(model, None, ex) == pytest.approx(1 - acc)
    benign = AdversarialExample(x, x.copy(), y, "none", AttackConfig(epsilon=0.0))
    assert np.all(benign.eta == 0)
    assert attack_success_rate(model, None, benign) == pytest.approx(1 - np.mean(ok))
    with pytest.raises(ValueError):
        attack_success_rate(model, None, benign.subset(np.zeros(0, dtype=int)))


def test_adaptive_already_on_target(trained):
    model, x, y = trained
    target = predictions(model, x)
    ex, trace = adaptive_attack(model, None, x, target, pgd_config(4 / 255, steps=5), labels=y)
    assert trace.shape == (6, len(x))
    assert trace[0].all()
    assert np.array_equal(ex.x_star, ex.x) or ex.config.random_start


def test_adaptive_zero_radius(trained):
    model, x, y = trained
    target = np.zeros_like(y)
    _, trace = adaptive_attack(model, None, x, target, AttackConfig(epsilon=0.0, steps=3, step_size=0.01))
    hit = predictions(model, x) == 0
    assert np.array_equal(trace[-1], hit) and np.array_equal(trace[0], hit)


def test_adaptive_latches(trained):
    model, x, y = trained
    target = (y + 2) % 3
    _, trace = adaptive_attack(model, None, x, target, pgd_config(16 / 255, steps=8, random_start=False))
    assert np.all(trace[1:] >= trace[:-1])
    assert trace[-1].mean() > trace[0].mean()


def test_adaptive_through_differentiable_defense(trained):
    model, x, y = trained
    shrink = lambda t: mul(t, Tensor(np.float32(0.9)))  # noqa: E731
    _, trace = adaptive_attack(model, shrink, x[:6], (y[:6] + 1) % 3, pgd_config(8 / 255, steps=3))
    assert trace.shape == (4, 6)


def test_adaptive_rejects_non_differentiable_defense(trained):
    model, x, y = trained
    quantize = lambda t: Tensor(np.round(t.data * 8) / 8)  # noqa: E731
    with pytest.raises(UnsupportedDefenseError):
        adaptive_attack(model, quantize, x[:2], y[:2], pgd_config(8 / 255, steps=2))


def test_adversarial_roundtrip(tmp_path, trained):
    model, x, y = trained
    ex = fgsm(model, x[:4], y[:4], AttackConfig(epsilon=2 / 255))
    save_adversarial(ex, tmp_path / "adv.plab")
    xs, xstar, labels = load_adversarial(tmp_path / "adv.plab")
    assert np.array_equal(xs, ex.x) and np.array_equal(xstar, ex.x_star) and np.array_equal(labels, ex.labels)
