import math

import numpy as np
import pytest

from feddtg import gan, nn
from feddtg.data import MixtureSpec, synth_gaussian_mixture
from feddtg.exceptions import DimensionError, ParameterError

from oracles import central_difference, relative_error


def make_state(seed=0, sample_dim=2, n_classes=3, z_dim=2, hidden=(8,), optimizer="adam"):
    spec = gan.TripletSpec.build(sample_dim, n_classes, z_dim, hidden, hidden, hidden)
    return spec, gan.init_triplet(spec, np.random.default_rng(seed), optimizer=optimizer)


def zeroed(theta):
    return theta.with_values(np.zeros(len(theta.values)))


def test_noise_sampling():
    rng = np.random.default_rng(0)
    assert gan.sample_noise(rng, 0, 5).shape == (0, 5)
    a = gan.sample_noise(np.random.default_rng(3), 4, 2)
    np.testing.assert_array_equal(a, gan.sample_noise(np.random.default_rng(3), 4, 2))
    z = gan.sample_noise(rng, 100_000, 1)
    assert abs(z.mean()) < 0.02 and abs(z.var() - 1) < 0.05


def test_uniform_labels():
    assert not gan.sample_labels_uniform(np.random.default_rng(0), 20, 1).any()
    y = gan.sample_labels_uniform(np.random.default_rng(1), 100_000, 10)
    freq = np.bincount(y, minlength=10) / y.size
    sigma = math.sqrt(0.1 * 0.9 / y.size)
    assert np.all(np.abs(freq - 0.1) < 3 * sigma)
    np.testing.assert_array_equal(y[:50], gan.sample_labels_uniform(np.random.default_rng(1), 50, 10))


def test_balanced_labels():
    np.testing.assert_array_equal(np.bincount(gan.balanced_labels(10, 10)), np.ones(10))
    np.testing.assert_array_equal(np.bincount(gan.balanced_labels(12, 10)), [2, 2] + [1] * 8)
    np.testing.assert_array_equal(np.bincount(gan.balanced_labels(10_000, 10)), [1000] * 10)


def test_generation_is_pure_and_shared():
    spec, a = make_state(1)
    b = a.copy(client_id=7)
    rng = np.random.default_rng(2)
    z = gan.sample_noise(rng, 64, spec.z_dim)
    y = gan.balanced_labels(64, spec.n_classes)
    fa = gan.generate(a.generator, z, y)
    assert fa.samples.tobytes() == gan.generate(a.generator, z, y).samples.tobytes()
    assert fa.samples.tobytes() == gan.generate(b.generator, z, y).samples.tobytes()
    assert np.abs(fa.samples).max() <= 1.0


def test_generation_rejects_mismatched_labels():
    spec, s = make_state()
    with pytest.raises(DimensionError):
        gan.generate(s.generator, np.zeros((3, spec.z_dim)), np.zeros(2, dtype=int))
    with pytest.raises(ParameterError):
        gan.generate(s.generator, np.zeros((1, spec.z_dim)), np.array([spec.n_classes]))


def test_discriminator_loss_at_half():
    spec, s = make_state()
    fake = gan.FakeBatch(np.zeros((3, 2)), np.zeros(3, dtype=np.int64))
    loss, _ = gan.discriminator_loss(zeroed(s.discriminator), np.ones((5, 2)), fake)
    assert loss == pytest.approx(2 * math.log(2), abs=1e-15)


def test_generator_loss_at_half_and_uniform():
    spec, s = make_state(n_classes=4)
    z = np.random.default_rng(0).normal(size=(6, spec.z_dim))
    y = gan.balanced_labels(6, 4)
    loss, _ = gan.generator_loss(s.generator, zeroed(s.discriminator), zeroed(s.classifier), z, y)
    assert loss == pytest.approx(math.log(2) + math.log(4), abs=1e-14)
    printed, _ = gan.generator_loss(s.generator, zeroed(s.discriminator), zeroed(s.classifier), z, y, printed_offset=True)
    assert printed - loss == pytest.approx(1.0, abs=1e-14)


def test_generator_loss_freezes_other_players():
    spec, s = make_state(3)
    d, c = s.discriminator.values.copy(), s.classifier.values.copy()
    z = np.random.default_rng(1).normal(size=(5, spec.z_dim))
    _, g = gan.generator_loss(s.generator, s.discriminator, s.classifier, z, gan.balanced_labels(5, 3))
    assert g.spec == s.generator.spec
    np.testing.assert_array_equal(s.discriminator.values, d)
    np.testing.assert_array_equal(s.classifier.values, c)


def test_classifier_loss_values():
    spec, s = make_state(n_classes=3)
    fake = gan.FakeBatch(np.zeros((4, 2)), np.array([0, 1, 2, 0]))
    loss, _ = gan.classifier_loss(zeroed(s.classifier), np.ones((5, 2)), np.zeros(5, dtype=int), fake)
    assert loss == pytest.approx(2 * math.log(3), abs=1e-14)
    real_only, _ = gan.classifier_loss(zeroed(s.classifier), np.ones((5, 2)), np.zeros(5, dtype=int), None)
    assert real_only == pytest.approx(math.log(3), abs=1e-14)


def test_classifier_loss_perfect_limit():
    spec = nn.NetworkSpec.mlp([1, 2])
    theta = nn.ParamVector(spec, np.array([40.0, -40.0, 0.0, 0.0]))
    real = np.array([[1.0], [-1.0]])
    fake = gan.FakeBatch(np.array([[2.0], [-2.0]]), np.array([0, 1]))
    loss, _ = gan.classifier_loss(theta, real, np.array([0, 1]), fake)
    assert loss < 1e-20


@pytest.mark.parametrize("which", ["discriminator", "generator", "classifier", "distillation"])
def test_loss_gradients_match_finite_differences(which):
    rng = np.random.default_rng(11)
    spec, _ = make_state(5, hidden=(6,))
    for _ in range(5):
        s = gan.init_triplet(spec, rng)
        z = rng.normal(size=(4, spec.z_dim))
        y = rng.integers(0, spec.n_classes, size=4)
        real = rng.uniform(-1, 1, size=(3, 2))
        real_y = rng.integers(0, spec.n_classes, size=3)
        fake = gan.generate(s.generator, z, y)
        q = nn.softmax(rng.normal(size=(4, spec.n_classes)))
        if which == "discriminator":
            theta, f = s.discriminator, lambda v: gan.discriminator_loss(s.discriminator.with_values(v), real, fake)
        elif which == "generator":
            theta, f = s.generator, lambda v: gan.generator_loss(s.generator.with_values(v), s.discriminator, s.classifier, z, y)
        elif which == "classifier":
            theta, f = s.classifier, lambda v: gan.classifier_loss(s.classifier.with_values(v), real, real_y, fake)
        else:
            theta, f = s.classifier, lambda v: gan.distillation_loss(s.classifier.with_values(v), fake, q, 0.9, 2.0)
        _, g = f(theta.values)
        num = central_difference(lambda v: f(v)[0], theta.values)
        assert relative_error(g.values, num) < 1e-4


def test_soft_labels():
    spec, s = make_state(n_classes=5)
    fake = gan.FakeBatch(np.random.default_rng(0).uniform(-1, 1, (20, 2)), gan.balanced_labels(20, 5))
    np.testing.assert_allclose(gan.soft_label_output(zeroed(s.classifier), fake), np.full((20, 5), 0.2), atol=1e-15)
    hot = gan.soft_label_output(s.classifier, fake, temperature=1e6)
    assert np.abs(hot - 0.2).max() < 1e-3
    assert np.abs(gan.soft_label_output(s.classifier, fake).sum(axis=1) - 1).max() < 1e-12


def test_distillation_loss_edge_weights():
    spec, s = make_state(4)
    rng = np.random.default_rng(5)
    fake = gan.generate(s.generator, rng.normal(size=(8, spec.z_dim)), gan.balanced_labels(8, 3))
    q = nn.softmax(rng.normal(size=(8, 3)))
    ce, _ = nn.cross_entropy(nn.forward(s.classifier.spec, s.classifier, fake.samples), fake.labels)
    assert gan.distillation_loss(s.classifier, fake, q, 0.0)[0] == ce

    _, s = make_state(4, optimizer="sgd")
    own = gan.soft_label_output(s.classifier, fake)
    new, loss = gan.distillation_step(s, fake, own, gan.DistillConfig(alpha_kd=1.0))
    assert loss == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(new.classifier.values, s.classifier.values, rtol=0, atol=1e-16)


def test_distillation_updates_classifier_only():
    spec, s = make_state(6)
    rng = np.random.default_rng(6)
    fake = gan.generate(s.generator, rng.normal(size=(8, spec.z_dim)), gan.balanced_labels(8, 3))
    new, _ = gan.distillation_step(s, fake, nn.softmax(rng.normal(size=(8, 3))), gan.DistillConfig())
    assert new.generator is s.generator and new.discriminator is s.discriminator
    assert not np.array_equal(new.classifier.values, s.classifier.values)


def test_distillation_step_descends():
    rng = np.random.default_rng(7)
    for i in range(100):
        spec, s = make_state(100 + i, optimizer="sgd")
        s = s.copy()
        s.clf_opt = nn.make_optimizer("sgd", 1e-3, len(s.classifier.values))
        fake = gan.generate(s.generator, rng.normal(size=(16, spec.z_dim)), rng.integers(0, 3, size=16))
        q = nn.softmax(rng.normal(size=(16, 3)))
        new, before = gan.distillation_step(s, fake, q, gan.DistillConfig())
        after, _ = gan.distillation_loss(new.classifier, fake, q, 0.9)
        assert after <= before


def test_adversarial_step_replay_and_layout():
    spec, s = make_state(8)
    rng_data = np.random.default_rng(9)
    real = rng_data.uniform(-1, 1, size=(16, 2))
    y = rng_data.integers(0, 3, size=16)
    a, _ = gan.local_adversarial_step(s, real, y, np.random.default_rng(1))
    b, _ = gan.local_adversarial_step(s, real, y, np.random.default_rng(1))
    for name in ("generator", "discriminator", "classifier"):
        assert getattr(a, name).values.tobytes() == getattr(b, name).values.tobytes()
        assert getattr(a, name).spec == getattr(s, name).spec
    assert a.gen_opt.step == a.disc_opt.step == a.clf_opt.step == 1


def test_adversarial_step_rejects_empty_batch():
    _, s = make_state()
    with pytest.raises(ParameterError):
        gan.local_adversarial_step(s, np.zeros((0, 2)), np.zeros(0, dtype=int), np.random.default_rng(0))


def test_two_class_convergence():
    mix = MixtureSpec(np.array([[-0.5, 0.0], [0.5, 0.0]]), np.array([0.1, 0.1]), 500)
    ds = synth_gaussian_mixture(mix, seed=0)
    spec = gan.TripletSpec.build(2, 2, 2, (16,), (16,), (16,))
    s = gan.init_triplet(spec, np.random.default_rng(0), lr_generator=1e-3, lr_discriminator=1e-3, lr_classifier=1e-3)
    start, _ = nn.cross_entropy(nn.forward(spec.classifier, s.classifier, ds.samples), ds.labels)
    assert start == pytest.approx(math.log(2), abs=0.35)
    rng = np.random.default_rng(1)
    for _ in range(500):
        idx = rng.choice(len(ds), 32, replace=False)
        s, _ = gan.local_adversarial_step(s, ds.samples[idx], ds.labels[idx], rng)
    end, _ = nn.cross_entropy(nn.forward(spec.classifier, s.classifier, ds.samples), ds.labels)
    assert end < 0.2
