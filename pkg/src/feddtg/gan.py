"""One client's three-player GAN: generator, discriminator and classifier.

The generator is conditioned by appending a one-hot label to the noise
vector. The discriminator outputs the probability that a sample is real; the
classifier outputs class logits and doubles as the client's personalized
model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn
from .exceptions import DimensionError, ParameterError
from .nn import NetworkSpec, OptimizerState, ParamVector


@dataclass(frozen=True)
class TripletSpec:
    """Architectures shared by every client (parameter averaging needs identical layouts)."""

    generator: NetworkSpec
    discriminator: NetworkSpec
    classifier: NetworkSpec
    z_dim: int
    n_classes: int

    def __post_init__(self):
        if self.generator.n_in != self.z_dim + self.n_classes:
            raise DimensionError("generator input width", self.z_dim + self.n_classes, self.generator.n_in)
        dim = self.generator.n_out
        if self.discriminator.n_in != dim:
            raise DimensionError("discriminator input width", dim, self.discriminator.n_in)
        if self.classifier.n_in != dim:
            raise DimensionError("classifier input width", dim, self.classifier.n_in)
        if self.discriminator.head != "probability":
            raise ParameterError("discriminator must end in a probability head")
        if self.classifier.n_out != self.n_classes:
            raise DimensionError("classifier output width", self.n_classes, self.classifier.n_out)

    @property
    def sample_dim(self) -> int:
        return self.generator.n_out

    @classmethod
    def build(
        cls,
        sample_dim: int,
        n_classes: int,
        z_dim: int = 100,
        generator_hidden: Sequence[int] = (128, 256),
        discriminator_hidden: Sequence[int] = (256, 128),
        classifier_hidden: Sequence[int] = (256, 128),
    ) -> "TripletSpec":
        gen = NetworkSpec.mlp([z_dim + n_classes, *generator_hidden, sample_dim], output="tanh")
        disc = NetworkSpec.mlp([sample_dim, *discriminator_hidden, 1], output="sigmoid", head="probability")
        clf = NetworkSpec.mlp([sample_dim, *classifier_hidden, n_classes])
        return cls(gen, disc, clf, z_dim, n_classes)


@dataclass
class TripletState:
    client_id: int
    generator: ParamVector
    discriminator: ParamVector
    classifier: ParamVector
    gen_opt: OptimizerState
    disc_opt: OptimizerState
    clf_opt: OptimizerState

    def copy(self, client_id: int | None = None) -> "TripletState":
        return TripletState(
            self.client_id if client_id is None else client_id,
            self.generator.copy(),
            self.discriminator.copy(),
            self.classifier.copy(),
            self.gen_opt.copy(),
            self.disc_opt.copy(),
            self.clf_opt.copy(),
        )


def init_triplet(
    spec: TripletSpec,
    rng: np.random.Generator,
    client_id: int = 0,
    optimizer: str = "adam",
    lr_generator: float = 2e-4,
    lr_discriminator: float = 2e-4,
    lr_classifier: float = 1e-3,
    gan_betas: tuple[float, float] = (0.5, 0.999),
    classifier_betas: tuple[float, float] = (0.9, 0.999),
) -> TripletState:
    g = nn.init_params(spec.generator, rng)
    d = nn.init_params(spec.discriminator, rng)
    c = nn.init_params(spec.classifier, rng)
    return TripletState(
        client_id,
        g,
        d,
        c,
        nn.make_optimizer(optimizer, lr_generator, len(g), *gan_betas),
        nn.make_optimizer(optimizer, lr_discriminator, len(d), *gan_betas),
        nn.make_optimizer(optimizer, lr_classifier, len(c), *classifier_betas),
    )


@dataclass(frozen=True)
class FakeBatch:
    samples: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def slice(self, start: int, stop: int) -> "FakeBatch":
        return FakeBatch(self.samples[start:stop], self.labels[start:stop])


@dataclass(frozen=True)
class DistillConfig:
    alpha_kd: float = 0.9
    sample_count: int = 10000
    temperature: float = 1.0
    batch_size: int = 32
    steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ParameterError(f"alpha_kd must lie in [0, 1], got {self.alpha_kd}")
        if self.sample_count <= 0:
            raise ParameterError("distillation sample count must be positive")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ParameterError("distillation batch size and steps must be >= 1")


@dataclass(frozen=True)
class LossRecord:
    discriminator: float
    generator: float
    classifier: float


# ----------------------------------------------------------------- sampling


def sample_noise(rng: np.random.Generator, batch: int, z_dim: int) -> np.ndarray:
    if batch < 0:
        raise ParameterError("batch size must be non-negative")
    return rng.standard_normal((batch, z_dim))


def sample_labels_uniform(rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    if n < 1:
        raise ParameterError("need at least one class")
    return rng.integers(0, n, size=batch, dtype=np.int64)


def balanced_labels(batch: int, n: int) -> np.ndarray:
    """Cyclic labels 0, 1, ..., n-1, 0, 1, ...; class counts differ by at most one."""
    if n < 1:
        raise ParameterError("need at least one class")
    return np.arange(batch, dtype=np.int64) % n


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ParameterError(f"label out of range [0, {n})")
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _generator_input(theta_g: ParamVector, z, labels) -> np.ndarray:
    spec = theta_g.spec
    z = nn.as_tensor(z, "noise")
    labels = np.asarray(labels, dtype=np.int64)
    n = spec.n_in - z.shape[1]
    if n < 1:
        raise DimensionError("generator input width", f"> {z.shape[1]}", spec.n_in)
    if labels.shape != (z.shape[0],):
        raise DimensionError("label batch", (z.shape[0],), labels.shape)
    return np.hstack([z, one_hot(labels, n)])


def generate(theta_g: ParamVector, z, labels) -> FakeBatch:
    """G(z, y): deterministic in its inputs."""
    x = nn.forward(theta_g.spec, theta_g, _generator_input(theta_g, z, labels))
    return FakeBatch(x, np.asarray(labels, dtype=np.int64).copy())


# ------------------------------------------------------------------- losses


def discriminator_loss(theta_d: ParamVector, real, fake: FakeBatch) -> tuple[float, ParamVector]:
    """-[mean log D(x) + mean log(1 - D(G(z, y)))]; gradient w.r.t. theta_d only."""
    real = nn.as_tensor(real, "real samples")
    if real.shape[0] == 0:
        raise ParameterError("discriminator loss needs at least one real sample")
    if real.shape[1] != fake.samples.shape[1]:
        raise DimensionError("fake sample width", real.shape[1], fake.samples.shape[1])
    x = np.vstack([real, fake.samples])
    is_real = np.zeros((x.shape[0], 1), dtype=bool)
    is_real[: real.shape[0]] = True
    trace = nn.forward_trace(theta_d.spec, theta_d, x)
    loss, dprob = nn.binary_log_loss(trace.output, is_real)
    grads, _ = nn.backward_trace(trace, dprob)
    return loss, grads


def generator_loss(
    theta_g: ParamVector,
    theta_d: ParamVector,
    theta_c: ParamVector,
    z,
    labels,
    printed_offset: bool = False,
) -> tuple[float, ParamVector]:
    """mean[-log D(G(z, y))] + mean CE(C(G(z, y)), y); gradient w.r.t. theta_g only.

    With ``printed_offset`` the loss is reported in the ``1 - log D`` form,
    which differs by the constant 1 and has the same gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    g_trace = nn.forward_trace(theta_g.spec, theta_g, _generator_input(theta_g, z, labels))
    x = g_trace.output
    d_trace = nn.forward_trace(theta_d.spec, theta_d, x)
    c_trace = nn.forward_trace(theta_c.spec, theta_c, x)

    adv_loss, dprob = nn.binary_log_loss(d_trace.output, np.ones_like(d_trace.output, dtype=bool))
    ce_loss, dlogits = nn.cross_entropy(c_trace.output, labels)
    _, dx_d = nn.backward_trace(d_trace, dprob, need_params=False, need_input=True)
    _, dx_c = nn.backward_trace(c_trace, dlogits, need_params=False, need_input=True)
    grads, _ = nn.backward_trace(g_trace, dx_d + dx_c)
    loss = adv_loss + ce_loss
    if printed_offset:
        loss += 1.0
    return loss, grads


def classifier_loss(
    theta_c: ParamVector, real, real_labels, fake: FakeBatch | None
) -> tuple[float, ParamVector]:
    """mean CE on real pairs + mean CE on (fake sample, conditioning label) pairs.

    ``fake=None`` drops the second term (classifier trained on real data only).
    """
    real = nn.as_tensor(real, "real samples")
    real_labels = np.asarray(real_labels, dtype=np.int64)
    if real.shape[0] == 0 or (fake is not None and len(fake) == 0):
        raise ParameterError("classifier loss needs non-empty real and fake batches")
    if fake is None:
        trace = nn.forward_trace(theta_c.spec, theta_c, real)
        loss, g = nn.cross_entropy(trace.output, real_labels)
        grads, _ = nn.backward_trace(trace, g)
        return loss, grads
    n_real = real.shape[0]
    trace = nn.forward_trace(theta_c.spec, theta_c, np.vstack([real, fake.samples]))
    logits = trace.output
    loss_r, g_r = nn.cross_entropy(logits[:n_real], real_labels)
    loss_f, g_f = nn.cross_entropy(logits[n_real:], fake.labels)
    grads, _ = nn.backward_trace(trace, np.vstack([g_r, g_f]))
    return loss_r + loss_f, grads


def soft_label_output(theta_c: ParamVector, fake: FakeBatch, temperature: float = 1.0) -> np.ndarray:
    return nn.softmax(nn.forward(theta_c.spec, theta_c, fake.samples), temperature)


def distillation_loss(
    theta_c: ParamVector, fake: FakeBatch, y_dis, alpha_kd: float, temperature: float = 1.0
) -> tuple[float, ParamVector]:
    """(1 - a) CE(C(x_g), y) + a KL(y_dis || C(x_g)), averaged over the batch."""
    trace = nn.forward_trace(theta_c.spec, theta_c, fake.samples)
    ce, g_ce = nn.cross_entropy(trace.output, fake.labels)
    kl, g_kl = nn.kl_divergence(trace.output, y_dis, temperature)
    loss = (1.0 - alpha_kd) * ce + alpha_kd * kl
    grads, _ = nn.backward_trace(trace, (1.0 - alpha_kd) * g_ce + alpha_kd * g_kl)
    return loss, grads


# -------------------------------------------------------------------- steps


def local_adversarial_step(
    state: TripletState,
    real,
    real_labels,
    rng: np.random.Generator,
    n_classes: int | None = None,
    fake_supervision: bool = True,
) -> tuple[TripletState, LossRecord]:
    """One D, then G, then C update, each against a fresh fake batch of the real batch size.

    With ``fake_supervision=False`` the classifier update uses the real batch only.
    """
    real = nn.as_tensor(real, "real samples")
    real_labels = np.asarray(real_labels, dtype=np.int64)
    batch = real.shape[0]
    if batch == 0:
        raise ParameterError("local adversarial step needs a non-empty real batch")
    if real_labels.shape != (batch,):
        raise DimensionError("real label batch", (batch,), real_labels.shape)
    n = state.classifier.spec.n_out if n_classes is None else n_classes
    z_dim = state.generator.spec.n_in - n

    def draw():
        return sample_noise(rng, batch, z_dim), sample_labels_uniform(rng, batch, n)

    z, y = draw()
    d_loss, d_grads = discriminator_loss(state.discriminator, real, generate(state.generator, z, y))
    disc, disc_opt = nn.optimizer_step(state.discriminator, d_grads, state.disc_opt)

    z, y = draw()
    g_loss, g_grads = generator_loss(state.generator, disc, state.classifier, z, y)
    gen, gen_opt = nn.optimizer_step(state.generator, g_grads, state.gen_opt)

    fake = generate(gen, *draw()) if fake_supervision else None
    c_loss, c_grads = classifier_loss(state.classifier, real, real_labels, fake)
    clf, clf_opt = nn.optimizer_step(state.classifier, c_grads, state.clf_opt)

    new_state = TripletState(state.client_id, gen, disc, clf, gen_opt, disc_opt, clf_opt)
    return new_state, LossRecord(d_loss, g_loss, c_loss)


def distillation_step(
    state: TripletState, fake: FakeBatch, y_dis, cfg: DistillConfig
) -> tuple[TripletState, float]:
    """Optimizer step(s) on theta_c only; returns the loss before the update.

    The distillation objective depends on the classifier alone, so the
    generator and discriminator are left as received from the server.
    """
    y_dis = nn.as_tensor(y_dis, "distillation targets")
    if y_dis.shape[0] != len(fake):
        raise DimensionError("distillation target rows", len(fake), y_dis.shape[0])
    clf, opt = state.classifier, state.clf_opt
    first = None
    for _ in range(cfg.steps):
        loss, grads = distillation_loss(clf, fake, y_dis, cfg.alpha_kd, cfg.temperature)
        if first is None:
            first = loss
        clf, opt = nn.optimizer_step(clf, grads, opt)
    return replace(state, classifier=clf, clf_opt=opt), first
