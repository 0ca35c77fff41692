"""The six networks: capsule classifier, residual encoder, generator,
shared critic/classifier and the contrastive-regularization discriminator."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from icaps import ops
from icaps.capsnet import ClassCapsuleOutput, ClassCapsules, PrimaryCapsules
from icaps.config import GROUPS, ModelConfig, TrainConfig
from icaps.nn import Adam, Conv2d, ConvTranspose2d, Linear, Module
from icaps.ops import ShapeError
from icaps.tensor import Tensor, as_tensor

LOGVAR_RANGE = (-12.0, 6.0)


class CapsuleClassifier(Module):
    """Conv features -> primary capsules -> routed class capsules."""

    def __init__(self, rng, cfg: ModelConfig):
        h, w = cfg.image_size
        self.conv = Conv2d(rng, cfg.channels, cfg.capsule_conv_channels, 5)
        self.primary = PrimaryCapsules(
            rng, cfg.capsule_conv_channels, cfg.primary_types, cfg.primary_dim, kernel=4, stride=2
        )
        ph, pw = (h - 4 - 4) // 2 + 1, (w - 4 - 4) // 2 + 1
        n_primary = cfg.primary_types * ph * pw
        self.classes = ClassCapsules(
            rng, n_primary, cfg.primary_dim, cfg.n_classes, cfg.concept_dim, cfg.routing_iterations
        )

    def forward(self, x: Tensor) -> ClassCapsuleOutput:
        return self.classes(self.primary(ops.relu(self.conv(x))))


@dataclass
class ResidualPosterior:
    mu: Tensor
    logvar: Tensor

    def sample(self, rng: np.random.Generator | None) -> Tensor:
        """Reparameterized draw; ``rng=None`` returns the mean."""
        if rng is None:
            return self.mu
        eps = Tensor(rng.standard_normal(self.mu.shape))
        return self.mu + ops.exp(self.logvar * 0.5) * eps


class _ConvTrunk(Module):
    """Two stride-2 convolutions with leaky ReLU, flattened."""

    def __init__(self, rng, c_in: int, widths: list[int]):
        self.conv1 = Conv2d(rng, c_in, widths[0], 4, 2, 1)
        self.conv2 = Conv2d(rng, widths[0], widths[1], 4, 2, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.leaky_relu(self.conv1(x), 0.2)
        return ops.flatten(ops.leaky_relu(self.conv2(h), 0.2))


def _trunk_features(cfg: ModelConfig, widths: list[int]) -> int:
    h, w = cfg.image_size
    return widths[1] * (h // 4) * (w // 4)


class ResidualEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.dim = cfg.residual_dim
        self.trunk = _ConvTrunk(rng, cfg.channels, cfg.encoder_channels)
        self.head = Linear(rng, _trunk_features(cfg, cfg.encoder_channels), 2 * cfg.residual_dim)

    def forward(self, x: Tensor) -> ResidualPosterior:
        out = self.head(self.trunk(x))
        mu = out[:, : self.dim]
        logvar = ops.clip(out[:, self.dim :], *LOGVAR_RANGE)
        return ResidualPosterior(mu, logvar)


class Generator(Module):
    """(c ⊕ r) -> image in [0, 1] (tanh output rescaled)."""

    def __init__(self, rng, cfg: ModelConfig):
        h, w = cfg.image_size
        c0, c1 = cfg.generator_channels
        self.start = (c0, h // 4, w // 4)
        self.fc = Linear(rng, cfg.concept_dim + cfg.residual_dim, c0 * (h // 4) * (w // 4))
        self.up1 = ConvTranspose2d(rng, c0, c1, 4, 2, 1)
        self.up2 = ConvTranspose2d(rng, c1, cfg.channels, 4, 2, 1)

    def forward(self, z: Tensor) -> Tensor:
        h = ops.relu(self.fc(z))
        h = ops.reshape(h, (z.shape[0],) + self.start)
        h = ops.relu(self.up1(h))
        return (ops.tanh(self.up2(h)) + 1.0) * 0.5


class CriticClassifier(Module):
    """Shared trunk with a WGAN critic head and a class-logit head."""

    def __init__(self, rng, cfg: ModelConfig):
        self.trunk = _ConvTrunk(rng, cfg.channels, cfg.critic_channels)
        n = _trunk_features(cfg, cfg.critic_channels)
        self.critic = Linear(rng, n, 1)
        self.classifier = Linear(rng, n, cfg.n_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.trunk(x)
        score = ops.reshape(self.critic(feats), (x.shape[0],))
        return score, self.classifier(feats)


class CRDiscriminator(Module):
    """Guesses which concept index differs between two channel-stacked images."""

    def __init__(self, rng, cfg: ModelConfig):
        self.trunk = _ConvTrunk(rng, 2 * cfg.channels, cfg.critic_channels)
        self.head = Linear(rng, _trunk_features(cfg, cfg.critic_channels), cfg.concept_dim)

    def forward(self, xa: Tensor, xb: Tensor) -> Tensor:
        if xa.shape != xb.shape:
            raise ShapeError(f"image pair shapes differ: {xa.shape} vs {xb.shape}")
        return ops.softmax(self.head(self.trunk(ops.concat([xa, xb], axis=1))), axis=-1)


def _betas(group: str, train: TrainConfig) -> tuple[float, float]:
    return tuple(train.betas_classifier if group in ("cc", "e") else train.betas_adversarial)


class ModelState:
    """All five parameter groups with one Adam optimizer each.

    Groups: ``cc`` capsule classifier, ``e`` residual encoder, ``dg`` shared
    critic/classifier, ``g`` generator, ``dcr`` contrastive discriminator.
    """

    def __init__(self, cfg: ModelConfig, train: TrainConfig | None = None):
        cfg.validate()
        self.config = cfg
        self.train_config = train or TrainConfig()
        seeds = np.random.SeedSequence(cfg.seed).spawn(len(GROUPS))
        rngs = {g: np.random.default_rng(s) for g, s in zip(GROUPS, seeds)}
        self.modules: dict[str, Module] = {
            "cc": CapsuleClassifier(rngs["cc"], cfg),
            "e": ResidualEncoder(rngs["e"], cfg),
            "dg": CriticClassifier(rngs["dg"], cfg),
            "g": Generator(rngs["g"], cfg),
            "dcr": CRDiscriminator(rngs["dcr"], cfg),
        }
        self.optimizers = {
            g: Adam(m.parameters(), lr=self.train_config.lr[g], betas=_betas(g, self.train_config))
            for g, m in self.modules.items()
        }
        self.step = 0

    # -- parameters -------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        return {
            f"{g}.{name}": p for g, m in self.modules.items() for name, p in m.named_parameters()
        }

    def partition(self) -> dict[str, set[str]]:
        return {g: {f"{g}.{n}" for n, _ in m.named_parameters()} for g, m in self.modules.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    @contextmanager
    def trainable(self, *groups: str):
        """Only parameters of ``groups`` require grad inside the block."""
        params = self.named_parameters()
        for name, p in params.items():
            p.requires_grad = name.split(".", 1)[0] in groups
        try:
            yield
        finally:
            for p in params.values():
                p.requires_grad = True

    # -- forward maps -------------------------------------------------------------
    def encode_class_relevant(self, x, y=None) -> tuple[ClassCapsuleOutput, Tensor]:
        """Class capsules and the selected concept vector ``c``.

        With labels ``y`` the ground-truth capsule is selected; otherwise the
        capsule with the largest norm.
        """
        x = as_tensor(x)
        out = self.modules["cc"](x)
        if y is None:
            idx = out.predictions()
        else:
            idx = np.asarray(y, dtype=np.int64).reshape(-1)
            k = self.config.n_classes
            if idx.shape[0] != x.shape[0] or idx.min() < 0 or idx.max() >= k:
                raise ValueError(f"labels must be {x.shape[0]} indices in [0, {k})")
        c = out.capsules[np.arange(x.shape[0]), idx]
        return out, c

    def encode_residual(self, x, rng: np.random.Generator | None = None):
        """Posterior over ``r`` and a sample (the mean when ``rng`` is None)."""
        post = self.modules["e"](as_tensor(x))
        return post, post.sample(rng)

    def generate(self, c, r) -> Tensor:
        c, r = as_tensor(c), as_tensor(r)
        cfg = self.config
        if c.ndim != 2 or r.ndim != 2 or c.shape[1] != cfg.concept_dim or r.shape[1] != cfg.residual_dim:
            raise ShapeError(
                f"generator expects c [B, {cfg.concept_dim}] and r [B, {cfg.residual_dim}], "
                f"got {c.shape} and {r.shape}"
            )
        return self.modules["g"](ops.concat([c, r], axis=1))

    def discriminate_and_classify(self, x) -> tuple[Tensor, Tensor]:
        return self.modules["dg"](as_tensor(x))

    def cr_discriminate(self, xa, xb) -> Tensor:
        return self.modules["dcr"](as_tensor(xa), as_tensor(xb))
