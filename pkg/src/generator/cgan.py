"""
Two-step defensive letter generation.

Step 1 trains a conditional DCGAN on the letter images with binary
cross-entropy: the generator maps (z, y) to a 64x64 image in [-1, +1] and the
discriminator scores (image, y) as real or fake.

Step 2 drops the discriminator and fine-tunes the generator alone so that the
frozen letter classifier recognizes its samples as easily as possible, i.e.
it minimizes the classifier's own loss -log softmax(C(G(z, y)))_y.
"""

import copy
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.classifier.checkpoint import load_checkpoint, save_checkpoint
from src.classifier.network import as_network, parameter_checksum
from src.errors import ConfigError, DivergedTraining, EmptySplit, ModeCollapseWarning
from src.glyphs.dataset import LabeledDataset
from src.glyphs.rasterize import CANVAS
from src.letters import NUM_CLASSES, letter_index, letter_name
from src.logging_setup import progress_enabled

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 100
    ngf: int = 64
    ndf: int = 64
    step1_lr: float = 2e-4
    step1_epochs: int = 25
    step2_lr: float = 2e-4
    step2_iterations: int = 2000
    step2_adversarial_weight: float = 0.0
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 128
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 5
    probe_size: int = 1000
    collapse_threshold: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.step1_lr <= 0 or self.step2_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.step1_epochs < 1 or self.step2_iterations < 0 or self.batch_size < 1:
            raise ConfigError("epochs, iterations and batch_size must be positive")
        if self.step2_adversarial_weight < 0:
            raise ConfigError("step2_adversarial_weight must be >= 0")


def weights_init(m: nn.Module):
    """DCGAN initialization: N(0, 0.02) convolutions, N(1, 0.02) batch-norm scales."""
    name = m.__class__.__name__
    if name.find("Conv") != -1:
        nn.init.normal_(m.weight.data, 0.0, 0.02)
    elif name.find("BatchNorm") != -1:
        nn.init.normal_(m.weight.data, 1.0, 0.02)
        nn.init.constant_(m.bias.data, 0)


def one_hot(y: torch.Tensor) -> torch.Tensor:
    return F.one_hot(y, NUM_CLASSES).float()


class Generator(nn.Module):
    def __init__(self, latent_dim: int = 100, ngf: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.main = nn.Sequential(
            # (latent + 26) x 1 x 1
            nn.ConvTranspose2d(latent_dim + NUM_CLASSES, ngf * 8, 4, 1, 0, bias=False),
            nn.BatchNorm2d(ngf * 8),
            nn.ReLU(True),
            # (ngf*8) x 4 x 4
            nn.ConvTranspose2d(ngf * 8, ngf * 4, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ngf * 4),
            nn.ReLU(True),
            # (ngf*4) x 8 x 8
            nn.ConvTranspose2d(ngf * 4, ngf * 2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ngf * 2),
            nn.ReLU(True),
            # (ngf*2) x 16 x 16
            nn.ConvTranspose2d(ngf * 2, ngf, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ngf),
            nn.ReLU(True),
            # (ngf) x 32 x 32
            nn.ConvTranspose2d(ngf, 1, 4, 2, 1, bias=False),
            nn.Tanh(),
            # 1 x 64 x 64
        )

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, one_hot(y).to(z.dtype)], dim=1)
        return self.main(h[:, :, None, None])


class Discriminator(nn.Module):
    """Returns logits; the label is broadcast as 26 extra input channels."""

    def __init__(self, ndf: int = 64):
        super().__init__()
        self.main = nn.Sequential(
            # (1 + 26) x 64 x 64
            nn.Conv2d(1 + NUM_CLASSES, ndf, 4, 2, 1, bias=False),
            nn.LeakyReLU(0.2, inplace=True),
            # (ndf) x 32 x 32
            nn.Conv2d(ndf, ndf * 2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ndf * 2),
            nn.LeakyReLU(0.2, inplace=True),
            # (ndf*2) x 16 x 16
            nn.Conv2d(ndf * 2, ndf * 4, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ndf * 4),
            nn.LeakyReLU(0.2, inplace=True),
            # (ndf*4) x 8 x 8
            nn.Conv2d(ndf * 4, ndf * 8, 4, 2, 1, bias=False),
            nn.BatchNorm2d(ndf * 8),
            nn.LeakyReLU(0.2, inplace=True),
            # (ndf*8) x 4 x 4
            nn.Conv2d(ndf * 8, 1, 4, 1, 0, bias=False),
        )

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        labels = one_hot(y).to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return self.main(torch.cat([x, labels], dim=1)).view(-1)

    def probability(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(x, y))


@dataclass
class GeneratorModel:
    network: Generator
    config: GanConfig
    stage: str = "step1"
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


@dataclass
class DiscriminatorModel:
    network: Discriminator
    config: GanConfig


def _bce(logits: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def _check_finite(value: torch.Tensor, what: str, iteration: int):
    if not torch.isfinite(value):
        raise DivergedTraining(f"{what} became non-finite at iteration {iteration}")


def _sample_conditions(cfg: GanConfig, n: int, generator: torch.Generator):
    """z ~ N(0, I), y uniform over the 26 classes."""
    z = torch.randn(n, cfg.latent_dim, generator=generator)
    y = torch.randint(0, NUM_CLASSES, (n,), generator=generator)
    return z, y


def train_cgan_step1(
    ds: LabeledDataset,
    cfg: GanConfig = GanConfig(),
    checkpoint_dir: str | Path | None = None,
    progress: bool | None = None,
) -> tuple[GeneratorModel, DiscriminatorModel]:
    """Standard conditional GAN training on the train split."""
    images, labels, _ = ds.subset("train")
    if len(labels) == 0:
        raise EmptySplit("train_cgan_step1 needs a non-empty train split")

    torch.manual_seed(cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed)
    net_g, net_d = Generator(cfg.latent_dim, cfg.ngf), Discriminator(cfg.ndf)
    net_g.apply(weights_init)
    net_d.apply(weights_init)
    opt_g = torch.optim.Adam(net_g.parameters(), lr=cfg.step1_lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(net_d.parameters(), lr=cfg.step1_lr, betas=cfg.betas)

    x_all = torch.as_tensor(images).reshape(-1, 1, CANVAS, CANVAS)
    y_all = torch.as_tensor(labels)
    history: list[dict] = []
    iteration = 0
    logger.info("Training cGAN step 1 on %d images for %d epochs", len(labels), cfg.step1_epochs)

    epochs = tqdm(range(1, cfg.step1_epochs + 1), desc="cgan step1",
                  disable=not progress_enabled(progress))
    for epoch in epochs:
        net_g.train()
        net_d.train()
        order = torch.randperm(len(x_all), generator=rng)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            real, real_y = x_all[idx], y_all[idx]
            z, fake_y = _sample_conditions(cfg, len(idx), rng)
            fake = net_g(z, fake_y)

            opt_d.zero_grad()
            loss_d = _bce(net_d(real, real_y), True) + _bce(net_d(fake.detach(), fake_y), False)
            _check_finite(loss_d, "discriminator loss", iteration)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            loss_g = _bce(net_d(fake, fake_y), True)
            _check_finite(loss_g, "generator loss", iteration)
            loss_g.backward()
            opt_g.step()

            iteration += 1
            history.append({"iteration": iteration, "epoch": epoch,
                            "loss_d": loss_d.item(), "loss_g": loss_g.item()})
            if iteration % cfg.log_every == 0:
                logger.info("step1 iter %d (epoch %d): loss_D %.4f, loss_G %.4f",
                            iteration, epoch, loss_d.item(), loss_g.item())

        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_generator(GeneratorModel(net_g, cfg, "step1"),
                           Path(checkpoint_dir) / f"step1_generator_epoch{epoch:04d}.pt")

    net_g.eval()
    net_d.eval()
    generator = GeneratorModel(net_g, cfg, "step1", history=history)
    check_mode_collapse(generator)
    return generator, DiscriminatorModel(net_d, cfg)


def class_variance(generator: GeneratorModel, n: int = 16, seed: int = 0) -> np.ndarray:
    """Mean per-pixel variance of n samples of each class (low = collapsed style)."""
    return np.array([
        float(generate(generator, label, n, seed + label).var(axis=0).mean())
        for label in range(NUM_CLASSES)
    ])


def check_mode_collapse(generator: GeneratorModel) -> np.ndarray:
    variance = class_variance(generator)
    low = np.nonzero(variance < generator.config.collapse_threshold)[0]
    collapsed = [letter_name(c) for c in low]
    if collapsed:
        message = f"Generated samples collapsed for classes {', '.join(collapsed)}"
        logger.warning(message)
        warnings.warn(message, ModeCollapseWarning, stacklevel=2)
    return variance


# ---------------------------------------------------------------------------
# Step 2
# ---------------------------------------------------------------------------

def probe_batch(cfg: GanConfig, size: int | None = None, seed: int = 12345):
    """A fixed (z, y) batch with classes cycling A..Z."""
    size = size or cfg.probe_size
    z = torch.randn(size, cfg.latent_dim, generator=torch.Generator().manual_seed(seed))
    y = torch.arange(size) % NUM_CLASSES
    return z, y


def probe_classification_loss(generator: GeneratorModel, classifier, probe) -> float:
    """Mean classifier loss on generated samples of the probe batch."""
    net_g, net_c = generator.network, as_network(classifier)
    was_training = net_g.training
    net_g.eval()
    net_c.eval()
    z, y = probe
    with torch.no_grad():
        loss = F.cross_entropy(net_c(net_g(z, y)), y).item()
    net_g.train(was_training)
    return loss


def finetune_generator_step2(
    generator: GeneratorModel,
    classifier,
    cfg: GanConfig | None = None,
    discriminator: DiscriminatorModel | None = None,
    progress: bool | None = None,
) -> GeneratorModel:
    """
    Fine-tune a copy of the step-1 generator against the frozen classifier.

    Only generator parameters change; the classifier's parameters are
    restored to their original requires_grad flags and verified unchanged.
    """
    cfg = cfg or generator.config
    net_c = as_network(classifier)
    checksum_before = parameter_checksum(net_c)
    flags = [p.requires_grad for p in net_c.parameters()]
    for p in net_c.parameters():
        p.requires_grad_(False)
    net_c.eval()

    net_g = copy.deepcopy(generator.network)
    net_d = discriminator.network if discriminator is not None else None
    use_adversarial = cfg.step2_adversarial_weight > 0 and net_d is not None
    if net_d is not None:
        net_d.eval()
        for p in net_d.parameters():
            p.requires_grad_(False)

    torch.manual_seed(cfg.seed + 1)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(net_g.parameters(), lr=cfg.step2_lr, betas=cfg.betas)
    probe = probe_batch(cfg)
    before = probe_classification_loss(GeneratorModel(net_g, cfg), net_c, probe)
    logger.info("Step 2: probe L_C before fine-tuning %.4f", before)

    history: list[dict] = []
    try:
        net_g.train()
        iterations = tqdm(range(1, cfg.step2_iterations + 1), desc="cgan step2",
                          disable=not progress_enabled(progress))
        for it in iterations:
            z, y = _sample_conditions(cfg, cfg.batch_size, rng)
            fake = net_g(z, y)
            loss_c = F.cross_entropy(net_c(fake), y)
            loss = loss_c
            if use_adversarial:
                loss = loss + cfg.step2_adversarial_weight * _bce(net_d(fake, y), True)
            _check_finite(loss, "step-2 loss", it)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"iteration": it, "loss_c": loss_c.item(), "loss": loss.item()})
            if it % cfg.log_every == 0:
                lc = probe_classification_loss(GeneratorModel(net_g, cfg), net_c, probe)
                history[-1]["probe_loss_c"] = lc
                logger.info("step2 iter %d: batch L_C %.4f, probe L_C %.4f", it, loss_c.item(), lc)
    finally:
        for p, flag in zip(net_c.parameters(), flags):
            p.requires_grad_(flag)
        if net_d is not None:
            for p in net_d.parameters():
                p.requires_grad_(True)

    if parameter_checksum(net_c) != checksum_before:
        raise RuntimeError("Classifier parameters changed during generator fine-tuning")

    net_g.eval()
    after = probe_classification_loss(GeneratorModel(net_g, cfg), net_c, probe)
    logger.info("Step 2: probe L_C after fine-tuning %.4f", after)
    return GeneratorModel(
        net_g, cfg, "step2", history=history,
        metrics={"probe_loss_c_before": before, "probe_loss_c_after": after,
                 "classifier_checksum": checksum_before},
    )


# ---------------------------------------------------------------------------
# Sampling and files
# ---------------------------------------------------------------------------

def generate(generator: GeneratorModel, label, n: int, seed: int = 0) -> np.ndarray:
    """n images of one class, (n, 64, 64) float32 in [-1, +1], fresh z per image."""
    if n < 1:
        raise ValueError("n must be >= 1")
    net_g = generator.network
    was_training = net_g.training
    net_g.eval()
    z = torch.randn(n, generator.config.latent_dim, generator=torch.Generator().manual_seed(seed))
    y = torch.full((n,), letter_index(label), dtype=torch.long)
    with torch.no_grad():
        images = net_g(z, y)[:, 0].numpy().astype(np.float32)
    net_g.train(was_training)
    return images


def save_generator(generator: GeneratorModel, path: str | Path, provenance: dict | None = None):
    save_checkpoint(path, "generator", asdict(generator.config), generator.network,
                    metrics=generator.metrics, provenance=provenance,
                    extra={"stage": generator.stage, "history": generator.history})


def load_generator(path: str | Path) -> GeneratorModel:
    payload = load_checkpoint(path, "generator")
    config = GanConfig(**payload["config"])
    network = Generator(config.latent_dim, config.ngf)
    network.load_state_dict(payload["state_dict"])
    network.eval()
    extra = payload["extra"]
    return GeneratorModel(network, config, extra.get("stage", "step1"),
                          history=extra.get("history", []), metrics=payload["metrics"])


def save_discriminator(model: DiscriminatorModel, path: str | Path,
                       provenance: dict | None = None):
    save_checkpoint(path, "discriminator", asdict(model.config), model.network,
                    provenance=provenance)


def load_discriminator(path: str | Path) -> DiscriminatorModel:
    payload = load_checkpoint(path, "discriminator")
    config = GanConfig(**payload["config"])
    network = Discriminator(config.ndf)
    network.load_state_dict(payload["state_dict"])
    network.eval()
    return DiscriminatorModel(network, config)
