"""Model-inversion image synthesis against a frozen teacher.

A small generator maps Gaussian noise to images and is optimized so that the teacher
classifies them confidently, spreads them across its classes, and sees batch statistics
matching its stored batch-norm statistics. Synthetic batches are pseudo-labelled by the
teacher's argmax.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import BatchNormStats, ModelSnapshot, bn_layers, extract_bn_stats, parameter_digest

logger = logging.getLogger(__name__)


@dataclass
class InversionWeights:
    alpha_con: float = 1.0
    alpha_div: float = 1.0
    alpha_stat: float = 50.0
    alpha_prior: float = 1e-3
    alpha_temp: float = 1e3

    def __post_init__(self):
        for name in ("alpha_con", "alpha_div", "alpha_stat", "alpha_prior", "alpha_temp"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.alpha_temp <= 0:
            raise ValueError("alpha_temp must be positive")


# --- losses ----------------------------------------------------------------------------

def diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the batch-mean class distribution (natural log)."""
    with torch.no_grad():
        if (probs < 0).any():
            raise ValueError("probabilities must be nonnegative")
        tol = 1e-6 if probs.dtype == torch.float64 else 1e-4
        if (probs.sum(1) - 1).abs().max() > tol:
            raise ValueError("probability rows must sum to 1")
    mean = probs.mean(0)
    return torch.xlogy(mean, mean).sum()


def content_loss_from_logits(logits: torch.Tensor, temperature: float):
    """Cross-entropy of the tempered prediction against its own (detached) argmax."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    target = logits.detach().argmax(1)
    return F.cross_entropy(logits / temperature, target), target


def content_loss(teacher: ModelSnapshot, x: torch.Tensor, temperature: float):
    """Returns ``(loss, pseudo_labels)``; labels are class ids from the teacher's registry."""
    loss, units = content_loss_from_logits(teacher.logits(x), temperature)
    registry = torch.tensor(teacher.class_registry, device=units.device)
    return loss, registry[units]


def bns_divergence(mu_hat, sigma_hat, mu, sigma):
    """KL(N(mu, sigma^2) || N(mu_hat, sigma_hat^2)), elementwise."""
    return torch.log(sigma_hat / sigma) - 0.5 * (1 - (sigma ** 2 + (mu - mu_hat) ** 2) / sigma_hat ** 2)


def stat_alignment_loss(teacher_stats: BatchNormStats, batch_stats: BatchNormStats) -> torch.Tensor:
    if len(teacher_stats) != len(batch_stats):
        raise ValueError(f"layer count mismatch: {len(teacher_stats)} vs {len(batch_stats)}")
    if len(teacher_stats) == 0:
        raise ValueError("no layers to align")
    terms = []
    for mu, sigma, mu_hat, sigma_hat in zip(teacher_stats.means, teacher_stats.stds,
                                            batch_stats.means, batch_stats.stds):
        if (sigma <= 0).any() or (sigma_hat.detach() <= 0).any():
            raise ValueError("standard deviations must be positive")
        terms.append(bns_divergence(mu_hat, sigma_hat, mu, sigma).mean())
    return torch.stack(terms).mean()


def gaussian_kernel(size: int = 3, sigma: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-ax ** 2 / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return k / k.sum()


def blur(x: torch.Tensor, size: int = 3, sigma: float = 1.0) -> torch.Tensor:
    c = x.shape[1]
    k = gaussian_kernel(size, sigma, x.dtype).to(x.device).expand(c, 1, size, size)
    pad = size // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), k, groups=c)


def smoothness_prior_loss(x: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared L2 distance between each image and its blurred copy."""
    return (x - blur(x)).pow(2).flatten(1).sum(1).mean()


# --- batch statistics capture ----------------------------------------------------------

class BatchStatRecorder:
    """Forward hooks collecting per-channel batch mean/std at the inputs of BN layers."""

    def __init__(self, module: nn.Module):
        self.layers = bn_layers(module)
        if not self.layers:
            raise ValueError("teacher has no batch-norm layers; statistic alignment is undefined")
        self.means: list = [None] * len(self.layers)
        self.stds: list = [None] * len(self.layers)
        self._handles = [m.register_forward_hook(self._hook(k)) for k, m in enumerate(self.layers)]

    def _hook(self, k):
        def fn(module, inputs, output):
            x = inputs[0]
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            self.means[k] = mean
            self.stds[k] = torch.sqrt(var + module.eps)
        return fn

    def stats(self) -> BatchNormStats:
        return BatchNormStats(list(self.means), list(self.stds))

    def close(self):
        for h in self._handles:
            h.remove()
        self._handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def inversion_objective(teacher: ModelSnapshot, x: torch.Tensor, weights: InversionWeights,
                        recorder: BatchStatRecorder, teacher_stats: BatchNormStats):
    """Weighted sum of content, diversity, statistic and smoothness terms."""
    logits = teacher.logits(x)
    l_con, _ = content_loss_from_logits(logits, weights.alpha_temp)
    l_div = diversity_loss(F.softmax(logits, dim=1))
    l_stat = stat_alignment_loss(teacher_stats, recorder.stats())
    l_prior = smoothness_prior_loss(x)
    total = (weights.alpha_con * l_con + weights.alpha_div * l_div
             + weights.alpha_stat * l_stat + weights.alpha_prior * l_prior)
    parts = {"con": l_con.item(), "div": l_div.item(), "stat": l_stat.item(),
             "prior": l_prior.item(), "total": total.item()}
    return total, parts


# --- generator ----------------------------------------------------------------------------

class Generator(nn.Module):
    """Noise -> image ConvNet.

    Linear projection to an ``H/4 x W/4`` map, two upsample+conv stages and a conv stage,
    then tanh followed by per-channel standardization so samples live in normalized pixel
    space. Normalization layers use batch statistics only, so sampling never mutates state.
    """

    def __init__(self, noise_dim: int, image_shape, width: int = 64):
        super().__init__()
        h, w, c = image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image size must be divisible by 4, got {h}x{w}")
        self.noise_dim = noise_dim
        self.image_shape = tuple(image_shape)
        self.init_hw = (h // 4, w // 4)
        self.fc = nn.Linear(noise_dim, 2 * width * self.init_hw[0] * self.init_hw[1])
        bn = lambda ch: nn.BatchNorm2d(ch, track_running_stats=False)
        self.net = nn.Sequential(
            bn(2 * width),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * width, 2 * width, 3, 1, 1, bias=False), bn(2 * width), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * width, width, 3, 1, 1, bias=False), bn(width), nn.LeakyReLU(0.2),
            nn.Conv2d(width, c, 3, 1, 1),
            nn.Tanh(),
            nn.BatchNorm2d(c, affine=False, track_running_stats=False),
        )
        self.width = width

    def forward(self, z):
        out = self.fc(z).view(z.shape[0], 2 * self.width, *self.init_hw)
        return self.net(out)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _torch_gen(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@dataclass
class SynthesisGenerator:
    """A trained generator plus its loss trace; lives for one task only."""

    net: Generator
    trace: list[dict] = field(default_factory=list)

    @property
    def noise_dim(self) -> int:
        return self.net.noise_dim

    @property
    def num_parameters(self) -> int:
        return self.net.num_parameters()

    def sample_images(self, batch: int, seed) -> torch.Tensor:
        z = torch.randn(batch, self.noise_dim, generator=_torch_gen(seed))
        with torch.no_grad():
            return self.net(z)


@dataclass
class DirectInversion:
    """Per-batch image optimization without a generator; slower but parameter free."""

    teacher: ModelSnapshot
    weights: InversionWeights
    steps: int = 200
    lr: float = 0.05
    trace: list[dict] = field(default_factory=list)

    num_parameters = 0

    def sample_images(self, batch: int, seed) -> torch.Tensor:
        h, w, c = self.teacher.model.image_shape
        x = torch.randn(batch, c, h, w, generator=_torch_gen(seed)).requires_grad_(True)
        opt = torch.optim.Adam([x], lr=self.lr)
        stats = extract_bn_stats(self.teacher)
        with BatchStatRecorder(self.teacher.model) as rec:
            for _ in range(self.steps):
                opt.zero_grad()
                loss, parts = inversion_objective(self.teacher, x, self.weights, rec, stats)
                loss.backward()
                opt.step()
            self.trace.append(parts)
        return x.detach()


def train_generator(teacher: ModelSnapshot, weights: InversionWeights, steps: int, batch: int,
                    seed: int, noise_dim: int = 1000, lr: float = 1e-3, width: int = 64,
                    log_every: int = 0) -> SynthesisGenerator:
    """Fit a generator to the frozen teacher with Adam; the teacher is left untouched."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    teacher_stats = extract_bn_stats(teacher)
    before = parameter_digest(teacher.model)
    torch.manual_seed(seed)
    net = Generator(noise_dim, teacher.model.image_shape, width)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    noise = _torch_gen(seed + 1)
    trace = []
    with BatchStatRecorder(teacher.model) as rec:
        for step in range(steps):
            z = torch.randn(batch, noise_dim, generator=noise)
            opt.zero_grad()
            loss, parts = inversion_objective(teacher, net(z), weights, rec, teacher_stats)
            loss.backward()
            opt.step()
            trace.append({"step": step, **parts})
            if log_every and step % log_every == 0:
                logger.info("generator step %d: %s", step, parts)
    if parameter_digest(teacher.model) != before:
        raise RuntimeError("teacher parameters changed during generator training")
    logger.info("generator trained: %d parameters, final loss %.4f",
                net.num_parameters(), trace[-1]["total"])
    return SynthesisGenerator(net, trace)


def sample_synthetic(gen, teacher: ModelSnapshot, batch: int, seed):
    """Draw ``batch`` synthetic images and label them with the teacher's argmax class id."""
    x = gen.sample_images(batch, seed)
    with torch.no_grad():
        units = teacher.logits(x).argmax(1)
    registry = torch.tensor(teacher.class_registry)
    return x, registry[units]


def save_image_grid(path, images: torch.Tensor, nrow: int = 8) -> None:
    """Write a PNG grid of synthetic images (each image min-max scaled)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    imgs = images.detach().cpu()
    lo = imgs.amin(dim=(1, 2, 3), keepdim=True)
    hi = imgs.amax(dim=(1, 2, 3), keepdim=True)
    imgs = ((imgs - lo) / (hi - lo).clamp_min(1e-8)).permute(0, 2, 3, 1).numpy()
    n = len(imgs)
    ncol = min(nrow, n)
    nrows = math.ceil(n / ncol)
    fig, axes = plt.subplots(nrows, ncol, figsize=(ncol, nrows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < n:
            ax.imshow(imgs[k].squeeze() if imgs.shape[-1] == 1 else imgs[k])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80, bbox_inches="tight")
    plt.close(fig)
