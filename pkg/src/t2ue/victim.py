"""The data hacker's side: victim training, augmentation defenses and baseline noises."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .config import TrainConfig, make_optimizer
from .evalkit import class_pools, classify_eval, retrieval_eval
from .surrogate import ARCHITECTURES, SurrogateModel, build_backbone, images_tensor, iterate_batches, \
    train_contrastive
from .toydata import CaptionedSample

log = logging.getLogger(__name__)

PARADIGMS = ("contrastive", "supervised")
DEFENSES = ("none", "cutout", "mixup", "augproxy")


@dataclass
class VictimConfig:
    paradigm: str = "supervised"
    architecture: str = "conv4"
    epochs: int = 60
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    defense: str = "none"
    poison_ratio: float = 1.0
    seed: int = 0
    cutout_size: int = 16
    mixup_alpha: float = 1.0

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ValueError("poison-ratio must be in [0,1]")
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0:
            raise ValueError("epochs >= 1, batch_size >= 2 and lr > 0 required")

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer, lr=self.lr,
                           weight_decay=self.weight_decay, schedule="cosine", seed=self.seed,
                           momentum=self.momentum)


def contrastive_defaults(**kw) -> VictimConfig:
    """Contrastive victims follow the surrogate recipe (Adam, lr 1e-3, no weight decay, one pair per class per batch)."""
    base = dict(paradigm="contrastive", epochs=30, batch_size=16, optimizer="adam", lr=1e-3, weight_decay=0.0)
    base.update(kw)
    return VictimConfig(**base)


@dataclass
class LearningCurve:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_metric: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, metric: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.test_metric.append(metric)

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.epochs, self.train_loss, self.test_metric))

    def to_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "test_metric"])
            w.writerows(self.rows())
        return Path(path)


# --- defenses ------------------------------------------------------------------

def cutout(image, patch_size: int, rng: np.random.Generator):
    """Gray (0.5) out one random square patch of an image laid out ... x H x W."""
    out = image.clone() if isinstance(image, torch.Tensor) else np.array(image, copy=True)
    h, w = out.shape[-2:]
    if patch_size <= 0:
        return out
    patch_size = min(patch_size, h, w)
    y = int(rng.integers(0, h - patch_size + 1))
    x = int(rng.integers(0, w - patch_size + 1))
    out[..., y:y + patch_size, x:x + patch_size] = 0.5
    return out


def mixup(images: torch.Tensor, labels: torch.Tensor, alpha: float, rng: np.random.Generator,
          num_classes: int | None = None, lam: float | None = None, perm: torch.Tensor | None = None):
    """Convex combination of a batch with a permutation of itself; returns (images, soft labels)."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = torch.from_numpy(rng.permutation(len(images)))
    if labels.ndim == 1:
        labels = F.one_hot(labels, num_classes or int(labels.max()) + 1).to(images.dtype)
    return lam * images + (1 - lam) * images[perm], lam * labels + (1 - lam) * labels[perm]


def augproxy(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Lightweight AutoAugment stand-in: flip, +-15 deg rotation, pad-4 crop, brightness +-0.2."""
    n, _, h, w = images.shape
    x = images.clone()
    flip = torch.from_numpy(rng.random(n) < 0.5)
    x[flip] = x[flip].flip(-1)
    angle = torch.from_numpy(rng.uniform(-15, 15, n)) * math.pi / 180
    cos, sin = torch.cos(angle), torch.sin(angle)
    theta = torch.stack([torch.stack([cos, -sin, torch.zeros(n, dtype=cos.dtype)], 1),
                         torch.stack([sin, cos, torch.zeros(n, dtype=cos.dtype)], 1)], 1).to(x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    padded = F.pad(x, (4, 4, 4, 4), mode="replicate")
    dy, dx = rng.integers(0, 9, n), rng.integers(0, 9, n)
    x = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    bright = torch.from_numpy(rng.uniform(-0.2, 0.2, n)).to(x.dtype)[:, None, None, None]
    return (x + bright).clamp(0, 1)


# --- victims -------------------------------------------------------------------

class Classifier(nn.Module):
    def __init__(self, architecture: str = "conv4", num_classes: int = 16):
        super().__init__()
        self.config = {"architecture": architecture, "num_classes": num_classes}
        self.features, width = build_backbone(architecture)
        self.fc = nn.Linear(width, num_classes)

    def forward(self, x):
        return self.fc(self.features(x))

    def save(self, path: str | Path) -> Path:
        return checkpoint.save(path, self.state_dict(), {"role": "classifier", "config": self.config})

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        header, state = checkpoint.load(path)
        if header.get("role") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        model = cls(**header["config"])
        model.load_state_dict(state)
        model.eval()
        return model


def _soft_ce(logits, soft):
    return -(soft * F.log_softmax(logits, 1)).sum(1).mean()


def train_supervised_victim(train: list[CaptionedSample], test: list[CaptionedSample], cfg: VictimConfig,
                            num_classes: int | None = None) -> tuple[Classifier, LearningCurve]:
    cfg.validate()
    num_classes = num_classes or 1 + max(s.class_id for s in train + test)
    torch.manual_seed(cfg.seed)
    model = Classifier(cfg.architecture, num_classes)
    tcfg = cfg.train_config()
    opt, sched = make_optimizer(model.parameters(), tcfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x_all = images_tensor(train)
    y_all = torch.tensor([s.class_id for s in train])
    curve = LearningCurve()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(iterate_batches(len(train), cfg.batch_size, gen)):
            x, y = x_all[idx], y_all[idx]
            if cfg.defense == "cutout":
                x = torch.stack([cutout(xi, cfg.cutout_size, rng) for xi in x])
            elif cfg.defense == "augproxy":
                x = augproxy(x, rng)
            if cfg.defense == "mixup":
                x, soft = mixup(x, y, cfg.mixup_alpha, rng, num_classes)
                loss = _soft_ce(model(x), soft)
            else:
                loss = F.cross_entropy(model(x), y)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"victim diverged at epoch {epoch} step {step} (lr {cfg.lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        acc = classify_eval(model, test)
        curve.append(epoch, total / count, acc)
        log.info("victim %s/%s epoch %d loss %.4f acc %.2f (%.1fs)", cfg.architecture, cfg.defense, epoch,
                 total / count, acc, time.perf_counter() - t0)
    return model, curve


def train_contrastive_victim(train: list[CaptionedSample], test: list[CaptionedSample], cfg: VictimConfig,
                             vocab: list[str]) -> tuple[SurrogateModel, LearningCurve]:
    """Fresh dual encoder trained on (possibly protected) pairs; metric is clean-test I2T Hit@1."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = SurrogateModel(vocab, arch=cfg.architecture, image_size=train[0].image.shape[0])
    pools = class_pools(test)

    def hit1(m):
        m.eval()
        return retrieval_eval(m, test, (1,), pools)[0].hit_at[1]

    model, trace = train_contrastive(model, images_tensor(train), [s.caption for s in train], cfg.train_config(),
                                     eval_fn=hit1, prefix=f"victim-{cfg.architecture}",
                                     keys=[s.class_id for s in train])
    curve = LearningCurve()
    for r in trace.epochs:
        curve.append(r.epoch, r.loss, r.metric)
    return model, curve


# --- poisoning and baselines -----------------------------------------------------

def poison_count(ratio: float, n: int) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("poison-ratio must be in [0,1]")
    return math.floor(round(ratio * n, 9))


def mix_poison(clean: list[CaptionedSample], protected: list[CaptionedSample], ratio: float,
               seed: int) -> list[CaptionedSample]:
    """Replace exactly floor(ratio * N) seeded-chosen clean samples by their protected versions."""
    if [s.id for s in clean] != [s.id for s in protected]:
        missing = sorted(set(s.id for s in clean) ^ set(s.id for s in protected))
        raise ValueError(f"clean and protected ids differ: {missing[:10]}")
    k = poison_count(ratio, len(clean))
    if k == len(clean):
        return list(protected)
    chosen = set(np.random.default_rng(seed).choice(len(clean), size=k, replace=False).tolist())
    return [protected[i] if i in chosen else clean[i] for i in range(len(clean))]


def random_noise(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise in [-epsilon, epsilon] snapped to the 1/255 grid."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    u = rng.uniform(-epsilon, epsilon, size=shape)
    return np.sign(u) * np.floor(np.abs(u) * 255 + 0.5) / 255


def random_noise_bank(samples, epsilon: float, seed: int) -> dict[str, np.ndarray]:
    """Sample-wise random noise as integer grid steps, keyed by sample id."""
    rng = np.random.default_rng(seed)
    n = samples[0].image.shape[0]
    noise = random_noise((len(samples), 3, n, n), epsilon, rng)
    steps = np.rint(noise * 255).astype(np.int16)
    return {s.id: steps[i] for i, s in enumerate(samples)}


@dataclass
class EMConfig:
    mode: str = "sample_wise"
    epsilon: float = 8 / 255
    step_size: float = 0.8 / 255
    model_steps: int = 10
    pgd_steps: int = 20
    rounds: int = 10
    architecture: str = "conv4"
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("class_wise", "sample_wise"):
            raise ValueError("mode must be class_wise or sample_wise")
        if self.epsilon <= 0 or self.step_size <= 0:
            raise ValueError("epsilon and step_size must be > 0")


@dataclass
class EMResult:
    noise: torch.Tensor  # float, per sample or per class, within [-epsilon, epsilon]
    mode: str
    round_losses: list[float]
    keys: list[str]

    def bank(self) -> dict[str, np.ndarray]:
        steps = (torch.sign(self.noise) * torch.floor(self.noise.abs() * 255 + 0.5)).to(torch.int16).numpy()
        return {k: steps[i] for i, k in enumerate(self.keys)}


def em_baseline_noise(train: list[CaptionedSample], cfg: EMConfig) -> EMResult:
    """Error-minimizing noise: alternate model SGD steps with PGD steps that lower the same loss.

    Needs the images themselves, unlike the text-driven generator.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = images_tensor(train)
    y_all = torch.tensor([s.class_id for s in train])
    num_classes = int(y_all.max()) + 1
    model = Classifier(cfg.architecture, num_classes)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=5e-4)
    if cfg.mode == "class_wise":
        keys = [str(c) for c in range(num_classes)]
        delta = torch.zeros(num_classes, *x_all.shape[1:])
        owner = y_all
    else:
        keys = [s.id for s in train]
        delta = torch.zeros_like(x_all)
        owner = torch.arange(len(train))
    eps = torch.tensor(cfg.epsilon, dtype=delta.dtype)

    def perturbed(idx):
        return (x_all[idx] + delta[owner[idx]]).clamp(0, 1)

    round_losses = []
    for r in range(cfg.rounds):
        model.train()
        batches = iter(())
        for _ in range(cfg.model_steps):
            idx = next(batches, None)
            if idx is None:
                batches = iterate_batches(len(train), cfg.batch_size, gen)
                idx = next(batches)
            loss = F.cross_entropy(model(perturbed(idx)), y_all[idx])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"EM model diverged in round {r}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        for idx in iterate_batches(len(train), cfg.batch_size, gen):
            own = owner[idx]
            for _ in range(cfg.pgd_steps):
                d = delta[own].clone().requires_grad_(True)
                loss = F.cross_entropy(model((x_all[idx] + d).clamp(0, 1)), y_all[idx])
                (g,) = torch.autograd.grad(loss, d)
                with torch.no_grad():
                    if cfg.mode == "class_wise":
                        step = torch.zeros_like(delta).index_add_(0, own, g)
                        delta -= cfg.step_size * step.sign()
                    else:
                        delta[own] -= cfg.step_size * g.sign()
                    delta.copy_(torch.maximum(torch.minimum(delta, eps), -eps))
        with torch.no_grad():
            total = 0.0
            for i in range(0, len(train), 512):
                idx = torch.arange(i, min(i + 512, len(train)))
                total += F.cross_entropy(model(perturbed(idx)), y_all[idx], reduction="sum").item()
        round_losses.append(total / len(train))
        log.info("EM round %d: perturbed train loss %.4f", r, round_losses[-1])
    return EMResult(delta.detach(), cfg.mode, round_losses, keys)


def apply_bank(samples: list[CaptionedSample], bank: dict[str, np.ndarray], mode: str) -> list[CaptionedSample]:
    """Protected copies of ``samples`` given integer noise steps keyed by class id or sample id."""
    from .protector import protect_bytes

    out = []
    for s in samples:
        key = str(s.class_id) if mode == "class_wise" else s.id
        if key not in bank:
            raise KeyError(f"no noise for sample {s.id}")
        b = protect_bytes(s.image, bank[key])
        out.append(replace(s, image=b.astype(np.float32) / np.float32(255.0)))
    return out
