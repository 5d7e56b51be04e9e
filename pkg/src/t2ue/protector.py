"""Train the noise generator against a frozen surrogate and produce protected datasets.

Noise is computed from (caption, latent) pairs only. ``noise_bank`` never sees an
image; images are read afterwards, when the noise is applied.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import EpochRecord, TrainConfig, TrainLog, make_optimizer
from .generator import GeneratorModel, noise_steps
from .nn_core import info_nce
from .surrogate import SurrogateModel, distinct_batches, images_tensor
from .toydata import (CaptionedSample, DatasetManifest, DatasetSpec, ManifestEntry, caption_for,
                      iter_layout, to_uint8, write_png)

log = logging.getLogger(__name__)

MODES = ("class_wise", "sample_wise")


def apply_noise(image, delta):
    """clamp(image + delta, 0, 1) for numpy arrays or tensors of equal shape."""
    if tuple(image.shape) != tuple(delta.shape):
        raise ValueError(f"shape mismatch: image {tuple(image.shape)} vs noise {tuple(delta.shape)}")
    if isinstance(image, torch.Tensor):
        return (image + delta).clamp(0.0, 1.0)
    return np.clip(image + delta, 0.0, 1.0)


# --- generator training --------------------------------------------------------

@dataclass
class GenTrainLog(TrainLog):
    clean_initial_loss: float = float("nan")
    surrogate_hash_before: str = ""
    surrogate_hash_after: str = ""


def caption_tables(surrogate: SurrogateModel, captions: list[str]):
    """Unique captions with their normalized and raw embeddings, plus an index per input caption."""
    unique = sorted(set(captions))
    with torch.no_grad():
        norm, raw = surrogate.encode_text(unique)
    pos = {c: i for i, c in enumerate(unique)}
    return norm, raw, torch.tensor([pos[c] for c in captions])


Z_POLICIES = ("resample", "per_sample")


def train_generator(train: list[CaptionedSample], surrogate: SurrogateModel, gen: GeneratorModel,
                    cfg: TrainConfig, out_dir: str | Path | None = None, z_policy: str = "resample"
                    ) -> tuple[GeneratorModel, GenTrainLog]:
    """Minimize surrogate InfoNCE between protected images and their captions; only the generator learns.

    z_policy: ``resample`` draws a fresh latent every step, ``per_sample`` keeps one latent per training
    sample for the whole run.
    """
    if z_policy not in Z_POLICIES:
        raise ValueError(f"z_policy must be one of {Z_POLICIES}, got {z_policy!r}")
    if not surrogate.frozen:
        raise RuntimeError("surrogate must be frozen before generator training")
    cfg.validate()
    images = images_tensor(train)
    if images.shape[-1] != gen.resolution:
        raise ValueError(f"generator makes {gen.resolution}px noise but images are {images.shape[-1]}px")
    if cfg.batch_size > len(train):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(train)}")
    torch.manual_seed(cfg.seed)
    batch_gen = torch.Generator().manual_seed(cfg.seed)
    z_gen = torch.Generator().manual_seed(cfg.seed + 1)
    fixed_z = torch.randn(len(train), gen.latent_dim, generator=z_gen) if z_policy == "per_sample" else None
    captions = [s.caption for s in train]
    txt_norm, txt_raw, cap_idx = caption_tables(surrogate, captions)
    tau = surrogate.temperature.detach()
    opt, sched = make_optimizer(gen.parameters(), cfg)
    out_dir = Path(out_dir) if out_dir else None
    trace = GenTrainLog(surrogate_hash_before=checkpoint.state_hash(surrogate))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        gen.train()
        total, count = 0.0, 0
        for step, idx in enumerate(distinct_batches([s.class_id for s in train], cfg.batch_size, batch_gen)):
            ci = cap_idx[idx]
            z = fixed_z[idx] if fixed_z is not None else torch.randn(len(idx), gen.latent_dim, generator=z_gen)
            delta = gen(txt_raw[ci], z)
            protected = apply_noise(images[idx], delta)
            loss = info_nce(surrogate.encode_image(protected), txt_norm[ci], tau)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"generator loss diverged at epoch {epoch} step {step}")
            if epoch == 0 and step == 0:
                trace.initial_loss = loss.item()
                with torch.no_grad():
                    trace.clean_initial_loss = info_nce(surrogate.encode_image(images[idx]), txt_norm[ci], tau).item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        rec = EpochRecord(epoch, total / count, None, time.perf_counter() - t0)
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            rec.checkpoint = str(gen.save(out_dir / f"generator_epoch{epoch + 1:04d}.ckpt", {"epoch": epoch + 1}))
        trace.epochs.append(rec)
        log.info("generator epoch %d loss %.4f (%.1fs)", epoch, rec.loss, rec.seconds)

    gen.eval()
    trace.surrogate_hash_after = checkpoint.state_hash(surrogate)
    if out_dir:
        gen.save(out_dir / "generator.ckpt", {"epoch": cfg.epochs})
    return gen, trace


def generator_objective(gen: GeneratorModel, surrogate: SurrogateModel, samples: list[CaptionedSample],
                        seed: int = 0) -> float:
    """Surrogate InfoNCE on one batch of protected samples (generator in eval mode)."""
    gen.eval()
    txt_norm, txt_raw, ci = caption_tables(surrogate, [s.caption for s in samples])
    z = torch.randn(len(samples), gen.latent_dim, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        protected = apply_noise(images_tensor(samples), gen(txt_raw[ci], z))
        return info_nce(surrogate.encode_image(protected), txt_norm[ci], surrogate.temperature).item()


# --- protection plans --------------------------------------------------------

def _key_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass
class ProtectionPlan:
    mode: str
    plan_seed: int
    epsilon: float
    template_policy: str
    latent_dim: int
    entries: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "plan_seed": self.plan_seed, "epsilon": self.epsilon,
                           "template_policy": self.template_policy, "latent_dim": self.latent_dim,
                           "entries": self.entries}, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "ProtectionPlan":
        return cls(**json.loads(Path(path).read_text()))

    def key_for(self, sample_id: str, class_id: int) -> str:
        return str(class_id) if self.mode == "class_wise" else sample_id


def make_plan(mode: str, spec: DatasetSpec, plan_seed: int, split: str = "train",
              template_policy: str | None = None, template_id: int = 0, latent_dim: int = 64,
              epsilon: float = 8 / 255) -> ProtectionPlan:
    """Materialize (caption, z) for every class (class_wise) or every sample of a split (sample_wise).

    template_policy: ``fixed`` uses ``template_id`` everywhere (class_wise default);
    ``draw`` picks a template per sample from its keyed stream (sample_wise default);
    ``own`` keeps each sample's own caption template.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    policy = template_policy or ("fixed" if mode == "class_wise" else "draw")
    if policy not in ("fixed", "draw", "own"):
        raise ValueError(f"template_policy must be fixed, draw or own, got {policy!r}")
    if mode == "class_wise" and policy != "fixed":
        raise ValueError("class_wise plans use a fixed template")
    n_templates = len(spec.caption_templates)
    if not 0 <= template_id < n_templates:
        raise IndexError(f"template_id {template_id} out of range")

    entries = {}
    if mode == "class_wise":
        for c in range(spec.num_classes):
            rng = np.random.default_rng(np.random.SeedSequence([plan_seed, 0, c]))
            z = rng.standard_normal(latent_dim).astype(np.float32)
            entries[str(c)] = {"class_id": c, "template_id": template_id,
                               "caption": caption_for(c, template_id, spec), "z": [float(v) for v in z]}
    else:
        for sid, c, _, own_t in iter_layout(spec, split):
            rng = np.random.default_rng(np.random.SeedSequence([plan_seed, 1, _key_seed(sid)]))
            z = rng.standard_normal(latent_dim).astype(np.float32)
            drawn = int(rng.integers(n_templates))
            t = {"fixed": template_id, "draw": drawn, "own": own_t}[policy]
            entries[sid] = {"class_id": c, "template_id": t, "caption": caption_for(c, t, spec),
                            "z": [float(v) for v in z]}
    return ProtectionPlan(mode, plan_seed, epsilon, policy, latent_dim, entries)


# --- zero-contact noise and export ---------------------------------------------

def noise_bank(gen: GeneratorModel, surrogate: SurrogateModel, plan: ProtectionPlan,
               batch_size: int = 256) -> dict[str, np.ndarray]:
    """Integer noise steps (3 x H x W, multiples of 1/255) for every plan key. Reads no images."""
    if not math.isclose(plan.epsilon, gen.epsilon, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"plan epsilon {plan.epsilon} differs from generator epsilon {gen.epsilon}")
    gen.eval()
    keys = list(plan.entries)
    bank = {}
    with torch.no_grad():
        for i in range(0, len(keys), batch_size):
            chunk = keys[i:i + batch_size]
            _, raw = surrogate.encode_text([plan.entries[k]["caption"] for k in chunk])
            z = torch.tensor([plan.entries[k]["z"] for k in chunk], dtype=torch.float32)
            steps = noise_steps(gen(raw, z)).numpy()
            for k, s in zip(chunk, steps):
                bank[k] = s
    return bank


def missing_keys(samples, plan: ProtectionPlan) -> list[str]:
    return [s.id for s in samples if plan.key_for(s.id, s.class_id) not in plan.entries]


def protect_bytes(image: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Protected uint8 image (H x W x 3) from a [0, 1] image and integer noise steps (3 x H x W)."""
    return np.clip(to_uint8(image).astype(np.int16) + steps.transpose(1, 2, 0), 0, 255).astype(np.uint8)


def protect_samples(samples: list[CaptionedSample], bank: dict[str, np.ndarray],
                    plan: ProtectionPlan) -> list[CaptionedSample]:
    """In-memory equivalent of export_protected followed by load_dataset."""
    missing = missing_keys(samples, plan)
    if missing:
        raise KeyError(f"plan does not cover {len(missing)} sample(s): {missing[:10]}")
    out = []
    for s in samples:
        b = protect_bytes(s.image, bank[plan.key_for(s.id, s.class_id)])
        out.append(CaptionedSample(s.id, b.astype(np.float32) / np.float32(255.0), s.caption,
                                   s.class_id, s.template_id))
    return out


def export_protected(samples, gen: GeneratorModel, surrogate: SurrogateModel, plan: ProtectionPlan,
                     out_dir: str | Path, spec: DatasetSpec, split: str = "train",
                     generator_checkpoint_hash: str = "", noise_dir: str | Path | None = None
                     ) -> DatasetManifest:
    """Write protected PNGs plus a manifest; captions and labels are copied verbatim."""
    missing = missing_keys(samples, plan)
    if missing:
        raise KeyError(f"plan does not cover {len(missing)} sample(s): {missing[:10]}")
    bank = noise_bank(gen, surrogate, plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        protected = protect_bytes(s.image, bank[plan.key_for(s.id, s.class_id)])
        write_png(out_dir / f"{s.id}.png", protected.astype(np.float64) / 255.0)
        entries.append(ManifestEntry(s.id, f"{s.id}.png", s.caption, s.class_id, s.template_id))
    if noise_dir is not None:
        write_noise_maps(bank, noise_dir, plan)
    manifest = DatasetManifest(spec, split, entries, out_dir,
                               extra={"plan_hash": plan.hash, "generator_checkpoint_hash": generator_checkpoint_hash,
                                      "epsilon": plan.epsilon, "protection_mode": plan.mode})
    manifest.write(out_dir)
    return manifest


def write_noise_maps(bank: dict[str, np.ndarray], noise_dir: str | Path, plan: ProtectionPlan,
                     limit: int = 64) -> None:
    """Min-max normalized noise images for inspection."""
    noise_dir = Path(noise_dir)
    noise_dir.mkdir(parents=True, exist_ok=True)
    for key in sorted(bank)[:limit]:
        s = bank[key].astype(np.float64).transpose(1, 2, 0)
        span = s.max() - s.min()
        vis = (s - s.min()) / span if span > 0 else np.full_like(s, 0.5)
        write_png(noise_dir / f"noise_{key}.png", vis)
