"""Miniature dual-encoder contrastive model ("toy CLIP") and its training loop.

The same class doubles as the contrastive victim: only the image backbone
and the training data differ.
"""

from __future__ import annotations

import logging
import math
import re
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .config import EpochRecord, TrainConfig, TrainLog, make_optimizer, seed_everything
from .nn_core import INIT_LOGIT_SCALE, MAX_LOGIT_SCALE, info_nce, l2_normalize
from .toydata import CaptionedSample, DatasetSpec

log = logging.getLogger(__name__)

ARCHITECTURES = ("conv4", "conv6-wide", "conv4-residual")
PAD, UNK = "<pad>", "<unk>"
# output projections start small so that every embedding sits near the shared
# bias direction: logits begin almost uniform and the first loss is close to ln N
PROJ_INIT_SCALE = 0.1


def _conv_bn(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.body = nn.Sequential(*_conv_bn(cin, cout, stride)[:2], nn.ReLU(inplace=True),
                                  nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout))
        self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


def build_backbone(arch: str) -> tuple[nn.Module, int]:
    """Conv feature extractor ending in global average pooling; returns (module, feature width)."""
    if arch == "conv4":
        layers, c = [], 3
        for out in (32, 64, 128, 128):
            layers += _conv_bn(c, out, 2)
            c = out
    elif arch == "conv6-wide":
        layers, c = [], 3
        for out, stride in ((48, 2), (48, 1), (96, 2), (96, 1), (192, 2), (192, 2)):
            layers += _conv_bn(c, out, stride)
            c = out
    elif arch == "conv4-residual":
        layers = _conv_bn(3, 32, 2) + [_ResBlock(32, 64, 2), _ResBlock(64, 128, 2), _ResBlock(128, 128, 2)]
        c = 128
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten()), c


class ImageEncoder(nn.Module):
    def __init__(self, arch: str = "conv4", embed_dim: int = 64):
        super().__init__()
        self.features, width = build_backbone(arch)
        self.proj = nn.Linear(width, embed_dim)

    def forward(self, x):
        return self.proj(self.features(x))


def build_vocab(spec: DatasetSpec) -> list[str]:
    words = set(spec.colors) | set(spec.shapes)
    for t in spec.caption_templates:
        words |= set(tokenize(t.replace("{color}", " ").replace("{shape}", " ")))
    return [PAD, UNK] + sorted(words)


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class TextEncoder(nn.Module):
    """Token embedding, masked mean pooling, then a two-layer MLP."""

    def __init__(self, vocab: list[str], token_dim: int = 32, embed_dim: int = 64):
        super().__init__()
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.embed = nn.Embedding(len(vocab), token_dim, padding_idx=0)
        self.mlp = nn.Sequential(nn.Linear(token_dim, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim))
        self.unk_count = 0

    def token_ids(self, captions: list[str]) -> torch.Tensor:
        rows = []
        for cap in captions:
            toks = tokenize(cap)
            if not toks:
                raise ValueError(f"empty caption: {cap!r}")
            ids = [self.index.get(t, 1) for t in toks]
            unknown = ids.count(1)
            if unknown:
                self.unk_count += unknown
                log.warning("caption %r has %d unknown word(s)", cap, unknown)
            rows.append(ids)
        width = max(len(r) for r in rows)
        return torch.tensor([r + [0] * (width - len(r)) for r in rows], dtype=torch.long)

    def forward(self, captions: list[str]) -> torch.Tensor:
        ids = self.token_ids(captions).to(self.embed.weight.device)
        mask = (ids != 0).unsqueeze(-1).to(self.embed.weight.dtype)
        pooled = (self.embed(ids) * mask).sum(1) / mask.sum(1)
        return self.mlp(pooled)


class SurrogateModel(nn.Module):
    def __init__(self, vocab: list[str], arch: str = "conv4", image_size: int = 32,
                 embed_dim: int = 64, token_dim: int = 32):
        super().__init__()
        self.config = {"arch": arch, "image_size": image_size, "embed_dim": embed_dim,
                       "token_dim": token_dim, "vocab": list(vocab)}
        self.image_encoder = ImageEncoder(arch, embed_dim)
        self.text_encoder = TextEncoder(vocab, token_dim, embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(INIT_LOGIT_SCALE))
        self.frozen = False
        with torch.no_grad():
            self.image_encoder.proj.weight.mul_(PROJ_INIT_SCALE)
            self.text_encoder.mlp[-1].weight.mul_(PROJ_INIT_SCALE)

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.logit_scale.clamp(max=MAX_LOGIT_SCALE).exp()

    def freeze(self) -> "SurrogateModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        if mode and self.frozen:
            raise RuntimeError("frozen surrogate cannot enter training mode")
        return super().train(mode)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        s = self.config["image_size"]
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise ValueError(f"expected images of shape N x 3 x {s} x {s}, got {tuple(images.shape)}")
        return l2_normalize(self.image_encoder(images))

    def encode_text(self, captions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (L2-normalized embedding, raw pooled embedding used for conditioning)."""
        raw = self.text_encoder(captions)
        return l2_normalize(raw), raw

    def loss(self, images: torch.Tensor, captions: list[str]) -> torch.Tensor:
        img = self.encode_image(images)
        txt, _ = self.encode_text(captions)
        return info_nce(img, txt, self.temperature)

    def save(self, path: str | Path) -> Path:
        header = {"role": "surrogate", "config": self.config,
                  "logit_scale": float(self.logit_scale.detach()), "frozen": self.frozen}
        return checkpoint.save(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: str | Path) -> "SurrogateModel":
        header, state = checkpoint.load(path)
        if header.get("role") != "surrogate":
            raise ValueError(f"{path} is not a surrogate checkpoint")
        model = cls(**header["config"])
        model.load_state_dict(state)
        if header["frozen"]:
            model.freeze()
        return model


def images_tensor(samples: list[CaptionedSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def iterate_batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def distinct_batches(keys: list, batch_size: int, gen: torch.Generator):
    """Shuffled batches in which no key repeats.

    Two pairs with the same meaning inside one batch are false negatives for
    InfoNCE. Web caption corpora almost never produce them, but templated toy
    captions of one class do, even when the wording differs, so callers key
    batches on the class a caption describes.
    """
    if batch_size > len(set(keys)):
        raise ValueError(f"batch_size {batch_size} exceeds the {len(set(keys))} distinct batch keys")
    open_batches: list[tuple[set, list]] = []
    for i in torch.randperm(len(keys), generator=gen).tolist():
        c = keys[i]
        for seen, batch in open_batches:
            if c not in seen:
                seen.add(c)
                batch.append(i)
                break
        else:
            open_batches.append(({c}, [i]))
        full = [b for b in open_batches if len(b[1]) == batch_size]
        for b in full:
            open_batches.remove(b)
            yield torch.tensor(b[1])
    for _, batch in open_batches:
        if len(batch) >= 2:
            yield torch.tensor(batch)


def train_contrastive(model: SurrogateModel, images: torch.Tensor, captions: list[str], cfg: TrainConfig,
                      out_dir: str | Path | None = None, eval_fn=None, prefix: str = "surrogate",
                      keys: list | None = None) -> tuple[SurrogateModel, TrainLog]:
    """Minimize symmetric InfoNCE over shuffled batches of (image, caption) pairs.

    ``keys`` (default: the captions themselves) must be distinct within a batch.
    """
    cfg.validate()
    if len(captions) != len(images):
        raise ValueError("images and captions differ in length")
    keys = captions if keys is None else keys
    if cfg.batch_size > len(images):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(images)}")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt, sched = make_optimizer(model.parameters(), cfg)
    out_dir = Path(out_dir) if out_dir else None
    trace = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(distinct_batches(keys, cfg.batch_size, gen)):
            loss = model.loss(images[idx], [captions[i] for i in idx.tolist()])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"{prefix} loss diverged at epoch {epoch} step {step}")
            if epoch == 0 and step == 0:
                trace.initial_loss = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.logit_scale.clamp_(max=MAX_LOGIT_SCALE)
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        metric = eval_fn(model) if eval_fn else None
        rec = EpochRecord(epoch, total / count, metric, time.perf_counter() - t0)
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            rec.checkpoint = str(model.save(out_dir / f"{prefix}_epoch{epoch + 1:04d}.ckpt"))
        trace.epochs.append(rec)
        log.info("%s epoch %d loss %.4f metric %s", prefix, epoch, rec.loss, metric)
    model.eval()
    return model, trace


def train_surrogate(train: list[CaptionedSample], cfg: TrainConfig, spec: DatasetSpec,
                    out_dir: str | Path | None = None, arch: str = "conv4"
                    ) -> tuple[SurrogateModel, TrainLog]:
    if not train:
        raise ValueError("training set is empty")
    seed_everything(cfg.seed)
    model = SurrogateModel(build_vocab(spec), arch=arch, image_size=spec.image_size)
    model, trace = train_contrastive(model, images_tensor(train), [s.caption for s in train], cfg, out_dir,
                                     keys=[s.class_id for s in train])
    model.freeze()
    if out_dir:
        model.save(Path(out_dir) / "surrogate.ckpt")
    return model, trace
