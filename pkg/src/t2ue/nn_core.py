"""Differentiable building blocks shared by the surrogate, generator and victims."""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

# CLIP convention: logit scale starts at 1/0.07 and the temperature never drops below 0.01.
INIT_LOGIT_SCALE = math.log(1 / 0.07)
MAX_LOGIT_SCALE = math.log(100.0)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("degenerate embedding: zero-norm row")
    return x / norms


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return l2_normalize(a) @ l2_normalize(b).T


def info_nce_logits(logits: torch.Tensor) -> torch.Tensor:
    """Symmetric cross-entropy over a square logit matrix whose diagonal holds the positives."""
    n = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != n:
        raise ValueError(f"expected a square logit matrix, got {tuple(logits.shape)}")
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    target = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def info_nce(img: torch.Tensor, txt: torch.Tensor, temperature) -> torch.Tensor:
    if img.shape != txt.shape:
        raise ValueError(f"batch shapes differ: {tuple(img.shape)} vs {tuple(txt.shape)}")
    if img.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    t = torch.as_tensor(temperature, dtype=img.dtype)
    if bool((t <= 0).any()):
        raise ValueError(f"temperature must be positive, got {float(t)}")
    return info_nce_logits(cosine_similarity_matrix(img, txt) / t)


class SSCBN(nn.Module):
    """Batch normalization whose per-channel scale and shift are predicted from a text embedding.

    Statistics are taken over the batch and spatial dims in training mode; running
    averages (momentum 0.1) are used in eval mode so single samples work.
    """

    def __init__(self, channels: int, cond_dim: int, eps_bn: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.norm = nn.BatchNorm2d(channels, eps=eps_bn, momentum=momentum, affine=False)
        self.gamma = nn.Linear(cond_dim, channels)
        self.beta = nn.Linear(cond_dim, channels)
        nn.init.normal_(self.gamma.weight, std=0.02)
        nn.init.ones_(self.gamma.bias)
        nn.init.normal_(self.beta.weight, std=0.02)
        nn.init.zeros_(self.beta.bias)

    def forward(self, h: torch.Tensor, emb_t: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.channels:
            raise ValueError(f"SSCBN expects {self.channels} channels, got {h.shape[1]}")
        if self.training and h.shape[0] < 2:
            raise ValueError("SSCBN needs batch size >= 2 in training mode")
        h_hat = self.norm(h)
        gamma = self.gamma(emb_t)[:, :, None, None]
        beta = self.beta(emb_t)[:, :, None, None]
        return gamma * h_hat + beta


def sscbn(h: torch.Tensor, emb_t: torch.Tensor, params: SSCBN) -> torch.Tensor:
    return params(h, emb_t)


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, step: float = 1e-6,
               grad: Callable[[torch.Tensor], torch.Tensor] | None = None) -> float:
    """Max relative error between an analytic gradient and central differences.

    The analytic gradient comes from ``grad`` when given, otherwise from autograd.
    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = point.detach().clone()
    if grad is None:
        xr = x.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(f(xr), xr)
    else:
        analytic = grad(x.clone())
    analytic = analytic.detach().reshape(-1)
    flat = x.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(x))
            flat[i] = orig - step
            fm = float(f(x))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            numeric[i] = (fp - fm) / (2 * step)
    if not bool(torch.isfinite(analytic).all()):
        bad = int((~torch.isfinite(analytic)).nonzero()[0])
        raise FloatingPointError(f"non-finite analytic gradient at coordinate {bad}")
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, 1e-8))
    return float(((analytic - numeric).abs() / denom).max())
