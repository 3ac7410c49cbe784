"""Convolution-based similarity search, peak localization and the three matching losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class DegenerateInputError(ValueError):
    """Raised when a feature map has zero norm and similarity is undefined."""


@dataclass
class LossConfig:
    pos_region: int = 7
    k_neg: int = 49
    k_fine: int = 9
    gaussian_sigma: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    neg_mode: str = "mean"  # or "max": single hardest negative

    def __post_init__(self):
        if self.pos_region < 1 or self.pos_region % 2 == 0:
            raise ValueError("pos_region must be a positive odd integer")
        if self.k_neg < 1 or self.k_fine < 1:
            raise ValueError("k_neg and k_fine must be >= 1")
        if not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.neg_mode not in ("mean", "max"):
            raise ValueError("neg_mode must be 'mean' or 'max'")


@dataclass
class SimilarityMap:
    scores: torch.Tensor  # (rows, cols) or (batch, rows, cols)
    template_dims: tuple[int, int]
    reference_dims: tuple[int, int]


@dataclass
class MatchResult:
    predicted: tuple[int, int]
    score: float
    l2_error: float | None = None

    def to_dict(self) -> dict:
        return {"predicted": list(self.predicted), "score": self.score, "l2_error": self.l2_error}


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def correlate(F_S: torch.Tensor, F_O: torch.Tensor, method: str = "direct") -> torch.Tensor:
    """Unnormalized valid cross-correlation with the template as kernel, one map per batch item."""
    F_S, F_O = _batched(F_S), _batched(F_O)
    B, C, hs, ws = F_S.shape
    ho, wo = F_O.shape[-2:]
    if F_O.shape[:2] != (B, C):
        raise ValueError(f"template {tuple(F_S.shape)} and reference {tuple(F_O.shape)} disagree on batch/channels")
    if hs > ho or ws > wo:
        raise ValueError("template is larger than the reference")
    if method == "direct":
        out = F.conv2d(F_O.reshape(1, B * C, ho, wo), F_S, groups=B)
        return out[0]
    if method == "fft":
        spec = torch.fft.rfft2(F_O) * torch.conj(torch.fft.rfft2(F_S, s=(ho, wo)))
        full = torch.fft.irfft2(spec.sum(1), s=(ho, wo))
        return full[:, : ho - hs + 1, : wo - ws + 1]
    raise ValueError(f"unknown correlation method {method!r}")


def similarity_map(F_S: torch.Tensor, F_O: torch.Tensor, mode: str = "global", method: str = "direct") -> torch.Tensor:
    """Normalized similarity of template features ``F_S`` at every offset in reference features ``F_O``.

    ``mode="global"`` divides by the product of the whole-map L2 norms; ``mode="ncc"``
    divides by the template norm times the norm of the reference window under it.
    Unbatched (C, H, W) inputs give a (rows, cols) map, batched ones (B, rows, cols).
    """
    squeeze = F_S.dim() == 3
    F_S, F_O = _batched(F_S), _batched(F_O)
    ns = F_S.flatten(1).norm(dim=1)
    no = F_O.flatten(1).norm(dim=1)
    if (ns == 0).any() or (no == 0).any():
        raise DegenerateInputError("similarity undefined for a zero-norm feature map")
    corr = correlate(F_S, F_O, method)
    if mode == "global":
        sim = corr / (ns * no)[:, None, None]
    elif mode == "ncc":
        hs, ws = F_S.shape[-2:]
        energy = F.avg_pool2d(F_O.pow(2).sum(1, keepdim=True), (hs, ws), stride=1) * (hs * ws)
        win = energy[:, 0].clamp_min(0).sqrt()
        sim = torch.where(win > 0, corr / (ns[:, None, None] * win.clamp_min(1e-300)), torch.zeros_like(corr))
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return sim[0] if squeeze else sim


def locate_peak(scores) -> MatchResult:
    """Global argmax of a 2D map; ties go to the smallest row-major index."""
    if isinstance(scores, SimilarityMap):
        scores = scores.scores
    a = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("locate_peak needs a non-empty 2D map")
    flat = int(np.argmax(a))
    r, c = divmod(flat, a.shape[1])
    return MatchResult((r, c), float(a[r, c]))


def gaussian_soft_label(gt: tuple[int, int], dims: tuple[int, int], sigma: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    r, c = gt
    if not (0 <= r < dims[0] and 0 <= c < dims[1]):
        raise ValueError(f"ground truth {gt} outside map of size {dims}")
    i = torch.arange(dims[0], dtype=dtype).unsqueeze(1)
    j = torch.arange(dims[1], dtype=dtype).unsqueeze(0)
    return torch.exp(-((i - r) ** 2 + (j - c) ** 2) / (2 * sigma ** 2))


def positive_window(gt: tuple[int, int], dims: tuple[int, int], size: int) -> torch.Tensor:
    """Boolean mask of the ``size`` x ``size`` window centred at ``gt``, clipped at the borders."""
    half = size // 2
    r, c = gt
    mask = torch.zeros(dims, dtype=torch.bool)
    mask[max(r - half, 0): r + half + 1, max(c - half, 0): c + half + 1] = True
    return mask


def matching_loss(sim: torch.Tensor, gt: tuple[int, int], cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    mask = positive_window(gt, tuple(sim.shape), cfg.pos_region).to(sim.device)
    s_pos = sim[mask].mean()
    negatives = sim[~mask]
    loss = (1 - s_pos) ** 2
    if negatives.numel():
        k = 1 if cfg.neg_mode == "max" else min(cfg.k_neg, negatives.numel())
        s_neg = torch.topk(negatives, k).values.mean()
        loss = loss + (s_neg + 1) ** 2
    return loss


def fine_positions(gt: tuple[int, int], dims: tuple[int, int], cfg: LossConfig) -> torch.Tensor:
    """Row-major flat indices of the ``k_fine`` highest soft-label cells inside the positive window."""
    g = gaussian_soft_label(gt, dims, cfg.gaussian_sigma).flatten()
    inside = positive_window(gt, dims, cfg.pos_region).flatten().nonzero().squeeze(1)
    order = torch.sort(-g[inside], stable=True).indices
    return inside[order[: cfg.k_fine]]


def fine_similarity_loss(sim: torch.Tensor, gt: tuple[int, int], cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    dims = tuple(sim.shape)
    idx = fine_positions(gt, dims, cfg).to(sim.device)
    g = gaussian_soft_label(gt, dims, cfg.gaussian_sigma, dtype=sim.dtype).to(sim.device).flatten()
    return ((g[idx] - sim.flatten()[idx]) ** 2).mean()


def peak_loss(sim: torch.Tensor) -> torch.Tensor:
    # (2 - max) + mean avoids the cancellation in 2 - (max - mean) for one-hot maps
    return (2 - sim.max()) + sim.mean()


def total_loss(sim: torch.Tensor, gt, cfg: LossConfig | None = None) -> torch.Tensor:
    """Weighted sum of matching, fine-similarity and peak losses; batched maps average over the batch."""
    cfg = cfg or LossConfig()
    if sim.dim() == 3:
        return torch.stack([total_loss(s, g, cfg) for s, g in zip(sim, gt)]).mean()
    gt = (int(gt[0]), int(gt[1]))
    loss = matching_loss(sim, gt, cfg)
    if cfg.gamma1:
        loss = loss + cfg.gamma1 * fine_similarity_loss(sim, gt, cfg)
    if cfg.gamma2:
        loss = loss + cfg.gamma2 * peak_loss(sim)
    return loss


def l2_error(predicted, gt) -> float:
    return math.hypot(predicted[0] - gt[0], predicted[1] - gt[1])


def zncc_map(template: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Zero-mean normalized cross-correlation of raw 2D intensities; zero-variance windows score 0."""
    t = template.to(torch.float64)
    ref = reference.to(torch.float64)
    hs, ws = t.shape
    tz = t - t.mean()
    tnorm = tz.norm()
    corr = F.conv2d(ref[None, None], tz[None, None])[0, 0]
    mean = F.avg_pool2d(ref[None, None], (hs, ws), stride=1)[0, 0]
    sq = F.avg_pool2d(ref[None, None] ** 2, (hs, ws), stride=1)[0, 0]
    var = ((sq - mean ** 2) * (hs * ws)).clamp_min(0)
    denom = tnorm * var.sqrt()
    # relative floor: window variance at rounding level is treated as zero
    ok = denom > 1e-9 * max(float(tnorm), 1e-300) * (hs * ws) ** 0.5
    return torch.where(ok, corr / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(corr))
