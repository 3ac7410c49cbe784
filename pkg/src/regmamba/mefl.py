"""Multi-expert feature learning: transformation pool, expert heads, inverse recalibration, soft router."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MODALITIES, Backbone, BackboneConfig

EXACT_KINDS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
ALL_KINDS = EXACT_KINDS + ("rotation", "homography")
FUSION_MODES = ("soft", "uniform", "sparse")

_ROT_INVERSE = {"rot90": "rot270", "rot270": "rot90", "rot180": "rot180"}


def _normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    if abs(np.linalg.det(h)) < 1e-12:
        raise ValueError("singular homography")
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("homography with H[2][2] == 0 cannot be normalized")
    return h / h[2, 2]


@dataclass(frozen=True)
class TransformSpec:
    """Invertible geometric transform.

    ``rotation`` angles are in degrees (counter-clockwise on screen). Homographies act
    on centred coordinates scaled so the longer image side spans [-1, 1], which makes
    one spec applicable to an image and to its feature maps alike.
    """

    kind: str
    angle: float = 0.0
    matrix: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "homography":
            if self.matrix is None:
                raise ValueError("homography transform needs a matrix")
            h = _normalize(self.matrix)
            object.__setattr__(self, "matrix", tuple(map(tuple, h.tolist())))

    @property
    def exact(self) -> bool:
        return self.kind in EXACT_KINDS

    def inverse(self) -> "TransformSpec":
        if self.kind in _ROT_INVERSE:
            return TransformSpec(_ROT_INVERSE[self.kind])
        if self.kind == "rotation":
            return TransformSpec("rotation", angle=-self.angle)
        if self.kind == "homography":
            return TransformSpec("homography", matrix=tuple(map(tuple, np.linalg.inv(np.array(self.matrix)).tolist())))
        return self

    def homography(self) -> np.ndarray:
        """Matrix mapping input to output centred coordinates (non-exact kinds)."""
        if self.kind == "rotation":
            # y axis points down, so a visually counter-clockwise turn is a clockwise matrix
            a = math.radians(self.angle)
            c, s = math.cos(a), math.sin(a)
            return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        if self.kind == "homography":
            return np.array(self.matrix)
        raise ValueError(f"{self.kind} has no homography form")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "rotation":
            d["angle"] = self.angle
        if self.kind == "homography":
            d["matrix"] = [list(r) for r in self.matrix]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        m = d.get("matrix")
        return cls(d["kind"], float(d.get("angle", 0.0)), tuple(map(tuple, m)) if m is not None else None)


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Solve the 4-point DLT for ``H`` with ``H @ src_i ~ dst_i``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


@dataclass
class PoolConfig:
    kinds: list[str] = field(default_factory=lambda: list(ALL_KINDS[1:]))
    max_angle: float = 30.0
    homography_jitter: float = 0.05
    eval_seed: int = 0


def random_transform(kind: str, rng: np.random.Generator, cfg: PoolConfig) -> TransformSpec:
    if kind == "rotation":
        return TransformSpec("rotation", angle=float(rng.uniform(-cfg.max_angle, cfg.max_angle)))
    if kind == "homography":
        corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        # side length is 2 in centred units
        jitter = rng.uniform(-2 * cfg.homography_jitter, 2 * cfg.homography_jitter, size=corners.shape)
        return TransformSpec("homography", matrix=tuple(map(tuple, homography_from_corners(corners, corners + jitter).tolist())))
    return TransformSpec(kind)


def build_transform_pool(n_experts: int, rng: np.random.Generator, cfg: PoolConfig | None = None) -> list[TransformSpec]:
    """Identity first, then ``n_experts - 1`` transforms drawn from ``cfg.kinds``."""
    if n_experts < 1:
        raise ValueError("n_experts must be >= 1")
    cfg = cfg or PoolConfig()
    kinds = [k for k in cfg.kinds if k != "identity"]
    pool = [TransformSpec("identity")]
    for _ in range(n_experts - 1):
        pool.append(random_transform(kinds[int(rng.integers(len(kinds)))], rng, cfg))
    return pool


def eval_pool(n_experts: int, cfg: PoolConfig | None = None) -> list[TransformSpec]:
    """Frozen evaluation pool: identity plus exact transforms drawn with ``cfg.eval_seed``."""
    cfg = cfg or PoolConfig()
    exact = [k for k in cfg.kinds if k in EXACT_KINDS and k != "identity"] or list(EXACT_KINDS[1:])
    return build_transform_pool(n_experts, np.random.default_rng(cfg.eval_seed), PoolConfig(kinds=exact))


def _warp_grid(h: np.ndarray, height: int, width: int, dtype, device) -> torch.Tensor:
    s = max(height, width)
    xs = (torch.arange(width, dtype=torch.float64) + 0.5 - width / 2) / (s / 2)
    ys = (torch.arange(height, dtype=torch.float64) + 0.5 - height / 2) / (s / 2)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1)
    src = pts @ torch.from_numpy(np.linalg.inv(h)).T
    src = src[..., :2] / src[..., 2:]
    scale = torch.tensor([s / width, s / height], dtype=torch.float64)
    return (src * scale).to(dtype=dtype, device=device).unsqueeze(0)


def apply_transform(x: torch.Tensor, t: TransformSpec) -> torch.Tensor:
    """Warp the last two (spatial) axes of ``x``; bilinear with reflect padding for non-exact kinds."""
    k = t.kind
    if k == "identity":
        return x
    if k == "hflip":
        return x.flip(-1)
    if k == "vflip":
        return x.flip(-2)
    if k in ("rot90", "rot180", "rot270"):
        return torch.rot90(x, {"rot90": 1, "rot180": 2, "rot270": 3}[k], dims=(-2, -1))
    shape = x.shape
    H, W = shape[-2:]
    y = x.reshape(-1, 1, H, W) if x.dim() != 4 else x
    grid = _warp_grid(t.homography(), H, W, x.dtype, x.device).expand(y.shape[0], H, W, 2)
    out = F.grid_sample(y, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.reshape(shape[:-2] + out.shape[-2:])


def inverse_warp_features(f: torch.Tensor, t: TransformSpec) -> torch.Tensor:
    """Bring features extracted from ``apply_transform(image, t)`` back to the untransformed frame."""
    return apply_transform(f, t.inverse())


def soft_router_weights(alpha: torch.Tensor) -> torch.Tensor:
    """Softmax over router logits with max subtraction."""
    e = torch.exp(alpha - alpha.max())
    return e / e.sum()


class ExpertHead(nn.Module):
    """Residual two-conv head: ``f + conv1x1(relu(bn(conv3x3(f))))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def zero_residual(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.out(F.relu(self.norm(self.conv(f))))


class SoftRouter(nn.Module):
    def __init__(self, n_experts: int, fusion: str = "soft", top_k: int = 2):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion {fusion!r}; expected one of {FUSION_MODES}")
        self.fusion = fusion
        self.top_k = top_k
        self.alpha = nn.Parameter(torch.zeros(n_experts))

    def forward(self) -> torch.Tensor:
        n = self.alpha.numel()
        if self.fusion == "uniform":
            return torch.full_like(self.alpha, 1.0 / n)
        if self.fusion == "sparse" and self.top_k < n:
            # stable sort keeps the lowest index on ties
            keep = torch.sort(self.alpha.detach(), descending=True, stable=True).indices[: self.top_k]
            mask = torch.zeros(n, dtype=torch.bool, device=self.alpha.device)
            mask[keep] = True
            w = soft_router_weights(self.alpha.masked_fill(~mask, -math.inf))
            return torch.where(mask, w, torch.zeros_like(w))
        return soft_router_weights(self.alpha)


class MEFL(nn.Module):
    """Backbone features of several transformed copies, expert-refined, inverse-warped and fused."""

    def __init__(self, backbone: Backbone, n_experts: int = 4, fusion: str = "soft", use_experts: bool = True):
        super().__init__()
        if n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        self.backbone = backbone
        self.n_experts = n_experts
        c = backbone.cfg.decoder_channels
        self.experts = nn.ModuleList(ExpertHead(c) for _ in range(n_experts)) if use_experts else None
        self.router = SoftRouter(n_experts, fusion)

    def expert_features(self, image: torch.Tensor, pool: Sequence[TransformSpec]) -> list[torch.Tensor]:
        if len(pool) != self.n_experts:
            raise ValueError(f"pool has {len(pool)} transforms for {self.n_experts} experts")
        if image.dim() == 3:
            image = image.unsqueeze(1)
        warped = [apply_transform(image, t) for t in pool]
        b = image.shape[0]
        if all(w.shape == warped[0].shape for w in warped):
            feats = list(self.backbone(torch.cat(warped, dim=0)).split(b, dim=0))
        else:
            feats = [self.backbone(w) for w in warped]
        out = []
        for n, (f, t) in enumerate(zip(feats, pool)):
            if self.experts is not None:
                f = self.experts[n](f)
            out.append(inverse_warp_features(f, t))
        return out

    @staticmethod
    def fuse(features: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
        out = weights[0] * features[0]
        for i in range(1, len(features)):
            out = out + weights[i] * features[i]
        return out

    def forward(self, image: torch.Tensor, pool: Sequence[TransformSpec]) -> torch.Tensor:
        return self.fuse(self.expert_features(image, pool), self.router())


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.tiny)
    n_experts: int = 4
    fusion: str = "soft"
    use_mefl: bool = True
    pool: PoolConfig = field(default_factory=PoolConfig)

    @property
    def effective_experts(self) -> int:
        return self.n_experts if self.use_mefl else 1


class RegistrationMamba(nn.Module):
    """Optical (reference) and SAR (template) branches with modality-specific weights."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        n = cfg.effective_experts
        self.branches = nn.ModuleDict({
            m: MEFL(Backbone(cfg.backbone), n, cfg.fusion, use_experts=cfg.use_mefl) for m in MODALITIES
        })

    def backbones(self) -> dict[str, Backbone]:
        return {m: b.backbone for m, b in self.branches.items()}

    def train_pool(self, rng: np.random.Generator) -> list[TransformSpec]:
        if not self.cfg.use_mefl:
            return [TransformSpec("identity")]
        return build_transform_pool(self.cfg.n_experts, rng, self.cfg.pool)

    def eval_pool(self) -> list[TransformSpec]:
        if not self.cfg.use_mefl:
            return [TransformSpec("identity")]
        return eval_pool(self.cfg.n_experts, self.cfg.pool)

    def forward(self, reference: torch.Tensor, template: torch.Tensor, pool: Sequence[TransformSpec]):
        """Return ``(F_O, F_S)`` feature maps for the optical reference and SAR template."""
        return self.branches["optical"](reference, pool), self.branches["sar"](template, pool)
