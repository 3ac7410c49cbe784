"""Image pairs: manifest ingestion, template cropping, synthetic optical/SAR generation, noise corruption."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse, polygon

log = logging.getLogger(__name__)

# cycles of the non-monotone optical -> SAR intensity remap over [0, 1]; sets raw-NCC difficulty
REMAP_FREQ = 1.9


class ManifestError(ValueError):
    pass


class MalformedRecordError(ManifestError):
    pass


class DuplicatePairIdError(ManifestError):
    pass


class DanglingPathError(ManifestError):
    pass


@dataclass
class ImagePair:
    optical: np.ndarray
    sar: np.ndarray
    gt_offset: tuple[int, int] | None
    pair_id: str

    def __post_init__(self):
        if self.gt_offset is not None:
            r, c = self.gt_offset
            ho, wo = self.optical.shape
            hs, ws = self.sar.shape
            if not (0 <= r <= ho - hs and 0 <= c <= wo - ws):
                raise ValueError(f"pair {self.pair_id}: gt offset {self.gt_offset} outside the valid search range")


@dataclass
class ManifestRecord:
    optical_path: Path
    sar_path: Path
    pair_id: str
    gt_row: int | None = None
    gt_col: int | None = None

    @property
    def gt_offset(self):
        return None if self.gt_row is None else (self.gt_row, self.gt_col)

    def to_json(self, root: Path) -> dict:
        d = {"pair_id": self.pair_id,
             "optical_path": str(self.optical_path.relative_to(root)),
             "sar_path": str(self.sar_path.relative_to(root))}
        if self.gt_row is not None:
            d["gt_row"], d["gt_col"] = self.gt_row, self.gt_col
        return d


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path

    def __len__(self):
        return len(self.records)


@dataclass
class SynthConfig:
    image_size: int = 64
    template_size: int = 48
    n_shapes: int = 10
    speckle_looks: int = 4
    edge_gain: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.template_size < self.image_size:
            raise ValueError("template_size must be positive and smaller than image_size")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")


def load_image(path: str | Path) -> np.ndarray:
    """Grayscale 8/16-bit PNG or TIFF normalized to [0, 1] as float64."""
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        a = np.asarray(im)
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    if a.dtype.kind in "ui":
        return np.clip(a.astype(np.float64) / 65535.0, 0.0, 1.0)
    return np.clip(a.astype(np.float64), 0.0, 1.0)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 16-bit grayscale PNG."""
    a = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(a).save(path)


def load_manifest(path: str | Path) -> Manifest:
    """Parse a JSON-lines manifest; paths are resolved relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecordError(f"line {lineno}: invalid JSON ({e})") from None
        if not isinstance(obj, dict):
            raise MalformedRecordError(f"line {lineno}: record must be a JSON object")
        missing = [k for k in ("optical_path", "sar_path", "pair_id") if k not in obj]
        if missing:
            raise MalformedRecordError(f"line {lineno} ({obj.get('pair_id', '?')}): missing fields {missing}")
        pid = str(obj["pair_id"])
        if ("gt_row" in obj) != ("gt_col" in obj):
            raise MalformedRecordError(f"record {pid}: gt_row and gt_col must be given together")
        gt_row = gt_col = None
        if "gt_row" in obj:
            if not all(isinstance(obj[k], int) and obj[k] >= 0 for k in ("gt_row", "gt_col")):
                raise MalformedRecordError(f"record {pid}: gt_row/gt_col must be non-negative integers")
            gt_row, gt_col = obj["gt_row"], obj["gt_col"]
        if pid in seen:
            raise DuplicatePairIdError(f"duplicate pair_id {pid!r} at line {lineno}")
        seen.add(pid)
        opt, sar = root / obj["optical_path"], root / obj["sar_path"]
        for p in (opt, sar):
            if not p.is_file():
                raise DanglingPathError(f"record {pid}: file does not exist: {p}")
        records.append(ManifestRecord(opt, sar, pid, gt_row, gt_col))
    return Manifest(records, root)


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(path.parent), sort_keys=True) + "\n")


def load_pairs(manifest: Manifest) -> list[ImagePair]:
    return [ImagePair(load_image(r.optical_path), load_image(r.sar_path), r.gt_offset, r.pair_id)
            for r in manifest.records]


def crop_template(sar_full: np.ndarray, template_size: int, rng: np.random.Generator):
    """Uniform random ``template_size`` square crop; the top-left offset is the ground truth."""
    H, W = sar_full.shape
    if template_size > H or template_size > W:
        raise ValueError(f"template size {template_size} exceeds source {sar_full.shape}")
    r = int(rng.integers(0, H - template_size + 1))
    c = int(rng.integers(0, W - template_size + 1))
    return sar_full[r:r + template_size, c:c + template_size].copy(), (r, c)


def render_optical(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smoothly shaded random polygons and ellipses over a low-frequency background."""
    S = cfg.image_size
    bg = ndimage.gaussian_filter(rng.standard_normal((S, S)), S / 6, mode="reflect")
    img = 0.35 + 0.15 * bg / (np.abs(bg).max() + 1e-12)
    yy, xx = np.mgrid[0:S, 0:S] / S
    for _ in range(cfg.n_shapes):
        size = rng.uniform(0.08, 0.3) * S
        cy, cx = rng.uniform(0, S, size=2)
        if rng.random() < 0.5:
            rr, cc = ellipse(cy, cx, size / 2, rng.uniform(0.4, 1.0) * size / 2, shape=(S, S),
                             rotation=rng.uniform(0, np.pi))
        else:
            k = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
            rad = size / 2 * rng.uniform(0.6, 1.0, size=k)
            rr, cc = polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(S, S))
        base = rng.uniform(0.0, 1.0)
        gy, gx = rng.uniform(-0.4, 0.4, size=2)
        img[rr, cc] = base + gy * (yy[rr, cc] - cy / S) + gx * (xx[rr, cc] - cx / S)
    return np.clip(ndimage.gaussian_filter(img, 0.7, mode="reflect"), 0.0, 1.0)


def pseudo_sar(optical: np.ndarray, edge_gain: float) -> np.ndarray:
    """Noiseless pseudo-SAR: a non-monotone intensity remap mixed with gradient magnitude."""
    remap = 0.5 - 0.5 * np.cos(REMAP_FREQ * np.pi * optical)
    gm = ndimage.gaussian_gradient_magnitude(optical, 1.0, mode="reflect")
    out = (remap + edge_gain * 6.0 * gm) / (1.0 + edge_gain)
    return np.clip(out, 0.0, 1.0)


def speckle(image: np.ndarray, looks: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative L-look intensity speckle ``Gamma(looks, 1/looks)``, clipped to [0, 1]."""
    return np.clip(image * rng.gamma(looks, 1.0 / looks, size=image.shape), 0.0, 1.0)


def synth_pair(cfg: SynthConfig, rng: np.random.Generator, pair_id: str = "synth") -> ImagePair:
    optical = render_optical(cfg, rng)
    sar_full = speckle(pseudo_sar(optical, cfg.edge_gain), cfg.speckle_looks, rng)
    template, gt = crop_template(sar_full, cfg.template_size, rng)
    return ImagePair(optical, template, gt, pair_id)


def synth_dataset(cfg: SynthConfig, n: int, offset: int = 0) -> list[ImagePair]:
    """``n`` pairs; pair ``i`` draws from its own generator seeded by ``(cfg.seed, i)``."""
    out = []
    for i in range(offset, offset + n):
        rng = np.random.default_rng([cfg.seed, i])
        out.append(synth_pair(cfg, rng, pair_id=f"synth-{i:06d}"))
    return out


def write_synth(out_dir: str | Path, pairs: list[ImagePair]) -> Path:
    """Write pairs as PNGs under ``out_dir/images`` plus ``out_dir/manifest.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in pairs:
        opt = out_dir / "images" / f"{p.pair_id}_optical.png"
        sar = out_dir / "images" / f"{p.pair_id}_sar.png"
        save_image(opt, p.optical)
        save_image(sar, p.sar)
        gt = p.gt_offset or (None, None)
        records.append(ManifestRecord(opt, sar, p.pair_id, gt[0], gt[1]))
    path = out_dir / "manifest.jsonl"
    write_manifest(path, records)
    log.info("wrote %d pairs to %s", len(pairs), path)
    return path


def add_gaussian_noise(image: np.ndarray, variance_pct: float, rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean Gaussian noise with variance ``variance_pct / 100`` of the unit range, clipped."""
    if variance_pct < 0:
        raise ValueError("noise variance must be non-negative")
    if variance_pct == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, np.sqrt(variance_pct / 100.0), size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled index batches; order is a pure function of ``(n, seed, epoch)``."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
