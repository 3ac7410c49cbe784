"""Matching metrics, the raw-intensity NCC baseline, robustness sweeps and ablation grids."""
from __future__ import annotations

import copy
import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..data import ImagePair, add_gaussian_noise
from ..matcher import MatchResult, l2_error, locate_peak, similarity_map, zncc_map
from ..mefl import FUSION_MODES, RegistrationMamba
from .config import RunConfig
from .training import model_from_checkpoint, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (1, 2, 3, 5)

# a predictor sees only the two images; ground truth never reaches it
Predictor = Callable[[np.ndarray, np.ndarray], MatchResult]


@dataclass
class EvalReport:
    mean_l2: float
    cmr: dict[float, float]
    per_pair: list[MatchResult]
    pair_ids: list[str]
    gt: list[tuple[int, int]]
    wall_time_ms: float

    def __post_init__(self):
        ts = sorted(self.cmr)
        for a, b in zip(ts, ts[1:]):
            if self.cmr[a] > self.cmr[b]:
                raise AssertionError("CMR must be non-decreasing in the threshold")


def compute_cmr(errors: Sequence[float], thresholds: Sequence[float]) -> dict[float, float]:
    e = np.asarray(errors, dtype=np.float64)
    return {float(t): float(np.mean(e <= t)) if e.size else 0.0 for t in sorted(thresholds)}


def evaluate(pairs: Sequence[ImagePair], predictor: Predictor,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    if not pairs:
        raise ValueError("evaluation needs at least one pair")
    results, times = [], []
    for p in pairs:
        if p.gt_offset is None:
            raise ValueError(f"pair {p.pair_id} has no ground truth")
        start = time.perf_counter()
        res = predictor(p.optical, p.sar)
        times.append(time.perf_counter() - start)
        results.append(dataclasses.replace(res, l2_error=l2_error(res.predicted, p.gt_offset)))
    errors = [r.l2_error for r in results]
    return EvalReport(float(np.mean(errors)), compute_cmr(errors, thresholds), results,
                      [p.pair_id for p in pairs], [tuple(p.gt_offset) for p in pairs],
                      1000.0 * float(np.mean(times)))


class ModelPredictor:
    """Eval-mode forward over the frozen pool, global-norm similarity, argmax."""

    def __init__(self, model: RegistrationMamba, method: str = "direct"):
        self.model = model.eval()
        self.pool = model.eval_pool()
        self.method = method

    @torch.no_grad()
    def __call__(self, reference: np.ndarray, template: np.ndarray) -> MatchResult:
        device = next(self.model.parameters()).device
        ref = torch.from_numpy(np.asarray(reference, dtype=np.float32))[None, None].to(device)
        tpl = torch.from_numpy(np.asarray(template, dtype=np.float32))[None, None].to(device)
        f_o, f_s = self.model(ref, tpl, self.pool)
        return locate_peak(similarity_map(f_s, f_o, method=self.method)[0])


def ncc_baseline(pair: ImagePair) -> MatchResult:
    scores = zncc_map(torch.from_numpy(pair.sar), torch.from_numpy(pair.optical))
    res = locate_peak(scores)
    if pair.gt_offset is not None:
        res = dataclasses.replace(res, l2_error=l2_error(res.predicted, pair.gt_offset))
    return res


def ncc_predictor(reference: np.ndarray, template: np.ndarray) -> MatchResult:
    return locate_peak(zncc_map(torch.from_numpy(template), torch.from_numpy(reference)))


def noisy_pairs(pairs: Sequence[ImagePair], variance_pct: float, seed: int) -> list[ImagePair]:
    """Copies with Gaussian noise added to the optical image; noise for pair ``i`` is seeded by ``(seed, i)``."""
    out = []
    for i, p in enumerate(pairs):
        rng = np.random.default_rng([seed, i])
        out.append(dataclasses.replace(p, optical=add_gaussian_noise(p.optical, variance_pct, rng)))
    return out


@dataclass
class RobustnessRow:
    variance: float
    cmr1: float
    cmr3: float
    mean_l2: float


def robustness_sweep(pairs: Sequence[ImagePair], predictor: Predictor, variances: Sequence[float],
                     seed: int = 1234) -> list[RobustnessRow]:
    rows = []
    for v in variances:
        rep = evaluate(noisy_pairs(pairs, v, seed), predictor, (1, 3))
        rows.append(RobustnessRow(float(v), rep.cmr[1.0], rep.cmr[3.0], rep.mean_l2))
        log.info("variance %g%%: CMR(1)=%.3f CMR(3)=%.3f L2=%.3f", v, rows[-1].cmr1, rows[-1].cmr3, rep.mean_l2)
    return rows


@dataclass
class AblationCell:
    name: str
    use_mefl: bool
    use_mfa: bool
    n_experts: int
    fusion: str


@dataclass
class AblationResult:
    cell: AblationCell
    report: EvalReport
    final_loss: float
    train_seconds: float


def ablation_grid(use_mefl=(True, False), use_mfa=(True, False), n_experts=(1, 2, 3, 4),
                  fusion=FUSION_MODES) -> list[AblationCell]:
    """Cartesian grid with redundant cells removed: fusion is irrelevant for a single expert
    and both expert count and fusion are irrelevant without MEFL."""
    cells, seen = [], set()
    for mefl, mfa, n, fu in itertools.product(use_mefl, use_mfa, n_experts, fusion):
        if not mefl:
            n, fu = 1, "soft"
        elif n == 1:
            fu = "soft"
        key = (mefl, mfa, n, fu)
        if key in seen:
            continue
        seen.add(key)
        name = (f"MEFL-{n}-{fu}" if mefl else "noMEFL") + ("" if mfa else "-noMFA")
        cells.append(AblationCell(name, mefl, mfa, n, fu))
    return cells


def cell_config(base: RunConfig, cell: AblationCell) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.model.use_mefl = cell.use_mefl
    cfg.model.n_experts = cell.n_experts
    cfg.model.fusion = cell.fusion
    cfg.model.backbone.use_mfa = cell.use_mfa
    return cfg


def ablation_suite(base: RunConfig, train_pairs: Sequence[ImagePair], test_pairs: Sequence[ImagePair],
                   cells: Sequence[AblationCell] | None = None,
                   thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[AblationResult]:
    out = []
    for cell in cells if cells is not None else ablation_grid():
        start = time.perf_counter()
        ckpt = train(cell_config(base, cell), train_pairs)
        secs = time.perf_counter() - start
        rep = evaluate(test_pairs, ModelPredictor(model_from_checkpoint(ckpt)), thresholds)
        final = float(ckpt.epoch_losses[-1]) if ckpt.epoch_losses else float(np.mean(ckpt.step_losses))
        log.info("%s: L2=%.3f CMR(1)=%.3f (%.0fs)", cell.name, rep.mean_l2, rep.cmr.get(1.0, float("nan")), secs)
        out.append(AblationResult(cell, rep, final, secs))
    return out
