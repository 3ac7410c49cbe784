"""Single-process training loop minimizing the combined matching objective."""
from __future__ import annotations

import logging
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..data import ImagePair, crop_template, iterate_batches
from ..matcher import similarity_map, total_loss
from ..mefl import RegistrationMamba
from .checkpoint import (Checkpoint, load_model_arrays, load_optimizer_arrays, model_arrays,
                         optimizer_arrays)
from .config import RunConfig
from .containers import save_array

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def build_model(cfg: RunConfig, seed: int | None = None) -> RegistrationMamba:
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return RegistrationMamba(cfg.model)


def make_optimizer(model: torch.nn.Module, cfg: RunConfig) -> torch.optim.AdamW:
    t = cfg.train
    return torch.optim.AdamW(model.parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay)


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)[:, None]).to(dtype)


def make_batch(pairs: Sequence[ImagePair], idx, rng: np.random.Generator, template_size: int):
    """Stack references and templates; pairs without ground truth get a random template crop."""
    refs, tpls, gts = [], [], []
    for i in idx:
        p = pairs[int(i)]
        if p.gt_offset is None:
            tpl, gt = crop_template(p.sar, template_size, rng)
        else:
            tpl, gt = p.sar, p.gt_offset
        refs.append(p.optical)
        tpls.append(tpl)
        gts.append(gt)
    return to_tensor(refs), to_tensor(tpls), gts


def model_from_checkpoint(ckpt: Checkpoint) -> RegistrationMamba:
    cfg = RunConfig.from_dict(ckpt.config)
    model = RegistrationMamba(cfg.model)
    load_model_arrays(model, ckpt.model_state)
    return model


def snapshot(cfg: RunConfig, model, opt, step: int, epoch: int, step_losses, epoch_losses) -> Checkpoint:
    arrays, groups = optimizer_arrays(opt)
    return Checkpoint(cfg.to_dict(), model_arrays(model), arrays, groups, step, epoch,
                      np.asarray(step_losses, dtype=np.float64), list(epoch_losses),
                      torch.get_rng_state().numpy().copy())


def train(cfg: RunConfig, pairs: Sequence[ImagePair], out_dir: str | Path | None = None,
          resume: Checkpoint | None = None, max_steps: int | None = None,
          on_step: Callable[[int, float], None] | None = None,
          eval_pairs: Sequence[ImagePair] | None = None) -> Checkpoint:
    """Train for ``cfg.train.epochs`` epochs (or until ``max_steps`` total steps) and return the final checkpoint.

    A checkpoint is written to ``out_dir`` at the end of each epoch. Batch order,
    template crops and the per-batch transformation pool are derived from
    ``(seed, epoch, batch index)``, so resuming from any step replays the same trajectory.
    With ``cfg.train.eval_every > 0`` and ``eval_pairs`` given, held-out CMR/L2 is logged
    every that many steps.
    """
    if not pairs:
        raise ValueError("training needs a non-empty dataset")
    t = cfg.train
    torch.set_num_threads(1)
    device = torch.device(t.device)
    model = build_model(cfg).to(device)
    opt = make_optimizer(model, cfg)
    step, step_losses, epoch_losses = 0, [], []
    if resume is not None:
        load_model_arrays(model, resume.model_state)
        if resume.optimizer_state:
            load_optimizer_arrays(opt, resume.optimizer_state, resume.optimizer_groups)
        torch.set_rng_state(torch.from_numpy(np.array(resume.rng_state)))
        step, step_losses, epoch_losses = resume.step, list(resume.step_losses), list(resume.epoch_losses)
    out_dir = Path(out_dir) if out_dir is not None else None
    template_size = cfg.data.synth.template_size
    steps_per_epoch = math.ceil(len(pairs) / t.batch_size)
    model.train()
    epoch = step // steps_per_epoch
    while epoch < t.epochs and (max_steps is None or step < max_steps):
        start = time.perf_counter()
        batches = list(iterate_batches(len(pairs), t.batch_size, t.seed, epoch))
        for b in range(step - epoch * steps_per_epoch, steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            rng = np.random.default_rng([t.seed, epoch, b])
            ref, tpl, gts = make_batch(pairs, batches[b], rng, template_size)
            ref, tpl = ref.to(device), tpl.to(device)
            pool = model.train_pool(rng)
            f_o, f_s = model(ref, tpl, pool)
            sim = similarity_map(f_s, f_o, method=t.similarity_method)
            loss = total_loss(sim, gts, t.loss)
            if not torch.isfinite(loss):
                _dump_batch(out_dir, step, ref, tpl, gts)
                raise TrainingDivergedError(f"non-finite loss at step {step} (pool {[p.kind for p in pool]})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step_losses.append(float(loss.detach()))
            step += 1
            if on_step is not None:
                on_step(step, step_losses[-1])
            if t.eval_every and eval_pairs and step % t.eval_every == 0:
                _log_eval(model, eval_pairs, step)
        if step == (epoch + 1) * steps_per_epoch:
            epoch_losses.append(float(np.mean(step_losses[epoch * steps_per_epoch: step])))
            log.info("epoch %d  mean loss %.4f  (%.1fs)", epoch, epoch_losses[-1], time.perf_counter() - start)
            epoch += 1
            if out_dir is not None:
                snapshot(cfg, model, opt, step, epoch, step_losses, epoch_losses).save(
                    out_dir / f"checkpoint_epoch{epoch:03d}.rmck")
    ckpt = snapshot(cfg, model, opt, step, epoch, step_losses, epoch_losses)
    if out_dir is not None:
        ckpt.save(out_dir / "checkpoint_last.rmck")
    return ckpt


def _log_eval(model: RegistrationMamba, pairs: Sequence[ImagePair], step: int) -> None:
    from .evaluate import ModelPredictor, evaluate

    rep = evaluate(pairs, ModelPredictor(model))
    model.train()
    log.info("step %d  held-out L2 %.3f  CMR(1) %.3f", step, rep.mean_l2, rep.cmr[1.0])


def _dump_batch(out_dir: Path | None, step: int, ref, tpl, gts) -> None:
    if out_dir is None:
        return
    d = out_dir / f"diverged_step{step}"
    d.mkdir(parents=True, exist_ok=True)
    save_array(d / "reference.rma", ref)
    save_array(d / "template.rma", tpl)
    save_array(d / "gt.rma", np.asarray(gts, dtype=np.int64))
    log.error("dumped offending batch to %s", d)
