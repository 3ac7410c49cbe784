"""Versioned single-file checkpoints holding weights, optimizer state, counters and RNG state."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .containers import FORMAT_VERSION, decode_checkpoint, encode_checkpoint


@dataclass
class Checkpoint:
    config: dict
    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_groups: list[dict] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    step_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epoch_losses: list[float] = field(default_factory=list)
    rng_state: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def to_bytes(self) -> bytes:
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "step": self.step,
            "epoch": self.epoch,
            "epoch_losses": self.epoch_losses,
            "optimizer_groups": self.optimizer_groups,
        }
        arrays = {f"model/{k}": v for k, v in self.model_state.items()}
        arrays.update({f"optim/{k}": v for k, v in self.optimizer_state.items()})
        arrays["history/step_loss"] = np.asarray(self.step_losses, dtype=np.float64)
        arrays["rng/torch"] = np.asarray(self.rng_state, dtype=np.uint8)
        return encode_checkpoint(meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        meta, arrays = decode_checkpoint(data)
        model = {k[6:]: v for k, v in arrays.items() if k.startswith("model/")}
        optim = {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}
        return cls(meta["config"], model, optim, meta["optimizer_groups"], meta["step"], meta["epoch"],
                   arrays["history/step_loss"], meta["epoch_losses"], arrays["rng/torch"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_model_arrays(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list[dict]]:
    sd = opt.state_dict()
    arrays = {}
    for idx in sorted(sd["state"]):
        for name, value in sorted(sd["state"][idx].items()):
            arrays[f"{idx}/{name}"] = value.detach().cpu().numpy().copy() if isinstance(value, torch.Tensor) \
                else np.asarray(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, groups


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], groups: list[dict]) -> None:
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        idx, name = key.split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    fixed = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in groups]
    opt.load_state_dict({"state": state, "param_groups": fixed})


def parameter_digest(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
