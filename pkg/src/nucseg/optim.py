"""Minimal first-order optimizers with fully serializable state.

Implemented in-tree (rather than wrapping torch.optim) so optimizer state
maps one-to-one onto named checkpoint arrays and training resumes
bit-exactly.  Update rules follow the standard formulations and are tested
against the torch.optim reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PRESETS = ("rmsprop", "adam", "sgd")


@dataclass(frozen=True)
class OptimizerConfig:
    preset: str = "rmsprop"
    learning_rate: float = 1e-3

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown optimizer preset {self.preset!r}; choose from {PRESETS}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


class Optimizer:
    """Updates a fixed set of named parameters in place.

    rmsprop: v <- 0.99 v + 0.01 g^2;        p <- p - lr * g / (sqrt(v) + 1e-8)
    adam:    standard bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)
    sgd:     p <- p - lr * g
    """

    def __init__(self, named_params: dict[str, torch.nn.Parameter], cfg: OptimizerConfig) -> None:
        self.cfg = cfg
        self.params = dict(named_params)
        self.step_count = 0
        self.state: dict[str, dict[str, torch.Tensor]] = {}
        for name, p in self.params.items():
            slots = {}
            if cfg.preset == "rmsprop":
                slots["square_avg"] = torch.zeros_like(p)
            elif cfg.preset == "adam":
                slots["exp_avg"] = torch.zeros_like(p)
                slots["exp_avg_sq"] = torch.zeros_like(p)
            self.state[name] = slots

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        lr = self.cfg.learning_rate
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.cfg.preset == "sgd":
                p.add_(g, alpha=-lr)
            elif self.cfg.preset == "rmsprop":
                v = self.state[name]["square_avg"]
                v.mul_(0.99).addcmul_(g, g, value=0.01)
                p.addcdiv_(g, v.sqrt().add_(1e-8), value=-lr)
            else:  # adam
                m = self.state[name]["exp_avg"]
                v = self.state[name]["exp_avg_sq"]
                m.mul_(0.9).add_(g, alpha=0.1)
                v.mul_(0.999).addcmul_(g, g, value=0.001)
                bias1 = 1.0 - 0.9**self.step_count
                bias2 = 1.0 - 0.999**self.step_count
                step_size = lr / bias1
                denom = (v.sqrt() / np.sqrt(bias2)).add_(1e-8)
                p.addcdiv_(m, denom, value=-step_size)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten slot tensors to checkpoint arrays keyed '<param>/<slot>'."""
        arrays = {}
        for name, slots in self.state.items():
            for slot, tensor in slots.items():
                arrays[f"{name}/{slot}"] = tensor.detach().cpu().numpy().copy()
        return arrays

    def meta(self) -> dict:
        return {"preset": self.cfg.preset, "learning_rate": self.cfg.learning_rate, "step_count": self.step_count}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        if meta.get("preset") != self.cfg.preset:
            raise ValueError(
                f"optimizer preset mismatch: checkpoint {meta.get('preset')!r} vs config {self.cfg.preset!r}"
            )
        self.step_count = int(meta.get("step_count", 0))
        for name, slots in self.state.items():
            for slot, tensor in slots.items():
                key = f"{name}/{slot}"
                if key not in arrays:
                    raise ValueError(f"optimizer state missing entry {key!r}")
                tensor.copy_(torch.from_numpy(np.asarray(arrays[key]).copy()))
