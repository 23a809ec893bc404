"""Scale-triplet and count-ranking hinge losses and their combination.

Both losses reduce over the mini-batch with a plain sum by default
(``reduce="mean"`` is available).  At the hinge kink the subgradient is
taken as 0, i.e. the max is treated as inactive exactly at the boundary;
finite-difference checks must therefore stay away from the kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .embedder import CountScorer


@dataclass(frozen=True)
class LossConfig:
    m1: float = 1.0  # margin of the scale-triplet hinge
    m2: float = 1.0  # margin of the count-ranking hinge
    reduce: str = "sum"

    def __post_init__(self) -> None:
        if self.m1 < 0 or self.m2 < 0:
            raise ValueError("margins must be non-negative")
        if self.reduce not in ("sum", "mean"):
            raise ValueError(f"reduce must be 'sum' or 'mean', got {self.reduce!r}")


def _reduce(values: torch.Tensor, mode: str) -> torch.Tensor:
    return values.mean() if mode == "mean" else values.sum()


def _check_batch(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"embedding shapes differ: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2 or shape[0] < 1:
        raise ValueError(f"expected non-empty (batch, dim) embeddings, got shape {shape}")


def squared_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance along the last axis: sum_i (a_i - b_i)^2."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum(dim=-1)


def scale_triplet_loss(
    z_a: torch.Tensor, z_p: torch.Tensor, z_n: torch.Tensor, cfg: LossConfig | None = None
) -> torch.Tensor:
    """Hinge pulling same-scale embeddings together, rescaled ones apart:
    reduce_i max(0, d(z_a, z_p) - d(z_a, z_n) + m1)."""
    cfg = cfg or LossConfig()
    _check_batch(z_a, z_p, z_n)
    hinge = torch.clamp(squared_l2(z_a, z_p) - squared_l2(z_a, z_n) + cfg.m1, min=0.0)
    return _reduce(hinge, cfg.reduce)


def count_ranking_loss(
    z_p: torch.Tensor, z_n: torch.Tensor, scorer: CountScorer, cfg: LossConfig | None = None
) -> torch.Tensor:
    """Hinge forcing the positive's score above the negative's by m2:
    reduce_i max(0, f(z_n) - f(z_p) + m2)."""
    cfg = cfg or LossConfig()
    _check_batch(z_p, z_n)
    hinge = torch.clamp(scorer(z_n) - scorer(z_p) + cfg.m2, min=0.0)
    return _reduce(hinge, cfg.reduce)


def total_loss(l_st: torch.Tensor, l_cr: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the two proxy-task losses."""
    return l_st + l_cr
