"""Shared-weight patch encoder and the scalar count scorer.

One encoder object embeds all three triplet patches, so weight sharing is
guaranteed by construction.  Two architecture presets exist:

* ``toy-cnn`` -- a stem plus four stride-2 conv stages (~0.3M parameters),
  sized for the synthetic desk-scale data.
* ``resunet101-encoder`` -- a bottleneck residual encoder with stage depths
  (3, 4, 23, 3) for full-scale runs.

Exact layer tables live in docs/architectures.md.  All normalization is
GroupNorm, so parameters are the complete model state (no running
statistics) and checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

TOY_CNN = "toy-cnn"
RESUNET101 = "resunet101-encoder"

_GN_GROUPS = {TOY_CNN: 4, RESUNET101: 32}


@dataclass(frozen=True)
class EncoderConfig:
    architecture_id: str = TOY_CNN
    input_size: int = 768
    embedding_dim: int = 128
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.architecture_id not in (TOY_CNN, RESUNET101):
            raise ValueError(f"unknown architecture preset {self.architecture_id!r}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        stride = encoder_stride(self.architecture_id)
        if self.input_size < stride or self.input_size % stride:
            raise ValueError(
                f"input_size {self.input_size} must be a positive multiple of the "
                f"encoder stride {stride}"
            )

    def arch_descriptor(self) -> dict:
        return {
            "architecture_id": self.architecture_id,
            "input_size": self.input_size,
            "embedding_dim": self.embedding_dim,
        }


def encoder_stride(architecture_id: str) -> int:
    return {TOY_CNN: 16, RESUNET101: 32}[architecture_id]


def feature_channels(architecture_id: str) -> tuple[int, ...]:
    """Channel counts of the multi-scale feature maps, shallow to deep."""
    return {TOY_CNN: (8, 16, 32, 64, 128), RESUNET101: (64, 256, 512, 1024, 2048)}[architecture_id]


def feature_strides(architecture_id: str) -> tuple[int, ...]:
    """Downsampling factor of each feature map relative to the input."""
    return {TOY_CNN: (1, 2, 4, 8, 16), RESUNET101: (2, 4, 8, 16, 32)}[architecture_id]


def _conv_stage(c_in: int, c_out: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, stride=1, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


class _Bottleneck(nn.Module):
    def __init__(self, c_in: int, c_mid: int, c_out: int, stride: int, groups: int) -> None:
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(c_in, c_mid, 1, bias=False),
            nn.GroupNorm(groups, c_mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_mid, c_mid, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(groups, c_mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_mid, c_out, 1, bias=False),
            nn.GroupNorm(groups, c_out),
        )
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.GroupNorm(groups, c_out),
            )
        else:
            self.shortcut = None
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        skip = self.shortcut(x) if self.shortcut is not None else x
        return self.relu(self.main(x) + skip)


def _residual_stage(c_in: int, c_mid: int, c_out: int, stride: int, depth: int, groups: int) -> nn.Sequential:
    blocks = [_Bottleneck(c_in, c_mid, c_out, stride, groups)]
    for _ in range(depth - 1):
        blocks.append(_Bottleneck(c_out, c_mid, c_out, 1, groups))
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    """Maps patches to embedding vectors; exposes per-stage feature maps so
    a segmentation decoder can attach skip connections."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        groups = _GN_GROUPS[cfg.architecture_id]
        if cfg.architecture_id == TOY_CNN:
            self.stem = nn.Sequential(
                nn.Conv2d(3, 8, 3, stride=1, padding=1),
                nn.GroupNorm(groups, 8),
                nn.ReLU(inplace=True),
            )
            self.stages = nn.ModuleList(
                [
                    _conv_stage(8, 16, groups),
                    _conv_stage(16, 32, groups),
                    _conv_stage(32, 64, groups),
                    _conv_stage(64, 128, groups),
                ]
            )
            self.pool = None
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
                nn.GroupNorm(groups, 64),
                nn.ReLU(inplace=True),
            )
            self.pool = nn.MaxPool2d(3, stride=2, padding=1)
            self.stages = nn.ModuleList(
                [
                    _residual_stage(64, 64, 256, 1, 3, groups),
                    _residual_stage(256, 128, 512, 2, 4, groups),
                    _residual_stage(512, 256, 1024, 2, 23, groups),
                    _residual_stage(1024, 512, 2048, 2, 3, groups),
                ]
            )
        self.feature_channels = feature_channels(cfg.architecture_id)
        self.feature_strides = feature_strides(cfg.architecture_id)
        self.head = nn.Linear(self.feature_channels[-1], cfg.embedding_dim)
        init_parameters(self, cfg.init_seed)

    @property
    def stride(self) -> int:
        return encoder_stride(self.cfg.architecture_id)

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} is not a multiple of the encoder stride {self.stride}"
            )
        feats = [self.stem(x)]
        out = feats[0]
        if self.pool is not None:
            out = self.pool(out)
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Batched embedding: (B, 3, H, W) float input -> (B, embedding_dim)."""
        feats = self.forward_features(x)
        pooled = feats[-1].mean(dim=(2, 3))
        return self.head(pooled)

    def embed(self, patch: np.ndarray) -> np.ndarray:
        """Embed a single uint8 H x W x 3 patch of exactly ``input_size``."""
        x = patch_to_tensor(patch, self.cfg.input_size)
        with torch.no_grad():
            z = self.forward(x.unsqueeze(0))
        return z.squeeze(0).numpy()

    def last_feature_map(self, patch: np.ndarray) -> np.ndarray:
        """Activation dump of the deepest feature map, for inspection only."""
        x = patch_to_tensor(patch, self.cfg.input_size)
        with torch.no_grad():
            feats = self.forward_features(x.unsqueeze(0))
        return feats[-1].squeeze(0).numpy()


class CountScorer(nn.Module):
    """Affine map from embeddings to a scalar whose order ranks nucleus
    counts: score = weight . z + bias."""

    def __init__(self, embedding_dim: int = 128, init_seed: int = 0) -> None:
        super().__init__()
        self.linear = nn.Linear(embedding_dim, 1)
        init_parameters(self, init_seed)

    @property
    def embedding_dim(self) -> int:
        return self.linear.in_features

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z).squeeze(-1)


def count_score(scorer: CountScorer, z: np.ndarray | torch.Tensor) -> float | torch.Tensor:
    """Score an embedding (or a batch); numpy input returns a plain float."""
    if isinstance(z, np.ndarray):
        if z.ndim != 1 or z.shape[0] != scorer.embedding_dim:
            raise ValueError(f"expected a {scorer.embedding_dim}-d embedding, got shape {z.shape}")
        with torch.no_grad():
            out = scorer(torch.from_numpy(z.astype(np.float32)).unsqueeze(0))
        return float(out.squeeze(0))
    if z.shape[-1] != scorer.embedding_dim:
        raise ValueError(f"expected embedding dim {scorer.embedding_dim}, got shape {tuple(z.shape)}")
    return scorer(z)


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)


def patch_to_tensor(patch: np.ndarray, expected_size: int | None = None) -> torch.Tensor:
    """uint8 H x W x 3 -> float32 (3, H, W) scaled to [0, 1]."""
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 patch, got shape {patch.shape}")
    if expected_size is not None and patch.shape[:2] != (expected_size, expected_size):
        raise ValueError(f"expected {expected_size}x{expected_size} patch, got {patch.shape[:2]}")
    return torch.from_numpy(patch.astype(np.float32) / 255.0).permute(2, 0, 1)


def init_parameters(module: nn.Module, seed) -> None:
    """Seeded fan-in-scaled uniform initialization.

    Parameters are visited in registration order; weights with >= 2 dims
    draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in)), normalization weights
    reset to 1 and biases to 0.  Driven by a numpy PCG64 stream so the
    same seed reproduces the same parameters on any platform.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.ndim >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


def params_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot module parameters as named numpy arrays (checkpoint blob)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_params_from_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Load a checkpoint blob; key or shape mismatches raise."""
    state = module.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise ValueError(f"parameter blob mismatch: missing={missing[:3]} extra={extra[:3]}")
    tensors = {}
    for key, value in arrays.items():
        value = np.asarray(value)
        if tuple(state[key].shape) != value.shape:
            raise ValueError(
                f"shape mismatch for {key}: checkpoint {value.shape} vs model {tuple(state[key].shape)}"
            )
        tensors[key] = torch.from_numpy(value.copy()).to(state[key].dtype)
    module.load_state_dict(tensors)
