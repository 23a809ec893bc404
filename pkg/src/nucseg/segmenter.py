"""Target-task pipeline: ternary ground-truth construction, the U-shaped
three-class segmentation model, encoder-weight transfer, fine-tuning, and
per-pixel prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import (
    Checkpoint,
    DatasetIndex,
    read_image,
    read_label_map,
    save_checkpoint,
    validate_label_map,
)
from .embedder import (
    Encoder,
    EncoderConfig,
    feature_channels,
    feature_strides,
    init_parameters,
    load_params_from_arrays,
    params_to_arrays,
    patch_to_tensor,
)
from .metrics import aji
from .optim import Optimizer, OptimizerConfig
from .postprocess import PostprocessConfig, ternary_to_instances
from .pretrain import TrainingDiverged

DECODER_UNET = "unet-skip"

BACKGROUND, BODY, BOUNDARY = 0, 1, 2


@dataclass(frozen=True)
class SegModelConfig:
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_id: str = DECODER_UNET
    class_count: int = 3
    init_seed: int = 0
    boundary_width: int = 2

    def __post_init__(self) -> None:
        if self.decoder_id != DECODER_UNET:
            raise ValueError(f"unknown decoder preset {self.decoder_id!r}")
        if self.class_count != 3:
            raise ValueError("class_count is fixed at 3 (background, body, boundary)")
        if self.boundary_width < 1:
            raise ValueError("boundary_width must be >= 1")


def instance_to_ternary(labels: np.ndarray, boundary_width: int = 2) -> np.ndarray:
    """Per-pixel classes: 0 background, 1 nucleus body, 2 nucleus boundary.

    A labeled pixel is boundary when any pixel with a different label (other
    instance or background) lies within Chebyshev distance boundary_width,
    so touching instances get boundary pixels on both sides. Pixels beyond
    the image edge never count as different.
    """
    validate_label_map(labels)
    if boundary_width < 1:
        raise ValueError("boundary_width must be >= 1")
    size = 2 * boundary_width + 1
    lo = ndi.minimum_filter(labels, size=size, mode="nearest")
    hi = ndi.maximum_filter(labels, size=size, mode="nearest")
    ternary = np.zeros(labels.shape, dtype=np.uint8)
    foreground = labels > 0
    ternary[foreground] = BODY
    ternary[foreground & ((lo != labels) | (hi != labels))] = BOUNDARY
    return ternary


def validate_ternary(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"ternary mask must be 2-D, got shape {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 2:
        raise ValueError("ternary mask values must lie in {0, 1, 2}")


class _DecoderBlock(nn.Module):
    """Upsample x2, concatenate the skip feature (if any), refine with two
    3x3 convolutions."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, groups: int) -> None:
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.refine = nn.Sequential(
            nn.Conv2d(c_in + c_skip, c_out, 3, padding=1),
            nn.GroupNorm(min(groups, c_out), c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.GroupNorm(min(groups, c_out), c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None) -> torch.Tensor:
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.refine(x)


class Decoder(nn.Module):
    """Merges encoder features deep-to-shallow back to full resolution and
    classifies every pixel."""

    def __init__(self, architecture_id: str, class_count: int, groups: int) -> None:
        super().__init__()
        channels = feature_channels(architecture_id)
        strides = feature_strides(architecture_id)
        blocks = []
        c_prev = channels[-1]
        for c_skip in reversed(channels[:-1]):
            blocks.append(_DecoderBlock(c_prev, c_skip, c_skip, groups))
            c_prev = c_skip
        stride = strides[0]
        while stride > 1:
            blocks.append(_DecoderBlock(c_prev, 0, c_prev, groups))
            stride //= 2
        self.blocks = nn.ModuleList(blocks)
        self.n_skip = len(channels) - 1
        self.classifier = nn.Conv2d(c_prev, class_count, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        skips = feats[:-1][::-1]
        for i, block in enumerate(self.blocks):
            x = block(x, skips[i] if i < self.n_skip else None)
        return self.classifier(x)


class Segmenter(nn.Module):
    """U-shaped model: shared-architecture encoder plus skip-connected
    decoder emitting 3-class logits at input resolution."""

    def __init__(self, cfg: SegModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_cfg)
        groups = 4 if cfg.encoder_cfg.architecture_id == "toy-cnn" else 32
        self.decoder = Decoder(cfg.encoder_cfg.architecture_id, cfg.class_count, groups)
        # the encoder seeded itself from encoder_cfg.init_seed; only the
        # decoder draws from the segmentation init_seed
        init_parameters(self.decoder, cfg.init_seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder.forward_features(x))


def transfer_encoder(
    encoder_params: dict[str, np.ndarray], arch: dict, model_cfg: SegModelConfig
) -> Segmenter:
    """Build a segmentation model whose encoder weights are exactly the
    pretrained ones; the decoder is freshly seeded from model_cfg.init_seed."""
    want = model_cfg.encoder_cfg
    if arch.get("architecture_id") != want.architecture_id:
        raise ValueError(
            f"pretrained encoder architecture {arch.get('architecture_id')!r} does not "
            f"match segmentation model {want.architecture_id!r}"
        )
    if arch.get("embedding_dim") != want.embedding_dim:
        raise ValueError(
            f"pretrained embedding_dim {arch.get('embedding_dim')} does not match "
            f"config {want.embedding_dim}"
        )
    model = Segmenter(model_cfg)
    load_params_from_arrays(model.encoder, encoder_params)
    return model


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    crop_size: int = 256
    crops_per_image: int = 1
    label_fraction: float = 1.0
    seed: int = 0
    freeze_encoder: bool = False
    class_weights: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.crops_per_image < 1:
            raise ValueError("crops_per_image must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")


@dataclass
class FinetuneRecord:
    epoch: int
    loss: float
    val_aji: float | None = None


@dataclass
class FinetuneReport:
    records: list[FinetuneRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "loss", "val_aji"])
            for r in self.records:
                val = "" if r.val_aji is None else f"{r.val_aji:.6f}"
                writer.writerow([r.epoch, f"{r.loss:.8g}", val])


def select_labeled_subset(entries, label_fraction: float, seed) -> list:
    """Whole-image subset of the labeled entries, seeded and stable: round
    to the nearest image count, keep original order."""
    labeled = [e for e in entries if e.label_path is not None]
    if not labeled:
        raise ValueError("no labeled entries in the split")
    n_keep = int(round(label_fraction * len(labeled)))
    if n_keep == 0:
        raise ValueError(
            f"label_fraction {label_fraction} leaves no training images out of {len(labeled)}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    picked = sorted(rng.permutation(len(labeled))[:n_keep].tolist())
    return [labeled[i] for i in picked]


def _crop_pair(
    image: np.ndarray, ternary: np.ndarray, crop: int, seed_key
) -> tuple[np.ndarray, np.ndarray]:
    h, w = ternary.shape
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_key)))
    x = int(rng.integers(0, w - crop + 1))
    y = int(rng.integers(0, h - crop + 1))
    return image[y : y + crop, x : x + crop], ternary[y : y + crop, x : x + crop]


def predict(model: Segmenter, image: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, shape H x W x 3, rows summing to 1.

    Inputs whose sides are not multiples of the encoder stride are
    edge-padded for the forward pass and the logits cropped back.
    """
    h, w = image.shape[:2]
    stride = model.encoder.stride
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    x = patch_to_tensor(image).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        logits = model(x)
        probs = F.softmax(logits, dim=1)
    out = probs.squeeze(0).permute(1, 2, 0).numpy()
    return np.ascontiguousarray(out[:h, :w])


def predict_ternary(model: Segmenter, image: np.ndarray) -> np.ndarray:
    """Argmax class map over predict probabilities."""
    return predict(model, image).argmax(axis=2).astype(np.uint8)


def predict_instances(
    model: Segmenter, image: np.ndarray, post_cfg: PostprocessConfig
) -> np.ndarray:
    return ternary_to_instances(predict_ternary(model, image), post_cfg)


def _mean_val_aji(model: Segmenter, val_data: list, post_cfg: PostprocessConfig) -> float | None:
    if not val_data:
        return None
    scores = [aji(labels, predict_instances(model, image, post_cfg)) for image, labels in val_data]
    return float(np.mean(scores))


def finetune(
    model: Segmenter,
    dataset: DatasetIndex,
    ft_cfg: FinetuneConfig,
    post_cfg: PostprocessConfig | None = None,
    out_dir: str | Path | None = None,
    config_snapshot: str = "",
) -> tuple[Segmenter, FinetuneReport]:
    """Minimize per-pixel 3-class cross-entropy on random crops.

    Each epoch visits the selected labeled images in a seeded shuffled
    order, drawing crops_per_image crops from each; validation AJI is
    computed per epoch when the val split has labels.
    """
    post_cfg = post_cfg or PostprocessConfig()
    entries = select_labeled_subset(dataset.split_entries("train"), ft_cfg.label_fraction, ft_cfg.seed)
    images = [read_image(e.image_path) for e in entries]
    ternaries = [
        instance_to_ternary(read_label_map(e.label_path), model.cfg.boundary_width)
        for e in entries
    ]
    crop = ft_cfg.crop_size
    if crop % model.encoder.stride:
        raise ValueError(f"crop_size {crop} must be a multiple of the encoder stride")
    for img in images:
        if img.shape[0] < crop or img.shape[1] < crop:
            raise ValueError(f"training image {img.shape[:2]} smaller than crop_size {crop}")

    val_data = []
    for e in dataset.split_entries("val"):
        if e.label_path is not None:
            val_data.append((read_image(e.image_path), read_label_map(e.label_path)))

    if ft_cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    trainable = {
        name: p for name, p in model.named_parameters() if p.requires_grad
    }
    opt = Optimizer(trainable, ft_cfg.optimizer)
    weights = None
    if ft_cfg.class_weights is not None:
        weights = torch.tensor(ft_cfg.class_weights, dtype=torch.float32)

    report = FinetuneReport()
    n = len(images)
    for epoch in range(1, ft_cfg.epochs + 1):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((ft_cfg.seed, 1, epoch))))
        order = [
            (int(i), j) for i in rng.permutation(n) for j in range(ft_cfg.crops_per_image)
        ]
        loss_sum = 0.0
        pair_count = 0
        model.train()
        for start in range(0, len(order), ft_cfg.batch_size):
            chunk = order[start : start + ft_cfg.batch_size]
            xs, ys = [], []
            for i, j in chunk:
                img_crop, tern_crop = _crop_pair(
                    images[i], ternaries[i], crop, (ft_cfg.seed, 2, epoch, i, j)
                )
                xs.append(patch_to_tensor(img_crop))
                ys.append(torch.from_numpy(tern_crop.astype(np.int64)))
            logits = model(torch.stack(xs))
            loss = F.cross_entropy(logits, torch.stack(ys), weight=weights)
            loss_v = float(loss.detach())
            if not np.isfinite(loss_v):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss_v * len(chunk)
            pair_count += len(chunk)
        report.records.append(
            FinetuneRecord(epoch, loss_sum / pair_count, _mean_val_aji(model, val_data, post_cfg))
        )

    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(segmenter_checkpoint(model, ft_cfg.epochs, config_snapshot), out_path / "checkpoint_final.npz")
        report.to_csv(out_path / "finetune_report.csv")
    return model, report


def segmenter_checkpoint(model: Segmenter, step: int, config_snapshot: str = "") -> Checkpoint:
    return Checkpoint(
        encoder_params=params_to_arrays(model.encoder),
        decoder_params=params_to_arrays(model.decoder),
        scorer_params=None,
        optimizer_params=None,
        optimizer_meta=None,
        config_snapshot=config_snapshot,
        step=step,
        arch=model.cfg.encoder_cfg.arch_descriptor(),
    )


def load_segmenter(ckpt: Checkpoint, model_cfg: SegModelConfig) -> Segmenter:
    """Rebuild a segmentation model from a fine-tune checkpoint."""
    if ckpt.arch.get("architecture_id") != model_cfg.encoder_cfg.architecture_id:
        raise ValueError(
            f"checkpoint architecture {ckpt.arch.get('architecture_id')!r} does not match "
            f"config {model_cfg.encoder_cfg.architecture_id!r}"
        )
    if ckpt.decoder_params is None:
        raise ValueError("checkpoint has no decoder parameters; not a segmentation checkpoint")
    model = Segmenter(model_cfg)
    load_params_from_arrays(model.encoder, ckpt.encoder_params)
    load_params_from_arrays(model.decoder, ckpt.decoder_params)
    return model
