"""Self-supervised proxy-task training: sample triplets, embed with one
shared-weight encoder, minimize the combined hinge objective.

All randomness is a pure function of (config seed, step index), so training
is deterministic for a fixed thread count and resuming from a checkpoint
reproduces an uninterrupted run bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import Checkpoint, DatasetIndex, load_checkpoint, read_image, save_checkpoint
from .embedder import CountScorer, Encoder, EncoderConfig, params_to_arrays, load_params_from_arrays, patch_to_tensor
from .losses import LossConfig, count_ranking_loss, scale_triplet_loss, squared_l2, total_loss
from .optim import Optimizer, OptimizerConfig
from .sampler import SamplerConfig, Triplet, sample_triplet


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted with diagnostics."""


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampler_cfg: SamplerConfig = field(default_factory=SamplerConfig)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0          # drives image order and triplet crops
    scorer_seed: int = 1
    log_every: int = 50
    msr_every: int = 25    # margin-satisfaction cadence on the held-out pool
    msr_pool_size: int = 64
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PretrainRecord:
    step: int
    l_st: float
    l_cr: float
    l_total: float
    msr: float | None = None


@dataclass
class PretrainReport:
    records: list[PretrainRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "l_st", "l_cr", "l_total", "msr"])
            for r in self.records:
                msr = "" if r.msr is None else f"{r.msr:.6f}"
                writer.writerow([r.step, f"{r.l_st:.8g}", f"{r.l_cr:.8g}", f"{r.l_total:.8g}", msr])

    @property
    def final_msr(self) -> float | None:
        for r in reversed(self.records):
            if r.msr is not None:
                return r.msr
        return None


def triplets_to_tensors(triplets: list[Triplet]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    anchors = torch.stack([patch_to_tensor(t.anchor) for t in triplets])
    positives = torch.stack([patch_to_tensor(t.positive) for t in triplets])
    negatives = torch.stack([patch_to_tensor(t.negative) for t in triplets])
    return anchors, positives, negatives


def embed_triplets(
    encoder: Encoder, triplets: list[Triplet]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Embed a list of triplets with the single shared-weight encoder."""
    a, p, n = triplets_to_tensors(triplets)
    b = len(triplets)
    z = encoder(torch.cat([a, p, n]))
    return z[:b], z[b : 2 * b], z[2 * b :]


def margin_satisfaction_rate(
    encoder: Encoder,
    scorer: CountScorer,
    pool: list[Triplet],
    loss_cfg: LossConfig | None = None,
    chunk_size: int = 64,
) -> float:
    """Fraction of triplets meeting both hinge constraints with full margin:
    d(z_a, z_n) >= d(z_a, z_p) + m1 and f(z_p) >= f(z_n) + m2."""
    if not pool:
        raise ValueError("triplet pool is empty")
    cfg = loss_cfg or LossConfig()
    satisfied = 0
    with torch.no_grad():
        for start in range(0, len(pool), chunk_size):
            chunk = pool[start : start + chunk_size]
            z_a, z_p, z_n = embed_triplets(encoder, chunk)
            cond_scale = squared_l2(z_a, z_n) >= squared_l2(z_a, z_p) + cfg.m1
            cond_rank = scorer(z_p) >= scorer(z_n) + cfg.m2
            satisfied += int((cond_scale & cond_rank).sum())
    return satisfied / len(pool)


def _entry_images(entries) -> list[np.ndarray]:
    return [read_image(e.image_path) for e in entries]


def build_holdout_pool(
    images: list[np.ndarray], size: int, seed: int, sampler_cfg: SamplerConfig
) -> list[Triplet]:
    """Fixed evaluation pool: triplet i comes from image i mod len(images)
    with a seed derived from (seed, 3, i)."""
    if not images:
        raise ValueError("no images available for the held-out pool")
    return [
        sample_triplet(images[i % len(images)], (seed, 3, i), sampler_cfg) for i in range(size)
    ]


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1, epoch))))
    return rng.permutation(n)


def _training_batch(
    images: list[np.ndarray],
    cfg: PretrainConfig,
    step: int,
    perm_cache: dict[int, np.ndarray],
    resample_per_epoch: bool,
) -> list[Triplet]:
    """One triplet per source image; images cycle in seeded shuffled order.

    Per-triplet seeds are pure functions of the global sample position, so
    any step's batch can be reconstructed without replaying prior steps.
    """
    n = len(images)
    triplets = []
    for slot in range(cfg.batch_size):
        pos = (step - 1) * cfg.batch_size + slot
        epoch, idx = divmod(pos, n)
        if epoch not in perm_cache:
            perm_cache[epoch] = _epoch_permutation(cfg.seed, epoch, n)
        img_idx = int(perm_cache[epoch][idx])
        if resample_per_epoch:
            triplet_seed = (cfg.seed, 2, epoch, img_idx)
        else:
            triplet_seed = (cfg.seed, 2, img_idx)
        triplets.append(sample_triplet(images[img_idx], triplet_seed, cfg.sampler_cfg))
    return triplets


def _pretrain_checkpoint(
    encoder: Encoder, scorer: CountScorer, opt: Optimizer, step: int, cfg: PretrainConfig, snapshot: str
) -> Checkpoint:
    return Checkpoint(
        encoder_params=params_to_arrays(encoder),
        decoder_params=None,
        scorer_params=params_to_arrays(scorer),
        optimizer_params=opt.state_arrays(),
        optimizer_meta=opt.meta(),
        config_snapshot=snapshot,
        step=step,
        arch=cfg.encoder_cfg.arch_descriptor(),
    )


def pretrain(
    dataset: DatasetIndex,
    cfg: PretrainConfig,
    out_dir: str | Path | None = None,
    config_snapshot: str = "",
    resume_from: str | Path | None = None,
    resample_per_epoch: bool = True,
) -> tuple[Encoder, CountScorer, PretrainReport]:
    """Run the proxy-task loop and return the trained encoder, scorer, and
    per-step report.

    ``resample_per_epoch=False`` freezes each image's triplet across epochs
    (each image always contributes the same crops), which is useful for
    tiny overfit runs and no-update sanity checks.
    """
    train_entries = dataset.split_entries("train")
    if not train_entries:
        raise ValueError("train split is empty")
    images = _entry_images(train_entries)
    p = cfg.sampler_cfg.patch_size
    for img in images:
        if img.shape[0] < p or img.shape[1] < p:
            raise ValueError(f"training image {img.shape[:2]} smaller than patch size {p}")
    if cfg.encoder_cfg.input_size != p:
        raise ValueError(
            f"encoder input_size {cfg.encoder_cfg.input_size} != sampler patch_size {p}"
        )

    val_entries = dataset.split_entries("val")
    pool_images = _entry_images(val_entries) if val_entries else images
    holdout = build_holdout_pool(pool_images, cfg.msr_pool_size, cfg.seed, cfg.sampler_cfg)

    encoder = Encoder(cfg.encoder_cfg)
    scorer = CountScorer(cfg.encoder_cfg.embedding_dim, cfg.scorer_seed)
    named = {f"encoder.{k}": v for k, v in encoder.named_parameters()}
    named.update({f"scorer.{k}": v for k, v in scorer.named_parameters()})
    opt = Optimizer(named, cfg.optimizer)

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.arch != cfg.encoder_cfg.arch_descriptor():
            raise ValueError(f"checkpoint architecture {ckpt.arch} does not match config")
        load_params_from_arrays(encoder, ckpt.encoder_params)
        if ckpt.scorer_params is None:
            raise ValueError("checkpoint has no scorer parameters; not a pretrain checkpoint")
        load_params_from_arrays(scorer, ckpt.scorer_params)
        if ckpt.optimizer_params is not None:
            opt.load_state(ckpt.optimizer_params, ckpt.optimizer_meta or {})
        start_step = ckpt.step

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    report = PretrainReport()
    perm_cache: dict[int, np.ndarray] = {}
    encoder.train()
    scorer.train()
    for step in range(start_step + 1, cfg.steps + 1):
        batch = _training_batch(images, cfg, step, perm_cache, resample_per_epoch)
        z_a, z_p, z_n = embed_triplets(encoder, batch)
        l_st = scale_triplet_loss(z_a, z_p, z_n, cfg.loss_cfg)
        l_cr = count_ranking_loss(z_p, z_n, scorer, cfg.loss_cfg)
        loss = total_loss(l_st, l_cr)
        l_st_v, l_cr_v, loss_v = float(l_st.detach()), float(l_cr.detach()), float(loss.detach())
        if not np.isfinite(loss_v):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: l_st={l_st_v}, l_cr={l_cr_v}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        msr = None
        if step % cfg.msr_every == 0 or step == cfg.steps:
            msr = margin_satisfaction_rate(encoder, scorer, holdout, cfg.loss_cfg)
        report.records.append(PretrainRecord(step, l_st_v, l_cr_v, loss_v, msr))

        if out_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            ckpt = _pretrain_checkpoint(encoder, scorer, opt, step, cfg, config_snapshot)
            save_checkpoint(ckpt, out_path / f"checkpoint_step_{step:06d}.npz")

    if out_path is not None:
        ckpt = _pretrain_checkpoint(encoder, scorer, opt, cfg.steps, cfg, config_snapshot)
        save_checkpoint(ckpt, out_path / "checkpoint_final.npz")
        report.to_csv(out_path / "pretrain_report.csv")
    return encoder, scorer, report
