"""Deterministic synthetic-nuclei generator with exact ground truth.

Images contain elliptical nuclei rendered darker than the background with
optional additive Gaussian noise; the label map records each nucleus's
exact pixel support.  Everything is a pure function of the config seed, so
outputs are byte-identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import write_image, write_label_map
from .sampler import SamplerConfig, Triplet, nuclei_stats, sample_triplet, toy_sampler_config

BACKGROUND_VALUE = 205
NUCLEUS_VALUE_RANGE = (70, 130)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 96
    nuclei_count_range: tuple[int, int] = (8, 16)
    radius_range: tuple[int, int] = (3, 6)
    overlap_allowed: bool = False
    texture_noise_sd: float = 8.0
    min_spacing: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        cmin, cmax = self.nuclei_count_range
        rmin, rmax = self.radius_range
        if not (0 < cmin <= cmax):
            raise ValueError(f"bad nuclei_count_range {self.nuclei_count_range}")
        if not (1 <= rmin <= rmax):
            raise ValueError(f"bad radius_range {self.radius_range}")
        if self.image_size < 2 * rmax:
            raise ValueError("image_size must be at least twice the maximum radius")
        if self.min_spacing < 0:
            raise ValueError("min_spacing must be non-negative")


def _ellipse_support(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Boolean mask of pixel centers inside the rotated ellipse."""
    r = max(a, b)
    x0, x1 = max(0, int(np.floor(cx - r))), min(size - 1, int(np.ceil(cx + r)))
    y0, y1 = max(0, int(np.floor(cy - r))), min(size - 1, int(np.ceil(cy + r)))
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return mask


def generate(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one synthetic image and its instance label map.

    Nucleus count is uniform in ``nuclei_count_range``; each nucleus is an
    ellipse with axes in ``radius_range`` and eccentricity at most 2:1.
    With ``overlap_allowed`` off, supports keep a Chebyshev gap of at least
    ``min_spacing`` pixels; placement retries are bounded and exhausting
    them raises.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    size = cfg.image_size
    rmin, rmax = cfg.radius_range
    count = int(rng.integers(cfg.nuclei_count_range[0], cfg.nuclei_count_range[1] + 1))

    labels = np.zeros((size, size), dtype=np.int32)
    occupied = np.zeros((size, size), dtype=bool)
    spacing_structure = np.ones((2 * cfg.min_spacing + 1,) * 2, dtype=bool) if cfg.min_spacing else None

    placed = 0
    attempts_left = 200 * count
    while placed < count:
        if attempts_left <= 0:
            raise ValueError(
                f"placement failed: could not fit {count} nuclei of radius {cfg.radius_range} "
                f"in a {size}x{size} image (overlap_allowed={cfg.overlap_allowed})"
            )
        attempts_left -= 1

        a = rng.uniform(rmin, rmax)
        b = rng.uniform(max(rmin, a / 2), min(rmax, a * 2))  # eccentricity <= 2:1
        theta = rng.uniform(0.0, np.pi)
        r = max(a, b)
        cx = rng.uniform(r, size - 1 - r)
        cy = rng.uniform(r, size - 1 - r)
        support = _ellipse_support(size, cx, cy, a, b, theta)
        if not support.any():
            continue

        if cfg.overlap_allowed:
            new_labels = labels.copy()
            new_labels[support] = placed + 1
            # overwriting must not erase any earlier instance entirely
            surviving = np.unique(new_labels)
            if len(surviving[surviving > 0]) != placed + 1:
                continue
            labels = new_labels
        else:
            zone = support
            if spacing_structure is not None:
                zone = ndimage.binary_dilation(support, structure=spacing_structure)
            if (occupied & zone).any():
                continue
            labels[support] = placed + 1
        occupied |= support
        placed += 1

    image = np.full((size, size), float(BACKGROUND_VALUE), dtype=np.float64)
    for idx in range(1, count + 1):
        value = rng.uniform(*NUCLEUS_VALUE_RANGE)
        image[labels == idx] = value
    if cfg.texture_noise_sd > 0:
        image = image + rng.normal(0.0, cfg.texture_noise_sd, image.shape)
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return np.repeat(pixels[:, :, None], 3, axis=2), labels


def _child_seed(seed: int, *key: int) -> tuple[int, ...]:
    return (seed, *key)


@dataclass
class TripletPoolEntry:
    triplet: Triplet
    positive_count: int
    negative_count: int


def generate_triplet_pool(
    cfg: SynthConfig,
    n: int,
    sampler_cfg: SamplerConfig | None = None,
) -> list[TripletPoolEntry]:
    """Triplets from fresh synthetic images, each with ground-truth centroid
    counts for the positive region and the negative's source sub-region.

    Because the negative region is a subset of the positive region, the
    negative count can never exceed the positive count.
    """
    sampler_cfg = sampler_cfg or toy_sampler_config()
    if cfg.image_size < sampler_cfg.patch_size:
        raise ValueError(
            f"image_size {cfg.image_size} is smaller than the sampler patch size {sampler_cfg.patch_size}"
        )
    pool = []
    for k in range(n):
        image, labels = generate(replace(cfg, seed=_child_seed(cfg.seed, 0, k)))
        triplet = sample_triplet(image, _child_seed(cfg.seed, 1, k), sampler_cfg)
        _, pos_count = nuclei_stats(labels, triplet.positive_spec)
        _, neg_count = nuclei_stats(labels, triplet.negative_source_region())
        pool.append(TripletPoolEntry(triplet, pos_count, neg_count))
    return pool


def write_synth_dataset(cfg: SynthConfig, n_images: int, out_root: str | Path) -> list[str]:
    """Write a dataset in the standard layout; per-image seeds derive from
    the config seed so the dataset is reproducible as a whole."""
    if n_images < 1:
        raise ValueError("n_images must be positive")
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "labels").mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(n_images):
        image, labels = generate(replace(cfg, seed=_child_seed(cfg.seed, 2, i)))
        stem = f"img_{i:04d}"
        write_image(out_root / "images" / f"{stem}.png", image)
        write_label_map(out_root / "labels" / f"{stem}.png", labels)
        stems.append(stem)
    return stems
