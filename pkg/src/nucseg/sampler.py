"""Triplet sample generation from large source images.

A triplet consists of an anchor crop, a nearby positive crop of the same
size, and a negative patch obtained by cropping a random sub-region of the
positive patch and upscaling it back to full patch size.  Because the
negative is a magnified view, any fixed structure covers more pixels in it
than in the positive, and the negative's source region can only contain a
subset of the instances visible in the positive region.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataio import read_image, validate_label_map, validate_rgb_image, write_image


@dataclass(frozen=True)
class CropSpec:
    """Axis-aligned square crop: x is the column offset, y the row offset."""

    x: int
    y: int
    size: int

    def contains(self, other: "CropSpec") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x + other.size <= self.x + self.size
            and other.y + other.size <= self.y + self.size
        )


@dataclass(frozen=True)
class SamplerConfig:
    """Geometry of triplet generation.

    ``adjacency_min``/``adjacency_max`` bound the Chebyshev distance between
    the anchor and positive crop offsets, so the positive is a distinct but
    nearby view.  Defaults target 1000 x 1000 source images; use
    :func:`toy_sampler_config` for the 1/12-scale synthetic geometry.
    """

    patch_size: int = 768
    scale_pool: tuple[int, ...] = (512, 256, 128, 64)
    adjacency_min: int = 64
    adjacency_max: int = 232

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if not self.scale_pool:
            raise ValueError("scale_pool must be non-empty")
        if any(s < 1 or s >= self.patch_size for s in self.scale_pool):
            raise ValueError("every pool scale must lie in [1, patch_size)")
        if not 1 <= self.adjacency_min <= self.adjacency_max:
            raise ValueError("need 1 <= adjacency_min <= adjacency_max")


def toy_sampler_config() -> SamplerConfig:
    """1/12-scale geometry: 64 px patches with pool {42, 21, 10, 5}.

    The magnification ratios (x1.5, x3, x6, x12) of the full-scale pool are
    preserved, so the proxy tasks see the same relative-scale structure.
    """
    return SamplerConfig(patch_size=64, scale_pool=(42, 21, 10, 5), adjacency_min=5, adjacency_max=19)


@dataclass
class Triplet:
    """Anchor/positive/negative patches plus their crop provenance.

    ``anchor_spec`` and ``positive_spec`` are in source-image coordinates;
    ``negative_spec`` is in positive-patch coordinates.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_spec: CropSpec
    positive_spec: CropSpec
    negative_spec: CropSpec
    negative_scale: int

    def negative_source_region(self) -> CropSpec:
        """The negative's source region mapped into source-image coordinates."""
        return CropSpec(
            x=self.positive_spec.x + self.negative_spec.x,
            y=self.positive_spec.y + self.negative_spec.y,
            size=self.negative_spec.size,
        )


def resize_bilinear(patch: np.ndarray, target: int) -> np.ndarray:
    """Resize a square uint8 patch to target x target with bilinear filtering.

    Coordinate convention (half-pixel centers): output pixel (i, j) samples
    the source at ``sy = (i + 0.5) * H_in / H_out - 0.5`` (same for x),
    clamped to the valid range, and interpolates the four surrounding
    pixels.  Arithmetic runs in float32; results round half to even and
    saturate to [0, 255].  A target equal to the input size returns a
    pixel-identical copy.
    """
    if target < 1:
        raise ValueError("target size must be positive")
    validate_rgb_image(patch)
    if patch.shape[0] == target and patch.shape[1] == target:
        return patch.copy()
    resized = cv2.resize(
        patch.astype(np.float32), (target, target), interpolation=cv2.INTER_LINEAR
    )
    return np.clip(np.rint(resized), 0, 255).astype(np.uint8)


def _draw_offset(rng: np.random.Generator, max_x: int, max_y: int) -> tuple[int, int]:
    # x drawn before y; part of the documented seed contract
    x = int(rng.integers(0, max_x + 1))
    y = int(rng.integers(0, max_y + 1))
    return x, y


def _draw_adjacent_offset(
    rng: np.random.Generator, ax: int, ay: int, max_x: int, max_y: int, cfg: SamplerConfig
) -> tuple[int, int]:
    """Uniform draw over valid offsets whose Chebyshev distance from the
    anchor offset lies in [adjacency_min, adjacency_max]."""
    reach = max(ax, max_x - ax, ay, max_y - ay)
    if reach < cfg.adjacency_min:
        raise ValueError(
            "image too small for an adjacent positive crop: no offset at "
            f"Chebyshev distance >= {cfg.adjacency_min} from the anchor"
        )
    for _ in range(1000):
        px, py = _draw_offset(rng, max_x, max_y)
        dist = max(abs(px - ax), abs(py - ay))
        if cfg.adjacency_min <= dist <= cfg.adjacency_max:
            return px, py
    # Dense fallback keeps the draw uniform when the annulus is a sliver.
    candidates = [
        (x, y)
        for x in range(max_x + 1)
        for y in range(max_y + 1)
        if cfg.adjacency_min <= max(abs(x - ax), abs(y - ay)) <= cfg.adjacency_max
    ]
    if not candidates:
        raise ValueError("no valid positive offset inside the adjacency annulus")
    return candidates[int(rng.integers(0, len(candidates)))]


def sample_triplet(image: np.ndarray, rng_seed, cfg: SamplerConfig | None = None) -> Triplet:
    """Generate one triplet from a source image, deterministic per seed.

    ``rng_seed`` may be an int or any tuple of ints accepted by numpy's
    SeedSequence, which lets callers derive independent per-step streams.
    """
    cfg = cfg or SamplerConfig()
    validate_rgb_image(image)
    h, w = image.shape[:2]
    p = cfg.patch_size
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} is smaller than the {p}x{p} patch size")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    max_x, max_y = w - p, h - p

    ax, ay = _draw_offset(rng, max_x, max_y)
    px, py = _draw_adjacent_offset(rng, ax, ay, max_x, max_y, cfg)
    scale = int(cfg.scale_pool[int(rng.integers(0, len(cfg.scale_pool)))])
    nx, ny = _draw_offset(rng, p - scale, p - scale)

    anchor = np.ascontiguousarray(image[ay : ay + p, ax : ax + p])
    positive = np.ascontiguousarray(image[py : py + p, px : px + p])
    negative = resize_bilinear(positive[ny : ny + scale, nx : nx + scale], p)

    return Triplet(
        anchor=anchor,
        positive=positive,
        negative=negative,
        anchor_spec=CropSpec(ax, ay, p),
        positive_spec=CropSpec(px, py, p),
        negative_spec=CropSpec(nx, ny, scale),
        negative_scale=scale,
    )


def nuclei_stats(labels: np.ndarray, region: CropSpec) -> tuple[float, int]:
    """Mean instance area and instance count for a region of a label map.

    An instance counts as inside the region when its centroid (mean pixel
    coordinate over the whole map) falls on the region's pixel-center grid:
    ``region.y <= cy <= region.y + size - 1`` and likewise in x.  The mean
    size averages the full pixel areas of the counted instances and is 0.0
    when the region contains none.
    """
    validate_label_map(labels)
    h, w = labels.shape
    if not (0 <= region.x and 0 <= region.y and region.x + region.size <= w and region.y + region.size <= h):
        raise ValueError(f"region {region} not inside {h}x{w} label map")

    flat = labels.ravel()
    n_ids = int(flat.max()) + 1 if flat.size else 1
    areas = np.bincount(flat, minlength=n_ids)
    rows, cols = np.indices(labels.shape)
    sum_y = np.bincount(flat, weights=rows.ravel(), minlength=n_ids)
    sum_x = np.bincount(flat, weights=cols.ravel(), minlength=n_ids)

    ids = np.nonzero(areas)[0]
    ids = ids[ids > 0]
    if ids.size == 0:
        return 0.0, 0
    cy = sum_y[ids] / areas[ids]
    cx = sum_x[ids] / areas[ids]
    inside = (
        (cy >= region.y)
        & (cy <= region.y + region.size - 1)
        & (cx >= region.x)
        & (cx <= region.x + region.size - 1)
    )
    count = int(inside.sum())
    mean_size = float(areas[ids][inside].mean()) if count else 0.0
    return mean_size, count


def save_triplet(directory: str | Path, stem: str, triplet: Triplet) -> None:
    """Write the three patches plus a sidecar record of the crop geometry.

    Sidecar format (``<stem>_triplet.txt``): one ``key = value`` line per
    field, keys ``anchor_x/y/size``, ``positive_x/y/size``,
    ``negative_x/y/size`` (positive-patch coordinates), ``negative_scale``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_image(directory / f"{stem}_anchor.png", triplet.anchor)
    write_image(directory / f"{stem}_positive.png", triplet.positive)
    write_image(directory / f"{stem}_negative.png", triplet.negative)
    lines = []
    for name, spec in (
        ("anchor", triplet.anchor_spec),
        ("positive", triplet.positive_spec),
        ("negative", triplet.negative_spec),
    ):
        lines.append(f"{name}_x = {spec.x}")
        lines.append(f"{name}_y = {spec.y}")
        lines.append(f"{name}_size = {spec.size}")
    lines.append(f"negative_scale = {triplet.negative_scale}")
    (directory / f"{stem}_triplet.txt").write_text("\n".join(lines) + "\n")


def load_triplet(directory: str | Path, stem: str) -> Triplet:
    directory = Path(directory)
    fields = {}
    for line in (directory / f"{stem}_triplet.txt").read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = int(value.strip())
    specs = {
        name: CropSpec(fields[f"{name}_x"], fields[f"{name}_y"], fields[f"{name}_size"])
        for name in ("anchor", "positive", "negative")
    }
    return Triplet(
        anchor=read_image(directory / f"{stem}_anchor.png"),
        positive=read_image(directory / f"{stem}_positive.png"),
        negative=read_image(directory / f"{stem}_negative.png"),
        anchor_spec=specs["anchor"],
        positive_spec=specs["positive"],
        negative_spec=specs["negative"],
        negative_scale=fields["negative_scale"],
    )
