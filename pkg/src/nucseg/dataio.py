"""Dataset ingestion, train/validation splitting, and checkpoint persistence.

Dataset layout on disk::

    <root>/images/<stem>.png    8-bit RGB
    <root>/labels/<stem>.png    16-bit single-channel instance ids (0 = background)

Image/label files pair by identical filename stem.  Checkpoints are numpy
``.npz`` containers carrying a JSON metadata record under the ``__meta__``
key; the exact schema is documented in docs/formats.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CHECKPOINT_SCHEMA = "nucseg-checkpoint"
CHECKPOINT_VERSION = 1

# Lossless raster formats only; label maps must decode with exact ids.
SUPPORTED_EXTENSIONS = (".png", ".tif", ".tiff", ".bmp")
LOSSY_EXTENSIONS = (".jpg", ".jpeg", ".webp")


class CheckpointSchemaError(ValueError):
    """Checkpoint file does not carry the expected schema tag or version."""


def validate_rgb_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be at least 1 x 1")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")


def validate_label_map(labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise ValueError(f"expected 2-D label map, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label map must be integer-typed, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("label map contains negative ids")


def label_ids(labels: np.ndarray) -> np.ndarray:
    """Sorted array of nonzero instance ids present in the map."""
    ids = np.unique(labels)
    return ids[ids > 0]


def read_image(path: str | Path) -> np.ndarray:
    """Decode an RGB raster file to an H x W x 3 uint8 array, pixel-exact."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            pixels = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    validate_rgb_image(pixels)
    return pixels


def write_image(path: str | Path, image: np.ndarray) -> None:
    validate_rgb_image(image)
    Image.fromarray(image, mode="RGB").save(Path(path))


def read_label_map(path: str | Path) -> np.ndarray:
    """Decode an instance label map to an H x W int32 array without remapping.

    Lossy formats are rejected because instance ids must survive the
    round trip bit-exactly.
    """
    path = Path(path)
    if path.suffix.lower() in LOSSY_EXTENSIONS:
        raise ValueError(f"label maps require a lossless format, got {path.suffix}: {path}")
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA", "CMYK", "YCbCr"):
                raise ValueError(f"label map must be single channel, got mode {img.mode}: {path}")
            labels = np.asarray(img).astype(np.int32)
    except FileNotFoundError:
        raise
    except ValueError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot decode label map {path}: {exc}") from exc
    validate_label_map(labels)
    return labels


def write_label_map(path: str | Path, labels: np.ndarray) -> None:
    """Store a label map as a 16-bit single-channel PNG/TIFF."""
    validate_label_map(labels)
    if labels.size and labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("label ids exceed the 16-bit storage range")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path))


@dataclass(frozen=True)
class DatasetEntry:
    image_path: Path
    label_path: Path | None
    split: str  # train | val | test

    @property
    def stem(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetIndex:
    """Immutable record of dataset files and their split assignment."""

    entries: list[DatasetEntry]
    seed: int

    def split_entries(self, split: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == split]

    def __len__(self) -> int:
        return len(self.entries)


def _list_files(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in SUPPORTED_EXTENSIONS:
            files[p.stem] = p
    return files


def load_dataset(
    root_dir: str | Path,
    split_ratio: float = 0.8,
    seed: int = 0,
    require_labels: bool = False,
) -> DatasetIndex:
    """Index a dataset root and assign a deterministic train/val split.

    Entries are shuffled with a seeded permutation and cut at the ratio
    boundary: with 30 entries and ratio 0.8 that is 24 train / 6 val.  The
    entry list itself stays in sorted stem order; only the split tags
    depend on the seed.
    """
    root = Path(root_dir)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {images_dir}")
    if not 0.0 <= split_ratio <= 1.0:
        raise ValueError(f"split_ratio must be in [0, 1], got {split_ratio}")

    images = _list_files(images_dir)
    if not images:
        raise ValueError(f"empty dataset: no images under {images_dir}")

    labels_dir = root / "labels"
    labels = _list_files(labels_dir) if labels_dir.is_dir() else {}

    stems = list(images)  # sorted by _list_files
    n = len(stems)
    n_train = int(round(split_ratio * n))
    perm = np.random.default_rng(seed).permutation(n)
    rank = np.empty(n, dtype=int)
    rank[perm] = np.arange(n)

    entries = []
    for i, stem in enumerate(stems):
        label_path = labels.get(stem)
        if require_labels and label_path is None:
            raise ValueError(f"image {stem!r} has no matching label file")
        split = "train" if rank[i] < n_train else "val"
        entries.append(DatasetEntry(images[stem], label_path, split))
    return DatasetIndex(entries=entries, seed=seed)


def load_flat_dataset(
    root_dir: str | Path,
    split: str = "test",
    require_labels: bool = False,
) -> DatasetIndex:
    """Index a dataset root with every entry assigned to one named split.

    Used for evaluation roots (e.g. a held-out test set) that carry no
    internal train/val structure.
    """
    root = Path(root_dir)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {images_dir}")
    images = _list_files(images_dir)
    if not images:
        raise ValueError(f"empty dataset: no images under {images_dir}")
    labels_dir = root / "labels"
    labels = _list_files(labels_dir) if labels_dir.is_dir() else {}
    entries = []
    for stem, path in images.items():
        label_path = labels.get(stem)
        if require_labels and label_path is None:
            raise ValueError(f"image {stem!r} has no matching label file")
        entries.append(DatasetEntry(path, label_path, split))
    return DatasetIndex(entries=entries, seed=0)


ParamBlob = dict[str, np.ndarray]


@dataclass
class Checkpoint:
    """Versioned parameter container; round-trips bit-exactly through disk.

    ``decoder_params``/``scorer_params``/``optimizer_params`` are absent
    (None) when the producing phase has none, e.g. pretraining emits no
    decoder.  ``arch`` records the encoder preset so transfers can verify
    architecture compatibility.
    """

    encoder_params: ParamBlob
    decoder_params: ParamBlob | None = None
    scorer_params: ParamBlob | None = None
    optimizer_params: ParamBlob | None = None
    optimizer_meta: dict | None = None
    config_snapshot: str = ""
    step: int = 0
    arch: dict | None = None


_GROUP_PREFIXES = {
    "encoder_params": "enc/",
    "decoder_params": "dec/",
    "scorer_params": "scr/",
    "optimizer_params": "opt/",
}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for attr, prefix in _GROUP_PREFIXES.items():
        blob = getattr(ckpt, attr)
        if blob is None:
            continue
        for key, value in blob.items():
            arrays[prefix + key] = np.asarray(value)
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "step": int(ckpt.step),
        "config_snapshot": ckpt.config_snapshot,
        "arch": ckpt.arch,
        "optimizer_meta": ckpt.optimizer_meta,
        "groups": {attr: getattr(ckpt, attr) is not None for attr in _GROUP_PREFIXES},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointSchemaError(f"not a recognized checkpoint (missing metadata): {path}")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointSchemaError(f"unexpected schema tag {meta.get('schema')!r} in {path}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointSchemaError(
                f"checkpoint version {meta.get('version')} does not match code version {CHECKPOINT_VERSION}"
            )
        groups: dict[str, ParamBlob | None] = {}
        for attr, prefix in _GROUP_PREFIXES.items():
            if meta["groups"].get(attr):
                groups[attr] = {
                    key[len(prefix):]: data[key] for key in data.files if key.startswith(prefix)
                }
            else:
                groups[attr] = None
    return Checkpoint(
        encoder_params=groups["encoder_params"] or {},
        decoder_params=groups["decoder_params"],
        scorer_params=groups["scorer_params"],
        optimizer_params=groups["optimizer_params"],
        optimizer_meta=meta.get("optimizer_meta"),
        config_snapshot=meta.get("config_snapshot", ""),
        step=int(meta.get("step", 0)),
        arch=meta.get("arch"),
    )
