"""Run configuration: a sectioned key = value text format with typed
schema, strict unknown-key rejection, and a canonical serialization whose
parse -> dump cycle is a byte-exact fixed point.

Types per field: int, float, bool (true/false), str, ints (comma-separated
integers), floats-or-none (comma-separated reals or the word none).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .embedder import EncoderConfig
from .losses import LossConfig
from .optim import OptimizerConfig
from .postprocess import PostprocessConfig
from .pretrain import PretrainConfig
from .sampler import SamplerConfig
from .segmenter import FinetuneConfig, SegModelConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key, or value of the wrong type."""


# (kind, default) per key; section and key order here define the canonical
# serialization order
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "data": {
        "root": ("str", "data"),
        "split_ratio": ("float", 0.8),
        "seed": ("int", 0),
    },
    "sampler": {
        "patch_size": ("int", 768),
        "scale_pool": ("ints", (512, 256, 128, 64)),
        "adjacency_min": ("int", 64),
        "adjacency_max": ("int", 232),
    },
    "encoder": {
        "architecture_id": ("str", "toy-cnn"),
        "input_size": ("int", 768),
        "embedding_dim": ("int", 128),
        "init_seed": ("int", 0),
    },
    "loss": {
        "m1": ("float", 1.0),
        "m2": ("float", 1.0),
        "reduce": ("str", "sum"),
    },
    "pretrain": {
        "steps": ("int", 2000),
        "batch_size": ("int", 4),
        "optimizer": ("str", "rmsprop"),
        "learning_rate": ("float", 1e-3),
        "seed": ("int", 0),
        "scorer_seed": ("int", 1),
        "log_every": ("int", 50),
        "msr_every": ("int", 25),
        "msr_pool_size": ("int", 64),
        "checkpoint_every": ("int", 0),
    },
    "finetune": {
        "epochs": ("int", 10),
        "batch_size": ("int", 4),
        "optimizer": ("str", "rmsprop"),
        "learning_rate": ("float", 1e-3),
        "crop_size": ("int", 256),
        "crops_per_image": ("int", 1),
        "label_fraction": ("float", 1.0),
        "seed": ("int", 0),
        "freeze_encoder": ("bool", False),
        "boundary_width": ("int", 2),
        "decoder_seed": ("int", 0),
        "class_weights": ("floats_or_none", None),
    },
    "postprocess": {
        "min_instance_area": ("int", 10),
        "recover_boundary": ("bool", True),
        "connectivity": ("int", 8),
        "recover_radius": ("int", 4),
    },
    "synth": {
        "image_size": ("int", 96),
        "count_min": ("int", 8),
        "count_max": ("int", 16),
        "radius_min": ("int", 3),
        "radius_max": ("int", 6),
        "overlap_allowed": ("bool", False),
        "texture_noise_sd": ("float", 8.0),
        "min_spacing": ("int", 2),
        "seed": ("int", 0),
        "n_images": ("int", 30),
    },
}


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw == "true":
                return True
            if raw == "false":
                return False
            raise ValueError("expected true or false")
        if kind == "str":
            return raw
        if kind == "ints":
            return tuple(int(part.strip()) for part in raw.split(","))
        if kind == "floats_or_none":
            if raw == "none":
                return None
            return tuple(float(part.strip()) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind} ({exc})") from None
    raise AssertionError(f"unknown kind {kind}")


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ", ".join(str(v) for v in value)
    if kind == "floats_or_none":
        if value is None:
            return "none"
        return ", ".join(repr(float(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for section, keys in SCHEMA.items():
            dst = self.values.setdefault(section, {})
            for key, (_, default) in keys.items():
                dst.setdefault(key, default)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        """Override one field from its text form (CLI flags use this)."""
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config field {section}.{key}")
        self.values[section][key] = _parse_value(SCHEMA[section][key][0], raw, f"{section}.{key}")

    def dump(self) -> str:
        out = io.StringIO()
        for si, (section, keys) in enumerate(SCHEMA.items()):
            if si:
                out.write("\n")
            out.write(f"[{section}]\n")
            for key, (kind, _) in keys.items():
                out.write(f"{key} = {_format_value(kind, self.values[section][key])}\n")
        return out.getvalue()

    # constructors for the module-level config objects

    def sampler_config(self) -> SamplerConfig:
        s = self.values["sampler"]
        return SamplerConfig(
            patch_size=s["patch_size"],
            scale_pool=tuple(s["scale_pool"]),
            adjacency_min=s["adjacency_min"],
            adjacency_max=s["adjacency_max"],
        )

    def encoder_config(self) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(
            architecture_id=e["architecture_id"],
            input_size=e["input_size"],
            embedding_dim=e["embedding_dim"],
            init_seed=e["init_seed"],
        )

    def loss_config(self) -> LossConfig:
        l = self.values["loss"]
        return LossConfig(m1=l["m1"], m2=l["m2"], reduce=l["reduce"])

    def pretrain_config(self) -> PretrainConfig:
        p = self.values["pretrain"]
        return PretrainConfig(
            steps=p["steps"],
            batch_size=p["batch_size"],
            optimizer=OptimizerConfig(preset=p["optimizer"], learning_rate=p["learning_rate"]),
            sampler_cfg=self.sampler_config(),
            loss_cfg=self.loss_config(),
            encoder_cfg=self.encoder_config(),
            seed=p["seed"],
            scorer_seed=p["scorer_seed"],
            log_every=p["log_every"],
            msr_every=p["msr_every"],
            msr_pool_size=p["msr_pool_size"],
            checkpoint_every=p["checkpoint_every"],
        )

    def seg_model_config(self) -> SegModelConfig:
        f = self.values["finetune"]
        return SegModelConfig(
            encoder_cfg=self.encoder_config(),
            init_seed=f["decoder_seed"],
            boundary_width=f["boundary_width"],
        )

    def finetune_config(self) -> FinetuneConfig:
        f = self.values["finetune"]
        weights = f["class_weights"]
        if weights is not None and len(weights) != 3:
            raise ConfigError("finetune.class_weights needs exactly 3 values or none")
        return FinetuneConfig(
            epochs=f["epochs"],
            batch_size=f["batch_size"],
            optimizer=OptimizerConfig(preset=f["optimizer"], learning_rate=f["learning_rate"]),
            crop_size=f["crop_size"],
            crops_per_image=f["crops_per_image"],
            label_fraction=f["label_fraction"],
            seed=f["seed"],
            freeze_encoder=f["freeze_encoder"],
            class_weights=None if weights is None else tuple(weights),
        )

    def postprocess_config(self) -> PostprocessConfig:
        p = self.values["postprocess"]
        return PostprocessConfig(
            min_instance_area=p["min_instance_area"],
            recover_boundary=p["recover_boundary"],
            connectivity=p["connectivity"],
            recover_radius=p["recover_radius"],
        )

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        return SynthConfig(
            image_size=s["image_size"],
            nuclei_count_range=(s["count_min"], s["count_max"]),
            radius_range=(s["radius_min"], s["radius_max"]),
            overlap_allowed=s["overlap_allowed"],
            texture_noise_sd=s["texture_noise_sd"],
            min_spacing=s["min_spacing"],
            seed=s["seed"],
        )


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config field {section}.{key}")
            values[section][key] = _parse_value(SCHEMA[section][key][0], raw, f"{section}.{key}")
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r") as handle:
            return parse_config(handle.read())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None


def default_config() -> RunConfig:
    return RunConfig()
