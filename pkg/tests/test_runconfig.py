import pytest

from nucseg.runconfig import (
    SCHEMA,
    ConfigError,
    RunConfig,
    default_config,
    load_config,
    parse_config,
)


def test_defaults_cover_every_schema_field():
    cfg = default_config()
    for section, keys in SCHEMA.items():
        for key in keys:
            cfg.get(section, key)  # would KeyError if missing


def test_dump_parse_is_byte_exact_fixed_point():
    cfg = default_config()
    text = cfg.dump()
    assert parse_config(text).dump() == text
    # and again, for paranoia about float formatting
    assert parse_config(parse_config(text).dump()).dump() == text


def test_dump_parse_fixed_point_with_overrides():
    cfg = default_config()
    cfg.set("pretrain", "steps", "800")
    cfg.set("loss", "m1", "0.5")
    cfg.set("sampler", "scale_pool", "42, 21, 10, 5")
    cfg.set("finetune", "class_weights", "1.0, 2.0, 4.0")
    cfg.set("finetune", "freeze_encoder", "true")
    text = cfg.dump()
    again = parse_config(text)
    assert again.dump() == text
    assert again.get("pretrain", "steps") == 800
    assert again.get("loss", "m1") == 0.5
    assert again.get("sampler", "scale_pool") == (42, 21, 10, 5)
    assert again.get("finetune", "class_weights") == (1.0, 2.0, 4.0)
    assert again.get("finetune", "freeze_encoder") is True


def test_partial_config_inherits_defaults():
    cfg = parse_config("[pretrain]\nsteps = 12\n")
    assert cfg.get("pretrain", "steps") == 12
    assert cfg.get("pretrain", "batch_size") == SCHEMA["pretrain"]["batch_size"][1]
    assert cfg.get("loss", "m1") == 1.0


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        parse_config("[mystery]\nx = 1\n")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("[loss]\nm3 = 1.0\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("[pretrain]\nsteps = soon\n")
    with pytest.raises(ConfigError):
        parse_config("[loss]\nm1 = heavy\n")
    with pytest.raises(ConfigError):
        parse_config("[finetune]\nfreeze_encoder = yes\n")
    with pytest.raises(ConfigError):
        parse_config("[sampler]\nscale_pool = 42, tiny\n")
    with pytest.raises(ConfigError):
        parse_config("not even ini")
    with pytest.raises(ConfigError):
        parse_config("[loss]\nm1 = 1.0\n[loss]\nm1 = 2.0\n")  # duplicate section


def test_set_validates_field_names():
    cfg = default_config()
    with pytest.raises(ConfigError):
        cfg.set("loss", "m9", "1.0")
    with pytest.raises(ConfigError):
        cfg.set("muon", "m1", "1.0")
    with pytest.raises(ConfigError):
        cfg.set("loss", "m1", "fuzzy")


def test_class_weights_none_round_trip():
    cfg = default_config()
    assert cfg.get("finetune", "class_weights") is None
    assert "class_weights = none" in cfg.dump()
    cfg.set("finetune", "class_weights", "1, 2, 3")
    assert cfg.get("finetune", "class_weights") == (1.0, 2.0, 3.0)
    cfg.set("finetune", "class_weights", "none")
    assert cfg.get("finetune", "class_weights") is None


def test_constructed_objects_reflect_values():
    cfg = parse_config(
        "[sampler]\npatch_size = 64\nscale_pool = 42, 21, 10, 5\n"
        "adjacency_min = 5\nadjacency_max = 19\n"
        "[encoder]\ninput_size = 64\nembedding_dim = 32\n"
        "[loss]\nm1 = 0.5\nreduce = mean\n"
        "[pretrain]\nsteps = 7\noptimizer = adam\nlearning_rate = 0.01\n"
        "[finetune]\nepochs = 3\ncrop_size = 64\nboundary_width = 1\n"
        "[postprocess]\nmin_instance_area = 2\nrecover_radius = 2\n"
        "[synth]\ncount_min = 4\ncount_max = 6\nseed = 9\n"
    )
    sampler = cfg.sampler_config()
    assert sampler.patch_size == 64
    assert sampler.scale_pool == (42, 21, 10, 5)

    enc = cfg.encoder_config()
    assert enc.input_size == 64
    assert enc.embedding_dim == 32

    loss = cfg.loss_config()
    assert loss.m1 == 0.5
    assert loss.reduce == "mean"

    pre = cfg.pretrain_config()
    assert pre.steps == 7
    assert pre.optimizer.preset == "adam"
    assert pre.optimizer.learning_rate == 0.01
    assert pre.sampler_cfg == sampler
    assert pre.encoder_cfg == enc

    model = cfg.seg_model_config()
    assert model.boundary_width == 1
    assert model.encoder_cfg == enc

    ft = cfg.finetune_config()
    assert ft.epochs == 3
    assert ft.crop_size == 64

    post = cfg.postprocess_config()
    assert post.min_instance_area == 2
    assert post.recover_radius == 2

    synth = cfg.synth_config()
    assert synth.nuclei_count_range == (4, 6)
    assert synth.seed == 9


def test_invalid_built_object_surfaces_as_value_error():
    cfg = default_config()
    cfg.set("loss", "m1", "-1.0")  # parses fine, violates the loss invariant
    with pytest.raises(ValueError):
        cfg.loss_config()


def test_load_config_reads_files(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[pretrain]\nsteps = 5\n")
    assert load_config(path).get("pretrain", "steps") == 5
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg")


def test_shipped_toy_config_parses():
    import pathlib

    toy = pathlib.Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
    cfg = load_config(toy)
    assert cfg.get("sampler", "patch_size") == 64
    assert cfg.get("encoder", "input_size") == 64
    assert cfg.get("finetune", "crop_size") == 64
    # toy config must itself be in canonical form after one round trip
    assert parse_config(cfg.dump()).dump() == cfg.dump()
    # building every object from it must succeed
    cfg.sampler_config()
    cfg.encoder_config()
    cfg.loss_config()
    cfg.pretrain_config()
    cfg.seg_model_config()
    cfg.finetune_config()
    cfg.postprocess_config()
    cfg.synth_config()
