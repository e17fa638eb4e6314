import pytest

from objcentric.config import ConfigError, RunConfig, config_keys, load_config, parse_config

# every tunable the model description names, mapped to its config key
NAMED_TUNABLES = [
    "lim.n_slots", "backbone.out_channels", "lim.scale_dim", "lim.iters", "lim.momentum", "lim.bias_scale",
    "lim.sim_threshold", "lim.dist_threshold", "loss.perc", "loss.depth", "loss.occ",
    "sampling.n_coarse", "sampling.n_fine", "sampling.keep_radius", "sampling.near", "sampling.far",
    "sampling.locality_bbox", "sampling.guard_band", "sampling.occ_near_fraction",
    "train.perc_epoch", "train.object_centric_epoch", "train.fine_epoch", "train.lr_init", "train.lr_half_epochs",
    "train.depth_pairs", "train.depth_margin", "train.coarse_res", "train.seed", "train.reinit_background",
    "generator.seed", "generator.count_range", "generator.shadows", "generator.overlap_fraction",
    "generator.max_attempts", "dataset", "backbone.kind", "backbone.downsample_factor", "backbone.weights",
    "lift.mode", "decoder.n_freq_fg", "decoder.n_freq_bg", "tto.steps", "tto.lr", "tto.tune_decoders",
    "perceptual.kind", "num_threads", "seed",
]


def test_every_named_tunable_is_a_config_key():
    keys = set(config_keys())
    missing = [k for k in NAMED_TUNABLES if k not in keys]
    assert not missing


def test_defaults_follow_reference_hyperparameters():
    c = RunConfig()
    assert (c.loss.perc, c.loss.depth, c.loss.occ) == (0.006, 1.5, 0.1)
    assert (c.sampling.n_coarse, c.sampling.n_fine) == (64, 256)
    assert c.lim.bias_scale == 0.2
    assert parse_config({"train": {"stage": "prior"}}).train.lr == 3e-4
    assert parse_config({"train": {"stage": "full"}}).train.lr == 1.5e-4


def test_unknown_keys_listed_together():
    with pytest.raises(ConfigError) as e:
        parse_config({"lim": {"n_slotz": 3}, "sampling": {"farr": 2.0}, "bogus": 1})
    assert set(e.value.offending) == {"lim.n_slotz", "sampling.farr", "bogus"}


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        parse_config({"sampling": {"near": 3.0, "far": 2.0}})
    with pytest.raises(ConfigError):
        parse_config({"train": {"epochs": 4, "perc_epoch": 3, "object_centric_epoch": 1}})


def test_yaml_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("lim:\n  n_slots: 5\nsampling:\n  n_fine: 32\n")
    c = load_config(p, {"sampling": {"near": 1.5}})
    assert c.lim.n_slots == 5 and c.sampling.n_fine == 32 and c.sampling.near == 1.5
    assert RunConfig.model_validate_json(c.to_json()) == c
