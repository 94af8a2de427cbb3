import dataclasses

import pytest

from alignseg.config import (
    ConfigError,
    TrainConfig,
    apply_override,
    apply_overrides,
    from_yaml,
    to_dict,
    to_yaml,
)


class TestDefaults:
    def test_schedule_defaults(self):
        cfg = TrainConfig()
        assert cfg.optim.epochs == 80
        assert cfg.optim.lr0 == 0.001
        assert cfg.optim.momentum == 0.9
        assert cfg.optim.weight_decay == 1e-4
        assert cfg.optim.poly_power == 0.9

    def test_method_defaults(self):
        cfg = TrainConfig()
        assert cfg.align.num_context_tokens == 4
        assert cfg.fusion.eta_p == 0.1
        assert cfg.fusion.eta_t == 0.1
        assert cfg.pseudo.tau_init == 0.7
        assert cfg.loss.lambda_ == [0.5, 0.25, 0.25]
        assert cfg.augment.crop == 256
        assert (cfg.augment.scale_min, cfg.augment.scale_max) == (0.5, 2.0)
        assert cfg.augment.feature_perturb_rate == 0.5

    def test_encoder_defaults(self):
        cfg = TrainConfig()
        assert cfg.encoder.patch_size == 16
        assert cfg.encoder.taps == [2, 9]
        assert cfg.model.aspp_rates == [1, 6, 12, 18]
        assert cfg.model.low_channels == 256
        assert cfg.model.high_channels == 2048


class TestRoundTrip:
    def test_yaml_round_trip_default(self):
        cfg = TrainConfig()
        assert from_yaml(to_yaml(cfg)) == cfg

    def test_yaml_round_trip_modified(self):
        cfg = TrainConfig()
        cfg.seed = 7
        cfg.align.class_names = ["a", "b", "c"]
        cfg.data.num_classes = 3
        cfg.loss.lambda_ = [1.0, 0.0, 0.0]
        again = from_yaml(to_yaml(cfg))
        assert again == cfg
        assert again.loss.lambda_ == [1.0, 0.0, 0.0]

    def test_round_trip_is_stable(self):
        text = to_yaml(TrainConfig())
        assert to_yaml(from_yaml(text)) == text


class TestOverrides:
    def test_scalar_override(self):
        cfg = TrainConfig()
        apply_override(cfg, "optim.lr0=0.05")
        assert cfg.optim.lr0 == 0.05

    def test_lambda_keyword_is_addressable(self):
        cfg = TrainConfig()
        apply_override(cfg, "loss.lambda=[1, 0, 0]")
        assert cfg.loss.lambda_ == [1, 0, 0]

    def test_bool_and_string_values(self):
        cfg = TrainConfig()
        apply_overrides(cfg, ["align.use_text=false", "encoder.kind=toy"])
        assert cfg.align.use_text is False
        assert cfg.encoder.kind == "toy"

    def test_list_override(self):
        cfg = TrainConfig()
        apply_override(cfg, "model.aspp_rates=[1, 2, 4]")
        assert cfg.model.aspp_rates == [1, 2, 4]

    def test_unknown_key_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            apply_override(cfg, "optim.learning_rate=0.1")

    def test_unknown_section_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            apply_override(cfg, "sgd.lr0=0.1")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            apply_override(TrainConfig(), "optim.lr0")

    def test_overrides_survive_round_trip(self):
        cfg = TrainConfig()
        apply_override(cfg, "loss.lambda=[0.7, 0.2, 0.1]")
        assert from_yaml(to_yaml(cfg)).loss.lambda_ == [0.7, 0.2, 0.1]


class TestDictForm:
    def test_to_dict_uses_public_names(self):
        d = to_dict(TrainConfig())
        assert "lambda" in d["loss"]
        assert "lambda_" not in d["loss"]

    def test_unknown_yaml_key_rejected(self):
        text = to_yaml(TrainConfig()).replace("lr0:", "lr_zero:")
        with pytest.raises(ConfigError):
            from_yaml(text)

    def test_nested_sections_are_dataclasses(self):
        cfg = TrainConfig()
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if dataclasses.is_dataclass(value):
                assert to_dict(value) == to_dict(TrainConfig())[f.name]
