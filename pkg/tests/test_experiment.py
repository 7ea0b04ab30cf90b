"""실험 설정 로딩 테스트"""
import pytest

from app.core.encoder import parameter_count
from app.core.errors import ConfigError
from app.core.experiment import (
    apply_overrides,
    build_config,
    load_experiment,
    parse_override,
    preset_names,
    resolve_config_path,
)


# ==================== 프리셋 ====================


def test_presets_are_listed():
    names = preset_names()
    for name in ("0gh", "4gh", "4gh.lis", "4gh.lis.noise", "mini-0gh", "mini-4gh"):
        assert name in names


@pytest.mark.parametrize("name", preset_names())
def test_every_preset_validates(name):
    experiment = load_experiment(name)
    assert experiment.variant == name
    assert experiment.batch_shapes % 2 == 0


def test_full_scale_layouts():
    baseline = load_experiment("0gh")
    gaussian = load_experiment("4gh")
    assert baseline.model.gaussian_head_count() == 0
    assert gaussian.model.gaussian_head_count() == 24
    assert parameter_count(baseline.model) == 18_917_891
    assert parameter_count(gaussian.model) == 17_341_955


def test_learnable_and_noisy_variants():
    assert load_experiment("4gh.lis").model.sigma_learnable
    assert load_experiment("4gh.lis.noise").augment.noise is not None
    assert load_experiment("4gh").augment.noise is None


def test_missing_config():
    with pytest.raises(ConfigError):
        resolve_config_path("no-such-preset")


def test_defaults_without_config():
    experiment = load_experiment()
    assert experiment.model.d == 512


# ==================== 오버라이드 ====================


class TestOverrides:
    @pytest.mark.parametrize("text, expected", [
        ("epochs=3", 3),
        ("optimizer.lr=0.5", 0.5),
        ("model.rope=false", False),
        ("model.sigmas=[0.2, 0.4]", [0.2, 0.4]),
        ("variant=quick", "quick"),
        ('variant="a b"', "a b"),
    ])
    def test_value_types(self, text, expected):
        _, value = parse_override(text)
        assert value == expected

    def test_key_path(self):
        parts, _ = parse_override("model.heads=4")
        assert parts == ["model", "heads"]

    @pytest.mark.parametrize("text", ["epochs", "=3", "model..heads=4"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_nested_tables_are_created(self):
        tree = apply_overrides({}, ["augment.noise.stddev=0.01"])
        assert tree == {"augment": {"noise": {"stddev": 0.01}}}

    def test_input_is_not_mutated(self):
        tree = {"model": {"d": 64}}
        merged = apply_overrides(tree, ["model.d=32"])
        assert tree == {"model": {"d": 64}}
        assert merged == {"model": {"d": 32}}

    def test_scalar_parent(self):
        with pytest.raises(ConfigError):
            apply_overrides({"epochs": 3}, ["epochs.value=1"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            build_config(apply_overrides({}, ["model.depth=3"]))

    def test_odd_batch(self):
        with pytest.raises(ConfigError):
            load_experiment("mini-4gh", ["batch_shapes=5"])

    def test_seed_and_epochs(self):
        experiment = load_experiment("mini-4gh", ["model.layers=2"], seed=42, epochs=5)
        assert experiment.seed == 42
        assert experiment.epochs == 5
        assert experiment.model.layers == 2
