"""인코더 테스트"""
import numpy as np
import pytest
from pydantic import ValidationError

from app.core.encoder import (
    SIGMA_PARAM,
    AttentionState,
    EncoderModel,
    attention_apply,
    concat_inputs,
    dot_head_energy,
    encoder_layer_forward,
    gaussian_head_energy,
    model_forward,
    parameter_count,
    parameter_shapes,
    rope_rotation,
    rope_thetas,
    split_outputs,
)
from app.core.errors import ConfigError, ContractError
from app.core.geometry import Correspondence, PointCloud, block_distance_matrix, random_rotation, rotate
from app.core.gradcheck import check_gradients
from app.core.losses import total_loss
from app.core.models import GaussianCross, ModelConfig, ResidualMode
from app.core.tensor import Tensor, matmul, sum_all, mul
from app.services.dataset import template_shape
from app.services.evaluation import attention_support
from tests.conftest import random_cloud


# ==================== numpy 기준 구현 ====================


def np_layer_norm(x, gain, bias, eps=1e-5):
    centered = x - x.mean(axis=1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps) * gain + bias


def np_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def np_rotate_keys(keys, base=10000.0):
    """위치별 블록 대각 회전 행렬을 직접 만들어 적용"""
    rows, dim = keys.shape
    out = np.empty_like(keys)
    for m in range(rows):
        block = np.zeros((dim, dim))
        for i in range(dim // 2):
            angle = m * base ** (-2.0 * i / dim)
            c, s = np.cos(angle), np.sin(angle)
            block[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
        out[m] = block @ keys[m]
    return out


def np_reference_forward(model, x, y):
    """residual attention 없는 1층 dot-product 인코더"""
    p = {name: t.data for name, t in model.params.items()}
    cfg = model.config
    inputs = np.concatenate([x.points, np.zeros((1, 3)), y.points])
    h = inputs @ p["input_proj.weight"] + p["input_proj.bias"]
    heads = []
    for i in range(cfg.heads):
        prefix = f"layers.0.heads.{i}"
        q = h @ p[f"{prefix}.query.weight"] + p[f"{prefix}.query.bias"]
        k = h @ p[f"{prefix}.key.weight"] + p[f"{prefix}.key.bias"]
        v = h @ p[f"{prefix}.value.weight"] + p[f"{prefix}.value.bias"]
        if cfg.rope:
            k = np_rotate_keys(k, cfg.rope_base)
        weights = np_softmax(q @ k.T / np.sqrt(cfg.head_dim))
        heads.append(weights @ v)
    attended = np.concatenate(heads, axis=1) @ p["layers.0.attn_out.weight"] + p["layers.0.attn_out.bias"]
    h1 = np_layer_norm(h + attended, p["layers.0.norm1.gain"], p["layers.0.norm1.bias"])
    inner = np.maximum(h1 @ p["layers.0.ff1.weight"] + p["layers.0.ff1.bias"], 0.0)
    fed = inner @ p["layers.0.ff2.weight"] + p["layers.0.ff2.bias"]
    h2 = np_layer_norm(h1 + fed, p["layers.0.norm2.gain"], p["layers.0.norm2.bias"])
    return h2 @ p["output_proj.weight"] + p["output_proj.bias"]


# ==================== 입력 결합 ====================


class TestConcat:
    def test_single_points(self):
        x = PointCloud([[1.0, 2.0, 3.0]])
        rows = concat_inputs(x, x)
        assert rows.shape == (3, 3)
        np.testing.assert_array_equal(rows[1], [0.0, 0.0, 0.0])

    def test_split_inverts_concat(self, rng):
        x, y = random_cloud(rng, 4), random_cloud(rng, 6)
        xs, sep, ys = split_outputs(concat_inputs(x, y), 4)
        np.testing.assert_array_equal(xs, x.points)
        np.testing.assert_array_equal(ys, y.points)
        assert sep.shape == (1, 3)

    def test_large_size(self, rng):
        x = random_cloud(rng, 1000)
        assert concat_inputs(x, x).shape == (2001, 3)


# ==================== RoPE ====================


class TestRope:
    def test_position_zero_is_identity(self, rng):
        keys = rng.normal(size=(1, 8))
        np.testing.assert_array_equal(rope_rotation(0, 8).apply_array(keys), keys)

    def test_theta_values(self):
        thetas = rope_thetas(64)
        assert thetas[0] == 1.0
        assert thetas[31] == pytest.approx(10000.0 ** (-62 / 64), rel=1e-15)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ConfigError):
            rope_thetas(7)

    def test_matches_explicit_rotation_matrices(self, rng):
        keys = rng.normal(size=(5, 6))
        rotation = rope_rotation(np.arange(5), 6)
        np.testing.assert_allclose(rotation.apply_array(keys), np_rotate_keys(keys), atol=1e-12)

    def test_relative_position_property(self, rng):
        q, k = rng.normal(size=4), rng.normal(size=4)
        first = rope_rotation(3, 4).apply_array(q[None])[0] @ rope_rotation(5, 4).apply_array(k[None])[0]
        second = rope_rotation(10, 4).apply_array(q[None])[0] @ rope_rotation(12, 4).apply_array(k[None])[0]
        assert first == pytest.approx(second, abs=1e-12)


# ==================== head 연산 ====================


class TestDotHead:
    def test_zero_projections_are_uniform(self):
        n = 3
        zeros = Tensor(np.zeros((2 * n + 1, 4)))
        xi = dot_head_energy(zeros, zeros)
        np.testing.assert_allclose(xi.data, np.full((7, 7), 1 / 7), atol=1e-15)

    def test_previous_weights_dominate_zero_logits(self, rng):
        zeros = Tensor(np.zeros((5, 4)))
        previous = rng.normal(size=(5, 5)) * 50
        xi = dot_head_energy(zeros, zeros, prev_xi=Tensor(previous))
        expected = np.exp(previous - previous.max(axis=1, keepdims=True))
        expected /= expected.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(xi.data, expected, atol=1e-12)

    def test_gradient_with_rope(self, rng):
        q = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        rope = rope_rotation(np.arange(7), 4)
        weights = rng.normal(size=(7, 7))
        errors = check_gradients(lambda: sum_all(mul(dot_head_energy(q, k, rope=rope), Tensor(weights))), {"q": q, "k": k})
        assert max(errors.values()) < 1e-6


class TestGaussianHead:
    def test_isolated_points_peak_on_diagonal(self):
        points = np.arange(5, dtype=float)[:, None] * np.array([[1.0, 0.0, 0.0]])
        x = PointCloud(points)
        xi = gaussian_head_energy(block_distance_matrix(x, x), 0.05).data
        block = xi[:5, :5]
        e = np.e
        np.testing.assert_allclose(np.diag(block), e / (e + 4), atol=1e-9)
        assert np.all(np.argmax(block, axis=1) == np.arange(5))

    def test_wide_sigma_is_uniform_within_blocks(self, rng):
        x, y = random_cloud(rng, 4), random_cloud(rng, 6)
        xi = gaussian_head_energy(block_distance_matrix(x, y), 1e6).data
        np.testing.assert_allclose(xi[:4, :4], 0.25, atol=1e-9)
        np.testing.assert_allclose(xi[5:, 5:], 1 / 6, atol=1e-9)
        assert xi[4, 4] == 1.0
        assert np.all(xi[:4, 4:] == 0.0)

    def test_support_does_not_shrink_with_sigma(self):
        shape = template_shape(128, seed=0).cloud
        distances = block_distance_matrix(shape, shape)
        supports = []
        for sigma in [0.05, 0.1, 0.5, 1.0]:
            xi = gaussian_head_energy(distances, sigma).data
            supports.append(attention_support(xi))
        for narrow, wide in zip(supports, supports[1:]):
            assert np.all(wide >= narrow)


class TestAttentionApply:
    def test_identity_and_uniform(self, rng):
        values = Tensor(rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(attention_apply(Tensor(np.eye(4)), values).data, values.data)
        uniform = attention_apply(Tensor(np.full((4, 4), 0.25)), values).data
        np.testing.assert_allclose(uniform, np.tile(values.data.mean(axis=0), (4, 1)), atol=1e-15)

    def test_rows_are_convex_combinations(self, rng):
        values = rng.normal(size=(6, 2))
        weights = rng.random(size=(6, 6))
        weights /= weights.sum(axis=1, keepdims=True)
        out = attention_apply(Tensor(weights), Tensor(values)).data
        assert np.all(out >= values.min(axis=0) - 1e-12)
        assert np.all(out <= values.max(axis=0) + 1e-12)


# ==================== 설정/파라미터 ====================


class TestModelConfig:
    def test_indivisible_width(self):
        with pytest.raises(ValidationError):
            ModelConfig(d=10, heads=4)

    def test_too_many_gaussian_heads(self):
        with pytest.raises(ValidationError):
            ModelConfig(d=16, heads=2, gaussian_heads=3)
        with pytest.raises(ValidationError):
            ModelConfig(d=16, heads=8, gaussian_heads=5)

    def test_non_positive_sigma(self):
        with pytest.raises(ValidationError):
            ModelConfig(d=16, heads=4, gaussian_heads=1, sigmas=[0.0])

    def test_odd_head_dim_with_rope(self):
        with pytest.raises(ValidationError):
            ModelConfig(d=12, heads=4)
        ModelConfig(d=12, heads=4, rope=False)
        ModelConfig(d=12, heads=4, gaussian_heads=4)

    def test_gaussian_heads_take_last_positions(self):
        layout = ModelConfig(d=16, heads=4, layers=2, gaussian_heads=2, gaussian_layers=[1]).resolved_layout()
        assert [spec.label() for spec in layout[0]] == ["dot"] * 4
        assert [spec.label() for spec in layout[1]] == ["dot", "dot", "gauss:0", "gauss:1"]

    def test_explicit_layout(self):
        config = ModelConfig(d=8, heads=2, layers=1, head_layout=[["gauss:1", "dot"]])
        assert config.gaussian_head_count() == 1
        with pytest.raises(ValidationError):
            ModelConfig(d=8, heads=2, layers=1, head_layout=[["gauss:9", "dot"]])

    def test_describe_layout(self):
        config = ModelConfig(d=8, heads=2, layers=2, gaussian_heads=1, sigmas=[0.5])
        assert config.describe_layout() == [["dot", "gauss:0.5"], ["dot", "gauss:0.5"]]
        assert config.describe_layout([0.25])[1] == ["dot", "gauss:0.25"]


class TestParameters:
    def test_tiny_count(self, tiny_config):
        assert parameter_count(tiny_config) == 931
        model = EncoderModel.initialize(tiny_config)
        assert sum(p.size for p in model.parameters().values()) == 931

    def test_learnable_sigmas_are_counted(self):
        fixed = ModelConfig(d=16, heads=4, gaussian_heads=4)
        learnable = ModelConfig(d=16, heads=4, gaussian_heads=4, sigma_learnable=True)
        assert parameter_count(learnable) - parameter_count(fixed) == 4

    def test_gaussian_heads_drop_query_and_key(self):
        base = ModelConfig()
        gaussian = ModelConfig(gaussian_heads=4)
        assert parameter_count(base) == 18_917_891

        def totals(config, suffix):
            return sum(
                int(np.prod(shape))
                for name, shape in parameter_shapes(config).items()
                if name.endswith(suffix) and name != SIGMA_PARAM
            )

        assert totals(base, ".weight") - totals(gaussian, ".weight") == 1_572_864
        assert totals(base, ".bias") - totals(gaussian, ".bias") == 3072
        delta = parameter_count(base) - parameter_count(gaussian)
        assert abs(delta - 1_570_000) <= 20_000
        assert parameter_count(gaussian) < parameter_count(base)

    def test_initialization_is_seeded(self, toy_config):
        first = EncoderModel.initialize(toy_config, seed=1).state_arrays()
        second = EncoderModel.initialize(toy_config, seed=1).state_arrays()
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_projection_biases_are_random_norm_biases_zero(self, toy_config):
        model = EncoderModel.initialize(toy_config, seed=1)
        shapes = parameter_shapes(toy_config)
        for name, tensor in model.params.items():
            if not name.endswith(".bias"):
                continue
            if ".norm" in name:
                assert np.all(tensor.data == 0.0), name
            else:
                bound = 1.0 / np.sqrt(shapes[name[: -len(".bias")] + ".weight"][0])
                assert np.any(tensor.data != 0.0), name
                assert np.all(np.abs(tensor.data) <= bound), name

    def test_sep_row_has_variance_at_first_norm(self, toy_model, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 5)
        p = {name: t.data for name, t in toy_model.params.items()}
        hidden = concat_inputs(x, y) @ p["input_proj.weight"] + p["input_proj.bias"]
        assert hidden[5].var() > 1e-3

    def test_load_arrays_rejects_mismatch(self, toy_model):
        arrays = toy_model.state_arrays()
        arrays.pop(SIGMA_PARAM)
        with pytest.raises(ContractError):
            toy_model.load_arrays(arrays)

    def test_sigma_clamp(self, toy_config):
        model = EncoderModel.initialize(toy_config)
        model.params[SIGMA_PARAM].data = np.array([-1.0, 0.6])
        assert model.sigma_values() == [1e-3, 0.6]
        assert model.describe_layout()[0] == ["dot", "dot", "gauss:0.001", "gauss:0.6"]


# ==================== forward ====================


class TestForward:
    @pytest.mark.parametrize("rope", [False, True])
    def test_matches_reference_implementation(self, rope, rng):
        config = ModelConfig(d=16, heads=4, layers=1, rope=rope, residual_attention=ResidualMode.NONE)
        model = EncoderModel.initialize(config, seed=2)
        x, y = random_cloud(rng, 8), random_cloud(rng, 8)
        out = model.predict(x, y).output.data
        np.testing.assert_allclose(out, np_reference_forward(model, x, y), atol=1e-10)

    def test_output_shape(self, toy_model, rng):
        result = toy_model.predict(random_cloud(rng, 5), random_cloud(rng, 7))
        assert result.output.shape == (13, 3)
        assert result.x_hat.shape == (5, 3)
        assert result.sep_out.shape == (1, 3)
        assert result.y_hat.shape == (7, 3)

    def test_zero_output_projection(self, toy_model, rng):
        toy_model.params["output_proj.weight"].data = np.zeros((16, 3))
        toy_model.params["output_proj.bias"].data = np.zeros(3)
        out = toy_model.predict(random_cloud(rng, 5), random_cloud(rng, 5)).output.data
        np.testing.assert_array_equal(out, np.zeros((11, 3)))

    def test_permutation_equivariance_without_rope(self, rng):
        config = ModelConfig(d=16, heads=4, layers=2, gaussian_heads=2, sigmas=[0.2, 0.6], rope=False)
        model = EncoderModel.initialize(config, seed=4)
        x, y = random_cloud(rng, 6), random_cloud(rng, 6)
        perm = rng.permutation(6)
        base = model.predict(x, y).output.data
        moved = model.predict(PointCloud(x.points[perm]), y).output.data
        np.testing.assert_allclose(moved[:6], base[:6][perm], atol=1e-10)
        np.testing.assert_allclose(moved[6:], base[6:], atol=1e-10)

    def test_attention_rows_and_gaussian_blocks(self, toy_model, rng):
        for _ in range(100):
            n = int(rng.integers(2, 6))
            result = toy_model.predict(random_cloud(rng, n), random_cloud(rng, n), record=True)
            for layer, row in enumerate(result.attention):
                for head, xi in enumerate(row):
                    np.testing.assert_allclose(xi.sum(axis=1), 1.0, atol=1e-9)
                    if toy_model.layout[layer][head].is_gaussian:
                        assert np.all(xi[:n, n:] == 0.0)
                        assert np.all(xi[n + 1:, :n + 1] == 0.0)
                        assert xi[n, n] == 1.0

    def test_pre_softmax_stream_reopens_cross_entries(self, rng):
        config = ModelConfig(
            d=16,
            heads=4,
            layers=2,
            gaussian_heads=2,
            sigmas=[0.2, 0.6],
            gaussian_layers=[0],
            residual_attention=ResidualMode.PRE_SOFTMAX,
        )
        model = EncoderModel.initialize(config, seed=5)
        n = 5
        x, y = random_cloud(rng, n), random_cloud(rng, n)

        p = {name: t.data for name, t in model.params.items()}
        hidden = Tensor(concat_inputs(x, y) @ p["input_proj.weight"] + p["input_proj.bias"])
        rope = rope_rotation(np.arange(2 * n + 1), config.head_dim)
        _, state = encoder_layer_forward(
            model, 0, hidden, AttentionState.initial(4, 2 * n + 1), block_distance_matrix(x, y), rope=rope
        )
        for head, spec in enumerate(model.layout[0]):
            assert np.all(np.isfinite(state.carry[head].data))
            if spec.is_gaussian:
                assert np.all(state.carry[head].data[:n, n:] == 0.0)

        result = model.predict(x, y, record=True)
        for head in (2, 3):
            xi = result.attention[1][head]
            np.testing.assert_allclose(xi.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(xi[:n, n + 1:] > 0.0)
            assert np.all(xi[n] > 0.0)

    def test_pre_softmax_gradients_are_finite(self, rng):
        config = ModelConfig(
            d=16,
            heads=4,
            layers=2,
            gaussian_heads=2,
            sigmas=[0.2, 0.6],
            sigma_learnable=True,
            residual_attention=ResidualMode.PRE_SOFTMAX,
        )
        model = EncoderModel.initialize(config, seed=5)
        x, y = random_cloud(rng, 4), random_cloud(rng, 4)
        result = model_forward(model, x, y)
        value, _ = total_loss(result.x_hat, result.y_hat, result.sep_out, x, y, Correspondence.identity(4))
        value.backward()
        for name, tensor in model.parameters().items():
            assert tensor.grad is not None and np.all(np.isfinite(tensor.grad)), name

    def test_literal_cross_keeps_cross_mass(self, rng):
        config = ModelConfig(
            d=16,
            heads=4,
            layers=2,
            gaussian_heads=2,
            sigmas=[0.2, 0.6],
            gaussian_cross=GaussianCross.LITERAL,
        )
        model = EncoderModel.initialize(config, seed=6)
        n = 4
        result = model.predict(random_cloud(rng, n), random_cloud(rng, n), record=True)
        for layer, row in enumerate(result.attention):
            for head, xi in enumerate(row):
                np.testing.assert_allclose(xi.sum(axis=1), 1.0, atol=1e-9)
                if model.layout[layer][head].is_gaussian:
                    assert np.all(xi[:n, n + 1:] > 0.0)
                    assert xi[n, n] < 1.0

    def test_gaussian_weights_ignore_rigid_motion(self, toy_model, rng):
        x, y = random_cloud(rng, 6), random_cloud(rng, 6)
        base = toy_model.predict(x, y, record=True).attention[0]
        moved = toy_model.predict(
            rotate(x, random_rotation("all_axes", rng)),
            rotate(y, random_rotation("all_axes", rng)),
            record=True,
        ).attention[0]
        for head, spec in enumerate(toy_model.layout[0]):
            if spec.is_gaussian:
                np.testing.assert_allclose(moved[head], base[head], atol=1e-9)

    def test_deterministic(self, toy_model, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 5)
        np.testing.assert_array_equal(toy_model.predict(x, y).output.data, toy_model.predict(x, y).output.data)

    def test_all_gaussian_model_skips_rope(self, rng):
        config = ModelConfig(d=12, heads=4, layers=1, gaussian_heads=4, sigmas=[0.1, 0.2, 0.3, 0.4])
        model = EncoderModel.initialize(config)
        assert model.predict(random_cloud(rng, 4), random_cloud(rng, 4)).output.shape == (9, 3)


# ==================== head 마스킹 ====================


class TestHeadMask:
    def test_empty_mask_is_bitwise_identical(self, toy_model, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 5)
        np.testing.assert_array_equal(
            toy_model.predict(x, y).output.data,
            toy_model.predict(x, y, head_mask=set()).output.data,
        )

    def test_mask_changes_output_not_parameters(self, toy_model, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 5)
        before = toy_model.state_arrays()
        unmasked = toy_model.predict(x, y).output.data
        masked = toy_model.predict(x, y, head_mask={(0, 0)}, record=True)
        assert not np.array_equal(masked.output.data, unmasked)
        assert np.all(masked.attention[0][0] == 0.0)
        for name, array in toy_model.state_arrays().items():
            np.testing.assert_array_equal(array, before[name])

    def test_out_of_range(self, toy_model, rng):
        with pytest.raises(ContractError):
            toy_model.predict(random_cloud(rng, 3), random_cloud(rng, 3), head_mask={(5, 0)})

    def test_all_heads_masked_keeps_residual_only(self, toy_model, rng):
        x, y = random_cloud(rng, 4), random_cloud(rng, 4)
        p = {name: t.data for name, t in toy_model.params.items()}
        inputs = concat_inputs(x, y)
        hidden = Tensor(inputs @ p["input_proj.weight"] + p["input_proj.bias"])
        state = AttentionState.initial(4, 9)
        out, new_state = encoder_layer_forward(
            toy_model, 0, hidden, state, block_distance_matrix(x, y), mask=[True] * 4
        )
        h1 = np_layer_norm(hidden.data, p["layers.0.norm1.gain"], p["layers.0.norm1.bias"])
        inner = np.maximum(h1 @ p["layers.0.ff1.weight"] + p["layers.0.ff1.bias"], 0.0)
        h2 = np_layer_norm(h1 + inner @ p["layers.0.ff2.weight"] + p["layers.0.ff2.bias"],
                           p["layers.0.norm2.gain"], p["layers.0.norm2.bias"])
        np.testing.assert_allclose(out.data, h2, atol=1e-12)
        assert all(np.all(c.data == 0.0) for c in new_state.carry)


# ==================== gradient ====================


class TestGradients:
    def test_every_parameter_matches_finite_differences(self, toy_model, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 5)
        corr = Correspondence(rng.permutation(5))

        def loss():
            result = model_forward(toy_model, x, y)
            value, _ = total_loss(result.x_hat, result.y_hat, result.sep_out, x, y, corr)
            return value

        errors = check_gradients(loss, toy_model.parameters(), max_entries=None)
        assert set(errors) == set(toy_model.parameters())
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, worst

    def test_sep_loss_reaches_input_projection(self, toy_model, rng):
        x, y = random_cloud(rng, 4), random_cloud(rng, 4)
        result = model_forward(toy_model, x, y)
        sum_all(mul(result.sep_out, result.sep_out)).backward()
        assert np.any(toy_model.params["input_proj.weight"].grad != 0.0)

    def test_sigma_gradient_flows_when_learnable(self, toy_model, rng):
        x, y = random_cloud(rng, 4), random_cloud(rng, 4)
        corr = Correspondence.identity(4)
        result = model_forward(toy_model, x, y)
        value, _ = total_loss(result.x_hat, result.y_hat, result.sep_out, x, y, corr)
        value.backward()
        grad = toy_model.params[SIGMA_PARAM].grad
        assert grad is not None and np.all(np.isfinite(grad)) and np.any(grad != 0.0)

    def test_fixed_sigmas_get_no_gradient(self, rng):
        config = ModelConfig(d=16, heads=4, layers=1, gaussian_heads=2, sigmas=[0.2, 0.6])
        model = EncoderModel.initialize(config)
        assert SIGMA_PARAM not in model.parameters()
        x, y = random_cloud(rng, 4), random_cloud(rng, 4)
        result = model_forward(model, x, y)
        sum_all(matmul(result.output.T, result.output)).backward()
        assert model.params[SIGMA_PARAM].grad is None
