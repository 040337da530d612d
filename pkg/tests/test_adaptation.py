import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softtf import tensor as T
from softtf.adaptation import (
    AdaptationSpec,
    MaskInitScheme,
    MaskSet,
    adapter_forward,
    apply_mask,
    count_trainable_params,
    create_adaptation,
    init_mask,
    lora_forward,
    mix_adaptations,
    parameter_shapes,
    wsn_binarize,
    wsn_keep_count,
)
from softtf.backbone import BackboneConfig, ClassifierHead, PretrainedBackbone
from softtf.errors import ContractError, ShapeError

from helpers import random_tokens, small_config

VIT_B = BackboneConfig(n_layers=12, d_model=768, n_heads=12, d_ff=3072, seq_len=197, n_classes_total=100,
                       input_dim=768)


class TestMaskInit:
    def test_uniform_ones(self):
        m = init_mask(MaskInitScheme("uniform_ones"), {(1, "Q"): (5, 7), (2, "FC1"): (3, 2)})
        for t in m.tensors():
            assert np.all(t.data == 1.0)

    def test_normal_sample_mean(self):
        m = init_mask(MaskInitScheme("normal", 0.0, 1.0), {(1, "Q"): (100, 100)}, np.random.default_rng(0))
        assert -0.05 < m.tensors()[0].data.mean() < 0.05

    def test_xavier_range(self):
        m = init_mask(MaskInitScheme("xavier"), {(1, "Q"): (6, 10)}, np.random.default_rng(0))
        assert np.max(np.abs(m.tensors()[0].data)) <= math.sqrt(6 / 16)

    def test_negative_sigma(self):
        with pytest.raises(ContractError):
            MaskInitScheme("normal", 0.0, -1.0)

    def test_unknown_scheme(self):
        with pytest.raises(ContractError):
            MaskInitScheme("orthogonal")


class TestApplyMask:
    def test_hand_example(self):
        out = apply_mask(T.Tensor([[2.0, 3.0]]), T.Tensor([[0.5, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 6.0]])

    def test_ones_and_zeros(self):
        w = T.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert np.array_equal(apply_mask(w, T.ones(3, 4)).data, w.data)
        assert np.array_equal(apply_mask(w, T.zeros(3, 4)).data, np.zeros((3, 4)))

    def test_gradient_reaches_mask_only(self):
        w = T.Tensor([[2.0, 3.0]])
        m = T.Tensor([[1.0, 1.0]], requires_grad=True)
        T.tsum(apply_mask(w, m)).backward()
        np.testing.assert_array_equal(m.grad, [[2.0, 3.0]])
        assert w.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(T.zeros(2, 2), T.zeros(2, 3))


class TestParameterCount:
    def test_one_vit_layer_qkv_mask(self):
        spec = AdaptationSpec(layers=(12, 12), targets=("QKV",))
        assert count_trainable_params("soft_tf", spec, VIT_B) == 768 * 2304 == 1_769_472

    def test_lora_three_layers_qkv_o(self):
        spec = AdaptationSpec(layers=(10, 12), targets=("QKV", "O"), rank=4, fused_qkv=True)
        expected = 3 * (4 * (768 + 2304) + 4 * (768 + 768))
        assert count_trainable_params("lora", spec, VIT_B) == expected == 55_296

    def test_three_layers_qkv_o_mask(self):
        spec = AdaptationSpec(layers=(10, 12), targets=("QKV", "O"))
        assert count_trainable_params("soft_tf", spec, VIT_B) == 3 * (768 * 2304 + 768 * 768)

    def test_empty_targets(self):
        assert count_trainable_params("soft_tf", AdaptationSpec(targets=()), BackboneConfig()) == 0

    def test_empty_layer_range_warns(self, caplog):
        assert count_trainable_params("soft_tf", AdaptationSpec(layers=(3, 2)), BackboneConfig()) == 0
        assert "empty" in caplog.text

    def test_prompt_only_has_no_adaptation(self):
        assert count_trainable_params("prompt_only", AdaptationSpec(), BackboneConfig()) == 0
        assert create_adaptation(AdaptationSpec(mechanism="prompt_only"), BackboneConfig(), None) is None

    @pytest.mark.parametrize("mechanism", ["soft_tf", "wsn", "lora", "adapter"])
    def test_matches_leaves_with_gradient_buffers(self, mechanism):
        cfg = small_config()
        bb = PretrainedBackbone.initialize(cfg, seed=0)
        bb.freeze()
        rng = np.random.default_rng(1)
        spec = AdaptationSpec(mechanism=mechanism, layers=(1, 2), targets=("Q", "K", "V", "O", "FC1"), rank=2)
        adaptation = create_adaptation(spec, cfg, rng)
        head = ClassifierHead.create(cfg.d_model, cfg.n_classes_total, rng, trainable=False)
        logits, _ = bb.forward(random_tokens(rng, 6, cfg), adaptation, None, head)
        T.cross_entropy(logits, rng.integers(0, 4, 6)).backward()
        with_grad = sum(t.size for t in adaptation.tensors() if t.grad is not None)
        assert with_grad == count_trainable_params(mechanism, spec, cfg)
        assert {k: v.shape for k, v in adaptation.named_tensors().items()} == parameter_shapes(spec, cfg)


class TestWsn:
    def test_sort_example(self):
        np.testing.assert_array_equal(wsn_binarize(np.array([0.9, 0.1, 0.5, 0.7]), 50), [1, 0, 0, 1])

    def test_extremes(self):
        s = np.random.default_rng(0).normal(size=(4, 5))
        assert np.all(wsn_binarize(s, 100) == 1)
        assert np.all(wsn_binarize(s, 0) == 0)

    def test_ties_take_lowest_index(self):
        np.testing.assert_array_equal(wsn_binarize(np.ones(4), 50), [1, 1, 0, 0])

    def test_c_out_of_range(self):
        with pytest.raises(ContractError):
            wsn_binarize(np.ones(3), 101)

    @settings(max_examples=60, deadline=None)
    @given(rows=st.integers(1, 12), cols=st.integers(1, 12), c=st.floats(0, 100), seed=st.integers(0, 2**16))
    def test_exact_count(self, rows, cols, c, seed):
        s = np.random.default_rng(seed).normal(size=(rows, cols))
        assert wsn_binarize(s, c).sum() == wsn_keep_count(c, rows * cols) == math.floor(c * rows * cols / 100 + 0.5)

    def test_straight_through_updates_scores(self):
        cfg = small_config()
        wsn = create_adaptation(AdaptationSpec(mechanism="wsn", layers=(1, 1), targets=("Q",), wsn_c=50), cfg,
                                np.random.default_rng(0))
        w = T.Tensor(np.ones(cfg.weight_shape("Q")))
        T.tsum(wsn.weight(1, "Q", w)).backward()
        np.testing.assert_array_equal(wsn.scores[(1, "Q")].grad, np.ones(cfg.weight_shape("Q")))


class TestLora:
    def test_hand_example(self):
        out = lora_forward(T.Tensor([[1.0, 1.0]]), T.zeros(2, 2), T.Tensor([[1.0], [0.0]]), T.Tensor([[0.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 2.0]])

    def test_zero_b_is_identity(self):
        rng = np.random.default_rng(0)
        x, w = T.Tensor(rng.normal(size=(3, 4))), T.Tensor(rng.normal(size=(4, 5)))
        out = lora_forward(x, w, T.Tensor(rng.normal(size=(4, 2))), T.zeros(2, 5))
        assert np.array_equal(out.data, (x @ w).data)

    def test_rank_too_large(self):
        with pytest.raises(ContractError):
            lora_forward(T.zeros(1, 2), T.zeros(2, 2), T.zeros(2, 3), T.zeros(3, 2))

    def test_fused_slices_match_unfused_product(self):
        cfg = small_config()
        lora = create_adaptation(AdaptationSpec(mechanism="lora", layers=(1, 1), targets=("QKV",), rank=2,
                                                fused_qkv=True), cfg, np.random.default_rng(0))
        A, B = lora.factors[(1, "QKV")]
        B.data = np.random.default_rng(1).normal(size=B.shape)
        full = A.data @ B.data
        d = cfg.d_model
        for i, t in enumerate("QKV"):
            np.testing.assert_array_equal(lora.delta(1, t).data, full[:, i * d:(i + 1) * d])


class TestAdapter:
    def test_zero_up_is_identity(self):
        rng = np.random.default_rng(0)
        h = T.Tensor(rng.normal(size=(2, 3, 4)))
        out = adapter_forward(h, T.Tensor(rng.normal(size=(4, 2))), T.zeros(2, 4), T.zeros(2), T.zeros(4))
        assert np.array_equal(out.data, h.data)


@pytest.mark.parametrize("mechanism", ["lora", "adapter", "soft_tf"])
def test_baselines_are_identity_at_init(mechanism):
    cfg = small_config()
    bb = PretrainedBackbone.initialize(cfg, seed=2)
    bb.freeze()
    rng = np.random.default_rng(3)
    spec = AdaptationSpec(mechanism=mechanism, layers=(1, 2), targets=("Q", "K", "V", "O", "FC1", "FC2"), rank=2)
    adaptation = create_adaptation(spec, cfg, rng)
    head = ClassifierHead.create(cfg.d_model, cfg.n_classes_total, rng)
    x = random_tokens(rng, 10, cfg)
    assert np.array_equal(bb.forward(x, adaptation, None, head)[0].data, bb.forward(x, None, None, head)[0].data)


def test_mixture_of_identical_masks_is_that_mask():
    shapes = {(1, "Q"): (3, 3)}
    a = init_mask(MaskInitScheme("normal", 1.0, 0.1), shapes, np.random.default_rng(0))
    alpha = T.Tensor([0.25, 0.75])
    mixed = mix_adaptations([a, a], alpha)
    assert isinstance(mixed, MaskSet)
    np.testing.assert_allclose(mixed.masks[(1, "Q")].data, a.masks[(1, "Q")].data, rtol=1e-15)
