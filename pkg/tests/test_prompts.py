import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softtf import tensor as T
from softtf.backbone import ClassifierHead, PretrainedBackbone
from softtf.errors import ContractError, ShapeError
from softtf.prompts import AttachmentPlan, PromptPool, attach_prompt, match_key, matching_loss

from helpers import random_tokens, small_config


class TestPlan:
    def test_overlap_rejected(self):
        with pytest.raises(ContractError):
            AttachmentPlan(g_layers=(1, 2), e_layers=(2, 3))

    def test_odd_length_rejected(self):
        with pytest.raises(ContractError):
            AttachmentPlan(e_length=3)

    def test_layers_must_exist(self):
        with pytest.raises(ContractError):
            AttachmentPlan(e_layers=(3, 5)).validate(4)


class TestAttach:
    def test_empty_prompt_is_noop_on_logits(self):
        cfg = small_config()
        bb = PretrainedBackbone.initialize(cfg, seed=0)
        rng = np.random.default_rng(0)
        head = ClassifierHead.create(cfg.d_model, cfg.n_classes_total, rng)
        x = random_tokens(rng, 3, cfg)
        empty = {1: T.Tensor(np.zeros((0, cfg.d_model))), 2: T.Tensor(np.zeros((0, cfg.d_model)))}
        assert np.array_equal(bb.forward(x, None, empty, head)[0].data, bb.forward(x, None, None, head)[0].data)

    def test_prefix_lengths(self):
        h = T.Tensor(np.random.default_rng(0).normal(size=(2, 5, 6)))
        p = T.Tensor(np.arange(24.0).reshape(4, 6))
        hq, hk, hv = attach_prompt(h, p)
        assert hq.shape == (2, 5, 6)
        assert hk.shape == hv.shape == (2, 7, 6)
        np.testing.assert_array_equal(hk.data[1, :2], p.data[:2])
        np.testing.assert_array_equal(hv.data[0, :2], p.data[2:])
        np.testing.assert_array_equal(hk.data[:, 2:], h.data)

    def test_extended_attention_rows_sum_to_one(self):
        cfg = small_config()
        bb = PretrainedBackbone.initialize(cfg, seed=0)
        rng = np.random.default_rng(1)
        prompts = {2: T.Tensor(rng.normal(size=(4, cfg.d_model)))}
        _, trace = bb.encode(random_tokens(rng, 2, cfg), None, prompts)
        assert trace.attention[1].shape[-1] == cfg.seq_len + 2
        assert np.max(np.abs(trace.attention[1].sum(-1) - 1)) < 1e-12

    def test_odd_length(self):
        with pytest.raises(ContractError):
            attach_prompt(T.zeros(1, 2, 4), T.zeros(3, 4))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            attach_prompt(T.zeros(1, 2, 4), T.zeros(2, 5))

    def test_prompt_receives_gradient(self):
        cfg = small_config()
        bb = PretrainedBackbone.initialize(cfg, seed=0)
        p = T.Tensor(np.random.default_rng(0).normal(size=(2, cfg.d_model)), requires_grad=True)
        feat, _ = bb.encode(random_tokens(np.random.default_rng(1), 2, cfg), None, {1: p})
        T.tsum(feat * feat).backward()
        assert p.grad is not None and np.any(p.grad != 0)


class TestMatchKey:
    def test_self_match(self):
        q = np.array([1.0, 2.0, 3.0])
        assert match_key(q, [np.array([3.0, 0.0, -1.0]), q]) == 1

    def test_scale_invariance(self):
        q = np.array([1.0, -2.0, 0.5])
        assert match_key(q, [-q, q / 2]) == 1

    def test_ties_lowest_index(self):
        q = np.array([1.0, 0.0])
        assert match_key(q, [np.array([2.0, 0.0]), np.array([1.0, 0.0])]) == 0

    def test_zero_norm_counts_as_orthogonal(self, caplog):
        q = np.array([1.0, 0.0])
        assert match_key(q, [np.zeros(2), np.array([-1.0, 0.1])]) == 0
        assert "zero-norm" in caplog.text

    def test_needs_keys(self):
        with pytest.raises(ContractError):
            match_key(np.ones(2), [])

    def test_perturbation_oracle(self):
        hits = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            keys = rng.normal(size=(3, 16))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            q = keys[1] + 0.01 * rng.normal(size=16)
            hits += match_key(q, list(keys)) == 1
        assert hits / 200 >= 0.99

    @settings(max_examples=50, deadline=None)
    @given(
        q=arrays(np.float64, 4, elements=st.floats(-5, 5)),
        keys=arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
        s1=st.floats(0.1, 10),
        s2=st.floats(0.1, 10),
    )
    def test_positive_rescaling_keeps_argmin(self, q, keys, s1, s2):
        norms = np.linalg.norm(keys, axis=1)
        if np.linalg.norm(q) < 1e-3 or norms.min() < 1e-3:
            return
        cos = keys @ q / (norms * np.linalg.norm(q))
        if np.sort(cos)[-1] - np.sort(cos)[-2] < 1e-9:
            return  # near ties are decided by rounding
        assert match_key(q * s1, list(keys * s2)) == match_key(q, list(keys))


class TestMatchingLoss:
    @pytest.mark.parametrize("key,expected", [([2.0, 0.0], 0.0), ([0.0, 3.0], 1.0), ([-1.0, 0.0], 2.0)])
    def test_reference_cases(self, key, expected):
        loss = matching_loss(np.array([[1.0, 0.0]]), T.Tensor(key))
        assert abs(loss.item() - expected) < 1e-12

    def test_gradient_moves_key_toward_query(self):
        k = T.Tensor([0.0, 1.0], requires_grad=True)
        matching_loss(np.array([[1.0, 0.0]]), k).backward()
        assert k.grad[0] < 0


class TestPool:
    def test_shared_prompt_identity_and_task_prompts(self):
        plan = AttachmentPlan()
        rng = np.random.default_rng(0)
        pool = PromptPool.create(plan, 8, rng)
        g_before = pool.g_tensors()
        a, b = pool.new_task(rng), pool.new_task(rng)
        assert all(x is y for x, y in zip(g_before, pool.g_tensors()))
        assert set(a.e) == set(plan.e_range) and a.e[3].shape == (plan.e_length, 8)
        att = pool.attachments(1)
        assert att[1] is pool.g[1] and att[3] is b.e[3]
        a.freeze()
        assert a.frozen and not a.key.requires_grad
        with pytest.raises(ValueError):
            a.key.data[0] = 1.0
