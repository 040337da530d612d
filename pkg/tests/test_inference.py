from dataclasses import replace

import numpy as np
import pytest

from softtf.backbone import BackboneConfig, pretrain
from softtf.data import TaskSequenceSpec, gen_split_tasks
from softtf.engine import ContinualLearner, TrainConfig
from softtf.errors import ContractError
from softtf.inference import (
    GradientIdConfig,
    entropy_gradient,
    evaluate_run,
    evaluate_stage,
    infer_task_gradient_id,
    infer_task_prompt_id,
    mixture_entropy,
    predict,
)
from softtf.prompts import AttachmentPlan
from softtf.tensor import Tensor


@pytest.fixture(scope="module")
def three():
    spec = TaskSequenceSpec(n_tasks=3, seed=0)
    (base_train, base_test), tasks = gen_split_tasks(spec)
    backbone = pretrain((base_train.x, base_train.y), (base_test.x, base_test.y),
                        BackboneConfig(n_classes_total=spec.n_classes_total))
    learner = ContinualLearner(backbone, TrainConfig(), AttachmentPlan(), spec.n_classes_total)
    for data in tasks:
        learner.train_task(data)
    return learner, tasks


class TestSingleTask:
    def test_both_modes_return_zero(self, three):
        learner, tasks = three
        snap = learner.snapshot(0)
        x = tasks[2].test.x[:5]
        assert infer_task_gradient_id(snap, x) == 0
        assert np.all(infer_task_prompt_id(snap, x) == 0)


class TestPromptId:
    def test_training_examples_map_to_their_task(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        for data in tasks:
            rate = np.mean(infer_task_prompt_id(snap, data.train.x) == data.task_id)
            assert rate >= 0.9

    def test_per_example_decision(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        x = tasks[1].test.x[:4]
        ids = infer_task_prompt_id(snap, x)
        doubled = infer_task_prompt_id(snap, np.concatenate([x, x]))
        np.testing.assert_array_equal(doubled, np.concatenate([ids, ids]))


class TestGradientId:
    def test_matches_finite_differences(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        x = tasks[0].test.x[:6]
        analytic = entropy_gradient(snap, x)
        h = 1e-6
        base = np.full(3, 1 / 3)
        for t in range(3):
            up, down = base.copy(), base.copy()
            up[t] += h
            down[t] -= h
            numeric = (mixture_entropy(snap, x, Tensor(up)).item() - mixture_entropy(snap, x, Tensor(down)).item()) / (2 * h)
            assert abs(analytic[t] - numeric) <= 1e-3 * max(abs(numeric), 1e-8)

    def test_identical_tasks_tie_to_zero(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        clone = replace(snap, tasks=[snap.tasks[1]] * 3)
        g = entropy_gradient(clone, tasks[1].test.x[:8])
        assert g[0] == g[1] == g[2]
        assert infer_task_gradient_id(clone, tasks[1].test.x[:8]) == 0

    def test_does_not_mutate_state(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        before = [st.content_hash() for st in snap.tasks], learner.backbone.content_hash()
        infer_task_gradient_id(snap, tasks[2].test.x[:16])
        assert ([st.content_hash() for st in snap.tasks], learner.backbone.content_hash()) == before

    def test_uses_only_first_shots(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        x = tasks[0].test.x[:10].copy()
        y = x.copy()
        y[5:] = tasks[2].test.x[:5]
        assert infer_task_gradient_id(snap, x, shots=5) == infer_task_gradient_id(snap, y, shots=5)

    def test_shots_bounds(self, three):
        learner, tasks = three
        with pytest.raises(ContractError):
            infer_task_gradient_id(learner.snapshot(), tasks[0].test.x[:4], shots=5)
        with pytest.raises(ContractError):
            infer_task_gradient_id(learner.snapshot(), tasks[0].test.x[:4], shots=0)

    def test_rejects_unfrozen_state(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        thawed = replace(snap.tasks[0], frozen=False)
        with pytest.raises(ContractError):
            infer_task_gradient_id(replace(snap, tasks=[thawed] + snap.tasks[1:]), tasks[0].test.x[:4])

    def test_g_only_mixing_runs(self, three):
        learner, tasks = three
        assert 0 <= infer_task_gradient_id(learner.snapshot(), tasks[0].test.x[:8], prompt_mixing="g_only") < 3


class TestPredict:
    def test_oracle_accuracy_is_constant_across_stages(self, three):
        learner, tasks = three
        mat, _ = evaluate_run(learner, tasks, "oracle")
        for t in range(3):
            assert np.all(mat[t:, t] == mat[t, t])

    def test_deterministic(self, three):
        learner, tasks = three
        x = tasks[1].test.x[:16]
        a = predict(learner.snapshot(), x, "gradient")
        b = predict(learner.snapshot(), x, "gradient")
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_gradient_not_worse_than_prompt(self, three):
        learner, tasks = three
        snap = learner.snapshot()
        g = evaluate_stage(snap, tasks, "gradient").accuracy.mean()
        p = evaluate_stage(snap, tasks, "prompt").accuracy.mean()
        assert g >= p - 0.02

    def test_labels_stay_in_seen_classes(self, three):
        learner, tasks = three
        labels, _ = predict(learner.snapshot(1), tasks[2].test.x[:16], "prompt")
        assert labels.max() < 4

    def test_bad_mode(self, three):
        learner, tasks = three
        with pytest.raises(ContractError):
            predict(learner.snapshot(), tasks[0].test.x[:2], "magic")
        with pytest.raises(ContractError):
            predict(learner.snapshot(), tasks[0].test.x[:2], "oracle")


class TestGradientIdConfig:
    def test_valid(self):
        assert GradientIdConfig().shot_count is None
        assert GradientIdConfig(shots=3).shot_count == 3

    @pytest.mark.parametrize("shots", [0, -1, "all", 2.5])
    def test_invalid(self, shots):
        with pytest.raises(ContractError):
            GradientIdConfig(shots=shots)
