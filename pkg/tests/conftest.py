"""Shared fixtures: a 4-class pretrained backbone and the full 5-task run."""

import time

import pytest

from softtf.backbone import BackboneConfig, pretrain
from softtf.data import TaskSequenceSpec, gen_split_tasks
from softtf.engine import ContinualLearner, TrainConfig
from softtf.prompts import AttachmentPlan


@pytest.fixture(scope="session")
def base4():
    """Backbone pretrained on a 4-class base task, plus its data."""
    spec = TaskSequenceSpec(base_classes=4, n_tasks=3)
    (base_train, base_test), tasks = gen_split_tasks(spec)
    cfg = BackboneConfig(n_classes_total=spec.n_classes_total)
    backbone = pretrain((base_train.x, base_train.y), (base_test.x, base_test.y), cfg, epochs=30)
    return backbone, (base_train, base_test), tasks, spec


class Run:
    """A finished continual-learning run with the hashes taken around it."""

    def __init__(self, spec: TaskSequenceSpec, train_cfg: TrainConfig):
        start = time.perf_counter()
        (base_train, base_test), self.tasks = gen_split_tasks(spec)
        self.spec = spec
        cfg = BackboneConfig(n_classes_total=spec.n_classes_total)
        self.backbone = pretrain((base_train.x, base_train.y), (base_test.x, base_test.y), cfg)
        self.hash_before = self.backbone.content_hash()
        self.learner = ContinualLearner(self.backbone, train_cfg, AttachmentPlan(), spec.n_classes_total)
        self.task_hashes = []  # hash of every finished task after each later stage
        self.train_acc = []
        for data in self.tasks:
            self.train_acc.append(self.learner.train_task(data))
            self.task_hashes.append([st.content_hash() for st in self.learner.tasks])
        self.hash_after = self.backbone.content_hash()
        self.seconds = time.perf_counter() - start  # pretraining included


@pytest.fixture(scope="session")
def cl_run():
    """5 tasks x 2 classes, sigma ratio 10, 200 train / 40 test per class, ones-init soft masks."""
    spec = TaskSequenceSpec(sigma_between=1.0, sigma_within=0.1, train_per_class=200, test_per_class=40)
    return Run(spec, TrainConfig())

