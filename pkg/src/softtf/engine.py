"""Sequential task training over a frozen backbone.

For task ``t`` a fresh :class:`TaskState` (adaptation parameters, E-prompt and
key) is created and trained jointly with the shared G-prompt and classifier head
on cross-entropy plus ``λ`` times the key-matching loss.  When training ends the
task state is frozen and a copy of the shared state is kept as a stage snapshot
so any earlier stage can be re-evaluated later.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adaptation import AdaptationSpec, MaskInitScheme, create_adaptation
from .backbone import ClassifierHead, PretrainedBackbone
from .data import TaskData
from .errors import ContractError, TrainingDiverged
from .optim import Adam
from .prompts import AttachmentPlan, PromptPool, TaskPrompt, matching_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

SHARED_PROMPT_POLICIES = ("first_task", "all_tasks")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-2
    eps: float = 1e-8
    mechanism: str = "soft_tf"
    targets: tuple[str, ...] = ("Q", "K", "V", "O")
    mask_init: MaskInitScheme = MaskInitScheme()
    logit_masking: bool = True
    # "first_task": G-prompt trains on task 1 only, then stays fixed so that finished
    # tasks keep producing identical outputs; "all_tasks": keeps training it throughout
    shared_prompt_policy: str = "first_task"
    rank: int = 4
    fused_qkv: bool = False
    wsn_c: float = 90.0
    prompt_init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.lam < 0:
            raise ContractError(f"λ must be ≥ 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be ≥ 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.shared_prompt_policy not in SHARED_PROMPT_POLICIES:
            raise ContractError(f"shared_prompt_policy must be one of {SHARED_PROMPT_POLICIES}")

    def adaptation_spec(self, plan: AttachmentPlan) -> AdaptationSpec:
        return AdaptationSpec(
            mechanism=self.mechanism,
            layers=plan.e_layers,
            targets=self.targets,
            rank=self.rank,
            fused_qkv=self.fused_qkv,
            wsn_c=self.wsn_c,
            mask_init=self.mask_init,
        )


@dataclass
class TaskState:
    task_id: int
    class_range: tuple[int, int]
    adaptation: object | None
    prompt: TaskPrompt
    frozen: bool = False

    def named_tensors(self) -> dict[str, Tensor]:
        out = {} if self.adaptation is None else dict(self.adaptation.named_tensors())
        for l, e in sorted(self.prompt.e.items()):
            out[f"eprompt.L{l}"] = e
        out["key"] = self.prompt.key
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256(repr(self.class_range).encode())
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        if self.adaptation is not None:
            self.adaptation.freeze()
        self.prompt.freeze()
        self.frozen = True


@dataclass
class SharedSnapshot:
    """Head and G-prompt as they stood when a stage finished."""

    head: ClassifierHead
    g: dict[int, Tensor]


@dataclass
class EpochRecord:
    task: int
    epoch: int
    loss: float
    accuracy: float


@dataclass
class StepInfo:
    task: int
    epoch: int
    step: int
    loss: float
    state: TaskState


@dataclass
class Snapshot:
    """Read-only view of everything needed to evaluate after a given stage."""

    backbone: PretrainedBackbone
    head: ClassifierHead
    g: dict[int, Tensor]
    tasks: list[TaskState]
    plan: AttachmentPlan

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def prompts(self, task: int | None) -> dict[int, Tensor]:
        out = dict(self.g)
        if task is not None:
            out.update(self.tasks[task].prompt.e)
        return out

    def logits(self, x, task: int, record: bool = False):
        st = self.tasks[task]
        return self.backbone.forward(x, st.adaptation, self.prompts(task), self.head, record=record)


def logit_mask(logits, class_range: tuple[int, int]) -> Tensor:
    """Set logits outside ``[lo, hi)`` to -inf (no gradient flows to them)."""
    logits = T.as_tensor(logits)
    lo, hi = class_range
    n = logits.shape[-1]
    if hi <= lo:
        raise ContractError(f"empty class range [{lo}, {hi})")
    if lo < 0 or hi > n:
        raise ContractError(f"class range [{lo}, {hi}) outside the {n}-class label space")
    keep = np.zeros(n, dtype=bool)
    keep[lo:hi] = True
    return T.masked_fill(logits, keep, -np.inf)


def total_loss(logits, y: np.ndarray, q_feat, k_t: Tensor | None, lam: float,
               class_range: tuple[int, int] | None = None) -> Tensor:
    """Cross-entropy over (optionally range-masked) logits plus ``lam`` · key-matching loss."""
    logits = T.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    n = logits.shape[-1]
    if y.min() < 0 or y.max() >= n:
        raise ContractError(f"labels outside the {n}-class label space")
    if class_range is not None:
        if y.min() < class_range[0] or y.max() >= class_range[1]:
            raise ContractError(f"labels outside task class range {class_range}")
        logits = logit_mask(logits, class_range)
    loss = T.cross_entropy(logits, y)
    if lam > 0 and k_t is not None:
        loss = loss + lam * matching_loss(q_feat, k_t)
    return loss


def _snap(t: Tensor) -> None:
    t.data = t.data.astype(np.float32).astype(np.float64)


class ContinualLearner:
    def __init__(self, backbone: PretrainedBackbone, config: TrainConfig, plan: AttachmentPlan,
                 n_classes_total: int):
        if not backbone.frozen:
            raise ContractError("the backbone must be frozen before continual training")
        plan.validate(backbone.config.n_layers)
        self.backbone = backbone
        self.config = config
        self.plan = plan
        self.n_classes_total = n_classes_total
        self.adaptation_spec = config.adaptation_spec(plan)
        rng = np.random.default_rng([config.seed, 0])
        self.head = ClassifierHead.create(backbone.config.d_model, n_classes_total, rng)
        self.pool = PromptPool.create(plan, backbone.config.d_model, rng, config.prompt_init_scale)
        for t in self.head.tensors() + self.pool.g_tensors():
            _snap(t)
        self.tasks: list[TaskState] = []
        self.stages: list[SharedSnapshot] = []
        self.history: list[EpochRecord] = []
        self.eval_matrices: dict[str, np.ndarray] = {}

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def snapshot(self, stage: int | None = None) -> Snapshot:
        stage = self.n_tasks - 1 if stage is None else stage
        if not 0 <= stage < len(self.stages):
            raise ContractError(f"no finished stage {stage}")
        shared = self.stages[stage]
        return Snapshot(self.backbone, shared.head, shared.g, self.tasks[: stage + 1], self.plan)

    def _g_trainable(self, t: int) -> bool:
        return self.config.shared_prompt_policy == "all_tasks" or t == 0

    def train_task(self, data: TaskData, callback: Callable[[StepInfo], None] | None = None) -> float:
        """Train task ``data.task_id`` (must be the next one); returns final training accuracy."""
        cfg = self.config
        t = self.n_tasks
        if data.task_id != t:
            raise ContractError(f"expected task {t}, got {data.task_id}")
        if not self.backbone.frozen or any(not s.frozen for s in self.tasks):
            raise ContractError("backbone and all earlier tasks must be frozen")
        lo, hi = data.class_range
        if hi > self.n_classes_total:
            raise ContractError(f"class range {data.class_range} exceeds the head's {self.n_classes_total} classes")

        rng = np.random.default_rng([cfg.seed, t + 1])
        adaptation = create_adaptation(self.adaptation_spec, self.backbone.config, rng)
        prompt = self.pool.new_task(rng, cfg.prompt_init_scale)
        state = TaskState(t, (lo, hi), adaptation, prompt)
        self.tasks.append(state)

        params = list(self.head.tensors()) + prompt.tensors()
        if adaptation is not None:
            params += adaptation.tensors()
        if self._g_trainable(t):
            for g in self.pool.g_tensors():
                g.requires_grad = True
            params += self.pool.g_tensors()
        opt = Adam(params, lr=cfg.lr, eps=cfg.eps)

        x, y = data.train.x, data.train.y
        q_all = self.backbone.class_token_feature(x)
        class_range = (lo, hi) if cfg.logit_masking else None
        attach = self.pool.attachments(t)
        n = len(y)
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses, correct = [], 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                logits, _ = self.backbone.forward(x[idx], adaptation, attach, self.head, record=False)
                loss = total_loss(logits, y[idx], q_all[idx], prompt.key, cfg.lam, class_range)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"task {t} epoch {epoch + 1} step {step}: loss={value}; lower lr (now {cfg.lr})"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                losses.append(value)
                correct += int((self._predict_train(logits.data, class_range) == y[idx]).sum())
                if callback is not None:
                    callback(StepInfo(t, epoch, step, value, state))
            rec = EpochRecord(t, epoch + 1, float(np.mean(losses)), correct / n)
            self.history.append(rec)
            log.info("task %d epoch %d loss %.4f acc %.4f", t, rec.epoch, rec.loss, rec.accuracy)

        state.freeze()
        for h in self.head.tensors():
            _snap(h)
        if self._g_trainable(t):
            for g in self.pool.g_tensors():
                _snap(g)
                g.requires_grad = False
        self.stages.append(SharedSnapshot(self.head.copy(), {l: Tensor(g.data) for l, g in self.pool.g.items()}))
        return self._train_accuracy(state, x, y, class_range)

    @staticmethod
    def _predict_train(logits: np.ndarray, class_range) -> np.ndarray:
        if class_range is None:
            return logits.argmax(axis=-1)
        lo, hi = class_range
        return lo + logits[:, lo:hi].argmax(axis=-1)

    def _train_accuracy(self, state: TaskState, x, y, class_range, batch_size: int = 256) -> float:
        snap = self.snapshot()
        correct = 0
        for start in range(0, len(y), batch_size):
            logits, _ = snap.logits(x[start:start + batch_size], state.task_id)
            correct += int((self._predict_train(logits.data, class_range) == y[start:start + batch_size]).sum())
        return correct / len(y)
