"""Task identification and prediction at test time.

Two ways to recover the task when it is not given:

* by key: the raw backbone's class-token feature is matched against every
  learned task key by cosine distance, per example;
* by gradient: every finished task's adaptation and E-prompt are blended with
  weights ``alpha`` (uniform at ``1/T``), the mean prediction entropy of a few
  examples is differentiated w.r.t. ``alpha`` and the component with the most
  negative derivative wins, once per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adaptation import mix_adaptations
from .data import TaskData
from .errors import ContractError
from .prompts import match_keys_batch
from .tensor import Tensor

ID_MODES = ("prompt", "gradient", "oracle")
PROMPT_MIXING = ("mixture", "g_only")


@dataclass(frozen=True)
class GradientIdConfig:
    """``shots`` is a positive int or "batch"; ``batch_size`` is the evaluation batch."""

    shots: int | str = "batch"
    prompt_mixing: str = "mixture"
    batch_size: int = 16

    def __post_init__(self):
        if self.shots != "batch" and not (isinstance(self.shots, int) and self.shots >= 1):
            raise ContractError(f"shots must be a positive integer or 'batch', got {self.shots!r}")
        if self.prompt_mixing not in PROMPT_MIXING:
            raise ContractError(f"prompt_mixing must be one of {PROMPT_MIXING}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be ≥ 1")

    @property
    def shot_count(self) -> int | None:
        return None if self.shots == "batch" else self.shots


def _check_frozen(snapshot) -> None:
    if not snapshot.tasks:
        raise ContractError("no trained tasks to infer from")
    bad = [s.task_id for s in snapshot.tasks if not s.frozen]
    if bad:
        raise ContractError(f"task states {bad} are not frozen")


def seen_class_mask(snapshot) -> np.ndarray:
    keep = np.zeros(snapshot.head.n_classes, dtype=bool)
    for st in snapshot.tasks:
        keep[st.class_range[0]:st.class_range[1]] = True
    return keep


def infer_task_prompt_id(snapshot, x: np.ndarray) -> np.ndarray:
    """Per-example task index by nearest key (cosine)."""
    _check_frozen(snapshot)
    q = snapshot.backbone.class_token_feature(x)
    return match_keys_batch(q, [st.prompt.key for st in snapshot.tasks])


def mixture_entropy(snapshot, x: np.ndarray, alpha: Tensor, prompt_mixing: str = "mixture") -> Tensor:
    """Mean Shannon entropy (nats) of the predictions of the ``alpha``-blended network on ``x``.

    Logits cover every class seen so far.
    """
    if prompt_mixing not in PROMPT_MIXING:
        raise ContractError(f"prompt_mixing must be one of {PROMPT_MIXING}")
    adaptation = mix_adaptations([st.adaptation for st in snapshot.tasks], alpha)
    prompts = dict(snapshot.g)
    if prompt_mixing == "mixture":
        for l in snapshot.plan.e_range:
            acc = None
            for t, st in enumerate(snapshot.tasks):
                term = alpha[t] * st.prompt.e[l]
                acc = term if acc is None else acc + term
            prompts[l] = acc
    logits, _ = snapshot.backbone.forward(x, adaptation, prompts, snapshot.head, record=False)
    logp = T.log_softmax(logits[:, np.flatnonzero(seen_class_mask(snapshot))])
    return -T.mean(T.tsum(T.exp(logp) * logp, axis=-1))


def entropy_gradient(snapshot, x: np.ndarray, prompt_mixing: str = "mixture") -> np.ndarray:
    """``dH/dalpha`` at the uniform mixture ``alpha_t = 1/T``."""
    _check_frozen(snapshot)
    n = snapshot.n_tasks
    alpha = Tensor(np.full(n, 1.0 / n), requires_grad=True)
    mixture_entropy(snapshot, x, alpha, prompt_mixing).backward()
    return alpha.grad.copy()


def infer_task_gradient_id(snapshot, x: np.ndarray, shots: int | None = None,
                           prompt_mixing: str = "mixture") -> int:
    """One task index for the whole batch ``x``, using its first ``shots`` examples (all if None)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if len(x) == 0:
        raise ContractError("empty batch")
    if shots is not None:
        if not 1 <= shots <= len(x):
            raise ContractError(f"shots must lie in 1..{len(x)} (batch size), got {shots}")
        x = x[:shots]
    grad = entropy_gradient(snapshot, x, prompt_mixing)
    return int(np.argmin(grad))  # first minimum on ties


def predict(snapshot, x: np.ndarray, id_mode: str = "gradient", shots: int | None = None,
            oracle_task: int | None = None, prompt_mixing: str = "mixture") -> tuple[np.ndarray, np.ndarray]:
    """Labels and inferred task ids for batch ``x``.

    ``oracle`` uses ``oracle_task`` and restricts the argmax to that task's
    classes; the other modes predict over every class seen so far.
    """
    if id_mode not in ID_MODES:
        raise ContractError(f"id_mode must be one of {ID_MODES}, got {id_mode!r}")
    _check_frozen(snapshot)
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if id_mode == "oracle":
        if oracle_task is None or not 0 <= oracle_task < snapshot.n_tasks:
            raise ContractError("oracle mode needs a valid oracle_task")
        tasks = np.full(n, oracle_task)
    elif id_mode == "prompt":
        tasks = infer_task_prompt_id(snapshot, x)
    else:
        tasks = np.full(n, infer_task_gradient_id(snapshot, x, shots, prompt_mixing))

    seen = seen_class_mask(snapshot)
    labels = np.empty(n, dtype=np.int64)
    for t in np.unique(tasks):
        sel = tasks == t
        logits, _ = snapshot.logits(x[sel], int(t))
        z = logits.data.copy()
        if id_mode == "oracle":
            lo, hi = snapshot.tasks[int(t)].class_range
            keep = np.zeros_like(seen)
            keep[lo:hi] = True
        else:
            keep = seen
        z[:, ~keep] = -np.inf
        labels[sel] = z.argmax(axis=-1)
    return labels, tasks


@dataclass
class StageEval:
    accuracy: np.ndarray  # per evaluated task
    task_id_accuracy: np.ndarray


def evaluate_stage(snapshot, tasks: list[TaskData], id_mode: str = "gradient", shots: int | None = None,
                   batch_size: int = 16, prompt_mixing: str = "mixture") -> StageEval:
    """Accuracy on the test split of every task the snapshot has seen.

    Test sets are walked in their stored order in batches of ``batch_size``;
    gradient-based identification decides once per batch (a final batch
    shorter than ``shots`` uses all of its examples).
    """
    acc, tid = [], []
    for data in tasks[: snapshot.n_tasks]:
        correct = hits = 0
        for xb, yb in data.test.batches(batch_size):
            k = None if shots is None else min(shots, len(xb))
            labels, inferred = predict(snapshot, xb, id_mode, k, data.task_id, prompt_mixing)
            correct += int((labels == yb).sum())
            hits += int((inferred == data.task_id).sum())
        acc.append(correct / len(data.test))
        tid.append(hits / len(data.test))
    return StageEval(np.array(acc), np.array(tid))


def evaluate_run(learner, tasks: list[TaskData], id_mode: str = "gradient", shots: int | None = None,
                 batch_size: int = 16, prompt_mixing: str = "mixture") -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangular ``(T, T)`` accuracy matrix ``[stage, task]`` (NaN above the diagonal)
    and the task-identification accuracy at the final stage."""
    n = learner.n_tasks
    mat = np.full((n, n), np.nan)
    final_tid = None
    for stage in range(n):
        res = evaluate_stage(learner.snapshot(stage), tasks, id_mode, shots, batch_size, prompt_mixing)
        mat[stage, : stage + 1] = res.accuracy
        final_tid = res.task_id_accuracy
    return mat, final_tid
