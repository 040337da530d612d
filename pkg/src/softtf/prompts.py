"""Shared (G) and per-task (E) prefix prompts, task keys, and key matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttachmentPlan:
    """Which layers (1-based, inclusive ranges) receive the G- and E-prompts."""

    g_layers: tuple[int, int] = (1, 2)
    e_layers: tuple[int, int] = (3, 4)
    g_length: int = 4
    e_length: int = 4
    mode: str = "prefix"

    def __post_init__(self):
        object.__setattr__(self, "g_layers", tuple(self.g_layers))
        object.__setattr__(self, "e_layers", tuple(self.e_layers))
        if self.mode != "prefix":
            raise ContractError(f"unsupported attachment mode {self.mode!r}")
        if set(self.g_range) & set(self.e_range):
            raise ContractError(f"G layers {self.g_layers} overlap E layers {self.e_layers}")
        for name, n in (("g_length", self.g_length), ("e_length", self.e_length)):
            if n < 0 or n % 2:
                raise ContractError(f"{name}={n}: prefix prompts need an even, non-negative length")

    @property
    def g_range(self) -> range:
        return range(self.g_layers[0], self.g_layers[1] + 1)

    @property
    def e_range(self) -> range:
        return range(self.e_layers[0], self.e_layers[1] + 1)

    def validate(self, n_layers: int) -> None:
        for layer in (*self.g_range, *self.e_range):
            if not 1 <= layer <= n_layers:
                raise ContractError(f"prompt layer {layer} outside 1..{n_layers}")


def attach_prompt(h: Tensor, p: Tensor | None) -> tuple[Tensor, Tensor, Tensor]:
    """Prefix-tune one attention layer.

    ``h`` is the (batch, L, D) layer input and ``p`` an (L_p, D) prompt.  The
    first half of ``p`` is prepended to the key input and the second half to the
    value input; the query input is returned unchanged.
    """
    if p is None or p.shape[0] == 0:
        return h, h, h
    if p.ndim != 2 or p.shape[1] != h.shape[-1]:
        raise ShapeError(f"prompt shape {p.shape} incompatible with hidden width {h.shape[-1]}")
    if p.shape[0] % 2:
        raise ContractError(f"prefix prompt length {p.shape[0]} is odd")
    half = p.shape[0] // 2
    batch = h.shape[0]
    pk = T.broadcast_to(p[:half], (batch, half, p.shape[1]))
    pv = T.broadcast_to(p[half:], (batch, half, p.shape[1]))
    return h, T.concat([pk, h], axis=1), T.concat([pv, h], axis=1)


def cosine_distance(a, b, eps: float = 0.0) -> Tensor:
    """``1 - cos(a, b)`` along the last axis (differentiable).

    ``eps`` is added to the squared norms so zero vectors stay finite.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    dot = (a * b).sum(axis=-1)
    na = T.sqrt((a * a).sum(axis=-1) + eps * eps)
    nb = T.sqrt((b * b).sum(axis=-1) + eps * eps)
    return 1.0 - dot / (na * nb)


def _cosine_distance_np(q: np.ndarray, k: np.ndarray) -> float:
    nq, nk = np.linalg.norm(q), np.linalg.norm(k)
    if nq == 0.0 or nk == 0.0:
        log.warning("zero-norm vector in key matching; distance set to 1")
        return 1.0
    return 1.0 - float(q @ k) / (nq * nk)


def match_key(q_feat: np.ndarray, keys) -> int:
    """Index of the key with the smallest cosine distance to ``q_feat``; ties go to the lowest index."""
    keys = [np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64) for k in keys]
    if not keys:
        raise ContractError("match_key needs at least one key")
    q = np.asarray(q_feat.data if isinstance(q_feat, Tensor) else q_feat, dtype=np.float64)
    dists = [_cosine_distance_np(q, k) for k in keys]
    return int(np.argmin(dists))


def match_keys_batch(q_feats: np.ndarray, keys) -> np.ndarray:
    return np.array([match_key(q, keys) for q in np.atleast_2d(q_feats)], dtype=np.int64)


def matching_loss(q_feat, k_t: Tensor) -> Tensor:
    """Mean cosine distance between query features (batch, D) and one task key (D,)."""
    q = T.as_tensor(q_feat)
    return T.mean(cosine_distance(q, k_t, eps=1e-12))


@dataclass
class TaskPrompt:
    """E-prompt tensors for one task, keyed by layer, and the task key."""

    e: dict[int, Tensor]
    key: Tensor
    frozen: bool = False

    def tensors(self) -> list[Tensor]:
        return [self.e[l] for l in sorted(self.e)] + [self.key]

    def freeze(self) -> None:
        for t in self.tensors():
            T.freeze(t)
        self.frozen = True


@dataclass
class PromptPool:
    """One shared G-prompt plus the list of per-task (E-prompt, key) pairs."""

    plan: AttachmentPlan
    d_model: int
    g: dict[int, Tensor] = field(default_factory=dict)
    tasks: list[TaskPrompt] = field(default_factory=list)

    @classmethod
    def create(cls, plan: AttachmentPlan, d_model: int, rng: np.random.Generator, init_scale: float = 0.1):
        g = {
            l: Tensor(rng.uniform(-init_scale, init_scale, (plan.g_length, d_model)), requires_grad=True)
            for l in plan.g_range
        }
        return cls(plan=plan, d_model=d_model, g=g)

    def new_task(self, rng: np.random.Generator, init_scale: float = 0.1) -> TaskPrompt:
        plan = self.plan
        e = {
            l: Tensor(rng.uniform(-init_scale, init_scale, (plan.e_length, self.d_model)), requires_grad=True)
            for l in plan.e_range
        }
        key = Tensor(rng.uniform(-init_scale, init_scale, self.d_model), requires_grad=True)
        tp = TaskPrompt(e=e, key=key)
        self.tasks.append(tp)
        return tp

    def g_tensors(self) -> list[Tensor]:
        return [self.g[l] for l in sorted(self.g)]

    def attachments(self, task: int | None) -> dict[int, Tensor]:
        """Layer → prompt map for a forward pass using task ``task``'s E-prompt."""
        out = dict(self.g)
        if task is not None:
            out.update(self.tasks[task].e)
        return out

    def keys(self) -> list[np.ndarray]:
        return [tp.key.data for tp in self.tasks]

