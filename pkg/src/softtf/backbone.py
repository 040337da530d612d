"""A small ViT-style encoder whose projection matrices can be soft-masked.

Layers are numbered from 1.  Each block is pre-LN multi-head self attention
followed by a pre-LN GELU feed-forward network, both with residuals.  The
attention and FF weight matrices are routed through an optional *adaptation*
object (soft masks, WSN masks, LoRA, adapters) and attention layers can take a
prefix prompt.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from . import tensor as T
from .errors import ContractError, PretrainError, ShapeError
from .optim import Adam
from .prompts import attach_prompt
from .tensor import Tensor

log = logging.getLogger(__name__)

TARGETS = ("Q", "K", "V", "O", "FC1", "FC2")
_WEIGHT_NAME = {"Q": "wq", "K": "wk", "V": "wv", "O": "wo", "FC1": "w1", "FC2": "w2"}


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    seq_len: int = 9
    n_classes_total: int = 10
    input_dim: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ContractError(f"BackboneConfig.{name} must be ≥ 1, got {value}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seq_len < 2:
            raise ContractError("seq_len counts the class token and needs at least one feature token")

    @property
    def n_tokens(self) -> int:
        """Number of feature tokens (sequence length without the class token)."""
        return self.seq_len - 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def weight_shape(self, target: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"Q": (d, d), "K": (d, d), "V": (d, d), "O": (d, d), "FC1": (d, f), "FC2": (f, d)}[target]


class Adaptation(Protocol):
    def weight(self, layer: int, target: str, w: Tensor) -> Tensor: ...

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor: ...


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d_model: int, n_classes: int, rng: np.random.Generator, trainable: bool = True):
        bound = 1.0 / math.sqrt(d_model)
        return cls(
            Tensor(rng.uniform(-bound, bound, (d_model, n_classes)), requires_grad=trainable),
            Tensor(np.zeros(n_classes), requires_grad=trainable),
        )

    def __call__(self, features: Tensor) -> Tensor:
        return features @ self.weight + self.bias

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def copy(self) -> ClassifierHead:
        return ClassifierHead(Tensor(self.weight.data), Tensor(self.bias.data))


@dataclass
class ForwardTrace:
    attention: list[np.ndarray] = field(default_factory=list)  # per layer: (B, heads, Lq, Lk)
    cls_feature: np.ndarray | None = None  # (B, D)


def _xavier(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, shape)


class PretrainedBackbone:
    """Holds θ.  Until :meth:`freeze` is called the tensors are trainable."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor], head_stub: ClassifierHead | None = None):
        self.config = config
        self.params = params
        self.head_stub = head_stub
        self.frozen = False
        self.pretrain_accuracy: float | None = None

    @classmethod
    def initialize(cls, config: BackboneConfig, seed: int = 0) -> PretrainedBackbone:
        rng = np.random.default_rng(seed)
        d = config.d_model
        p: dict[str, Tensor] = {
            "embed.w": _xavier(rng, (config.input_dim, d)),
            "embed.b": np.zeros(d),
            "cls": rng.normal(0.0, 0.02, d),
            "pos": rng.normal(0.0, 0.02, (config.seq_len, d)),
            "final_ln.g": np.ones(d),
            "final_ln.b": np.zeros(d),
        }
        for l in range(1, config.n_layers + 1):
            for target in TARGETS:
                p[f"layer{l}.{_WEIGHT_NAME[target]}"] = _xavier(rng, config.weight_shape(target))
            for b, n in (("bq", d), ("bk", d), ("bv", d), ("bo", d), ("b1", config.d_ff), ("b2", d)):
                p[f"layer{l}.{b}"] = np.zeros(n)
            for ln in ("ln1", "ln2"):
                p[f"layer{l}.{ln}.g"] = np.ones(d)
                p[f"layer{l}.{ln}.b"] = np.zeros(d)
        params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        return cls(config, params)

    # ------------------------------------------------------------------
    def weight(self, layer: int, target: str) -> Tensor:
        return self.params[f"layer{layer}.{_WEIGHT_NAME[target]}"]

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for t in self.params.values():
            T.freeze(t)
        if self.head_stub is not None:
            for t in self.head_stub.tensors():
                T.freeze(t)
        self.frozen = True

    # ------------------------------------------------------------------
    def encode(self, x, adaptation: Adaptation | None = None, prompts: dict[int, Tensor] | None = None,
               record: bool = True) -> tuple[Tensor, ForwardTrace]:
        """Class-token feature f(x)[0] for a batch (B, n_tokens, input_dim)."""
        cfg = self.config
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (cfg.n_tokens, cfg.input_dim):
            raise ShapeError(f"input shape {x.shape[1:]} != ({cfg.n_tokens}, {cfg.input_dim})")
        p = self.params
        batch = x.shape[0]
        trace = ForwardTrace()
        h = x @ p["embed.w"] + p["embed.b"]
        cls_tok = T.broadcast_to(T.reshape(p["cls"], (1, 1, cfg.d_model)), (batch, 1, cfg.d_model))
        h = T.concat([cls_tok, h], axis=1) + p["pos"]
        prompts = prompts or {}
        for l in range(1, cfg.n_layers + 1):
            h = h + self._attention(l, T.layer_norm(h, p[f"layer{l}.ln1.g"], p[f"layer{l}.ln1.b"]),
                                    adaptation, prompts.get(l), trace if record else None)
            h = h + self._feed_forward(l, T.layer_norm(h, p[f"layer{l}.ln2.g"], p[f"layer{l}.ln2.b"]), adaptation)
        h = T.layer_norm(h, p["final_ln.g"], p["final_ln.b"])
        feat = h[:, 0, :]
        trace.cls_feature = feat.data
        return feat, trace

    def forward(self, x, adaptation: Adaptation | None = None, prompts: dict[int, Tensor] | None = None,
                head: ClassifierHead | None = None, record: bool = True) -> tuple[Tensor, ForwardTrace]:
        head = head if head is not None else self.head_stub
        if head is None:
            raise ContractError("forward() needs a classifier head")
        feat, trace = self.encode(x, adaptation, prompts, record)
        return head(feat), trace

    def class_token_feature(self, x) -> np.ndarray:
        """f(x)[0] of the raw backbone: no masks, no prompts."""
        single = np.ndim(x.data if isinstance(x, Tensor) else x) == 2
        feat, _ = self.encode(x, record=False)
        return feat.data[0] if single else feat.data

    # ------------------------------------------------------------------
    def _w(self, layer: int, target: str, adaptation: Adaptation | None) -> Tensor:
        w = self.weight(layer, target)
        if adaptation is None:
            return w
        out = adaptation.weight(layer, target, w)
        if out.shape != w.shape:
            raise ContractError(f"adapted layer{layer}.{target} has shape {out.shape}, expected {w.shape}")
        return out

    def _attention(self, l: int, h: Tensor, adaptation, prompt: Tensor | None, trace: ForwardTrace | None) -> Tensor:
        cfg = self.config
        p = self.params
        s, dh = cfg.n_heads, cfg.head_dim
        hq, hk, hv = attach_prompt(h, prompt)
        batch, lq = hq.shape[0], hq.shape[1]
        lk = hk.shape[1]
        q = hq @ self._w(l, "Q", adaptation) + p[f"layer{l}.bq"]
        k = hk @ self._w(l, "K", adaptation) + p[f"layer{l}.bk"]
        v = hv @ self._w(l, "V", adaptation) + p[f"layer{l}.bv"]
        q = T.transpose(T.reshape(q, (batch, lq, s, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (batch, lk, s, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (batch, lk, s, dh)), (0, 2, 1, 3))
        att = T.softmax(q @ k.T * (1.0 / math.sqrt(dh)), axis=-1)
        if trace is not None:
            trace.attention.append(att.data)
        out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (batch, lq, cfg.d_model))
        out = out @ self._w(l, "O", adaptation) + p[f"layer{l}.bo"]
        if adaptation is not None:
            out = adaptation.residual(l, "attn", out)
        return out

    def _feed_forward(self, l: int, h: Tensor, adaptation) -> Tensor:
        p = self.params
        z = T.gelu(h @ self._w(l, "FC1", adaptation) + p[f"layer{l}.b1"])
        out = z @ self._w(l, "FC2", adaptation) + p[f"layer{l}.b2"]
        if adaptation is not None:
            out = adaptation.residual(l, "ff", out)
        return out


def pretrain(
    base_train,
    base_test,
    config: BackboneConfig,
    epochs: int = 30,
    lr: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
    threshold: float = 0.95,
) -> PretrainedBackbone:
    """Train every θ tensor plus a stub head on the base classes, then freeze.

    ``base_train``/``base_test`` are ``(x, y)`` pairs.  Raises
    :class:`PretrainError` (carrying the frozen backbone) if held-out accuracy
    ends below ``threshold``.
    """
    x_tr, y_tr = base_train
    x_te, y_te = base_test
    n_base = int(max(y_tr.max(), y_te.max())) + 1
    if y_tr.min() < 0 or y_te.min() < 0:
        raise ContractError("base labels must be non-negative")
    backbone = PretrainedBackbone.initialize(config, seed)
    rng = np.random.default_rng(seed + 1)
    backbone.head_stub = ClassifierHead.create(config.d_model, n_base, rng)
    params = backbone.tensors() + backbone.head_stub.tensors()
    opt = Adam(params, lr=lr)
    n = len(y_tr)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, _ = backbone.forward(x_tr[idx], record=False)
            loss = T.cross_entropy(logits, y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.debug("pretrain epoch %d loss %.4f", epoch + 1, float(np.mean(losses)))
    backbone.freeze()
    acc = accuracy(backbone, x_te, y_te)
    backbone.pretrain_accuracy = acc
    if acc < threshold:
        raise PretrainError(f"pretraining reached {acc:.4f} < threshold {threshold}", acc, backbone)
    return backbone


def accuracy(backbone: PretrainedBackbone, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(y), batch_size):
        logits, _ = backbone.forward(x[start:start + batch_size], record=False)
        correct += int((logits.data.argmax(axis=-1) == y[start:start + batch_size]).sum())
    return correct / len(y)
