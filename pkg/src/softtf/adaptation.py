"""Per-task parameter-efficient adaptation of the frozen backbone.

Four mechanisms share one duck-typed interface used by
:meth:`PretrainedBackbone.encode`:

* ``weight(layer, target, w)`` returns the effective projection matrix, and
* ``residual(layer, site, h)`` post-processes a sublayer output.

``MaskSet`` (soft masks), ``WsnMaskSet`` (binary top-c% masks learned through
scores), ``LoraSet`` and ``AdapterSet``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import TARGETS, BackboneConfig
from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

MECHANISMS = ("soft_tf", "wsn", "lora", "adapter", "prompt_only")
ADAPTER_SITES = ("attn", "ff")


def expand_targets(targets) -> tuple[str, ...]:
    out: list[str] = []
    for t in targets:
        names = ("Q", "K", "V") if t == "QKV" else (t,)
        for n in names:
            if n not in TARGETS:
                raise ContractError(f"unknown target matrix {n!r}; expected one of {TARGETS}")
            if n not in out:
                out.append(n)
    return tuple(out)


@dataclass(frozen=True)
class MaskInitScheme:
    kind: str = "uniform_ones"  # uniform_ones | xavier | kaiming | normal
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform_ones", "xavier", "kaiming", "normal"):
            raise ContractError(f"unknown mask init scheme {self.kind!r}")
        if self.std < 0:
            raise ContractError(f"Normal mask init needs σ ≥ 0, got {self.std}")

    def sample(self, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform_ones":
            return np.ones(shape)
        if self.kind == "xavier":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-bound, bound, shape)
        if self.kind == "kaiming":
            return rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        return rng.normal(self.mean, self.std, shape)


@dataclass(frozen=True)
class AdaptationSpec:
    """Which per-task parameters a mechanism creates.

    ``layers`` is a 1-based inclusive range.  ``fused_qkv`` only changes LoRA,
    where Q, K and V then share one factorisation of the concatenated D×3D matrix.
    """

    mechanism: str = "soft_tf"
    layers: tuple[int, int] = (3, 4)
    targets: tuple[str, ...] = ("Q", "K", "V", "O")
    rank: int = 4
    fused_qkv: bool = False
    wsn_c: float = 90.0
    mask_init: MaskInitScheme = MaskInitScheme()
    adapter_sites: tuple[str, ...] = ADAPTER_SITES

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "targets", expand_targets(self.targets))
        object.__setattr__(self, "adapter_sites", tuple(self.adapter_sites))
        if self.mechanism not in MECHANISMS:
            raise ContractError(f"unknown mechanism {self.mechanism!r}")
        if self.rank < 1:
            raise ContractError("rank must be ≥ 1")
        if not 0.0 <= self.wsn_c <= 100.0:
            raise ContractError(f"WSN c must lie in [0, 100], got {self.wsn_c}")
        for s in self.adapter_sites:
            if s not in ADAPTER_SITES:
                raise ContractError(f"unknown adapter site {s!r}")

    @property
    def layer_range(self) -> range:
        return range(self.layers[0], self.layers[1] + 1)


# ---------------------------------------------------------------------------
# soft masks
# ---------------------------------------------------------------------------

def apply_mask(w, m) -> Tensor:
    """Elementwise ``w ⊙ m``; the frozen ``w`` receives no gradient."""
    w, m = T.as_tensor(w), T.as_tensor(m)
    if w.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} != weight shape {w.shape}")
    return w * m


@dataclass
class MaskSet:
    masks: dict[tuple[int, str], Tensor] = field(default_factory=dict)
    frozen: bool = False

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        m = self.masks.get((layer, target))
        return w if m is None else apply_mask(w, m)

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"mask.L{l}.{t}": m for (l, t), m in sorted(self.masks.items())}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def freeze(self) -> None:
        for m in self.masks.values():
            T.freeze(m)
        self.frozen = True

    def effective_masks(self) -> dict[tuple[int, str], np.ndarray]:
        return {k: m.data for k, m in self.masks.items()}

    @staticmethod
    def mix(members: list[MaskSet], alpha: Tensor) -> MaskSet:
        return MaskSet(_mix_arrays([{k: m for k, m in s.masks.items()} for s in members], alpha))


def _mix_arrays(dicts: list[dict], alpha: Tensor) -> dict:
    out = {}
    for key in dicts[0]:
        acc = None
        for t, d in enumerate(dicts):
            term = alpha[t] * d[key]
            acc = term if acc is None else acc + term
        out[key] = acc
    return out


def init_mask(scheme: MaskInitScheme, shapes: dict[tuple[int, str], tuple[int, int]],
              rng: np.random.Generator | None = None) -> MaskSet:
    rng = rng if rng is not None else np.random.default_rng(0)
    return MaskSet({k: Tensor(scheme.sample(s, rng), requires_grad=True) for k, s in shapes.items()})


# ---------------------------------------------------------------------------
# WSN binary masks
# ---------------------------------------------------------------------------

def wsn_keep_count(c: float, numel: int) -> int:
    """round(c/100 · numel), halves rounded up."""
    return int(math.floor(c * numel / 100.0 + 0.5))


def wsn_binarize(scores: np.ndarray, c: float) -> np.ndarray:
    """Keep the top ``c``% of entries by |score|; ties go to the lowest flat index."""
    if not 0.0 <= c <= 100.0:
        raise ContractError(f"c must lie in [0, 100], got {c}")
    flat = np.abs(np.asarray(scores, dtype=np.float64)).reshape(-1)
    k = wsn_keep_count(c, flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size)
    mask[order[:k]] = 1.0
    return mask.reshape(np.shape(scores))


@dataclass
class WsnMaskSet:
    scores: dict[tuple[int, str], Tensor]
    c: float
    frozen: bool = False

    def binary(self, key) -> np.ndarray:
        return wsn_binarize(self.scores[key].data, self.c)

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        key = (layer, target)
        if key not in self.scores:
            return w
        s = self.scores[key]
        return apply_mask(w, T.straight_through(s, wsn_binarize(s.data, self.c)))

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"wsn.L{l}.{t}": s for (l, t), s in sorted(self.scores.items())}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def freeze(self) -> None:
        for s in self.scores.values():
            T.freeze(s)
        self.frozen = True

    def effective_masks(self) -> dict[tuple[int, str], np.ndarray]:
        return {k: self.binary(k) for k in self.scores}

    @staticmethod
    def mix(members: list[WsnMaskSet], alpha: Tensor) -> MaskSet:
        dicts = [{k: Tensor(s.binary(k)) for k in s.scores} for s in members]
        return MaskSet(_mix_arrays(dicts, alpha))


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def lora_forward(x, w, A, B) -> Tensor:
    """``x (w + A B)``."""
    w, A, B = T.as_tensor(w), T.as_tensor(A), T.as_tensor(B)
    r = A.shape[1]
    if A.shape[0] != w.shape[0] or B.shape != (r, w.shape[1]):
        raise ShapeError(f"LoRA factors {A.shape}, {B.shape} do not fit weight {w.shape}")
    if r > min(w.shape):
        raise ContractError(f"LoRA rank {r} exceeds weight dims {w.shape}")
    return T.as_tensor(x) @ (w + A @ B)


_QKV_COLUMN = {"Q": 0, "K": 1, "V": 2}


@dataclass
class LoraSet:
    factors: dict[tuple[int, str], tuple[Tensor, Tensor]]
    fused_qkv: bool = False
    frozen: bool = False

    def delta(self, layer: int, target: str) -> Tensor | None:
        if self.fused_qkv and target in _QKV_COLUMN:
            pair = self.factors.get((layer, "QKV"))
            if pair is None:
                return None
            A, B = pair
            d = B.shape[1] // 3
            col = _QKV_COLUMN[target]
            return (A @ B)[:, col * d:(col + 1) * d]
        pair = self.factors.get((layer, target))
        if pair is None:
            return None
        return pair[0] @ pair[1]

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        d = self.delta(layer, target)
        return w if d is None else w + d

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (l, t), (A, B) in sorted(self.factors.items()):
            out[f"lora.L{l}.{t}.A"] = A
            out[f"lora.L{l}.{t}.B"] = B
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def freeze(self) -> None:
        for t in self.tensors():
            T.freeze(t)
        self.frozen = True

    @staticmethod
    def mix(members: list[LoraSet], alpha: Tensor):
        return _WeightedDeltas(members, alpha)


@dataclass
class _WeightedDeltas:
    members: list[LoraSet]
    alpha: Tensor

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        out = w
        for t, m in enumerate(self.members):
            d = m.delta(layer, target)
            if d is not None:
                out = out + self.alpha[t] * d
        return out

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

def adapter_forward(h, down, up, down_bias=None, up_bias=None) -> Tensor:
    """Residual bottleneck ``h + up(gelu(down(h)))``."""
    h = T.as_tensor(h)
    z = h @ down
    if down_bias is not None:
        z = z + down_bias
    z = T.gelu(z) @ up
    if up_bias is not None:
        z = z + up_bias
    return h + z


@dataclass
class AdapterSet:
    modules: dict[tuple[int, str], tuple[Tensor, Tensor, Tensor, Tensor]]  # down, down_b, up, up_b
    frozen: bool = False

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        return w

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        mod = self.modules.get((layer, site))
        if mod is None:
            return h
        down, down_b, up, up_b = mod
        return adapter_forward(h, down, up, down_b, up_b)

    def branch(self, layer: int, site: str, h: Tensor) -> Tensor | None:
        mod = self.modules.get((layer, site))
        if mod is None:
            return None
        down, down_b, up, up_b = mod
        return T.gelu(h @ down + down_b) @ up + up_b

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (l, s), (d, db, u, ub) in sorted(self.modules.items()):
            out.update({f"adapter.L{l}.{s}.down": d, f"adapter.L{l}.{s}.down_b": db,
                        f"adapter.L{l}.{s}.up": u, f"adapter.L{l}.{s}.up_b": ub})
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def freeze(self) -> None:
        for t in self.tensors():
            T.freeze(t)
        self.frozen = True

    @staticmethod
    def mix(members: list[AdapterSet], alpha: Tensor):
        return _WeightedBranches(members, alpha)


@dataclass
class _WeightedBranches:
    members: list[AdapterSet]
    alpha: Tensor

    def weight(self, layer: int, target: str, w: Tensor) -> Tensor:
        return w

    def residual(self, layer: int, site: str, h: Tensor) -> Tensor:
        out = h
        for t, m in enumerate(self.members):
            b = m.branch(layer, site, h)
            if b is not None:
                out = out + self.alpha[t] * b
        return out


# ---------------------------------------------------------------------------
# construction and accounting
# ---------------------------------------------------------------------------

def _layers(spec: AdaptationSpec, cfg: BackboneConfig) -> range:
    rng = spec.layer_range
    for l in rng:
        if not 1 <= l <= cfg.n_layers:
            raise ContractError(f"adaptation layer {l} outside 1..{cfg.n_layers}")
    return rng


def parameter_shapes(spec: AdaptationSpec, cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Name → shape of every learnable tensor one task of ``spec`` creates."""
    out: dict[str, tuple[int, ...]] = {}
    d = cfg.d_model
    for l in _layers(spec, cfg):
        if spec.mechanism in ("soft_tf", "wsn"):
            prefix = "mask" if spec.mechanism == "soft_tf" else "wsn"
            for t in spec.targets:
                out[f"{prefix}.L{l}.{t}"] = cfg.weight_shape(t)
        elif spec.mechanism == "lora":
            groups: list[tuple[str, tuple[int, int]]] = []
            qkv = [t for t in spec.targets if t in _QKV_COLUMN]
            if spec.fused_qkv and qkv:
                if len(qkv) != 3:
                    raise ContractError("fused_qkv LoRA needs all of Q, K and V as targets")
                groups.append(("QKV", (d, 3 * d)))
                rest = [t for t in spec.targets if t not in _QKV_COLUMN]
            else:
                rest = list(spec.targets)
            groups += [(t, cfg.weight_shape(t)) for t in rest]
            for name, (rows, cols) in groups:
                if spec.rank > min(rows, cols):
                    raise ContractError(f"LoRA rank {spec.rank} exceeds {name} dims {(rows, cols)}")
                out[f"lora.L{l}.{name}.A"] = (rows, spec.rank)
                out[f"lora.L{l}.{name}.B"] = (spec.rank, cols)
        elif spec.mechanism == "adapter":
            for s in spec.adapter_sites:
                out[f"adapter.L{l}.{s}.down"] = (d, spec.rank)
                out[f"adapter.L{l}.{s}.down_b"] = (spec.rank,)
                out[f"adapter.L{l}.{s}.up"] = (spec.rank, d)
                out[f"adapter.L{l}.{s}.up_b"] = (d,)
    return out


def count_trainable_params(mechanism: str, spec: AdaptationSpec, backbone: BackboneConfig) -> int:
    """Exact number of learnable scalars one task of ``mechanism`` adds (prompts and head excluded)."""
    if spec.mechanism != mechanism:
        spec = replace(spec, mechanism=mechanism)
    if len(spec.layer_range) == 0:
        log.warning("empty adaptation layer range %s: no trainable parameters", spec.layers)
        return 0
    return int(sum(math.prod(s) for s in parameter_shapes(spec, backbone).values()))


def create_adaptation(spec: AdaptationSpec, cfg: BackboneConfig, rng: np.random.Generator):
    """Fresh per-task parameters; ``None`` for ``prompt_only``."""
    layers = _layers(spec, cfg)
    if spec.mechanism == "prompt_only":
        return None
    if spec.mechanism == "soft_tf":
        shapes = {(l, t): cfg.weight_shape(t) for l in layers for t in spec.targets}
        return init_mask(spec.mask_init, shapes, rng)
    if spec.mechanism == "wsn":
        scores = {}
        for l in layers:
            for t in spec.targets:
                rows, cols = cfg.weight_shape(t)
                bound = math.sqrt(6.0 / rows)
                scores[(l, t)] = Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True)
        return WsnMaskSet(scores, spec.wsn_c)
    if spec.mechanism == "lora":
        factors = {}
        for name, shape in parameter_shapes(spec, cfg).items():
            _, layer, group, part = name.split(".")
            key = (int(layer[1:]), group)
            if part == "A":
                a = Tensor(rng.uniform(-1.0, 1.0, shape) / math.sqrt(shape[0]), requires_grad=True)
                factors[key] = (a, None)
            else:
                factors[key] = (factors[key][0], Tensor(np.zeros(shape), requires_grad=True))
        return LoraSet(factors, fused_qkv=spec.fused_qkv)
    modules = {}
    d, r = cfg.d_model, spec.rank
    for l in layers:
        for s in spec.adapter_sites:
            modules[(l, s)] = (
                Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, r)), requires_grad=True),
                Tensor(np.zeros(r), requires_grad=True),
                Tensor(np.zeros((r, d)), requires_grad=True),
                Tensor(np.zeros(d), requires_grad=True),
            )
    return AdapterSet(modules)


def mix_adaptations(members: list, alpha: Tensor):
    """α-weighted combination of per-task adaptations (used by gradient-based task inference)."""
    if not members or members[0] is None:
        return None
    return type(members[0]).mix(members, alpha)
