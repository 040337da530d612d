"""Single-file checkpoints for a pretrained backbone or a whole continual-learning run.

Layout (all integers little-endian)::

    b"SOFTTFCK" | u32 manifest length | manifest JSON (utf-8) | f32 blob | u32 CRC32

The CRC covers every byte before it.  The manifest records the format
version, configs, and one ``{name, shape, dtype, offset, length}`` entry per
tensor, offsets relative to the blob start.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .adaptation import MaskInitScheme, create_adaptation
from .backbone import BackboneConfig, ClassifierHead, PretrainedBackbone
from .engine import ContinualLearner, EpochRecord, SharedSnapshot, TaskState, TrainConfig
from .errors import CheckpointError, ChecksumError, ContractError, TruncatedError, VersionError
from .prompts import AttachmentPlan
from .tensor import Tensor

MAGIC = b"SOFTTFCK"
FORMAT_VERSION = 1
_DTYPE = "<f4"


def _backbone_tensors(bb: PretrainedBackbone) -> dict[str, np.ndarray]:
    out = {f"theta.{k}": t.data for k, t in bb.params.items()}
    if bb.head_stub is not None:
        out["head_stub.weight"] = bb.head_stub.weight.data
        out["head_stub.bias"] = bb.head_stub.bias.data
    return out


def _learner_tensors(learner: ContinualLearner) -> dict[str, np.ndarray]:
    out = _backbone_tensors(learner.backbone)
    for st in learner.tasks:
        for name, t in st.named_tensors().items():
            out[f"task{st.task_id}.{name}"] = t.data
    for s, shared in enumerate(learner.stages):
        out[f"stage{s}.head.weight"] = shared.head.weight.data
        out[f"stage{s}.head.bias"] = shared.head.bias.data
        for l, g in sorted(shared.g.items()):
            out[f"stage{s}.gprompt.L{l}"] = g.data
    return out


def _jsonable_matrix(m: np.ndarray) -> list:
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.asarray(m)]


def save_checkpoint(obj, path) -> None:
    """Persist a :class:`PretrainedBackbone` or :class:`ContinualLearner` to ``path``."""
    if isinstance(obj, PretrainedBackbone):
        bb, kind, tensors = obj, "backbone", _backbone_tensors(obj)
        extra = {}
    elif isinstance(obj, ContinualLearner):
        if any(not st.frozen for st in obj.tasks):
            raise ContractError("only finished (frozen) tasks can be checkpointed")
        bb, kind, tensors = obj.backbone, "learner", _learner_tensors(obj)
        extra = {
            "train_config": dataclasses.asdict(obj.config),
            "plan": dataclasses.asdict(obj.plan),
            "n_classes_total": obj.n_classes_total,
            "class_ranges": [list(st.class_range) for st in obj.tasks],
            "history": [dataclasses.asdict(r) for r in obj.history],
            "eval_matrices": {k: _jsonable_matrix(v) for k, v in obj.eval_matrices.items()},
        }
    else:
        raise ContractError(f"cannot checkpoint a {type(obj).__name__}")
    if not bb.frozen:
        raise ContractError("the backbone must be frozen before it is checkpointed")

    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = arr.astype(_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "backbone_config": dataclasses.asdict(bb.config),
        "pretrain_accuracy": bb.pretrain_accuracy,
        "blob_length": offset,
        "tensors": entries,
        **extra,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)
    payload = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[: len(MAGIC)] != MAGIC:
        if len(raw) < len(MAGIC):
            raise TruncatedError(f"{path}: {len(raw)} bytes, too short for a checkpoint header")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedError(f"{path}: truncated before the manifest length")
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + mlen + 4:
        raise TruncatedError(f"{path}: truncated inside the manifest ({len(raw)} bytes)")
    try:
        manifest = json.loads(raw[pos:pos + mlen].decode())
        blob_len = int(manifest["blob_length"])
    except (ValueError, KeyError, UnicodeDecodeError):
        manifest, blob_len = None, None
    if blob_len is not None:
        expected = pos + mlen + blob_len + 4
        if len(raw) < expected:
            raise TruncatedError(f"{path}: blob truncated ({len(raw)} of {expected} bytes)")
        if len(raw) > expected:
            raise ChecksumError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch (stored {stored:#010x})")
    if manifest is None:
        raise CheckpointError(f"{path}: unreadable manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {manifest.get('format_version')} != supported {FORMAT_VERSION}")
    blob = memoryview(raw)[pos + mlen: pos + mlen + blob_len]
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob[e["offset"]: e["offset"] + e["length"]], dtype=_DTYPE)
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return manifest, tensors


def _restore_backbone(manifest: dict, tensors: dict[str, np.ndarray]) -> PretrainedBackbone:
    cfg = BackboneConfig(**manifest["backbone_config"])
    params = {k[len("theta."):]: Tensor(v) for k, v in tensors.items() if k.startswith("theta.")}
    stub = None
    if "head_stub.weight" in tensors:
        stub = ClassifierHead(Tensor(tensors["head_stub.weight"]), Tensor(tensors["head_stub.bias"]))
    bb = PretrainedBackbone(cfg, params, stub)
    bb.freeze()
    bb.pretrain_accuracy = manifest.get("pretrain_accuracy")
    return bb


def _restore_learner(manifest: dict, tensors: dict[str, np.ndarray]) -> ContinualLearner:
    bb = _restore_backbone(manifest, tensors)
    tc = dict(manifest["train_config"])
    tc["mask_init"] = MaskInitScheme(**tc["mask_init"])
    cfg = TrainConfig(**tc)
    plan = AttachmentPlan(**manifest["plan"])
    learner = ContinualLearner(bb, cfg, plan, manifest["n_classes_total"])
    scratch = np.random.default_rng(0)
    for t, rng_ in enumerate(manifest["class_ranges"]):
        adaptation = create_adaptation(learner.adaptation_spec, bb.config, scratch)
        prompt = learner.pool.new_task(scratch)
        state = TaskState(t, tuple(rng_), adaptation, prompt)
        for name, tensor in state.named_tensors().items():
            key = f"task{t}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            tensor.data = tensors[key]
        state.freeze()
        learner.tasks.append(state)
    for s in range(len(learner.tasks)):
        head = ClassifierHead(Tensor(tensors[f"stage{s}.head.weight"]), Tensor(tensors[f"stage{s}.head.bias"]))
        g = {l: Tensor(tensors[f"stage{s}.gprompt.L{l}"]) for l in plan.g_range}
        learner.stages.append(SharedSnapshot(head, g))
    if learner.stages:
        last = learner.stages[-1]
        learner.head.weight.data = last.head.weight.data.copy()
        learner.head.bias.data = last.head.bias.data.copy()
        for l, g in learner.pool.g.items():
            g.data = last.g[l].data.copy()
            g.requires_grad = cfg.shared_prompt_policy == "all_tasks"
    learner.history = [EpochRecord(**r) for r in manifest.get("history", [])]
    learner.eval_matrices = {
        k: np.array([[np.nan if v is None else v for v in row] for row in m], dtype=np.float64)
        for k, m in manifest.get("eval_matrices", {}).items()
    }
    return learner


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; raises a :class:`CheckpointError` subclass on damage."""
    manifest, tensors = _read(path)
    kind = manifest.get("kind")
    if kind == "backbone":
        return _restore_backbone(manifest, tensors)
    if kind == "learner":
        return _restore_learner(manifest, tensors)
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def read_manifest(path) -> dict:
    return _read(path)[0]
