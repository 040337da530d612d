"""``softtf`` command-line entry point.

Exit codes: 0 success, 1 contract/training failure, 2 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adaptation import MECHANISMS, AdaptationSpec, count_trainable_params
from .backbone import BackboneConfig, pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, resolve_seed, save_config
from .data import gen_split_tasks
from .engine import ContinualLearner
from .errors import ConfigError, ContractError, SoftTFError
from .inference import evaluate_run, infer_task_gradient_id, infer_task_prompt_id
from .metrics import attention_map, compute_metrics, convergence_probe, mask_histogram

log = logging.getLogger("softtf")

LEARNER_FILE = "learner.ckpt"
CONFIG_FILE = "config.json"


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else f"{v:.6f}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.resolved(resolve_seed(args.seed, cfg))


def _load_run(run_dir) -> tuple[RunConfig, ContinualLearner]:
    run = Path(run_dir)
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    cfg = load_config(run / CONFIG_FILE).resolved()
    learner = load_checkpoint(run / LEARNER_FILE)
    if not isinstance(learner, ContinualLearner):
        raise ConfigError(f"{run / LEARNER_FILE} is not a continual-learning checkpoint")
    return cfg, learner


def _shots(value: str) -> int | None:
    if value == "batch":
        return None
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"shots must be an integer or 'batch', got {value!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError("shots must be ≥ 1")
    return k


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    (base_train, base_test), _ = gen_split_tasks(cfg.data)
    p = cfg.pretrain
    backbone = pretrain((base_train.x, base_train.y), (base_test.x, base_test.y), cfg.backbone,
                        epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=cfg.seed, threshold=p.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(backbone, out)
    save_config(cfg, out.with_name(out.name + ".config.json"))
    print(f"pretrain accuracy {backbone.pretrain_accuracy:.4f}")
    print(f"backbone hash {backbone.content_hash()}")
    return 0


def cmd_train_cl(args) -> int:
    cfg = _run_config(args)
    backbone = load_checkpoint(args.backbone)
    if backbone.config != cfg.backbone:
        raise ConfigError(f"backbone checkpoint {args.backbone} was built with a different backbone section")
    _, tasks = gen_split_tasks(cfg.data)
    learner = ContinualLearner(backbone, cfg.train, cfg.plan, cfg.data.n_classes_total)
    before = backbone.content_hash()
    for data in tasks:
        acc = learner.train_task(data)
        print(f"task {data.task_id} classes [{data.class_range[0]}, {data.class_range[1]}) train accuracy {acc:.4f}")
    if backbone.content_hash() != before:
        raise ContractError("frozen backbone changed during training")
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    save_checkpoint(learner, run / LEARNER_FILE)
    save_config(replace(cfg, out_dir=str(run)), run / CONFIG_FILE)
    _write_csv(run / "history.csv", ["task", "epoch", "loss", "accuracy"],
               [[r.task, r.epoch, _fmt(r.loss), _fmt(r.accuracy)] for r in learner.history])
    return 0


def cmd_eval(args) -> int:
    cfg, learner = _load_run(args.run)
    _, tasks = gen_split_tasks(cfg.data)
    mat, tid = evaluate_run(learner, tasks, args.id_mode, args.shots, cfg.gradient_id.batch_size,
                            cfg.gradient_id.prompt_mixing)
    acc, forget = compute_metrics(mat)
    n = mat.shape[0]
    _write_csv(Path(args.run) / "eval_matrix.csv", ["stage"] + [f"task{t}" for t in range(n)],
               [[s] + [_fmt(v) for v in mat[s]] for s in range(n)])
    print(f"ACC {acc:.4f}")
    print(f"Forget {forget:.4f}")
    if args.id_mode != "oracle":
        print(f"task-id accuracy {float(np.mean(tid)):.4f}")
    return 0


def _read_input(path: str, n_tokens: int, dim: int) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input file not found: {p}")
    if p.suffix == ".npy":
        x = np.load(p)
    else:
        rows = [line.split(",") for line in p.read_text().splitlines() if line.strip()]
        try:
            x = np.array(rows, dtype=np.float64)
        except ValueError:
            try:
                x = np.array(rows[1:], dtype=np.float64)  # first line was a header
            except ValueError as exc:
                raise ConfigError(f"{p}: non-numeric feature value ({exc})") from None
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == n_tokens * dim:
        x = x.reshape(len(x), n_tokens, dim)
    if x.ndim == 2 and x.shape == (n_tokens, dim):
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (n_tokens, dim):
        raise ContractError(f"input shape {x.shape} does not fit ({n_tokens}, {dim}) tokens")
    return x


def cmd_infer_task(args) -> int:
    cfg, learner = _load_run(args.run)
    b = cfg.backbone
    x = _read_input(args.input, b.n_tokens, b.input_dim)
    snap = learner.snapshot()
    if args.id_mode == "prompt":
        ids = infer_task_prompt_id(snap, x)
        for i in ids:
            print(int(i))
    else:
        print(infer_task_gradient_id(snap, x, args.shots, cfg.gradient_id.prompt_mixing))
    return 0


def cmd_report(args) -> int:
    cfg, learner = _load_run(args.run)
    run = Path(args.run)
    by_layer: dict[int, list] = {}
    for st in learner.tasks:
        if st.adaptation is None or not hasattr(st.adaptation, "effective_masks"):
            continue
        hists = mask_histogram(st.adaptation, bins=args.bins)
        for name, h in hists.items():
            layer, target = name.split(".")
            rows = by_layer.setdefault(int(layer[1:]), [])
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                rows.append([st.task_id, target, _fmt(lo), _fmt(hi), int(c), _fmt(h.mean), _fmt(h.variance)])
    for layer, rows in sorted(by_layer.items()):
        _write_csv(run / f"mask_hist_layer{layer}.csv",
                   ["task", "target", "bin_left", "bin_right", "count", "mean", "variance"], rows)

    _, tasks = gen_split_tasks(cfg.data)
    snap = learner.snapshot()
    data = tasks[min(args.task, len(learner.tasks) - 1)]
    x = data.test.x[0]
    t = data.task_id
    for layer in range(1, cfg.backbone.n_layers + 1):
        base = attention_map(learner.backbone, x, layer, None, snap.prompts(None))
        tuned = attention_map(learner.backbone, x, layer, snap.tasks[t].adaptation, snap.prompts(t))
        rows = []
        for label, att in (("unadapted", base), ("adapted", tuned)):
            for qi in range(att.shape[0]):
                for ki in range(att.shape[1]):
                    rows.append([label, qi, ki, _fmt(att[qi, ki])])
        _write_csv(run / f"attention_map_layer{layer}.csv", ["forward", "query", "key", "weight"], rows)

    spec = learner.adaptation_spec
    lines = [f"per-task trainable parameters (layers {spec.layers[0]}-{spec.layers[1]}, targets {','.join(spec.targets)})"]
    for mech in MECHANISMS:
        lines.append(f"{mech} {count_trainable_params(mech, spec, cfg.backbone)}")
    vit = BackboneConfig(n_layers=12, d_model=768, n_heads=12, d_ff=3072, seq_len=197, n_classes_total=100,
                         input_dim=768)
    lines.append("reference ViT-B/16 sizes")
    lines.append(f"soft_tf one layer QKV {count_trainable_params('soft_tf', AdaptationSpec(layers=(12, 12), targets=('QKV',)), vit)}")
    lines.append(f"lora r=4 layers 10-12 QKV+O {count_trainable_params('lora', AdaptationSpec(layers=(10, 12), targets=('QKV', 'O'), rank=4, fused_qkv=True), vit)}")
    (run / "params.txt").write_text("\n".join(lines) + "\n")
    print(f"report written to {run}")
    return 0


def cmd_probe(args) -> int:
    res = convergence_probe(args.B, args.rho, args.T, dim=args.dim, seed=resolve_seed(args.seed, RunConfig()))
    print(f"suboptimality {res.suboptimality:.4f}")
    print(f"bound {res.bound:.4f}")
    print("PASS" if res.satisfied else "FAIL")
    return 0 if res.satisfied else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="softtf", description="Soft-masked transformer continual learning toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help="overrides SOFTTF_SEED and the config seed")
        return p

    p = seeded(sub.add_parser("pretrain", help="pretrain and freeze a backbone on the base classes"))
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = seeded(sub.add_parser("train-cl", help="train the task sequence on a frozen backbone"))
    p.add_argument("--config")
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_cl)

    p = sub.add_parser("eval", help="accuracy/forgetting over all stages; writes eval_matrix.csv")
    p.add_argument("--run", required=True)
    p.add_argument("--id-mode", choices=("prompt", "gradient", "oracle"), default="gradient")
    p.add_argument("--shots", type=_shots, default=None, help="k or 'batch' (default)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer-task", help="print the inferred task for the examples in a file")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True, help=".npy array or CSV of flat features")
    p.add_argument("--id-mode", choices=("prompt", "gradient"), default="gradient")
    p.add_argument("--shots", type=_shots, default=None)
    p.set_defaults(func=cmd_infer_task)

    p = sub.add_parser("report", help="mask histograms, attention maps and parameter counts")
    p.add_argument("--run", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--task", type=int, default=0, help="task whose first test example drives the attention maps")
    p.set_defaults(func=cmd_report)

    p = seeded(sub.add_parser("probe-convergence", help="check averaged subgradient descent against its bound"))
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--dim", type=int, default=5)
    p.set_defaults(func=cmd_probe)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SoftTFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
