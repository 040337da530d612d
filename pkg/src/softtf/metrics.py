"""Accuracy/forgetting, mask statistics, attention maps and a subgradient convergence probe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def compute_metrics(a) -> tuple[float, float]:
    """Average final accuracy and forgetting from a lower-triangular ``[stage, task]`` matrix.

    Forgetting of task ``t`` is its best accuracy over stages ``t..T-1`` minus
    its final accuracy, averaged over the first ``T-1`` tasks (0 when T = 1).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ContractError(f"eval matrix must be square with T ≥ 1, got shape {a.shape}")
    n = a.shape[0]
    lower = np.tril_indices(n)
    vals = a[lower]
    if not np.all(np.isfinite(vals)):
        raise ContractError("eval matrix has unpopulated entries on or below the diagonal")
    if vals.min() < 0 or vals.max() > 1:
        raise ContractError("accuracies must lie in [0, 1]")
    acc = float(a[n - 1].mean())
    if n == 1:
        return acc, 0.0
    drops = [a[t:, t].max() - a[n - 1, t] for t in range(n - 1)]
    return acc, float(np.mean(drops))


@dataclass
class MaskHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    variance: float


def _mask_arrays(masks) -> dict[str, np.ndarray]:
    if isinstance(masks, np.ndarray):
        return {"mask": masks}
    if isinstance(masks, dict):
        return {str(k): np.asarray(getattr(v, "data", v)) for k, v in masks.items()}
    if hasattr(masks, "effective_masks"):
        return {f"L{l}.{t}": m for (l, t), m in sorted(masks.effective_masks().items())}
    raise ContractError(f"cannot take a histogram of {type(masks).__name__}")


def mask_histogram(masks, bins: int = 20) -> dict[str, MaskHistogram]:
    """Histogram plus exact mean/variance for every matrix in ``masks``.

    ``masks`` may be a MaskSet/WsnMaskSet, a dict of arrays, or one array.
    """
    if bins < 1:
        raise ContractError(f"bins must be ≥ 1, got {bins}")
    out = {}
    for name, m in _mask_arrays(masks).items():
        m = np.asarray(m, dtype=np.float64)
        counts, edges = np.histogram(m, bins=bins)
        out[name] = MaskHistogram(edges, counts, float(m.mean()), float(m.var()))
    return out


def attention_map(backbone, x, layer: int, adaptation=None, prompts=None) -> np.ndarray:
    """Head-averaged attention weights at 1-based ``layer``.

    Returns ``(L_q, L_k)`` for a single input, ``(B, L_q, L_k)`` for a batch.
    """
    n_layers = backbone.config.n_layers
    if not 1 <= layer <= n_layers:
        raise ContractError(f"layer {layer} outside 1..{n_layers}")
    single = np.ndim(x) == 2
    _, trace = backbone.encode(x, adaptation, prompts, record=True)
    att = trace.attention[layer - 1].mean(axis=1)
    return att[0] if single else att


@dataclass
class ProbeResult:
    suboptimality: float
    bound: float
    eta: float
    start_distance: float

    @property
    def satisfied(self) -> bool:
        return self.suboptimality <= self.bound + 1e-12


def convergence_probe(radius: float, lipschitz: float, steps: int, dim: int = 5, seed: int = 0,
                      start_distance: float | None = None) -> ProbeResult:
    """Averaged subgradient descent on ``f(w) = lipschitz * ||w - w_opt||``.

    Step size ``radius / (lipschitz * sqrt(steps))``; the start lies
    ``start_distance`` (default ``radius``, at most ``radius``) from the
    optimum.  The guaranteed bound on ``f(mean iterate) - f(w_opt)`` is
    ``radius * lipschitz / sqrt(steps)``.
    """
    if radius <= 0 or lipschitz <= 0:
        raise ContractError("radius and Lipschitz constant must be positive")
    if steps < 1:
        raise ContractError("steps must be ≥ 1")
    r0 = radius if start_distance is None else float(start_distance)
    if not 0 <= r0 <= radius:
        raise ContractError(f"start distance {r0} outside [0, {radius}]")
    rng = np.random.default_rng(seed)
    w_opt = rng.normal(size=dim)
    u = rng.normal(size=dim)
    w = w_opt + r0 * u / np.linalg.norm(u)
    eta = math.sqrt(radius * radius / (lipschitz * lipschitz * steps))
    total = np.zeros(dim)  # running sum of w - w_opt, so a start at the optimum stays exactly 0
    for _ in range(steps):
        diff = w - w_opt
        total += diff
        norm = np.linalg.norm(diff)
        v = lipschitz * diff / norm if norm > 0 else np.zeros(dim)
        w = w - eta * v
    sub = lipschitz * float(np.linalg.norm(total / steps))
    return ProbeResult(sub, radius * lipschitz / math.sqrt(steps), eta, r0)


def warm_start_chain(radius: float, lipschitz: float, steps: int, fractions=(0.25, 0.5), dim: int = 5,
                     seed: int = 0) -> list[ProbeResult]:
    """Probes at increasing start radii (``fractions`` of ``radius``, then ``radius``)."""
    radii = [radius * f for f in fractions] + [radius]
    if any(not 0 < r1 < r2 for r1, r2 in zip(radii, radii[1:])):
        raise ContractError(f"fractions must be increasing in (0, 1), got {fractions}")
    return [convergence_probe(r, lipschitz, steps, dim, seed) for r in radii]
