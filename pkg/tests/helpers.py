import numpy as np

from softtf.backbone import BackboneConfig


def central_difference(fn, leaves, h=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of every leaf."""
    out = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def small_config(**kw) -> BackboneConfig:
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=12, seq_len=4, n_classes_total=4, input_dim=3)
    base.update(kw)
    return BackboneConfig(**base)


def random_tokens(rng, n, cfg) -> np.ndarray:
    return rng.normal(size=(n, cfg.n_tokens, cfg.input_dim))
