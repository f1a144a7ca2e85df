"""Shared builders for randomized test instances."""

from __future__ import annotations

import numpy as np

import oracles


def make_instance(seed: int) -> dict:
    """One randomized attention-control problem, usable by every method.

    Shapes and regimes vary with the seed: head/pixel/token counts, logit
    scale, mask sparsity (including pixels no region covers), and sometimes
    degenerate token populations (all tokens in regions, or none).
    """
    rng = np.random.default_rng(seed)
    heads = int(rng.integers(1, 4))
    side_h = int(rng.integers(2, 6))
    side_w = int(rng.integers(2, 6))
    hw = side_h * side_w
    n = int(rng.integers(2, 13))
    head_dim = int(rng.choice([1, 4, 16]))
    scale = float(rng.choice([0.5, 2.0, 8.0]))
    logits = rng.normal(0.0, scale, size=(heads, hw, n))

    n_regions = int(rng.integers(1, 4))
    mode = rng.random()
    if mode < 0.1:
        token_region = np.zeros(n, dtype=np.int64)  # nobody names a region
    elif mode < 0.2:
        token_region = rng.integers(1, n_regions + 1, size=n)  # everybody does
    else:
        token_region = rng.integers(0, n_regions + 1, size=n)

    # Region masks at layer resolution: soft values with real zero patches.
    masks = rng.random((n_regions, hw)) * (rng.random((n_regions, hw)) < 0.65)
    gain = np.ones((hw, n), dtype=np.float64)
    for i, r in enumerate(token_region):
        if r > 0:
            gain[:, i] = masks[r - 1]

    token_area = np.ones(n, dtype=np.float64)
    region_area = rng.uniform(0.05, 0.95, size=n_regions)
    for i, r in enumerate(token_region):
        if r > 0:
            token_area[i] = region_area[r - 1]

    # Pixel ownership: best-covering referenced region, ties to lowest id.
    referenced = sorted({int(r) for r in token_region if r > 0})
    pixel_area = np.ones(hw, dtype=np.float64)
    best = np.zeros(hw)
    for r in referenced:
        take = masks[r - 1] > best
        best[take] = masks[r - 1][take]
        pixel_area[take] = region_area[r - 1]

    total_steps = 1000
    t = float(rng.integers(0, total_steps + 1))
    t_thr = float(rng.integers(0, total_steps + 1))
    softness = float(rng.choice([0.0, 0.3, 0.8, 1.0]))
    w_m = float(rng.choice([0.0, 0.7, 2.0]))
    w_a = float(rng.choice([0.0, 0.4, 1.5]))
    boost = oracles.boost_schedule(t, t_thr, softness, total_steps)

    return {
        "seed": seed,
        "heads": heads,
        "hw": hw,
        "n": n,
        "head_dim": head_dim,
        "logits": logits,
        "gain": gain,
        "token_region": token_region,
        "region_token": token_region > 0,
        "token_area": token_area,
        "pixel_area": pixel_area,
        "sigma": float(rng.uniform(0.0, 5.0)),
        "t": t,
        "total_steps": total_steps,
        "t_thr": t_thr,
        "softness": softness,
        "w_prime": float(rng.choice([0.3, 0.5, 1.0])),
        "w_m": w_m,
        "w_a": w_a,
        "boost": boost,
    }


def lists(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()
