"""Forward-pass timing of router vs dense attention over context sizes."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, init_params, pfn_forward
from .rng import derive_rng


def bench_attention(mode: str, sizes, trials: int = 3, routers: int = 128, hidden: int = 64,
                    heads: int = 4, num_layers: int = 1, max_dims: int = 5, queries: int = 1,
                    seed: int = 0) -> list[tuple[str, int, float]]:
    """Median forward wall time (ms) per context size.

    ``mode`` is ``"router"`` or ``"dense"``; the dense baseline uses the same
    weights but lets context tokens attend to each other directly.
    """
    if mode not in ("router", "dense"):
        raise ValueError(f"mode must be 'router' or 'dense', got {mode!r}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = [int(n) for n in sizes]
    if any(n < 1 for n in sizes):
        raise ValueError("context sizes must be >= 1")
    config = ModelConfig(max_dims=max_dims, num_layers=num_layers, hidden=hidden, heads=heads,
                         routers=routers)
    params = init_params(config, derive_rng(seed, "bench-init"))
    rows = []
    with ad.no_grad():
        for n in sizes:
            rng = derive_rng(seed, "bench-data", n)
            context = rng.standard_normal((n, max_dims))
            query = rng.standard_normal((queries, max_dims))
            pfn_forward(params, config, context[: min(n, 64)], query, attention=mode)  # warm-up
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                pfn_forward(params, config, context, query, attention=mode)
                times.append((time.perf_counter() - t0) * 1000.0)
            rows.append((mode, n, float(np.median(times))))
    return rows


def linear_fit_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    coef = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - np.polyval(coef, x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def fit_residuals(x, y) -> tuple[float, float]:
    """Sum of squared residuals of the best linear and quadratic fits."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = []
    for deg in (1, 2):
        coef = np.polyfit(x, y, deg)
        out.append(float(np.sum((y - np.polyval(coef, x)) ** 2)))
    return out[0], out[1]


def timings_csv(rows) -> str:
    return "mode,n,millis\n" + "".join(f"{m},{n},{t:.6f}\n" for m, n, t in rows)
