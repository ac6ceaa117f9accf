"""Forward-model synthetic sample generators shared across test modules."""

import random

from secmsg.benchmarks import LatencySample

# designs chosen so every parameter is identifiable: replicated small
# sizes pin the intercepts, wide size spreads pin the slopes
EAGER_LINE_SIZES = [1, 64, 1024, 8192, 65536]
RDV_FILLER_SIZES = [131072, 262144]
RDV_LINE_THRESHOLD = 1024
RDV_LINE_SIZES = [1024, 2048, 4096, 8192, 16384, 32768, 65536]
EAGER_FILLER_SIZES = [1, 256]
ENC_LINE_SIZES = [1, 4, 16, 64, 256, 1024, 4096, 16384]

MAXRATE_KS = [1, 2, 4, 8]
MAXRATE_SIZES = {
    "small": [16, 64, 256],
    "moderate": [512, 4096, 16384],
    "large": [32768, 65536, 131072],
}


def line_samples(line, sizes, *, reps=1, noise=0.0, rng=None, k=1):
    """Samples on alpha + beta * (k*m), optionally with multiplicative noise."""
    out = []
    for m in sizes:
        for i in range(reps):
            y = line.alpha_us + line.beta_us_per_byte * k * m
            if noise:
                y *= 1.0 + rng.uniform(-noise, noise)
            out.append(LatencySample(m, k, i, y))
    return out


def phased_samples(params, *, eager_sizes, rdv_sizes, reps=1, noise=0.0, seed=None):
    rng = random.Random(seed)
    return line_samples(params.eager, eager_sizes, reps=reps, noise=noise, rng=rng) + (
        line_samples(params.rendezvous, rdv_sizes, reps=reps, noise=noise, rng=rng)
    )


def maxrate_samples(params, *, reps=1, noise=0.0, seed=None):
    rng = random.Random(seed)
    out = []
    for cls, sizes in MAXRATE_SIZES.items():
        cls_params = getattr(params, cls)
        for k in MAXRATE_KS:
            for m in sizes:
                for i in range(reps):
                    y = cls_params.predict(k, m)
                    if noise:
                        y *= 1.0 + rng.uniform(-noise, noise)
                    out.append(LatencySample(m, k, i, y))
    return out


def rel_err(fitted, true):
    return abs(fitted - true) / abs(true)


def maxrate_grid_residual(data):
    """Exhaustive coarse-grid oracle for the multi-worker encryption fit.

    Sweeps 20 intercept steps, 40 log-spaced A steps and 40 B steps
    (including B = 0) over data-driven ranges and returns the smallest
    sum of squared residuals found.  Entirely independent of the
    package's solver.
    """
    import numpy as np

    ks = np.array([d[0] for d in data], dtype=float)
    ms = np.array([d[1] for d in data], dtype=float)
    ys = np.array([d[2] for d in data], dtype=float)
    ymin = float(ys.min())
    rates = (ks * ms) / np.maximum(ys - 0.9 * ymin, 1e-9)
    alphas = np.linspace(0.0, ymin, 20)
    a_grid = np.geomspace(rates.min() / 4.0, rates.max() * 4.0, 40)
    b_grid = np.concatenate([[0.0], np.geomspace(rates.min() / 4.0, rates.max() * 4.0, 39)])
    best = float("inf")
    for alpha in alphas:
        for a in a_grid:
            denom = a + np.outer(b_grid, ks - 1.0)
            pred = alpha + (ks * ms) / denom
            res = float(((pred - ys) ** 2).sum(axis=1).min())
            best = min(best, res)
    return best
