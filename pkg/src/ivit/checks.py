"""Finite-difference check of the full i-ViT forward on a toy configuration."""

from __future__ import annotations

import numpy as np

from .config import IViTConfig
from .model import BagBatch, forward_logits, init_params
from .numerics import ops
from .numerics.gradcheck import CheckRow, numerical_gradient, relative_error

TOY_CONFIG = IViTConfig(P=16, N=4, D=8, heads=2, layers=1, grid_w=5, grid_h=5)


def toy_batch(cfg: IViTConfig, rng: np.random.Generator, batch: int = 2) -> BagBatch:
    """Random bags; the last bag has one pad slot."""
    valid = np.ones((batch, cfg.N), dtype=bool)
    valid[-1, -1] = False
    return BagBatch(
        rng.uniform(size=(batch, cfg.N, cfg.channels, cfg.P, cfg.P)),
        rng.integers(0, cfg.grid_w, size=(batch, cfg.N)),
        rng.integers(0, cfg.grid_h, size=(batch, cfg.N)),
        rng.integers(0, cfg.n_grades, size=(batch, cfg.N)),
        valid,
        rng.integers(0, cfg.n_classes, size=batch),
    )


def end_to_end_check(
    seed: int = 0,
    samples: int = 24,
    tolerance: float = 1e-5,
    live: float = 1e-5,
    absolute: float = 1e-8,
    cfg: IViTConfig = TOY_CONFIG,
) -> list[CheckRow]:
    """Per parameter tensor: max relative error over sampled entries.

    Relative error is measured on entries with |gradient| >= ``live``.
    Below that, finite-difference roundoff (about 1e-11 here) swamps the
    value, so those entries are held to an absolute bound instead.  The key
    bias is the standing example: its exact gradient is zero because softmax
    ignores a shift shared by all keys.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    batch = toy_batch(cfg, rng)
    # Non-zero biases and norm shifts so no parameter sits at a trivial point.
    for name, t in params.items():
        if name.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo", ".beta")):
            t.data[...] = rng.normal(scale=0.1, size=t.shape)

    def loss():
        return ops.cross_entropy(forward_logits(batch, params, cfg), batch.labels)

    params.zero_grad()
    loss().backward()
    rows = []
    for name, t in params.items():
        g = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        big = np.flatnonzero(np.abs(g) >= live)
        small = np.flatnonzero(np.abs(g) < live)
        pick = rng.choice(big, size=min(samples, big.size), replace=False)
        tiny = rng.choice(small, size=min(4, small.size), replace=False)
        numeric = numerical_gradient(loss, t, indices=[*pick, *tiny]).reshape(-1)
        err = float(relative_error(g[pick], numeric[pick]).max()) if pick.size else 0.0
        if tiny.size and np.abs(g[tiny] - numeric[tiny]).max() >= absolute:
            err = float("inf")
        rows.append(CheckRow(f"ivit.{name}", err, tolerance))
    params.zero_grad()
    return rows
