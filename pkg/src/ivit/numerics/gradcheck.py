"""Central finite-difference checks for the recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, 1e-8)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(
    fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, indices=None, weights=None
) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``t.data``.

    For a non-scalar ``fn`` the checked scalar is ``sum(weights * fn())``; the
    two perturbed outputs are differenced entry by entry before the weighted
    sum, which keeps roundoff at the level of the touched entries.  Only the
    flat ``indices`` are perturbed when given; other entries stay 0.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().data.copy()
        flat[i] = orig - h
        fm = fn().data
        flat[i] = orig
        diff = fp - fm
        grad[i] = (diff.sum() if weights is None else (diff * weights).sum()) / (2.0 * h)
    return grad.reshape(t.shape)


def analytic_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], weights=None
) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn()
    loss = out if weights is None else ops.sum(ops.mul(out, Tensor(weights)))
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t in inputs:
        t.zero_grad()
    return grads


def gradcheck(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, weights=None
) -> list[float]:
    """Max elementwise relative error per input tensor.

    ``fn`` returns either the scalar loss or an output tensor that is reduced
    with ``weights`` (same shape as the output).
    """
    analytic = analytic_gradients(fn, inputs, weights)
    return [
        float(relative_error(a, numerical_gradient(fn, t, h, weights=weights)).max())
        for a, t in zip(analytic, inputs)
    ]


@dataclass
class CheckRow:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def _projection(shape, rng: np.random.Generator) -> np.ndarray:
    # Magnitudes in [0.5, 1.5] keep every output entry in play.
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def op_suite(seed: int = 0, tolerance: float = 1e-6) -> list[CheckRow]:
    """Finite-difference check of every differentiable op on small random inputs."""
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []

    def run(name, build, inputs):
        errs = gradcheck(build, inputs, weights=_projection(build().shape, rng))
        rows.append(CheckRow(name, max(errs), tolerance))

    a, b = Tensor(rng.normal(size=(5, 7))), Tensor(rng.normal(size=(7, 3)))
    run("matmul", lambda: ops.matmul(a, b), [a, b])

    s = Tensor(rng.normal(size=(4, 6)))
    mask = np.ones((4, 6), dtype=bool)
    mask[:, -2:] = False
    run("softmax_rows", lambda: ops.softmax_rows(s, mask), [s])

    x = Tensor(rng.normal(size=(4, 16)))
    g, be = Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16))
    run("layer_norm", lambda: ops.layer_norm(x, g, be, 1e-5), [x, g, be])

    # Stay clear of the stationary point near -0.75 and the flat far tail.
    z = Tensor(rng.choice([-1.0, 1.0], size=(3, 8)) * rng.uniform(0.1, 2.5, size=(3, 8)))
    z.data[(z.data < -0.5) & (z.data > -1.2)] -= 0.7
    run("gelu", lambda: ops.gelu(z), [z])

    r = Tensor(rng.normal(size=(3, 8)))
    r.data[np.abs(r.data) < 1e-3] += 0.01
    run("relu", lambda: ops.relu(r), [r])

    xc = Tensor(rng.normal(size=(3, 16, 16)))
    wc = Tensor(rng.normal(size=(8, 3, 5, 5)) * 0.2)
    bc = Tensor(rng.normal(size=8))
    run("conv2d", lambda: ops.conv2d(xc, wc, bc, stride=2, pad=2), [xc, wc, bc])

    xl = Tensor(rng.normal(size=(3, 10)))
    wl, bl = Tensor(rng.normal(size=(10, 4))), Tensor(rng.normal(size=4))
    run("linear", lambda: ops.linear(xl, wl, bl), [xl, wl, bl])

    table = Tensor(rng.normal(size=(7, 5)))
    ids = np.array([3, 0, 3, 6])
    run("embedding_lookup", lambda: ops.embedding_lookup(table, ids), [table])

    logits = Tensor(rng.normal(size=(4, 2)))
    labels = np.array([0, 1, 1, 0])
    rows.append(
        CheckRow(
            "cross_entropy",
            max(gradcheck(lambda: ops.cross_entropy(logits, labels), [logits])),
            tolerance,
        )
    )

    p, q = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(3, 1)))
    run("add/mul broadcast", lambda: ops.mul(ops.add(p, q), p), [p, q])

    t = Tensor(rng.normal(size=(2, 3, 4)))
    run(
        "reshape/transpose/concat/getitem",
        lambda: ops.getitem(
            ops.concat([ops.transpose(t, (0, 2, 1)), ops.reshape(t, (2, 4, 3))], axis=1),
            (slice(None), 1),
        ),
        [t],
    )
    return rows
