"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FD_STEP = 1e-3


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel={self.max_rel_error:.3e} (tol {self.tol:g}, {self.checked} entries)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """Max elementwise relative error.

    The denominator is ``|a| + |n|`` floored at 1e-2 of the largest numeric
    gradient magnitude, so entries that are zero in both do not blow up.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    denom = np.maximum(np.abs(a) + np.abs(n), max(1e-2 * scale, 1e-12))
    return float((diff / denom).max(initial=0.0)), float(diff.max(initial=0.0))


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP, max_entries: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` at ``x`` (float64).

    Returns ``(flat_positions, gradient_values)``; with ``max_entries`` only a
    random subset of coordinates is probed.
    """
    x = x.astype(np.float64, copy=True)
    flat = x.reshape(-1)
    positions = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        positions = np.sort(rng.choice(flat.size, max_entries, replace=False))
    grads = np.empty(positions.size)
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        grads[k] = (fp - fm) / (2 * step)
    return positions, grads


def grad_check(op_closure, x: np.ndarray, tol: float, seed: int = 0, max_entries: int | None = None) -> GradReport:
    """Check the backward of ``op_closure`` against finite differences.

    ``op_closure(x)`` must return ``(y, backward)`` where ``backward(dy)``
    returns ``dL/dx``. The scalar probed is ``sum(r * y)`` for a fixed random
    projection ``r``, evaluated in float64.
    """
    x64 = np.asarray(x, dtype=np.float64)
    y, backward = op_closure(x64.copy())
    r = np.random.default_rng(seed).standard_normal(np.shape(y))
    analytic = np.asarray(backward(r), dtype=np.float64).reshape(-1)

    def scalar(xv):
        return float((op_closure(xv)[0] * r).sum())

    pos, numeric = numeric_gradient(scalar, x64, max_entries=max_entries, rng=np.random.default_rng(seed + 1))
    rel, ab = relative_error(analytic[pos], numeric)
    return GradReport(rel, ab, tol, pos.size)


def graph_grad_check(graph, inputs: dict, tol: float, seed: int = 0, per_param: int = 2,
                     per_input: int = 8, step: float = 1e-5) -> GradReport:
    """Finite-difference check of a whole graph in float64.

    The probed scalar is ``sum_k sum(r_k * a_k)`` over the activations ``a_k``
    of all loss nodes, with fixed random ``r_k``. Every parameter tensor
    contributes ``per_param`` random entries and every input ``per_input``.
    Dropout masks are frozen by reseeding the forward RNG on each call.

    Biases are redrawn at random first: with zero biases, all-zero receptive
    fields (common after unpooling) sit exactly on the ReLU kink, where
    central differences measure the average of both slopes.
    """
    g = graph.cast(np.float64)
    feeds = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    nodes = [n.name for n in g.loss_nodes()]
    rng = np.random.default_rng(seed)
    for name in g.params:
        if name.endswith(".b"):
            g.params[name] = 0.1 * rng.standard_normal(g.params[name].shape)

    def run():
        g.forward(feeds, "train", np.random.default_rng(seed + 1))
        return [g.activation(n) for n in nodes]

    acts = run()
    rs = {n: rng.standard_normal(a.shape) for n, a in zip(nodes, acts)}
    g.backward(rs)
    analytic_p = {k: v.copy() for k, v in g.grads.items()}
    analytic_x = {k: np.asarray(v).copy() for k, v in g.input_grads.items()}

    def scalar():
        return float(sum((a * rs[n]).sum() for n, a in zip(nodes, run())))

    ana, num = [], []
    probes = [(g.params, k, per_param, analytic_p[k]) for k in g.params]
    probes += [(feeds, k, per_input, analytic_x.get(k, np.zeros_like(feeds[k]))) for k in feeds]
    for store, key, count, grad in probes:
        arr = store[key]
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, min(count, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + step
            fp = scalar()
            flat[i] = old - step
            fm = scalar()
            flat[i] = old
            num.append((fp - fm) / (2 * step))
            ana.append(grad.reshape(-1)[i])
    rel, ab = relative_error(np.array(ana), np.array(num))
    return GradReport(rel, ab, tol, len(num))
