"""Central finite-difference checks for functions built from :mod:`evogen.tensor.core`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: rel_error={self.rel_error:.3e}"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[..., float], arrays: Sequence[np.ndarray], index: int, step: float = 1e-5):
    x = arrays[index]
    g = np.zeros_like(x, dtype=np.float64)
    for pos in np.ndindex(x.shape):
        orig = x[pos]
        x[pos] = orig + step
        fp = f(*arrays)
        x[pos] = orig - step
        fm = f(*arrays)
        x[pos] = orig
        g[pos] = (fp - fm) / (2 * step)
    return g


def check_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], name: str = "fn",
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Coordinate-wise comparison of reverse-mode adjoints against central differences.

    ``fn`` maps Tensors to a scalar Tensor; ``arrays`` are float64 inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = grad(fn(*leaves), leaves, allow_unused=True)

    def f(*xs):
        return float(fn(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for i in range(len(arrays)):
        worst = max(worst, relative_error(analytic[i], numeric_grad(f, arrays, i, step)))
    return GradCheckResult(name, worst, worst < tol)


def check_directional(fn: Callable[[dict], Tensor], params: dict[str, np.ndarray], seed: int = 0,
                      stencil_step: float = 1e-3, tol: float = 1e-4, name: str = "model",
                      directions: int = 1) -> list[GradCheckResult]:
    """Per-tensor directional-derivative checks for functions of a parameter dict.

    For each parameter a random unit direction ``v`` is drawn and
    ``<grad, v>`` is compared with a fourth-order central difference along ``v``.
    """
    rng = np.random.default_rng(seed)
    leaves = {k: Tensor(v.astype(np.float64), requires_grad=True, name=k) for k, v in params.items()}
    keys = list(leaves)
    grads = dict(zip(keys, grad(fn(leaves), [leaves[k] for k in keys], allow_unused=True)))
    results = []
    for k in keys:
        worst = 0.0
        for _ in range(directions):
            v = rng.standard_normal(params[k].shape)
            v /= max(np.linalg.norm(v), 1e-12)
            base = {kk: Tensor(leaves[kk].data) for kk in keys}

            def at(t):
                shifted = dict(base)
                shifted[k] = Tensor(params[k] + t * v)
                return float(fn(shifted).data)

            # Fourth-order central stencil: a larger step keeps round-off low for
            # directions whose true derivative is (near) zero.
            h = stencil_step
            fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
            an = float(np.sum(grads[k] * v))
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, err)
        results.append(GradCheckResult(f"{name}:{k}", worst, worst < tol))
    return results
