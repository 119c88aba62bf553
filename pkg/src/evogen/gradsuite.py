"""Finite-difference suite: every differentiable primitive plus one full toy model, at float64."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .featurize import grid_from_arrays
from .hyperformer import hyper_attention, rope
from .tensor.gradcheck import GradCheckResult, check_directional, check_grad
from .tensor.random import SeedStream

TOL = 1e-4


def _r(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        x = np.abs(x) + lo
    return x


def _weighted(rng, out_shape):
    # Random readout weights so each check exercises a full Jacobian, not just its row sums.
    w = T.Tensor(rng.standard_normal(out_shape))
    return lambda y: T.sum_(y * w)


def _then(f, readout):
    return lambda *xs: readout(f(*xs))


def primitive_cases(seed: int = 0) -> list[tuple[str, callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    a, b = _r(rng, 3, 4), _r(rng, 3, 4)
    pos = _r(rng, 3, 4, lo=0.5)
    w34 = _weighted(rng, (3, 4))
    cases = [
        ("add", lambda x, y: w34(x + y), [a, _r(rng, 4)]),
        ("subtract", lambda x, y: w34(x - y), [a, b]),
        ("multiply", lambda x, y: w34(x * y), [a, b]),
        ("divide", lambda x, y: w34(x / y), [a, pos]),
        ("negative", lambda x: w34(-x), [a]),
        ("power", lambda x: w34(T.power(x, 2.5)), [pos]),
        ("square", lambda x: w34(T.square(x)), [a]),
        ("sqrt", lambda x: w34(T.sqrt(x)), [pos]),
        ("exp", lambda x: w34(T.exp(x)), [a]),
        ("log", lambda x: w34(T.log(x)), [pos]),
        ("tanh", lambda x: w34(T.tanh(x)), [a]),
        ("sigmoid", lambda x: w34(T.sigmoid(x)), [a]),
        ("gelu", lambda x: w34(T.gelu(x)), [a]),
        # Inputs kept away from the kinks.
        ("relu", lambda x: w34(T.relu(x)), [np.sign(a) * (np.abs(a) + 0.1)]),
        ("clip", lambda x: w34(T.clip(x, -0.5, 0.5)), [np.where(np.abs(a - 0.5) < 0.05, a + 0.2, a)]),
        ("where", lambda x, y: w34(T.where(a > 0, x, y)), [a, b]),
        ("matmul", _then(lambda x, y: T.matmul(x, y), _weighted(rng, (2, 3, 5))),
         [_r(rng, 2, 3, 4), _r(rng, 4, 5)]),
        ("sum", _then(lambda x: T.sum_(x, axis=1), _weighted(rng, 3)), [a]),
        ("mean", _then(lambda x: T.mean(x, axis=0, keepdims=True), _weighted(rng, (1, 4))), [a]),
        ("softmax", lambda x: w34(T.softmax(x, axis=-1)), [a]),
        ("log_softmax", lambda x: w34(T.log_softmax(x, axis=-1)), [a]),
        ("layer_norm", lambda x, s, o: w34(T.layer_norm(x, s, o)), [a, _r(rng, 4), _r(rng, 4)]),
        ("reshape", _then(lambda x: T.reshape(x, (4, 3)), _weighted(rng, (4, 3))), [a]),
        ("transpose", _then(lambda x: T.transpose(x), _weighted(rng, (4, 3))), [a]),
        ("swapaxes", _then(lambda x: T.swapaxes(x, 0, 2), _weighted(rng, (4, 3, 2))),
         [_r(rng, 2, 3, 4)]),
        ("expand_dims", _then(lambda x: T.expand_dims(x, 1), _weighted(rng, (3, 2, 4))), [a]),
        ("broadcast_to", _then(lambda x: T.broadcast_to(x, (2, 3, 4)), _weighted(rng, (2, 3, 4))),
         [_r(rng, 3, 1)]),
        ("slice_basic", _then(lambda x: x[1:, ::2], _weighted(rng, (2, 2))), [a]),
        ("slice_advanced", _then(lambda x: x[[0, 2, 2]], _weighted(rng, (3, 4))), [a]),
        ("gather", _then(lambda x: T.gather(x, np.array([[0, 3], [3, 1]]), axis=1), _weighted(rng, (3, 2, 2))), [a]),
        ("concat", _then(lambda x, y: T.concat([x, y], axis=0), _weighted(rng, (6, 4))), [a, b]),
        ("stack", _then(lambda x, y: T.stack([x, y], axis=1), _weighted(rng, (3, 2, 4))), [a, b]),
        ("rope", _then(lambda x: rope(x, np.arange(5)), _weighted(rng, (2, 5, 4))),
         [_r(rng, 2, 5, 4)]),
        ("hyper_attention", _then(lambda q, k, v, bb: hyper_attention(q, k, v, bb), _weighted(rng, (5, 4))),
         [_r(rng, 5, 4), _r(rng, 5, 4), _r(rng, 5, 4), _r(rng, 5, 5)]),
    ]
    return cases


def check_primitives(seed: int = 0, tol: float = TOL) -> list[GradCheckResult]:
    return [check_grad(fn, arrays, name, tol=tol) for name, fn, arrays in primitive_cases(seed)]


def check_toy_model(seed: int = 0, tol: float = TOL, directions: int = 2) -> list[GradCheckResult]:
    """Toy model: 2+2 blocks, c_s=8, c_p=4, one latent level of dim 2, L=6, N=3.

    All output projections start non-zero so every path carries gradient.
    """
    from .model import ModelConfig, elbo, init_params
    cfg = ModelConfig.toy(latent_dims=(2,))
    params = init_params(cfg, seed, np.float64, zero_init=False)
    s = SeedStream(f"gradsuite/{seed}")
    tokens = s.fork("tokens").integers(21, (3, 6))
    dels = s.fork("dels").integers(4, (3, 6))
    dels[0] = 0
    tokens[1:][s.fork("gaps").uniform((2, 6)) < 0.2] = 21
    grid = grid_from_arrays(tokens, dels)
    ctx, tgt = grid.rows([0, 1]), grid.rows([2])

    def loss(P):
        return elbo(ctx, tgt, P, cfg, 1.0, SeedStream("gradsuite-noise")).total

    return check_directional(loss, params, seed=seed, tol=tol, name="toy_model", directions=directions)


def run(seed: int = 0, tol: float = TOL) -> list[GradCheckResult]:
    return check_primitives(seed, tol) + check_toy_model(seed, tol)
