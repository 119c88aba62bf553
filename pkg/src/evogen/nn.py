"""Parameter construction and the two layer shapes every module uses (linear, layer norm).

Parameters live in a flat ``{path: array}`` dict; ``path`` components are joined with '/'.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm
from .tensor.random import SeedStream


class ParamBuilder:
    def __init__(self, stream: SeedStream, dtype=np.float64, zero_init: bool = True):
        self.stream = stream
        self.dtype = np.dtype(dtype)
        self.zero_init = zero_init
        self.params: dict[str, np.ndarray] = {}

    def _draw(self, name: str, shape, scale: float) -> np.ndarray:
        return (self.stream.fork(name).normal(shape) * scale).astype(self.dtype)

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True, final: bool = False):
        """LeCun-normal weights; ``final`` layers start at zero when ``zero_init`` is set."""
        if final and self.zero_init:
            w = np.zeros((fan_in, fan_out), dtype=self.dtype)
        else:
            scale = 1.0 / np.sqrt(fan_in)
            if final:
                scale *= 0.5
            w = self._draw(name + "/w", (fan_in, fan_out), scale)
        self.params[name + "/w"] = w
        if bias:
            self.params[name + "/b"] = np.zeros(fan_out, dtype=self.dtype)

    def norm(self, name: str, dim: int):
        self.params[name + "/scale"] = np.ones(dim, dtype=self.dtype)
        self.params[name + "/offset"] = np.zeros(dim, dtype=self.dtype)

    def table(self, name: str, shape, scale: float = 1.0, final: bool = False):
        if final and self.zero_init:
            self.params[name] = np.zeros(shape, dtype=self.dtype)
        else:
            self.params[name] = self._draw(name, shape, scale)


class Scope:
    """Prefix view over a flat parameter dict."""

    __slots__ = ("params", "prefix")

    def __init__(self, params: dict[str, Tensor], prefix: str = ""):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return (self.prefix + name) in self.params

    def sub(self, name: str) -> "Scope":
        return Scope(self.params, self.prefix + name + "/")


def linear(x: Tensor, P: Scope, name: str) -> Tensor:
    out = x @ P[name + "/w"]
    if (name + "/b") in P:
        out = out + P[name + "/b"]
    return out


def norm(x: Tensor, P: Scope, name: str) -> Tensor:
    return layer_norm(x, P[name + "/scale"], P[name + "/offset"])
