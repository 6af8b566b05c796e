"""Named parameter storage, deterministic init, and layer shorthands.

Parameters live in a flat ``dict`` keyed by hierarchical dotted names such as
``encoder.stage1.merge.conv.weight``. Every tensor is seeded from the global
seed and a checksum of its own name, so adding or removing a submodule never
perturbs the initial values of unrelated parameters.
"""

from __future__ import annotations

import zlib
from typing import Dict, Iterable, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype

Params = Dict[str, Tensor]

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class Initializer:
    """Adds freshly initialized tensors to a parameter dict."""

    def __init__(self, seed: int, params: Optional[Params] = None):
        self.seed = int(seed)
        self.params: Params = {} if params is None else params

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def _put(self, name: str, arr: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(arr.astype(default_dtype()), requires_grad=trainable)
        self.params[name] = t
        return t

    def conv(self, name: str, cin: int, cout: int, kh: int, kw: Optional[int] = None,
             bias: bool = True, gain: float = 1.0) -> None:
        kw = kh if kw is None else kw
        fan_in = cin * kh * kw
        bound = gain * np.sqrt(6.0 / fan_in)
        rng = self._rng(name + ".weight")
        self._put(name + ".weight", rng.uniform(-bound, bound, size=(cout, cin, kh, kw)))
        if bias:
            self._put(name + ".bias", np.zeros(cout))

    def bn(self, name: str, c: int) -> None:
        self._put(name + ".gamma", np.ones(c))
        self._put(name + ".beta", np.zeros(c))
        self._put(name + ".running_mean", np.zeros(c), trainable=False)
        self._put(name + ".running_var", np.ones(c), trainable=False)

    def linear(self, name: str, cin: int, cout: int, gain: float = 1.0) -> None:
        bound = gain * np.sqrt(3.0 / cin)
        rng = self._rng(name + ".weight")
        self._put(name + ".weight", rng.uniform(-bound, bound, size=(cout, cin)))
        self._put(name + ".bias", np.zeros(cout))


def conv_params(params: Params, name: str, stride=1, padding=0) -> F.ConvParams:
    return F.ConvParams(params[name + ".weight"], params.get(name + ".bias"), stride, padding)


def bn_params(params: Params, name: str) -> F.BNParams:
    return F.BNParams(
        params[name + ".gamma"], params[name + ".beta"],
        params[name + ".running_mean"], params[name + ".running_var"],
    )


def conv(params: Params, name: str, x: Tensor, stride=1, padding=0) -> Tensor:
    return F.conv2d(x, params[name + ".weight"], params.get(name + ".bias"), stride, padding)


def bn(params: Params, name: str, x: Tensor, training: bool) -> Tensor:
    return F.batch_norm(x, bn_params(params, name), training)


def count(params: Params, prefix: str = "", include_buffers: bool = False) -> int:
    return sum(
        t.size for k, t in params.items()
        if k.startswith(prefix) and (include_buffers or not is_buffer(k))
    )


def trainable(params: Params) -> Iterable[Tensor]:
    return (t for t in params.values() if t.requires_grad)


def to_precision(params: Params, dtype) -> Params:
    """Copy of ``params`` cast to ``dtype`` with trainability preserved."""
    return {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, dtype=dtype) for k, t in params.items()}
