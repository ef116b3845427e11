"""
Fully connected building blocks with hand-written backward passes.

Layers are stateless: parameters live in a flat dict keyed by
"<prefix>.<name>" owned by the model, so the same layer objects serve
training, inference, gradient checks and transfer copies. Each forward
returns (output, cache); each backward takes the cache and returns
(grad_input, grads_by_parameter_name).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

Params = dict[str, np.ndarray]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class Layer(Protocol):
    def param_names(self) -> list[str]: ...

    def init(self, rng: np.random.Generator, dtype) -> Params: ...

    def buffers(self, dtype) -> Params: ...

    def forward(self, params: Params, x: np.ndarray, train: bool, rng: np.random.Generator | None) -> tuple[np.ndarray, Any]: ...

    def backward(self, params: Params, cache: Any, dout: np.ndarray) -> tuple[np.ndarray, Params]: ...


@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int

    def param_names(self) -> list[str]:
        return [f"{self.name}.W", f"{self.name}.b"]

    def init(self, rng, dtype) -> Params:
        scale = np.sqrt(2.0 / self.n_in)
        return {
            f"{self.name}.W": (rng.standard_normal((self.n_in, self.n_out)) * scale).astype(dtype),
            f"{self.name}.b": np.zeros(self.n_out, dtype=dtype),
        }

    def buffers(self, dtype) -> Params:
        return {}

    def forward(self, params, x, train, rng):
        return x @ params[f"{self.name}.W"] + params[f"{self.name}.b"], x

    def backward(self, params, cache, dout):
        x = cache
        grads = {
            f"{self.name}.W": x.T @ dout,
            f"{self.name}.b": dout.sum(axis=0),
        }
        return dout @ params[f"{self.name}.W"].T, grads


@dataclass(frozen=True)
class BatchNorm:
    """Batch statistics in training, running statistics in eval mode."""
    name: str
    size: int

    def param_names(self) -> list[str]:
        return [f"{self.name}.gamma", f"{self.name}.beta"]

    def init(self, rng, dtype) -> Params:
        return {
            f"{self.name}.gamma": np.ones(self.size, dtype=dtype),
            f"{self.name}.beta": np.zeros(self.size, dtype=dtype),
        }

    def buffers(self, dtype) -> Params:
        return {
            f"{self.name}.running_mean": np.zeros(self.size, dtype=dtype),
            f"{self.name}.running_var": np.ones(self.size, dtype=dtype),
        }

    def forward(self, params, x, train, rng):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mean = params[f"{self.name}.running_mean"]
            var = params[f"{self.name}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (x - mean) * inv_std
        stats = (mean, var) if train else None
        return gamma * xhat + beta, (xhat, inv_std, train, stats)

    def backward(self, params, cache, dout):
        xhat, inv_std, train, _ = cache
        gamma = params[f"{self.name}.gamma"]
        grads = {
            f"{self.name}.gamma": (dout * xhat).sum(axis=0),
            f"{self.name}.beta": dout.sum(axis=0),
        }
        dxhat = dout * gamma
        if not train:
            return dxhat * inv_std, grads
        n = dout.shape[0]
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, grads

    def updated_buffers(self, params, cache) -> Params:
        _, _, train, stats = cache
        if not train:
            return {}
        mean, var = stats
        rm = f"{self.name}.running_mean"
        rv = f"{self.name}.running_var"
        return {
            rm: (BN_MOMENTUM * params[rm] + (1 - BN_MOMENTUM) * mean).astype(params[rm].dtype),
            rv: (BN_MOMENTUM * params[rv] + (1 - BN_MOMENTUM) * var).astype(params[rv].dtype),
        }


@dataclass(frozen=True)
class ReLU:
    name: str

    def param_names(self) -> list[str]:
        return []

    def init(self, rng, dtype) -> Params:
        return {}

    def buffers(self, dtype) -> Params:
        return {}

    def forward(self, params, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dout):
        return dout * cache, {}


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout; identity in eval mode or at rate 0."""
    name: str
    rate: float

    def param_names(self) -> list[str]:
        return []

    def init(self, rng, dtype) -> Params:
        return {}

    def buffers(self, dtype) -> Params:
        return {}

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, params, cache, dout):
        if cache is None:
            return dout, {}
        return dout * cache, {}


class MLP:
    """
    A stack of layers. Hidden blocks are Dense -> BatchNorm -> ReLU ->
    Dropout; the output block is a bare Dense, optionally followed by ReLU.
    """

    def __init__(
        self,
        name: str,
        n_in: int,
        hidden: tuple[int, ...],
        n_out: int,
        dropout: float = 0.0,
        batchnorm: bool = True,
        output_relu: bool = False,
    ):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        layers: list[Layer] = []
        width = n_in
        for i, h in enumerate(hidden):
            layers.append(Dense(f"{name}.{i}.dense", width, h))
            if batchnorm:
                layers.append(BatchNorm(f"{name}.{i}.bn", h))
            layers.append(ReLU(f"{name}.{i}.relu"))
            if dropout > 0:
                layers.append(Dropout(f"{name}.{i}.dropout", dropout))
            width = h
        layers.append(Dense(f"{name}.out", width, n_out))
        if output_relu:
            layers.append(ReLU(f"{name}.out.relu"))
        self.layers = layers

    def init(self, rng: np.random.Generator, dtype) -> Params:
        params: Params = {}
        for layer in self.layers:
            params.update(layer.init(rng, dtype))
            params.update(layer.buffers(dtype))
        return params

    def trainable_names(self) -> list[str]:
        names: list[str] = []
        for layer in self.layers:
            names.extend(layer.param_names())
        return names

    def forward(self, params: Params, x: np.ndarray, train: bool, rng: np.random.Generator | None = None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x, train, rng)
            caches.append(cache)
        return x, caches

    def backward(self, params: Params, caches: list, dout: np.ndarray) -> tuple[np.ndarray, Params]:
        grads: Params = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, g = layer.backward(params, cache, dout)
            grads.update(g)
        return dout, grads

    def updated_buffers(self, params: Params, caches: list) -> Params:
        out: Params = {}
        for layer, cache in zip(self.layers, caches):
            if isinstance(layer, BatchNorm):
                out.update(layer.updated_buffers(params, cache))
        return out
