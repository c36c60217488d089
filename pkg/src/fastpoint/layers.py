"""Network building blocks composed from the tensor primitives."""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, DimensionError, Parameter, Tensor


class Module:
    """Container that discovers parameters and batch-norm layers in its attributes."""

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def parameters(self) -> list[Parameter]:
        own = [v for v in vars(self).values() if isinstance(v, Parameter)]
        for child in self.children():
            own.extend(child.parameters())
        return own

    def batch_norms(self) -> list["BatchNorm"]:
        found = [self] if isinstance(self, BatchNorm) else []
        for child in self.children():
            found.extend(child.batch_norms())
        return found

    def set_bn_decay(self, decay: float) -> None:
        for bn in self.batch_norms():
            bn.state.decay = decay

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.astype(dtype)
        for bn in self.batch_norms():
            bn.state.mean = bn.state.mean.astype(dtype)
            bn.state.var = bn.state.var.astype(dtype)


class Linear(Module):
    """Affine map ``x @ W + b`` with Glorot-uniform weights and zero bias.

    Layers feeding batch norm are built with ``bias=False``: the norm's shift
    subsumes the bias, and in training mode its gradient is identically zero.
    """

    def __init__(self, fan_in: int, fan_out: int, name: str, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.W = Parameter(rng.uniform(-limit, limit, (fan_in, fan_out)), f"{name}.W")
        self.b = Parameter(np.zeros(fan_out), f"{name}.b") if bias else None

    @property
    def fan_in(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise DimensionError(f"{self.W.name}: expected {self.fan_in} input channels, got {x.shape[-1]}")
        out = T.matmul(x, self.W)
        return out if self.b is None else out + self.b


class BatchNorm(Module):
    def __init__(self, channels: int, name: str):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.state = BatchNormState.fresh(channels)
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, training)


class SharedMLP(Module):
    """Stack of affine -> batch norm -> ReLU applied identically along the last axis."""

    def __init__(self, in_channels: int, channels: Sequence[int], name: str, rng: np.random.Generator):
        if not channels or min(channels) < 1:
            raise ValueError(f"{name}: channel sizes must be a nonempty list of positive ints, got {channels}")
        dims = [in_channels, *channels]
        self.linears = [Linear(dims[i], dims[i + 1], f"{name}.{i}", rng, bias=False) for i in range(len(channels))]
        self.norms = [BatchNorm(dims[i + 1], f"{name}.{i}.bn") for i in range(len(channels))]

    @property
    def out_channels(self) -> int:
        return self.linears[-1].W.shape[1]

    def __call__(self, x: Tensor, training: bool, start: int = 0) -> Tensor:
        for lin, bn in zip(self.linears[start:], self.norms[start:]):
            x = T.relu(bn(lin(x), training))
        return x


class EdgeConv(Module):
    """Edge convolution with max aggregation.

    For a center point ``x_i`` and each of its ``k`` neighbours ``x_j`` the edge
    feature ``[x_i, x_j - x_i]`` passes through a shared MLP; the result is the
    channelwise max over the neighbours.

    The first affine map is evaluated per point rather than per edge, using
    ``[x_i, x_j - x_i] @ W = x_i @ (W_top - W_bot) + x_j @ W_bot``.
    """

    def __init__(self, in_channels: int, channels: Sequence[int], k: int, name: str, rng: np.random.Generator):
        self.in_channels = in_channels
        self.k = k
        self.mlp = SharedMLP(2 * in_channels, channels, name, rng)

    @property
    def out_channels(self) -> int:
        return self.mlp.out_channels

    def __call__(self, feats: Tensor, centers: Optional[np.ndarray], neighbors: np.ndarray,
                 training: bool) -> Tensor:
        """``feats[B, N, F]``; ``centers[B, M]`` indexes the points to update (all
        points when None); ``neighbors[B, M, k]`` indexes the same ``N`` points."""
        b, n, f = feats.shape
        if f != self.in_channels:
            raise DimensionError(f"edge conv expects {self.in_channels} channels, got {f}")
        neighbors = np.asarray(neighbors)
        if neighbors.shape[-1] != self.k:
            raise ValueError(f"edge conv built for k={self.k}, neighbour table has k={neighbors.shape[-1]}")
        if neighbors.min() < 0 or neighbors.max() >= n:
            raise IndexError(f"neighbour index out of range for {n} source points")
        m = neighbors.shape[1]
        first = self.mlp.linears[0]
        w_center, w_edge = first.W[:f], first.W[f:]
        center_feats = feats if centers is None else T.gather(feats, centers)
        own = T.reshape(T.matmul(center_feats, w_center - w_edge), (b, m, 1, -1))
        edges = T.gather(T.matmul(feats, w_edge), neighbors) + own
        x = T.relu(self.mlp.norms[0](edges, training))
        x = self.mlp(x, training, start=1)
        return T.max_over(x, axis=2)


def global_max_pool(feats: Tensor) -> Tensor:
    """``[B, N, F]`` -> ``[B, F]``."""
    return T.max_over(feats, axis=1)


class FCStack(Module):
    """Hidden layers of affine -> BN -> ReLU -> dropout, then a final affine map.

    Works on ``[B, F]`` or per point on ``[B, N, F]``.
    """

    def __init__(self, in_channels: int, sizes: Sequence[int], keep_prob: float, name: str,
                 rng: np.random.Generator):
        if not sizes:
            raise ValueError(f"{name}: sizes must be nonempty")
        dims = [in_channels, *sizes]
        self.linears = [Linear(dims[i], dims[i + 1], f"{name}.{i}", rng, bias=i == len(sizes) - 1)
                        for i in range(len(sizes))]
        self.norms = [BatchNorm(dims[i + 1], f"{name}.{i}.bn") for i in range(len(sizes) - 1)]
        self.keep_prob = keep_prob

    def __call__(self, x: Tensor, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
        for lin, bn in zip(self.linears[:-1], self.norms):
            x = T.dropout(T.relu(bn(lin(x), training)), self.keep_prob, training, rng)
        return self.linears[-1](x)
