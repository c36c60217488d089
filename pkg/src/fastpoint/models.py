"""Classification and part-segmentation networks.

Both networks share a two-stage encoder. Each stage samples a subset of the
current points with farthest point sampling, finds ``k`` neighbours for every
sampled point among the points *before* sampling, and runs an edge
convolution over those neighbourhoods.

The segmenter upsamples the encoder output twice by inverse-square-distance
interpolation, fuses it with the features of the matching resolution and runs
another edge convolution at each level. A tiled global feature is concatenated
to every point before the per-point head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from . import geometry as G
from . import tensor as T
from .layers import EdgeConv, FCStack, Module, SharedMLP, global_max_pool
from .tensor import Tensor


class CloudError(ValueError):
    """Input clouds violate the model's preconditions."""


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, (list, tuple)) else x


@dataclass(frozen=True)
class ClassifierConfig:
    input_points: int = 1024
    samples: tuple = (512, 128)
    ks: tuple = (20, 15)
    edge_channels: tuple = ((64, 64), (128, 128))
    mlp: tuple = (256, 512, 1024)
    fc: tuple = (512, 256)
    num_classes: int = 40
    keep_prob: float = 0.5

    task = "classify"

    def __post_init__(self):
        _check_encoder(self.input_points, self.samples, self.ks)

    @classmethod
    def scaled(cls, num_classes: int, input_points: int) -> "ClassifierConfig":
        """Default widths with sample sizes N/2 and N/8 (512 and 128 for N=1024)."""
        return cls(input_points=input_points, samples=(input_points // 2, input_points // 8),
                   num_classes=num_classes)

    desk = scaled

    def to_dict(self) -> dict:
        return {"task": self.task, **asdict(self)}


@dataclass(frozen=True)
class SegmenterConfig:
    input_points: int = 2048
    samples: tuple = (512, 128)
    ks: tuple = (20, 15)
    edge_channels: tuple = ((64, 64), (128, 128))
    up_channels: tuple = ((256, 256), (512, 512, 1024))
    up_ks: tuple = (15, 20)
    interp_k: int = 3
    head: tuple = (256, 256, 128)
    num_parts: int = 50
    keep_prob: float = 0.6

    task = "segment"

    def __post_init__(self):
        _check_encoder(self.input_points, self.samples, self.ks)
        if self.up_ks[0] > self.samples[0] or self.up_ks[1] > self.input_points:
            raise ValueError(f"upsampling k {self.up_ks} exceeds the point counts at those levels")
        if not 1 <= self.interp_k <= self.samples[1]:
            raise ValueError(f"interp_k={self.interp_k} must lie in [1, {self.samples[1]}]")

    @classmethod
    def scaled(cls, num_parts: int, input_points: int) -> "SegmenterConfig":
        """Default widths with sample sizes N/4 and N/16 (512 and 128 for N=2048)."""
        return cls(input_points=input_points, samples=(input_points // 4, input_points // 16),
                   num_parts=num_parts)

    @classmethod
    def desk(cls, num_parts: int, input_points: int = 512) -> "SegmenterConfig":
        """Encoder widths unchanged; decoder and head narrowed for CPU training."""
        return cls(input_points=input_points, samples=(input_points // 4, input_points // 16),
                   up_channels=((64, 64), (64, 64, 128)), head=(64, 64), num_parts=num_parts)

    def to_dict(self) -> dict:
        return {"task": self.task, **asdict(self)}


ModelConfig = Union[ClassifierConfig, SegmenterConfig]


def _check_encoder(n: int, samples, ks) -> None:
    m1, m2 = samples
    if not n >= m1 > m2 >= 1:
        raise ValueError(f"sample sizes {samples} must be strictly decreasing and at most {n}")
    if not (1 <= ks[0] <= n and 1 <= ks[1] <= m1):
        raise ValueError(f"neighbour counts {ks} exceed the source point counts ({n}, {m1})")


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    task = d.pop("task")
    cls = {"classify": ClassifierConfig, "segment": SegmenterConfig}[task]
    return cls(**{k: _tuples(v) for k, v in d.items()})


class Encoder(Module):
    def __init__(self, samples, ks, channels, rng: np.random.Generator, name: str):
        self.samples = samples
        self.ks = ks
        self.ec1 = EdgeConv(3, channels[0], ks[0], f"{name}.ec1", rng)
        self.ec2 = EdgeConv(self.ec1.out_channels, channels[1], ks[1], f"{name}.ec2", rng)

    def __call__(self, coords: np.ndarray, seeds: np.ndarray, training: bool, trace: Optional[dict]) -> dict:
        b = coords.shape[0]
        idx1 = G.farthest_point_sample_batch(coords, self.samples[0], seeds)
        xyz1 = np.take_along_axis(coords, idx1[..., None], axis=1)
        nbr1 = G.knn_search_batch(xyz1, coords, self.ks[0])
        f1 = self.ec1(Tensor(coords), idx1, nbr1, training)
        # Stage two starts from the first sampled point, i.e. the original seed.
        idx2 = G.farthest_point_sample_batch(xyz1, self.samples[1], np.zeros(b, dtype=np.int64))
        xyz2 = np.take_along_axis(xyz1, idx2[..., None], axis=1)
        nbr2 = G.knn_search_batch(xyz2, xyz1, self.ks[1])
        f2 = self.ec2(f1, idx2, nbr2, training)
        if trace is not None:
            trace["edge_conv1"] = f1.shape[1:]
            trace["edge_conv2"] = f2.shape[1:]
        return {"xyz1": xyz1, "f1": f1, "xyz2": xyz2, "f2": f2}


class _PointNet(Module):
    config: ModelConfig

    def _prepare(self, clouds, training: bool, rng, fps_seeds, strict: bool) -> tuple[np.ndarray, np.ndarray]:
        coords = np.asarray(clouds)
        if coords.ndim == 2:
            coords = coords[None]
        n = self.config.input_points
        if coords.ndim != 3 or coords.shape[1:] != (n, 3):
            raise CloudError(f"expected clouds of shape [B, {n}, 3], got {np.shape(clouds)}")
        if not np.isfinite(coords).all():
            raise CloudError("cloud contains non-finite coordinates")
        if strict:
            off = np.abs(coords.astype(np.float64).mean(axis=1)).max()
            if off > 1e-3:
                raise CloudError(f"cloud is not centred (|centroid| = {off:.3g}); normalize to the unit sphere first")
        coords = coords.astype(T.default_dtype())
        if fps_seeds is not None:
            seeds = np.asarray(fps_seeds, dtype=np.int64).reshape(coords.shape[0])
        elif training and rng is not None:
            seeds = rng.integers(0, n, coords.shape[0])
        else:
            seeds = np.array([G.canonical_seed(c) for c in coords])
        return coords, seeds


class Classifier(_PointNet):
    def __init__(self, config: ClassifierConfig = ClassifierConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.samples, config.ks, config.edge_channels, rng, "enc")
        self.mlp = SharedMLP(self.encoder.ec2.out_channels, config.mlp, "mlp", rng)
        self.fc = FCStack(config.mlp[-1], (*config.fc, config.num_classes), config.keep_prob, "fc", rng)

    def __call__(self, clouds, training: bool = False, rng: Optional[np.random.Generator] = None,
                 fps_seeds=None, strict: bool = False, trace: Optional[dict] = None) -> Tensor:
        """Logits ``[B, num_classes]`` for clouds ``[B, N, 3]``.

        Without explicit ``fps_seeds`` sampling starts at a random point when
        training with ``rng`` and at the point nearest the centroid otherwise.
        """
        coords, seeds = self._prepare(clouds, training, rng, fps_seeds, strict)
        enc = self.encoder(coords, seeds, training, trace)
        h = self.mlp(enc["f2"], training)
        g = global_max_pool(h)
        logits = self.fc(g, training, rng)
        if trace is not None:
            trace["mlp"] = h.shape[1:]
            trace["global"] = g.shape[1:]
            trace["logits"] = logits.shape[1:]
        return logits


class Segmenter(_PointNet):
    def __init__(self, config: SegmenterConfig = SegmenterConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.samples, config.ks, config.edge_channels, rng, "enc")
        c1 = self.encoder.ec1.out_channels
        c2 = self.encoder.ec2.out_channels
        self.up1 = EdgeConv(c2 + c1, config.up_channels[0], config.up_ks[0], "up1", rng)
        self.up2 = EdgeConv(self.up1.out_channels + 3, config.up_channels[1], config.up_ks[1], "up2", rng)
        width = 2 * self.up2.out_channels
        self.head = FCStack(width, (*config.head, config.num_parts), config.keep_prob, "head", rng)

    def __call__(self, clouds, training: bool = False, rng: Optional[np.random.Generator] = None,
                 fps_seeds=None, strict: bool = False, trace: Optional[dict] = None) -> Tensor:
        """Per-point logits ``[B, N, num_parts]``, rows in input order."""
        cfg = self.config
        coords, seeds = self._prepare(clouds, training, rng, fps_seeds, strict)
        b, n = coords.shape[:2]
        enc = self.encoder(coords, seeds, training, trace)
        xyz1, xyz2 = enc["xyz1"], enc["xyz2"]

        idx, w = G.interpolation_weights_batch(xyz1, xyz2, cfg.interp_k)
        up = T.concat([T.weighted_gather(enc["f2"], idx, w), enc["f1"]], axis=-1)
        u1 = self.up1(up, None, G.knn_search_batch(xyz1, xyz1, cfg.up_ks[0]), training)

        idx, w = G.interpolation_weights_batch(coords, xyz1, cfg.interp_k)
        up = T.concat([T.weighted_gather(u1, idx, w), Tensor(coords)], axis=-1)
        u2 = self.up2(up, None, G.knn_search_batch(coords, coords, cfg.up_ks[1]), training)

        g = global_max_pool(u2)
        tiled = T.broadcast_to(T.reshape(g, (b, 1, -1)), (b, n, g.shape[-1]))
        fused = T.concat([tiled, u2], axis=-1)
        logits = self.head(fused, training, rng)
        if trace is not None:
            trace["up1"] = u1.shape[1:]
            trace["up2"] = u2.shape[1:]
            trace["fused"] = fused.shape[1:]
            trace["logits"] = logits.shape[1:]
        return logits


def build_model(config: ModelConfig, seed: int = 0) -> Union[Classifier, Segmenter]:
    if isinstance(config, ClassifierConfig):
        return Classifier(config, seed)
    return Segmenter(config, seed)


def param_count(config: ModelConfig) -> int:
    """Number of learnable scalars in the network described by ``config``."""
    return int(sum(p.data.size for p in build_model(config).parameters()))
