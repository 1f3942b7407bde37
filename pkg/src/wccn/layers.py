"""Parameter-owning layers and the desk-scale trunk/heads of the cascade."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamRegistry:
    """Ordered ``name -> Tensor`` map; names are slash paths like ``trunk/conv1/weight``."""

    def __init__(self) -> None:
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state) -> None:
        missing = [k for k in self._params if k not in state]
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ad.ShapeError("load_state_dict", f"{k} of shape {t.shape}", arr.shape)
            t.data = arr.copy()


def _param_seed(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode("utf-8"))]


class Conv:
    kind = "Conv"

    def __init__(self, reg: ParamRegistry, name: str, in_ch: int, out_ch: int, k: int,
                 stride: int = 1, pad: int = 0) -> None:
        self.name, self.stride, self.pad, self.k = name, stride, pad, k
        self.weight = reg.register(f"{name}/weight",
                                   Tensor(np.zeros((out_ch, in_ch, k, k)), requires_grad=True))
        self.bias = reg.register(f"{name}/bias", Tensor(np.zeros(out_ch), requires_grad=True))

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class FC:
    kind = "FC"

    def __init__(self, reg: ParamRegistry, name: str, in_dim: int, out_dim: int) -> None:
        self.name = name
        self.weight = reg.register(f"{name}/weight",
                                   Tensor(np.zeros((out_dim, in_dim)), requires_grad=True))
        self.bias = reg.register(f"{name}/bias", Tensor(np.zeros(out_dim), requires_grad=True))

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)


def init_params(layer: Conv | FC, rng_seed: int) -> None:
    """He-normal weights (std sqrt(2/fan_in)) and zero biases, seeded per layer name."""
    rng = np.random.default_rng(_param_seed(rng_seed, layer.name))
    std = np.sqrt(2.0 / layer.fan_in)
    layer.weight.data = rng.normal(0.0, std, size=layer.weight.shape)
    layer.bias.data = np.zeros(layer.bias.shape)


def conv_out_size(n: int, k: int, stride: int = 1, pad: int = 0) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 4
    in_channels: int = 3
    trunk_channels: tuple[int, int, int] = (16, 32, 32)
    head_hidden: int = 64
    roi_size: int = 4
    fc_dim: int = 512
    pooling: str = "gap"

    def __post_init__(self) -> None:
        if self.pooling not in ("gap", "gmp"):
            raise ValueError(f"pooling must be 'gap' or 'gmp', got {self.pooling!r}")


class Trunk:
    """conv5x5/s2 - relu - maxpool2 - conv3x3 - relu - conv3x3 - relu (stride 4 overall)."""

    stride = 4
    receptive_field = 23

    def __init__(self, reg: ParamRegistry, cfg: ArchConfig) -> None:
        c1, c2, c3 = cfg.trunk_channels
        self.conv1 = Conv(reg, "trunk/conv1", cfg.in_channels, c1, 5, stride=2, pad=2)
        self.conv2 = Conv(reg, "trunk/conv2", c1, c2, 3, pad=1)
        self.conv3 = Conv(reg, "trunk/conv3", c2, c3, 3, pad=1)
        self.out_channels = c3

    @property
    def layers(self):
        return [self.conv1, self.conv2, self.conv3]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        h, w = conv_out_size(h, 5, 2, 2), conv_out_size(w, 5, 2, 2)
        return conv_out_size(h, 2, 2), conv_out_size(w, 2, 2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ad.ShapeError("forward_trunk", "NCHW image batch", x.shape)
        if min(x.shape[2:]) < self.receptive_field:
            raise ValueError(f"forward_trunk: input {x.shape[2:]} smaller than the "
                             f"{self.receptive_field}px receptive field")
        x = ad.max_pool2d(ad.relu(self.conv1(x)), 2)
        x = ad.relu(self.conv2(x))
        return ad.relu(self.conv3(x))


def forward_trunk(trunk: Trunk, image_batch: Tensor) -> Tensor:
    return trunk(image_batch)


class LocationHead:
    """conv3x3 - relu - conv1x1 to C class maps, then global average or max pooling."""

    def __init__(self, reg: ParamRegistry, cfg: ArchConfig, in_ch: int) -> None:
        self.conv1 = Conv(reg, "loc/conv1", in_ch, cfg.head_hidden, 3, pad=1)
        self.conv2 = Conv(reg, "loc/conv2", cfg.head_hidden, cfg.num_classes, 1)
        self.pooling = cfg.pooling

    @property
    def layers(self):
        return [self.conv1, self.conv2]

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        maps = self.conv2(ad.relu(self.conv1(feats)))
        pool = ad.global_avg_pool if self.pooling == "gap" else ad.global_max_pool
        return pool(maps), maps


class SegHead:
    """conv3x3 - relu - conv1x1 to C+1 per-pixel scores (last channel = background)."""

    def __init__(self, reg: ParamRegistry, cfg: ArchConfig, in_ch: int) -> None:
        self.conv1 = Conv(reg, "seg/conv1", in_ch, cfg.head_hidden, 3, pad=1)
        self.conv2 = Conv(reg, "seg/conv2", cfg.head_hidden, cfg.num_classes + 1, 1)

    @property
    def layers(self):
        return [self.conv1, self.conv2]

    def __call__(self, feats: Tensor) -> Tensor:
        return self.conv2(ad.relu(self.conv1(feats)))


class MILHead:
    """ROI pool to roi_size^2 cells, then FC-relu-FC-relu-FC producing C scores per box."""

    def __init__(self, reg: ParamRegistry, cfg: ArchConfig, in_ch: int, prefix: str = "mil",
                 num_outputs: int | None = None) -> None:
        self.roi_size = cfg.roi_size
        d = in_ch * cfg.roi_size ** 2
        self.fc1 = FC(reg, f"{prefix}/fc1", d, cfg.fc_dim)
        self.fc2 = FC(reg, f"{prefix}/fc2", cfg.fc_dim, cfg.fc_dim)
        self.score = FC(reg, f"{prefix}/score", cfg.fc_dim, num_outputs or cfg.num_classes)

    @property
    def layers(self):
        return [self.fc1, self.fc2, self.score]

    def __call__(self, feats: Tensor, rois, batch_indices=None) -> Tensor:
        pooled = ad.roi_pool(feats, rois, (self.roi_size, self.roi_size), batch_indices)
        x = ad.reshape(pooled, (pooled.shape[0], -1))
        x = ad.relu(self.fc1(x))
        x = ad.relu(self.fc2(x))
        return self.score(x)
