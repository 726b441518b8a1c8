"""CIFAR-style ResNet teacher (ResNet-20/56/110 family) with per-stage taps."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import Tensor, no_grad, ops


@dataclass(frozen=True)
class CnnConfig:
    stages: int = 3
    blocks_per_stage: int = 9
    base_channels: int = 16
    input_size: int = 32
    num_classes: int = 10

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError(f"the teacher needs at least 2 stages, got {self.stages}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.input_size % 2 ** (self.stages - 1):
            raise ValueError(f"input_size {self.input_size} cannot be halved {self.stages - 1} times")

    @property
    def depth(self) -> int:
        """Layer count in the usual 6n+2 naming (for three stages)."""
        return 2 * self.stages * self.blocks_per_stage + 2

    @property
    def widths(self) -> list:
        return [self.base_channels * 2**s for s in range(self.stages)]

    @property
    def tap_sizes(self) -> list:
        return [self.input_size // 2**s for s in range(self.stages)]

    def to_dict(self) -> dict:
        return asdict(self)


def resnet_config(depth: int, **kwargs) -> CnnConfig:
    """CnnConfig for a named depth: 20, 56 and 110 give 3, 9 and 18 blocks per stage."""
    if (depth - 2) % 6:
        raise ValueError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
    return CnnConfig(stages=3, blocks_per_stage=(depth - 2) // 6, **kwargs)


@dataclass
class MapFeature:
    """Feature map after one stage: ``map`` is (B, H, W, C)."""

    map: Tensor
    stage_index: int

    def __post_init__(self):
        if self.map.ndim != 4 or min(self.map.shape[1:3]) < 1:
            raise ValueError(f"invalid feature map shape {self.map.shape}")


@dataclass
class CnnOutput:
    logits: Tensor
    taps: list


def _he(rng, shape, dtype):
    fan_in = shape[0] * shape[1] * shape[2] if len(shape) == 4 else shape[0]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_cnn(config: CnnConfig, rng: np.random.Generator, dtype=np.float32):
    """Return ``(params, buffers)``; buffers hold batch-norm running statistics."""
    params: dict = {}
    buffers: dict = {}

    def conv(name, cin, cout):
        params[name + ".weight"] = Tensor(_he(rng, (3, 3, cin, cout), dtype), True, name + ".weight")

    def bn(name, c):
        params[name + ".weight"] = Tensor(np.ones(c, dtype), True, name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(c, dtype), True, name + ".bias")
        buffers[name + ".running_mean"] = np.zeros(c, dtype)
        buffers[name + ".running_var"] = np.ones(c, dtype)

    widths = config.widths
    conv("stem.conv", 3, widths[0])
    bn("stem.bn", widths[0])
    cin = widths[0]
    for s, cout in enumerate(widths):
        for k in range(config.blocks_per_stage):
            pre = f"stages.{s}.{k}."
            conv(pre + "conv1", cin, cout)
            bn(pre + "bn1", cout)
            conv(pre + "conv2", cout, cout)
            bn(pre + "bn2", cout)
            cin = cout
    params["fc.weight"] = Tensor(_he(rng, (widths[-1], config.num_classes), dtype), True, "fc.weight")
    params["fc.bias"] = Tensor(np.zeros(config.num_classes, dtype), True, "fc.bias")
    return params, buffers


def _bn(x, params, buffers, name, training):
    return ops.batchnorm2d(
        x,
        params[name + ".weight"],
        params[name + ".bias"],
        buffers[name + ".running_mean"],
        buffers[name + ".running_var"],
        training=training,
    )


def _shortcut(x: Tensor, cout: int, stride: int) -> Tensor:
    # Parameter-free shortcut: subsample, then zero-pad the new channels.
    if stride == 1 and x.shape[-1] == cout:
        return x
    if stride != 1:
        x = x[:, ::stride, ::stride, :]
    extra = cout - x.shape[-1]
    return ops.pad(x, [(0, 0), (0, 0), (0, 0), (extra // 2, extra - extra // 2)])


def cnn_forward(config: CnnConfig, params: dict, buffers: dict, images, training: bool = False) -> CnnOutput:
    images = images if isinstance(images, Tensor) else Tensor(images)
    expected = (config.input_size, config.input_size, 3)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"teacher expects (B, {expected[0]}, {expected[1]}, 3) images, got {images.shape}")
    x = ops.conv2d(images, params["stem.conv.weight"], padding=1)
    x = ops.relu(_bn(x, params, buffers, "stem.bn", training))
    taps = []
    for s, cout in enumerate(config.widths):
        for k in range(config.blocks_per_stage):
            pre = f"stages.{s}.{k}."
            stride = 2 if (s > 0 and k == 0) else 1
            out = ops.conv2d(x, params[pre + "conv1.weight"], stride=stride, padding=1)
            out = ops.relu(_bn(out, params, buffers, pre + "bn1", training))
            out = ops.conv2d(out, params[pre + "conv2.weight"], padding=1)
            out = _bn(out, params, buffers, pre + "bn2", training)
            x = ops.relu(ops.add(out, _shortcut(x, cout, stride)))
        taps.append(MapFeature(x, s + 1))
    pooled = ops.mean(x, axis=(1, 2))
    logits = ops.add(ops.matmul(pooled, params["fc.weight"]), params["fc.bias"])
    return CnnOutput(logits, taps)


class FrozenTeacher:
    """Inference-only teacher.

    Holds private copies of the weights with ``requires_grad`` off, always runs
    batch norm on running statistics, and never records a tape, so no gradient
    can reach it.
    """

    def __init__(self, config: CnnConfig, params: dict, buffers: dict):
        self.config = config
        self.params = {
            k: Tensor(np.array(v.data if isinstance(v, Tensor) else v, copy=True), requires_grad=False, name=k)
            for k, v in params.items()
        }
        self.buffers = copy.deepcopy({k: np.asarray(v) for k, v in buffers.items()})
        for arr in self.buffers.values():
            arr.setflags(write=False)
        for t in self.params.values():
            t.data.setflags(write=False)

    def __call__(self, images) -> CnnOutput:
        with no_grad():
            return cnn_forward(self.config, self.params, self.buffers, images, training=False)


def freeze(config: CnnConfig, params: dict, buffers: dict) -> FrozenTeacher:
    return FrozenTeacher(config, params, buffers)
