"""Residual FCN trunk with a dense segmentation head and an image-level head.

The trunk produces one shared feature map per image; the segmentation head is a
1x1 transfer convolution to K class logits followed by bilinear upsampling, the
classification head is global average pooling followed by a single linear unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype, rng_for

NUM_CLASSES = 5


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stem_stride: int = 2
    # (block_count, channels, first-block stride) per stage
    stages: tuple = ((2, 16, 1), (2, 32, 2), (2, 64, 1))

    def __post_init__(self):
        if self.stem_channels <= 0 or self.stem_stride <= 0:
            raise ValueError("stem channels and stride must be positive")
        for blocks, ch, stride in self.stages:
            if blocks <= 0 or ch <= 0 or stride <= 0:
                raise ValueError(f"invalid stage {(blocks, ch, stride)}")

    @property
    def total_stride(self) -> int:
        s = self.stem_stride
        for _, _, stride in self.stages:
            s *= stride
        return s

    @property
    def feature_channels(self) -> int:
        return self.stages[-1][1] if self.stages else self.stem_channels


def _blocks(config: BackboneConfig):
    """Yield (name, in_ch, out_ch, stride) for every residual block."""
    cin = config.stem_channels
    for si, (count, cout, stride) in enumerate(config.stages):
        for bi in range(count):
            yield f"stage{si + 1}.block{bi + 1}", cin, cout, stride if bi == 0 else 1
            cin = cout


def parameter_count(config: BackboneConfig, k: int = NUM_CLASSES) -> int:
    """Trainable element count, derived from the config alone."""
    total = 9 * config.stem_channels  # stem conv, single input channel, no bias
    for _, cin, cout, stride in _blocks(config):
        total += 2 * cin + 9 * cin * cout + 2 * cout + 9 * cout * cout
        if stride != 1 or cin != cout:
            total += cin * cout
    cf = config.feature_channels
    total += 2 * cf  # final norm
    total += cf * k + k  # transfer conv
    total += cf + 1  # fc
    return total


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(default_dtype()), requires_grad=True)


class MtlModel:
    """Parameter store for the trunk and both heads.

    ``params`` maps names to trainable tensors in a fixed order; ``buffers``
    holds the norm running statistics.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig(), k: int = NUM_CLASSES,
                 seed: int = 0):
        self.config = config
        self.k = k
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = rng_for(seed, "init")
        dt = default_dtype()

        def conv(name, cin, cout, ksize):
            self.params[name] = _he(rng, (cout, cin, ksize, ksize), cin * ksize * ksize)

        def norm(name, ch):
            self.params[f"{name}.gamma"] = Tensor(np.ones(ch, dt), requires_grad=True)
            self.params[f"{name}.beta"] = Tensor(np.zeros(ch, dt), requires_grad=True)
            self.buffers[f"{name}.running_mean"] = np.zeros(ch, dt)
            self.buffers[f"{name}.running_var"] = np.ones(ch, dt)

        conv("stem.conv", 1, config.stem_channels, 3)
        for name, cin, cout, stride in _blocks(config):
            norm(f"{name}.bn1", cin)
            conv(f"{name}.conv1", cin, cout, 3)
            norm(f"{name}.bn2", cout)
            conv(f"{name}.conv2", cout, cout, 3)
            if stride != 1 or cin != cout:
                conv(f"{name}.proj", cin, cout, 1)
        cf = config.feature_channels
        norm("final.bn", cf)
        conv("snet.transfer.weight", cf, k, 1)
        self.params["snet.transfer.bias"] = Tensor(np.zeros(k, dt), requires_grad=True)
        self.params["cnet.fc.weight"] = _he(rng, (cf, 1), cf)
        self.params["cnet.fc.bias"] = Tensor(np.zeros(1, dt), requires_grad=True)

        assert self.params["snet.transfer.weight"].shape[2:] == (1, 1)

    def train(self) -> "MtlModel":
        self.training = True
        return self

    def eval(self) -> "MtlModel":
        self.training = False
        return self

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def head_params(self, head: str) -> list[str]:
        return [n for n in self.params if n.startswith(head + ".")]

    def backbone_params(self) -> list[str]:
        return [n for n in self.params if not n.startswith(("snet.", "cnet."))]

    def state(self) -> dict[str, np.ndarray]:
        """Every stored array (parameters then buffers), in checkpoint order."""
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def _bn(self, name: str, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
                            training=self.training)


def backbone_forward(model: MtlModel, image: Tensor) -> Tensor:
    """Shared feature map T_f, shape [N, C_f, H/s, W/s]."""
    cfg = model.config
    if image.data.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"expected image batch [N, 1, H, W], got {image.shape}")
    s = cfg.total_stride
    h, w = image.shape[2:]
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} must be divisible by the backbone stride {s}")
    p = model.params
    x = F.conv2d(image, p["stem.conv"], None, stride=cfg.stem_stride, padding=1)
    for name, cin, cout, stride in _blocks(cfg):
        pre = F.relu(model._bn(f"{name}.bn1", x))
        skip = F.conv2d(pre, p[f"{name}.proj"], None, stride=stride) if f"{name}.proj" in p else x
        y = F.conv2d(pre, p[f"{name}.conv1"], None, stride=stride, padding=1)
        y = F.relu(model._bn(f"{name}.bn2", y))
        y = F.conv2d(y, p[f"{name}.conv2"], None, stride=1, padding=1)
        x = F.add(y, skip)
    return F.relu(model._bn("final.bn", x))


def snet_forward(model: MtlModel, tf: Tensor, out_h: int, out_w: int) -> Tensor:
    logits = F.conv2d(tf, model["snet.transfer.weight"], model["snet.transfer.bias"])
    return F.upsample_bilinear(logits, out_h, out_w)


def cnet_forward(model: MtlModel, tf: Tensor) -> Tensor:
    pooled = F.global_avg_pool(tf)
    return F.linear(pooled, model["cnet.fc.weight"], model["cnet.fc.bias"])


def mtl_forward(model: MtlModel, image: Tensor, heads=("seg", "cls")) -> tuple[Optional[Tensor], Optional[Tensor]]:
    """One trunk pass feeding the requested heads; returns (seg_logits, cls_logit)."""
    tf = backbone_forward(model, image)
    seg = snet_forward(model, tf, image.shape[2], image.shape[3]) if "seg" in heads else None
    cls = cnet_forward(model, tf) if "cls" in heads else None
    return seg, cls


def count_backbone_convs(config: BackboneConfig) -> int:
    n = 1
    for _, cin, cout, stride in _blocks(config):
        n += 2 + (1 if stride != 1 or cin != cout else 0)
    return n
