"""Dual-scale segmentation networks.

Two fully-convolutional model scales share one contract: image in, per-pixel
foreground probability out, same spatial size. The foundation scale is a
deeper/wider net whose parameter count is >=10x the lightweight scale, which
is what drives the communication-ratio arithmetic downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_FLOOR, ShapeError, Tensor, conv2d, param_stream_bytes
from .seeding import rng_for

DICE_EPS = 1e-7


@dataclass(frozen=True)
class ModelSpec:
    scale_class: str  # "foundation" | "lightweight"
    input_size: int = 32
    channels: tuple[int, ...] = (8, 8, 1)  # output channels per layer; input has 1 channel
    kernel_sizes: tuple[int, ...] = (3, 3, 3)

    def __post_init__(self):
        if self.scale_class not in ("foundation", "lightweight"):
            raise ValueError(f"unknown scale_class {self.scale_class!r}")
        if len(self.channels) != len(self.kernel_sizes):
            raise ValueError("channels and kernel_sizes must have equal length")
        if self.channels[-1] != 1:
            raise ValueError("final layer must emit a single probability channel")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel_sizes}")

    def layer_dims(self) -> list[tuple[int, int, int]]:
        """(in_channels, out_channels, kernel) per layer."""
        dims = []
        c_in = 1
        for c_out, k in zip(self.channels, self.kernel_sizes):
            dims.append((c_in, c_out, k))
            c_in = c_out
        return dims

    def param_count(self) -> int:
        return sum(c_in * c_out * k * k + c_out for c_in, c_out, k in self.layer_dims())

    def stream_bytes(self) -> int:
        return param_stream_bytes(self.param_count())


def lightweight_spec(input_size: int = 32, width: int = 8, depth: int = 3) -> ModelSpec:
    channels = (width,) * (depth - 1) + (1,)
    return ModelSpec("lightweight", input_size, channels, (3,) * depth)


def foundation_spec(input_size: int = 32, width: int = 16, depth: int = 6) -> ModelSpec:
    channels = (width,) * (depth - 1) + (1,)
    return ModelSpec("foundation", input_size, channels, (3,) * depth)


@dataclass
class ModelParams:
    spec: ModelSpec
    values: Tensor  # flat float64 vector, length spec.param_count()

    def __post_init__(self):
        if self.values.size != self.spec.param_count():
            raise ShapeError(
                f"param vector length {self.values.size} != spec count {self.spec.param_count()}"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, Tensor(self.values.data.copy(), requires_grad=self.values.requires_grad))


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """He-style init: weights ~ N(0, 2/fan_in), biases exactly zero."""
    rng = rng_for(seed, "init", spec.scale_class)
    chunks = []
    for c_in, c_out, k in spec.layer_dims():
        fan_in = c_in * k * k
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=c_in * c_out * k * k))
        chunks.append(np.zeros(c_out))
    return ModelParams(spec, Tensor(np.concatenate(chunks), requires_grad=True))


def forward_batch(params: ModelParams, images: np.ndarray) -> Tensor:
    """(B, H, W) images in [0,1] -> (B, H, W) foreground probabilities in (0,1)."""
    spec = params.spec
    if images.ndim == 2:
        images = images[None]
    b, h, w = images.shape
    if h != spec.input_size or w != spec.input_size:
        raise ShapeError(f"image size {(h, w)} != spec input_size {spec.input_size}")
    # per-image mean centering makes predictions invariant to absolute
    # intensity offsets, which differ across client styles
    centered = images - images.mean(axis=(1, 2), keepdims=True)
    x = Tensor(centered.reshape(b, 1, h, w))
    offset = 0
    dims = spec.layer_dims()
    for li, (c_in, c_out, k) in enumerate(dims):
        n_w = c_in * c_out * k * k
        weight = params.values.segment(offset, n_w, (c_out, c_in, k, k))
        offset += n_w
        bias = params.values.segment(offset, c_out, (c_out,))
        offset += c_out
        x = conv2d(x, weight, bias)
        # leaky rectifier (clamp/mul/add composition) avoids dead units in the deep scale
        x = x.sigmoid() if li == len(dims) - 1 else x.clamp(lo=0.0) * 0.9 + x * 0.1
    return x.reshape(b, h, w)


def forward(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Single-image inference; pure, returns a plain (H, W) array."""
    return forward_batch(params, np.asarray(image, dtype=np.float64)[None]).data[0]


def _check_binary(mask: np.ndarray) -> None:
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask must be binary {0,1}")


def supervised_loss(prob: Tensor, mask: np.ndarray) -> Tensor:
    """BCE + (1 - soft-Dice), averaged per sample; differentiable in prob."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != prob.shape:
        raise ShapeError(f"prob shape {prob.shape} != mask shape {mask.shape}")
    _check_binary(mask)
    if prob.data.ndim == 2:
        prob = prob.reshape(1, *prob.shape)
        mask = mask[None]
    m = Tensor(mask)
    pc = prob.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = -(m * pc.log() + (1.0 - m) * (1.0 - pc).log()).mean()
    inter = (prob * m).sum(axis=(1, 2))
    sums = prob.sum(axis=(1, 2)) + m.sum(axis=(1, 2))
    soft_dice = (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
    return bce + (1.0 - soft_dice.mean())
