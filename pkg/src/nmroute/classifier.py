"""Lightweight difficulty classifier: four Conv-BN-ReLU blocks, GAP, FC, softmax.

The classifier routes each degraded image to one restoration branch, so it
has to stay tiny next to the restoration network (its parameter count is
asserted to be under 5% of the restoration net's at default sizes, and its
FLOPs are a fraction of a percent of the densest branch). It is never
pruned and uses ordinary single-bank BatchNorm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    BnBank,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    he_conv,
    he_linear,
    linear,
    relu,
    softmax,
    zeros_param,
)

MIN_INPUT_HW = 16  # four stride-2 blocks need spatial room


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = 3
    # kept small on purpose: the desk-scale restoration net is itself tiny,
    # and the "negligible parameters" property is asserted against it
    block_channels: tuple = (2, 2, 4, 4)
    kernel_size: int = 3
    stride_per_block: int = 2
    in_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("classifier needs at least 2 classes")
        if len(self.block_channels) != 4:
            raise ShapeError("classifier uses exactly four conv blocks")


class Classifier:
    """Probability-vector head over restoration-difficulty classes."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        k = config.kernel_size
        cins = (config.in_channels,) + tuple(config.block_channels[:-1])
        self.conv_w = [he_conv(rng, co, ci, k, dtype) for ci, co in zip(cins, config.block_channels)]
        self.conv_b = [zeros_param((co,), dtype) for co in config.block_channels]
        self.bn = [BnBank.create(co, dtype) for co in config.block_channels]
        self.fc_w = he_linear(rng, config.num_classes, config.block_channels[-1], dtype)
        self.fc_b = zeros_param((config.num_classes,), dtype)

    # -- parameters ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(4):
            out[f"block{i}.conv.weight"] = self.conv_w[i]
            out[f"block{i}.conv.bias"] = self.conv_b[i]
            out[f"block{i}.bn.gamma"] = self.bn[i].gamma
            out[f"block{i}.bn.beta"] = self.bn[i].beta
        out["fc.weight"] = self.fc_w
        out["fc.bias"] = self.fc_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for i, bank in enumerate(self.bn):
            out[f"block{i}.bn.running_mean"] = bank.running_mean.copy()
            out[f"block{i}.bn.running_var"] = bank.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            p.data = np.ascontiguousarray(state[name], dtype=p.data.dtype)
        for i, bank in enumerate(self.bn):
            bank.running_mean[...] = state[f"block{i}.bn.running_mean"]
            bank.running_var[...] = state[f"block{i}.bn.running_var"]

    # -- forward -------------------------------------------------------------

    def forward(self, y: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Return (probabilities (B, L), logits (B, L))."""
        if y.ndim != 4:
            raise ShapeError(f"classifier input must be (B,C,H,W), got {y.shape}")
        if y.shape[2] < MIN_INPUT_HW or y.shape[3] < MIN_INPUT_HW:
            raise ShapeError(f"classifier input must be at least {MIN_INPUT_HW}px, got {y.shape[2]}x{y.shape[3]}")
        cfg = self.config
        pad = (cfg.kernel_size - 1) // 2
        h = y
        for i in range(4):
            h = conv2d(h, self.conv_w[i], self.conv_b[i], padding=pad, stride=cfg.stride_per_block)
            h = batchnorm2d(h, self.bn[i], mode)
            h = relu(h)
        pooled = global_avg_pool(h)
        logits = linear(pooled, self.fc_w, self.fc_b)
        return softmax(logits, axis=1), logits


def predict_class(p) -> np.ndarray:
    """Argmax branch index per row; ties break toward the lower index."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    if data.ndim == 1:
        data = data[None, :]
    return np.argmax(data, axis=1)


def _block_output_hw(hw: int, k: int, stride: int) -> int:
    return (hw + 2 * ((k - 1) // 2) - k) // stride + 1


def classifier_flops(config: ClassifierConfig, input_hw: tuple[int, int]) -> float:
    """Per-sample FLOPs: 2*k^2*Cin*Cout*Hout*Wout per block, plus pool and FC.

    The pool term counts one add per pooled element; BatchNorm and ReLU are
    not counted (consistent with the restoration FLOPs model).
    """
    k = config.kernel_size
    h, w = input_hw
    cin = config.in_channels
    total = 0.0
    for cout in config.block_channels:
        h = _block_output_hw(h, k, config.stride_per_block)
        w = _block_output_hw(w, k, config.stride_per_block)
        total += 2.0 * k * k * cin * cout * h * w
        cin = cout
    total += cin * h * w  # global average pool
    total += 2.0 * cin * config.num_classes  # fully-connected head
    return total
