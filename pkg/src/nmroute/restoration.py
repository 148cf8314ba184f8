"""Shared-weight restoration network executed as L sparse branches.

One stack of conv layers (DnCNN-style: Conv-ReLU, then Conv-BN-ReLU blocks,
then a final Conv) is shared by every branch. A branch is an N:M pattern
plus its own BatchNorm bank: masks are recomputed from the *current*
weights on every forward, and each branch normalizes with its own
statistics so pruning-induced feature shifts don't bleed across branches.

With residual learning on (the denoising convention), the network predicts
the degradation component and the restored image is ``input - prediction``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .sparsity import CompressedNm, NmMask, NmPattern, compress, compute_mask, matmul_compressed
from .tensor import BnBank, Tensor, batchnorm2d, conv2d, he_conv, im2col, relu, zeros_param


@dataclass(frozen=True)
class BranchSpec:
    """One sparsity configuration of the shared network."""

    pattern: NmPattern
    cost: float
    bn_bank_index: int

    def __post_init__(self):
        if self.cost <= 0:
            raise ContractError(f"branch cost must be positive, got {self.cost}")


def default_branches(patterns=((1, 4), (2, 4), (4, 4))) -> list[BranchSpec]:
    """Branch list from (n, m) pairs, sorted sparse-to-dense, cost = n/m."""
    specs = sorted((NmPattern(n, m) for n, m in patterns), key=lambda p: (p.density, p.m))
    return [BranchSpec(pattern=p, cost=p.density, bn_bank_index=i) for i, p in enumerate(specs)]


class RestorationNet:
    """Depth-D, width-W conv net with per-branch masks and BatchNorm banks."""

    def __init__(
        self,
        rng: np.random.Generator,
        depth: int = 5,
        width: int = 16,
        in_channels: int = 1,
        kernel_size: int = 3,
        branches: list[BranchSpec] | None = None,
        residual: bool = True,
        mask_first_last: bool = False,
        shared_bn: bool = False,
        dtype=np.float32,
    ):
        if depth < 3:
            raise ShapeError("need at least first/middle/last conv layers (depth >= 3)")
        self.depth = depth
        self.width = width
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.residual = residual
        self.mask_first_last = mask_first_last
        self.shared_bn = shared_bn
        self.branches = branches if branches is not None else default_branches()
        densities = [b.pattern.density for b in self.branches]
        if densities != sorted(densities):
            raise ContractError("branches must be sorted ascending by n/m")

        k = kernel_size
        chans = [in_channels] + [width] * (depth - 1) + [in_channels]
        self.conv_w = [he_conv(rng, chans[i + 1], chans[i], k, dtype) for i in range(depth)]
        self.conv_b = [zeros_param((chans[i + 1],), dtype) for i in range(depth)]
        # one bank per branch per middle layer; sharing them is an ablation knob
        n_bn = depth - 2
        self.bn_banks = [[BnBank.create(width, dtype) for _ in range(n_bn)] for _ in self.branches]
        self.masked_layers = tuple(range(depth)) if mask_first_last else tuple(range(1, depth - 1))
        # masks from the most recent forward, keyed by branch then layer
        self.last_masks: dict[int, dict[int, NmMask]] = {}

    # -- parameters ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.depth):
            out[f"conv{i}.weight"] = self.conv_w[i]
            out[f"conv{i}.bias"] = self.conv_b[i]
        for bi, banks in enumerate(self.bn_banks):
            for li, bank in enumerate(banks):
                out[f"bn.b{bi}.l{li}.gamma"] = bank.gamma
                out[f"bn.b{bi}.l{li}.beta"] = bank.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def conv_weight_params(self) -> list[tuple[int, Tensor]]:
        return [(i, self.conv_w[i]) for i in range(self.depth)]

    def parameter_registry_audit(self) -> dict:
        """Structural invariants: one weight copy per layer, L independent banks."""
        ids = {id(w) for w in self.conv_w}
        return {
            "conv_layers": self.depth,
            "unique_conv_weights": len(ids),
            "bn_branch_banks": len(self.bn_banks),
            "bn_layers_per_branch": len(self.bn_banks[0]) if self.bn_banks else 0,
            "weight_shared_across_branches": len(ids) == self.depth,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for bi, banks in enumerate(self.bn_banks):
            for li, bank in enumerate(banks):
                out[f"bn.b{bi}.l{li}.running_mean"] = bank.running_mean.copy()
                out[f"bn.b{bi}.l{li}.running_var"] = bank.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = np.ascontiguousarray(state[name], dtype=p.data.dtype)
        for bi, banks in enumerate(self.bn_banks):
            for li, bank in enumerate(banks):
                bank.running_mean[...] = state[f"bn.b{bi}.l{li}.running_mean"]
                bank.running_var[...] = state[f"bn.b{bi}.l{li}.running_var"]

    # -- forward -------------------------------------------------------------

    def _bank(self, branch: int, bn_layer: int) -> BnBank:
        bank_row = 0 if self.shared_bn else self.branches[branch].bn_bank_index
        return self.bn_banks[bank_row][bn_layer]

    def forward_branch(self, y: Tensor, i: int, mode: str = "eval", kernel: str = "dense") -> Tensor:
        """Run branch ``i``: masks from current weights, BN bank ``i``.

        ``kernel="compressed"`` executes masked convs through the packed
        storage path (eval only); outputs agree with the masked-dense path
        to float32 accumulation error.
        """
        if not 0 <= i < len(self.branches):
            raise IndexError(f"branch index {i} out of range [0, {len(self.branches)})")
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        if kernel not in ("dense", "compressed"):
            raise ContractError(f"kernel must be 'dense' or 'compressed', got {kernel!r}")
        if kernel == "compressed" and mode != "eval":
            raise ContractError("compressed kernels are an eval-only path")
        pattern = self.branches[i].pattern
        pad = (self.kernel_size - 1) // 2
        masks: dict[int, NmMask] = {}

        h = y
        for li in range(self.depth):
            mask = None
            if li in self.masked_layers and not pattern.is_dense:
                mask = compute_mask(self.conv_w[li], pattern)
                masks[li] = mask
            if kernel == "compressed" and mask is not None:
                h = _conv2d_compressed(h, self.conv_w[li], self.conv_b[li], pad, mask)
            else:
                h = conv2d(h, self.conv_w[li], self.conv_b[li], padding=pad, mask=mask)
            if 1 <= li <= self.depth - 2:
                h = batchnorm2d(h, self._bank(i, li - 1), mode)
            if li < self.depth - 1:
                h = relu(h)
        self.last_masks[i] = masks
        return y - h if self.residual else h

    def forward_all(self, y: Tensor, mode: str = "train") -> list[Tensor]:
        """All branch outputs in branch order (the training-time pass)."""
        return [self.forward_branch(y, i, mode=mode) for i in range(len(self.branches))]

    # -- accounting ----------------------------------------------------------

    def _layer_flops(self, li: int, hw: tuple[int, int]) -> float:
        cin = self.conv_w[li].shape[1]
        cout = self.conv_w[li].shape[0]
        k = self.kernel_size
        return 2.0 * k * k * cin * cout * hw[0] * hw[1]

    def branch_flops(self, i: int, hw: tuple[int, int]) -> float:
        """Dense conv FLOPs scaled by n/m on masked layers (spatial size preserved)."""
        pattern = self.branches[i].pattern
        total = 0.0
        for li in range(self.depth):
            ratio = pattern.density if li in self.masked_layers else 1.0
            total += ratio * self._layer_flops(li, hw)
        return total

    def dense_flops(self, hw: tuple[int, int]) -> float:
        return sum(self._layer_flops(li, hw) for li in range(self.depth))


def _conv2d_compressed(x: Tensor, weight: Tensor, bias: Tensor, pad: int, mask: NmMask) -> Tensor:
    """Eval-path convolution through packed N:M storage (no gradient graph)."""
    comp: CompressedNm = compress(weight.data, mask)
    cols, (Ho, Wo) = im2col(x.data, weight.shape[2], 1, pad)
    out = matmul_compressed(comp, cols)
    out = out + bias.data[:, None]
    B = x.shape[0]
    return Tensor(out.reshape(weight.shape[0], B, Ho, Wo).transpose(1, 0, 2, 3))
