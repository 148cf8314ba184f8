"""N:M fine-grained structured sparsity: masks, packed storage, kernels, updates.

A weight tensor is viewed as 2-D with all fan-in dimensions flattened into
the trailing axis ((Cout, Cin*k*k) for conv, (O, F) for linear). Contiguous
runs of M entries along that axis form groups; a mask keeps the N
largest-magnitude entries of each group. Masks are recomputed from current
weights on every forward during training, so the kept set tracks magnitude
order as the weights move.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, MaskError, ShapeError
from .tensor import Tensor

GROUP_AXIS = "fan-in"  # groups always run along the flattened fan-in axis


@dataclass(frozen=True)
class NmPattern:
    """Keep at most ``n`` non-zeros in every contiguous group of ``m`` weights."""

    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.n <= self.m):
            raise ContractError(f"invalid pattern {self.n}:{self.m}, need 1 <= n <= m")

    @property
    def density(self) -> float:
        return self.n / self.m

    @property
    def is_dense(self) -> bool:
        return self.n == self.m

    def __str__(self):
        return f"{self.n}:{self.m}"


DEFAULT_PATTERNS = (NmPattern(1, 4), NmPattern(2, 4), NmPattern(4, 4))


@dataclass
class NmMask:
    """Binary keep/prune mask honoring an N:M pattern along the fan-in axis."""

    bits: np.ndarray  # bool, same shape as the owning weight
    pattern: NmPattern
    group_axis: str = GROUP_AXIS

    @property
    def shape(self):
        return self.bits.shape

    def density(self) -> float:
        return float(self.bits.mean())


def _rows(w: np.ndarray) -> np.ndarray:
    if w.ndim < 2:
        raise ShapeError(f"need at least 2-D weights, got shape {w.shape}")
    return w.reshape(w.shape[0], -1)


def _remainder_keep(n: int, m: int, r: int) -> int:
    # trailing group of size r keeps ceil(n/m * r) largest entries
    return min(r, -(-n * r // m))


def _keep_topk(mag: np.ndarray, k: int) -> np.ndarray:
    """Boolean keep-map of the k largest entries per trailing axis; ties to lower index."""
    order = np.argsort(-mag, axis=-1, kind="stable")
    bits = np.zeros(mag.shape, dtype=bool)
    np.put_along_axis(bits, order[..., :k], True, axis=-1)
    return bits


def compute_mask(weight, pattern: NmPattern) -> NmMask:
    """Magnitude-based N:M mask: per group, keep the n largest |w|.

    Ties break toward the lower within-group index. A trailing group of size
    r < m keeps ceil(n/m * r) entries so density is approximately preserved.
    """
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    rows = _rows(w)
    O, F = rows.shape
    n, m = pattern.n, pattern.m
    bits = np.zeros((O, F), dtype=bool)
    G, r = divmod(F, m)
    if pattern.is_dense:
        bits[:] = True
        return NmMask(bits.reshape(w.shape), pattern)
    mag = np.abs(rows)
    if G:
        bits[:, : G * m] = _keep_topk(mag[:, : G * m].reshape(O, G, m), n).reshape(O, G * m)
    if r:
        bits[:, G * m :] = _keep_topk(mag[:, G * m :], _remainder_keep(n, m, r))
    return NmMask(bits.reshape(w.shape), pattern)


def mask_complies(mask: NmMask) -> bool:
    """True when every group keeps exactly its required count."""
    bits = _rows(mask.bits)
    O, F = bits.shape
    n, m = mask.pattern.n, mask.pattern.m
    G, r = divmod(F, m)
    if G and not (bits[:, : G * m].reshape(O, G, m).sum(axis=-1) == n).all():
        return False
    if r and not (bits[:, G * m :].sum(axis=-1) == _remainder_keep(n, m, r)).all():
        return False
    return True


# ---------------------------------------------------------------------------
# packed storage and compressed kernels
# ---------------------------------------------------------------------------


@dataclass
class CompressedNm:
    """Packed kept-values + within-group indices for an N:M-masked weight.

    ``values``/``indices`` have shape (rows, K) where K = n per full group
    plus the remainder keep-count; indices are within-group positions in
    [0, m), strictly increasing inside each group, stored one byte each.
    """

    pattern: NmPattern
    logical_shape: tuple
    values: np.ndarray  # (O, K) float
    indices: np.ndarray  # (O, K) uint8

    def __post_init__(self):
        self._abs_cols = None

    @property
    def group_count(self) -> int:
        F = int(np.prod(self.logical_shape[1:]))
        G, r = divmod(F, self.pattern.m)
        return self.logical_shape[0] * (G + (1 if r else 0))

    def _column_index(self) -> np.ndarray:
        """Absolute fan-in column of every packed entry."""
        if self._abs_cols is None:
            F = int(np.prod(self.logical_shape[1:]))
            n, m = self.pattern.n, self.pattern.m
            G, r = divmod(F, m)
            base = np.repeat(np.arange(G) * m, n)
            if r:
                kr = _remainder_keep(n, m, r)
                base = np.concatenate([base, np.full(kr, G * m)])
            self._abs_cols = base[None, :] + self.indices.astype(np.int64)
        return self._abs_cols

    def storage_bytes(self) -> tuple[int, int]:
        """(value bytes, index bytes) of the packed representation."""
        return self.values.nbytes, self.indices.nbytes

    def decompress(self) -> np.ndarray:
        """Dense ``weight * mask`` reconstruction (exact)."""
        O = self.logical_shape[0]
        F = int(np.prod(self.logical_shape[1:]))
        out = np.zeros((O, F), dtype=self.values.dtype)
        np.put_along_axis(out, self._column_index(), self.values, axis=1)
        return out.reshape(self.logical_shape)


def compress(weight, mask: NmMask) -> CompressedNm:
    """Pack the kept entries of ``weight`` under ``mask``.

    Raises :class:`FormatError` when the mask does not honor its pattern.
    """
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if mask.bits.shape != w.shape:
        raise MaskError(f"mask shape {mask.bits.shape} != weight shape {w.shape}")
    if not mask_complies(mask):
        raise FormatError(f"mask violates its {mask.pattern} pattern")
    rows = _rows(w)
    bits = _rows(mask.bits)
    O, F = rows.shape
    n, m = mask.pattern.n, mask.pattern.m
    G, r = divmod(F, m)

    chunks_v, chunks_i = [], []
    if G:
        b3 = bits[:, : G * m].reshape(O, G, m)
        w3 = rows[:, : G * m].reshape(O, G, m)
        # stable sort puts kept entries first, preserving ascending index order
        idx = np.argsort(~b3, axis=-1, kind="stable")[:, :, :n]
        chunks_v.append(np.take_along_axis(w3, idx, axis=-1).reshape(O, G * n))
        chunks_i.append(idx.reshape(O, G * n))
    if r:
        kr = _remainder_keep(n, m, r)
        br = bits[:, G * m :]
        wr = rows[:, G * m :]
        idx = np.argsort(~br, axis=-1, kind="stable")[:, :kr]
        chunks_v.append(np.take_along_axis(wr, idx, axis=-1))
        chunks_i.append(idx)
    values = np.ascontiguousarray(np.concatenate(chunks_v, axis=1))
    indices = np.ascontiguousarray(np.concatenate(chunks_i, axis=1).astype(np.uint8))
    return CompressedNm(pattern=mask.pattern, logical_shape=tuple(w.shape), values=values, indices=indices)


def matmul_compressed(w: CompressedNm, x):
    """``(W * mask) @ x`` touching only the packed kept entries.

    ``x`` has shape (F, cols); the per-output accumulation runs over packed
    entries in ascending group order, deterministically (no BLAS dispatch).
    """
    xa = x.data if isinstance(x, Tensor) else np.asarray(x)
    F = int(np.prod(w.logical_shape[1:]))
    if xa.ndim != 2 or xa.shape[0] != F:
        raise ShapeError(f"input shape {xa.shape} incompatible with logical fan-in {F}")
    gathered = xa[w._column_index()]  # (O, K, cols)
    out = np.einsum("ok,okc->oc", w.values, gathered, optimize=False)
    if isinstance(x, Tensor):
        return Tensor(out)
    return out


# ---------------------------------------------------------------------------
# parameter updates
# ---------------------------------------------------------------------------


def sr_ste_update(weight: np.ndarray, grad: np.ndarray, mask: NmMask, lr: float, lambda_w: float) -> np.ndarray:
    """One SGD step with sparse-refined straight-through regularization.

    ``grad`` is the straight-through task gradient (all positions). Kept
    weights follow it; pruned positions additionally decay toward zero:

        W <- W - lr * (grad + lambda_w * (1 - mask) * W)
    """
    if lr < 0 or lambda_w < 0:
        raise ContractError(f"lr and lambda_w must be non-negative, got {lr}, {lambda_w}")
    pruned = ~mask.bits
    return weight - lr * (grad + lambda_w * (pruned * weight))


def plain_ste_update(weight: np.ndarray, grad: np.ndarray, mask: NmMask, lr: float) -> np.ndarray:
    """Ablation baseline: only kept positions receive the gradient step."""
    if lr < 0:
        raise ContractError(f"lr must be non-negative, got {lr}")
    return weight - lr * (mask.bits * grad)


def srste_decay_grad(weight: np.ndarray, mask_bits: np.ndarray, lambda_w: float) -> np.ndarray:
    """The decay term alone, as an additive gradient: lambda_w * (1-mask) * W."""
    return lambda_w * (~mask_bits if mask_bits.dtype == bool else (1 - mask_bits)) * weight


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"NMC1"
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_compressed(path, w: CompressedNm) -> None:
    """NMC1 container: magic, pattern, logical shape, values block, index block."""
    if w.values.dtype not in _TAG_FOR:
        raise FormatError(f"unsupported value dtype {w.values.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", w.pattern.n, w.pattern.m))
        f.write(struct.pack("<I", len(w.logical_shape)))
        f.write(struct.pack(f"<{len(w.logical_shape)}I", *w.logical_shape))
        f.write(struct.pack("<B", _TAG_FOR[w.values.dtype]))
        f.write(struct.pack("<Q", w.values.size))
        f.write(np.ascontiguousarray(w.values, dtype=w.values.dtype.newbyteorder("<")).tobytes())
        f.write(np.ascontiguousarray(w.indices, dtype=np.uint8).tobytes())


def read_compressed(path) -> CompressedNm:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    n, m = struct.unpack_from("<II", raw, off)
    off += 8
    (rank,) = struct.unpack_from("<I", raw, off)
    off += 4
    shape = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<B", raw, off)
    off += 1
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    dt = _DTYPE_TAGS[tag]
    O = shape[0]
    if count % O:
        raise FormatError(f"{path}: value count {count} not divisible by rows {O}")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(O, count // O)
    off += count * dt.itemsize
    indices = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off).reshape(O, count // O)
    if len(raw) != off + count:
        raise FormatError(f"{path}: trailing bytes")
    return CompressedNm(
        pattern=NmPattern(n, m),
        logical_shape=tuple(int(d) for d in shape),
        values=np.ascontiguousarray(values).astype(dt.newbyteorder("="), copy=False),
        indices=np.ascontiguousarray(indices),
    )
