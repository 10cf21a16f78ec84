"""Dense float64 tensors and the primitive ops every other module consumes.

Conventions, fixed so test vectors are bit-exact:

* all numeric data is row-major ``float64``,
* image batches are NCHW, conv kernels are OIHW,
* conv is cross-correlation (no kernel flip) with zero padding,
* every op validates its result: NaN/Inf is an error, never a silent state.

Randomness goes through :class:`Rng`, a thin seeded wrapper whose stream is
reproducible for a fixed seed and call sequence.
"""

from __future__ import annotations

import numpy as np

ELEMENTWISE_KINDS = ("add", "sub", "mul", "square", "abs", "relu", "relu_indicator")


class ShapeError(ValueError):
    """Operands have incompatible shapes or would produce an empty result."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float64 array and validate finiteness."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    return check_finite(arr, "as_tensor")


def check_finite(arr: np.ndarray, context: str = "") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {context or 'tensor'}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of an NCHW batch with an OIHW kernel.

    Zero padding, no kernel flip. Output spatial extents must be positive.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be nonnegative, got {padding}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {i}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or out_h <= 0 or out_w <= 0:
        raise ShapeError(f"nonpositive conv output extent for input {x.shape}, kernel {kernel.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    y = np.einsum("nchwab,ocab->nohw", win, kernel)
    return check_finite(np.ascontiguousarray(y), "conv2d")


def avg_pool2d(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Average pooling over kxk windows of an NCHW batch (no padding)."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ShapeError(f"pool size and stride must be positive, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    if h < k or w < k or out_h <= 0 or out_w <= 0:
        raise ShapeError(f"nonpositive pool output extent for input {x.shape}, k={k}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    y = win.mean(axis=(-2, -1))
    return check_finite(np.ascontiguousarray(y), "avg_pool2d")


def elementwise(kind: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pointwise op. Binary kinds (add/sub/mul) require equal shapes.

    ``relu_indicator`` yields exactly 0.0 or 1.0, with the boundary z = 0
    counted as closed (strict inequality).
    """
    if kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{kind} requires two operands")
        if a.shape != b.shape:
            raise ShapeError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[kind](a, b)
    else:
        if b is not None:
            raise ShapeError(f"{kind} takes a single operand")
        if kind == "square":
            out = np.square(a)
        elif kind == "abs":
            out = np.abs(a)
        elif kind == "relu":
            out = np.maximum(a, 0.0)
        else:  # relu_indicator
            out = (a > 0.0).astype(np.float64)
    return check_finite(out, kind)


def reduce_sum(a: np.ndarray, axes: list[int] | tuple[int, ...] = ()) -> np.ndarray:
    """Sum along the given axes; an empty axes list means full scalar sum."""
    axes = tuple(axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes in {axes}")
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"axis {ax} invalid for rank-{a.ndim} tensor")
    out = np.sum(a, axis=axes if axes else None)
    return check_finite(np.asarray(out), "reduce_sum")


class Rng:
    """Seeded random stream (PCG64). Single-owner: never share across threads.

    Identical seed + identical call sequence reproduces the stream bit for
    bit; ``spawn`` derives an independent child stream deterministically.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std <= 0:
            raise ValueError(f"std must be > 0, got {std}")
        return check_finite(self._gen.normal(mean, std, size=shape), "rng normal")

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return check_finite(self._gen.uniform(low, high, size=shape), "rng uniform")

    def integers(self, low: int, high: int | None = None) -> int:
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self) -> "Rng":
        return Rng(self.integers(2**63 - 1))


def rng_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """i.i.d. Gaussian samples; advances the rng state deterministically."""
    return rng.normal(shape, mean, std)
