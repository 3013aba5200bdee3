"""Dense float64 arrays: seeded streams, initialization, 3x3 convolution, Gram spectra.

All operations are pure functions over numpy float64 arrays. Stateful things
(parameter stores, running statistics) live in higher layers; nothing here
mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

Array = np.ndarray


def as_tensor(data) -> Array:
    """Coerce to a C-contiguous float64 ndarray (copying only when needed)."""
    return np.ascontiguousarray(data, dtype=np.float64)


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream.

    The same (seed, stream) pair always yields the same draw sequence, and
    distinct stream ids give statistically independent streams off one seed,
    so trials / legs / layers can each own a stream without coordinating.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, k: int) -> "SeededRng":
        """Derive a sub-stream; distinct k give distinct streams."""
        return SeededRng(self.seed, self.stream * 1_000_003 + k + 1)


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization family.

    kind: "xavier" (var = 2 / (fan_in + fan_out)), "he" (var = 2 / fan_in),
    or "gaussian" (std = scale, fans ignored). Draws are i.i.d. zero-mean
    normal in every case.
    """

    kind: str
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("xavier", "he", "gaussian"):
            raise ValueError(f"unknown init scheme {self.kind!r}")


XAVIER = InitScheme("xavier")
HE = InitScheme("he")


def _fans(shape: tuple[int, ...]) -> tuple[float, float]:
    # Dense [d_in, d_out]; conv kernels [c_out, c_in, kh, kw] where the fan
    # counts include the receptive field.
    if len(shape) == 2:
        return float(shape[0]), float(shape[1])
    if len(shape) == 4:
        c_out, c_in, kh, kw = shape
        return float(c_in * kh * kw), float(c_out * kh * kw)
    raise DimensionError(f"fan computation needs a 2-d or 4-d shape, got {shape}")


def init_tensor(shape: tuple[int, ...], scheme: InitScheme, rng: SeededRng) -> Array:
    """Draw a freshly initialized tensor for the given scheme."""
    if any(int(s) <= 0 for s in shape):
        raise DimensionError(f"all dims must be positive, got {shape}")
    if scheme.kind == "gaussian":
        std = scheme.scale
    else:
        fan_in, fan_out = _fans(tuple(int(s) for s in shape))
        if scheme.kind == "xavier":
            std = np.sqrt(2.0 / (fan_in + fan_out))
        else:
            std = np.sqrt(2.0 / fan_in)
    return rng.generator().normal(0.0, std, size=shape)


def matmul(a: Array, b: Array) -> Array:
    """Matrix product of two 2-d tensors."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims disagree: {a.shape} @ {b.shape}")
    return a @ b


def _pad_hw(x: Array) -> Array:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _windows(x: Array) -> Array:
    """All 3x3 patches of the zero-padded input, shape [b, c, h, w, 3, 3]."""
    return sliding_window_view(_pad_hw(x), (3, 3), axis=(2, 3))


def _check_conv_args(x: Array, kernel: Array) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv input must be [b, c, h, w], got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"kernel must be [c_out, c_in, 3, 3], got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )


def conv2d_forward(x: Array, kernel: Array) -> Array:
    """Same-size 3x3 convolution with zero padding.

    out[b, o, x, y] = sum over c and offsets (i, j) in {-1, 0, 1}^2 of
    x[b, c, x + i, y + j] * kernel[o, c, i, j] (out-of-range input reads 0).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    _check_conv_args(x, kernel)
    b, c, h, w = x.shape
    o = kernel.shape[0]
    cols = np.ascontiguousarray(_windows(x).transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * h * w, c * 9
    )
    out = cols @ kernel.reshape(o, c * 9).T
    return np.ascontiguousarray(out.reshape(b, h, w, o).transpose(0, 3, 1, 2))


def conv2d_backward(upstream: Array, x: Array, kernel: Array) -> tuple[Array, Array]:
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_input, grad_kernel). grad_kernel[o, c, i, j] is the plain
    sum over batch and positions of upstream[b, o, x, y] * x_pad[b, c, x+i, y+j].
    """
    upstream = as_tensor(upstream)
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    _check_conv_args(x, kernel)
    b, c, h, w = x.shape
    o = kernel.shape[0]
    if upstream.shape != (b, o, h, w):
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match output {(b, o, h, w)}"
        )
    cols = np.ascontiguousarray(_windows(x).transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * h * w, c * 9
    )
    up = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(b * h * w, o)
    grad_kernel = (up.T @ cols).reshape(o, c, 3, 3)
    dcols = (up @ kernel.reshape(o, c * 9)).reshape(b, h, w, c, 3, 3)
    grad_pad = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            grad_pad[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return grad_pad[:, :, 1 : h + 1, 1 : w + 1], grad_kernel


@dataclass(frozen=True)
class SummandReduction:
    """Reductions over the per-summand kernel gradients.

    The kernel gradient is a sum of one term per (batch, position):
    d[b, x, y][o, c, i, j] = upstream[b, o, x, y] * x_pad[b, c, x+i, y+j].
    Each field has shape [c_out, c_in, 3, 3]:

    total            sum of d over (b, x, y)  -- the kernel gradient itself
    abs_sum          sum of |d| over (b, x, y)
    batch_partial    sum over b of |sum over (x, y) of d|
    spatial_partial  sum over (x, y) of |sum over b of d|

    abs_sum >= batch_partial >= |total| and abs_sum >= spatial_partial >= |total|
    entrywise (triangle inequality applied at different grouping levels).
    """

    total: Array
    abs_sum: Array
    batch_partial: Array
    spatial_partial: Array


def conv2d_summand_stats(upstream: Array, x: Array) -> SummandReduction:
    """Sign-cancellation reductions of the conv kernel-gradient summands."""
    upstream = as_tensor(upstream)
    x = as_tensor(x)
    if x.ndim != 4 or upstream.ndim != 4:
        raise DimensionError("expected [b, c, h, w] activations")
    b, c, h, w = x.shape
    if upstream.shape[0] != b or upstream.shape[2:] != (h, w):
        raise DimensionError(
            f"upstream {upstream.shape} does not match input {x.shape}"
        )
    win = _windows(x)  # [b, c, h, w, 3, 3]
    total = np.einsum("boxy,bcxyij->ocij", upstream, win)
    abs_sum = np.einsum("boxy,bcxyij->ocij", np.abs(upstream), np.abs(win))
    # |sum over (x, y)| per batch element, then sum over the batch.
    per_batch = np.einsum("boxy,bcxyij->bocij", upstream, win)
    batch_partial = np.abs(per_batch).sum(axis=0)
    # |sum over b| per position, then sum over positions.
    per_pos = np.einsum("boxy,bcxyij->ocxyij", upstream, win)
    spatial_partial = np.abs(per_pos).sum(axis=(2, 3))
    return SummandReduction(
        total=total,
        abs_sum=abs_sum,
        batch_partial=batch_partial,
        spatial_partial=spatial_partial,
    )


def gram_eigenvalues(x: Array) -> Array:
    """Eigenvalues of X^T X in ascending order.

    Computed as squared singular values of X itself, which keeps relative
    accuracy for the small end of the spectrum; forming X^T X and calling a
    symmetric eigensolver loses everything below eps * ||X^T X||, which is
    far too coarse for products of many matrices whose smallest eigenvalue
    underflows that threshold while staying well above the float64 floor.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"expected a square matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix has non-finite entries")
    sv = np.linalg.svd(x, compute_uv=False)
    return np.maximum(sv[::-1] ** 2, 0.0)
