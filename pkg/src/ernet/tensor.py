"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order. 4-D
feature maps always use the (batch, height, width, channels) layout, so an
element's flat index is ``((b*H + h)*W + w)*C + c``. float32 is the
production precision; gradient verification runs in float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ArgumentError, ShapeError

DEFAULT_DTYPE = np.float32


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64); same seed gives the same stream."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list:
    """n independent deterministic generators derived from one seed."""
    return [
        np.random.Generator(np.random.PCG64(child))
        for child in np.random.SeedSequence(seed).spawn(n)
    ]


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def new_tensor(shape: Sequence[int], fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Allocate a tensor of `shape` with every element equal to `fill`."""
    return np.full(_check_shape(shape), fill, dtype=dtype)


def he_normal_init(
    shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE
) -> np.ndarray:
    """Normal(0, sqrt(2/fan_in)) samples, the usual init for ReLU stacks."""
    if fan_in < 1:
        raise ArgumentError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=_check_shape(shape)).astype(dtype)


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Elementwise arithmetic: add | mul | scale | relu-mask.

    `scale` takes a scalar `b`; `relu-mask` passes `b` through where
    `a > 0` and zeroes it elsewhere (the ReLU backward rule).
    """
    if op in ("add", "mul", "relu-mask"):
        b = np.asarray(b, dtype=a.dtype)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
        if op == "add":
            return a + b
        if op == "mul":
            return a * b
        return np.where(a > 0, b, np.zeros((), dtype=a.dtype))
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar second operand")
        return a * a.dtype.type(b)
    raise ArgumentError(f"unknown elementwise op {op!r}")


def pad_spatial(
    x: np.ndarray, top: int, bottom: int, left: int, right: int, value: float = 0.0
) -> np.ndarray:
    """Pad the height/width axes of a (B,H,W,C) tensor with a constant."""
    if x.ndim != 4:
        raise ShapeError(f"pad_spatial expects a 4-D tensor, got {x.ndim}-D")
    if min(top, bottom, left, right) < 0:
        raise ArgumentError("pad amounts must be non-negative")
    if top == bottom == left == right == 0:
        return x.copy()
    return np.pad(
        x,
        ((0, 0), (top, bottom), (left, right), (0, 0)),
        mode="constant",
        constant_values=value,
    )


def flat_index(shape: Sequence[int], coords: Sequence[int]) -> int:
    """Row-major flat index of `coords` within `shape`."""
    if len(shape) != len(coords):
        raise ShapeError("coords rank must match shape rank")
    idx = 0
    for extent, c in zip(shape, coords):
        if not 0 <= c < extent:
            raise ShapeError(f"coordinate {c} out of range for extent {extent}")
        idx = idx * extent + c
    return idx


def coords_of(shape: Sequence[int], flat: int) -> tuple[int, ...]:
    """Inverse of :func:`flat_index`."""
    total = int(np.prod(shape))
    if not 0 <= flat < total:
        raise ShapeError(f"flat index {flat} out of range for shape {tuple(shape)}")
    coords = []
    for extent in reversed(shape):
        coords.append(flat % extent)
        flat //= extent
    return tuple(reversed(coords))
