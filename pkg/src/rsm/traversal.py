"""Scan orderings over an H x W grid.

Eight directions: horizontal, vertical, diagonal, anti-diagonal, each with
its reversal. Diagonal enumerates the lines i+j = k (k = 0..h+w-2) with i
increasing inside each line; anti-diagonal enumerates the mirrored lines
i+(w-1-j) = k the same way. Within-line order is a fixed convention: it
makes each backward direction the exact element-wise reversal of its
forward partner, which in turn gives the direction set closure under 180
degree rotation of the grid.
"""

from __future__ import annotations

import enum
import functools

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, gather_permute


class Direction(enum.Enum):
    HORIZONTAL_FWD = "horizontal_fwd"
    HORIZONTAL_BWD = "horizontal_bwd"
    VERTICAL_FWD = "vertical_fwd"
    VERTICAL_BWD = "vertical_bwd"
    DIAGONAL_FWD = "diagonal_fwd"
    DIAGONAL_BWD = "diagonal_bwd"
    ANTIDIAGONAL_FWD = "antidiagonal_fwd"
    ANTIDIAGONAL_BWD = "antidiagonal_bwd"


MODE_DIRECTIONS = {
    "ss1d": (Direction.HORIZONTAL_FWD, Direction.HORIZONTAL_BWD),
    "ss2d": (
        Direction.HORIZONTAL_FWD,
        Direction.HORIZONTAL_BWD,
        Direction.VERTICAL_FWD,
        Direction.VERTICAL_BWD,
    ),
    "ossm": tuple(Direction),
}

# partner visited by scanning the 180-degree-rotated grid along a direction
REVERSE_PARTNER = {
    Direction.HORIZONTAL_FWD: Direction.HORIZONTAL_BWD,
    Direction.HORIZONTAL_BWD: Direction.HORIZONTAL_FWD,
    Direction.VERTICAL_FWD: Direction.VERTICAL_BWD,
    Direction.VERTICAL_BWD: Direction.VERTICAL_FWD,
    Direction.DIAGONAL_FWD: Direction.DIAGONAL_BWD,
    Direction.DIAGONAL_BWD: Direction.DIAGONAL_FWD,
    Direction.ANTIDIAGONAL_FWD: Direction.ANTIDIAGONAL_BWD,
    Direction.ANTIDIAGONAL_BWD: Direction.ANTIDIAGONAL_FWD,
}


class ScanOrdering:
    """A permutation of row-major grid indices plus its inverse."""

    __slots__ = ("direction", "h", "w", "perm", "inverse")

    def __init__(self, direction, h, w, perm):
        self.direction = direction
        self.h = h
        self.w = w
        self.perm = np.ascontiguousarray(perm, dtype=np.int64)
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(h * w, dtype=np.int64)
        self.inverse = inv

    def __len__(self):
        return self.perm.size

    def __repr__(self):
        return f"ScanOrdering({self.direction.value}, {self.h}x{self.w})"


def _forward_perm(direction, h, w):
    if direction is Direction.HORIZONTAL_FWD:
        return np.arange(h * w, dtype=np.int64)
    if direction is Direction.VERTICAL_FWD:
        return (np.arange(h * w, dtype=np.int64).reshape(h, w).T).reshape(-1)
    idx = []
    if direction is Direction.DIAGONAL_FWD:
        for k in range(h + w - 1):
            for i in range(max(0, k - w + 1), min(h - 1, k) + 1):
                idx.append(i * w + (k - i))
    elif direction is Direction.ANTIDIAGONAL_FWD:
        for k in range(h + w - 1):
            for i in range(max(0, k - w + 1), min(h - 1, k) + 1):
                idx.append(i * w + (w - 1 - (k - i)))
    else:
        raise ValueError(f"not a forward direction: {direction}")
    return np.asarray(idx, dtype=np.int64)


@functools.lru_cache(maxsize=256)
def _orderings_cached(h, w, mode):
    orderings = []
    for d in MODE_DIRECTIONS[mode]:
        if d.value.endswith("_fwd"):
            perm = _forward_perm(d, h, w)
        else:
            fwd = Direction(d.value.replace("_bwd", "_fwd"))
            perm = _forward_perm(fwd, h, w)[::-1]
        orderings.append(ScanOrdering(d, h, w, perm))
    return tuple(orderings)


def make_orderings(h, w, mode="ossm"):
    """Scan orderings for an h x w grid: 2 (ss1d), 4 (ss2d) or 8 (ossm)."""
    if h < 1 or w < 1:
        raise ShapeError(f"make_orderings: extents must be positive, got {h}x{w}")
    mode = mode.lower()
    if mode not in MODE_DIRECTIONS:
        raise ValueError(f"unknown scan mode '{mode}' (expected ss1d, ss2d or ossm)")
    return _orderings_cached(int(h), int(w), mode)


def apply_ordering(x, ordering):
    """Reorder the last axis of x so position k holds pixel perm[k]."""
    if x.shape[-1] != len(ordering):
        raise ShapeError(
            f"apply_ordering: sequence extent {x.shape[-1]} != grid size {len(ordering)}"
        )
    return gather_permute(x, ordering.perm)


def inverse_ordering(x, ordering):
    """Undo apply_ordering exactly."""
    if x.shape[-1] != len(ordering):
        raise ShapeError(
            f"inverse_ordering: sequence extent {x.shape[-1]} != grid size {len(ordering)}"
        )
    return gather_permute(x, ordering.inverse)


def dump_orderings(h, w, mode="ossm"):
    """One line per direction: the perm as space-separated indices."""
    return [" ".join(str(i) for i in o.perm) for o in make_orderings(h, w, mode)]
