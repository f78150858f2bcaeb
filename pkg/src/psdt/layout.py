"""Serpentine (boustrophedon) frame-grid layout.

Sequences of frames are packed into a grid so that temporally adjacent
frames land in spatially adjacent cells: row 0 runs left to right, row 1
right to left, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SerpentineOrder:
    rows: int
    cols: int
    cells: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.cells)


def serpentine_order(rows: int, cols: int) -> SerpentineOrder:
    """Boustrophedon cell order covering a rows x cols grid exactly once."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dims must be >= 1, got {rows}x{cols}")
    cells = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        cells.extend((r, c) for c in cs)
    return SerpentineOrder(rows, cols, tuple(cells))


def compose(frames, order: SerpentineOrder) -> np.ndarray:
    """Place frame k at order.cells[k]; frames are uniform (f, f) arrays."""
    frames = [np.asarray(fr) for fr in frames]
    if len(frames) != len(order):
        raise ValueError(f"{len(frames)} frames for a {order.rows}x{order.cols} grid")
    f = frames[0].shape[0]
    for fr in frames:
        if fr.shape != (f, f):
            raise ValueError(f"frame shape {fr.shape} not uniform ({f}, {f})")
    grid = np.zeros((order.rows * f, order.cols * f), dtype=frames[0].dtype)
    for fr, (r, c) in zip(frames, order.cells):
        grid[r * f:(r + 1) * f, c * f:(c + 1) * f] = fr
    return grid


def decompose(grid: np.ndarray, order: SerpentineOrder) -> list[np.ndarray]:
    """Exact inverse of :func:`compose`."""
    grid = np.asarray(grid)
    h, w = grid.shape
    if h % order.rows != 0 or w % order.cols != 0:
        raise ValueError(f"grid {grid.shape} not divisible into {order.rows}x{order.cols} cells")
    f = h // order.rows
    if w // order.cols != f:
        raise ValueError(f"grid {grid.shape} has non-square cells")
    return [grid[r * f:(r + 1) * f, c * f:(c + 1) * f].copy() for r, c in order.cells]


def cell_token_positions(cell: tuple[int, int], frame_size: int,
                         patch_size: int) -> set[tuple[int, int]]:
    """Token (i, j) coordinates covered by one grid cell.

    Token coordinates index p x p patches of the full grid image, so a cell
    at (r, c) covers the (f/p)^2 block starting at (r*f/p, c*f/p).
    """
    if frame_size % patch_size != 0:
        raise ValueError(f"frame size {frame_size} not divisible by patch {patch_size}")
    n = frame_size // patch_size
    r, c = cell
    return {(r * n + i, c * n + j) for i in range(n) for j in range(n)}
