"""Block partitioning of layer weight matrices, importance scoring, and
top-k sparse subspace selection.

A layer weight matrix of shape (d, k) is tiled into square blocks of side
``block_size``; when the side does not divide a dimension the final row or
column of blocks is smaller, so every weight entry belongs to exactly one
block.  Blocks are addressed by :class:`BlockCoord` and sets of them are
plain frozensets, which makes all the downstream set algebra exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np


class BlockCoord(NamedTuple):
    layer: int
    row: int
    col: int


IndexSet = frozenset  # sets of BlockCoord; exact set semantics


class InvalidConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Block layout for a stack of layers.

    ``layer_dims[i]`` is the (rows, cols) shape of layer ``i``'s weight
    matrix; the block grid for that layer is ``block_rows[i] x block_cols[i]``.
    """

    layer_dims: tuple[tuple[int, int], ...]
    block_size: int

    @property
    def block_rows(self) -> tuple[int, ...]:
        return tuple(math.ceil(d / self.block_size) for d, _ in self.layer_dims)

    @property
    def block_cols(self) -> tuple[int, ...]:
        return tuple(math.ceil(k / self.block_size) for _, k in self.layer_dims)

    def n_layers(self) -> int:
        return len(self.layer_dims)

    def contains(self, coord: BlockCoord) -> bool:
        if not 0 <= coord.layer < len(self.layer_dims):
            return False
        return 0 <= coord.row < self.block_rows[coord.layer] and 0 <= coord.col < self.block_cols[coord.layer]

    def block_slices(self, coord: BlockCoord) -> tuple[slice, slice]:
        """Row/col slices of the weight matrix covered by ``coord``."""
        if not self.contains(coord):
            raise InvalidConfigError(f"coordinate {coord} outside grid")
        d, k = self.layer_dims[coord.layer]
        l = self.block_size
        r0, c0 = coord.row * l, coord.col * l
        return slice(r0, min(r0 + l, d)), slice(c0, min(c0 + l, k))

    def block_entry_count(self, coord: BlockCoord) -> int:
        rs, cs = self.block_slices(coord)
        return (rs.stop - rs.start) * (cs.stop - cs.start)

    def blocks_in_layer(self, layer: int) -> list[BlockCoord]:
        return [
            BlockCoord(layer, r, c)
            for r in range(self.block_rows[layer])
            for c in range(self.block_cols[layer])
        ]

    def all_blocks(self) -> list[BlockCoord]:
        out: list[BlockCoord] = []
        for layer in range(len(self.layer_dims)):
            out.extend(self.blocks_in_layer(layer))
        return out


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs for top-k block selection.

    ``budget`` is global across layers.  Layers whose best block scores
    below ``tau_block`` are skipped entirely.  ``tie_break`` names the
    deterministic total order used among equal scores; the only rule
    implemented is descending score then ascending coordinate.
    """

    block_size: int
    budget: int
    tau_block: float = 0.0
    tie_break: str = "score_then_coord"

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise InvalidConfigError("block_size must be >= 1")
        if self.budget < 1:
            raise InvalidConfigError("budget must be >= 1")
        if self.tie_break != "score_then_coord":
            raise InvalidConfigError(f"unknown tie_break rule {self.tie_break!r}")


def partition(layer_dims: Sequence[tuple[int, int]], block_size: int) -> Grid:
    """Tile each (d, k) layer into a grid of ``block_size`` square blocks."""
    if block_size < 1:
        raise InvalidConfigError("block_size must be >= 1")
    for i, (d, k) in enumerate(layer_dims):
        if d < 1 or k < 1:
            raise InvalidConfigError(f"layer {i} has non-positive dimension ({d}, {k})")
    return Grid(tuple((int(d), int(k)) for d, k in layer_dims), int(block_size))


def score_blocks(gradients: Sequence[np.ndarray], grid: Grid) -> dict[BlockCoord, float]:
    """Mean absolute gradient magnitude per block.

    Partial edge blocks are averaged over their true entry count.
    """
    if len(gradients) != grid.n_layers():
        raise ShapeError(f"expected {grid.n_layers()} gradient matrices, got {len(gradients)}")
    scores: dict[BlockCoord, float] = {}
    for layer, g in enumerate(gradients):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != grid.layer_dims[layer]:
            raise ShapeError(
                f"layer {layer}: gradient shape {g.shape} != weight shape {grid.layer_dims[layer]}"
            )
        a = np.abs(g)
        for coord in grid.blocks_in_layer(layer):
            rs, cs = grid.block_slices(coord)
            scores[coord] = float(a[rs, cs].mean())
    return scores


def select_topk(
    importance: Mapping[BlockCoord, float],
    cfg: SelectionConfig,
    eligible_layers: Iterable[int] | None = None,
) -> IndexSet:
    """Pick the ``budget`` highest-scoring blocks from eligible layers.

    A layer is dropped when its best block scores below ``tau_block``.
    ``eligible_layers`` restricts selection further (e.g. masking attention
    query/key projections); None means every scored layer is eligible.
    """
    layers = {c.layer for c in importance}
    if eligible_layers is not None:
        layers &= set(eligible_layers)

    survivors = {
        layer
        for layer in layers
        if max(s for c, s in importance.items() if c.layer == layer) >= cfg.tau_block
    }
    pool = [(c, s) for c, s in importance.items() if c.layer in survivors]
    if cfg.budget > len(pool):
        raise BudgetError(
            f"budget {cfg.budget} exceeds {len(pool)} eligible blocks (short by {cfg.budget - len(pool)})"
        )
    pool.sort(key=lambda item: (-item[1], item[0]))
    return frozenset(c for c, _ in pool[: cfg.budget])


def write_trace(stream: TextIO, task_id: int, selection: Iterable[BlockCoord],
                scores: Mapping[BlockCoord, float] | None = None) -> None:
    """Append one task's selection as `task_id layer row col score` lines."""
    for coord in sorted(selection):
        s = scores[coord] if scores is not None else 0.0
        stream.write(f"{task_id} {coord.layer} {coord.row} {coord.col} {s!r}\n")


def read_trace(stream: TextIO) -> dict[int, IndexSet]:
    """Parse a selection trace into per-task block sets, in task order."""
    per_task: dict[int, set[BlockCoord]] = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ShapeError(f"trace line {lineno}: expected 5 fields, got {len(parts)}")
        task_id, layer, row, col = (int(p) for p in parts[:4])
        float(parts[4])  # score must parse even though it is not stored
        per_task.setdefault(task_id, set()).add(BlockCoord(layer, row, col))
    return {t: frozenset(s) for t, s in sorted(per_task.items())}
