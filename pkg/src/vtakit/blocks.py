"""Conversion between hardware-agnostic matrices and on-device block grids.

A matrix is padded with zeros to multiples of block_size, cut into a
row-major list of block_size x block_size blocks, and serialized row-major
per block, little-endian.  WGT blocks are stored element-transposed so the
device computes A x W^T without reshuffling; the grid order is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dram import Kind
from .errors import ToolchainError

INT8_KINDS = (Kind.INP, Kind.WGT, Kind.OUT)
DATA_KINDS = (Kind.INP, Kind.WGT, Kind.ACC, Kind.OUT)


class ShapeError(ToolchainError):
    """Array dimensions do not match what the operation needs."""


class DomainError(ToolchainError):
    """An element value is outside the range its kind can represent."""


@dataclass(eq=False)
class BlockMatrix:
    """Row-major list of square blocks covering one padded matrix."""

    kind: Kind
    block_size: int
    grid_rows: int
    grid_cols: int
    blocks: np.ndarray  # (grid_rows * grid_cols, block_size, block_size) int32
    orig_rows: int
    orig_cols: int

    @property
    def n_blocks(self) -> int:
        return self.grid_rows * self.grid_cols


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2D matrix, got shape {m.shape}")
    return m.astype(np.int32, copy=False)


def matrix_padding(m, block_size: int) -> np.ndarray:
    """Zero-pad on the bottom and right to multiples of block_size."""
    m = _as_matrix(m)
    rows = -(-m.shape[0] // block_size) * block_size
    cols = -(-m.shape[1] // block_size) * block_size
    out = np.zeros((rows, cols), dtype=np.int32)
    out[:m.shape[0], :m.shape[1]] = m
    return out


def matrix_splitting(m, block_size: int, kind: Kind,
                     orig_rows: int | None = None, orig_cols: int | None = None) -> BlockMatrix:
    """Cut an already-padded matrix into its row-major block list."""
    if kind not in DATA_KINDS:
        raise ShapeError(f"cannot split matrices of kind {kind.value}")
    m = _as_matrix(m)
    rows, cols = m.shape
    if rows % block_size or cols % block_size:
        raise ShapeError(f"matrix {rows}x{cols} is not a multiple of block_size {block_size}")
    gr, gc = rows // block_size, cols // block_size
    blocks = (m.reshape(gr, block_size, gc, block_size)
               .swapaxes(1, 2)
               .reshape(gr * gc, block_size, block_size))
    if kind is Kind.WGT:
        blocks = blocks.transpose(0, 2, 1)
    return BlockMatrix(kind=kind, block_size=block_size, grid_rows=gr, grid_cols=gc,
                       blocks=np.ascontiguousarray(blocks),
                       orig_rows=orig_rows if orig_rows is not None else rows,
                       orig_cols=orig_cols if orig_cols is not None else cols)


def to_blocks(m, block_size: int, kind: Kind) -> BlockMatrix:
    """Pad then split, remembering the original shape."""
    m = _as_matrix(m)
    return matrix_splitting(matrix_padding(m, block_size), block_size, kind,
                            orig_rows=m.shape[0], orig_cols=m.shape[1])


def _check_domain(bm: BlockMatrix) -> None:
    if bm.kind in INT8_KINDS:
        lo, hi = -128, 127
    else:
        lo, hi = -(1 << 31), (1 << 31) - 1
    bad = (bm.blocks < lo) | (bm.blocks > hi)
    if bad.any():
        b, r, c = map(int, np.argwhere(bad)[0])
        raise DomainError(
            f"{bm.kind.value} element {int(bm.blocks[b, r, c])} at block {b},"
            f" row {r}, col {c} outside [{lo}, {hi}]")


def binarise(bm: BlockMatrix) -> bytes:
    """Serialize blocks in list order, row-major within each block."""
    _check_domain(bm)
    dtype = "<i4" if bm.kind is Kind.ACC else "i1"
    return np.ascontiguousarray(bm.blocks).astype(dtype).tobytes()


def debinarise(data: bytes, kind: Kind, grid_rows: int, grid_cols: int, block_size: int,
               orig_rows: int | None = None, orig_cols: int | None = None) -> BlockMatrix:
    """Inverse of binarise for a known grid geometry."""
    if kind not in DATA_KINDS:
        raise ShapeError(f"cannot decode matrices of kind {kind.value}")
    dtype = "<i4" if kind is Kind.ACC else "i1"
    want = grid_rows * grid_cols * block_size * block_size * np.dtype(dtype).itemsize
    if len(data) != want:
        raise ShapeError(
            f"{kind.value} byte length {len(data)} does not match"
            f" {grid_rows}x{grid_cols} grid of {block_size}-blocks ({want} bytes)")
    blocks = (np.frombuffer(data, dtype=dtype)
                .reshape(grid_rows * grid_cols, block_size, block_size)
                .astype(np.int32))
    return BlockMatrix(kind=kind, block_size=block_size, grid_rows=grid_rows,
                       grid_cols=grid_cols, blocks=blocks,
                       orig_rows=orig_rows if orig_rows is not None else grid_rows * block_size,
                       orig_cols=orig_cols if orig_cols is not None else grid_cols * block_size)


def merge_unpad(bm: BlockMatrix, orig_rows: int | None = None, orig_cols: int | None = None) -> np.ndarray:
    """Reassemble the agnostic matrix and crop away the padding."""
    rows = orig_rows if orig_rows is not None else bm.orig_rows
    cols = orig_cols if orig_cols is not None else bm.orig_cols
    bs = bm.block_size
    if not (0 < rows <= bm.grid_rows * bs and 0 < cols <= bm.grid_cols * bs):
        raise ShapeError(f"original shape {rows}x{cols} does not fit the"
                         f" {bm.grid_rows}x{bm.grid_cols} block grid")
    blocks = bm.blocks
    if bm.kind is Kind.WGT:
        blocks = blocks.transpose(0, 2, 1)
    full = (blocks.reshape(bm.grid_rows, bm.grid_cols, bs, bs)
                  .swapaxes(1, 2)
                  .reshape(bm.grid_rows * bs, bm.grid_cols * bs))
    return np.ascontiguousarray(full[:rows, :cols])
