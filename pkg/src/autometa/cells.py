"""Cell genotypes: blocks, canonical form, progressive expansion and depth."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

# canonical op order; index = position in this tuple
OPS = ("conv3", "fconv5", "id", "avg3", "max3")
CONV_OPS = frozenset({"conv3", "fconv5"})
OP_INDEX = {name: i for i, name in enumerate(OPS)}

# input 0 = previous cell output, 1 = the one before, 2 + j = block j of this cell
NUM_CELL_INPUTS = 2


class CellError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Branch:
    input: int
    op: str

    def sort_key(self) -> tuple[int, int]:
        return (self.input, OP_INDEX[self.op])


@dataclass(frozen=True)
class Block:
    left: Branch
    right: Branch

    def canonical(self) -> "Block":
        if self.right.sort_key() < self.left.sort_key():
            return Block(self.right, self.left)
        return self

    def to_list(self) -> list:
        return [self.left.input, self.left.op, self.right.input, self.right.op]

    @classmethod
    def from_list(cls, raw: Sequence) -> "Block":
        if len(raw) != 4:
            raise CellError(f"block must have 4 fields, got {raw!r}")
        li, lo, ri, ro = raw
        for op in (lo, ro):
            if op not in OP_INDEX:
                raise CellError(f"unknown op {op!r}")
        for i in (li, ri):
            if not isinstance(i, int) or isinstance(i, bool):
                raise CellError(f"input reference must be an integer, got {i!r}")
        return cls(Branch(li, lo), Branch(ri, ro))


@dataclass(frozen=True)
class Cell:
    blocks: tuple[Block, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for b, block in enumerate(self.blocks):
            for br in (block.left, block.right):
                if not 0 <= br.input < NUM_CELL_INPUTS + b:
                    raise CellError(f"block {b} references input {br.input}; "
                                    f"allowed range is [0, {NUM_CELL_INPUTS + b})")
                if br.op not in OP_INDEX:
                    raise CellError(f"unknown op {br.op!r}")

    def __len__(self) -> int:
        return len(self.blocks)

    def to_list(self) -> list:
        return [blk.to_list() for blk in self.blocks]

    def key(self) -> str:
        """Compact JSON of the canonical form; the cell's identity."""
        return json.dumps(canonicalize(self).to_list(), separators=(",", ":"))

    @classmethod
    def from_list(cls, raw: Sequence) -> "Cell":
        return cls(tuple(Block.from_list(b) for b in raw))

    @classmethod
    def from_json(cls, text: str) -> "Cell":
        return cls.from_list(json.loads(text))

    def unconsumed(self) -> list[int]:
        """Indices of blocks whose output no later block reads (these form the cell output)."""
        used = {br.input - NUM_CELL_INPUTS for blk in self.blocks for br in (blk.left, blk.right)
                if br.input >= NUM_CELL_INPUTS}
        return [b for b in range(len(self.blocks)) if b not in used]


def canonicalize(cell: Cell) -> Cell:
    return Cell(tuple(blk.canonical() for blk in cell.blocks))


def _branches(b: int) -> list[Branch]:
    return [Branch(i, op) for i in range(NUM_CELL_INPUTS + b) for op in OPS]


def enumerate_expansions(parent: Cell | None, b: int, max_blocks: int = 5) -> list[Cell]:
    """All canonical cells formed by appending one block to ``parent``.

    ``parent`` must have exactly ``b`` blocks (``None`` or empty when ``b == 0``).
    The result has M(M+1)/2 cells with M = 5 * (2 + b), in canonical key order.
    """
    blocks = () if parent is None else canonicalize(parent).blocks
    if len(blocks) != b:
        raise CellError(f"parent has {len(blocks)} blocks, expected {b}")
    if b >= max_blocks:
        raise CellError(f"parent already has the maximum of {max_blocks} blocks")
    choices = _branches(b)
    out = []
    for i, left in enumerate(choices):
        for right in choices[i:]:
            out.append(Cell(blocks + (Block(left, right),)))
    return sorted(out, key=Cell.key)


def block_depths(cell: Cell) -> list[int]:
    depths: list[int] = []
    for blk in cell.blocks:
        d = [0 if br.input < NUM_CELL_INPUTS else depths[br.input - NUM_CELL_INPUTS]
             for br in (blk.left, blk.right)]
        depths.append(1 + max(d))
    return depths


def cell_depth(cell: Cell) -> int:
    """Longest input-to-output path through the cell, counted in blocks."""
    if not cell.blocks:
        return 0
    depths = block_depths(cell)
    return max(depths[b] for b in cell.unconsumed())


def depth_distribution(cells: Iterable[Cell]) -> dict[int, int]:
    counts = Counter(cell_depth(c) for c in cells)
    if not counts:
        raise CellError("depth_distribution needs at least one cell")
    return dict(sorted(counts.items()))


def count_conv_ops(cell: Cell) -> int:
    return sum(br.op in CONV_OPS for blk in cell.blocks for br in (blk.left, blk.right))
