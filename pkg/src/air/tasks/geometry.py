"""Board neighborhoods used by the attention statistics.

Sudoku: N(q) is the 20 cells sharing a row, column, or box with q.
Maze: the 4-neighborhood, 8-neighborhood, and centered 5x5 window, all
clipped at the borders and excluding q itself, nested as
N4 <= N8 <= N5x5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

SUDOKU_KIND = "sudoku"
MAZE_KINDS = ("n4", "n8", "n5x5")


@dataclass
class BoardGeometry:
    kind: str
    side: int
    box_side: int | None
    tables: dict  # neighborhood kind -> list of sorted cell-index lists

    @property
    def cells(self) -> int:
        return self.side * self.side

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "side": self.side,
            "box_side": self.box_side,
            "tables": self.tables,
        }, sort_keys=True)


def _sudoku_neighbors(side: int, box: int, q: int) -> list:
    r, c = divmod(q, side)
    cells = set()
    cells.update(r * side + j for j in range(side))
    cells.update(i * side + c for i in range(side))
    br, bc = (r // box) * box, (c // box) * box
    cells.update((br + i) * side + (bc + j) for i in range(box) for j in range(box))
    cells.discard(q)
    return sorted(cells)


def _window_neighbors(side: int, q: int, offsets) -> list:
    r, c = divmod(q, side)
    out = []
    for dr, dc in offsets:
        nr, nc = r + dr, c + dc
        if (dr or dc) and 0 <= nr < side and 0 <= nc < side:
            out.append(nr * side + nc)
    return sorted(out)


def build_geometry(kind: str, side: int) -> BoardGeometry:
    if kind == "sudoku":
        box = int(math.isqrt(side))
        if box * box != side:
            raise ValueError(f"sudoku side {side} is not a perfect square")
        table = [_sudoku_neighbors(side, box, q) for q in range(side * side)]
        return BoardGeometry(kind="sudoku", side=side, box_side=box, tables={SUDOKU_KIND: table})
    if kind == "maze":
        n4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        n8 = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
        n5 = [(dr, dc) for dr in range(-2, 3) for dc in range(-2, 3)]
        tables = {
            "n4": [_window_neighbors(side, q, n4) for q in range(side * side)],
            "n8": [_window_neighbors(side, q, n8) for q in range(side * side)],
            "n5x5": [_window_neighbors(side, q, n5) for q in range(side * side)],
        }
        return BoardGeometry(kind="maze", side=side, box_side=None, tables=tables)
    raise ValueError(f"unknown geometry kind {kind!r}")


def neighborhood(geom: BoardGeometry, q: int, kind: str) -> list:
    """Neighbor cells of q for the requested neighborhood kind."""
    if not 0 <= q < geom.cells:
        raise IndexError(f"cell {q} outside a {geom.side}x{geom.side} board")
    if kind not in geom.tables:
        raise ValueError(f"geometry {geom.kind!r} has no {kind!r} neighborhood")
    return geom.tables[kind][q]
