"""Sudoku generation, the uniqueness oracle, augmentation, and violations.

Grids are flat int arrays, 0 for blank. The oracle is an exhaustive
backtracking counter with deterministic cell and value order, capped at
two solutions since only uniqueness matters.
"""

from __future__ import annotations

import math

import numpy as np

from .data import PuzzleInstance, SUDOKU_BLANK, instance_rng


class GenerationError(RuntimeError):
    """Puzzle generation did not reach the requested shape."""


def _box_side(side: int) -> int:
    b = int(math.isqrt(side))
    if b * b != side:
        raise ValueError(f"sudoku side {side} is not a perfect square")
    return b


def _units_ok(grid, side, box, r, c, v) -> bool:
    row = grid[r * side:(r + 1) * side]
    if v in row:
        return False
    if v in grid[c::side]:
        return False
    br, bc = (r // box) * box, (c // box) * box
    for i in range(br, br + box):
        for j in range(bc, bc + box):
            if grid[i * side + j] == v:
                return False
    return True


def _fill(grid, side, box, rng) -> bool:
    """Randomized backtracking completion of a partial grid, in place."""
    try:
        idx = next(i for i, v in enumerate(grid) if v == SUDOKU_BLANK)
    except StopIteration:
        return True
    r, c = divmod(idx, side)
    values = rng.permutation(np.arange(1, side + 1))
    for v in values:
        v = int(v)
        if _units_ok(grid, side, box, r, c, v):
            grid[idx] = v
            if _fill(grid, side, box, rng):
                return True
            grid[idx] = SUDOKU_BLANK
    return False


def solved_grid(side: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.zeros(side * side, dtype=np.int64)
    box = _box_side(side)
    if not _fill(grid, side, box, rng):
        raise GenerationError(f"could not fill a {side}x{side} grid")
    return grid


def sudoku_oracle(grid, limit: int = 2):
    """Count completions by exhaustive backtracking (deterministic order).

    Returns (count capped at ``limit``, first solution found or None).
    """
    grid = np.asarray(grid, dtype=np.int64).copy()
    side = int(math.isqrt(len(grid)))
    box = _box_side(side)
    first = [None]
    count = [0]

    def recurse():
        try:
            idx = next(i for i, v in enumerate(grid) if v == SUDOKU_BLANK)
        except StopIteration:
            count[0] += 1
            if first[0] is None:
                first[0] = grid.copy()
            return
        r, c = divmod(idx, side)
        for v in range(1, side + 1):
            if _units_ok(grid, side, box, r, c, v):
                grid[idx] = v
                recurse()
                grid[idx] = SUDOKU_BLANK
                if count[0] >= limit:
                    return

    # A grid that already breaks a constraint has no completions.
    for i, v in enumerate(grid):
        if v != SUDOKU_BLANK:
            r, c = divmod(i, side)
            grid[i] = SUDOKU_BLANK
            ok = _units_ok(grid, side, box, r, c, int(v))
            grid[i] = v
            if not ok:
                return 0, None
    recurse()
    return count[0], first[0]


def gen_sudoku(side: int, givens: int, seed: int, retries: int = 50) -> PuzzleInstance:
    """Generate a puzzle with a unique solution and exactly ``givens`` clues.

    Digs cells out of a random solved grid, keeping uniqueness at every
    removal. Raises GenerationError (with the seed) when the target clue
    count is not reachable within the retry budget; very low targets such
    as the 17-clue regime are not reachable by random digging.
    """
    if side not in (4, 9):
        raise ValueError(f"unsupported sudoku side {side}")
    minimum = 17 if side == 9 else 4
    if givens < minimum:
        raise ValueError(f"givens {givens} below the minimum {minimum} for {side}x{side}")
    if givens > side * side:
        raise ValueError(f"givens {givens} exceeds the cell count")
    for attempt in range(retries):
        rng = instance_rng(seed, attempt)
        solution = solved_grid(side, rng)
        puzzle = solution.copy()
        remaining = side * side
        for idx in rng.permutation(side * side):
            if remaining == givens:
                break
            saved = puzzle[idx]
            puzzle[idx] = SUDOKU_BLANK
            count, _ = sudoku_oracle(puzzle)
            if count == 1:
                remaining -= 1
            else:
                puzzle[idx] = saved
        if remaining == givens:
            return PuzzleInstance(kind="sudoku", side=side, input_tokens=puzzle,
                                  target_tokens=solution, seed=seed)
    raise GenerationError(
        f"no {side}x{side} puzzle with {givens} givens after {retries} attempts (seed {seed})"
    )


def augment_sudoku(p: PuzzleInstance, seed: int) -> PuzzleInstance:
    """Validity-preserving relabeling plus band/line permutations.

    Applies one random digit bijection, permutes rows within each band and
    the bands themselves, and the same for columns. Uniqueness of the
    solution is preserved by construction.
    """
    if p.kind != "sudoku":
        raise ValueError("augment_sudoku needs a sudoku instance")
    side, box = p.side, _box_side(p.side)
    rng = instance_rng(seed, 0)
    relabel = np.concatenate([[SUDOKU_BLANK], rng.permutation(np.arange(1, side + 1))])

    def line_perm():
        order = []
        for band in rng.permutation(box):
            order.extend(band * box + rng.permutation(box))
        return np.asarray(order)

    rows, cols = line_perm(), line_perm()

    def apply(grid):
        g = relabel[np.asarray(grid, dtype=np.int64)].reshape(side, side)
        return g[np.ix_(rows, cols)].reshape(-1)

    return PuzzleInstance(kind="sudoku", side=side, input_tokens=apply(p.input_tokens),
                          target_tokens=apply(p.target_tokens), seed=seed)


def violations_sudoku(grid, side: int | None = None) -> set:
    """Cells whose digit clashes with another cell in a shared unit.

    Both partners of a clash are included; blanks never violate.
    """
    grid = np.asarray(grid, dtype=np.int64)
    if side is None:
        side = int(math.isqrt(len(grid)))
    box = _box_side(side)
    units = []
    for r in range(side):
        units.append([r * side + c for c in range(side)])
    for c in range(side):
        units.append([r * side + c for r in range(side)])
    for br in range(0, side, box):
        for bc in range(0, side, box):
            units.append([(br + i) * side + (bc + j) for i in range(box) for j in range(box)])
    bad = set()
    for unit in units:
        seen: dict[int, list] = {}
        for idx in unit:
            v = int(grid[idx])
            if v != SUDOKU_BLANK:
                seen.setdefault(v, []).append(idx)
        for cells in seen.values():
            if len(cells) > 1:
                bad.update(cells)
    return bad
