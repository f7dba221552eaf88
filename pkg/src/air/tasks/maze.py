"""Maze generation: randomized depth-first carving plus BFS labeling.

Rooms sit at odd grid indices, so a perfect maze needs an odd side; for
even requested sides the carved grid is padded with one wall row and
column at the bottom/right. Start and goal are random distinct rooms and
the (unique, since the maze is a tree) shortest path between them is
marked SOLUTION in the target, endpoints included.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .data import PuzzleInstance, instance_rng

_WALL, _OPEN, _SOLUTION, _START, _GOAL = "#", ".", "*", "S", "G"
_PASSABLE = {_OPEN, _START, _GOAL}


def _carve(rooms: int, rng: np.random.Generator) -> np.ndarray:
    """Perfect maze over rooms x rooms cells; returns a (2r+1)^2 char grid."""
    side = 2 * rooms + 1
    grid = np.full((side, side), _WALL, dtype="U1")
    visited = np.zeros((rooms, rooms), dtype=bool)
    stack = [(0, 0)]
    visited[0, 0] = True
    grid[1, 1] = _OPEN
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    while stack:
        cy, cx = stack[-1]
        options = [
            (ny, nx)
            for dy, dx in moves
            for ny, nx in [(cy + dy, cx + dx)]
            if 0 <= ny < rooms and 0 <= nx < rooms and not visited[ny, nx]
        ]
        if not options:
            stack.pop()
            continue
        ny, nx = options[int(rng.integers(len(options)))]
        grid[cy + ny + 1, cx + nx + 1] = _OPEN
        grid[2 * ny + 1, 2 * nx + 1] = _OPEN
        visited[ny, nx] = True
        stack.append((ny, nx))
    return grid


def bfs_distances(grid: np.ndarray, start: tuple) -> dict:
    """Shortest-path tree over passable cells; returns {cell: (dist, parent)}."""
    side = grid.shape[0]
    seen = {start: (0, None)}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        d = seen[(r, c)][0]
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < side and 0 <= nc < side and (nr, nc) not in seen \
                    and grid[nr, nc] in _PASSABLE:
                seen[(nr, nc)] = (d + 1, (r, c))
                queue.append((nr, nc))
    return seen


def gen_maze(side: int, seed: int) -> PuzzleInstance:
    """Carve a maze, place start/goal, and mark the shortest path.

    The input grid holds wall/open/start/goal; the target copies it with
    every path cell (endpoints included) rewritten to SOLUTION.
    """
    if side < 5:
        raise ValueError(f"maze side {side} too small (need >= 5)")
    rng = instance_rng(seed, 0)
    rooms = (side - 1) // 2
    carved = _carve(rooms, rng)
    grid = np.full((side, side), _WALL, dtype="U1")
    grid[: carved.shape[0], : carved.shape[1]] = carved

    room_cells = [(2 * y + 1, 2 * x + 1) for y in range(rooms) for x in range(rooms)]
    i, j = rng.choice(len(room_cells), size=2, replace=False)
    start, goal = room_cells[int(i)], room_cells[int(j)]
    grid[start] = _START
    grid[goal] = _GOAL

    tree = bfs_distances(grid, start)
    if goal not in tree:
        raise RuntimeError(f"maze start and goal disconnected (seed {seed})")
    target = grid.copy()
    cell = goal
    while cell is not None:
        target[cell] = _SOLUTION
        cell = tree[cell][1]
    return PuzzleInstance(kind="maze", side=side, input_tokens=grid.reshape(-1),
                          target_tokens=target.reshape(-1), seed=seed)


def maze_error_set(decoded, truth) -> set:
    """Positions where the decoded grid disagrees with the ground truth."""
    decoded = np.asarray(decoded)
    truth = np.asarray(truth)
    if decoded.shape != truth.shape:
        raise ValueError(f"grid shapes differ: {decoded.shape} vs {truth.shape}")
    return set(np.flatnonzero(decoded.reshape(-1) != truth.reshape(-1)).tolist())
