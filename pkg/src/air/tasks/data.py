"""Puzzle containers, token vocabularies, and dataset files.

Sudoku cells are ints (0 = blank, 1..side = digits), so symbols and token
ids coincide. Maze cells are single characters mapped to a fixed 6-token
vocabulary; PAD never appears in inputs or targets, it is the undecided
marker that shows up only in decoded model states.

Dataset files are JSON lines with records {input, target, seed, kind};
record i is fully determined by (master seed, i).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

SUDOKU_BLANK = 0

MAZE_SYMBOLS = ("#", ".", "*", "S", "G", "?")  # wall, open, solution, start, goal, pad
MAZE_WALL, MAZE_OPEN, MAZE_SOLUTION, MAZE_START, MAZE_GOAL, MAZE_PAD = range(6)
_MAZE_TO_ID = {sym: i for i, sym in enumerate(MAZE_SYMBOLS)}


@dataclass
class PuzzleInstance:
    kind: str                 # "sudoku" | "maze"
    side: int
    input_tokens: np.ndarray  # [side*side] symbols, row-major
    target_tokens: np.ndarray
    seed: int | None = None

    @property
    def cells(self) -> int:
        return self.side * self.side


def vocab_size(kind: str, side: int) -> int:
    if kind == "sudoku":
        return side + 1
    if kind == "maze":
        return len(MAZE_SYMBOLS)
    raise ValueError(f"unknown task kind {kind!r}")


def undecided_id(kind: str) -> int:
    """Token id the model uses for not-yet-committed cells."""
    return SUDOKU_BLANK if kind == "sudoku" else MAZE_PAD


def encode_puzzle(p: PuzzleInstance):
    """Symbol grids -> (input ids, target ids), row-major int64 arrays."""
    if p.kind == "sudoku":
        inp = np.asarray(p.input_tokens, dtype=np.int64)
        tgt = np.asarray(p.target_tokens, dtype=np.int64)
        v = vocab_size("sudoku", p.side)
        for name, arr in (("input", inp), ("target", tgt)):
            if arr.min() < 0 or arr.max() >= v:
                raise ValueError(f"sudoku {name} symbol outside 0..{v - 1}")
        return inp, tgt
    if p.kind == "maze":
        def enc(arr, name):
            out = np.empty(len(arr), dtype=np.int64)
            for i, sym in enumerate(arr):
                if sym not in _MAZE_TO_ID:
                    raise ValueError(f"unknown maze {name} symbol {sym!r}")
                out[i] = _MAZE_TO_ID[sym]
            return out
        return enc(p.input_tokens, "input"), enc(p.target_tokens, "target")
    raise ValueError(f"unknown task kind {p.kind!r}")


def decode_tokens(ids, kind: str) -> np.ndarray:
    """Token ids -> symbol grid (inverse of encode_puzzle)."""
    ids = np.asarray(ids, dtype=np.int64)
    if kind == "sudoku":
        return ids.copy()
    if kind == "maze":
        if ids.min() < 0 or ids.max() >= len(MAZE_SYMBOLS):
            raise ValueError("maze token id outside vocabulary")
        return np.array([MAZE_SYMBOLS[i] for i in ids], dtype="U1")
    raise ValueError(f"unknown task kind {kind!r}")


def instance_from_ids(kind: str, input_ids, target_ids, seed=None) -> PuzzleInstance:
    input_ids = np.asarray(input_ids, dtype=np.int64)
    side = int(math.isqrt(len(input_ids)))
    if side * side != len(input_ids):
        raise ValueError(f"token count {len(input_ids)} is not a square board")
    return PuzzleInstance(
        kind=kind,
        side=side,
        input_tokens=decode_tokens(input_ids, kind),
        target_tokens=decode_tokens(target_ids, kind),
        seed=seed,
    )


def write_dataset(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for p in instances:
            inp, tgt = encode_puzzle(p)
            fh.write(json.dumps({
                "input": inp.tolist(),
                "target": tgt.tolist(),
                "seed": p.seed,
                "kind": p.kind,
            }) + "\n")


def load_dataset(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            out.append(instance_from_ids(row["kind"], row["input"], row["target"], seed=row.get("seed")))
    return out


def instance_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-instance stream derived from (master seed, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, index))))


def generate_dataset(kind: str, side: int, count: int, seed: int, givens: int | None = None,
                     augment: int = 1) -> list:
    """Deterministic instance list; with augment > 1 each base sudoku yields
    augment relabeled/permuted copies (the first copy is the base puzzle)."""
    from . import maze as maze_mod
    from . import sudoku as sudoku_mod

    if augment < 1:
        raise ValueError("augment must be >= 1")
    instances = []
    if kind == "sudoku":
        if givens is None:
            raise ValueError("sudoku generation needs a givens count")
        n_base = -(-count // augment)
        for i in range(n_base):
            base = sudoku_mod.gen_sudoku(side, givens, seed=_derive(seed, i))
            instances.append(base)
            for j in range(1, augment):
                instances.append(sudoku_mod.augment_sudoku(base, seed=_derive(seed, i * augment + j)))
        return instances[:count]
    if kind == "maze":
        return [maze_mod.gen_maze(side, seed=_derive(seed, i)) for i in range(count)]
    raise ValueError(f"unknown task kind {kind!r}")


def _derive(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((master_seed, index)).generate_state(1)[0])
