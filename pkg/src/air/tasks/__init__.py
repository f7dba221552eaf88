from .data import (
    PuzzleInstance,
    MAZE_SYMBOLS,
    MAZE_WALL,
    MAZE_OPEN,
    MAZE_SOLUTION,
    MAZE_START,
    MAZE_GOAL,
    MAZE_PAD,
    SUDOKU_BLANK,
    vocab_size,
    undecided_id,
    encode_puzzle,
    decode_tokens,
    write_dataset,
    load_dataset,
    generate_dataset,
)
from .geometry import BoardGeometry, build_geometry, neighborhood
from .sudoku import GenerationError, gen_sudoku, sudoku_oracle, augment_sudoku, violations_sudoku
from .maze import gen_maze, maze_error_set, bfs_distances

__all__ = [
    "PuzzleInstance",
    "MAZE_SYMBOLS",
    "MAZE_WALL",
    "MAZE_OPEN",
    "MAZE_SOLUTION",
    "MAZE_START",
    "MAZE_GOAL",
    "MAZE_PAD",
    "SUDOKU_BLANK",
    "vocab_size",
    "undecided_id",
    "encode_puzzle",
    "decode_tokens",
    "write_dataset",
    "load_dataset",
    "generate_dataset",
    "BoardGeometry",
    "build_geometry",
    "neighborhood",
    "GenerationError",
    "gen_sudoku",
    "sudoku_oracle",
    "augment_sudoku",
    "violations_sudoku",
    "gen_maze",
    "maze_error_set",
    "bfs_distances",
]
