"""Sudoku generation with verified-unique solutions.

Grids hold values 1..n; the box size is sqrt(n). The 4x4 variant is fully
enumerable (288 complete grids), which keeps generation exactly uniform and
uniqueness checks exhaustive.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SudokuInstance:
    n: int
    clues: dict[int, int]  # flat cell index -> value 1..n
    solution: np.ndarray   # (n, n)

    def puzzle_grid(self) -> np.ndarray:
        """Solution grid with non-clue cells zeroed."""
        grid = np.zeros((self.n, self.n), dtype=np.int64)
        for idx, val in self.clues.items():
            grid[idx // self.n, idx % self.n] = val
        return grid


def check_sudoku(grid: np.ndarray) -> tuple[bool, list[tuple[str, int]]]:
    """True iff every row, column, and box holds each value exactly once.

    Violations come back as (kind, index) pairs.
    """
    grid = np.asarray(grid)
    n = grid.shape[0]
    if grid.shape != (n, n) or int(math.isqrt(n)) ** 2 != n:
        raise ValueError(f"grid must be n x n with square n, got {grid.shape}")
    box = math.isqrt(n)
    want = set(range(1, n + 1))
    violations = []
    for i in range(n):
        if set(grid[i, :].tolist()) != want:
            violations.append(("row", i))
        if set(grid[:, i].tolist()) != want:
            violations.append(("col", i))
    for bi in range(box):
        for bj in range(box):
            cells = grid[bi * box:(bi + 1) * box, bj * box:(bj + 1) * box]
            if set(cells.reshape(-1).tolist()) != want:
                violations.append(("box", bi * box + bj))
    return not violations, violations


def _solve(grid: np.ndarray, limit: int, out: list | None = None) -> int:
    """Backtracking count of completions (0 = empty cell); stops at ``limit``."""
    n = grid.shape[0]
    box = math.isqrt(n)
    empties = np.argwhere(grid == 0)
    if len(empties) == 0:
        ok, _ = check_sudoku(grid)
        if ok and out is not None:
            out.append(grid.copy())
        return int(ok)

    def candidates(r, c):
        used = set(grid[r, :].tolist()) | set(grid[:, c].tolist())
        br, bc = (r // box) * box, (c // box) * box
        used |= set(grid[br:br + box, bc:bc + box].reshape(-1).tolist())
        return [v for v in range(1, n + 1) if v not in used]

    # most-constrained cell first
    best, best_cands = None, None
    for r, c in empties:
        cands = candidates(r, c)
        if not cands:
            return 0
        if best_cands is None or len(cands) < len(best_cands):
            best, best_cands = (r, c), cands
            if len(cands) == 1:
                break
    count = 0
    r, c = best
    for v in best_cands:
        grid[r, c] = v
        count += _solve(grid, limit - count, out)
        grid[r, c] = 0
        if count >= limit:
            break
    return count


def count_solutions(puzzle: np.ndarray, limit: int = 2) -> int:
    """Number of completions of a partially filled grid, capped at ``limit``."""
    return _solve(np.asarray(puzzle, dtype=np.int64).copy(), limit)


@functools.lru_cache(maxsize=None)
def all_complete_grids(n: int = 4) -> tuple:
    """Every complete grid, as tuples (4x4: 288 of them)."""
    if n > 4:
        raise ValueError("exhaustive enumeration is for n <= 4")
    out: list[np.ndarray] = []
    _solve(np.zeros((n, n), dtype=np.int64), limit=10**9, out=out)
    return tuple(tuple(map(tuple, g)) for g in out)


def _complete_grid(n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 4:
        grids = all_complete_grids(4)
        return np.array(grids[int(rng.integers(len(grids)))], dtype=np.int64)
    # larger boards: randomized backtracking fill
    grid = np.zeros((n, n), dtype=np.int64)
    box = math.isqrt(n)

    def fill(pos: int) -> bool:
        if pos == n * n:
            return True
        r, c = divmod(pos, n)
        used = set(grid[r, :].tolist()) | set(grid[:, c].tolist())
        br, bc = (r // box) * box, (c // box) * box
        used |= set(grid[br:br + box, bc:bc + box].reshape(-1).tolist())
        cands = [v for v in range(1, n + 1) if v not in used]
        rng.shuffle(cands)
        for v in cands:
            grid[r, c] = v
            if fill(pos + 1):
                return True
            grid[r, c] = 0
        return False

    if not fill(0):
        raise RuntimeError("backtracking fill failed")
    return grid


def gen_sudoku(n: int, clue_count: int, seed: int) -> SudokuInstance:
    """Seeded instance: a complete grid with clues removed while the puzzle
    stays uniquely solvable, down to exactly ``clue_count`` clues."""
    if n not in (4, 9):
        raise ValueError("supported grid sides: 4 and 9")
    if not 0 <= clue_count <= n * n:
        raise ValueError(f"clue_count {clue_count} out of range")
    rng = np.random.default_rng(seed)
    for attempt in range(20):
        solution = _complete_grid(n, rng)
        puzzle = solution.copy()
        remaining = n * n
        progress = True
        while remaining > clue_count and progress:
            progress = False
            order = rng.permutation(n * n)
            for idx in order:
                r, c = divmod(int(idx), n)
                if puzzle[r, c] == 0:
                    continue
                saved = puzzle[r, c]
                puzzle[r, c] = 0
                if count_solutions(puzzle, limit=2) == 1:
                    remaining -= 1
                    progress = True
                    if remaining == clue_count:
                        break
                else:
                    puzzle[r, c] = saved
        if remaining == clue_count:
            clues = {int(r * n + c): int(puzzle[r, c])
                     for r in range(n) for c in range(n) if puzzle[r, c] != 0}
            return SudokuInstance(n=n, clues=clues, solution=solution)
    raise ValueError(f"could not reach clue_count={clue_count} with a unique solution")
