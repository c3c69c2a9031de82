"""Zebra (Einstein) riddles: positions in a row, one value permutation per
attribute category, typed clues, and a brute-force solver over all
permutation products.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

CLUE_KINDS = ("immediately_left", "somewhere_left", "position_is", "is_not", "attribute_equals")


@dataclass(frozen=True)
class Clue:
    """Typed constraint over value positions.

    position_is uses (category, value, position); every other kind relates
    two (category, value) pairs.
    """

    kind: str
    c1: int
    v1: int
    c2or_pos: int
    v2: int = -1

    def __post_init__(self):
        if self.kind not in CLUE_KINDS:
            raise ValueError(f"unknown clue kind {self.kind!r}")


@dataclass
class ZebraInstance:
    m: int                       # entities / positions
    n_categories: int
    clues: list[Clue]
    solution: np.ndarray         # (n_categories, m): solution[c][p] = value at position p
    category_names: list[str] = field(default_factory=list)
    value_names: list[list[str]] = field(default_factory=list)


def _positions(assignment: np.ndarray) -> np.ndarray:
    """positions[c][v] = position of value v in category c."""
    C, m = assignment.shape
    pos = np.empty_like(assignment)
    for c in range(C):
        pos[c, assignment[c]] = np.arange(m)
    return pos


def satisfies(assignment: np.ndarray, clue: Clue) -> bool:
    pos = _positions(assignment)
    if clue.kind == "position_is":
        return pos[clue.c1, clue.v1] == clue.c2or_pos
    p1 = pos[clue.c1, clue.v1]
    p2 = pos[clue.c2or_pos, clue.v2]
    if clue.kind == "immediately_left":
        return p1 + 1 == p2
    if clue.kind == "somewhere_left":
        return p1 < p2
    if clue.kind == "is_not":
        return p1 != p2
    if clue.kind == "attribute_equals":
        return p1 == p2
    raise ValueError(clue.kind)


def solve_zebra(inst: ZebraInstance, limit: int | None = None) -> list[np.ndarray]:
    """All satisfying assignments by brute force over (m!)^C candidates."""
    perms = list(itertools.permutations(range(inst.m)))
    out = []
    for combo in itertools.product(perms, repeat=inst.n_categories):
        assignment = np.array(combo)
        if all(satisfies(assignment, c) for c in inst.clues):
            out.append(assignment)
            if limit is not None and len(out) >= limit:
                break
    return out


def _true_clues(solution: np.ndarray) -> list[Clue]:
    """Every clue of every kind that holds for the ground-truth assignment."""
    C, m = solution.shape
    pos = _positions(solution)
    clues: list[Clue] = []
    for c in range(C):
        for v in range(m):
            clues.append(Clue("position_is", c, v, int(pos[c, v])))
    for c1 in range(C):
        for c2 in range(C):
            for v1 in range(m):
                for v2 in range(m):
                    if c1 == c2 and v1 == v2:
                        continue
                    p1, p2 = pos[c1, v1], pos[c2, v2]
                    if p1 + 1 == p2:
                        clues.append(Clue("immediately_left", c1, v1, c2, v2))
                    if p1 < p2:
                        clues.append(Clue("somewhere_left", c1, v1, c2, v2))
                    if c1 != c2:
                        kind = "attribute_equals" if p1 == p2 else "is_not"
                        clues.append(Clue(kind, c1, v1, c2, v2))
    return clues


def gen_zebra(m: int, seed: int, n_categories: int = 2, max_clues: int = 16) -> ZebraInstance:
    """Sample a ground truth and greedily add true clues until it is the
    unique satisfying assignment (each kept clue strictly shrinks the
    candidate set, so dropping the last one re-admits alternatives)."""
    if m > 5:
        raise ValueError("brute-force solving is kept to m <= 5")
    rng = np.random.default_rng(seed)
    solution = np.stack([rng.permutation(m) for _ in range(n_categories)])
    pool = _true_clues(solution)
    rng.shuffle(pool)

    inst = ZebraInstance(m=m, n_categories=n_categories, clues=[], solution=solution)
    count = len(solve_zebra(inst, limit=None))
    for clue in pool:
        if count == 1 or len(inst.clues) >= max_clues:
            break
        trial = ZebraInstance(m=m, n_categories=n_categories,
                              clues=inst.clues + [clue], solution=solution)
        new_count = len(solve_zebra(trial))
        if new_count < count:
            inst.clues.append(clue)
            count = new_count
    if count != 1:
        raise RuntimeError("failed to pin a unique solution within max_clues")
    return inst


def paper_example_riddle() -> ZebraInstance:
    """The worked three-category riddle: names, house colors, drinks.

    Categories: 0 names (Ali, Rose, Randy), 1 colors (gold, silver, indigo),
    2 drinks (orange juice, beer, coffee).
    """
    names = ["Ali", "Rose", "Randy"]
    colors = ["gold", "silver", "indigo"]
    drinks = ["orange juice", "beer", "coffee"]
    clues = [
        Clue("immediately_left", 2, 0, 2, 2),   # OJ directly left of coffee
        Clue("somewhere_left", 2, 1, 1, 2),     # beer left of indigo house
        Clue("position_is", 0, 1, 0),           # Rose at position 0
        Clue("is_not", 0, 2, 2, 0),             # Randy does not drink OJ
        Clue("attribute_equals", 0, 2, 1, 0),   # Randy lives in the gold house
    ]
    solution = np.array([
        [1, 0, 2],  # Rose, Ali, Randy
        [1, 2, 0],  # silver, indigo, gold
        [1, 0, 2],  # beer, OJ, coffee
    ])
    return ZebraInstance(m=3, n_categories=3, clues=clues, solution=solution,
                         category_names=["name", "color", "drink"],
                         value_names=[names, colors, drinks])
