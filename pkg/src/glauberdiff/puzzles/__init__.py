from .sudoku import SudokuInstance, check_sudoku, count_solutions, gen_sudoku
from .zebra import Clue, ZebraInstance, gen_zebra, paper_example_riddle, solve_zebra

__all__ = [
    "SudokuInstance",
    "check_sudoku",
    "count_solutions",
    "gen_sudoku",
    "Clue",
    "ZebraInstance",
    "gen_zebra",
    "paper_example_riddle",
    "solve_zebra",
]
