"""Task harnesses: token encodings, on-the-fly corpora, puzzle and
distribution evaluations, and the compute-matched best-of-N comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import UpdateSchedule
from .energies import TabularDistribution, state_index
from .hmm import HmmCorpus
from .oracle import tv_distance
from .puzzles.sudoku import SudokuInstance, all_complete_grids, check_sudoku, gen_sudoku
from .puzzles.zebra import CLUE_KINDS, Clue, ZebraInstance, gen_zebra
from .sampling import generate_many


# ---------------------------------------------------------------- sudoku

def encode_sudoku(inst: SudokuInstance) -> tuple[np.ndarray, frozenset[int]]:
    """One token per cell (value - 1), clue cells frozen in place."""
    tokens = (inst.solution.reshape(-1) - 1).astype(np.int64)
    return tokens, frozenset(inst.clues)


def decode_sudoku(tokens: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(tokens).reshape(n, n) + 1


def sudoku_corpus(n: int = 4):
    """Sampler of complete solution grids as token batches (uniform for n=4)."""
    if n == 4:
        grids = np.array(all_complete_grids(4), dtype=np.int64)

        def sampler(rng: np.random.Generator, batch: int) -> np.ndarray:
            picks = rng.integers(0, len(grids), size=batch)
            return grids[picks].reshape(batch, -1) - 1

        return sampler

    def sampler(rng: np.random.Generator, batch: int) -> np.ndarray:
        out = []
        for _ in range(batch):
            inst = gen_sudoku(n, clue_count=n * n, seed=int(rng.integers(2**63)))
            out.append(inst.solution.reshape(-1) - 1)
        return np.stack(out)

    return sampler


def sudoku_vocab_size(n: int) -> int:
    return n


# ---------------------------------------------------------------- zebra

@dataclass(frozen=True)
class ZebraLayout:
    """Fixed-shape token layout: a clue preamble of fixed-arity triples
    followed by one slot per (category, position)."""

    m: int = 3
    n_categories: int = 2
    max_clues: int = 6

    @property
    def n_value_tokens(self) -> int:
        return self.n_categories * self.m

    def value_token(self, c: int, v: int) -> int:
        return c * self.m + v

    def kind_token(self, kind: str) -> int:
        return self.n_value_tokens + CLUE_KINDS.index(kind)

    def position_token(self, p: int) -> int:
        return self.n_value_tokens + len(CLUE_KINDS) + p

    @property
    def pad_token(self) -> int:
        return self.n_value_tokens + len(CLUE_KINDS) + self.m

    @property
    def vocab_size(self) -> int:
        return self.pad_token + 1

    @property
    def preamble_len(self) -> int:
        return 3 * self.max_clues

    @property
    def seq_len(self) -> int:
        return self.preamble_len + self.n_categories * self.m


def encode_zebra(inst: ZebraInstance, layout: ZebraLayout) -> tuple[np.ndarray, frozenset[int]]:
    """Clues as frozen (kind, arg1, arg2) triples, then the answer slots."""
    if inst.m != layout.m or inst.n_categories != layout.n_categories:
        raise ValueError("instance does not match layout")
    if len(inst.clues) > layout.max_clues:
        raise ValueError(f"instance has {len(inst.clues)} clues; layout allows {layout.max_clues}")
    tokens = np.full(layout.seq_len, layout.pad_token, dtype=np.int64)
    for i, clue in enumerate(inst.clues):
        base = 3 * i
        tokens[base] = layout.kind_token(clue.kind)
        tokens[base + 1] = layout.value_token(clue.c1, clue.v1)
        if clue.kind == "position_is":
            tokens[base + 2] = layout.position_token(clue.c2or_pos)
        else:
            tokens[base + 2] = layout.value_token(clue.c2or_pos, clue.v2)
    for c in range(layout.n_categories):
        for p in range(layout.m):
            tokens[layout.preamble_len + c * layout.m + p] = layout.value_token(c, int(inst.solution[c, p]))
    return tokens, frozenset(range(layout.preamble_len))


def decode_zebra(tokens: np.ndarray, layout: ZebraLayout) -> np.ndarray:
    """Answer slots back to an assignment; tokens outside their category
    decode to -1 (never a valid value)."""
    out = np.full((layout.n_categories, layout.m), -1, dtype=np.int64)
    for c in range(layout.n_categories):
        for p in range(layout.m):
            tok = int(tokens[layout.preamble_len + c * layout.m + p])
            v = tok - c * layout.m
            if 0 <= v < layout.m:
                out[c, p] = v
    return out


def zebra_corpus(layout: ZebraLayout):
    """Sampler of encoded riddle+answer sequences from fresh instances."""

    def sampler(rng: np.random.Generator, batch: int) -> np.ndarray:
        out = []
        while len(out) < batch:
            inst = gen_zebra(layout.m, seed=int(rng.integers(2**63)),
                             n_categories=layout.n_categories, max_clues=layout.max_clues)
            tokens, _ = encode_zebra(inst, layout)
            out.append(tokens)
        return np.stack(out)

    return sampler


# ---------------------------------------------------------------- evaluation

def _generate_batched(model, schedule, frozen, templates, window, top_p, rng,
                      causal_only=False, chunk=512):
    reports = []
    B = frozen.shape[0]
    for lo in range(0, B, chunk):
        hi = min(B, lo + chunk)
        reports.extend(generate_many(
            model, schedule, rng, count=hi - lo,
            frozen_masks=frozen[lo:hi], templates=templates[lo:hi],
            window=window, top_p=top_p, causal_only=causal_only))
    return reports


def eval_puzzles(model, schedule: UpdateSchedule, instances: list, rng: np.random.Generator,
                 window: int = 1, top_p: float | None = None,
                 layout: ZebraLayout | None = None, causal_only: bool = False) -> dict:
    """Solve rate of generated fills over encoded instances.

    Sudoku fills count when the completed grid passes the row/column/box
    check; zebra fills when the decoded assignment equals the instance's
    unique solution.
    """
    if not instances:
        raise ValueError("no instances")
    kind = "sudoku" if isinstance(instances[0], SudokuInstance) else "zebra"
    enc, frz = [], []
    for inst in instances:
        if kind == "sudoku":
            tokens, frozen = encode_sudoku(inst)
        else:
            tokens, frozen = encode_zebra(inst, layout)
        if len(tokens) != schedule.L:
            raise ValueError(f"encoded length {len(tokens)} != schedule length {schedule.L}")
        enc.append(tokens)
        mask = np.zeros(schedule.L, dtype=bool)
        mask[list(frozen)] = True
        frz.append(mask)
    templates = np.stack(enc)
    frozen_masks = np.stack(frz)

    reports = _generate_batched(model, schedule, frozen_masks, templates, window, top_p,
                                rng, causal_only=causal_only)
    records = []
    for inst, rep in zip(instances, reports):
        if kind == "sudoku":
            grid = decode_sudoku(rep.tokens, inst.n)
            ok, _ = check_sudoku(grid)
        else:
            ok = bool(np.array_equal(decode_zebra(rep.tokens, layout), inst.solution))
        records.append({
            "solved": bool(ok),
            "invocations": rep.invocations,
        })
    acc = float(np.mean([r["solved"] for r in records]))
    return {
        "task": kind,
        "n": len(instances),
        "accuracy": acc,
        "se": math.sqrt(max(acc * (1 - acc), 1e-12) / len(instances)),
        "window": window,
        "rounds": schedule.N,
        "causal_only": causal_only,
        "records": records,
    }


def eval_distribution(model, truth, sample_count: int, schedule: UpdateSchedule,
                      rng: np.random.Generator, causal_only: bool = False,
                      samples: np.ndarray | None = None) -> dict:
    """Sample unconditionally and score against an exact ground truth.

    HMM truth reports the mean exact negative log-likelihood with its
    standard error; tabular truth reports total variation as well.
    ``samples`` bypasses generation (used for the oracle-exact sampler).
    """
    if sample_count < 100:
        raise ValueError("sample_count below 100 gives a useless standard error")
    if samples is None:
        L = schedule.L
        frozen = np.zeros((sample_count, L), dtype=bool)
        templates = np.zeros((sample_count, L), dtype=np.int64)
        reports = _generate_batched(model, schedule, frozen, templates, 1, None, rng,
                                    causal_only=causal_only)
        samples = np.stack([r.tokens for r in reports])
        invocations = int(sum(sum(r.invocations.values()) for r in reports))
    else:
        samples = np.asarray(samples)
        invocations = 0

    out: dict = {
        "samples": int(samples.shape[0]),
        "causal_only": causal_only,
        "invocations": invocations,
    }
    if isinstance(truth, HmmCorpus):
        nll = -truth.log_likelihood_batch(samples)
        out["kind"] = "hmm"
        out["mean_nll"] = float(nll.mean())
        out["se_nll"] = float(nll.std(ddof=1) / math.sqrt(len(nll)))
    elif isinstance(truth, TabularDistribution):
        idx = np.array([state_index(s, truth.sigma) for s in samples])
        freq = np.bincount(idx, minlength=len(truth.probs)) / len(idx)
        out["kind"] = "tabular"
        out["tv"] = tv_distance(freq, truth.probs)
        with np.errstate(divide="ignore"):
            lp = np.log(truth.probs[idx])
        out["mean_nll"] = float(-lp.mean())
        out["se_nll"] = float(lp.std(ddof=1) / math.sqrt(len(lp))) if len(lp) > 1 else 0.0
    else:
        raise TypeError(f"unsupported ground truth {type(truth)}")
    return out


def sudoku_to_dict(inst: SudokuInstance) -> dict:
    return {
        "n": inst.n,
        "clues": {str(k): int(v) for k, v in inst.clues.items()},
        "solution": inst.solution.tolist(),
    }


def sudoku_from_dict(d: dict) -> SudokuInstance:
    return SudokuInstance(
        n=int(d["n"]),
        clues={int(k): int(v) for k, v in d["clues"].items()},
        solution=np.asarray(d["solution"], dtype=np.int64),
    )


def zebra_to_dict(inst: ZebraInstance) -> dict:
    return {
        "m": inst.m,
        "n_categories": inst.n_categories,
        "clues": [[c.kind, c.c1, c.v1, c.c2or_pos, c.v2] for c in inst.clues],
        "solution": inst.solution.tolist(),
    }


def zebra_from_dict(d: dict) -> ZebraInstance:
    return ZebraInstance(
        m=int(d["m"]),
        n_categories=int(d["n_categories"]),
        clues=[Clue(kind, int(c1), int(v1), int(c2), int(v2))
               for kind, c1, v1, c2, v2 in d["clues"]],
        solution=np.asarray(d["solution"], dtype=np.int64),
    )


def bon_eval(ar_model, glauber_model, schedule: UpdateSchedule, instances: list,
             K: int, rng: np.random.Generator, layout: ZebraLayout | None = None,
             window: int = 1) -> dict:
    """Compute-matched best-of-N: 2K causal-only candidates against K full
    generations (one causal pass plus one N=1 edit pass each). A prompt
    scores when any of its candidates solves the task."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if schedule.N != 1:
        raise ValueError("compute matching assumes one edit round (N=1)")

    def best_of(model, n_candidates, causal_only):
        hits = np.zeros(len(instances), dtype=bool)
        total_inv = 0
        for c in range(n_candidates):
            res = eval_puzzles(model, schedule, instances,
                               rng, window=window, layout=layout, causal_only=causal_only)
            for i, rec in enumerate(res["records"]):
                hits[i] |= rec["solved"]
                total_inv += sum(rec["invocations"].values())
        return hits, total_inv

    ar_hits, ar_inv = best_of(ar_model, 2 * K, causal_only=True)
    gl_hits, gl_inv = best_of(glauber_model, K, causal_only=False)
    n = len(instances)
    ar_acc, gl_acc = float(ar_hits.mean()), float(gl_hits.mean())
    return {
        "k": K,
        "n": n,
        "ar_bon": 2 * K,
        "glauber_bon": K,
        "ar_accuracy": ar_acc,
        "glauber_accuracy": gl_acc,
        "ar_se": math.sqrt(max(ar_acc * (1 - ar_acc), 1e-12) / n),
        "glauber_se": math.sqrt(max(gl_acc * (1 - gl_acc), 1e-12) / n),
        "ar_invocations": int(ar_inv),
        "glauber_invocations": int(gl_inv),
        "ledger_balanced": bool(ar_inv == gl_inv),
    }
