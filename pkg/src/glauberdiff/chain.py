"""Single-site Glauber chains over fixed-length token sequences.

The forward process updates one coordinate per integer step t = 1..T
following pre-drawn per-round permutations (systematic scan). Heat-bath
steps resample the scheduled coordinate from a conditional supplied by a
kernel; Metropolis steps propose a uniform replacement and accept with
min(1, exp(-delta_energy)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_ATOL = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """Finite symbol set. ``mask_id`` is a model-input marker only and
    never appears in a committed sequence."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


def validate_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Check a token sequence is 1-D with every entry in [0, vocab_size)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError(f"token sequence must be 1-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError("token out of range for vocabulary")
    return tokens.astype(np.int64)


@dataclass(frozen=True)
class UpdateSchedule:
    """N rounds of coordinate permutations over 0..L-1, drawn once upfront.

    Step t in 1..T (T = N*L) updates coordinate ``perms[(t-1)//L][(t-1)%L]``.
    """

    L: int
    N: int
    perms: np.ndarray  # (N, L) int64, each row a permutation of 0..L-1
    seed: int

    @property
    def T(self) -> int:
        return self.N * self.L

    def coordinate_at(self, t: int) -> int:
        """Coordinate updated by step t (1-based step index)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")
        r, j = divmod(t - 1, self.L)
        return int(self.perms[r, j])

    def coordinates(self) -> np.ndarray:
        """All T scheduled coordinates, in forward step order."""
        return self.perms.reshape(-1).copy()


def build_schedule(L: int, N: int, seed: int) -> UpdateSchedule:
    """Draw N independent uniform permutations of 0..L-1 from a seeded stream."""
    if L < 1 or N < 1:
        raise ValueError(f"need L >= 1 and N >= 1, got L={L}, N={N}")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(L) for _ in range(N)]).astype(np.int64)
    return UpdateSchedule(L=L, N=N, perms=perms, seed=seed)


@dataclass
class Trajectory:
    """Realized forward chain with every step's conditional kept for the loss.

    ``conds[t-1]`` is the full heat-bath conditional used at step t,
    ``prev_vals[t-1]``/``new_vals[t-1]`` the coordinate's value before/after,
    ``snapshots[s]`` the state after step s (0 = initial state).
    """

    x0: np.ndarray
    t_end: int
    coords: np.ndarray          # (t_end,)
    conds: np.ndarray           # (t_end, sigma)
    prev_vals: np.ndarray       # (t_end,)
    new_vals: np.ndarray        # (t_end,)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    def state_at(self, t: int) -> np.ndarray:
        if t not in self.snapshots:
            raise KeyError(f"no snapshot stored at step {t}")
        return self.snapshots[t]


def _check_distribution(cond: np.ndarray) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim != 1:
        raise ValueError("conditional must be a vector")
    if np.any(cond < 0):
        raise ValueError("conditional has negative entries")
    total = cond.sum()
    if not math.isclose(total, 1.0, abs_tol=PROB_ATOL):
        raise ValueError(f"conditional sums to {total}, not 1 within {PROB_ATOL}")
    return cond


def heat_bath_step(
    x: np.ndarray, k: int, cond: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Resample coordinate k from ``cond``; returns (new state, prob of the draw)."""
    cond = _check_distribution(cond)
    new_val = int(rng.choice(cond.size, p=cond / cond.sum()))
    out = x.copy()
    out[k] = new_val
    return out, float(cond[new_val])


def metropolis_step(
    x: np.ndarray, k: int, delta, rng: np.random.Generator, n_symbols: int | None = None
) -> tuple[np.ndarray, float]:
    """Propose a uniform replacement for x[k] and accept with min(1, e^-delta).

    ``delta(x, k, sigma)`` must return the energy change of setting
    x[k] = sigma as a finite float. Rejection realizes the lazy self-loop.
    """
    S = n_symbols if n_symbols is not None else int(x.max()) + 1
    if S < 2:
        raise ValueError("need at least 2 symbols to propose a move")
    cur = int(x[k])
    idx = int(rng.integers(S - 1))
    proposal = idx + (idx >= cur)
    d = float(delta(x, k, proposal))
    if not math.isfinite(d):
        raise ValueError(f"non-finite energy difference {d} at k={k}, sigma={proposal}")
    accept_prob = 1.0 if d <= 0 else math.exp(-d)
    if rng.random() < accept_prob:
        out = x.copy()
        out[k] = proposal
        return out, accept_prob
    return x.copy(), accept_prob


def run_forward(
    x0: np.ndarray,
    t_end: int,
    kernel,
    schedule: UpdateSchedule,
    rng: np.random.Generator,
    snapshot_times=(),
) -> Trajectory:
    """Run heat-bath steps 1..t_end with the kernel's infill conditionals.

    The kernel follows the conditional-model contract: ``infill(x, k, t)``
    returns a normalized vector over the vocabulary without reading x[k].
    Every step's full conditional is logged; states are stored at the
    requested snapshot times (0 stores x0).
    """
    if not 0 <= t_end <= schedule.T:
        raise ValueError(f"t_end {t_end} outside 0..{schedule.T}")
    snapshot_times = set(snapshot_times)
    bad = [s for s in snapshot_times if not 0 <= s <= t_end]
    if bad:
        raise ValueError(f"snapshot times {bad} outside 0..{t_end}")

    x = np.asarray(x0, dtype=np.int64).copy()
    coords = np.empty(t_end, dtype=np.int64)
    prev_vals = np.empty(t_end, dtype=np.int64)
    new_vals = np.empty(t_end, dtype=np.int64)
    conds = None
    snaps: dict[int, np.ndarray] = {}
    if 0 in snapshot_times:
        snaps[0] = x.copy()

    for t in range(1, t_end + 1):
        k = schedule.coordinate_at(t)
        try:
            cond = kernel.infill(x, k, t)
        except Exception as exc:
            raise RuntimeError(f"kernel failed at step {t}, coordinate {k}") from exc
        cond = _check_distribution(cond)
        if conds is None:
            conds = np.empty((t_end, cond.size), dtype=np.float64)
        coords[t - 1] = k
        prev_vals[t - 1] = x[k]
        conds[t - 1] = cond
        x, _ = heat_bath_step(x, k, cond, rng)
        new_vals[t - 1] = x[k]
        if t in snapshot_times:
            snaps[t] = x.copy()

    if conds is None:
        conds = np.empty((0, 0), dtype=np.float64)
    return Trajectory(
        x0=np.asarray(x0, dtype=np.int64).copy(),
        t_end=t_end,
        coords=coords,
        conds=conds,
        prev_vals=prev_vals,
        new_vals=new_vals,
        snapshots=snaps,
    )
