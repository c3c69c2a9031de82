"""Exact brute-force references on enumerable state spaces.

Per-step transition kernels of the single-coordinate chain only connect
states agreeing off the scheduled coordinate, so they are stored as dense
sigma x sigma blocks over the sigma^(L-1) fibers rather than as full
sigma^L x sigma^L matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import UpdateSchedule
from .energies import ENUMERABLE_LIMIT, TabularDistribution, energy_delta

ROW_STOCHASTIC_ATOL = 1e-12


@dataclass(frozen=True)
class StateEnumeration:
    """Mixed-radix index maps for the full sigma^L state space."""

    L: int
    sigma: int

    def __post_init__(self):
        if self.sigma**self.L > ENUMERABLE_LIMIT:
            raise ValueError("state space too large to enumerate")

    @property
    def total(self) -> int:
        return self.sigma**self.L

    @property
    def powers(self) -> np.ndarray:
        return self.sigma ** np.arange(self.L, dtype=np.int64)

    def index(self, tokens: np.ndarray) -> int:
        return int(np.asarray(tokens, dtype=np.int64) @ self.powers)

    def decode(self, index: int) -> np.ndarray:
        return (index // self.powers) % self.sigma

    def all_tokens(self) -> np.ndarray:
        idx = np.arange(self.total, dtype=np.int64)
        return (idx[:, None] // self.powers[None, :]) % self.sigma


def fiber_members(enum: StateEnumeration, k: int) -> np.ndarray:
    """Full-state indices of every fiber at coordinate k, shape (sigma^(L-1), sigma).

    Row f lists the states that share all coordinates except k; column tau is
    the state with x[k] = tau.
    """
    S, L = enum.sigma, enum.L
    stride = S**k
    rest = np.arange(S ** (L - 1), dtype=np.int64)
    high, low = np.divmod(rest, stride)
    base = low + high * (stride * S)
    return base[:, None] + stride * np.arange(S, dtype=np.int64)[None, :]


def batch_fiber_probs(p: np.ndarray, X: np.ndarray, k: int, enum: StateEnumeration) -> np.ndarray:
    """Conditional of p at coordinate k for each row of X, shape (B, sigma)."""
    stride = enum.sigma**k
    full = X.astype(np.int64) @ enum.powers
    base = full - X[:, k].astype(np.int64) * stride
    idx = base[:, None] + stride * np.arange(enum.sigma, dtype=np.int64)[None, :]
    fibers = p[idx]
    totals = fibers.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("conditioning on a zero-probability fiber")
    return fibers / totals


@dataclass
class StepKernelMatrix:
    """One scheduled step as row-stochastic sigma x sigma blocks per fiber."""

    k: int
    enum: StateEnumeration
    blocks: np.ndarray  # (n_fibers, sigma, sigma); blocks[f, a, b] = P(member a -> member b)

    def __post_init__(self):
        rows = self.blocks.sum(axis=2)
        if np.max(np.abs(rows - 1.0)) > ROW_STOCHASTIC_ATOL:
            raise ValueError("kernel rows are not stochastic within 1e-12")

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Push a distribution one step forward: returns p @ P."""
        members = fiber_members(self.enum, self.k)
        fibers = p[members]
        out_fibers = np.einsum("fa,fab->fb", fibers, self.blocks)
        out = np.empty_like(p)
        out[members] = out_fibers
        return out

    def dense(self) -> np.ndarray:
        """Materialize the full matrix (tests and residuals only)."""
        n = self.enum.total
        P = np.zeros((n, n))
        members = fiber_members(self.enum, self.k)
        for f in range(members.shape[0]):
            P[np.ix_(members[f], members[f])] = self.blocks[f]
        return P


def heat_bath_step_kernel(kernel, k: int, enum: StateEnumeration, t: int = 0) -> StepKernelMatrix:
    """Exact heat-bath kernel at coordinate k from a conditional model."""
    members = fiber_members(enum, k)
    reps = (members[:, 0:1] // enum.powers[None, :]) % enum.sigma
    if hasattr(kernel, "infill_batch"):
        conds = np.asarray(kernel.infill_batch(reps, k, t), dtype=np.float64)
    else:
        conds = np.stack([kernel.infill(reps[f], k, t) for f in range(reps.shape[0])])
    blocks = np.repeat(conds[:, None, :], enum.sigma, axis=1)
    return StepKernelMatrix(k=k, enum=enum, blocks=blocks)


def metropolis_step_kernel(
    energy, k: int, enum: StateEnumeration, beta: float = 1.0, acceptance=None
) -> StepKernelMatrix:
    """Uniform-proposal Metropolis kernel at coordinate k; rejection stays put."""
    S = enum.sigma
    if acceptance is None:
        acceptance = lambda d: min(1.0, math.exp(-d))
    members = fiber_members(enum, k)
    F = members.shape[0]
    blocks = np.zeros((F, S, S))
    for f in range(F):
        for a in range(S):
            x = (members[f, a] // enum.powers) % S
            for b in range(S):
                if b == a:
                    continue
                d = beta * energy_delta(energy, x, k, b)
                blocks[f, a, b] = acceptance(d) / (S - 1)
            blocks[f, a, a] = 1.0 - blocks[f, a].sum()
    return StepKernelMatrix(k=k, enum=enum, blocks=blocks)


def exact_marginals(p0, kernel, schedule: UpdateSchedule, t_end: int) -> list[np.ndarray]:
    """Marginals p_0..p_t_end by exact per-step multiplication."""
    p = p0.probs.copy() if isinstance(p0, TabularDistribution) else np.asarray(p0, dtype=np.float64)
    enum = StateEnumeration(L=schedule.L, sigma=round(len(p) ** (1 / schedule.L)))
    if enum.total != len(p):
        raise ValueError("distribution length is not sigma^L for any integer sigma")
    out = [p.copy()]
    for t in range(1, t_end + 1):
        P = heat_bath_step_kernel(kernel, schedule.coordinate_at(t), enum, t)
        p = P.apply(p)
        if abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"marginal at step {t} sums to {p.sum()}")
        out.append(p.copy())
    return out


def exact_reverse_kernel(p_prev: np.ndarray, fwd: StepKernelMatrix) -> StepKernelMatrix:
    """Bayes inversion of one forward step.

    Row x_t of the result is the distribution of the pre-step state given
    x_t; rows at unreachable states are filled uniform (they carry no mass
    when composing backward from a reachable marginal).
    """
    members = fiber_members(fwd.enum, fwd.k)
    prev_f = p_prev[members]
    pt_f = np.einsum("fa,fab->fb", prev_f, fwd.blocks)
    joint = prev_f[:, :, None] * fwd.blocks  # (f, prev val a, next val b)
    rev = np.transpose(joint, (0, 2, 1)).copy()
    S = fwd.enum.sigma
    reachable = pt_f > 0
    rev[reachable] /= pt_f[reachable][:, None]
    rev[~reachable] = 1.0 / S
    return StepKernelMatrix(k=fwd.k, enum=fwd.enum, blocks=rev)


def reverse_composition(p0, kernel, schedule: UpdateSchedule, t_end: int) -> np.ndarray:
    """Push p_t_end back through every exact reverse kernel; returns the reconstruction of p0."""
    marginals = exact_marginals(p0, kernel, schedule, t_end)
    enum = StateEnumeration(L=schedule.L, sigma=round(len(marginals[0]) ** (1 / schedule.L)))
    p = marginals[t_end].copy()
    for t in range(t_end, 0, -1):
        fwd = heat_bath_step_kernel(kernel, schedule.coordinate_at(t), enum, t)
        p = exact_reverse_kernel(marginals[t - 1], fwd).apply(p)
    return p


def detailed_balance_residual(
    energy, L: int, sigma: int, beta: float = 1.0, acceptance=None, kernel: str = "metropolis"
) -> float:
    """max |pi(x)P(x,y) - pi(y)P(y,x)| for the random-scan single-coordinate chain,
    with pi proportional to exp(-beta * energy)."""
    enum = StateEnumeration(L=L, sigma=sigma)
    tokens = enum.all_tokens()
    f = np.array([energy.energy(tokens[i]) for i in range(enum.total)])
    w = np.exp(-beta * (f - f.min()))
    pi = w / w.sum()

    P = np.zeros((enum.total, enum.total))
    for k in range(L):
        if kernel == "metropolis":
            step = metropolis_step_kernel(energy, k, enum, beta=beta, acceptance=acceptance)
        elif kernel == "heat_bath":
            gibbs = TabularDistribution(pi, L=L, sigma=sigma)
            step = heat_bath_step_kernel(gibbs, k, enum)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
        P += step.dense() / L
    flux = pi[:, None] * P
    return float(np.max(np.abs(flux - flux.T)))


def stationarity_residual(p: TabularDistribution, schedule: UpdateSchedule) -> float:
    """max_t ||p P_t - p||_1 over the heat-bath kernels built from p's own conditionals."""
    enum = StateEnumeration(L=p.L, sigma=p.sigma)
    worst = 0.0
    for t in range(1, schedule.T + 1):
        P = heat_bath_step_kernel(p, schedule.coordinate_at(t), enum, t)
        worst = max(worst, float(np.abs(P.apply(p.probs) - p.probs).sum()))
    return worst


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def optimal_reverse_infill(p_prev, x: np.ndarray, k: int) -> np.ndarray:
    """Exact reverse conditional: the previous marginal conditioned on all but x[k]."""
    if isinstance(p_prev, TabularDistribution):
        vec, sigma, L = p_prev.probs, p_prev.sigma, p_prev.L
    else:
        vec = np.asarray(p_prev, dtype=np.float64)
        L = len(x)
        sigma = round(len(vec) ** (1 / L))
    enum = StateEnumeration(L=L, sigma=sigma)
    return batch_fiber_probs(vec, np.asarray(x, dtype=np.int64)[None, :], k, enum)[0]


def target_gap_report(p0, kernel, schedule: UpdateSchedule, t_end: int | None = None) -> list[dict]:
    """Per-step KL(exact reverse conditional || model implied by the path-ratio targets).

    The path-ratio targets make the trained infill proportional to the
    squared forward conditional on each fiber; this measures how far that
    sits from the exact reverse conditional, weighted by the reachable
    fiber masses.
    """
    t_end = schedule.T if t_end is None else t_end
    marginals = exact_marginals(p0, kernel, schedule, t_end)
    enum = StateEnumeration(L=schedule.L, sigma=round(len(marginals[0]) ** (1 / schedule.L)))
    rows = []
    for t in range(1, t_end + 1):
        k = schedule.coordinate_at(t)
        members = fiber_members(enum, k)
        reps = (members[:, 0:1] // enum.powers[None, :]) % enum.sigma
        if hasattr(kernel, "infill_batch"):
            q = np.asarray(kernel.infill_batch(reps, k, t), dtype=np.float64)
        else:
            q = np.stack([kernel.infill(reps[f], k, t) for f in range(reps.shape[0])])
        implied = q**2
        implied /= implied.sum(axis=1, keepdims=True)

        prev_f = marginals[t - 1][members]
        fiber_mass = q * prev_f.sum(axis=1, keepdims=True)  # p_t over each fiber
        gap = 0.0
        for f in range(members.shape[0]):
            mass = fiber_mass[f].sum()
            if mass <= 0 or prev_f[f].sum() <= 0:
                continue
            optimal = prev_f[f] / prev_f[f].sum()
            gap += mass * kl_divergence(optimal, implied[f])
        rows.append({"step": t, "coordinate": k, "gap_kl": float(gap)})
    return rows
