"""Hidden-Markov corpus with exact sequence likelihoods.

The forward recursion is run with per-step normalization and accumulated log
scales, so likelihoods stay exact in float64 at any desk-scale length.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class HmmCorpus:
    pi: np.ndarray     # (H,)
    trans: np.ndarray  # (H, H) rows: from -> to
    emit: np.ndarray   # (H, sigma)
    L: int

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.emit = np.asarray(self.emit, dtype=np.float64)
        for name, rows in (("pi", self.pi[None, :]), ("trans", self.trans), ("emit", self.emit)):
            if np.any(rows < 0) or np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"{name} rows must be stochastic")

    @property
    def n_states(self) -> int:
        return len(self.pi)

    @property
    def sigma(self) -> int:
        return self.emit.shape[1]

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, L) observation sequences."""
        H = self.n_states
        out = np.empty((count, self.L), dtype=np.int64)
        state = rng.choice(H, size=count, p=self.pi)
        for i in range(self.L):
            cum = self.emit[state].cumsum(axis=1)
            out[:, i] = np.minimum((cum < rng.random(count)[:, None]).sum(axis=1), self.sigma - 1)
            if i + 1 < self.L:
                tcum = self.trans[state].cumsum(axis=1)
                state = np.minimum((tcum < rng.random(count)[:, None]).sum(axis=1), H - 1)
        return out

    def log_likelihood(self, x: np.ndarray) -> float:
        """Exact log p(x) via the scaled forward recursion."""
        x = np.asarray(x)
        alpha = self.pi * self.emit[:, x[0]]
        log_scale = 0.0
        for i in range(1, len(x)):
            total = alpha.sum()
            if total <= 0:
                return -math.inf
            log_scale += math.log(total)
            alpha = (alpha / total) @ self.trans * self.emit[:, x[i]]
        total = alpha.sum()
        if total <= 0:
            return -math.inf
        return log_scale + math.log(total)

    def log_likelihood_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        B = X.shape[0]
        alpha = self.pi[None, :] * self.emit[:, X[:, 0]].T
        log_scale = np.zeros(B)
        for i in range(1, X.shape[1]):
            total = alpha.sum(axis=1)
            log_scale += np.log(total)
            alpha = (alpha / total[:, None]) @ self.trans * self.emit[:, X[:, i]].T
        return log_scale + np.log(alpha.sum(axis=1))

    def naive_log_likelihood(self, x: np.ndarray) -> float:
        """Enumeration over all hidden paths (tests only)."""
        x = np.asarray(x)
        H = self.n_states
        total = 0.0
        for path in itertools.product(range(H), repeat=len(x)):
            p = self.pi[path[0]] * self.emit[path[0], x[0]]
            for i in range(1, len(x)):
                p *= self.trans[path[i - 1], path[i]] * self.emit[path[i], x[i]]
            total += p
        return math.log(total)

    def sequence_distribution(self) -> np.ndarray:
        """Exact probability of every sequence, mixed-radix indexed (tests only)."""
        n = self.sigma**self.L
        out = np.empty(n)
        for idx in range(n):
            digits = (idx // self.sigma ** np.arange(self.L)) % self.sigma
            out[idx] = math.exp(self.log_likelihood(digits))
        return out


def random_hmm(n_states: int, sigma: int, L: int, seed: int, concentration: float = 0.4) -> HmmCorpus:
    """Seeded random HMM; small concentration gives peaked, structured rows."""
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.full(n_states, 1.0))
    trans = np.stack([rng.dirichlet(np.full(n_states, concentration)) for _ in range(n_states)])
    emit = np.stack([rng.dirichlet(np.full(sigma, concentration)) for _ in range(n_states)])
    return HmmCorpus(pi=pi, trans=trans, emit=emit, L=L)
