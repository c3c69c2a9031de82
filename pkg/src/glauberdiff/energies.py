"""Conditional models and energy functions for the Glauber chain.

Everything here satisfies (parts of) one contract: ``infill(x, k, t)``
yields a normalized distribution over the vocabulary for coordinate k
without reading x[k]; ``causal_next(prefix, t)`` (optional) yields a
next-token distribution; ``energy(x)`` (optional) defines a Gibbs
measure proportional to exp(-energy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

ENUMERABLE_LIMIT = 10_000_000


@runtime_checkable
class ConditionalModel(Protocol):
    def infill(self, x: np.ndarray, k: int, t: int) -> np.ndarray: ...


def state_index(tokens: np.ndarray, sigma: int) -> int:
    """Mixed-radix encoding, least-significant digit first: sum x_i * sigma^i."""
    idx = 0
    for i in range(len(tokens) - 1, -1, -1):
        idx = idx * sigma + int(tokens[i])
    return idx


def state_decode(index: int, sigma: int, L: int) -> np.ndarray:
    out = np.empty(L, dtype=np.int64)
    for i in range(L):
        index, out[i] = divmod(index, sigma)
    return out


class TabularDistribution:
    """Explicit distribution over all sigma^L sequences.

    Probabilities are stored flat, indexed by the mixed-radix encoding
    above (coordinate 0 is the least significant digit).
    """

    def __init__(self, probs: np.ndarray, L: int, sigma: int):
        probs = np.asarray(probs, dtype=np.float64)
        if sigma**L > ENUMERABLE_LIMIT:
            raise ValueError(f"state space sigma^L = {sigma**L} exceeds enumerable limit")
        if probs.shape != (sigma**L,):
            raise ValueError(f"expected {sigma**L} entries, got {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("negative probability entry")
        if not math.isclose(probs.sum(), 1.0, abs_tol=1e-12):
            raise ValueError(f"probabilities sum to {probs.sum()}, not 1 within 1e-12")
        self.probs = probs
        self.L = L
        self.sigma = sigma

    @classmethod
    def uniform(cls, L: int, sigma: int) -> "TabularDistribution":
        n = sigma**L
        return cls(np.full(n, 1.0 / n), L, sigma)

    @classmethod
    def random(cls, L: int, sigma: int, rng: np.random.Generator) -> "TabularDistribution":
        p = rng.random(sigma**L)
        return cls(p / p.sum(), L, sigma)

    def prob(self, tokens: np.ndarray) -> float:
        return float(self.probs[state_index(tokens, self.sigma)])

    def infill(self, x: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        return tabular_conditional(self, x, k)

    def save(self, path: str | Path) -> None:
        """Write the flat float64 little-endian array plus a JSON sidecar."""
        path = Path(path)
        self.probs.astype("<f8").tofile(path)
        sidecar = {
            "L": self.L,
            "sigma": self.sigma,
            "encoding": "mixed-radix, index = sum x_i * sigma^(i-1)",
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))

    @classmethod
    def load(cls, path: str | Path) -> "TabularDistribution":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        probs = np.fromfile(path, dtype="<f8")
        return cls(probs, L=int(meta["L"]), sigma=int(meta["sigma"]))


def tabular_conditional(p: TabularDistribution, x: np.ndarray, k: int) -> np.ndarray:
    """p(x_k = . | all other coordinates), by normalizing the fiber slice."""
    stride = p.sigma**k
    base = state_index(x, p.sigma) - int(x[k]) * stride
    fiber = p.probs[base + stride * np.arange(p.sigma)]
    total = fiber.sum()
    if total <= 0:
        raise ValueError("conditioning on a zero-probability event")
    return fiber / total


@dataclass
class PottsEnergy:
    """Nearest-neighbor chain energy: -J * sum 1[x_i == x_{i+1}] - sum h[i, x_i]."""

    J: float
    h: np.ndarray  # (L, sigma)
    L: int
    sigma: int

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.shape != (self.L, self.sigma):
            raise ValueError(f"field must have shape ({self.L}, {self.sigma})")
        if not (math.isfinite(self.J) and np.all(np.isfinite(self.h))):
            raise ValueError("non-finite Potts parameters")

    def energy(self, x: np.ndarray) -> float:
        bonds = int(np.sum(x[:-1] == x[1:]))
        return -self.J * bonds - float(self.h[np.arange(self.L), x].sum())

    def delta(self, x: np.ndarray, k: int, sigma: int) -> float:
        """Energy change of x[k] <- sigma from the two bonds and one field term."""
        cur = int(x[k])
        if sigma == cur:
            return 0.0
        d = self.h[k, cur] - self.h[k, sigma]
        if k > 0:
            d += self.J * (float(x[k - 1] == cur) - float(x[k - 1] == sigma))
        if k < self.L - 1:
            d += self.J * (float(x[k + 1] == cur) - float(x[k + 1] == sigma))
        return float(d)

    def infill(self, x: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        return potts_conditional(self, x, k)


def potts_conditional(e: PottsEnergy, x: np.ndarray, k: int) -> np.ndarray:
    """Heat-bath conditional: softmax over sigma of -energy(x with x[k]=sigma)."""
    neg = np.array([-e.delta(x, k, s) for s in range(e.sigma)])
    neg -= neg.max()
    w = np.exp(neg)
    return w / w.sum()


class CausalEnergy:
    """Energy from a causal model's mean next-token log-likelihood.

    energy(x) = -(beta / L) * sum_{i<L-1} log p_base(x_{i+1} | x_{0:i+1}).
    With beta = L the Gibbs weight equals the model's sequence probability
    up to a free first-token factor.
    """

    def __init__(self, base, L: int, beta: float | None = None):
        if beta is not None and beta <= 0:
            raise ValueError("beta must be positive")
        self.base = base
        self.L = L
        self.beta = float(beta if beta is not None else L)

    def energy(self, x: np.ndarray) -> float:
        return -self.beta * causal_ppl(self.base, x)

    def delta(self, x: np.ndarray, k: int, sigma: int) -> float:
        y = x.copy()
        y[k] = sigma
        return self.energy(y) - self.energy(x)


def causal_ppl(model, x: np.ndarray) -> float:
    """Mean next-token log-probability (1/L) * sum_{i=1}^{L-1} log p(x_i | x_{<i})."""
    x = np.asarray(x)
    L = len(x)
    total = 0.0
    for i in range(1, L):
        probs = np.asarray(model.causal_next(x[:i]))
        p = float(probs[x[i]])
        if p <= 0:
            raise ValueError(f"causal model assigns zero probability at position {i}")
        total += math.log(p)
    return total / L


def energy_delta(energy, x: np.ndarray, k: int, sigma: int) -> float:
    """f(x with x[k]=sigma) - f(x); uses the model's incremental path if it has one."""
    if hasattr(energy, "delta"):
        d = float(energy.delta(x, k, sigma))
    else:
        y = x.copy()
        y[k] = sigma
        d = float(energy.energy(y) - energy.energy(x))
    if not math.isfinite(d):
        raise ValueError("non-finite energy difference")
    return d


class UniformKernel:
    """Infill conditional that is uniform regardless of context."""

    def __init__(self, sigma: int):
        self.sigma = sigma

    def infill(self, x: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        return np.full(self.sigma, 1.0 / self.sigma)

    def causal_next(self, prefix: np.ndarray) -> np.ndarray:
        return np.full(self.sigma, 1.0 / self.sigma)
