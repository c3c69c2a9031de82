"""Reverse-time generation: causal fill at the final time, then N rounds of
per-index mask infilling in exactly reversed schedule order.

Frozen indices (clues, prefixes) keep their template values and are never
revisited. A masking window w > 1 additionally hides the next w-1 upcoming
positions of the current round from the model input while still resampling
one position per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .chain import UpdateSchedule
from .energies import TabularDistribution
from .net import DualModeTransformer
from .oracle import StateEnumeration, batch_fiber_probs, exact_marginals


@dataclass
class GenerationSpec:
    schedule: UpdateSchedule
    frozen_indices: frozenset[int] = frozenset()
    window: int = 1
    top_p: float | None = None
    template: np.ndarray | None = None  # values for frozen positions

    def __post_init__(self):
        self.frozen_indices = frozenset(int(i) for i in self.frozen_indices)
        L = self.schedule.L
        if any(not 0 <= i < L for i in self.frozen_indices):
            raise ValueError("frozen index outside 0..L-1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.frozen_indices and self.template is None:
            raise ValueError("frozen indices need a template providing their values")
        if self.template is not None and len(self.template) != L:
            raise ValueError("template length must equal schedule length")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass
class GenerationReport:
    tokens: np.ndarray
    causal_invocations: int
    infill_invocations: int
    seed: int | None = None
    step_entropy: list[float] = field(default_factory=list)
    step_changed: list[bool] = field(default_factory=list)

    @property
    def invocations(self) -> dict:
        return {"causal": self.causal_invocations, "infill": self.infill_invocations}


def _nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest set of symbols covering top_p mass; renormalize."""
    order = np.argsort(probs, axis=-1)[..., ::-1]
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    cut = cum - sorted_p >= top_p  # symbols entirely past the nucleus
    sorted_p = np.where(cut, 0.0, sorted_p)
    out = np.zeros_like(probs)
    np.put_along_axis(out, order, sorted_p, axis=-1)
    return out / out.sum(axis=-1, keepdims=True)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = probs.cumsum(axis=1)
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    q = np.clip(probs, 1e-300, None)
    return -(probs * np.log(q)).sum(axis=1)


def generate_many(
    model: DualModeTransformer,
    schedule: UpdateSchedule,
    rng: np.random.Generator,
    count: int = 1,
    frozen_masks: np.ndarray | None = None,  # (count, L) bool
    templates: np.ndarray | None = None,     # (count, L) values where frozen
    window: int = 1,
    top_p: float | None = None,
    collect_diagnostics: bool = False,
    causal_only: bool = False,
) -> list[GenerationReport]:
    """Vectorized generation across ``count`` sequences sharing one schedule.

    Rows may differ in frozen positions; invocation counts are tracked per
    row (a row whose scheduled position is frozen skips that model call).
    ``causal_only`` stops after the left-to-right fill (baseline sampling).
    """
    if not model.augmented:
        raise ValueError("generation requires a time-augmented model")
    L, N, T = schedule.L, schedule.N, schedule.T
    if model.cfg.t_max < T:
        raise ValueError(f"model t_max {model.cfg.t_max} below schedule horizon {T}")
    B = count
    frozen = (np.zeros((B, L), dtype=bool) if frozen_masks is None
              else np.asarray(frozen_masks, dtype=bool).copy())
    X = np.zeros((B, L), dtype=np.int64)
    if templates is not None:
        templates = np.asarray(templates, dtype=np.int64)
        X[frozen] = templates[frozen]
    causal_count = np.zeros(B, dtype=np.int64)
    infill_count = np.zeros(B, dtype=np.int64)
    entropies: list[list[float]] = [[] for _ in range(B)]
    changed: list[list[bool]] = [[] for _ in range(B)]

    # left-to-right causal fill of the non-frozen positions at time T
    for i in range(L):
        rows = np.nonzero(~frozen[:, i])[0]
        if rows.size:
            with torch.no_grad():
                probs = model.causal_dist(X[rows, :i], np.full(rows.size, T)).double().numpy()
            if top_p is not None:
                probs = _nucleus(probs, top_p)
            X[rows, i] = _sample_rows(probs, rng)
            causal_count[rows] += 1
            if collect_diagnostics:
                ent = _entropy_rows(probs)
                for j, r in enumerate(rows):
                    entropies[r].append(float(ent[j]))
                    changed[r].append(True)

    # reverse rounds: same indices as the forward schedule, reversed order
    mask_id = model.cfg.mask_id
    edit_rounds = [] if causal_only else list(range(N - 1, -1, -1))
    for r in edit_rounds:
        for p in range(L - 1, -1, -1):
            j = int(schedule.perms[r, p])
            t = r * L + p + 1
            rows = np.nonzero(~frozen[:, j])[0]
            if rows.size == 0:
                continue
            inp = X[rows].copy()
            if window == 1:
                inp[:, j] = mask_id
            else:
                # upcoming non-frozen positions of this round, current first
                upcoming = [int(schedule.perms[r, q]) for q in range(p, -1, -1)]
                for b, row in enumerate(rows):
                    placed = 0
                    for pos in upcoming:
                        if frozen[row, pos]:
                            continue
                        inp[b, pos] = mask_id
                        placed += 1
                        if placed == window:
                            break
            with torch.no_grad():
                probs = model.infill_dist_masked(
                    torch.as_tensor(inp), torch.full((rows.size,), j),
                    torch.full((rows.size,), t)).double().numpy()
            if top_p is not None:
                probs = _nucleus(probs, top_p)
            drawn = _sample_rows(probs, rng)
            if collect_diagnostics:
                ent = _entropy_rows(probs)
                for b, row in enumerate(rows):
                    entropies[row].append(float(ent[b]))
                    changed[row].append(bool(drawn[b] != X[row, j]))
            X[rows, j] = drawn
            infill_count[rows] += 1

    return [
        GenerationReport(
            tokens=X[b].copy(),
            causal_invocations=int(causal_count[b]),
            infill_invocations=int(infill_count[b]),
            step_entropy=entropies[b],
            step_changed=changed[b],
        )
        for b in range(B)
    ]


def generate(model: DualModeTransformer, spec: GenerationSpec,
             rng: np.random.Generator) -> GenerationReport:
    """Single generation under a spec; see ``generate_many``."""
    L = spec.schedule.L
    frozen = np.zeros((1, L), dtype=bool)
    for i in spec.frozen_indices:
        frozen[0, i] = True
    templates = None if spec.template is None else np.asarray(spec.template)[None, :]
    return generate_many(
        model, spec.schedule, rng, count=1, frozen_masks=frozen, templates=templates,
        window=spec.window, top_p=spec.top_p, collect_diagnostics=True,
    )[0]


def generate_with_prefix(model: DualModeTransformer, prefix: np.ndarray,
                         spec: GenerationSpec, rng: np.random.Generator) -> GenerationReport:
    """Freeze a verbatim prefix and generate the remainder."""
    prefix = np.asarray(prefix, dtype=np.int64)
    L = spec.schedule.L
    if len(prefix) > L:
        raise ValueError(f"prefix length {len(prefix)} exceeds L={L}")
    template = np.zeros(L, dtype=np.int64)
    template[: len(prefix)] = prefix
    if spec.template is not None:
        template = np.where(np.arange(L) < len(prefix), template, spec.template)
    merged = GenerationSpec(
        schedule=spec.schedule,
        frozen_indices=spec.frozen_indices | frozenset(range(len(prefix))),
        window=spec.window,
        top_p=spec.top_p,
        template=template,
    )
    report = generate(model, merged, rng)
    assert np.array_equal(report.tokens[: len(prefix)], prefix)
    return report


def refine_windowed(model: DualModeTransformer, x: np.ndarray, spec: GenerationSpec,
                    rng: np.random.Generator) -> GenerationReport:
    """Generation with a masking window, taking frozen values from ``x``.

    With window 1 this reduces to ``generate`` exactly (same draws for the
    same stream).
    """
    merged = GenerationSpec(
        schedule=spec.schedule,
        frozen_indices=spec.frozen_indices,
        window=spec.window,
        top_p=spec.top_p,
        template=np.asarray(x, dtype=np.int64),
    )
    return generate(model, merged, rng)


def exact_reverse_generate(
    p0: TabularDistribution,
    schedule: UpdateSchedule,
    kernel,
    rng: np.random.Generator,
    count: int = 1,
    marginals: list[np.ndarray] | None = None,
    frozen_indices: frozenset[int] | set[int] = frozenset(),
    template: np.ndarray | None = None,
) -> np.ndarray:
    """Gold-standard sampler: run the reverse chain with oracle-exact reverse
    conditionals instead of a learned model. Returns (count, L) samples whose
    law converges to p0.

    Frozen indices keep template values throughout; the initial state is then
    drawn from the final marginal conditioned on them (approximate conditional
    sampling, exact when nothing is frozen).
    """
    enum = StateEnumeration(L=schedule.L, sigma=p0.sigma)
    if marginals is None:
        marginals = exact_marginals(p0.probs, kernel, schedule, schedule.T)
    p_T = marginals[schedule.T].copy()
    frozen_indices = set(int(i) for i in frozen_indices)
    if frozen_indices:
        if template is None:
            raise ValueError("frozen indices need a template")
        tokens = enum.all_tokens()
        keep = np.ones(enum.total, dtype=bool)
        for i in frozen_indices:
            keep &= tokens[:, i] == template[i]
        p_T = np.where(keep, p_T, 0.0)
        if p_T.sum() <= 0:
            raise ValueError("frozen values have zero mass under the final marginal")
    idx = rng.choice(enum.total, size=count, p=p_T / p_T.sum())
    X = (idx[:, None] // enum.powers[None, :]) % enum.sigma
    for t in range(schedule.T, 0, -1):
        k = schedule.coordinate_at(t)
        if k in frozen_indices:
            continue
        cond = batch_fiber_probs(marginals[t - 1], X, k, enum)
        X[:, k] = _sample_rows(cond, rng)
    return X
