"""Score-entropy training loss for the scheduled-coordinate chain.

Each step t contributes a Bregman-type sum over the sigma-1 single-symbol
substitutions at the scheduled coordinate: with model infill probability
m(s), frozen forward conditional q(s), and target ratio r(s),

    sum_{s != current} m(s) - q(s) r(s) log(m(s) / q(s)) + q(s) Koff(r(s))

where Koff(a) = a (log a - 1). The target ratios come from the stored
forward conditionals: both compared paths share the realized prefix, so
the ratio reduces to the last step's conditional ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .chain import Trajectory


class TargetMode(Enum):
    PATH_RATIO = "path_ratio"          # ratios of the logged forward conditional
    PREV_VALUE_CE = "prev_value_ce"    # cross-entropy to the pre-step value
    EXACT_POSTERIOR = "exact_posterior"  # cross-entropy to the oracle reverse conditional


def bregman_offset(a):
    """a * (log a - 1), continuously extended to 0 at a = 0."""
    if torch.is_tensor(a):
        out = a * (torch.log(a.clamp_min(1e-300)) - 1.0)
        return torch.where(a == 0, torch.zeros_like(out), out)
    if a < 0:
        raise ValueError(f"bregman_offset needs a >= 0, got {a}")
    return 0.0 if a == 0 else a * (math.log(a) - 1.0)


def bregman_term(s, r):
    """s - r log s + bregman_offset(r); nonnegative, zero iff s == r."""
    if torch.is_tensor(s) or torch.is_tensor(r):
        s = torch.as_tensor(s)
        r = torch.as_tensor(r)
        return s - r * torch.log(s) + bregman_offset(r)
    if s <= 0:
        raise ValueError(f"bregman_term needs s > 0, got {s}")
    if r < 0:
        raise ValueError(f"bregman_term needs r >= 0, got {r}")
    return s - (r * math.log(s) if r > 0 else 0.0) + bregman_offset(r)


def path_ratio_targets(traj: Trajectory, t: int) -> np.ndarray:
    """Target ratio vector r for step t from the trajectory's stored conditional.

    r(s) = q(s) / q(realized value); r at the realized value is 1 by
    construction. The shared-prefix path probabilities cancel.
    """
    if not 1 <= t <= traj.t_end:
        raise ValueError(f"step {t} was not executed (t_end={traj.t_end})")
    cond = traj.conds[t - 1]
    realized = int(traj.new_vals[t - 1])
    if cond[realized] <= 0:
        raise ValueError(f"logged conditional assigns zero mass to the realized value at step {t}")
    return cond / cond[realized]


@dataclass
class StepLossInput:
    """Everything one step contributes: snapshot tokens, scheduled coordinate,
    frozen conditional, model infill distribution, and target ratios."""

    x_t: np.ndarray
    t: int
    k: int
    q_frozen: np.ndarray
    model_probs: torch.Tensor
    ratios: np.ndarray


def step_loss(inp: StepLossInput) -> torch.Tensor:
    """Neighbor sum of the score-entropy loss at one logged step.

    Only the model distribution participates in differentiation; the frozen
    conditional and the target ratios enter as constants.
    """
    m = inp.model_probs
    q = torch.as_tensor(inp.q_frozen, dtype=m.dtype, device=m.device)
    r = torch.as_tensor(inp.ratios, dtype=m.dtype, device=m.device)
    cur = int(inp.x_t[inp.k])

    keep = torch.ones_like(q, dtype=torch.bool)
    keep[cur] = False
    weighted = keep & (q * r > 0)
    if torch.any(weighted & (m <= 0)):
        raise ValueError("model assigns zero probability to a weighted neighbor")

    total = m[keep].sum()
    if weighted.any():
        total = total - (q[weighted] * r[weighted] * (torch.log(m[weighted]) - torch.log(q[weighted]))).sum()
        total = total + (q[weighted] * bregman_offset(r[weighted])).sum()
    return total


def snapshot_times(t: int, n: int = 32) -> list[int]:
    """Reuse times i * floor(t/n) for i = 1..n; all steps 1..t when t < n."""
    if t < 1:
        raise ValueError("need t >= 1")
    if t < n:
        return list(range(1, t + 1))
    stride = t // n
    return [i * stride for i in range(1, n + 1)]


def prev_value_ce(model_probs: torch.Tensor, prev_value: int) -> torch.Tensor:
    """-log m(value before the step); minimized by the exact reverse conditional."""
    p = model_probs[prev_value]
    if p <= 0:
        raise ValueError("model assigns zero probability to the pre-step value")
    return -torch.log(p)


def posterior_ce(model_probs: torch.Tensor, target: np.ndarray) -> torch.Tensor:
    """Cross-entropy to an externally supplied exact reverse conditional."""
    tgt = torch.as_tensor(target, dtype=model_probs.dtype, device=model_probs.device)
    support = tgt > 0
    if torch.any(support & (model_probs <= 0)):
        raise ValueError("model assigns zero probability on the target support")
    return -(tgt[support] * torch.log(model_probs[support])).sum()


def snapshot_batch_loss(
    model,
    trajectories: list[Trajectory],
    times: list[list[int]],
    mode: TargetMode = TargetMode.PATH_RATIO,
    posterior_targets: list[list[np.ndarray]] | None = None,
) -> torch.Tensor:
    """Mean per-snapshot loss over all (trajectory, time) pairs.

    ``model`` maps (masked tokens, coordinate, time) batches to infill
    distributions via ``infill_dist``; gradients flow only through it. The
    per-item sums match ``step_loss``/``prev_value_ce``/``posterior_ce``
    exactly, computed as one tensor expression over the whole batch.
    """
    items = sum(len(ts) for ts in times)
    if items == 0:
        raise ValueError("empty snapshot batch")

    tokens, coords, steps, conds, ratios, prevs, currents, targets = [], [], [], [], [], [], [], []
    for ti, (traj, ts) in enumerate(zip(trajectories, times)):
        for t in ts:
            x = traj.state_at(t)
            k = int(traj.coords[t - 1])
            tokens.append(x)
            coords.append(k)
            steps.append(t)
            if mode is TargetMode.PATH_RATIO:
                conds.append(traj.conds[t - 1])
                ratios.append(path_ratio_targets(traj, t))
                currents.append(int(traj.new_vals[t - 1]))
            elif mode is TargetMode.PREV_VALUE_CE:
                prevs.append(int(traj.prev_vals[t - 1]))
            elif mode is TargetMode.EXACT_POSTERIOR:
                if posterior_targets is None:
                    raise ValueError("EXACT_POSTERIOR needs posterior_targets")
                targets.append(posterior_targets[ti][ts.index(t)])
            else:
                raise ValueError(f"unknown mode {mode}")
    probs = model.infill_dist(np.stack(tokens), np.array(coords), np.array(steps))
    rows = torch.arange(items)

    if mode is TargetMode.PREV_VALUE_CE:
        picked = probs[rows, torch.as_tensor(prevs)]
        if torch.any(picked <= 0):
            raise ValueError("model assigns zero probability to a pre-step value")
        return -torch.log(picked).mean()

    if mode is TargetMode.EXACT_POSTERIOR:
        tgt = torch.as_tensor(np.stack(targets), dtype=probs.dtype)
        support = tgt > 0
        if torch.any(support & (probs <= 0)):
            raise ValueError("model assigns zero probability on a target support")
        safe = torch.where(support, probs, torch.ones_like(probs))
        return -(tgt * torch.log(safe)).sum(dim=1).mean()

    q = torch.as_tensor(np.stack(conds), dtype=probs.dtype)
    r = torch.as_tensor(np.stack(ratios), dtype=probs.dtype)
    keep = torch.ones_like(q, dtype=torch.bool)
    keep[rows, torch.as_tensor(currents)] = False
    weighted = keep & (q * r > 0)
    if torch.any(weighted & (probs <= 0)):
        raise ValueError("model assigns zero probability to a weighted neighbor")
    safe_m = torch.where(weighted, probs, torch.ones_like(probs))
    safe_q = torch.where(weighted, q, torch.ones_like(q))
    total = (probs * keep).sum()
    total = total - (q * r * (torch.log(safe_m) - torch.log(safe_q)) * weighted).sum()
    total = total + (q * bregman_offset(r) * weighted).sum()
    return total / items
