"""End-to-end training: dual-mode base pretraining, frozen noising copy with
EMA refresh, vectorized forward noising with probability logging, score-entropy
loss, AdamW with warmup+cosine schedule, and GLDF checkpoints.

All randomness is drawn from numpy streams keyed by (seed, epoch, step, micro),
so runs are reproducible and resume is exact.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .chain import Trajectory, UpdateSchedule, build_schedule
from .checkpoint import load_model, save_model
from .loss import TargetMode, snapshot_batch_loss, snapshot_times
from .net import DualModeTransformer, ModeFlag, ModelConfig, NetKernel, init_base


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int
    rounds: int
    seq_len: int
    batch_size: int
    steps_per_epoch: int
    warmup_steps: int
    peak_lr: float = 1e-3
    floor_lr: float = 1e-6
    snapshots_per_sample: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    frozen_ema_decay: float = 0.999
    frozen_refresh_interval: int = 100
    param_ema_decay: float = 0.999
    grad_accum: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "rounds", "seq_len", "batch_size", "steps_per_epoch",
                     "snapshots_per_sample", "frozen_refresh_interval", "grad_accum"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("peak_lr", "floor_lr", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total optimizer steps")
        if not 0 < self.frozen_ema_decay < 1 or not 0 < self.param_ema_decay < 1:
            raise ValueError("EMA decays must lie in (0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine peak -> floor."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= config.warmup_steps:
        if config.warmup_steps == 0:
            return config.peak_lr
        return config.peak_lr * step / config.warmup_steps
    frac = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    frac = min(frac, 1.0)
    return config.floor_lr + (config.peak_lr - config.floor_lr) * 0.5 * (1 + math.cos(math.pi * frac))


class FrozenKernel:
    """Non-trainable copy of the model evaluated in infill mode at the final time.

    Serves as the forward noising kernel; refreshed only by ``ema_refresh``
    or a fresh ``make_frozen`` at epoch boundaries.
    """

    def __init__(self, model: DualModeTransformer, t_final: int):
        self.model = model
        self.t_final = t_final
        self._kernel = NetKernel(model, t_final)
        self.sigma = model.cfg.vocab_size

    def infill(self, x, k, t: int = 0):
        return self._kernel.infill(x, k)

    def infill_batch(self, X, k, t: int = 0):
        return self._kernel.infill_batch(X, k)

    def causal_next(self, prefix):
        return self._kernel.causal_next(prefix)


def make_frozen(model: DualModeTransformer, t_final: int | None = None) -> FrozenKernel:
    """Deep copy with gradients disabled; later live updates do not touch it."""
    if not model.augmented:
        raise ValueError("frozen noising kernel requires a time-augmented model")
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return FrozenKernel(frozen, model.cfg.t_max if t_final is None else t_final)


def ema_refresh(frozen: FrozenKernel, live: DualModeTransformer, decay: float) -> FrozenKernel:
    """frozen <- decay * frozen + (1 - decay) * live, elementwise by name."""
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    live_params = dict(live.named_parameters())
    with torch.no_grad():
        for name, p in frozen.model.named_parameters():
            src = live_params.get(name)
            if src is None or src.shape != p.shape:
                raise ValueError(f"parameter mismatch at {name}")
            p.mul_(decay).add_(src.detach(), alpha=1.0 - decay)
    return frozen


class ParamEma:
    """Exponential moving average of the live weights, kept for inference."""

    def __init__(self, model: DualModeTransformer, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    def update(self, model: DualModeTransformer) -> None:
        with torch.no_grad():
            for n, p in model.named_parameters():
                self.shadow[n].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def materialize(self, model: DualModeTransformer) -> DualModeTransformer:
        out = copy.deepcopy(model)
        with torch.no_grad():
            for n, p in out.named_parameters():
                p.copy_(self.shadow[n])
        return out


def noise_batch(
    kernel,
    x0: np.ndarray,
    t: int,
    schedule: UpdateSchedule,
    rng: np.random.Generator,
    snapshot_set: set[int],
) -> list[Trajectory]:
    """Run the forward chain for a whole batch at once (shared schedule and t).

    One batched kernel call per step; per-sample trajectories keep the same
    stored conditionals the sequential runner would log.
    """
    X = np.asarray(x0, dtype=np.int64).copy()
    B, L = X.shape
    sigma = kernel.sigma
    coords = np.empty(t, dtype=np.int64)
    conds = np.empty((B, t, sigma))
    prev_vals = np.empty((B, t), dtype=np.int64)
    new_vals = np.empty((B, t), dtype=np.int64)
    snaps: dict[int, np.ndarray] = {}
    if 0 in snapshot_set:
        snaps[0] = X.copy()

    if hasattr(kernel, "infill_batch"):
        batch_infill = kernel.infill_batch
    else:
        batch_infill = lambda X, k, s: np.stack([kernel.infill(X[b], k, s) for b in range(X.shape[0])])

    for s in range(1, t + 1):
        k = schedule.coordinate_at(s)
        probs = np.asarray(batch_infill(X, k, s), dtype=np.float64)
        probs = probs / probs.sum(axis=1, keepdims=True)
        u = rng.random(B)
        drawn = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), sigma - 1)
        coords[s - 1] = k
        conds[:, s - 1] = probs
        prev_vals[:, s - 1] = X[:, k]
        X[:, k] = drawn
        new_vals[:, s - 1] = drawn
        if s in snapshot_set:
            snaps[s] = X.copy()

    return [
        Trajectory(
            x0=np.asarray(x0[b], dtype=np.int64).copy(),
            t_end=t,
            coords=coords,
            conds=conds[b],
            prev_vals=prev_vals[b],
            new_vals=new_vals[b],
            snapshots={s: arr[b] for s, arr in snaps.items()},
        )
        for b in range(B)
    ]


def _make_optimizer(model, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.peak_lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def pretrain_base(sampler, model_cfg: ModelConfig, config: TrainConfig,
                  label_smoothing: float = 0.0) -> DualModeTransformer:
    """Train base weights on a 50/50 mixture of next-token prediction and
    random single-token infilling. Returns the un-augmented model.

    Label smoothing keeps the learned conditionals away from point masses,
    which keeps the frozen-copy forward chain mixing on tasks whose exact
    conditionals are deterministic (puzzle grids).
    """
    model = init_base(model_cfg, rng=np.random.default_rng(config.seed))
    opt = _make_optimizer(model, config)
    ce = torch.nn.CrossEntropyLoss(label_smoothing=label_smoothing)
    global_step = 0
    for epoch in range(config.epochs):
        for step in range(config.steps_per_epoch):
            global_step += 1
            _set_lr(opt, lr_at(global_step, config))
            opt.zero_grad(set_to_none=True)
            for micro in range(config.grad_accum):
                rng = np.random.default_rng([config.seed, epoch, step, micro])
                X = np.asarray(sampler(rng, config.batch_size), dtype=np.int64)
                toks = torch.as_tensor(X)
                B, L = toks.shape

                bos = torch.full((B, 1), model.cfg.bos_id, dtype=torch.long)
                causal_logits = model(torch.cat([bos, toks], dim=1), ModeFlag.CAUSAL_GEN)[:, :L]
                causal_loss = ce(causal_logits.reshape(B * L, -1), toks.reshape(-1))

                ks = torch.as_tensor(rng.integers(0, L, size=B))
                rows = torch.arange(B)
                masked = toks.clone()
                masked[rows, ks] = model.cfg.mask_id
                infill_logits = model(masked, ModeFlag.MASK_INFILL)[rows, ks]
                infill_loss = ce(infill_logits, toks[rows, ks])

                loss = 0.5 * (causal_loss + infill_loss) / config.grad_accum
                if not torch.isfinite(loss):
                    raise TrainingDiverged(global_step, None)
                loss.backward()
            opt.step()
    return model


@dataclass
class TrainResult:
    model: DualModeTransformer
    ema_model: DualModeTransformer
    metrics: list[dict]
    checkpoints: list[str] = field(default_factory=list)
    schedule: UpdateSchedule | None = None


def _optimizer_tensors(opt: torch.optim.Optimizer, model) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for p, state in opt.state.items():
        n = names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"opt.{key}.{n}"] = state[key].detach().cpu().numpy()
        out[f"opt.step.{n}"] = np.asarray(state["step"].detach().cpu().numpy(), dtype=np.float64)
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, model, tensors: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        key = f"opt.exp_avg.{n}"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.as_tensor(tensors[f"opt.step.{n}"], dtype=torch.float32).reshape(()),
            "exp_avg": torch.as_tensor(tensors[key]).to(p.dtype),
            "exp_avg_sq": torch.as_tensor(tensors[f"opt.exp_avg_sq.{n}"]).to(p.dtype),
        }


def save_train_checkpoint(path, model, ema: ParamEma, opt, config: TrainConfig,
                          epoch: int, global_step: int) -> None:
    tensors = {f"ema.{n}": v.detach().cpu().numpy() for n, v in ema.shadow.items()}
    tensors.update(_optimizer_tensors(opt, model))
    save_model(path, model, extra={
        "train_config": config.to_dict(),
        "epoch": epoch,
        "global_step": global_step,
    }, tensors=tensors)


def load_train_checkpoint(path):
    """Returns (model, ema_shadow, optimizer tensors, extra)."""
    model, extra, rest = load_model(path)
    ema_shadow = {k[len("ema."):]: torch.as_tensor(v) for k, v in rest.items() if k.startswith("ema.")}
    opt_tensors = {k: v for k, v in rest.items() if k.startswith("opt.")}
    return model, ema_shadow, opt_tensors, extra


def train(
    sampler,
    model: DualModeTransformer,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    mode: TargetMode = TargetMode.PATH_RATIO,
    time_per_sample: bool = False,
    forward_kernel=None,
) -> TrainResult:
    """Score-entropy training loop over the frozen-kernel forward chain.

    Per epoch the frozen copy is re-taken from the live weights; within the
    epoch it drifts toward them by EMA every ``frozen_refresh_interval``
    optimizer steps. Gradients flow only into the live model. Passing
    ``forward_kernel`` replaces the frozen copy with a fixed noising kernel
    (validation on tabular toys, where the objective is stationary).
    """
    if not model.augmented:
        raise ValueError("train() needs a time-augmented model")
    schedule = build_schedule(config.seq_len, config.rounds, config.seed)
    T = schedule.T
    if model.cfg.t_max < T:
        raise ValueError(f"model t_max {model.cfg.t_max} below chain horizon {T}")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl" if out_dir else None

    opt = _make_optimizer(model, config)
    ema = ParamEma(model, config.param_ema_decay)
    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        ck_model, ema_shadow, opt_tensors, extra = load_train_checkpoint(resume_from)
        model.load_state_dict(ck_model.state_dict())
        ema.shadow = {n: v.to(model.cfg.torch_dtype) for n, v in ema_shadow.items()}
        _restore_optimizer(opt, model, opt_tensors)
        start_epoch = int(extra["epoch"]) + 1
        global_step = int(extra["global_step"])

    metrics: list[dict] = []
    checkpoints: list[str] = []
    last_checkpoint = str(resume_from) if resume_from else None
    t0 = time.monotonic()

    for epoch in range(start_epoch, config.epochs):
        frozen = make_frozen(model, T) if forward_kernel is None else None
        kernel = frozen if frozen is not None else forward_kernel
        for step in range(config.steps_per_epoch):
            opt.zero_grad(set_to_none=True)
            total_items = 0
            loss_sum = 0.0
            for micro in range(config.grad_accum):
                rng = np.random.default_rng([config.seed, epoch, step, micro])
                X = np.asarray(sampler(rng, config.batch_size), dtype=np.int64)
                if time_per_sample:
                    trajs, times = [], []
                    for b in range(X.shape[0]):
                        tb = int(rng.integers(1, T + 1))
                        ts = snapshot_times(tb, config.snapshots_per_sample)
                        trajs.extend(noise_batch(kernel, X[b:b + 1], tb, schedule, rng, set(ts)))
                        times.append(ts)
                else:
                    t = int(rng.integers(1, T + 1))
                    ts = snapshot_times(t, config.snapshots_per_sample)
                    trajs = noise_batch(kernel, X, t, schedule, rng, set(ts))
                    times = [ts] * X.shape[0]
                n_items = sum(len(ts) for ts in times)
                micro_loss = snapshot_batch_loss(model, trajs, times, mode=mode) * n_items
                if not torch.isfinite(micro_loss):
                    raise TrainingDiverged(global_step, last_checkpoint)
                micro_loss.backward()
                total_items += n_items
                loss_sum += float(micro_loss.detach())
            # normalize accumulated gradients so the step equals one pass
            # over the concatenated batch
            with torch.no_grad():
                for p in model.parameters():
                    if p.grad is not None:
                        p.grad /= total_items
            if frozen is not None:
                assert all(p.grad is None for p in frozen.model.parameters())
            global_step += 1
            lr = lr_at(global_step, config)
            _set_lr(opt, lr)
            opt.step()
            ema.update(model)
            if frozen is not None and global_step % config.frozen_refresh_interval == 0:
                ema_refresh(frozen, model, config.frozen_ema_decay)
            record = {
                "step": global_step,
                "loss": loss_sum / total_items,
                "lr": lr,
                "wallclock_ms": (time.monotonic() - t0) * 1000.0,
            }
            metrics.append(record)
            if metrics_path is not None:
                with open(metrics_path, "a") as f:
                    f.write(json.dumps(record) + "\n")
        if out_dir is not None:
            path = out_dir / f"epoch_{epoch}.gldf"
            save_train_checkpoint(path, model, ema, opt, config, epoch, global_step)
            checkpoints.append(str(path))
            last_checkpoint = str(path)

    return TrainResult(
        model=model,
        ema_model=ema.materialize(model),
        metrics=metrics,
        checkpoints=checkpoints,
        schedule=schedule,
    )
