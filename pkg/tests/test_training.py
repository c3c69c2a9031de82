"""Trainer mechanics: schedule, frozen copies, EMA, accumulation, resume."""

import json
import math

import numpy as np
import pytest
import torch

from glauberdiff.chain import build_schedule
from glauberdiff.energies import TabularDistribution
from glauberdiff.loss import snapshot_batch_loss, snapshot_times
from glauberdiff.net import ModeFlag, ModelConfig, augment_time, init_base
from glauberdiff.training import (
    ParamEma,
    TrainConfig,
    TrainingDiverged,
    ema_refresh,
    lr_at,
    make_frozen,
    noise_batch,
    pretrain_base,
    train,
)


def small_cfg(**kw):
    defaults = dict(
        epochs=1, rounds=1, seq_len=4, batch_size=8, steps_per_epoch=20,
        warmup_steps=4, peak_lr=1e-2, grad_accum=1, seed=0,
        frozen_refresh_interval=5,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def model_cfg(**kw):
    defaults = dict(vocab_size=3, l_max=6, t_max=8, d_model=32, n_layers=1,
                    n_heads=2, d_ff=48)
    defaults.update(kw)
    return ModelConfig(**defaults)


def cycle_sampler(sigma=3, L=4):
    """Deterministic cyclic sequences a, a+1, a+2, ... mod sigma."""

    def sampler(rng, batch):
        starts = rng.integers(0, sigma, size=batch)
        return (starts[:, None] + np.arange(L)[None, :]) % sigma

    return sampler


class TestTrainConfig:
    def test_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "cfg.json"
        data = small_cfg().to_dict()
        data["bogus"] = 1
        path.write_text(json.dumps(data))
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_json(path)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "cfg.json"
        cfg = small_cfg(epochs=2)
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_json(path) == cfg

    def test_warmup_must_precede_total(self):
        with pytest.raises(ValueError):
            small_cfg(warmup_steps=20, steps_per_epoch=20, epochs=1)


class TestLrSchedule:
    def test_endpoints(self):
        cfg = small_cfg(steps_per_epoch=100, warmup_steps=10, peak_lr=1e-3, floor_lr=1e-6)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(10, cfg) == 1e-3
        assert abs(lr_at(100, cfg) - 1e-6) < 1e-18

    def test_continuous_at_warmup(self):
        cfg = small_cfg(steps_per_epoch=100, warmup_steps=10)
        below = lr_at(10, cfg)
        above = cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1 + math.cos(0.0))
        assert abs(below - above) < 1e-12

    def test_monotone_decay_after_warmup(self):
        cfg = small_cfg(steps_per_epoch=50, warmup_steps=5)
        vals = [lr_at(s, cfg) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestFrozenKernel:
    def make(self):
        model = init_base(model_cfg(), np.random.default_rng(0))
        augment_time(model, np.random.default_rng(1))
        return model

    def test_copy_equals_source_then_diverges(self):
        model = self.make()
        frozen = make_frozen(model)
        x = np.array([[0, 1, 2, 0]])
        before = frozen.infill_batch(x, 2)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.05)
        after = frozen.infill_batch(x, 2)
        np.testing.assert_array_equal(before, after)
        live = make_frozen(model).infill_batch(x, 2)
        assert np.abs(live - after).max() > 1e-6

    def test_copy_refuses_gradients(self):
        frozen = make_frozen(self.make())
        assert all(not p.requires_grad for p in frozen.model.parameters())
        out = frozen.model(torch.tensor([[0, 1, 2, 0]]), ModeFlag.MASK_INFILL, t=1)
        assert out.grad_fn is None

    def test_requires_augmented(self):
        with pytest.raises(ValueError):
            make_frozen(init_base(model_cfg(), np.random.default_rng(0)))


class TestEmaRefresh:
    def test_decay_one_keeps_frozen(self):
        model = TestFrozenKernel().make()
        frozen = make_frozen(model)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        before = [p.clone() for p in frozen.model.parameters()]
        ema_refresh(frozen, model, 1.0)
        for b, p in zip(before, frozen.model.parameters()):
            assert torch.equal(b, p)

    def test_decay_zero_copies_live(self):
        model = TestFrozenKernel().make()
        frozen = make_frozen(model)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        ema_refresh(frozen, model, 1e-12)
        with torch.no_grad():
            for pf, pl in zip(frozen.model.parameters(), model.parameters()):
                assert float((pf - pl).abs().max()) < 1e-9

    def test_matches_closed_form(self):
        model = make_augmented(seed=0, dtype="float64")
        frozen = make_frozen(model)
        d = 0.9
        name, p0 = next(iter(frozen.model.named_parameters()))
        start = p0.detach().clone()
        lives = []
        for i in range(5):
            with torch.no_grad():
                for p in model.parameters():
                    p.add_(0.1 * (i + 1))
            lives.append(dict(model.named_parameters())[name].detach().clone())
            ema_refresh(frozen, model, d)
        expected = start * d**5
        for i, live in enumerate(lives):
            expected = expected + (1 - d) * d ** (5 - 1 - i) * live
        got = dict(frozen.model.named_parameters())[name].detach()
        assert float((got - expected).abs().max()) < 1e-10


class TestNoiseBatch:
    def test_matches_sequential_runner_distributionally(self):
        # batched noising logs the same conditionals the sequential runner would
        rng = np.random.default_rng(2)
        kernel = TabularDistribution.random(L=3, sigma=3, rng=rng)
        kernel.sigma_attr = 3

        class Wrap:
            sigma = 3

            def infill_batch(self, X, k, t=0):
                return np.stack([kernel.infill(X[b], k) for b in range(X.shape[0])])

        sched = build_schedule(L=3, N=2, seed=3)
        X0 = rng.integers(0, 3, size=(5, 3))
        trajs = noise_batch(Wrap(), X0, 4, sched, rng, {2, 4})
        assert len(trajs) == 5
        for b, traj in enumerate(trajs):
            assert traj.t_end == 4
            np.testing.assert_array_equal(traj.x0, X0[b])
            assert set(traj.snapshots) == {2, 4}
            for s in range(1, 5):
                k = sched.coordinate_at(s)
                assert traj.coords[s - 1] == k
                # conditional is a function of the off-k coordinates only
                state = traj.snapshots[4] if s == 4 else None
            assert np.allclose(traj.conds.sum(axis=1), 1.0, atol=1e-9)

    def test_uses_logged_state_consistency(self):
        rng = np.random.default_rng(4)

        class Uni:
            sigma = 2

            def infill_batch(self, X, k, t=0):
                return np.full((X.shape[0], 2), 0.5)

        sched = build_schedule(L=2, N=1, seed=5)
        trajs = noise_batch(Uni(), np.zeros((3, 2), dtype=np.int64), 2, sched, rng, {0, 1, 2})
        for traj in trajs:
            x_prev = traj.snapshots[0]
            for s in (1, 2):
                x_next = traj.snapshots[s]
                k = traj.coords[s - 1]
                assert traj.prev_vals[s - 1] == x_prev[k]
                assert traj.new_vals[s - 1] == x_next[k]
                off = np.arange(2) != k
                np.testing.assert_array_equal(x_prev[off], x_next[off])
                x_prev = x_next


class TestPretrain:
    def test_learns_cycle_corpus(self):
        from glauberdiff.net import causal_next_logits, infill_logits

        cfg = small_cfg(steps_per_epoch=300, warmup_steps=10, peak_lr=3e-3)
        model = pretrain_base(cycle_sampler(), model_cfg(), cfg)
        # causal: next token is previous + 1 mod 3, deterministic
        causal_hits = []
        for start in range(3):
            seq = (start + np.arange(4)) % 3
            for i in range(1, 4):
                probs = causal_next_logits(model, seq[:i], 0)
                causal_hits.append(int(np.argmax(probs) == seq[i]))
        assert sum(causal_hits) == len(causal_hits)

        # infill at interior positions is forced by both neighbors, so its
        # accuracy is at least the causal accuracy there
        infill_hits = []
        interior_causal = []
        for start in range(3):
            seq = (start + np.arange(4)) % 3
            for pos in (1, 2):
                masked = seq.copy()
                masked[pos] = model.cfg.mask_id
                probs = infill_logits(model, masked, pos, 0)
                infill_hits.append(int(np.argmax(probs) == seq[pos]))
                interior_causal.append(
                    int(np.argmax(causal_next_logits(model, seq[:pos], 0)) == seq[pos]))
        assert np.mean(infill_hits) >= np.mean(interior_causal)
        assert sum(infill_hits) == len(infill_hits)

    def test_seed_reproducibility(self):
        cfg = small_cfg(steps_per_epoch=30)
        a = pretrain_base(cycle_sampler(), model_cfg(), cfg)
        b = pretrain_base(cycle_sampler(), model_cfg(), cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


def make_augmented(seed=0, **cfg_kw):
    model = init_base(model_cfg(**cfg_kw), np.random.default_rng(seed))
    augment_time(model, np.random.default_rng(seed + 1))
    return model


class TestTrain:
    def test_loss_decreases_on_tabular_toy(self):
        # stationary objective: fixed tabular forward kernel
        cfg = small_cfg(epochs=1, steps_per_epoch=200, warmup_steps=5,
                        peak_lr=1e-2, seq_len=4)
        model = make_augmented(t_max=8, l_max=8)
        rng = np.random.default_rng(6)
        target = TabularDistribution.random(L=4, sigma=3, rng=rng)

        def sampler(r, batch):
            idx = r.choice(target.probs.size, size=batch, p=target.probs)
            return np.stack([(idx // 3**i) % 3 for i in range(4)], axis=1)

        result = train(sampler, model, cfg, forward_kernel=target)
        first = result.metrics[0]["loss"]
        last = np.mean([m["loss"] for m in result.metrics[-10:]])
        assert last < 0.5 * first

    def test_frozen_changes_across_epochs(self):
        cfg = small_cfg(epochs=2, steps_per_epoch=40, warmup_steps=4, peak_lr=5e-3)
        model = make_augmented()
        snaps = []

        orig_make = make_frozen

        def sampler(r, batch):
            return r.integers(0, 3, size=(batch, 4))

        # capture frozen outputs at each epoch start by re-deriving them:
        # epoch boundaries recopy from live, so compare live before/after.
        x = np.array([[0, 1, 2, 0]])
        before = orig_make(model).infill_batch(x, 1)
        train(sampler, model, cfg)
        after = orig_make(model).infill_batch(x, 1)
        assert np.abs(before - after).max() > 1e-6

    def test_resume_matches_straight_run(self, tmp_path):
        cfg = small_cfg(epochs=2, steps_per_epoch=15, warmup_steps=3, peak_lr=2e-3)

        def sampler(r, batch):
            return r.integers(0, 3, size=(batch, 4))

        straight = train(sampler, make_augmented(), cfg, out_dir=tmp_path / "a")

        first = train(sampler, make_augmented(), cfg, out_dir=tmp_path / "b")
        # wipe: re-run from the epoch-0 checkpoint
        resumed = train(sampler, make_augmented(), cfg, out_dir=tmp_path / "c",
                        resume_from=str(tmp_path / "b" / "epoch_0.gldf"))
        straight_losses = [m["loss"] for m in straight.metrics]
        resumed_losses = [m["loss"] for m in resumed.metrics]
        assert len(resumed_losses) == 15
        np.testing.assert_allclose(resumed_losses, straight_losses[15:], atol=1e-6)
        with torch.no_grad():
            for pa, pb in zip(straight.model.parameters(), resumed.model.parameters()):
                assert float((pa - pb).abs().max()) < 1e-6

    def test_divergence_aborts_with_context(self):
        cfg = small_cfg(epochs=1, steps_per_epoch=30, warmup_steps=1, peak_lr=1e18)

        def sampler(r, batch):
            return r.integers(0, 3, size=(batch, 4))

        with pytest.raises(TrainingDiverged):
            train(sampler, make_augmented(), cfg)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        model = make_augmented()
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
        before = [p.detach().clone() for p in model.parameters()]
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for b, p in zip(before, model.parameters()):
            assert torch.equal(b, p)

    def test_grad_accumulation_matches_concatenated_batch(self):
        # 64-bit model; same total data split into 2 micro-batches vs 1 step
        torch.set_grad_enabled(True)
        mc = model_cfg(dtype="float64")
        cfg_acc = small_cfg(epochs=1, steps_per_epoch=1, warmup_steps=0,
                            grad_accum=2, batch_size=4, peak_lr=1e-3, seed=3)
        cfg_one = small_cfg(epochs=1, steps_per_epoch=1, warmup_steps=0,
                            grad_accum=1, batch_size=8, peak_lr=1e-3, seed=3)

        # identical concatenated data: micro 0 and 1 of the accumulation run
        # vs one batch containing both
        batches = {}

        def sampler_acc(r, batch):
            key = len(batches)
            data = r.integers(0, 3, size=(batch, 4))
            batches[key] = data
            return data

        model_a = make_augmented(seed=9, dtype="float64")
        model_b = make_augmented(seed=9, dtype="float64")
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(pa, pb)

        train(sampler_acc, model_a, cfg_acc)

        # the accumulation run drew (seed,0,0,0) and (seed,0,0,1); replay the
        # same trajectories in one concatenated micro-batch
        from glauberdiff.training import noise_batch as nb
        from glauberdiff.training import make_frozen as mf

        frozen = mf(model_b, 4)
        sched = build_schedule(4, 1, cfg_one.seed)
        trajs, times = [], []
        for micro in range(2):
            rng = np.random.default_rng([3, 0, 0, micro])
            X = rng.integers(0, 3, size=(4, 4))
            t = int(rng.integers(1, 5))
            ts = snapshot_times(t, 32)
            trajs.extend(nb(frozen, X, t, sched, rng, set(ts)))
            times.extend([ts] * 4)
        loss = snapshot_batch_loss(model_b, trajs, times)
        opt = torch.optim.AdamW(model_b.parameters(), lr=lr_at(1, cfg_one),
                                betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        opt.zero_grad()
        loss.backward()
        opt.step()

        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert float((pa - pb).abs().max()) < 1e-9

    def test_frozen_perturbation_moves_loss_not_grad_structure(self):
        # perturbing the frozen copy changes the loss value, but the set of
        # parameters receiving gradient stays exactly the live model's
        model = make_augmented(seed=21)
        sched = build_schedule(4, 1, seed=0)
        rng = np.random.default_rng(0)
        X = rng.integers(0, 3, size=(6, 4))

        def run(frozen):
            trajs = noise_batch(frozen, X, 3, sched, np.random.default_rng(1), {1, 2, 3})
            model.zero_grad(set_to_none=True)
            loss = snapshot_batch_loss(model, trajs, [[1, 2, 3]] * 6)
            loss.backward()
            grads = {n for n, p in model.named_parameters() if p.grad is not None}
            return float(loss.detach()), grads

        frozen_a = make_frozen(model)
        loss_a, grads_a = run(frozen_a)
        frozen_b = make_frozen(model)
        with torch.no_grad():
            for p in frozen_b.model.parameters():
                p.add_(0.2)
        loss_b, grads_b = run(frozen_b)
        assert loss_a != loss_b
        assert grads_a == grads_b
        assert all(p.grad is None for p in frozen_b.model.parameters())

    def test_param_ema_tracks_live(self):
        model = make_augmented()
        ema = ParamEma(model, 0.5)
        with torch.no_grad():
            for p in model.parameters():
                p.fill_(1.0)
        ema.update(model)
        out = ema.materialize(model)
        name, first = next(iter(out.named_parameters()))
        # shadow = 0.5 * original + 0.5 * ones
        orig = dict(make_augmented().named_parameters())[name].detach()
        assert float((first.detach() - (0.5 * orig + 0.5)).abs().max()) < 1e-6


class TestMetricsFile:
    def test_jsonl_written(self, tmp_path):
        cfg = small_cfg(epochs=1, steps_per_epoch=5, warmup_steps=1)

        def sampler(r, batch):
            return r.integers(0, 3, size=(batch, 4))

        train(sampler, make_augmented(), cfg, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 5
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "loss", "lr", "wallclock_ms"}
