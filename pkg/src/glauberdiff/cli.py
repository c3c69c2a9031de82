"""Command-line front end.

Subcommands: train, sample, oracle-verify, puzzle-gen, puzzle-eval,
eval-dist, bon-eval. Report commands write JSON plus CSV, and render PNG
figures next to them when --figures is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import reports
from .chain import build_schedule
from .checkpoint import load_model, save_model
from .energies import PottsEnergy, TabularDistribution
from .hmm import HmmCorpus, random_hmm
from .net import ModelConfig, augment_time
from .oracle import (
    detailed_balance_residual,
    reverse_composition,
    stationarity_residual,
    target_gap_report,
    tv_distance,
)
from .puzzles.sudoku import gen_sudoku
from .puzzles.zebra import gen_zebra
from .sampling import GenerationSpec, generate
from .tasks import (
    ZebraLayout,
    bon_eval,
    eval_distribution,
    eval_puzzles,
    sudoku_corpus,
    sudoku_from_dict,
    sudoku_to_dict,
    zebra_corpus,
    zebra_from_dict,
    zebra_to_dict,
)
from .training import TrainConfig, pretrain_base, train


# ------------------------------------------------------------------ helpers

def _task_setup(args) -> dict:
    """Corpus sampler plus model dimensions and metadata for one task name."""
    if args.task == "sudoku4":
        return {
            "sampler": sudoku_corpus(4),
            "vocab_size": 4,
            "seq_len": 16,
            "meta": {"task": "sudoku", "n": 4},
        }
    if args.task == "sudoku9":
        return {
            "sampler": sudoku_corpus(9),
            "vocab_size": 9,
            "seq_len": 81,
            "meta": {"task": "sudoku", "n": 9},
        }
    if args.task == "zebra3":
        layout = ZebraLayout(m=3, n_categories=2, max_clues=args.zebra_max_clues)
        return {
            "sampler": zebra_corpus(layout),
            "vocab_size": layout.vocab_size,
            "seq_len": layout.seq_len,
            "meta": {"task": "zebra", "m": 3, "n_categories": 2,
                     "max_clues": args.zebra_max_clues},
        }
    if args.task == "hmm":
        truth = random_hmm(args.hmm_states, args.hmm_sigma, args.hmm_length, args.hmm_seed)
        return {
            "sampler": lambda rng, batch: truth.sample(rng, batch),
            "vocab_size": truth.sigma,
            "seq_len": truth.L,
            "meta": {"task": "hmm", "states": args.hmm_states, "sigma": args.hmm_sigma,
                     "length": args.hmm_length, "hmm_seed": args.hmm_seed},
            "truth": truth,
        }
    raise ValueError(f"unknown task {args.task!r}")


def _load_checkpoint_model(path: str, use_live: bool = False):
    """Model (parameter-EMA weights unless --use-live), task meta, train config."""
    model, extra, rest = load_model(path)
    if not use_live:
        ema = {k[len("ema."):]: v for k, v in rest.items() if k.startswith("ema.")}
        if ema:
            with torch.no_grad():
                for n, p in model.named_parameters():
                    if n in ema:
                        p.copy_(torch.as_tensor(ema[n]).to(p.dtype))
    model.eval()
    return model, extra.get("task_meta", {}), extra.get("train_config", {})


def _schedule_from(args, meta_cfg: dict, model):
    length = args.length if getattr(args, "length", None) else meta_cfg.get("seq_len")
    rounds = args.n_rounds if getattr(args, "n_rounds", None) else meta_cfg.get("rounds")
    seed = meta_cfg.get("seed", 0)
    if length is None or rounds is None:
        raise SystemExit("checkpoint carries no schedule; pass --length and --n-rounds")
    if model.cfg.t_max < rounds * length:
        raise SystemExit(f"model supports t_max={model.cfg.t_max}; "
                         f"requested horizon {rounds * length}")
    return build_schedule(length, rounds, seed)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    setup = _task_setup(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t_max = config.rounds * config.seq_len
    if config.seq_len != setup["seq_len"]:
        raise SystemExit(f"config seq_len {config.seq_len} does not match task "
                         f"sequence length {setup['seq_len']}")
    model_cfg = ModelConfig(
        vocab_size=setup["vocab_size"],
        l_max=setup["seq_len"],
        t_max=t_max,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
    )

    if args.init_checkpoint:
        model, _, _ = load_model(args.init_checkpoint)
    else:
        pre_cfg = TrainConfig(**{**config.to_dict(), "epochs": 1,
                                 "steps_per_epoch": args.pretrain_steps,
                                 "warmup_steps": min(config.warmup_steps,
                                                     max(1, args.pretrain_steps // 10))})
        model = pretrain_base(setup["sampler"], model_cfg, pre_cfg)
        save_model(out_dir / "base.gldf", model,
                   extra={"task_meta": setup["meta"], "phase": "base"})
    if not model.augmented:
        augment_time(model, np.random.default_rng(config.seed + 1))

    result = train(setup["sampler"], model, config, out_dir=out_dir)

    tensors = {f"ema.{n}": p.detach().numpy()
               for n, p in result.ema_model.named_parameters()}
    save_model(out_dir / "final.gldf", result.model,
               extra={"task_meta": setup["meta"], "train_config": config.to_dict()},
               tensors=tensors)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        reports.fig_loss_curve(result.metrics, fig_dir / "loss_curve.png")
    print(json.dumps({"checkpoint": str(out_dir / "final.gldf"),
                      "final_loss": result.metrics[-1]["loss"],
                      "steps": result.metrics[-1]["step"]}))
    return 0


# ------------------------------------------------------------------ sample

def cmd_sample(args) -> int:
    model, task_meta, train_cfg = _load_checkpoint_model(args.checkpoint, args.use_live)
    schedule = _schedule_from(args, train_cfg, model)

    frozen: set[int] = set()
    template = None
    if args.frozen_json:
        spec_data = json.loads(Path(args.frozen_json).read_text())
        frozen = set(int(i) for i in spec_data["indices"])
        template = np.zeros(schedule.L, dtype=np.int64)
        for i, v in zip(spec_data["indices"], spec_data["values"]):
            template[int(i)] = int(v)
    prefix = None
    if args.prefix_file:
        prefix = np.asarray(json.loads(Path(args.prefix_file).read_text()), dtype=np.int64)
        if template is None:
            template = np.zeros(schedule.L, dtype=np.int64)
        template[: len(prefix)] = prefix
        frozen |= set(range(len(prefix)))

    lines = []
    for i in range(args.count):
        spec = GenerationSpec(schedule=schedule, frozen_indices=frozenset(frozen),
                              window=args.window, top_p=args.top_p, template=template)
        rng = np.random.default_rng([args.seed, i])
        report = generate(model, spec, rng)
        lines.append(json.dumps({
            "tokens": report.tokens.tolist(),
            "invocations": report.invocations,
            "seed": [args.seed, i],
        }, sort_keys=True))
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


# ------------------------------------------------------------------ oracle-verify

def cmd_oracle_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    energy = PottsEnergy(J=0.8, h=rng.normal(size=(4, 3)), L=4, sigma=3)

    checks = []

    def check(name, value, threshold, direction="below"):
        ok = value < threshold if direction == "below" else value > threshold
        checks.append({"name": name, "value": float(value), "threshold": threshold,
                       "direction": direction, "pass": bool(ok)})

    check("metropolis_detailed_balance",
          detailed_balance_residual(energy, L=4, sigma=3), 1e-12)
    check("heat_bath_detailed_balance",
          detailed_balance_residual(energy, L=4, sigma=3, kernel="heat_bath"), 1e-12)
    import math as _math

    check("wrong_acceptance_control",
          detailed_balance_residual(energy, L=4, sigma=3,
                                    acceptance=lambda d: min(1.0, _math.exp(-2 * d))),
          1e-3, direction="above")

    p = TabularDistribution.random(L=4, sigma=3, rng=rng)
    sched = build_schedule(4, 1, seed=args.seed)
    check("heat_bath_stationarity", stationarity_residual(p, sched), 1e-12)

    p0 = TabularDistribution.random(L=3, sigma=3, rng=rng)
    kernel = TabularDistribution.random(L=3, sigma=3, rng=rng)
    sched3 = build_schedule(3, 2, seed=args.seed + 1)
    recon = reverse_composition(p0.probs, kernel, sched3, sched3.T)
    check("reverse_round_trip_tv", tv_distance(recon, p0.probs), 1e-10)

    gap_rows = target_gap_report(p0.probs, kernel, sched3)

    payload = {"checks": checks, "all_pass": all(c["pass"] for c in checks),
               "target_gap": gap_rows}
    _emit(payload, args.out)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        reports.fig_residual_bars(checks, fig_dir / "oracle_residuals.png")
        reports.fig_gap_curve(gap_rows, fig_dir / "target_gap.png")
        reports.write_csv(fig_dir / "target_gap.csv", gap_rows)
    return 0 if payload["all_pass"] else 1


# ------------------------------------------------------------------ puzzle-gen

def cmd_puzzle_gen(args) -> int:
    instances = []
    if args.task.startswith("sudoku"):
        n = 4 if args.task == "sudoku4" else 9
        clue_count = args.clue_count if args.clue_count else (7 if n == 4 else 30)
        for i in range(args.count):
            seed = int(np.random.default_rng([args.seed, i]).integers(2**63))
            instances.append(sudoku_to_dict(gen_sudoku(n, clue_count, seed)))
        payload = {"task": "sudoku", "n": n, "instances": instances}
    elif args.task == "zebra3":
        for i in range(args.count):
            seed = int(np.random.default_rng([args.seed, i]).integers(2**63))
            instances.append(zebra_to_dict(
                gen_zebra(3, seed, n_categories=2, max_clues=args.zebra_max_clues)))
        payload = {"task": "zebra", "m": 3, "n_categories": 2,
                   "max_clues": args.zebra_max_clues, "instances": instances}
    else:
        raise SystemExit(f"unknown task {args.task!r}")
    _emit(payload, args.out)
    return 0


def _load_instances(path: str):
    data = json.loads(Path(path).read_text())
    if data["task"] == "sudoku":
        return "sudoku", [sudoku_from_dict(d) for d in data["instances"]], data
    if data["task"] == "zebra":
        return "zebra", [zebra_from_dict(d) for d in data["instances"]], data
    raise SystemExit(f"unknown task in instance file: {data['task']!r}")


# ------------------------------------------------------------------ puzzle-eval

def cmd_puzzle_eval(args) -> int:
    model, task_meta, train_cfg = _load_checkpoint_model(args.checkpoint, args.use_live)
    kind, instances, data = _load_instances(args.instances)
    schedule = _schedule_from(args, train_cfg, model)
    layout = None
    if kind == "zebra":
        layout = ZebraLayout(m=data["m"], n_categories=data["n_categories"],
                             max_clues=data["max_clues"])
    report = eval_puzzles(model, schedule, instances, np.random.default_rng(args.seed),
                          window=args.window, top_p=args.top_p, layout=layout,
                          causal_only=args.causal_only)
    records = report.pop("records")
    _emit(report, args.out)
    if args.csv:
        rows = [{"index": i, "solved": r["solved"], **r["invocations"]}
                for i, r in enumerate(records)]
        reports.write_csv(args.csv, rows)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        reports.fig_trend_bars(
            [f"{kind} N={schedule.N} w={args.window}"], [report["accuracy"]], [report["se"]],
            "solve rate", fig_dir / "puzzle_accuracy.png")
    return 0


# ------------------------------------------------------------------ eval-dist

def _load_truth(args, task_meta):
    if args.tabular:
        return TabularDistribution.load(args.tabular)
    if args.hmm_spec:
        spec = json.loads(Path(args.hmm_spec).read_text())
        if "pi" in spec:
            return HmmCorpus(pi=np.array(spec["pi"]), trans=np.array(spec["trans"]),
                             emit=np.array(spec["emit"]), L=int(spec["L"]))
        return random_hmm(spec["states"], spec["sigma"], spec["length"], spec["hmm_seed"])
    if task_meta.get("task") == "hmm":
        return random_hmm(task_meta["states"], task_meta["sigma"],
                          task_meta["length"], task_meta["hmm_seed"])
    raise SystemExit("no ground truth: pass --hmm-spec or --tabular")


def cmd_eval_dist(args) -> int:
    model, task_meta, train_cfg = _load_checkpoint_model(args.checkpoint, args.use_live)
    truth = _load_truth(args, task_meta)
    schedule = _schedule_from(args, train_cfg, model)
    report = eval_distribution(model, truth, args.samples, schedule,
                               np.random.default_rng(args.seed),
                               causal_only=args.mode == "causal")
    report["mode"] = args.mode
    report["rounds"] = schedule.N
    _emit(report, args.out)
    if args.csv:
        reports.write_csv(args.csv, [report])
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        label = "causal" if args.mode == "causal" else f"glauber N={schedule.N}"
        reports.fig_trend_bars([label], [report["mean_nll"]], [report["se_nll"]],
                               "mean exact NLL", fig_dir / "eval_dist.png")
    return 0


# ------------------------------------------------------------------ bon-eval

def cmd_bon_eval(args) -> int:
    ar_model, _, ar_cfg = _load_checkpoint_model(args.ar_checkpoint, args.use_live)
    gl_model, _, gl_cfg = _load_checkpoint_model(args.glauber_checkpoint, args.use_live)
    kind, instances, data = _load_instances(args.instances)
    layout = None
    if kind == "zebra":
        layout = ZebraLayout(m=data["m"], n_categories=data["n_categories"],
                             max_clues=data["max_clues"])
    schedule = _schedule_from(args, gl_cfg, gl_model)
    report = bon_eval(ar_model, gl_model, schedule, instances, args.k,
                      np.random.default_rng(args.seed), layout=layout,
                      window=args.window)
    _emit(report, args.out)
    if args.csv:
        reports.write_csv(args.csv, [report])
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        reports.fig_trend_bars(
            [f"AR BoN={report['ar_bon']}", f"Glauber BoN={report['glauber_bon']}"],
            [report["ar_accuracy"], report["glauber_accuracy"]],
            [report["ar_se"], report["glauber_se"]],
            "solve rate", fig_dir / "bon_eval.png")
    return 0


# ------------------------------------------------------------------ parser

def _add_task_args(p):
    p.add_argument("--task", required=True,
                   choices=["sudoku4", "sudoku9", "zebra3", "hmm"])
    p.add_argument("--zebra-max-clues", type=int, default=6)
    p.add_argument("--hmm-states", type=int, default=3)
    p.add_argument("--hmm-sigma", type=int, default=6)
    p.add_argument("--hmm-length", type=int, default=8)
    p.add_argument("--hmm-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glauberdiff",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain, time-augment, and run score-entropy training")
    p.add_argument("--config", required=True, help="TrainConfig JSON (exact keys)")
    _add_task_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--init-checkpoint", help="skip pretraining, start from this base model")
    p.add_argument("--pretrain-steps", type=int, default=1000)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-rounds", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix-file", help="JSON list of prefix tokens to freeze")
    p.add_argument("--frozen-json", help='JSON file {"indices": [...], "values": [...]}')
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--top-p", type=float)
    p.add_argument("--use-live", action="store_true",
                   help="sample the live weights instead of the parameter EMA")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("oracle-verify", help="run the exactness suite; nonzero exit on violation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_oracle_verify)

    p = sub.add_parser("puzzle-gen", help="emit uniquely solvable instances as JSON")
    p.add_argument("--task", required=True, choices=["sudoku4", "sudoku9", "zebra3"])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clue-count", type=int)
    p.add_argument("--zebra-max-clues", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_puzzle_gen)

    p = sub.add_parser("puzzle-eval", help="solve rate of a checkpoint on an instance file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--n-rounds", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--top-p", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--causal-only", action="store_true")
    p.add_argument("--use-live", action="store_true")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_puzzle_eval)

    p = sub.add_parser("eval-dist", help="sample a checkpoint and score against exact ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["causal", "glauber"], default="glauber")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--n-rounds", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hmm-spec", help="HMM JSON (tables, or builder seed form)")
    p.add_argument("--tabular", help="tabular distribution file (with JSON sidecar)")
    p.add_argument("--use-live", action="store_true")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_eval_dist)

    p = sub.add_parser("bon-eval", help="compute-matched best-of-N comparison")
    p.add_argument("--ar-checkpoint", required=True)
    p.add_argument("--glauber-checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n-rounds", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--use-live", action="store_true")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_bon_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
