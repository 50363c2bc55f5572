"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (a RunConfig JSON document) plus
``--set key=value`` overrides, where values are parsed as JSON when possible
and nested keys use dots (``--set gen.max_objects=4``).

Exit codes: 0 success, 1 usage, 2 validation failure, 3 check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .agent import ActorCritic
from .config import ConfigError, RunConfig, curriculum
from .geometry import Box, iou
from .nets import numeric_gradient, relative_error, save_mlp, softmax
from .query import ParseError, parse
from .scene import GenerationError
from .svg import write_frames

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _override(d: dict, key: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *path, last = key.split(".")
    for part in path:
        if not isinstance(d.get(part), dict):
            raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        d = d[part]
    if last not in d:
        raise ConfigError(f"unknown config key {key!r}")
    d[last] = value


def load_config(args) -> RunConfig:
    if args.config:
        base = json.loads(Path(args.config).read_text())
    else:
        base = (curriculum() if args.preset == "curriculum" else RunConfig()).to_json()
    base = json.loads(json.dumps(base))  # tuples -> lists, fresh copy
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _override(base, k.strip(), v)
    return RunConfig.from_json(base)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--preset", choices=("default", "curriculum"), default="curriculum",
                   help="base config when --config is absent")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    world = harness.World.build(cfg)
    samples = harness.generate_samples(args.seed, args.count, cfg.gen)
    harness.write_dataset(args.out, samples, world.vocab_hash)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    world = harness.World.build(cfg)
    run = harness.train_run(cfg)
    report = harness.evaluate(world, harness.actor_policy(run.ac), world.eval_samples(),
                              run.refiner, label="default")
    harness.save_run(args.run_dir, run, world, report)
    print(report.dumps(), end="")
    return EXIT_OK


def cmd_refine_train(args) -> int:
    cfg = load_config(args)
    world = harness.World.build(cfg)
    refiner, losses = harness.train_box_refiner(world)
    out = Path(args.run_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    save_mlp(out / "refiner.ckpt", refiner.net, sigma=refiner.sigma, config_hash=cfg.hash,
             vocab_hash=world.vocab_hash)
    before, after = harness.refinement_gain(world, refiner, cfg.eval_size)
    print(json.dumps({"final_loss": losses[-1], "noisy_iou": before, "refined_iou": after},
                     sort_keys=True))
    return EXIT_OK


POLICIES = {"random": harness.random_policy, "oracle": harness.oracle_policy}


def cmd_eval(args) -> int:
    if args.policy == "actor" and not args.run_dir:
        raise UsageError("eval --policy actor needs --run-dir")
    if args.run_dir:
        world, run = harness.load_run(args.run_dir)
    else:
        cfg = load_config(args)
        world, run = harness.World.build(cfg), None
    if args.data:
        samples = harness.read_dataset(args.data, vocab_hash=world.vocab_hash)
    else:
        samples = world.eval_samples()
    policy = harness.actor_policy(run.ac) if args.policy == "actor" else POLICIES[args.policy]
    refiner = None
    if run is not None and not args.no_refine and not world.cfg.no_refinement:
        refiner = run.refiner
    report = harness.evaluate(world, policy, samples, refiner, label=args.policy)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_trace(args) -> int:
    world, run = harness.load_run(args.checkpoint)
    if args.data:
        samples = harness.read_dataset(args.data, vocab_hash=world.vocab_hash)
        if not 0 <= args.scene_id < len(samples):
            raise ValueError(f"scene id {args.scene_id} outside dataset of {len(samples)}")
        sample = samples[args.scene_id]
    else:
        sample = harness.generate_samples(world.cfg.seeds.eval_scenes + args.scene_id, 1,
                                          world.cfg.gen)[0]
    trace = harness.record_trace(world, harness.actor_policy(run.ac), sample)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "traces" / f"scene_{args.scene_id}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.json").write_text(json.dumps(trace.to_json(), sort_keys=True, indent=2) + "\n")
    frames = write_frames(trace, sample.scene, out)
    print(f"{len(frames)} frames, final IoU {iou(sample.gt, Box.from_list(trace.final_box)):.3f}"
          f" -> {out}")
    return EXIT_OK


def cmd_parse_query(args) -> int:
    for triad in parse(args.query):
        print(json.dumps(list(triad)))
    return EXIT_OK


def gradient_check(n_seeds: int = 20, dim: int = 12, hidden=(8, 6), scales: int = 3,
                   activation: str = "tanh") -> float:
    """Largest relative error between analytic and finite-difference actor/critic gradients."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        ac = ActorCritic.build(dim, scales, hidden, seed=seed, activation=activation)
        S = rng.normal(size=(scales, dim))
        a = int(rng.integers(5))
        _, g = ac.log_pi_grad(S, a)
        actor = ac.actor.clone()

        def logp(params):
            actor.params[:] = params
            return float(np.log(softmax(actor.forward(S)).mean(axis=0)[a]))

        worst = max(worst, relative_error(g, numeric_gradient(logp, ac.actor.params.copy())))
        _, gv = ac.value_grad(S)
        critic = ac.critic.clone()

        def value(params):
            critic.params[:] = params
            return float(critic.forward(S).mean())

        worst = max(worst, relative_error(gv, numeric_gradient(value, ac.critic.params.copy())))
    return worst


def cmd_gradcheck(args) -> int:
    err = gradient_check(args.seeds, activation=args.activation)
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


ORDERINGS = (("default", "fixed_stride", "acc"), ("default", "supervised", "acc"),
             ("default", "no_refinement", "mean_iou"))


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    variants = args.variants or list(harness.VARIANTS)
    reports = harness.run_ablation(cfg, variants, args.out)
    print(harness.ablation_table(reports))
    if not args.check:
        return EXIT_OK
    failed = [f"{a} > {b} on {m}" for a, b, m in ORDERINGS
              if a in reports and b in reports
              and not getattr(reports[a], m) > getattr(reports[b], m)]
    for f in failed:
        print(f"ordering violated: {f}")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="shrinkground", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a JSON-lines scene/query dataset")
    _common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy and refiner into a run directory")
    _common(p)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run or a baseline policy")
    _common(p)
    p.add_argument("--run-dir")
    p.add_argument("--data", help="JSON-lines dataset (default: the config's eval split)")
    p.add_argument("--policy", choices=("actor", "random", "oracle"), default="actor")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="record a reasoning trace and SVG frames")
    p.add_argument("--checkpoint", required=True, help="run directory")
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("parse-query", help="print the triads of a query")
    p.add_argument("query")
    p.set_defaults(fn=cmd_parse_query)

    p = sub.add_parser("gradcheck", help="finite-difference check of actor and critic gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    _common(p)
    p.add_argument("--variants", nargs="+", choices=list(harness.VARIANTS))
    p.add_argument("--out")
    p.add_argument("--check", action="store_true", help="exit 3 if an expected ordering fails")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("refine-train", help="train the box refiner alone")
    _common(p)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_refine_train)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"shrinkground: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParseError, GenerationError, harness.CompatibilityError,
            ValueError, KeyError, FileNotFoundError) as e:
        print(f"shrinkground: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
