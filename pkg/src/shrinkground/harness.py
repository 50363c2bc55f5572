"""Datasets, training drivers, evaluation and the ablation matrix.

A :class:`World` bundles everything a run needs besides learned weights: the
config, the word-embedding table and the scene encoder. Evaluation runs greedy
episodes and scores a sample correct iff its final IoU is strictly above 0.5.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .agent import (ActorCritic, Refiner, Schedule, SupervisedConfig, noisy_box, train_refiner,
                    train_rl, train_supervised)
from .config import RunConfig
from .env import N_ACTIONS, Action, EnvConfig, EpisodeTrace, ShrinkEnv, oracle_action, update_trace
from .geometry import Box, iou
from .nets import load_mlp, read_checkpoint, save_mlp, softmax, write_checkpoint
from .query import EmbeddingTable, bag_of_tokens, embed, parse
from .scene import EncoderConfig, GroundedQuery, PatchEncoder, Scene, generate_scene

log = logging.getLogger(__name__)

DATASET_SCHEMA = 1


class CompatibilityError(ValueError):
    """A checkpoint and a dataset disagree on vocabulary or configuration."""


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class Sample:
    scene: Scene
    query: GroundedQuery

    @property
    def gt(self) -> Box:
        return self.scene.object(self.query.target_id).box


def generate_samples(start_seed: int, count: int, cfg) -> list[Sample]:
    return [Sample(*generate_scene(start_seed + i, cfg)) for i in range(count)]


def write_dataset(path: str | Path, samples: Iterable[Sample], vocab_hash: str) -> None:
    with open(path, "w") as f:
        for s in samples:
            rec = {"schema": DATASET_SCHEMA, "vocab": vocab_hash,
                   "scene": s.scene.to_json(), "query": s.query.to_json()}
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path: str | Path, vocab_hash: str | None = None) -> list[Sample]:
    """Load a JSON-lines dataset; with ``vocab_hash`` every line must carry that hash."""
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema") != DATASET_SCHEMA:
                raise CompatibilityError(f"{path}:{lineno}: unsupported schema {rec.get('schema')}")
            if vocab_hash is not None and rec.get("vocab") != vocab_hash:
                raise CompatibilityError(f"{path}:{lineno}: vocabulary hash {rec.get('vocab')} "
                                         f"does not match {vocab_hash}")
            samples.append(Sample(Scene.from_json(rec["scene"]), GroundedQuery.from_json(rec["query"])))
    return samples


# ---------------------------------------------------------------------------
# world

@dataclass
class World:
    cfg: RunConfig
    table: EmbeddingTable
    encoder: PatchEncoder

    @classmethod
    def build(cls, cfg: RunConfig) -> "World":
        table = EmbeddingTable.seeded(cfg.seeds.embedding, cfg.word_dim)
        enc = PatchEncoder(EncoderConfig(tuple(cfg.grid_sizes), cfg.object_dim, cfg.visual_dim,
                                         cfg.seeds.projection))
        return cls(cfg, table, enc)

    @property
    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.table.tokens).encode())
        h.update(np.ascontiguousarray(self.table.vectors, dtype="<f8").tobytes())
        h.update(json.dumps(dataclasses.asdict(self.encoder.cfg), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def env_config(self) -> EnvConfig:
        c = self.cfg
        return EnvConfig(c.alpha, c.t_max, c.min_side_fraction, c.terminal_bonus,
                         c.regress_penalty, c.fixed_stride, multiscale=not c.no_multiscale,
                         spatial=not c.no_spatial)

    def env(self) -> ShrinkEnv:
        return ShrinkEnv(self.encoder, self.env_config())

    def linguistic(self, query: GroundedQuery) -> np.ndarray:
        if self.cfg.no_triad:
            return bag_of_tokens(query.text, self.table, self.cfg.M)
        return embed(parse(query.text), self.table, self.cfg.M)

    def train_samples(self) -> list[Sample]:
        return generate_samples(self.cfg.seeds.train_scenes, self.cfg.train_pool, self.cfg.gen)

    def eval_samples(self) -> list[Sample]:
        return generate_samples(self.cfg.seeds.eval_scenes, self.cfg.eval_size, self.cfg.gen)

    def episodes(self, samples: Sequence[Sample]) -> Callable[[int], tuple[Scene, Box, np.ndarray]]:
        feats: dict[int, np.ndarray] = {}

        def get(i: int):
            j = i % len(samples)
            if j not in feats:
                feats[j] = self.linguistic(samples[j].query)
            return samples[j].scene, samples[j].gt, feats[j]
        return get


# ---------------------------------------------------------------------------
# policies

Policy = Callable[[ShrinkEnv, np.random.Generator], Action]


def actor_policy(ac: ActorCritic) -> Policy:
    def act(env: ShrinkEnv, rng: np.random.Generator) -> Action:
        pbar = softmax(ac.actor.forward(env.state.sub_states)).mean(axis=0)
        return Action(int(np.argmax(pbar)))
    return act


def random_policy(env: ShrinkEnv, rng: np.random.Generator) -> Action:
    return Action(int(rng.integers(N_ACTIONS)))


def oracle_policy(env: ShrinkEnv, rng: np.random.Generator) -> Action:
    return oracle_action(env)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Group:
    n: int = 0
    correct: int = 0
    iou_sum: float = 0.0

    def add(self, v: float) -> None:
        self.n += 1
        self.correct += v > 0.5
        self.iou_sum += v

    def to_json(self) -> dict:
        return {"n": self.n, "acc@0.5": self.correct / self.n if self.n else 0.0,
                "mean_iou": self.iou_sum / self.n if self.n else 0.0}


@dataclass
class EvalReport:
    label: str
    config_hash: str
    acc: float
    mean_iou: float
    mean_length: float
    n: int
    by_kind: dict[str, dict]
    by_reference: dict[str, dict]
    refined: bool
    ious: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"label": self.label, "config_hash": self.config_hash, "acc@0.5": self.acc,
                "mean_iou": self.mean_iou, "mean_length": self.mean_length, "n": self.n,
                "by_kind": self.by_kind, "by_reference": self.by_reference, "refined": self.refined}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"


def run_episode(env: ShrinkEnv, policy: Policy, sample: Sample, ling: np.ndarray,
                rng: np.random.Generator, trace: EpisodeTrace | None = None) -> tuple[Box, int]:
    state = env.reset(sample.scene, sample.gt, ling)
    triads = trace.triads if trace is not None else ()
    if trace is not None:
        update_trace(trace, sample.scene, state.patch, triads, sample.query.target_id)
    while not state.done:
        a = policy(env, rng)
        out = env.step(a)
        state = out.next_state
        if trace is not None:
            update_trace(trace, sample.scene, state.patch, triads, sample.query.target_id, a, out.reward)
    return state.patch, state.step_index


def evaluate(world: World, policy: Policy, samples: Sequence[Sample], refiner: Refiner | None = None,
             label: str = "eval", seed: int | None = None) -> EvalReport:
    """Greedy episodes on ``samples``; correct iff the final IoU exceeds 0.5 strictly."""
    env = world.env()
    base = world.cfg.seeds.rng if seed is None else seed
    total, kinds, refs = Group(), {}, {}
    lengths, ious = [], []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([base, i])
        box, steps = run_episode(env, policy, s, world.linguistic(s.query), rng)
        if refiner is not None:
            box, _ = refiner.refine(s.scene, box)
        v = iou(box, s.gt)
        total.add(v)
        kinds.setdefault(s.query.kind, Group()).add(v)
        refs.setdefault("relation" if s.query.has_reference else "attribute", Group()).add(v)
        lengths.append(steps)
        ious.append(v)
    t = total.to_json()
    return EvalReport(label, world.cfg.hash, t["acc@0.5"], t["mean_iou"], float(np.mean(lengths)),
                      len(samples), {k: g.to_json() for k, g in sorted(kinds.items())},
                      {k: g.to_json() for k, g in sorted(refs.items())}, refiner is not None, ious)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainedRun:
    cfg: RunConfig
    ac: ActorCritic
    refiner: Refiner | None
    metrics: list[dict]


def build_agent(world: World) -> ActorCritic:
    c = world.cfg
    return ActorCritic.build(c.state_dim, c.scales, tuple(c.hidden), seed=c.seeds.net,
                             critic_input=c.critic_input, activation=c.activation, gamma=c.gamma,
                             lr_actor=c.lr_actor, lr_critic=c.lr_critic, optimizer=c.optimizer,
                             entropy_coef=c.entropy_coef)


def train_policy(world: World, samples: Sequence[Sample] | None = None,
                 on_log: Callable[[dict], dict | None] | None = None) -> tuple[ActorCritic, list[dict]]:
    """Train the actor (and critic) for ``cfg.episodes`` episodes, RL or supervised."""
    c = world.cfg
    samples = world.train_samples() if samples is None else samples
    ac = build_agent(world)
    episodes = world.episodes(samples)
    if c.supervised:
        scfg = SupervisedConfig(c.supervised_samples, c.supervised_threshold, seed=c.seeds.rng)
        metrics = train_supervised(ac, world.env(), episodes, c.episodes, scfg, on_log, c.log_every)
    else:
        sched = Schedule(c.episodes, c.seeds.rng, c.log_every, c.value_bound, c.batch_episodes)
        metrics = train_rl(ac, world.env(), episodes, sched, on_log)
    return ac, metrics


def train_box_refiner(world: World) -> tuple[Refiner, list[float]]:
    c = world.cfg
    scenes = [generate_scene(c.seeds.refiner_scenes + i, c.gen)[0] for i in range(c.refiner_scenes)]
    ref = Refiner.build(world.encoder, seed=c.seeds.net, sigma=c.refiner_sigma)
    losses = train_refiner(ref, scenes, c.refiner_steps, lr=c.refiner_lr, seed=c.seeds.rng)
    return ref, losses


def refinement_gain(world: World, refiner: Refiner, count: int,
                    seed: int = 12345) -> tuple[float, float]:
    """Mean IoU of noisy ground-truth boxes before and after refinement on held-out scenes."""
    rng = np.random.default_rng(seed)
    before, after = [], []
    for s in generate_samples(world.cfg.seeds.eval_scenes, count, world.cfg.gen):
        noisy = noisy_box(s.gt, s.scene.frame, refiner.sigma, rng)
        before.append(iou(noisy, s.gt))
        after.append(iou(refiner.refine(s.scene, noisy)[0], s.gt))
    return float(np.mean(before)), float(np.mean(after))


def train_run(cfg: RunConfig, refiner: Refiner | None = None,
              on_log: Callable[[dict], dict | None] | None = None) -> TrainedRun:
    world = World.build(cfg)
    ac, metrics = train_policy(world, on_log=on_log)
    if refiner is None and not cfg.no_refinement:
        refiner, _ = train_box_refiner(world)
    return TrainedRun(cfg, ac, None if cfg.no_refinement else refiner, metrics)


# ---------------------------------------------------------------------------
# run directories

def save_run(run_dir: str | Path, run: TrainedRun, world: World,
             report: EvalReport | None = None) -> Path:
    """Write config.json, checkpoints/, metrics.jsonl and (optionally) report.json."""
    d = Path(run_dir)
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    (d / "traces").mkdir(exist_ok=True)
    (d / "config.json").write_text(run.cfg.dumps())
    tags = {"config_hash": run.cfg.hash, "vocab_hash": world.vocab_hash}
    save_mlp(d / "checkpoints" / "actor.ckpt", run.ac.actor, **tags)
    save_mlp(d / "checkpoints" / "critic.ckpt", run.ac.critic, **tags)
    if run.refiner is not None:
        save_mlp(d / "checkpoints" / "refiner.ckpt", run.refiner.net, sigma=run.refiner.sigma, **tags)
    write_checkpoint(d / "checkpoints" / "embeddings.ckpt",
                     {"kind": "embeddings", "tokens": list(world.table.tokens),
                      "dim": world.table.dim, **tags}, world.table.vectors.ravel())
    with open(d / "metrics.jsonl", "w") as f:
        for rec in run.metrics:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    if report is not None:
        (d / "report.json").write_text(report.dumps())
    return d


def load_run(run_dir: str | Path) -> tuple[World, TrainedRun]:
    d = Path(run_dir)
    cfg = RunConfig.load(d / "config.json")
    world = World.build(cfg)
    header, vectors = read_checkpoint(d / "checkpoints" / "embeddings.ckpt")
    if header["tokens"] != list(world.table.tokens):
        raise CompatibilityError("embedding checkpoint vocabulary differs from the config's")
    world.table = EmbeddingTable(tuple(header["tokens"]), vectors.reshape(-1, header["dim"]))
    actor, ah = load_mlp(d / "checkpoints" / "actor.ckpt")
    critic, _ = load_mlp(d / "checkpoints" / "critic.ckpt")
    if ah.get("config_hash") != cfg.hash:
        raise CompatibilityError(f"checkpoint config hash {ah.get('config_hash')} != {cfg.hash}")
    ac = ActorCritic(actor, critic, cfg.gamma, cfg.lr_actor, cfg.lr_critic, cfg.optimizer,
                     cfg.entropy_coef, cfg.critic_input)
    refiner = None
    rpath = d / "checkpoints" / "refiner.ckpt"
    if rpath.exists():
        net, rh = load_mlp(rpath)
        refiner = Refiner(net, world.encoder, rh.get("sigma", cfg.refiner_sigma))
    metrics = []
    if (d / "metrics.jsonl").exists():
        metrics = [json.loads(x) for x in (d / "metrics.jsonl").read_text().splitlines() if x]
    return world, TrainedRun(cfg, ac, refiner, metrics)


def checkpoint_vocab(run_dir: str | Path) -> str:
    header, _ = read_checkpoint(Path(run_dir) / "checkpoints" / "actor.ckpt")
    return header.get("vocab_hash", "")


# ---------------------------------------------------------------------------
# ablations

VARIANTS: dict[str, dict[str, bool]] = {
    "default": {},
    "fixed_stride": {"fixed_stride": True},
    "no_multiscale": {"no_multiscale": True},
    "no_spatial": {"no_spatial": True},
    "no_triad": {"no_triad": True},
    "no_refinement": {"no_refinement": True},
    "supervised": {"supervised": True},
    "context_impoverished": {"no_multiscale": True, "no_spatial": True},
}


def run_ablation(cfg: RunConfig, variants: Sequence[str] = tuple(VARIANTS),
                 out_dir: str | Path | None = None,
                 on_log: Callable[[str, dict], None] | None = None,
                 trained: dict[str, ActorCritic] | None = None,
                 refiner: Refiner | None = None) -> dict[str, EvalReport]:
    """Train and evaluate each variant on the shared scenes, seeds and eval split.

    The refiner is trained once and shared; ``no_refinement`` reuses the
    default policy and only skips refinement. ``trained`` may supply policies
    already trained under ``cfg`` (keyed by variant name) and ``refiner`` a
    refiner trained under it.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    base = World.build(cfg)
    train, held_out = base.train_samples(), base.eval_samples()
    if refiner is None and not cfg.no_refinement:
        refiner = train_box_refiner(base)[0]
    policies: dict[str, ActorCritic] = dict(trained or {})
    reports: dict[str, EvalReport] = {}
    for name in variants:
        vcfg = cfg.variant(**VARIANTS[name])
        world = World.build(vcfg)
        key = "default" if name == "no_refinement" else name
        if key not in policies:
            cb = (lambda rec, n=key: on_log(n, rec)) if on_log is not None else None
            policies[key], metrics = train_policy(world, train, cb)
            if out_dir is not None:
                save_run(Path(out_dir) / key, TrainedRun(vcfg, policies[key], refiner, metrics), world)
        ref = None if vcfg.no_refinement else refiner
        reports[name] = evaluate(world, actor_policy(policies[key]), held_out, ref, label=name)
        if out_dir is not None:
            (Path(out_dir) / f"{name}.report.json").write_text(reports[name].dumps())
        log.info("%s: acc %.3f iou %.3f", name, reports[name].acc, reports[name].mean_iou)
    return reports


def ablation_table(reports: dict[str, EvalReport]) -> str:
    rows = [f"{'variant':<22} {'acc@0.5':>8} {'mIoU':>7} {'len':>6} {'rel acc':>8}"]
    for name, r in reports.items():
        rel = r.by_reference.get("relation", {}).get("acc@0.5", float("nan"))
        rows.append(f"{name:<22} {r.acc:8.3f} {r.mean_iou:7.3f} {r.mean_length:6.2f} {rel:8.3f}")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# traces

def record_trace(world: World, policy: Policy, sample: Sample, seed: int = 0) -> EpisodeTrace:
    triads = parse(sample.query.text)
    trace = EpisodeTrace(" ".join(sample.query.text), sample.scene.seed, triads, sample.gt.to_list())
    run_episode(world.env(), policy, sample, world.linguistic(sample.query),
                np.random.default_rng(seed), trace)
    return trace
