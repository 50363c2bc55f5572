"""Acceptance gate: one printed PASS/FAIL line per primary criterion.

The trained-agent criteria share one session-scoped training run of the
curriculum preset, and the ablations share its scenes, seeds and budget.
"""
import time

import numpy as np
import pytest

from shrinkground import harness
from shrinkground.cli import gradient_check
from shrinkground.config import RunConfig, curriculum
from shrinkground.env import EnvConfig, ShrinkEnv, oracle_action, shrink_reward
from shrinkground.geometry import Box, shrink
from shrinkground.query import EmbeddingTable, embed, parse
from shrinkground.scene import GenConfig, PatchEncoder, generate_scene

from test_query import LONG_QUERY, LONG_TRIADS, TABLE1

PRESET = curriculum().variant(episodes=50_000, eval_size=500)


def table_reward(iou_v, delta):
    # independent transcription of the three-level reward
    if iou_v < 0.3 or delta <= 0:
        return 0
    return 1 if iou_v < 0.5 else 10


def test_reward_table_exactness(criterion):
    t = time.perf_counter()
    grid = [(i, d) for i in (0.0, 0.29, 0.3, 0.49, 0.5, 1.0) for d in (-0.1, 0.0, 0.1)]
    mismatches = [(i, d) for i, d in grid if shrink_reward(i, d) != table_reward(i, d)]
    # step() on live transitions must follow the same table in every
    # (IoU band, sign of change) cell; an epsilon-oracle reaches all nine
    env = ShrinkEnv(PatchEncoder())
    table = EmbeddingTable.seeded(3)
    rng = np.random.default_rng(0)
    cells, steps = set(), 0
    for seed in range(30):
        scene, q = generate_scene(seed)
        state = env.reset(scene, scene.object(q.target_id).box, embed(parse(q.text), table))
        while not state.done:
            a = oracle_action(env) if rng.random() < 0.7 else int(rng.integers(5))
            out = env.step(a)
            steps += 1
            cells.add((int(out.iou_after >= 0.3) + int(out.iou_after >= 0.5),
                       int(np.sign(out.delta_iou))))
            if out.reward != table_reward(out.iou_after, out.delta_iou):
                mismatches.append(("step", seed, steps))
            state = out.next_state
    dt = time.perf_counter() - t
    ok = not mismatches and len(cells) == 9 and dt < 1.0
    criterion("reward table exactness", ok,
              f"{len(grid)} grid points + {steps} live steps covering {len(cells)}/9 cells, "
              f"{len(mismatches)} mismatches, {dt:.3f}s")


def test_stride_decay_law(criterion):
    t = time.perf_counter()
    worst = 0.0
    start = Box(3.0, 7.0, 91.0, 64.0)
    for d in ("top", "bottom", "left", "right"):
        p = start
        for k in range(1, 21):
            p = shrink(p, d, 0.2)
            ext, ext0 = (p.h, start.h) if d in ("top", "bottom") else (p.w, start.w)
            worst = max(worst, abs(ext - 0.8 ** k * ext0))
    dt = time.perf_counter() - t
    criterion("stride decay law", worst <= 1e-9 and dt < 1.0,
              f"max |extent - (1-a)^k * extent0| = {worst:.2e} for k <= 20, {dt:.3f}s")


def test_gradient_fidelity(criterion):
    t = time.perf_counter()
    err = max(gradient_check(20, activation="tanh"), gradient_check(20, activation="relu"))
    dt = time.perf_counter() - t
    criterion("gradient fidelity", err < 1e-4 and dt < 30.0,
              f"max relative error {err:.2e} over 20 seeds x (tanh, relu), {dt:.1f}s")


def test_parser_exactness(criterion):
    t = time.perf_counter()
    fixtures_ok = sum(parse(text) == triads for text, triads in TABLE1)
    fixtures_ok += sorted(parse(LONG_QUERY)) == sorted(LONG_TRIADS)
    generated_ok = 0
    for seed in range(10_000):
        _, q = generate_scene(seed)
        generated_ok += tuple(parse(q.text)) == q.gold_triads
    dt = time.perf_counter() - t
    criterion("parser exactness", fixtures_ok == 7 and generated_ok == 10_000 and dt < 10.0,
              f"{fixtures_ok}/7 table fixtures, {generated_ok}/10000 generated queries, {dt:.1f}s")


def test_oracle_shrinkability(criterion):
    t = time.perf_counter()
    world = harness.World.build(RunConfig())
    env = ShrinkEnv(world.encoder, EnvConfig())
    solved = n = seed = 0
    while n < 1000:
        scene, q = generate_scene(700_000 + seed, GenConfig())
        seed += 1
        gt = scene.object(q.target_id).box
        if gt.area / (scene.frame.W * scene.frame.H) < 0.02:
            continue
        n += 1
        sample = harness.Sample(scene, q)
        box, steps = harness.run_episode(env, harness.oracle_policy, sample, world.linguistic(q),
                                         np.random.default_rng(0))
        solved += harness.iou(box, gt) >= 0.5 and steps <= 20
    dt = time.perf_counter() - t
    criterion("oracle shrinkability", solved / n >= 0.95 and dt < 60.0,
              f"{solved}/{n} = {solved / n:.3f} reach IoU >= 0.5 within 20 steps, {dt:.1f}s")


# ---------------------------------------------------------------------------
# trained-agent criteria

@pytest.fixture(scope="session")
def world():
    return harness.World.build(PRESET)


@pytest.fixture(scope="session")
def held_out(world):
    return world.eval_samples()


@pytest.fixture(scope="session")
def default_run(world):
    t = time.perf_counter()
    ac, metrics = harness.train_policy(world)
    return ac, metrics, time.perf_counter() - t


@pytest.fixture(scope="session")
def refiner(world):
    t = time.perf_counter()
    ref, _ = harness.train_box_refiner(world)
    return ref, time.perf_counter() - t


@pytest.fixture(scope="session")
def ablation(world, default_run, refiner):
    variants = ("default", "no_refinement", "fixed_stride", "supervised", "context_impoverished")
    return harness.run_ablation(PRESET, variants, trained={"default": default_run[0]},
                                refiner=refiner[0])


def test_learning_signal(criterion, world, held_out, default_run, refiner):
    ac, _, train_s = default_run
    rl = harness.evaluate(world, harness.actor_policy(ac), held_out, refiner[0], label="rl")
    rnd = harness.evaluate(world, harness.random_policy, held_out, None, label="random")
    ok = rl.acc >= 0.70 and rnd.acc <= 0.10 and train_s <= 20 * 60
    criterion("learning signal", ok,
              f"held-out acc@0.5 {rl.acc:.3f} (need >= 0.70) vs random {rnd.acc:.3f} (need <= 0.10) "
              f"on {rl.n} scenes; {PRESET.episodes} episodes in {train_s / 60:.1f} min")


def test_relation_advantage(criterion, ablation):
    full = ablation["default"].by_reference["relation"]
    poor = ablation["context_impoverished"].by_reference["relation"]
    gap = full["acc@0.5"] - poor["acc@0.5"]
    criterion("relation advantage", gap >= 0.10,
              f"relation-query acc@0.5 default {full['acc@0.5']:.3f} vs no_multiscale+no_spatial "
              f"{poor['acc@0.5']:.3f} (gap {gap:+.3f}, need >= +0.10, n={full['n']})")


def test_ablation_directions(criterion, ablation):
    d = ablation["default"]
    checks = {
        "default > fixed_stride (acc)": (d.acc, ablation["fixed_stride"].acc),
        "default > supervised (acc)": (d.acc, ablation["supervised"].acc),
        "default > no_refinement (mean IoU)": (d.mean_iou, ablation["no_refinement"].mean_iou),
    }
    detail = "; ".join(f"{k}: {a:.3f} vs {b:.3f}" for k, (a, b) in checks.items())
    criterion("ablation directions", all(a > b for a, b in checks.values()), detail)


def test_refinement_sanity(criterion, world, refiner):
    ref, train_s = refiner
    before, after = harness.refinement_gain(world, ref, 500)
    gain = after - before
    criterion("refinement sanity", gain >= 0.05 and train_s < 300,
              f"mean IoU on sigma=5 noisy boxes {before:.3f} -> {after:.3f} (gain {gain:+.3f}, "
              f"need >= +0.05); trained in {train_s:.0f}s")


def test_reproducibility(criterion):
    cfg = PRESET.variant(episodes=1500, eval_size=100, refiner_scenes=200, refiner_steps=300)
    dumps = []
    for _ in range(2):
        run = harness.train_run(cfg)
        w = harness.World.build(cfg)
        dumps.append(harness.evaluate(w, harness.actor_policy(run.ac), w.eval_samples(),
                                      run.refiner).dumps())
    criterion("reproducibility", dumps[0] == dumps[1],
              f"two runs of config {cfg.hash}: reports {'byte-identical' if dumps[0] == dumps[1] else 'differ'}"
              f" ({len(dumps[0])} bytes)")
