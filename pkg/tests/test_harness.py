import json

import numpy as np
import pytest

from shrinkground import harness
from shrinkground.agent import Refiner
from shrinkground.cli import gradient_check, main
from shrinkground.config import ConfigError, RunConfig, curriculum
from shrinkground.env import Action, EpisodeTrace
from shrinkground.geometry import Box
from shrinkground.svg import render_frame

TINY = curriculum().variant(episodes=3, train_pool=3, eval_size=6, log_every=3,
                            refiner_scenes=4, refiner_steps=5)


@pytest.fixture(scope="module")
def world():
    return harness.World.build(TINY)


def test_dataset_round_trip_bytes(tmp_path, world):
    samples = harness.generate_samples(7, 25, TINY.gen)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    harness.write_dataset(a, samples, world.vocab_hash)
    back = harness.read_dataset(a, vocab_hash=world.vocab_hash)
    harness.write_dataset(b, back, world.vocab_hash)
    assert a.read_bytes() == b.read_bytes()
    assert back == samples


def test_dataset_vocab_mismatch(tmp_path, world):
    p = tmp_path / "d.jsonl"
    harness.write_dataset(p, harness.generate_samples(0, 2, TINY.gen), "deadbeef")
    with pytest.raises(harness.CompatibilityError):
        harness.read_dataset(p, vocab_hash=world.vocab_hash)


def test_vocab_hash_tracks_embedding_seed(world):
    other = harness.World.build(TINY.variant(seeds=type(TINY.seeds)(embedding=99)))
    assert other.vocab_hash != world.vocab_hash


def test_oracle_and_random_reports(world):
    samples = world.eval_samples()
    oracle = harness.evaluate(world, harness.oracle_policy, samples)
    rnd = harness.evaluate(world, harness.random_policy, samples)
    assert oracle.acc == 1.0
    assert 0.0 <= rnd.acc <= 1.0
    assert sum(g["n"] for g in oracle.by_kind.values()) == len(samples)
    assert sum(g["n"] for g in oracle.by_reference.values()) == len(samples)
    assert rnd.dumps() == harness.evaluate(world, harness.random_policy, samples).dumps()


def test_iou_exactly_half_is_incorrect(world):
    g = harness.Group()
    g.add(0.5)
    g.add(0.5000001)
    assert g.to_json()["acc@0.5"] == 0.5


def test_variants_share_eval_split():
    a = harness.World.build(TINY).eval_samples()
    b = harness.World.build(TINY.variant(fixed_stride=True, no_triad=True)).eval_samples()
    assert a == b


def test_no_triad_feature_width(world):
    w2 = harness.World.build(TINY.variant(no_triad=True))
    q = world.eval_samples()[0].query
    assert w2.linguistic(q).shape == world.linguistic(q).shape


def test_run_dir_round_trip(tmp_path, world):
    run = harness.train_run(TINY)
    rep = harness.evaluate(world, harness.actor_policy(run.ac), world.eval_samples(), run.refiner)
    harness.save_run(tmp_path, run, world, rep)
    for name in ("config.json", "metrics.jsonl", "report.json", "checkpoints/actor.ckpt",
                 "checkpoints/critic.ckpt", "checkpoints/refiner.ckpt", "checkpoints/embeddings.ckpt"):
        assert (tmp_path / name).exists(), name
    w2, run2 = harness.load_run(tmp_path)
    rep2 = harness.evaluate(w2, harness.actor_policy(run2.ac), w2.eval_samples(), run2.refiner)
    assert rep2.dumps() == rep.dumps()


def test_load_run_rejects_config_hash_mismatch(tmp_path, world):
    run = harness.train_run(TINY.variant(no_refinement=True))
    harness.save_run(tmp_path, run, world)
    (tmp_path / "config.json").write_text(TINY.variant(gamma=0.5).dumps())
    with pytest.raises(harness.CompatibilityError):
        harness.load_run(tmp_path)


def test_ablation_runs_all_variants():
    reports = harness.run_ablation(TINY)
    assert set(reports) == set(harness.VARIANTS)
    assert not reports["no_refinement"].refined and reports["default"].refined
    assert "variant" in harness.ablation_table(reports)


def test_trace_flags_and_svg(world):
    sample = world.eval_samples()[0]
    trace = harness.record_trace(world, harness.oracle_policy, sample)
    assert trace.steps[0]["action"] is None
    for prev, cur in zip(trace.steps, trace.steps[1:]):
        assert all(c <= p for p, c in zip(prev["triad_active"], cur["triad_active"]))
    svg = render_frame(trace, sample.scene, len(trace.steps) - 1)
    assert svg.startswith("<svg") and svg.count("<rect") == len(sample.scene.objects) + 3
    assert EpisodeTrace.from_json(json.loads(json.dumps(trace.to_json()))).to_json() == trace.to_json()


def test_inactive_triad_drawn_gray():
    from shrinkground.scene import Scene, SceneObject
    from shrinkground.geometry import ImageFrame
    scene = Scene(ImageFrame(100, 100), (SceneObject(0, "cat", frozenset(), Box(10, 10, 30, 30)),), 0)
    trace = EpisodeTrace("cat", 0, [("cat", "shelf", "above")], [10, 10, 30, 30],
                         [{"patch": [0, 0, 100, 100], "action": "SHRINK_TOP", "reward": 0.0,
                           "triad_active": [False]}], [0, 0, 100, 100])
    assert 'fill="#aaaaaa">(cat, shelf, above)' in render_frame(trace, scene, 0)


# -- cli ---------------------------------------------------------------------

def test_cli_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-data", "--seed", "7", "--count", "50", "--out", str(a)]) == 0
    assert main(["gen-data", "--seed", "7", "--count", "50", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 50


def test_cli_usage_errors(capsys):
    assert main(["no-such-command"]) == 1
    assert main(["gen-data", "--bogus"]) == 1
    assert main([]) == 1


def test_cli_validation_errors(tmp_path, capsys):
    assert main(["parse-query", "cat above"]) == 2
    assert main(["gen-data", "--seed", "1", "--count", "1", "--out", str(tmp_path / "x"),
                 "--set", "alpha=1.5"]) == 2
    assert main(["gen-data", "--seed", "1", "--count", "1", "--out", str(tmp_path / "x"),
                 "--set", "nonsense=1"]) == 2


def test_cli_parse_query(capsys):
    assert main(["parse-query", "cat above a shelf"]) == 0
    assert json.loads(capsys.readouterr().out) == ["cat", "shelf", "above"]


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "1", "--tol", "0"]) == 3


def test_cli_train_eval_trace(tmp_path, capsys):
    run = tmp_path / "run"
    sets = ["--set", "episodes=2", "--set", "train_pool=2", "--set", "eval_size=3",
            "--set", "refiner_scenes=2", "--set", "refiner_steps=2"]
    assert main(["train", "--run-dir", str(run), *sets]) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["n"] == 3
    assert main(["eval", "--run-dir", str(run), "--out", str(tmp_path / "r.json")]) == 0
    assert main(["eval", "--policy", "oracle", *sets]) == 0
    assert main(["eval"]) == 1
    assert main(["trace", "--checkpoint", str(run), "--scene-id", "1"]) == 0
    frames = sorted((run / "traces" / "scene_1").glob("*.svg"))
    assert frames and (run / "traces" / "scene_1" / "trace.json").exists()
    assert main(["refine-train", "--run-dir", str(run), *sets]) == 0


def test_config_round_trip_and_errors(tmp_path):
    cfg = curriculum()
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    assert RunConfig.load(p) == cfg and RunConfig.load(p).hash == cfg.hash
    with pytest.raises(ConfigError):
        RunConfig.from_json({"alpha": 0.0})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"gen": {"bogus": 1}})


def test_gradient_check_helper():
    assert gradient_check(2) < 1e-4
    assert gradient_check(2, activation="relu") < 1e-4
