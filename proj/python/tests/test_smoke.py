import json
import math

import pytest

import armtrig


def test_version():
    assert armtrig.__version__ == "0.1.0"


def test_forward_kinematics_straight_arm():
    geom = armtrig.ArmGeometry()
    pts = armtrig.forward_kinematics([0.0] * 6, geom)
    assert len(pts) == 7
    assert pts[-1][0] == pytest.approx(geom.base_position[0] + sum(geom.link_lengths), abs=1e-12)
    assert pts[-1][1] == pytest.approx(geom.base_position[1], abs=1e-12)


def test_binomial_closed_form():
    assert armtrig.binom_neg_log10_p(20, 20, 0.02) == pytest.approx(20 * -math.log10(0.02), abs=1e-3)
    assert armtrig.binom_neg_log10_p(0, 20, 0.02) == 0.0


def test_collect_poison_and_roundtrip(tmp_path):
    task = armtrig.TaskSpec(armtrig.TaskId.PickPlace)
    data = armtrig.collect(task, 4, seed=5)
    assert len(data) == 4 and data.poisoned_count == 0
    poisoned = armtrig.poison(data, [0.1, -0.1, 0.1, 0.0, 0.0, 0.0], rate=0.5, seed=1, task=task)
    assert poisoned.poisoned_count == 2
    for i in range(len(data)):
        if not poisoned.episode_poisoned(i):
            assert poisoned.episode_actions(i) == data.episode_actions(i)
        else:
            neg = [[-x for x in a] for a in data.episode_actions(i)]
            assert poisoned.episode_actions(i) == neg
    path = tmp_path / "d.ndjson"
    armtrig.save_dataset(poisoned, path)
    assert armtrig.load_dataset(path) == poisoned


def test_train_and_evaluate_shapes(tmp_path):
    task = armtrig.TaskSpec(armtrig.TaskId.PickPlace)
    data = armtrig.collect(task, 3, seed=2)
    p0 = armtrig.init_policy(seed=1)
    p1, loss = armtrig.train(p0, data, 20, seed=3)
    assert math.isfinite(loss) and p1.num_parameters == p0.num_parameters
    armtrig.save_checkpoint(p1, tmp_path / "m.ckpt")
    assert armtrig.load_checkpoint(tmp_path / "m.ckpt") == p1
    r = armtrig.evaluate(p1, task, n_trials=2)
    assert r["asr"] is None and 0.0 <= r["sr"] <= 1.0
    r = armtrig.evaluate(p1, task, n_trials=2, trigger=[0.1] * 6)
    assert 0.0 <= r["asr"] <= 1.0


def test_pga_on_python_objective():
    target = [0.1, -0.1, 0.05, 0.0, 0.0, 0.0]

    def terms(t):
        return sum((a - b) ** 2 for a, b in zip(t, target)), 0.0

    res = armtrig.pga_search(terms, generations=30, seed=4)
    best = [r["best_objective"] for r in res["trace"]]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert res["score"]["objective"] < 1e-2
    assert res["score"]["f3"] == pytest.approx(armtrig.eval_f3(res["trigger"]))


def test_config_strict_keys():
    text = json.dumps({"master_seed": 1, "search": {"population": 10}})
    cfg = json.loads(armtrig.config_json(text))
    assert cfg["search"]["population"] == 10 and cfg["search"]["elite"] == 2
    with pytest.raises(armtrig.ConfigError):
        armtrig.config_json(json.dumps({"master_seed": 1, "serach": {}}))
    over = armtrig.apply_override(text, "poison.rate=0.2")
    assert json.loads(armtrig.config_json(over))["poison"]["rate"] == 0.2


def test_gen_data_stage(tmp_path):
    text = json.dumps({"master_seed": 3, "output_dir": str(tmp_path), "data": {"n_episodes": 10},
                       "search": {"search_episodes": 10}})
    armtrig.run_stage("gen-data", text)
    assert len(armtrig.load_dataset(tmp_path / "data" / "clean.ndjson")) == 10
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["gen-data"]["artifacts"] == ["data/clean.ndjson"]
