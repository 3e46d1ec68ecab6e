import csv
import json
import math

import numpy as np
import pytest

from baltaml.trainer import (
    METRICS_HEADER,
    Adam,
    CheckpointError,
    ConfigError,
    MetricsWriter,
    TrainConfig,
    ablation_sweep,
    build_model,
    build_pools,
    ci95,
    evaluate,
    load_checkpoint,
    load_config,
    meta_train,
    omega_tail_gap,
    parse_axes,
    save_checkpoint,
)

TINY = {
    "dist": {"n_classes": 3, "shot_range": [1, 4], "queries_per_class": 2},
    "variant": {"inner_steps_train": 1, "inner_steps_test": 2, "mc_test": 2},
    "arch": [8],
    "family_params": {"dim": 3},
    "encoder": {"nn1": [6], "nn2": [6], "head_hidden": 5},
    "total_iters": 6,
    "eval_every": 2,
    "val_episodes": 4,
    "meta_batch": 2,
}


def tiny(**over):
    d = json.loads(json.dumps(TINY))
    d.update(over)
    return TrainConfig.from_dict(d)


@pytest.fixture(scope="module")
def trained():
    return meta_train(tiny())


def test_unknown_keys_are_errors(tmp_path):
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig.from_dict({"lr": 0.1})
    with pytest.raises(ConfigError, match="inner"):
        TrainConfig.from_dict({"variant": {"inner": 3}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"outer_optimizer": {"momentum": 0.9}})
    p = tmp_path / "c.json"
    p.write_text('{"seed": 1,, }', encoding="utf-8")
    with pytest.raises(ConfigError, match="offset 11"):
        load_config(p)


def test_config_round_trips_through_json():
    c = tiny(seed=4)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_adam_matches_hand_computation():
    opt = Adam(0.1)
    out = opt.step({"w": np.array([1.0])}, {"w": np.array([0.5])})
    # first bias-corrected step is lr * g / |g|
    np.testing.assert_allclose(out["w"], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), atol=1e-15)
    opt = Adam(0.1)
    assert np.array_equal(opt.step({"w": np.array([2.0])}, {"w": np.zeros(1)})["w"], [2.0])


def test_zero_iterations_returns_initialization():
    ck = meta_train(tiny(total_iters=0)).best
    params, psi = build_model(ck.config, 3)
    for k, t in params.named() + [("psi." + k, t) for k, t in psi.named()]:
        assert np.array_equal(ck.values[k], t.value)
    assert ck.iteration == 0 and ck.trace == []


def test_same_seed_same_trace(trained):
    again = meta_train(tiny())
    assert again.last.trace == trained.last.trace
    assert again.last.val_trace == trained.last.val_trace
    other = meta_train(tiny(seed=1))
    assert other.last.trace != trained.last.trace


def test_resume_matches_uninterrupted(trained, tmp_path):
    part = meta_train(tiny(), out_dir=tmp_path, stop_at=3).last
    save_checkpoint(part, tmp_path / "mid.json")
    resumed = meta_train(tiny(), resume=load_checkpoint(tmp_path / "mid.json")).last
    assert resumed.trace == trained.last.trace
    for k, v in trained.last.values.items():
        assert np.array_equal(resumed.values[k], v)


def test_checkpoint_round_trip_is_byte_identical(trained, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(trained.best, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_corrupt_and_foreign_checkpoints(trained, tmp_path):
    p = tmp_path / "c.json"
    save_checkpoint(trained.best, p)
    p.write_text(p.read_text(encoding="utf-8")[:500], encoding="utf-8")
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(p)
    d = json.loads(json.dumps({"format_version": 99}))
    p.write_text(json.dumps(d), encoding="utf-8")
    with pytest.raises(CheckpointError, match="99.*1"):
        load_checkpoint(p)


def test_ci_formula():
    v = [0.2, 0.4, 0.6, 0.8]
    assert abs(ci95(v) - 1.96 * np.std(v) / 2) < 1e-15
    assert ci95([0.5] * 10) == 0.0


def test_perfect_predictor_scores_one(trained):
    pool = build_pools(trained.best.config)["test"]
    oracle = lambda ep: np.eye(ep.n_classes)[ep.query_y]
    rep = evaluate(trained.best, pool, 5, predictor=oracle)
    assert rep.mean_accuracy == 1.0 and rep.ci95 == 0.0 and rep.n_skipped == 0


def test_skipped_episodes_are_counted(trained):
    from baltaml.taml import DivergenceError

    pool = build_pools(trained.best.config)["test"]
    calls = []

    def flaky(ep):
        calls.append(1)
        if len(calls) % 2:
            raise DivergenceError(1, float("inf"))
        return np.full((ep.n_query, ep.n_classes), 1.0 / ep.n_classes)

    rep = evaluate(trained.best, pool, 6, predictor=flaky)
    assert rep.n_skipped == 3 and len(rep.accuracies) == 3 and rep.n_requested == 6


def test_evaluate_reports_balancing(trained):
    pool = build_pools(trained.best.config)["test"]
    rep = evaluate(trained.best, pool, 4, "mc", 2, n_displacement=2)
    assert len(rep.gamma_mean) == 2 and len(rep.displacement) == 2
    assert len(rep.omega_vs_count) == 12
    assert set(rep.scalars()) >= {"mean_accuracy", "ci95", "omega_small_minus_large", "d_mean_first"}


def test_omega_tail_gap():
    pairs = [(0, 1, 0.5), (0, 5, 0.2), (0, 3, 0.3), (1, 2, 0.4), (1, 2, 0.6), (2, 9, 0.1), (2, 1, 0.9)]
    # episode 1 has equal counts and is ignored
    assert abs(omega_tail_gap(pairs) - ((0.5 - 0.2) + (0.9 - 0.1)) / 2) < 1e-15
    assert math.isnan(omega_tail_gap([]))


def test_parse_axes():
    assert parse_axes("") == {}
    assert parse_axes("variant=full|z; mc_test=1|10;deterministic=true") == {
        "variant": ["full", "z"], "mc_test": [1, 10], "deterministic": [True]
    }
    with pytest.raises(ConfigError):
        parse_axes("depth=3")
    with pytest.raises(ConfigError):
        parse_axes("variant=giant")


def test_empty_axes_give_one_baseline_row(tmp_path):
    rows = ablation_sweep(tiny(total_iters=2), {}, tmp_path, eval_episodes=2)
    assert len(rows) == 1 and rows[0]["cell"] == "baseline" and rows[0]["status"] == "ok"
    with open(tmp_path / "metrics.csv", newline="") as fh:
        r = list(csv.reader(fh))
    assert tuple(r[0]) == METRICS_HEADER == ("run_id", "seed", "cell", "iter", "split", "metric", "value")
    assert {row[4] for row in r[1:]} == {"test", "ood"}


def test_failing_cell_is_recorded(tmp_path):
    rows = ablation_sweep(tiny(total_iters=2), {"variant": ["maml", "z"], "mc_test": [0]}, tmp_path, eval_episodes=2)
    assert len(rows) == 2 and all(r["status"].startswith("error") for r in rows)


def test_metrics_writer_appends_once_headed(tmp_path):
    p = tmp_path / "m.csv"
    for _ in range(2):
        w = MetricsWriter(p, "r")
        w.write(0, "c", 1, "train", "loss", 0.5)
        w.close()
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 3
