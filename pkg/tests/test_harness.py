import csv
import json

import numpy as np
import pytest

from pwm.data import TrajectoryDataset
from pwm.envs import make_registry
from pwm.harness import cli, io, metrics, recipes
from pwm.harness.collect import BehaviorSchedule, collect_dataset, rollout_episodes
from pwm.harness.config import DEFAULTS, ConfigError, dump, parse_text, resolve
from pwm.policy import PwmConfig

# small world model and short runs for command-line tests
SMALL_WM = ["wm.latent_dim=16", "wm.simplex_dim=4", "wm.task_dim=4", "wm.enc_hidden=[16]", "wm.dyn_hidden=[16]",
            "wm.rew_hidden=[16]", "wm.batch_size=8", "wm.horizon=4"]
SMALL_POLICY = ["policy.actor_hidden=[16]", "policy.critic_hidden=[16]", "policy.batch_size=8", "policy.horizon=4",
                "policy.eval_every=0", "eval.episodes=4"]


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _overrides(items):
    return [x for item in items for x in ("--override", item)]


def _tiny_dataset(episodes=3, T=6, obs_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    done = np.zeros((episodes, T), np.float32)
    done[:, -1] = 1
    return TrajectoryDataset(rng.standard_normal((episodes, T + 1, obs_dim)).astype(np.float32),
                             rng.uniform(-1, 1, (episodes, T, 1)).astype(np.float32),
                             rng.standard_normal((episodes, T)).astype(np.float32), done,
                             np.zeros(episodes, np.int64), dict(source="test"))


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.0": rng.standard_normal((3, 4)).astype(np.float32), "a.1": np.arange(5)}
    state = np.random.default_rng(7).bit_generator.state
    io.save_checkpoint(tmp_path / "x.pwmc", "actor", arrays, dict(lr=1e-3, dims=[3, 4]), state)
    tag, back, conf, rng_state = io.load_checkpoint(tmp_path / "x.pwmc")
    assert tag == "actor" and conf == dict(lr=1e-3, dims=[3, 4])
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    io.save_checkpoint(tmp_path / "y.pwmc", tag, back, conf, rng_state)
    assert (tmp_path / "x.pwmc").read_bytes() == (tmp_path / "y.pwmc").read_bytes()
    # the stored generator state resumes the same stream
    g = np.random.default_rng()
    g.bit_generator.state = rng_state
    assert g.random() == np.random.default_rng(7).random()


def test_checkpoint_rejects_unknown_tags_and_corrupt_files(tmp_path):
    with pytest.raises(ValueError):
        io.save_checkpoint(tmp_path / "x.pwmc", "optimizer", {})
    io.save_checkpoint(tmp_path / "x.pwmc", "wm", {"w": np.ones((8, 8), np.float32)})
    raw = (tmp_path / "x.pwmc").read_bytes()
    for name, blob in [("magic", b"XXXX" + raw[4:]), ("version", raw[:4] + b"\x09" + raw[5:]),
                       ("truncated", raw[:-10])]:
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(io.FormatError):
            io.load_checkpoint(tmp_path / name)
    with pytest.raises(io.FormatError):
        io.load_dataset(tmp_path / "x.pwmc")


def test_dataset_round_trip_is_bitwise(tmp_path):
    data = _tiny_dataset()
    io.save_dataset(tmp_path / "d.pwmd", data)
    back = io.load_dataset(tmp_path / "d.pwmd")
    for name in ("obs", "act", "rew", "done", "task"):
        a, b = getattr(data, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert back.meta == data.meta
    io.save_dataset(tmp_path / "e.pwmd", back)
    assert (tmp_path / "d.pwmd").read_bytes() == (tmp_path / "e.pwmd").read_bytes()


def test_arrays_are_stored_little_endian_float32(tmp_path):
    io.save_checkpoint(tmp_path / "x.pwmc", "wm", {"w": np.array([1.5], np.float64)})
    assert (tmp_path / "x.pwmc").read_bytes()[-4:] == np.array([1.5], "<f4").tobytes()


def test_named_arrays_reject_shape_mismatch():
    from pwm.diffcore import Tensor
    params = [Tensor(np.zeros((2, 3)), requires_grad=True)]
    with pytest.raises(io.FormatError):
        io.load_named(params, {"p.0": np.zeros((3, 2))})


# ---------------------------------------------------------------------------
# configuration


def test_config_three_layer_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# file layer\nwm.lr = 1e-3\npolicy.steps = 50\n\ntasks = [\"acrobot\"]\n")
    cfg = resolve(f, ["policy.steps=7"])
    assert cfg["wm.lr"] == 1e-3  # file beats default
    assert cfg["policy.steps"] == 7  # override beats file
    assert cfg["tasks"] == ["acrobot"]
    assert cfg["wm.steps"] == DEFAULTS["wm.steps"]  # untouched default


def test_config_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="wm.learning_rate"):
        resolve(None, ["wm.learning_rate=1"])
    f = tmp_path / "bad.cfg"
    f.write_text("policy.stepz = 3\n")
    with pytest.raises(ConfigError, match="policy.stepz"):
        resolve(f)


@pytest.mark.parametrize("item", ["wm.lr=fast", "seeds=[]", "policy.model=oracle", "data.path=/no/such/file",
                                  "wm.steps"])
def test_config_rejects_bad_values(item):
    with pytest.raises(ConfigError):
        resolve(None, [item])


def test_bare_words_keep_their_spelling_for_string_keys():
    cfg = resolve(None, ["policy.model=true", "env.acrobot_init=3"])
    assert cfg["policy.model"] == "true" and cfg["env.acrobot_init"] == "3"


def test_config_dump_parses_back():
    cfg = resolve(None, ["tasks=[\"acrobot\", \"pendulum-swingup\"]", "wm.lr=0.001"])
    assert parse_text(dump(cfg)) == cfg
    with pytest.raises(ConfigError):
        parse_text("no equals sign here")


# ---------------------------------------------------------------------------
# metrics


def test_empty_log_gives_header_only_csv(tmp_path):
    metrics.write_csv(tmp_path / "m.csv", [])
    assert (tmp_path / "m.csv").read_text() == ",".join(metrics.TRAIN_COLUMNS) + "\n"


def test_csv_leaves_absent_fields_empty(tmp_path):
    metrics.write_csv(tmp_path / "m.csv", [dict(step=3, loss=0.5)])
    row = metrics.read_csv(tmp_path / "m.csv")[0]
    assert row["step"] == "3" and float(row["loss"]) == 0.5 and row["critic_loss"] == ""


def test_summary_json_round_trip(tmp_path):
    s = metrics.summarize(np.arange(1, 11))
    assert s["iqm"] == 5.5 and s["n"] == 10 and s["median"] == 5.5
    metrics.write_summary(tmp_path / "s.json", s)
    assert metrics.read_summary(tmp_path / "s.json") == s
    assert metrics.summarize([])["iqm"] is None


# ---------------------------------------------------------------------------
# data collection


def test_single_random_episode_has_a_consistent_manifest(tmp_path):
    reg = make_registry(["pendulum-swingup"])
    data = collect_dataset(reg.get(0), reg, 1, np.random.default_rng(0), BehaviorSchedule(random_fraction=1.0))
    assert data.num_episodes == 1 and data.meta["random_episodes"] == 1 and data.meta["checkpoint_steps"] == []
    io.save_dataset(tmp_path / "d.pwmd", data)
    back = io.load_dataset(tmp_path / "d.pwmd")
    assert back.num_episodes == 1 and back.episode_length == reg.get(0).episode_length
    assert back.meta["episodes"] == 1
    with pytest.raises(ValueError):
        collect_dataset(reg.get(0), reg, 0, np.random.default_rng(0))


def test_default_schedule_spans_far_more_than_random_play():
    """Mixed-quality returns cover at least three times the spread of random-policy returns."""
    reg = make_registry(["pendulum-swingup"])
    task = reg.get(0)
    mixed = collect_dataset(task, reg, 60, np.random.default_rng(0), BehaviorSchedule(),
                            PwmConfig(eval_every=0))
    assert mixed.meta["random_episodes"] == 18
    random = rollout_episodes(task, reg, 60, np.random.default_rng(1)).episode_returns()
    q1, q3 = np.percentile(random, [25, 75])
    r = mixed.episode_returns()
    assert r.max() - r.min() >= 3 * (q3 - q1)
    # trained snapshots reach returns above anything random play achieves
    assert r.max() > random.max()


# ---------------------------------------------------------------------------
# command line


def test_unknown_subcommand_or_flag_exits_1(capsys, tmp_path):
    code, _, err = _run(capsys, "fly", "--out", tmp_path)
    assert code == 1 and "usage" in err
    code, _, err = _run(capsys, "ballwall", "--colour", "red")
    assert code == 1 and "usage" in err
    code, _, _ = _run(capsys, "ballwall", "--steps", 5, "--out", tmp_path)
    assert code == 1


def test_invalid_config_key_exits_1_naming_the_key(capsys, tmp_path):
    code, _, err = _run(capsys, "train-wm", "--out", tmp_path, "--override", "wm.nonsense=3")
    assert code == 1 and "wm.nonsense" in err


def test_ballwall_writes_landscape_and_gaps(capsys, tmp_path):
    code, out, _ = _run(capsys, "ballwall", "--seed", 0, "--out", tmp_path)
    assert code == 0
    for name in ("landscape.csv", "gaps.csv", "config.txt", "metrics.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "landscape.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == DEFAULTS["ballwall.grid_points"]
    assert set(rows[0]) == {"theta", "true", "surrogate_relu", "surrogate_simnorm"}
    assert "PASS" in out or "FAIL" in out


def test_out_dir_defaults_to_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("PWM_OUT_DIR", str(tmp_path / "env-out"))
    code, _, _ = _run(capsys, "collect-data", "--override", "data.episodes=1", "--override", "data.random_fraction=1")
    assert code == 0
    assert (tmp_path / "env-out" / "dataset.pwmd").exists()
    assert (tmp_path / "env-out" / "config.txt").exists()


def test_collect_data_writes_dataset_and_per_episode_metrics(capsys, tmp_path):
    code, _, _ = _run(capsys, "collect-data", "--out", tmp_path, *_overrides(["data.episodes=2",
                                                                             "data.random_fraction=1"]))
    assert code == 0
    data = io.load_dataset(tmp_path / "dataset.pwmd")
    rows = metrics.read_csv(tmp_path / "metrics.csv")
    assert len(rows) == data.num_episodes == 2
    np.testing.assert_allclose([float(r["episode_return"]) for r in rows], data.episode_returns(), rtol=1e-6)
    cfg = parse_text((tmp_path / "config.txt").read_text())
    assert cfg["data.episodes"] == 2


def test_train_policy_with_zero_steps_reproduces_its_input_checkpoint(capsys, tmp_path):
    base = ["--steps", 0, *_overrides(["policy.model=true", *SMALL_POLICY])]
    code, _, _ = _run(capsys, "train-policy", "--out", tmp_path / "a", *base)
    assert code == 0
    first = tmp_path / "a" / "actor.pwmc"
    code, _, _ = _run(capsys, "train-policy", "--out", tmp_path / "b", *base,
                      "--override", f"policy.checkpoint={first}")
    assert code == 0
    assert first.read_bytes() == (tmp_path / "b" / "actor.pwmc").read_bytes()
    assert metrics.read_csv(tmp_path / "b" / "metrics.csv") == []
    tag, _, conf, _ = io.load_checkpoint(tmp_path / "b" / "critic.pwmc")
    assert tag == "critic" and conf["task"] == "pendulum-swingup"


def test_train_wm_then_policy_then_eval(capsys, tmp_path):
    code, _, _ = _run(capsys, "collect-data", "--out", tmp_path / "data",
                      *_overrides(["data.episodes=3", "data.random_fraction=1"]))
    assert code == 0
    dpath = tmp_path / "data" / "dataset.pwmd"
    code, _, _ = _run(capsys, "train-wm", "--out", tmp_path / "wm", "--steps", 5,
                      *_overrides([f"data.path={dpath}", *SMALL_WM]))
    assert code == 0
    rows = metrics.read_csv(tmp_path / "wm" / "metrics.csv")
    assert len(rows) == 5 and all(float(r["loss"]) > 0 for r in rows)
    wpath = tmp_path / "wm" / "wm.pwmc"
    code, _, _ = _run(capsys, "train-policy", "--out", tmp_path / "pol", "--steps", 3,
                      *_overrides([f"data.path={dpath}", f"wm.checkpoint={wpath}", *SMALL_POLICY]))
    assert code == 0
    assert len(metrics.read_csv(tmp_path / "pol" / "metrics.csv")) == 3
    code, out, _ = _run(capsys, "eval", "--out", tmp_path / "ev",
                        *_overrides([f"wm.checkpoint={wpath}", f"policy.checkpoint={tmp_path / 'pol' / 'actor.pwmc'}",
                                     *SMALL_POLICY]))
    assert code == 0 and "pendulum-swingup" in out
    summary = metrics.read_summary(tmp_path / "ev" / "summary.json")
    assert summary["n"] == 4
    assert len(metrics.read_csv(tmp_path / "ev" / "metrics.csv")) == 4
    # a world-model checkpoint is not an actor checkpoint
    code, _, err = _run(capsys, "eval", "--out", tmp_path / "ev2",
                        *_overrides([f"wm.checkpoint={wpath}", f"policy.checkpoint={wpath}", *SMALL_POLICY]))
    assert code == 1 and "expected 'actor'" in err


def test_eval_without_a_policy_is_a_config_error(capsys, tmp_path):
    code, _, err = _run(capsys, "eval", "--out", tmp_path, "--override", "policy.model=true")
    assert code == 1 and "policy.checkpoint" in err


def test_non_finite_data_exits_2(capsys, tmp_path):
    data = _tiny_dataset()
    data.obs[:] = np.nan
    io.save_dataset(tmp_path / "nan.pwmd", data)
    code, _, err = _run(capsys, "train-wm", "--out", tmp_path / "run", "--steps", 3,
                        *_overrides([f"data.path={tmp_path / 'nan.pwmd'}", *SMALL_WM]))
    assert code == 2 and "numerical" in err


def test_reproduce_names_the_failing_criterion(capsys, tmp_path, monkeypatch):
    def fake(cfg, out=None, cache=None):
        return recipes.Report("fake", checks=[recipes.Check("ordering holds", True, "ok"),
                                              recipes.Check("gap shrinks", False, "3 vs 1")],
                              tables={"t": (("a",), [dict(a=1)])})

    monkeypatch.setitem(recipes.RECIPES, "fig3", fake)
    code, out, err = _run(capsys, "reproduce", "fig3", "--out", tmp_path)
    assert code == 2
    assert "criterion failed: gap shrinks" in err and "ordering holds" not in err
    assert "FAIL  gap shrinks" in out
    monkeypatch.setitem(recipes.RECIPES, "fig3", lambda cfg, out=None, cache=None: recipes.Report(
        "ok", checks=[recipes.Check("fine", True, "")], tables={"t": (("a",), [])}))
    assert _run(capsys, "reproduce", "fig3", "--out", tmp_path)[0] == 0


# ---------------------------------------------------------------------------
# determinism


def _strip_clock(path):
    return [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in metrics.read_csv(path)]


def test_same_config_and_seed_give_identical_metrics(capsys, tmp_path):
    data = _tiny_dataset(episodes=4, T=10)
    io.save_dataset(tmp_path / "d.pwmd", data)
    args = ["--steps", 6, "--seed", 3, *_overrides([f"data.path={tmp_path / 'd.pwmd'}", *SMALL_WM])]
    for run in ("a", "b"):
        assert _run(capsys, "train-wm", "--out", tmp_path / run, *args)[0] == 0
    assert _strip_clock(tmp_path / "a" / "metrics.csv") == _strip_clock(tmp_path / "b" / "metrics.csv")
    assert (tmp_path / "a" / "wm.pwmc").read_bytes() == (tmp_path / "b" / "wm.pwmc").read_bytes()
    # a different seed changes the run
    assert _run(capsys, "train-wm", "--out", tmp_path / "c", *args, "--seed", 4)[0] == 0
    assert _strip_clock(tmp_path / "c" / "metrics.csv") != _strip_clock(tmp_path / "a" / "metrics.csv")


def test_policy_training_is_deterministic(capsys, tmp_path):
    args = ["--steps", 4, *_overrides(["policy.model=true", *SMALL_POLICY, "policy.eval_every=2"])]
    for run in ("a", "b"):
        assert _run(capsys, "train-policy", "--out", tmp_path / run, *args)[0] == 0
    a, b = _strip_clock(tmp_path / "a" / "metrics.csv"), _strip_clock(tmp_path / "b" / "metrics.csv")
    assert a == b and any(r["eval_reward_mean"] for r in a)
    assert (tmp_path / "a" / "actor.pwmc").read_bytes() == (tmp_path / "b" / "actor.pwmc").read_bytes()


def test_artifact_cache_persists_and_reloads(tmp_path):
    cache = recipes.ArtifactCache(tmp_path)
    calls = []

    def build():
        calls.append(1)
        return _tiny_dataset()

    a = cache.dataset(dict(x=1), build)
    b = recipes.ArtifactCache(tmp_path).dataset(dict(x=1), build)
    assert len(calls) == 1
    assert a.obs.tobytes() == b.obs.tobytes()
    assert json.loads(json.dumps(b.meta)) == a.meta
