import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdreamer.errors import DimensionError, DomainError, FormatError, ParameterError, StateError
from mmdreamer.harness.agents import FollowerAgent, RandomAgent, StaticAgent, load_agent, save_agent
from mmdreamer.harness.buffer import Episode, ReplayBuffer, prefill, quantize_image
from mmdreamer.harness.cli import main
from mmdreamer.harness.config import (
    TrainConfig,
    apply_overrides,
    dump_config,
    load_config,
    parse_config_text,
    profile,
)
from mmdreamer.harness.evaluate import RACE_METRICS, evaluate_agent, eval_env_config, race_agent
from mmdreamer.harness.metrics import metric_cosine, metric_ssim
from mmdreamer.harness.plot import read_numeric_csv
from mmdreamer.harness.train import RunManifest, code_hash, quartile_means
from mmdreamer.env import EnvConfig, RacingEnv
from mmdreamer.worldmodel import TOY_CONFIG, ModelConfig, WorldModel
from mmdreamer.behavior import ActorCriticConfig, BehaviorLearner


def make_episode(tag: float, n: int) -> Episode:
    """Every array holds ``tag`` so sampled windows reveal their source episode."""
    done = np.zeros(n, bool)
    done[-1] = True
    return Episode(np.full((n, 4), tag, np.float32), np.full((n, 2, 2, 3), int(tag), np.uint8),
                   np.full((n, 2), tag), np.arange(n, dtype=float) + 100 * tag, done)


# ---------------------------------------------------------------- buffer

def test_sampled_windows_stay_inside_one_episode(rng):
    buf = ReplayBuffer()
    for tag, n in ((1, 5), (2, 12), (3, 7)):
        buf.add_episode(make_episode(tag, n))
    batch = buf.sample(200, 6, rng)
    assert batch["lidar"].shape == (200, 6, 4) and batch["lidar"].dtype == np.float64
    for lid, rew in zip(batch["lidar"], batch["reward"]):
        assert len(set(lid[:, 0])) == 1
        assert np.all(np.diff(rew) == 1)
    # episode 1 is too short for a window of six
    assert 1.0 not in set(batch["lidar"][:, 0, 0])
    assert len(buf.valid_starts(6)) == 7 + 2


def test_buffer_evicts_oldest_whole_episodes():
    buf = ReplayBuffer(capacity=20)
    for tag in range(1, 5):
        buf.add_episode(make_episode(tag, 8))
    assert [e.lidar[0, 0] for e in buf.episodes] == [3.0, 4.0]
    assert buf.total_steps == 16 and buf.transitions() == 14


def test_buffer_errors(rng):
    buf = ReplayBuffer()
    with pytest.raises(StateError):
        buf.sample(1, 3, rng)
    bad = make_episode(1, 4)
    bad.done[1] = True
    with pytest.raises(StateError):
        buf.add_episode(bad)


def test_prefill_cuts_at_budget(oval):
    env = RacingEnv(EnvConfig(), oval)
    buf = prefill(env, ReplayBuffer(), steps=120, seed=0)
    assert buf.transitions() == 120
    ep = buf.episodes[0]
    assert ep.image.dtype == np.uint8 and ep.lidar.dtype == np.float32
    assert tuple(ep.action[0]) == (0.005, 0.0) and ep.reward[0] == 0.0


def test_quantize_image_range():
    img = np.array([[[-0.1, 0.5, 1.2]]])
    assert quantize_image(img).tolist() == [[[0, 128, 255]]]


# ---------------------------------------------------------------- config

def test_config_text_parsing(tmp_path):
    text = "# desk run\nseed = 3\nenv.mode = multi-dynamic  # opponents\nmodel.lidar_hidden = 16, 8\n\n"
    assert parse_config_text(text) == {"seed": "3", "env.mode": "multi-dynamic", "model.lidar_hidden": "16, 8"}
    (tmp_path / "c.cfg").write_text(text)
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.seed == 3 and cfg.env.mode == "multi-dynamic" and cfg.model.lidar_hidden == (16, 8)


def test_config_errors():
    with pytest.raises(FormatError):
        parse_config_text("seed 3")
    with pytest.raises(FormatError):
        apply_overrides(TrainConfig(), {"nonsense": "1"})
    with pytest.raises(FormatError):
        apply_overrides(TrainConfig(), {"model.z_dim": "many"})
    with pytest.raises(FormatError):
        apply_overrides(TrainConfig(), {"optics.zoom": "1"})
    with pytest.raises(ParameterError):
        apply_overrides(TrainConfig(), {"env.mode": "chaos"})
    with pytest.raises(ParameterError):
        profile("huge")


@pytest.mark.parametrize("name", ["full", "desk", "smoke"])
def test_config_dump_roundtrip(name):
    cfg = profile(name).with_overrides({"vehicle.tau_v_s": "0.3", "follower.speed": "2.5"})
    assert apply_overrides(TrainConfig(), parse_config_text(dump_config(cfg))) == cfg


def test_sequence_length_and_update_cadence():
    cfg = TrainConfig()
    assert cfg.effective_seq_len == 50
    assert cfg.with_overrides({"env.action_repeat": "8"}).effective_seq_len == 25
    assert cfg.updates_for(300) == 100
    assert cfg.with_overrides({"update_every_steps": 25}).updates_for(300) == 12


# ---------------------------------------------------------------- metrics

def ssim_oracle(a, b, w=8, L=1.0):
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - w + 1):
            for j in range(a.shape[1] - w + 1):
                x, y = a[i:i + w, j:j + w, ch].ravel(), b[i:i + w, j:j + w, ch].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = x.var(), y.var()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_matches_window_loop(rng):
    a = rng.uniform(size=(12, 10, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert metric_ssim(a, b) == pytest.approx(ssim_oracle(a, b), rel=1e-10)
    assert metric_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert metric_ssim(a[..., 0], b[..., 0]) == pytest.approx(ssim_oracle(a[..., :1], b[..., :1]), rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(9, 9, 3)), r.uniform(size=(9, 9, 3))
    s = metric_ssim(a, b)
    assert s == pytest.approx(metric_ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_metric_errors_and_cosine_examples():
    assert metric_cosine([1, 0], [0, 1]) == 0.0
    assert metric_cosine([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert metric_cosine([1, 1], [-1, -1]) == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        metric_cosine([0, 0], [1, 1])
    with pytest.raises(DimensionError):
        metric_cosine([1, 2], [1, 2, 3])
    with pytest.raises(DimensionError):
        metric_ssim(np.zeros((4, 4)), np.zeros((4, 4)))


# ---------------------------------------------------------------- agents and evaluation

def test_agent_checkpoint_roundtrip(tmp_path):
    model = WorldModel(ModelConfig(**TOY_CONFIG), seed=2)
    learner = BehaviorLearner(12, ActorCriticConfig(hidden=(5,)), seed=3)
    save_agent(tmp_path / "a.drck", model, learner, {"note": "x"})
    m2, l2, meta = load_agent(tmp_path / "a.drck")
    assert meta["note"] == "x" and l2.config == learner.config and m2.config == model.config
    for a, b in ((model, m2), (learner, l2)):
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
    with pytest.raises(FormatError):
        load_agent(tmp_path / "a.drck", expect_variant="multimodal-map")
    model.save(tmp_path / "wm.drck")
    with pytest.raises(FormatError):
        load_agent(tmp_path / "wm.drck")


def test_static_agent_makes_no_progress(oval):
    report = evaluate_agent(StaticAgent(), eval_env_config(EnvConfig(), max_ticks=200), episodes=2, track=oval)
    assert abs(report.metrics.mean_progress) < 2 * oval.resolution / oval.loop_length


def test_random_agent_is_seeded(oval):
    cfg = eval_env_config(EnvConfig(), max_ticks=200)
    a = evaluate_agent(RandomAgent(4), cfg, episodes=2, track=oval).metrics
    b = evaluate_agent(RandomAgent(4), cfg, episodes=2, track=oval).metrics
    assert a == b


def test_race_table_is_consistent(oval):
    result = race_agent(FollowerAgent(3.0), EnvConfig(random_start=False, max_ticks=1500), episodes=3, track=oval)
    assert set(result.table) == set(RACE_METRICS)
    assert sum(result.outcome_pct.values()) == pytest.approx(100.0)
    assert all(0.0 <= r["progress"] <= 1.0 for r in result.episodes)


def test_quartile_means():
    assert quartile_means(np.arange(8.0), window=1) == [0.5, 2.5, 4.5, 6.5]
    assert quartile_means(np.ones(400)) == [1.0] * 4
    assert all(np.isfinite(quartile_means(np.arange(10.0), window=100)))
    with pytest.raises(ValueError):
        quartile_means([1.0, 2.0, 3.0])


def test_code_hash_is_stable():
    h = code_hash()
    assert h == code_hash() and len(h) == 40


# ---------------------------------------------------------------- smoke run and CLI

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["train", "--profile", "smoke", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_smoke_run_outputs(smoke_run):
    m = RunManifest.load(smoke_run / "manifest.json")
    assert m.seed == 1 and m.code_hash == code_hash()
    assert {"final.drck", "ckpt_00000150.drck", "ckpt_00000300.drck"} <= set(m.checkpoints)
    assert m.eval and m.baseline and m.config["total_steps"] == "300"
    header, data = read_numeric_csv(smoke_run / "losses.csv")
    assert header[0] == "update" and len(data) == len(m.losses) and np.isfinite(data[:, 2]).all()
    _, eps = read_numeric_csv(smoke_run / "episodes.csv")
    assert eps[-1, 1] == 300


def test_cli_eval_race_export(smoke_run, tmp_path, capsys):
    ckpt = str(smoke_run / "final.drck")
    assert main(["eval", "--ckpt", ckpt, "--episodes", "2", "--max-ticks", "80", "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["mean_progress", "min_progress", "max_progress", "mean_reward"] and len(rows) == 2
    assert (tmp_path / "ev" / "episodes.csv").exists()

    assert main(["race", "--ckpt", ckpt, "--episodes", "2", "--max-ticks", "80", "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert [r[0] for r in rows[1:]] == list(RACE_METRICS)

    out = tmp_path / "lat.csv"
    assert main(["export-latents", "--ckpt", ckpt, "--out", str(out), "--episodes", "1", "--max-ticks", "40"]) == 0
    header, data = read_numeric_csv(out)
    assert header[:3] == ["progress", "x", "y"] and data.shape[1] == 3 + 4


def test_cli_select_best_and_plot(smoke_run, tmp_path, capsys):
    other = json.loads((smoke_run / "manifest.json").read_text())
    other["seed"], other["eval"]["mean_progress"] = 9, other["eval"]["mean_progress"] + 1
    (tmp_path / "m.json").write_text(json.dumps(other))
    assert main(["select-best", str(smoke_run / "manifest.json"), str(tmp_path / "m.json")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["best"] for r in rows] == ["0", "1"]
    svg = tmp_path / "loss.svg"
    assert main(["plot", str(smoke_run / "losses.csv"), "--out", str(svg), "--columns", "wm_loss", "kl",
                 "--smooth", "3"]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        main(["fly"])


def test_bundled_desk_config_matches_profile():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "demos" / "configs" / "desk.cfg"
    assert load_config(path) == profile("desk").with_overrides({"eval_episodes": 10})
