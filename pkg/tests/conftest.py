import os

import numpy as np
import pytest

from mmdreamer.track import bundled_track


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MMDREAMER_FULL_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="long training run; set MMDREAMER_FULL_ACCEPTANCE=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def oval():
    return bundled_track("oval")


@pytest.fixture(scope="session")
def scurve():
    return bundled_track("scurve")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def downsample_frames(lidar, image, local_map, beams=8, hw=8, cells=8):
    """Shrink full-size observations to the toy model's input sizes."""
    idx = np.linspace(0, lidar.shape[-1] - 1, beams).round().astype(int)
    k = image.shape[-2] // hw
    img = image.reshape(*image.shape[:-3], hw, k, hw, k, 3).mean(axis=(-4, -2))
    m = local_map.shape[-1] // cells
    occ = local_map.reshape(*local_map.shape[:-2], cells, m, cells, m).mean(axis=(-3, -1)) > 0.5
    return lidar[..., idx], img, occ


def collect_toy_sequences(track, n_seq, T, seed, beams=8):
    """Fixed-length windows of toy-sized frames from noisy waypoint following on ``track``.

    Returns dict of arrays shaped (n_seq, T, ...): lidar, image, map, action, reward.
    """
    from mmdreamer.env import EnvConfig, RacingEnv, WaypointFollower
    from mmdreamer.vehicle import ActionCommand

    rng = np.random.default_rng(seed)
    env = RacingEnv(EnvConfig(with_local_map=True, max_ticks=4 * (T + 30)), track)
    out = {k: [] for k in ("lidar", "image", "map", "action", "reward")}
    while len(out["reward"]) < n_seq:
        res = env.reset(seed=int(rng.integers(2**31)))
        follower = WaypointFollower(track.centerline, dt=0.04)
        prev = ActionCommand(0.005, 0.0)
        torque = rng.uniform(0.2, 1.0)  # one speed per episode keeps rewards predictable from actions
        frames = []
        while not res.done:
            cmd = follower.act(env.ego)
            action = ActionCommand(torque, cmd.steer + rng.normal(0, 0.2))
            frames.append((res.obs, prev, res.reward))
            res = env.step(action)
            prev = action
        # skip the launch so speed has settled near its target
        if len(frames) < T + 15:
            continue
        off = int(rng.integers(15, len(frames) - T + 1))
        frames = frames[off:off + T]
        obs = [f[0] for f in frames]
        lid, img, occ = downsample_frames(np.stack([o.lidar for o in obs]), np.stack([o.image for o in obs]),
                                          np.stack([o.local_map for o in obs]), beams=beams)
        out["lidar"].append(lid)
        out["image"].append(img)
        out["map"].append(occ)
        out["action"].append(np.array([f[1].as_tuple() for f in frames]))
        out["reward"].append(np.array([f[2] for f in frames]))
    return {k: np.stack(v) for k, v in out.items()}


def open_plane_sequences(n_seq, T, seed, beams=8):
    """Frames seen far from any wall: max-range scans, floor-and-sky images, all-free maps."""
    from mmdreamer import sensors
    from mmdreamer.track import Footprint, TrackMap

    grid = np.zeros((400, 400), bool)
    z = np.zeros(grid.shape)
    plane = TrackMap(grid=grid, resolution=0.1, start_pose=(20.0, 20.0, 0.0), progress=z,
                     centerline=np.zeros((0, 2)), clearance=z)
    scene = sensors.WorldScene(plane, [(Footprint(20.0, 20.0, 0.0), "ego")])
    obs = sensors.observe(scene, (20.0, 20.0, 0.0), with_local_map=True)
    lid, img, occ = downsample_frames(obs.lidar, obs.image, obs.local_map, beams=beams)
    rng = np.random.default_rng(seed)
    rep = lambda a: np.broadcast_to(a, (n_seq, T) + a.shape).copy()
    return {"lidar": rep(lid), "image": rep(img), "map": rep(occ),
            "action": np.column_stack([rng.uniform(0.005, 1, n_seq * T), rng.uniform(-1, 1, n_seq * T)]).reshape(n_seq, T, 2),
            "reward": np.zeros((n_seq, T))}
