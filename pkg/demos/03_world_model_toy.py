"""Fit a small occupancy-map world model on frames from the oval.

Frames come from a noisy waypoint follower and are shrunk to 32 beams,
8x8 images and 8x8 maps so the fit takes a minute or two on a CPU.  The
script reports held-out map accuracy against the all-free guess and saves
true vs predicted maps side by side.

    python demos/03_world_model_toy.py --steps 1500
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mmdreamer import autodiff as ad
from mmdreamer.env import EnvConfig, RacingEnv, WaypointFollower
from mmdreamer.track import bundled_track
from mmdreamer.vehicle import ActionCommand
from mmdreamer.worldmodel import TOY_CONFIG, ModelConfig, WorldModel

BEAMS, HW, CELLS, T = 32, 8, 8, 6


def shrink(obs):
    idx = np.linspace(0, len(obs.lidar) - 1, BEAMS).round().astype(int)
    k, m = obs.image.shape[0] // HW, obs.local_map.shape[0] // CELLS
    img = obs.image.reshape(HW, k, HW, k, 3).mean(axis=(1, 3))
    occ = obs.local_map.reshape(CELLS, m, CELLS, m).mean(axis=(1, 3)) > 0.5
    return obs.lidar[idx], img, occ


def collect(track, n_seq, seed):
    rng = np.random.default_rng(seed)
    env = RacingEnv(EnvConfig(with_local_map=True, max_ticks=4 * (T + 30)), track)
    data = {k: [] for k in ("lidar", "image", "map", "action", "reward")}
    while len(data["reward"]) < n_seq:
        res = env.reset(seed=int(rng.integers(2**31)))
        follower = WaypointFollower(track.centerline, dt=0.04)
        torque, prev, frames = rng.uniform(0.2, 1.0), ActionCommand(0.005, 0.0), []
        while not res.done:
            action = ActionCommand(torque, follower.act(env.ego).steer + rng.normal(0, 0.2))
            frames.append((*shrink(res.obs), prev.as_tuple(), res.reward))
            res = env.step(action)
            prev = action
        if len(frames) < T + 15:
            continue
        off = int(rng.integers(15, len(frames) - T + 1))
        for key, col in zip(data, zip(*frames[off:off + T])):
            data[key].append(np.stack(col))
    return {k: np.stack(v) for k, v in data.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--out", default="demo_out/world_model")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    track = bundled_track("oval")
    train, held = collect(track, 224, seed=0), collect(track, 64, seed=1)
    cfg = ModelConfig(variant="multimodal-map", **{
        **TOY_CONFIG, "z_dim": 16, "h_dim": 32, "zpi_dim": 32, "hidden": 64, "lidar_beams": BEAMS,
        "lidar_hidden": (64, 64), "reward_hidden": (32,), "dec_depth": 64, "dec_channels": (16,)})
    model = WorldModel(cfg, seed=0)
    opt = ad.Adam(model.parameters(), 2e-3)
    rng = np.random.default_rng(0)
    for step in range(1, args.steps + 1):
        b = rng.choice(len(train["reward"]), 32, replace=False)
        with ad.Tape() as tape:
            res = model.observe_sequence(train["lidar"][b], train["image"][b], train["action"][b],
                                         train["reward"][b], train["map"][b], rng=rng)
        opt.step(ad.backward(tape, res.loss))
        if step % 250 == 0:
            print(f"step {step:5d}  loss {res.loss.item():8.2f}  " +
                  "  ".join(f"{k} {v.item():.2f}" for k, v in res.terms.items()))

    n = len(held["reward"])
    with ad.no_record():
        res = model.observe_sequence(held["lidar"], held["image"], held["action"], held["reward"], held["map"],
                                     noise={"z": np.zeros((T, n, cfg.z_dim)), "zpi": np.zeros((T, n, cfg.zpi_dim))})
        logits = np.stack([model.decode_occupancy(s.z, s.h).data for s in res.states], 1)
        reward = np.stack([model.predict_reward(s.z, s.h).data for s in res.states], 1)
    acc = np.mean((logits > 0) == held["map"])
    print(f"held-out map accuracy {acc:.3f} (all-free guess {1 - held['map'].mean():.3f})")
    print(f"held-out reward correlation {np.corrcoef(reward.ravel(), held['reward'].ravel())[0, 1]:.3f}")

    fig, axes = plt.subplots(2, 6, figsize=(9, 3.4))
    for j in range(6):
        axes[0, j].imshow(held["map"][j, -1], cmap="gray_r", vmin=0, vmax=1)
        axes[1, j].imshow(1 / (1 + np.exp(-logits[j, -1])), cmap="gray_r", vmin=0, vmax=1)
    for a in axes.ravel():
        a.set_axis_off()
    axes[0, 0].set_title("true", loc="left", fontsize=8)
    axes[1, 0].set_title("predicted", loc="left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "maps.png", dpi=120)
    print("wrote", out / "maps.png")


if __name__ == "__main__":
    main()
