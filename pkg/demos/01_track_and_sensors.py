"""Tour of the toy oval: progress field, waypoints, and one observation.

Writes a progress heat map, the raw sensor dumps (CSV lidar, PPM camera,
PGM local map), and a polar lidar plot into ``--out``.

    python demos/01_track_and_sensors.py --out demo_out/track
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mmdreamer.sensors import WorldScene, beam_angles, dump_observation, observe
from mmdreamer.track import Footprint, bundled_track, polyline_length, progress_at


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--track", default="oval")
    ap.add_argument("--out", default="demo_out/track")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    track = bundled_track(args.track)
    x0, y0, yaw0 = track.start_pose
    print(f"{args.track}: grid {track.grid.shape} at {track.resolution} m/px")
    print(f"shortest loop {track.loop_length:.2f} m, centerline {polyline_length(track.centerline):.2f} m "
          f"with {len(track.centerline)} waypoints")

    # progress grows along the driving direction and wraps at the start line
    for k in (0, len(track.centerline) // 4, len(track.centerline) // 2):
        x, y = track.centerline[k]
        print(f"  waypoint {k:3d} at ({x:5.2f}, {y:5.2f}) -> progress {progress_at(track, (x, y)):.3f}")

    h, w = track.grid.shape
    extent = (0, w * track.resolution, 0, h * track.resolution)
    fig, ax = plt.subplots(figsize=(7, 5))
    im = ax.imshow(np.ma.masked_invalid(track.progress), origin="lower", extent=extent, cmap="viridis")
    ax.plot(*track.centerline.T, "w.", ms=2)
    ax.plot(x0, y0, "r^")
    fig.colorbar(im, ax=ax, label="progress")
    fig.savefig(out / "progress.png", dpi=120)
    plt.close(fig)

    # one opponent a little ahead of the ego car
    ego = Footprint(x0, y0, yaw0)
    opp = Footprint(x0 + 2.0, y0 + 0.4, yaw0)
    obs = observe(WorldScene(track, [(ego, "ego"), (opp, "opponent-red")]), track.start_pose, with_local_map=True)
    paths = dump_observation(obs, out)
    print("nearest return %.2f m, straight ahead %.2f m" % (obs.lidar.min(), obs.lidar[540]))
    print("wrote", ", ".join(str(p) for p in paths.values()))

    fig = plt.figure(figsize=(9, 3.2))
    ax = fig.add_subplot(131, projection="polar")
    ax.plot(beam_angles() + np.pi / 2, obs.lidar, lw=0.8)
    ax.set_title("lidar (up = forward)")
    fig.add_subplot(132).imshow(obs.image)
    fig.add_subplot(133).imshow(obs.local_map, cmap="gray_r")
    for a in fig.axes[1:]:
        a.set_axis_off()
    fig.tight_layout()
    fig.savefig(out / "observation.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
