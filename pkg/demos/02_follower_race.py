"""Waypoint followers on the oval: a solo lap, then a scripted head-to-head.

A faster follower on a line offset to the left should overtake the slower
opponent every time without touching it.  The race table has the same
five columns the ``race`` subcommand prints for trained agents.

    python demos/02_follower_race.py --episodes 10
"""
import argparse

from mmdreamer.env import EnvConfig, RacingEnv
from mmdreamer.harness.agents import FollowerAgent
from mmdreamer.harness.evaluate import RACE_METRICS, race_agent, run_episode
from mmdreamer.track import bundled_track


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--speed", type=float, default=4.0)
    ap.add_argument("--offset", type=float, default=0.75)
    args = ap.parse_args()
    track = bundled_track("oval")

    env = RacingEnv(EnvConfig(random_start=False, max_ticks=4000), track)
    ep = run_episode(env, FollowerAgent(3.0), seed=0, stop=lambda res, _: res.info["lap_tick"] is not None)
    dt = env.config.vehicle.dt_s
    print(f"solo lap at 3 m/s: {ep['info']['lap_tick'] * dt:.2f} s, collision={ep['collision']}, "
          f"return {ep['return']:.1f}")

    result = race_agent(FollowerAgent(args.speed, args.offset), EnvConfig(random_start=False, max_ticks=4000),
                        args.episodes, seed=0, track=track)
    print(f"\n{args.speed} m/s follower, {args.offset} m left of the line, vs the 3 m/s opponent:")
    for k in RACE_METRICS:
        v = result.table[k]
        print(f"  {k:26s} {f'{v[0]:.2f} / {v[1]:.2f}' if isinstance(v, tuple) else f'{v:.2f}'}")
    print("  outcomes:", {k: f"{v:.0f}%" for k, v in result.outcome_pct.items()})


if __name__ == "__main__":
    main()
