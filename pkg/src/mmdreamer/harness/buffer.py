"""Episode replay storage and sequence sampling."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import StateError
from ..sensors import ObservationBundle
from ..vehicle import ActionCommand

RESET_ACTION = (0.005, 0.0)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, the storage format of replayed images."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


@dataclass
class Episode:
    """Step ``t`` holds observation ``t``, the action that produced it, and its reward.

    Step 0 is the reset observation with a nominal action and zero reward.
    """

    lidar: np.ndarray  # (T, beams) float32
    image: np.ndarray  # (T, H, W, 3) uint8
    action: np.ndarray  # (T, 2)
    reward: np.ndarray  # (T,)
    done: np.ndarray  # (T,) bool
    local_map: np.ndarray | None = None  # (T, cells, cells) bool
    progress: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.reward)


class EpisodeRecorder:
    """Accumulates one episode step by step."""

    def __init__(self):
        self.lidar, self.image, self.action, self.reward, self.done = [], [], [], [], []
        self.local_map, self.progress = [], []

    def add(self, obs: ObservationBundle, action, reward: float, done: bool, progress: float = np.nan) -> None:
        if isinstance(action, ActionCommand):
            action = action.as_tuple()
        self.lidar.append(np.asarray(obs.lidar, dtype=np.float32))
        self.image.append(quantize_image(obs.image))
        self.action.append(np.asarray(action, dtype=np.float64))
        self.reward.append(float(reward))
        self.done.append(bool(done))
        self.progress.append(float(progress))
        if obs.local_map is not None:
            self.local_map.append(np.asarray(obs.local_map, dtype=bool))

    def __len__(self) -> int:
        return len(self.reward)

    def finish(self) -> Episode:
        return Episode(np.stack(self.lidar), np.stack(self.image), np.stack(self.action),
                       np.array(self.reward), np.array(self.done),
                       np.stack(self.local_map) if self.local_map else None, np.array(self.progress))


class ReplayBuffer:
    """Whole episodes, oldest evicted once stored steps exceed ``capacity``."""

    def __init__(self, capacity: int = 100_000):
        self.capacity = int(capacity)
        self.episodes: deque[Episode] = deque()
        self.total_steps = 0

    def add_episode(self, episode: Episode) -> None:
        if len(episode) == 0:
            return
        if episode.done[:-1].any():
            raise StateError("an episode may only be done at its last step")
        self.episodes.append(episode)
        self.total_steps += len(episode)
        while self.total_steps > self.capacity and len(self.episodes) > 1:
            self.total_steps -= len(self.episodes.popleft())

    def __len__(self) -> int:
        return len(self.episodes)

    def transitions(self) -> int:
        """Stored env steps (each episode's reset observation is not a transition)."""
        return sum(len(e) - 1 for e in self.episodes)

    def valid_starts(self, length: int) -> list[tuple[int, int]]:
        return [(i, o) for i, e in enumerate(self.episodes) for o in range(len(e) - length + 1)]

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> dict:
        """Uniform over (episode, offset) pairs whose window fits inside one episode."""
        counts = np.array([max(len(e) - length + 1, 0) for e in self.episodes])
        total = int(counts.sum())
        if total == 0:
            raise StateError(f"no stored episode holds a sequence of length {length}")
        flat = rng.integers(total, size=batch)
        bounds = np.cumsum(counts)
        out = {k: [] for k in ("lidar", "image", "action", "reward", "done", "local_map")}
        for f in flat:
            i = int(np.searchsorted(bounds, f, side="right"))
            o = int(f - (bounds[i - 1] if i else 0))
            e = self.episodes[i]
            sl = slice(o, o + length)
            out["lidar"].append(e.lidar[sl])
            out["image"].append(e.image[sl])
            out["action"].append(e.action[sl])
            out["reward"].append(e.reward[sl])
            out["done"].append(e.done[sl])
            if e.local_map is not None:
                out["local_map"].append(e.local_map[sl])
        batch_out = {k: np.stack(v) for k, v in out.items() if v}
        batch_out["lidar"] = batch_out["lidar"].astype(np.float64)
        return batch_out


def prefill(env, buffer: ReplayBuffer, steps: int = 5000, seed: int = 0) -> ReplayBuffer:
    """Uniform-random actions from the action box until ``steps`` env steps are stored.

    The last episode is cut at the step budget rather than run to completion.
    """
    rng = np.random.default_rng(seed)
    collected = 0
    while collected < steps:
        res = env.reset(seed=int(rng.integers(2**63 - 1)))
        rec = EpisodeRecorder()
        rec.add(res.obs, RESET_ACTION, 0.0, False, res.info["progress"])
        while not res.done and collected < steps:
            action = ActionCommand(rng.uniform(0.005, 1.0), rng.uniform(-1.0, 1.0))
            res = env.step(action)
            rec.add(res.obs, action, res.reward, res.done, res.info["progress"])
            collected += 1
        buffer.add_episode(rec.finish())
    return buffer
