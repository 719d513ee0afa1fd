"""Training loop: prefill, then alternate model/behavior updates with policy rollouts."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..behavior import BehaviorLearner, flatten_states
from ..env import RacingEnv
from ..errors import NumericalError
from ..track import resolve_track
from ..worldmodel import WorldModel
from .agents import ModelAgent, RandomAgent, save_agent
from .buffer import RESET_ACTION, EpisodeRecorder, ReplayBuffer, prefill
from .config import TrainConfig, config_items
from .evaluate import env_config_meta, eval_env_config, evaluate_agent, write_episode_rows, write_eval_csv

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("update", "env_steps", "wm_loss", "kl", "reward_nll", "lidar_nll", "camera_nll", "map_nll",
                "wm_grad_norm", "actor_loss", "critic_loss", "actor_grad_norm", "critic_grad_norm")
EPISODE_COLUMNS = ("episode", "env_steps", "return", "progress", "length", "collision", "noise_std")


def code_hash() -> str:
    """Git-style tree hash over the package sources."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        blob = path.read_bytes()
        rel = path.relative_to(root).as_posix()
        digest = hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
        h.update(f"{rel} {digest}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_hash: str
    losses: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    budget_unit: str = "env steps"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True, allow_nan=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def env_config_for(cfg: TrainConfig):
    return replace(cfg.env, seed=cfg.seed, with_local_map=cfg.model.variant == "multimodal-map")


def _dump_batch(out_dir: Path, batch: dict, update: int) -> Path:
    path = out_dir / f"nan_batch_{update:06d}.npz"
    np.savez_compressed(path, **batch)
    return path


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.env_cfg = env_config_for(cfg)
        self.track = resolve_track(self.env_cfg.track)
        self.env = RacingEnv(self.env_cfg, self.track)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = WorldModel(cfg.model, seed=cfg.seed)
        self.learner = BehaviorLearner(cfg.model.z_dim + cfg.model.h_dim, cfg.behavior, cfg.seed + 1,
                                       cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.wm_opt = ad.Adam(self.model.parameters("wm."), cfg.wm_lr, cfg.adam_beta1, cfg.adam_beta2,
                              cfg.adam_eps, clip_norm=cfg.clip_norm)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.env_steps = 0
        self.updates = 0
        self.episode_count = 0
        self.manifest = RunManifest(config=config_items(cfg), seed=cfg.seed, code_hash=code_hash())
        self._next_ckpt = cfg.checkpoint_every

    # ---- updates
    def update(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.batch_size, cfg.effective_seq_len, self.rng)
        with ad.Tape() as tape:
            res = self.model.observe_sequence(batch["lidar"], batch["image"], batch["action"], batch["reward"],
                                              batch.get("local_map"), rng=self.rng)
        loss = res.loss.item()
        if not math.isfinite(loss):
            path = _dump_batch(self.out, batch, self.updates)
            raise NumericalError(f"world-model loss is {loss} at update {self.updates}; batch dumped to {path}")
        wm_norm = self.wm_opt.step(ad.backward(tape, res.loss))
        stats = self.learner.update(self.model, flatten_states(res.states), self.rng)
        if not (math.isfinite(stats.actor_loss) and math.isfinite(stats.critic_loss)):
            path = _dump_batch(self.out, batch, self.updates)
            raise NumericalError(f"behavior loss non-finite at update {self.updates}; batch dumped to {path}")
        self.updates += 1
        terms = {k: v.item() for k, v in res.terms.items()}
        row = {"update": self.updates, "env_steps": self.env_steps, "wm_loss": loss,
               "kl": terms["kl"], "reward_nll": terms["reward"], "lidar_nll": terms.get("lidar", math.nan),
               "camera_nll": terms.get("camera", math.nan), "map_nll": terms.get("map", math.nan),
               "wm_grad_norm": wm_norm, "actor_loss": stats.actor_loss, "critic_loss": stats.critic_loss,
               "actor_grad_norm": stats.actor_grad_norm, "critic_grad_norm": stats.critic_grad_norm}
        self.manifest.losses.append([row[c] for c in LOSS_COLUMNS])
        return row

    # ---- data collection
    def collect_episode(self) -> dict:
        cfg = self.cfg
        noise = cfg.behavior.noise_at(self.env_steps)
        agent = ModelAgent(self.model, self.learner, explore=True,
                           seed=int(self.rng.integers(2**63 - 1)), noise_std=noise)
        res = self.env.reset(seed=int(self.rng.integers(2**63 - 1)))
        agent.reset(res, self.env)
        rec = EpisodeRecorder()
        rec.add(res.obs, RESET_ACTION, 0.0, False, res.info["progress"])
        ret = 0.0
        while not res.done and self.env_steps < cfg.total_steps:
            action = agent.act(res, self.env)
            res = self.env.step(action)
            rec.add(res.obs, action, res.reward, res.done, res.info["progress"])
            ret += res.reward
            self.env_steps += 1
        self.buffer.add_episode(rec.finish())
        self.episode_count += 1
        row = {"episode": self.episode_count, "env_steps": self.env_steps, "return": ret,
               "progress": res.info["total_progress"], "length": len(rec) - 1,
               "collision": int(res.info["collision"]), "noise_std": noise}
        self.manifest.episodes.append([row[c] for c in EPISODE_COLUMNS])
        return row

    def checkpoint(self, name: str) -> str:
        path = self.out / f"{name}.drck"
        digest = save_agent(path, self.model, self.learner,
                            {"env": env_config_meta(self.env_cfg), "env_steps": self.env_steps,
                             "updates": self.updates, "seed": self.cfg.seed})
        self.manifest.checkpoints[path.name] = digest
        return digest

    # ---- main loop
    def run(self, evaluate: bool = True) -> RunManifest:
        cfg = self.cfg
        prefill(self.env, self.buffer, min(cfg.prefill_steps, cfg.total_steps), cfg.seed)
        self.env_steps = self.buffer.transitions()
        log.info("prefill done: %d steps in %d episodes", self.env_steps, len(self.buffer))
        last_len = self.env_steps
        while True:
            for _ in range(cfg.updates_for(last_len)):
                row = self.update()
            log.info("update %d: wm %.2f actor %.3f critic %.3f", self.updates, row["wm_loss"],
                     row["actor_loss"], row["critic_loss"])
            while self.env_steps >= self._next_ckpt:
                self.checkpoint(f"ckpt_{self._next_ckpt:08d}")
                self._next_ckpt += cfg.checkpoint_every
            if self.env_steps >= cfg.total_steps:
                break
            ep = self.collect_episode()
            last_len = ep["length"]
            log.info("episode %d: steps %d return %.2f progress %.3f", ep["episode"], self.env_steps,
                     ep["return"], ep["progress"])
        self.checkpoint("final")
        if evaluate and cfg.eval_episodes > 0:
            self.evaluate()
        self.write_outputs()
        return self.manifest

    def evaluate(self) -> None:
        cfg = self.cfg
        ecfg = eval_env_config(self.env_cfg, max_ticks=cfg.eval_max_ticks)
        seed = cfg.seed + 1_000_003
        report = evaluate_agent(ModelAgent(self.model, self.learner), ecfg, cfg.eval_episodes, seed, self.track)
        base = evaluate_agent(RandomAgent(seed), ecfg, cfg.eval_episodes, seed, self.track)
        report.horizon = cfg.eval_horizon
        self.manifest.eval = report.metrics.as_dict()
        self.manifest.baseline = base.metrics.as_dict()
        write_eval_csv(report, self.out / "eval_metrics.csv")
        write_eval_csv(base, self.out / "baseline_metrics.csv")
        write_episode_rows(report.episodes, self.out / "eval_episodes.csv")

    def write_outputs(self) -> None:
        with open(self.out / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in self.manifest.losses])
        with open(self.out / "episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in self.manifest.episodes])
        (self.out / "manifest.json").write_text(self.manifest.to_json())


def train(cfg: TrainConfig, out_dir, evaluate: bool = True) -> RunManifest:
    return Trainer(cfg, out_dir).run(evaluate)


def quartile_means(values, window: int = 100) -> list[float]:
    """Mean of the trailing moving average within each quarter of the run."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 4:
        raise ValueError(f"need at least 4 values for quartiles, got {len(v)}")
    # keep at least four smoothed points so every quarter is non-empty
    w = max(1, min(window, len(v) - 3))
    ma = np.convolve(v, np.ones(w) / w, mode="valid")
    return [float(q.mean()) for q in np.array_split(ma, 4)]
