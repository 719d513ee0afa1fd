"""Multimodal recurrent state-space model.

Three variants share one interface:

``multimodal-poe``
    LiDAR MLP and camera CNN each emit a Gaussian over the intermediate
    latent; a product of experts fuses them, a sample of the fused
    distribution is stacked with ``h`` and encoded into the posterior over
    ``z``.  Both modalities are reconstructed.
``multi-rssm-concat``
    One dense posterior head over ``[h, scan/15, conv features]``.
``multimodal-map``
    PoE encoding as above, but the decoder predicts a local occupancy grid
    scored by a Bernoulli likelihood instead of reconstructing observations.

All tensors are batched: vectors are ``(B, dim)``, images ``(B, 64, 64, 3)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiagGaussian, Tensor
from .autodiff.nn import ConvDecoder, ConvEncoder, Dense, GRUCell, MLP, Module
from .errors import ContractError, DimensionError, FormatError, ParameterError

VARIANTS = ("multimodal-poe", "multi-rssm-concat", "multimodal-map")
LIDAR_SCALE = 15.0


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "multimodal-poe"
    z_dim: int = 30
    h_dim: int = 200
    zpi_dim: int = 1080
    hidden: int = 200
    action_dim: int = 2
    action_embed: int = 16
    lidar_beams: int = 1080
    lidar_hidden: tuple = (400, 400)
    image_hw: int = 64
    cam_channels: tuple = (32, 64, 128, 256)
    cam_kernels: tuple = (4, 4, 4, 4)
    dec_depth: int = 1024
    dec_channels: tuple = (128, 64, 32)
    dec_kernels: tuple = (5, 5, 6, 6)
    map_cells: int = 64
    reward_hidden: tuple = (200, 200)
    beta_lidar: float = 1.0
    beta_camera: float = 1.0
    beta_map: float = 1.0
    beta_kl: float = 1.0
    min_std: float = 1e-4
    poe_mode: str = "standard"
    poe_prior_expert: bool = False
    zpi_feed: str = "sample"
    act: str = "elu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.poe_mode not in ("standard", "paper-literal"):
            raise ParameterError("poe_mode must be standard or paper-literal")
        if self.zpi_feed not in ("sample", "params"):
            raise ParameterError("zpi_feed must be sample or params")
        for name in ("beta_lidar", "beta_camera", "beta_map", "beta_kl"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        for name in ("lidar_hidden", "cam_channels", "cam_kernels", "dec_channels", "dec_kernels", "reward_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


TOY_CONFIG = dict(z_dim=4, h_dim=8, zpi_dim=6, hidden=8, action_embed=3, lidar_beams=8, lidar_hidden=(8,),
                  image_hw=8, cam_channels=(2, 3), cam_kernels=(2, 2), dec_depth=6, dec_channels=(3,),
                  dec_kernels=(4, 2), map_cells=8, reward_hidden=(6,))


@dataclass
class BeliefState:
    h: Tensor
    z: Tensor
    prior: DiagGaussian
    posterior: DiagGaussian | None = None
    provenance: str = "posterior"

    @property
    def features(self) -> Tensor:
        return ad.concat([self.z, self.h], axis=-1)

    def detach(self) -> "BeliefState":
        return BeliefState(self.h.detach(), self.z.detach(), self.prior.detach(),
                           None if self.posterior is None else self.posterior.detach(), self.provenance)


@dataclass
class ObserveResult:
    states: list
    loss: Tensor
    terms: dict = field(default_factory=dict)


# ------------------------------------------------------------------- fusion

def poe_fuse(experts: Sequence[DiagGaussian], include_unit_prior: bool = False,
             mode: str = "standard") -> DiagGaussian:
    """Product of diagonal-Gaussian experts.

    ``standard``: precision-weighted mean, variance ``1 / sum(1/sigma^2)``.
    ``paper-literal``: weights ``1/sigma`` for the mean and variance
    ``sum(1/sigma)``, kept for reproduction only (it is not a density product).
    """
    experts = list(experts)
    if not experts:
        raise ContractError("poe_fuse needs at least one expert")
    shape = experts[0].shape
    if any(e.shape != shape for e in experts):
        raise DimensionError(f"expert shapes differ: {[e.shape for e in experts]}")
    if include_unit_prior:
        experts = experts + [DiagGaussian(Tensor(np.zeros(shape)), Tensor(np.ones(shape)))]
    if len(experts) == 1:
        return experts[0]
    if mode == "standard":
        prec = [ad.reciprocal(ad.square(e.std)) for e in experts]
        total = prec[0]
        weighted = ad.mul(prec[0], experts[0].mean)
        for p, e in zip(prec[1:], experts[1:]):
            total = ad.add(total, p)
            weighted = ad.add(weighted, ad.mul(p, e.mean))
        var = ad.reciprocal(total)
        return DiagGaussian(ad.mul(var, weighted), ad.sqrt(var))
    if mode == "paper-literal":
        w = [ad.reciprocal(e.std) for e in experts]
        total = w[0]
        weighted = ad.mul(w[0], experts[0].mean)
        for wi, e in zip(w[1:], experts[1:]):
            total = ad.add(total, wi)
            weighted = ad.add(weighted, ad.mul(wi, e.mean))
        return DiagGaussian(ad.mul(weighted, ad.reciprocal(total)), ad.sqrt(total))
    raise ParameterError(f"unknown poe mode {mode!r}")


def gaussian_head(raw: Tensor, dim: int, min_std: float) -> DiagGaussian:
    """Split ``(B, 2*dim)`` into mean and ``softplus(raw) + min_std``."""
    mean, raw_std = ad.split(raw, [dim, dim], axis=-1)
    return DiagGaussian(mean, ad.affine(ad.softplus(raw_std), 1.0, min_std))


# -------------------------------------------------------------------- model

class WorldModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.action_encoder = Dense(c.action_dim, c.action_embed, rng, c.act)
        self.img_in = Dense(c.z_dim + c.action_embed, c.hidden, rng, c.act)
        self.gru = GRUCell(c.hidden, c.h_dim, rng)
        self.prior_head = MLP([c.h_dim, c.hidden, 2 * c.z_dim], rng, c.act)
        feat = c.z_dim + c.h_dim
        hw = (c.image_hw, c.image_hw)
        self.cam_conv = ConvEncoder(3, hw, c.cam_channels, c.cam_kernels, rng, act=c.act)
        if c.variant == "multi-rssm-concat":
            self.concat_posterior = MLP([c.h_dim + c.lidar_beams + self.cam_conv.out_features, c.hidden, 2 * c.z_dim],
                                        rng, c.act)
        else:
            self.lidar_encoder = MLP([c.lidar_beams, *c.lidar_hidden, 2 * c.zpi_dim], rng, c.act)
            self.cam_head = Dense(self.cam_conv.out_features, 2 * c.zpi_dim, rng)
            zin = c.zpi_dim * (2 if c.zpi_feed == "params" else 1)
            self.stacked = MLP([zin + c.h_dim, c.hidden, 2 * c.z_dim], rng, c.act)
        if c.variant == "multimodal-map":
            self.map_decoder = ConvDecoder(feat, c.dec_depth, c.dec_channels, c.dec_kernels, 1,
                                           (c.map_cells, c.map_cells), rng, act=c.act)
        else:
            self.lidar_decoder = MLP([feat, *c.lidar_hidden, c.lidar_beams], rng, c.act)
            self.cam_decoder = ConvDecoder(feat, c.dec_depth, c.dec_channels, c.dec_kernels, 3, hw, rng, act=c.act)
        self.reward_head = MLP([feat, *c.reward_hidden, 1], rng, c.act)

    # ---- encoders
    def encode_lidar(self, scan) -> DiagGaussian:
        """Gaussian over the intermediate latent from ranges in meters, shape (B, beams)."""
        scan = _as_batch(scan, self.config.lidar_beams, "lidar")
        raw = self.lidar_encoder(Tensor(scan / LIDAR_SCALE))
        return gaussian_head(raw, self.config.zpi_dim, self.config.min_std)

    def camera_features(self, image) -> Tensor:
        image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        if image.ndim == 3:
            image = image[None]
        hw = self.config.image_hw
        if image.shape[1:] != (hw, hw, 3):
            raise DimensionError(f"camera image must be ({hw}, {hw}, 3), got {image.shape[1:]}")
        return self.cam_conv(Tensor(np.ascontiguousarray(image.transpose(0, 3, 1, 2))))

    def encode_camera(self, image) -> DiagGaussian:
        raw = self.cam_head(self.camera_features(image))
        return gaussian_head(raw, self.config.zpi_dim, self.config.min_std)

    def fuse(self, lidar_dist: DiagGaussian, cam_dist: DiagGaussian) -> DiagGaussian:
        c = self.config
        return poe_fuse([lidar_dist, cam_dist], c.poe_prior_expert, c.poe_mode)

    def stacked_posterior(self, zpi, h: Tensor) -> DiagGaussian:
        """Posterior over z from an intermediate-latent sample (or parameters) and ``h``."""
        if isinstance(zpi, DiagGaussian):
            zpi = ad.concat([zpi.mean, zpi.std], axis=-1)
        if zpi.shape[0] != h.shape[0]:
            raise DimensionError(f"batch mismatch {zpi.shape} vs {h.shape}")
        raw = self.stacked(ad.concat([zpi, h], axis=-1))
        return gaussian_head(raw, self.config.z_dim, self.config.min_std)

    # ---- dynamics
    def initial_state(self, batch: int) -> BeliefState:
        c = self.config
        zeros = DiagGaussian(Tensor(np.zeros((batch, c.z_dim))), Tensor(np.ones((batch, c.z_dim))))
        return BeliefState(Tensor(np.zeros((batch, c.h_dim))), Tensor(np.zeros((batch, c.z_dim))), zeros, zeros,
                           "posterior")

    def prior_transition(self, prev: BeliefState, action) -> tuple[Tensor, DiagGaussian]:
        """(h_next, prior over z) from the previous belief and the action taken."""
        c = self.config
        action = action if isinstance(action, Tensor) else Tensor(_as_batch(action, c.action_dim, "action"))
        emb = self.action_encoder(action)
        x = self.img_in(ad.concat([prev.z, emb], axis=-1))
        h = self.gru(x, prev.h)
        prior = gaussian_head(self.prior_head(h), c.z_dim, c.min_std)
        return h, prior

    def posterior(self, h: Tensor, lidar, image, noise_zpi=None) -> tuple[DiagGaussian, dict]:
        """Posterior over z given ``h`` and the raw observations."""
        c = self.config
        extras = {}
        if c.variant == "multi-rssm-concat":
            scan = _as_batch(lidar, c.lidar_beams, "lidar") / LIDAR_SCALE
            feats = self.camera_features(image)
            raw = self.concat_posterior(ad.concat([h, Tensor(scan), feats], axis=-1))
            return gaussian_head(raw, c.z_dim, c.min_std), extras
        fused = self.fuse(self.encode_lidar(lidar), self.encode_camera(image))
        extras["zpi"] = fused
        if c.zpi_feed == "params":
            zpi = fused
        else:
            if noise_zpi is None:
                noise_zpi = np.zeros(fused.shape)
            zpi = ad.reparameterize(fused, noise_zpi)
        return self.stacked_posterior(zpi, h), extras

    def observe_step(self, prev: BeliefState, action, lidar, image, noise_z=None, noise_zpi=None) -> BeliefState:
        h, prior = self.prior_transition(prev, action)
        post, _ = self.posterior(h, lidar, image, noise_zpi)
        z = ad.reparameterize(post, np.zeros(post.shape) if noise_z is None else noise_z)
        return BeliefState(h, z, prior, post, "posterior")

    def imagine_step(self, prev: BeliefState, action: Tensor, noise_z=None) -> BeliefState:
        h, prior = self.prior_transition(prev, action)
        z = ad.reparameterize(prior, np.zeros(prior.shape) if noise_z is None else noise_z)
        return BeliefState(h, z, prior, None, "prior")

    # ---- decoders
    def _features(self, z, h) -> Tensor:
        return ad.concat([z, h], axis=-1)

    def decode_lidar_normalized(self, z, h) -> Tensor:
        self._require_recon()
        return self.lidar_decoder(self._features(z, h))

    def decode_lidar(self, z, h) -> np.ndarray:
        """Predicted scan mean in meters, (B, beams)."""
        return self.decode_lidar_normalized(z, h).data * LIDAR_SCALE

    def decode_camera_chw(self, z, h) -> Tensor:
        self._require_recon()
        return self.cam_decoder(self._features(z, h))

    def decode_camera(self, z, h) -> np.ndarray:
        """Predicted image mean, (B, H, W, 3)."""
        return self.decode_camera_chw(z, h).data.transpose(0, 2, 3, 1)

    def decode_occupancy(self, z, h) -> Tensor:
        """Occupancy logits (B, cells, cells)."""
        if self.config.variant != "multimodal-map":
            raise ContractError("decode_occupancy is only available in the multimodal-map variant")
        out = self.map_decoder(self._features(z, h))
        n = self.config.map_cells
        return ad.reshape(out, (out.shape[0], n, n))

    def predict_reward(self, z, h) -> Tensor:
        out = self.reward_head(self._features(z, h))
        return ad.reshape(out, (out.shape[0],))

    def _require_recon(self):
        if self.config.variant == "multimodal-map":
            raise ContractError("the multimodal-map variant has no reconstruction decoders")

    # ---- objective
    def observe_sequence(self, lidar, images, actions, rewards, local_maps=None, rng=None,
                         noise: dict | None = None) -> ObserveResult:
        """Filter a batch of sequences and assemble the negative ELBO.

        Shapes: lidar (B, T, beams), images (B, T, H, W, 3), actions (B, T, 2)
        where ``actions[:, t]`` is the action that led to observation ``t``,
        rewards (B, T), local_maps (B, T, cells, cells).  Noise is drawn from
        ``rng`` unless given explicitly as ``{"z": (T, B, z), "zpi": (T, B, zpi)}``.
        The loss is summed over time and averaged over the batch.
        """
        c = self.config
        lidar, images = np.asarray(lidar, dtype=np.float64), np.asarray(images)
        actions, rewards = np.asarray(actions, dtype=np.float64), np.asarray(rewards, dtype=np.float64)
        if lidar.ndim != 3 or actions.ndim != 3 or rewards.ndim != 2 or images.ndim != 5:
            raise ContractError("observe_sequence expects batched (B, T, ...) arrays")
        B, T = rewards.shape
        if lidar.shape[:2] != (B, T) or images.shape[:2] != (B, T) or actions.shape[:2] != (B, T):
            raise ContractError(f"inconsistent sequence shapes {lidar.shape}, {images.shape}, {actions.shape}, {rewards.shape}")
        if c.variant == "multimodal-map" and (local_maps is None or np.shape(local_maps)[:2] != (B, T)):
            raise ContractError("multimodal-map needs local_maps of shape (B, T, cells, cells)")
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = {"z": rng.standard_normal((T, B, c.z_dim))}
            if c.variant != "multi-rssm-concat" and c.zpi_feed == "sample":
                noise["zpi"] = rng.standard_normal((T, B, c.zpi_dim))
        state = self.initial_state(B)
        states = []
        kl_terms, rew_terms, lid_terms, cam_terms, map_terms = [], [], [], [], []
        images = images.astype(np.float64) / 255.0 if images.dtype == np.uint8 else images.astype(np.float64)
        for t in range(T):
            state = self.observe_step(state, Tensor(actions[:, t]), lidar[:, t], images[:, t], noise["z"][t],
                                      None if "zpi" not in noise else noise["zpi"][t])
            states.append(state)
            kl_terms.append(ad.gaussian_kl(state.posterior, state.prior))
            rew_terms.append(ad.gaussian_nll(Tensor(rewards[:, t]), self.predict_reward(state.z, state.h)))
            if c.variant == "multimodal-map":
                logits = self.decode_occupancy(state.z, state.h)
                map_terms.append(ad.bernoulli_nll(Tensor(np.asarray(local_maps[:, t], dtype=np.float64)), logits))
            else:
                lid_terms.append(ad.gaussian_nll(Tensor(lidar[:, t] / LIDAR_SCALE),
                                                 self.decode_lidar_normalized(state.z, state.h)))
                target = np.ascontiguousarray(images[:, t].transpose(0, 3, 1, 2))
                cam_terms.append(ad.gaussian_nll(Tensor(target), self.decode_camera_chw(state.z, state.h)))
        inv_b = 1.0 / B
        terms = {"kl": _total(kl_terms, inv_b), "reward": _total(rew_terms, inv_b)}
        loss = ad.add(terms["reward"], ad.affine(terms["kl"], c.beta_kl))
        if c.variant == "multimodal-map":
            terms["map"] = _total(map_terms, inv_b)
            loss = ad.add(loss, ad.affine(terms["map"], c.beta_map))
        else:
            terms["lidar"] = _total(lid_terms, inv_b)
            terms["camera"] = _total(cam_terms, inv_b)
            loss = ad.add(loss, ad.affine(terms["lidar"], c.beta_lidar))
            loss = ad.add(loss, ad.affine(terms["camera"], c.beta_camera))
        return ObserveResult(states, loss, terms)

    # ---- persistence
    def save(self, path, extra: dict | None = None) -> str:
        meta = {"kind": "worldmodel", "variant": self.config.variant, "config": self.config.to_dict()}
        if extra:
            meta.update(extra)
        return ad.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> "WorldModel":
        arrays, meta = ad.load_checkpoint(path)
        if meta.get("kind") != "worldmodel":
            raise FormatError("checkpoint does not hold a world model")
        cfg = ModelConfig.from_dict(meta["config"])
        if expect is not None and (expect.variant != cfg.variant or expect != cfg):
            raise FormatError(f"checkpoint config ({cfg.variant}) does not match the expected model config")
        model = cls(cfg)
        model.load_state_dict(arrays)
        return model


def _total(terms, scale: float) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.affine(out, scale)


def _as_batch(x, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{what} must have length {dim}, got shape {arr.shape}")
    return arr
