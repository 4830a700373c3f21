"""Model assembly, checkpoint persistence and the synthesis front end."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .conditioners import (
    EvalBackbone,
    ExpressionEncoder,
    IdentityEncoder,
    LandmarkNet,
    build_bundle,
)
from .config import AblationFlags, ModelConfig, train_config_from_dict
from .denoiser import UNetDenoiser
from .diffusion import NoiseSchedule, build_schedule, sample
from .fusion import CrossFusion

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass
class ModelComponents:
    """Everything the trainer and synthesizer operate on.

    `id_loss_encoder` is a frozen copy of the pretrained identity encoder
    used by the consistency loss; `id_encoder` is the trainable conditioner.
    """

    denoiser: UNetDenoiser
    fusion: CrossFusion
    id_encoder: IdentityEncoder
    exp_encoder: ExpressionEncoder
    lm_net: LandmarkNet
    id_loss_encoder: IdentityEncoder
    eval_backbone: EvalBackbone


def build_components(
    model: ModelConfig,
    flags: AblationFlags,
    conditioners_dir: Path | None = None,
    *,
    init_seed: int = 0,
) -> ModelComponents:
    """Construct all modules, loading pretrained conditioner segments if given.

    Without a conditioners directory everything starts from random init (the
    consistency-loss embedder then freezes a copy of that random identity
    encoder) — fine for smoke tests, but real runs should pretrain first.
    """
    torch.manual_seed(init_seed)
    m = model
    components = ModelComponents(
        denoiser=UNetDenoiser(m),
        fusion=CrossFusion(
            m.token_dim,
            m.head_count,
            enabled=flags.cross_fusion,
            use_landmarks=flags.landmarks,
        ),
        id_encoder=IdentityEncoder(m.resolution, m.token_dim, m.trunk_width),
        exp_encoder=ExpressionEncoder(m.resolution, m.token_dim, m.trunk_width),
        lm_net=LandmarkNet(m.resolution, m.token_dim, m.num_landmarks, m.trunk_width),
        id_loss_encoder=IdentityEncoder(m.resolution, m.token_dim, m.trunk_width),
        eval_backbone=EvalBackbone(m.resolution, m.eval_feature_dim),
    )
    if conditioners_dir is not None:
        load_conditioner_segments(conditioners_dir, components)
    else:
        logger.warning("no pretrained conditioners given; starting from random init")
        components.id_loss_encoder.load_state_dict(components.id_encoder.state_dict())
    return components


def load_conditioner_segments(directory: Path, components: ModelComponents) -> None:
    directory = Path(directory)
    components.id_encoder.load_state_dict(ckpt.load_segment(directory, "id")["state"])
    id_loss_role = "id_loss" if ckpt.has_segment(directory, "id_loss") else "id"
    components.id_loss_encoder.load_state_dict(
        ckpt.load_segment(directory, id_loss_role)["state"]
    )
    components.exp_encoder.face_trunk.load_state_dict(
        ckpt.load_segment(directory, "exp_face")["state"]
    )
    components.exp_encoder.id_trunk.load_state_dict(
        ckpt.load_segment(directory, "exp_id")["state"]
    )
    components.exp_encoder.align.load_state_dict(
        ckpt.load_segment(directory, "exp_align")["state"]
    )
    components.lm_net.load_state_dict(ckpt.load_segment(directory, "lm")["state"])
    if ckpt.has_segment(directory, "eval_backbone"):
        components.eval_backbone.load_state_dict(
            ckpt.load_segment(directory, "eval_backbone")["state"]
        )
    if ckpt.has_segment(directory, "fusion"):
        components.fusion.load_state_dict(ckpt.load_segment(directory, "fusion")["state"])
    if ckpt.has_segment(directory, "denoiser"):
        components.denoiser.load_state_dict(
            ckpt.load_segment(directory, "denoiser")["state"]
        )


def model_config_dict(model: ModelConfig) -> dict:
    d = dataclasses.asdict(model)
    d["channel_mults"] = list(d["channel_mults"])
    d["attn_resolutions"] = list(d["attn_resolutions"])
    return d


def save_component_segments(
    directory: Path, components: ModelComponents, model: ModelConfig
) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model_dict = model_config_dict(model)
    ckpt.save_segment(directory, "denoiser", components.denoiser.state_dict(),
                      config=model_dict)
    ckpt.save_segment(directory, "fusion", components.fusion.state_dict(),
                      config=model_dict)
    ckpt.save_segment(directory, "id", components.id_encoder.state_dict(),
                      config=model_dict)
    ckpt.save_segment(directory, "id_loss", components.id_loss_encoder.state_dict())
    ckpt.save_segment(directory, "exp_face", components.exp_encoder.face_trunk.state_dict())
    ckpt.save_segment(directory, "exp_id", components.exp_encoder.id_trunk.state_dict())
    ckpt.save_segment(directory, "exp_align", components.exp_encoder.align.state_dict())
    ckpt.save_segment(directory, "lm", components.lm_net.state_dict(), config=model_dict)
    ckpt.save_segment(
        directory,
        "eval_backbone",
        components.eval_backbone.state_dict(),
        config={"resolution": components.eval_backbone.resolution,
                "feature_dim": components.eval_backbone.feature_dim,
                "width": components.eval_backbone.width},
    )
    return ["denoiser", "fusion", "id", "id_loss", "exp_face", "exp_id",
            "exp_align", "lm", "eval_backbone"]


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.requires_grad_(False)
    return module


@dataclass(frozen=True)
class DenoiserConditions:
    """Conditioning handed through the sampler to the denoiser."""

    fused: Tensor
    id_vector: Tensor


@dataclass
class Synthesizer:
    """Checkpoint-backed generator: (identity image, style image) -> image."""

    components: ModelComponents
    sched: NoiseSchedule
    flags: AblationFlags
    model: ModelConfig

    @classmethod
    def from_checkpoint(cls, directory: Path) -> "Synthesizer":
        directory = Path(directory)
        manifest = ckpt.read_manifest(directory)
        cfg = train_config_from_dict(manifest["config"])
        components = build_components(cfg.model, cfg.flags, directory)
        sched = build_schedule(
            cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end,
            cfg.schedule.kind,
        )
        for mod in (
            components.denoiser, components.fusion, components.id_encoder,
            components.exp_encoder, components.lm_net, components.id_loss_encoder,
            components.eval_backbone,
        ):
            freeze(mod).eval()
        return cls(components, sched, cfg.flags, cfg.model)

    def conditions(self, id_images: Tensor, style_images: Tensor) -> DenoiserConditions:
        bundle = build_bundle(
            self.components.id_encoder,
            self.components.exp_encoder,
            self.components.lm_net,
            id_images,
            style_images,
            use_landmarks=self.flags.landmarks,
        )
        return DenoiserConditions(self.components.fusion(bundle), bundle.id_vector)

    def generate(
        self,
        id_images: Tensor,
        style_images: Tensor,
        seed: int,
        *,
        clamp: bool = True,
        clamp_recovered: bool = False,
    ) -> Tensor:
        """Sample one output per (identity, style) row; deterministic by seed."""
        if id_images.shape != style_images.shape:
            raise ValueError("identity and style batches must have equal shapes")
        with torch.no_grad():
            cond = self.conditions(id_images, style_images)

            def fn(x, t, c):
                return self.components.denoiser(x, t, c.fused, c.id_vector)

            out = sample(
                fn, cond, self.sched, seed, tuple(id_images.shape),
                clamp_recovered=clamp_recovered,
            )
        return out.clamp(-1.0, 1.0) if clamp else out
