"""Desk-mode pretraining of the condition extractors on the synthetic generator.

Stages, in order:

  1. identity encoder: person classification over the train split, fresh
     renders of each person under random expressions
  2. expression module: the id twin trunk is frozen at the identity trunk's
     weights; the face trunk + alignment conv train on expression-id
     classification of the deviation features; everything freezes afterwards
  3. landmark net: coordinate regression against the generator's analytic
     ground truth on fully random faces
  4. eval backbone: person classification through the metric feature head

All stages render training batches on the fly from the dataset's saved
generator specs, so the detector sees unlimited fresh samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .conditioners import EvalBackbone, ExpressionEncoder, IdentityEncoder, LandmarkNet
from .config import ModelConfig
from .data import (
    DatasetSpecs,
    SynthFaceSpec,
    load_specs,
    quantize,
    render_face,
    sample_expression,
    sample_identity,
    sample_palsy,
    to_unit_range,
)
from .pipeline import model_config_dict

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps_identity: int = 250
    steps_expression: int = 250
    steps_landmark: int = 700
    steps_eval: int = 250
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


class _Renders:
    """On-the-fly render batches from saved generator specs."""

    def __init__(self, specs: DatasetSpecs, seed: int):
        self.specs = specs
        self.rng = np.random.default_rng(seed)
        self.train_persons = sorted(
            p for p, s in specs.splits.items() if s == "train"
        )

    def _tensorize(self, spec: SynthFaceSpec):
        img = to_unit_range(quantize(render_face(spec, self.specs.resolution)))
        return img

    def person_batch(self, n: int):
        """Random train persons under fresh random expressions."""
        imgs, labels = [], []
        for _ in range(n):
            k = int(self.rng.integers(len(self.train_persons)))
            expr = sample_expression(self.rng)
            atten, _ = sample_palsy(self.rng)
            spec = SynthFaceSpec(
                self.specs.identities[self.train_persons[k]], expr, atten,
                self.specs.num_points,
            )
            imgs.append(self._tensorize(spec))
            labels.append(k)
        return torch.stack(imgs), torch.tensor(labels)

    def expression_batch(self, n: int):
        """Random identities under the dataset's shared expression table."""
        imgs, labels = [], []
        for _ in range(n):
            j = int(self.rng.integers(len(self.specs.expressions)))
            expr, atten, _ = self.specs.expressions[j]
            spec = SynthFaceSpec(
                sample_identity(self.rng), expr, atten, self.specs.num_points
            )
            imgs.append(self._tensorize(spec))
            labels.append(j)
        return torch.stack(imgs), torch.tensor(labels)

    def landmark_batch(self, n: int):
        """Fully random faces with analytic keypoints."""
        imgs, points = [], []
        for _ in range(n):
            expr = sample_expression(self.rng)
            atten, _ = sample_palsy(self.rng)
            spec = SynthFaceSpec(
                sample_identity(self.rng), expr, atten, self.specs.num_points
            )
            imgs.append(self._tensorize(spec))
            points.append(torch.from_numpy(spec.landmarks()).float())
        return torch.stack(imgs), torch.stack(points)


def _fit(module: nn.Module, loss_fn, batches, steps: int, lr: float, tag: str):
    opt = torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=lr)
    last = float("nan")
    for step in range(1, steps + 1):
        loss = loss_fn(*batches())
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss)
        if step % 100 == 0 or step == steps:
            logger.info("pretrain[%s] step %d loss %.4f", tag, step, last)
    return last


def pretrain_conditioners(
    dataset_dir: Path,
    out_dir: Path,
    model: ModelConfig,
    cfg: PretrainConfig | None = None,
) -> Path:
    """Train all conditioner backbones and save a versioned checkpoint dir."""
    cfg = cfg or PretrainConfig()
    specs = load_specs(Path(dataset_dir))
    if specs.resolution != model.resolution:
        raise ValueError(
            f"dataset resolution {specs.resolution} != model resolution "
            f"{model.resolution}"
        )
    if specs.num_points != model.num_landmarks:
        raise ValueError(
            f"dataset has {specs.num_points} landmarks, model expects "
            f"{model.num_landmarks}"
        )
    torch.manual_seed(cfg.seed)
    renders = _Renders(specs, cfg.seed)
    n_persons = len(renders.train_persons)
    n_expr = len(specs.expressions)

    # 1. identity encoder
    id_encoder = IdentityEncoder(model.resolution, model.token_dim, model.trunk_width)
    id_head = nn.Linear(model.token_dim, n_persons)

    def id_loss(imgs, labels):
        return F.cross_entropy(id_head(id_encoder.embed(imgs)), labels)

    id_module = nn.ModuleList([id_encoder, id_head])
    _fit(id_module, id_loss, lambda: renders.person_batch(cfg.batch_size),
         cfg.steps_identity, cfg.lr, "identity")

    # 2. expression module: id twin frozen at identity-classifier weights
    exp = ExpressionEncoder(model.resolution, model.token_dim, model.trunk_width)
    exp.id_trunk.load_state_dict(id_encoder.trunk.state_dict())
    exp.id_trunk.requires_grad_(False)
    exp_head = nn.Linear(model.token_dim, n_expr)

    def exp_loss(imgs, labels):
        tokens = exp(imgs)
        return F.cross_entropy(exp_head(tokens.mean(dim=1)), labels)

    exp_module = nn.ModuleList([exp, exp_head])
    _fit(exp_module, exp_loss, lambda: renders.expression_batch(cfg.batch_size),
         cfg.steps_expression, cfg.lr, "expression")

    # 3. landmark detector / feature trunk
    lm_net = LandmarkNet(
        model.resolution, model.token_dim, model.num_landmarks, model.trunk_width
    )

    def lm_loss(imgs, points):
        return F.mse_loss(lm_net.detect(imgs), points)

    _fit(lm_net, lm_loss, lambda: renders.landmark_batch(cfg.batch_size),
         cfg.steps_landmark, cfg.lr, "landmark")

    # 4. eval backbone
    backbone = EvalBackbone(model.resolution, model.eval_feature_dim)
    eval_head = nn.Linear(model.eval_feature_dim, n_persons)

    def eval_loss(imgs, labels):
        return F.cross_entropy(eval_head(backbone.embed(imgs)), labels)

    eval_module = nn.ModuleList([backbone, eval_head])
    _fit(eval_module, eval_loss, lambda: renders.person_batch(cfg.batch_size),
         cfg.steps_eval, cfg.lr, "eval-backbone")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_dict = model_config_dict(model)
    ckpt.save_segment(out_dir, "id", id_encoder.state_dict(), config=model_dict)
    ckpt.save_segment(out_dir, "exp_face", exp.face_trunk.state_dict())
    ckpt.save_segment(out_dir, "exp_id", exp.id_trunk.state_dict())
    ckpt.save_segment(out_dir, "exp_align", exp.align.state_dict())
    ckpt.save_segment(out_dir, "lm", lm_net.state_dict(), config=model_dict)
    ckpt.save_segment(
        out_dir, "eval_backbone", backbone.state_dict(),
        config={"resolution": model.resolution,
                "feature_dim": model.eval_feature_dim, "width": backbone.width},
    )
    ckpt.write_manifest(
        out_dir, step=0,
        config={"model": model_dict, "pretrain": dataclass_dict(cfg),
                "dataset": str(dataset_dir)},
        segments=["id", "exp_face", "exp_id", "exp_align", "lm", "eval_backbone"],
    )
    logger.info("pretrained conditioners saved to %s", out_dir)
    return out_dir


def dataclass_dict(obj) -> dict:
    import dataclasses

    return dataclasses.asdict(obj)
