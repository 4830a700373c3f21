"""The two-pass training loop: first diffusion, cycle diffusion, composite loss.

One step, per batch:

  1. draw eps ~ N(0, I) and per-item t ~ Uniform{0..steps-1}
  2. extract conditions (identity from x_id; expression and landmarks from x0)
     and fuse them
  3. first pass:  x_t = q_sample(x0, t, eps); predict eps; mse1 against eps;
     recover x0_hat; landmark + identity losses against the sources
  4. second pass (cycle): re-noise x0_hat with the SAME eps and t, predict
     again with the same network, recover; mse2 against the same eps; the
     landmark/identity targets stay the ORIGINAL x0 / x_id, never x0_hat
  5. update with first + sigma * second

Ablations: cycle off forces sigma to 0 and skips pass 2; landmarks off forces
gamma to 0 and drops the landmark token set from fusion; cross-fusion off
degenerates fusion to raw concatenation.

Gradients flow from the second pass through x0_hat into the first prediction
by default; `stop_grad_cycle` detaches x0_hat before re-noising instead.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .conditioners import build_bundle
from .config import AblationFlags, LossWeights, TrainConfig, train_config_to_dict
from .data import PairSampler, TrainingPair, load_manifest
from .diffusion import NoiseSchedule, build_schedule, q_sample, recover_x0
from .losses import LossBreakdown, loss_identity, loss_landmark, loss_mse
from .pipeline import (
    ModelComponents,
    Synthesizer,
    build_components,
    freeze,
    save_component_segments,
)

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class NonFiniteLossError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the breakdown."""


class CycleTrainer:
    """Owns the mutable weights, the optimizer and the step RNG.

    The same denoiser instance serves both diffusion passes (the second
    evaluation is the same network, not a second model). The expression
    module, landmark net and consistency-loss embedder are frozen; the
    denoiser, fusion and identity conditioner train.
    """

    def __init__(
        self,
        components: ModelComponents,
        sched: NoiseSchedule,
        weights: LossWeights,
        flags: AblationFlags,
        *,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        stop_grad_cycle: bool = False,
        generator: torch.Generator | None = None,
    ):
        self.c = components
        self.sched = sched
        self.weights = weights
        self.flags = flags
        self.stop_grad_cycle = stop_grad_cycle
        self.generator = generator or torch.Generator().manual_seed(0)
        freeze(self.c.exp_encoder)
        freeze(self.c.lm_net)
        freeze(self.c.id_loss_encoder)
        freeze(self.c.eval_backbone)
        self.optimizer = torch.optim.AdamW(
            self.trainable_parameters(), lr=lr, weight_decay=weight_decay
        )
        self.step_count = 0

    def trainable_parameters(self):
        params = []
        for mod in (self.c.denoiser, self.c.fusion, self.c.id_encoder):
            params.extend(p for p in mod.parameters() if p.requires_grad)
        return params

    # -- loss computation -------------------------------------------------

    def compute_losses(
        self, pair: TrainingPair, eps: Tensor, t: Tensor
    ) -> tuple[Tensor, LossBreakdown]:
        """Both diffusion passes for fixed (eps, t); no parameter update."""
        w = self.weights
        gamma_eff = w.gamma if self.flags.landmarks else 0.0
        sigma_eff = w.sigma if self.flags.cycle else 0.0
        x0, x_id = pair.x0, pair.x_id
        steps = self.sched.steps

        bundle = build_bundle(
            self.c.id_encoder, self.c.exp_encoder, self.c.lm_net,
            x_id, x0, use_landmarks=self.flags.landmarks,
        )
        fused = self.c.fusion(bundle)
        id_vector = bundle.id_vector

        x_t = q_sample(x0, t, eps, self.sched)
        eps_pred = self.c.denoiser(x_t, t, fused, id_vector)
        mse1 = loss_mse(eps, eps_pred)
        x0_hat = recover_x0(x_t, t, eps_pred, self.sched)
        zero = mse1.new_zeros(())
        lm1 = (
            loss_landmark(x0_hat, x0, self.c.lm_net.detect)
            if self.flags.landmarks else zero
        )
        id1 = loss_identity(x_id, x0, x0_hat, t, steps, self.c.id_loss_encoder.embed)
        first = mse1 + w.lam * id1 + gamma_eff * lm1

        if self.flags.cycle:
            basis = x0_hat.detach() if self.stop_grad_cycle else x0_hat
            x_t2 = q_sample(basis, t, eps, self.sched)
            eps_pred2 = self.c.denoiser(x_t2, t, fused, id_vector)
            mse2 = loss_mse(eps, eps_pred2)
            x0_hat2 = recover_x0(x_t2, t, eps_pred2, self.sched)
            lm2 = (
                loss_landmark(x0_hat2, x0, self.c.lm_net.detect)
                if self.flags.landmarks else zero
            )
            id2 = loss_identity(
                x_id, x0, x0_hat2, t, steps, self.c.id_loss_encoder.embed
            )
            second = mse2 + w.lam * id2 + gamma_eff * lm2
            total = first + sigma_eff * second
            mse2_f, id2_f, lm2_f = (
                float(mse2.detach()), float(id2.detach()), float(lm2.detach())
            )
        else:
            total = first
            mse2_f = id2_f = lm2_f = 0.0

        breakdown = LossBreakdown.compose(
            float(mse1.detach()), float(id1.detach()), float(lm1.detach()),
            mse2_f, id2_f, lm2_f,
            w.lam, gamma_eff, sigma_eff,
        )
        return total, breakdown

    def draw_step_inputs(self, pair: TrainingPair) -> tuple[Tensor, Tensor]:
        """RNG draws for one step, in fixed order: eps first, then t."""
        eps = torch.randn(
            pair.x0.shape, generator=self.generator, dtype=pair.x0.dtype
        )
        t = torch.randint(
            0, self.sched.steps, (pair.x0.shape[0],), generator=self.generator
        )
        return eps, t

    def train_step(self, pair: TrainingPair) -> LossBreakdown:
        eps, t = self.draw_step_inputs(pair)
        total, breakdown = self.compute_losses(pair, eps, t)
        if not torch.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_count}: {breakdown}"
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return breakdown

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, run_dir: Path, config: TrainConfig) -> Path:
        directory = ckpt.step_dir(run_dir, self.step_count)
        directory.mkdir(parents=True, exist_ok=True)
        segments = save_component_segments(directory, self.c, config.model)
        torch.save(
            {
                "format_version": ckpt.FORMAT_VERSION,
                "role": "trainer",
                "state": {
                    "optimizer": self.optimizer.state_dict(),
                    "rng": self.generator.get_state(),
                    "step": self.step_count,
                },
            },
            directory / "trainer.pt",
        )
        ckpt.write_manifest(
            directory,
            step=self.step_count,
            config=train_config_to_dict(config),
            segments=segments + ["trainer"],
        )
        return directory

    def restore(self, directory: Path) -> None:
        from .pipeline import load_conditioner_segments

        load_conditioner_segments(directory, self.c)
        payload = ckpt.load_segment(directory, "trainer")["state"]
        self.optimizer.load_state_dict(payload["optimizer"])
        self.generator.set_state(payload["rng"])
        self.step_count = payload["step"]


@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    breakdowns: list[LossBreakdown] = field(default_factory=list)
    afid_history: list[tuple[int, float]] = field(default_factory=list)


def train(config: TrainConfig) -> TrainResult:
    """Run the configured number of steps; log JSONL metrics and checkpoints.

    The metrics log at `{run_dir}/metrics.jsonl` gets one record per step
    {step, mse1, id1, lm1, mse2, id2, lm2, total} and, when periodic aligned
    scoring is enabled, one {step, afid} record per evaluation.
    """
    from .metrics import afid  # local import: metrics depends on pipeline

    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(Path(config.data_root))
    train_split = manifest.split("train")
    test_split = manifest.split("test")

    sched = build_schedule(
        config.schedule.steps, config.schedule.beta_start,
        config.schedule.beta_end, config.schedule.kind,
    )
    conditioners = Path(config.conditioners) if config.conditioners else None
    components = build_components(
        config.model, config.flags, conditioners, init_seed=config.seed
    )
    trainer = CycleTrainer(
        components, sched, config.weights, config.flags,
        lr=config.lr, weight_decay=config.weight_decay,
        stop_grad_cycle=config.stop_grad_cycle,
        generator=torch.Generator().manual_seed(config.seed),
    )
    sampler = PairSampler(train_split, trainer.generator)
    result = TrainResult(run_dir=run_dir, final_checkpoint=run_dir)

    t_start = time.monotonic()
    with open(run_dir / "metrics.jsonl", "a") as log:
        for step in range(1, config.steps + 1):
            pair = sampler.sample_batch(config.batch_size)
            breakdown = trainer.train_step(pair)
            result.breakdowns.append(breakdown)
            log.write(json.dumps(breakdown.log_record(step)) + "\n")

            if config.afid_interval and step % config.afid_interval == 0:
                synth = Synthesizer(components, sched, config.flags, config.model)
                score = afid(
                    test_split, synth.generate, components.eval_backbone,
                    config.afid_pairing_seed, batch_size=config.eval_batch,
                )
                result.afid_history.append((step, score))
                log.write(json.dumps({"step": step, "afid": score}) + "\n")
                logger.info("step %d afid %.4f", step, score)

            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                trainer.save_checkpoint(run_dir, config)

    result.final_checkpoint = trainer.save_checkpoint(run_dir, config)
    logger.info(
        "trained %d steps in %.1fs; final total %.4f",
        config.steps, time.monotonic() - t_start,
        result.breakdowns[-1].total if result.breakdowns else float("nan"),
    )
    return result
