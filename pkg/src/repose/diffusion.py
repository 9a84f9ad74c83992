"""Pixel-space inpainting diffusion at desk scale.

Forward process, epsilon-prediction objective, classifier-free guidance, an
ancestral sampler that composites the unmasked region back bit-exact, and a
seeded training loop over manifest pairs. Images live in [-1, 1] floats
internally; the schedule is kept in float64 so coefficient math is exact at
test tolerances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .conditioning import ConditioningPipeline, ConditioningBundle, Variant, make_image_encoder, make_text_encoder
from .denoiser import CondUNet, DenoiserConfig

CHECKPOINT_FORMAT_VERSION = 1


class InvalidSchedule(ValueError):
    """Schedule parameters violate 0 < beta_start <= beta_end < 1 or T < 1."""


class NonFiniteLoss(RuntimeError):
    """The training loss left the finite range; the step is aborted."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with derived cumulative products (float64)."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at timestep t in [1, T]."""
        return float(self.alpha_bars[t - 1])


def make_schedule(
    timesteps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02
) -> DiffusionSchedule:
    if timesteps < 1:
        raise InvalidSchedule(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(
        timesteps=timesteps, betas=betas, alphas=alphas, alpha_bars=alpha_bars
    )


def _per_sample(values: np.ndarray, t: Tensor, like: Tensor) -> Tensor:
    """Gather schedule coefficients for per-sample timesteps, broadcastable to like."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    out = table[t.long() - 1]
    return out.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: Tensor, t: Tensor | int, epsilon: Tensor, schedule: DiffusionSchedule) -> Tensor:
    """Closed-form forward marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) epsilon."""
    if isinstance(t, int):
        t = torch.full((x0.shape[0],), t, dtype=torch.long)
    ab = _per_sample(schedule.alpha_bars, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * epsilon


@dataclass
class DiffusionBatch:
    """One training batch; context already assembled per sample."""

    x0: Tensor             # (B, 3, H, W) in [-1, 1]
    mask: Tensor           # (B, 1, H, W) in {0, 1}
    masked_target: Tensor  # (B, 3, H, W) in [-1, 1]
    context: Tensor        # (B, rows, 768)


@dataclass
class DenoiserInput:
    """Everything the noise predictor sees apart from the context."""

    noisy: Tensor          # (B, 3, H, W)
    mask: Tensor           # (B, 1, H, W)
    masked_target: Tensor  # (B, 3, H, W)
    t: Tensor              # (B,)

    def channels(self) -> Tensor:
        return torch.cat([self.noisy, self.mask, self.masked_target], dim=1)


def noise_prediction_loss(
    denoiser, batch: DiffusionBatch, t: Tensor, epsilon: Tensor, schedule: DiffusionSchedule
) -> Tensor:
    """Mean-per-element squared error between true and predicted noise.

    Deterministic given (t, epsilon); the sampling wrapper is
    :func:`training_loss`.
    """
    x_t = q_sample(batch.x0, t, epsilon, schedule)
    inp = DenoiserInput(noisy=x_t, mask=batch.mask, masked_target=batch.masked_target, t=t)
    predicted = denoiser(inp.channels(), t, batch.context)
    loss = ((epsilon - predicted) ** 2).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss("training loss is not finite")
    return loss


def training_loss(
    denoiser, batch: DiffusionBatch, schedule: DiffusionSchedule, rng: torch.Generator
) -> Tensor:
    """Monte-Carlo objective: t uniform over [1, T], epsilon standard normal."""
    b = batch.x0.shape[0]
    t = torch.randint(1, schedule.timesteps + 1, (b,), generator=rng)
    epsilon = torch.randn(batch.x0.shape, generator=rng, dtype=batch.x0.dtype)
    return noise_prediction_loss(denoiser, batch, t, epsilon, schedule)


def cfg_epsilon(
    denoiser,
    inp: DenoiserInput,
    cond_context: Tensor,
    uncond_context: Tensor,
    w: float,
) -> Tensor:
    """Guided noise estimate eps_u + w (eps_c - eps_u).

    w == 0 and w == 1 return the single selected branch, so those cases are
    bit-exact (and skip the second forward pass).
    """
    if cond_context.shape != uncond_context.shape:
        raise ValueError("conditional/unconditional context shapes differ")
    x = inp.channels()
    if w == 0.0:
        return denoiser(x, inp.t, uncond_context)
    if w == 1.0:
        return denoiser(x, inp.t, cond_context)
    eps_c = denoiser(x, inp.t, cond_context)
    eps_u = denoiser(x, inp.t, uncond_context)
    return eps_u + w * (eps_c - eps_u)


def image_to_unit(image: np.ndarray) -> Tensor:
    """uint8 (H, W, C) -> float32 (C, H, W) in [-1, 1]."""
    array = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))


def unit_to_image(x: Tensor) -> np.ndarray:
    """float (C, H, W) in [-1, 1] -> uint8 (H, W, C), clamped."""
    array = x.detach().clamp(-1.0, 1.0).numpy().transpose(1, 2, 0)
    return np.round((array + 1.0) * 127.5).astype(np.uint8)


def _step_sequence(timesteps: int, steps: int) -> list[int]:
    """Descending timestep subsequence; steps == T gives the full T..1 chain."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    ascending = [((i + 1) * timesteps) // steps for i in range(steps)]
    return ascending[::-1]


@torch.no_grad()
def sample_edit(
    denoiser,
    masked_target: np.ndarray,
    mask: np.ndarray,
    bundle: ConditioningBundle,
    schedule: DiffusionSchedule,
    w: float,
    rng: torch.Generator,
    steps: int | None = None,
) -> np.ndarray:
    """Generate the masked region and composite it over the target.

    Ancestral sampling from pure noise; for a strided step sequence the
    update uses the cumulative-product ratio between consecutive chosen
    timesteps, which reduces to the textbook posterior step when the
    sequence is dense. The intermediate denoised estimate is clamped to the
    pixel value range, which keeps the early high-noise steps from
    amplifying prediction error. Pixels where mask == 0 are copied from the
    target image unchanged, so the unmasked region is bit-exact.
    """
    height, width = masked_target.shape[:2]
    masked_unit = image_to_unit(masked_target).unsqueeze(0)
    mask_unit = torch.from_numpy(mask.astype(np.float32)).reshape(1, 1, height, width)
    cond = bundle.context.unsqueeze(0).float()
    uncond = bundle.uncond_context.unsqueeze(0).float()

    sequence = _step_sequence(schedule.timesteps, steps or schedule.timesteps)
    x = torch.randn((1, 3, height, width), generator=rng)
    for i, t in enumerate(sequence):
        t_tensor = torch.full((1,), t, dtype=torch.long)
        inp = DenoiserInput(noisy=x, mask=mask_unit, masked_target=masked_unit, t=t_tensor)
        eps_hat = cfg_epsilon(denoiser, inp, cond, uncond, w)
        ab_t = schedule.alpha_bar(t)
        x0_pred = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        x0_pred = x0_pred.clamp(-1.0, 1.0)
        s = sequence[i + 1] if i + 1 < len(sequence) else 0
        if s == 0:
            x = x0_pred
            break
        # Noise estimate consistent with the clamped x0 (equals eps_hat when
        # no clamping occurred).
        eps_eff = (x - math.sqrt(ab_t) * x0_pred) / math.sqrt(1.0 - ab_t)
        ab_s = schedule.alpha_bar(s)
        var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)
        mean = math.sqrt(ab_s) * x0_pred + math.sqrt(max(1.0 - ab_s - var, 0.0)) * eps_eff
        noise = torch.randn(x.shape, generator=rng)
        x = mean + math.sqrt(var) * noise

    generated = unit_to_image(x[0])
    keep = mask.astype(bool)[..., None]
    return np.where(keep, generated, masked_target)


@dataclass
class TrainSample:
    """Precomputed per-pair tensors; encoder outputs are frozen, projections are not."""

    x0: Tensor              # (3, H, W)
    mask: Tensor            # (1, H, W)
    masked_target: Tensor   # (3, H, W)
    image_hidden: Tensor    # (257, 1024)
    text_emb: Tensor | None  # (77, 768)
    pose_vec: Tensor | None  # (51,) or (102,)


def make_train_sample(
    pipeline: ConditioningPipeline,
    target_image: np.ndarray,
    mask: np.ndarray,
    masked_target: np.ndarray,
    reference_crop: np.ndarray,
    caption: str | None,
    target_pose,
    reference_pose=None,
) -> TrainSample:
    from .conditioning import pose_vector

    height, width = target_image.shape[:2]
    variant = pipeline.variant
    text = None
    if variant.has_text:
        text = torch.as_tensor(pipeline.text_embedding(caption), dtype=torch.float32)
    pose = None
    if variant.has_pose:
        pose = torch.as_tensor(
            pose_vector(target_pose, reference_pose, pipeline.dual_pose), dtype=torch.float32
        )
    return TrainSample(
        x0=image_to_unit(target_image),
        mask=torch.from_numpy(mask.astype(np.float32)).reshape(1, height, width),
        masked_target=image_to_unit(masked_target),
        image_hidden=torch.as_tensor(pipeline.image_hidden(reference_crop), dtype=torch.float32),
        text_emb=text,
        pose_vec=pose,
    )


def collate_batch(pipeline: ConditioningPipeline, samples: Sequence[TrainSample]) -> DiffusionBatch:
    """Stack samples and assemble the differentiable per-sample context."""
    image_hidden = torch.stack([s.image_hidden for s in samples])
    text = torch.stack([s.text_emb for s in samples]) if pipeline.variant.has_text else None
    pose = torch.stack([s.pose_vec for s in samples]) if pipeline.variant.has_pose else None
    context = pipeline.batched_context(image_hidden, text, pose)
    return DiffusionBatch(
        x0=torch.stack([s.x0 for s in samples]),
        mask=torch.stack([s.mask for s in samples]),
        masked_target=torch.stack([s.masked_target for s in samples]),
        context=context,
    )


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"  # "cosine" decays per epoch; "constant" holds
    cond_dropout: float = 0.1
    checkpoint_every: int = 50
    seed: int = 0


@dataclass
class Checkpoint:
    """Self-describing training state; round-trips bit-exact via torch.save."""

    epoch: int
    variant: str
    dual_pose: bool
    denoiser_config: dict
    schedule_params: dict
    run_config: dict
    denoiser_state: dict
    image_proj_state: dict
    pose_proj_state: dict
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def capture(cls, denoiser: CondUNet, pipeline: ConditioningPipeline,
                schedule: DiffusionSchedule, run_config: dict, epoch: int) -> "Checkpoint":
        def clone(sd: dict) -> dict:
            return {k: v.detach().clone() for k, v in sd.items()}

        return cls(
            epoch=epoch,
            variant=pipeline.variant.value,
            dual_pose=pipeline.dual_pose,
            denoiser_config=asdict(denoiser.config),
            schedule_params={
                "timesteps": schedule.timesteps,
                "beta_start": float(schedule.betas[0]),
                "beta_end": float(schedule.betas[-1]),
            },
            run_config=dict(run_config),
            denoiser_state=clone(denoiser.state_dict()),
            image_proj_state=clone(pipeline.image_proj.state_dict()),
            pose_proj_state=clone(pipeline.pose_proj.state_dict()),
        )


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    torch.save(asdict(checkpoint), path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = torch.load(path, weights_only=False)
    if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {data.get('format_version')}")
    return Checkpoint(**data)


def restore_model(checkpoint: Checkpoint) -> tuple[CondUNet, ConditioningPipeline, DiffusionSchedule]:
    """Rebuild denoiser + conditioning pipeline from a checkpoint."""
    run = checkpoint.run_config
    config = DenoiserConfig(**{
        **checkpoint.denoiser_config,
        "channel_mults": tuple(checkpoint.denoiser_config["channel_mults"]),
    })
    denoiser = CondUNet(config)
    denoiser.load_state_dict(checkpoint.denoiser_state)
    pipeline = ConditioningPipeline(
        variant=Variant(checkpoint.variant),
        image_encoder=make_image_encoder(
            run.get("image_encoder", "hashed"), run.get("encoder_seed", 0)
        ),
        text_encoder=make_text_encoder(
            run.get("text_encoder", "hashed"), run.get("encoder_seed", 0)
        ),
        reference_resolution=run.get("reference_resolution", 64),
        dual_pose=checkpoint.dual_pose,
    )
    pipeline.image_proj.load_state_dict(checkpoint.image_proj_state)
    pipeline.pose_proj.load_state_dict(checkpoint.pose_proj_state)
    denoiser.eval()
    pipeline.eval()
    return denoiser, pipeline, make_schedule(**checkpoint.schedule_params)


def train(
    denoiser: CondUNet,
    pipeline: ConditioningPipeline,
    samples: Sequence[TrainSample],
    schedule: DiffusionSchedule,
    config: TrainConfig,
    run_config: dict | None = None,
    loss_log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Optimize denoiser + projections; returns the final checkpoint and
    per-epoch mean losses.

    Conditional contexts are swapped for the unconditional one with
    probability cond_dropout per sample, which is what makes guidance
    meaningful at inference. On a non-finite loss the last good state is
    checkpointed before the error propagates.
    """
    if not samples:
        raise ValueError("no training samples")
    run_config = run_config or {}
    rng = torch.Generator().manual_seed(config.seed)
    params = list(denoiser.parameters()) + list(pipeline.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = None
    if config.lr_schedule == "cosine" and config.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.epochs, eta_min=config.learning_rate * 0.05
        )
    elif config.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")

    log_rows: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    last_good = Checkpoint.capture(denoiser, pipeline, schedule, run_config, epoch=0)

    def checkpoint_now(epoch: int) -> Checkpoint:
        snap = Checkpoint.capture(denoiser, pipeline, schedule, run_config, epoch)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{epoch:05d}.pt", snap)
        return snap

    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(len(samples), generator=rng).tolist()
            losses = []
            for start in range(0, len(samples), config.batch_size):
                chosen = [samples[i] for i in order[start : start + config.batch_size]]
                batch = collate_batch(pipeline, chosen)
                uncond = pipeline.unconditional_context()
                drop = (
                    torch.rand(len(chosen), generator=rng) < config.cond_dropout
                )
                context = torch.where(
                    drop.reshape(-1, 1, 1), uncond.unsqueeze(0), batch.context
                )
                batch = DiffusionBatch(
                    x0=batch.x0, mask=batch.mask,
                    masked_target=batch.masked_target, context=context,
                )
                try:
                    loss = training_loss(denoiser, batch, schedule, rng)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(
                        f"{exc} (epoch {epoch}, step {step})"
                    ) from exc
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                losses.append(loss.item())
                log_rows.append((step, epoch, losses[-1]))
            if scheduler is not None:
                scheduler.step()
            epoch_losses.append(sum(losses) / len(losses))
            last_good = Checkpoint.capture(denoiser, pipeline, schedule, run_config, epoch)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                checkpoint_now(epoch)
    except NonFiniteLoss:
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / "checkpoint_last_good.pt", last_good)
        _write_loss_log(loss_log_path, log_rows)
        raise

    final = checkpoint_now(config.epochs) if config.epochs else last_good
    if checkpoint_dir is not None and config.epochs == 0:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(checkpoint_dir) / "checkpoint_00000.pt", final)
    _write_loss_log(loss_log_path, log_rows)
    return final, epoch_losses


def _write_loss_log(path: str | Path | None, rows: list[tuple[int, int, float]]) -> None:
    if path is None:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss"])
        writer.writerows(rows)
