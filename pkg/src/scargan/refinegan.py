"""Refining GAN: adds realistic texture to heuristic scar simulations.

Same least-squares adversarial setup as the mask stage, but the
regularizer is the mean absolute difference between the refined image and
its input, which keeps changes local. Images are handled in [0, 1]
(per-slice min-max normalized); the refiner outputs through a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .maskgan import (
    ReplayBuffer,
    TrainingDivergedError,
    _as_float_tensor,
    _jsonl_logger,
    disc_loss,
    replay_compose_batch,
    replay_push,
)
from .nets import (
    SnapshotMismatchError,
    WeightSnapshot,
    build_discriminator,
    build_generator,
    instantiate,
)


@dataclass
class RefineGanConfig:
    alpha: float = 10.0  # absolute-error regularization weight
    disc_steps_per_gen_step: int = 3
    batch_size: int = 8
    snapshot_every: int = 10000
    total_gen_steps: int = 50000
    replay_capacity: int | None = None
    learning_rate: float = 2e-4
    disc_learning_rate: float | None = None  # None: same as the generator
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    initial_filters: int = 64
    depth: int = 4
    dropout_p: float = 0.25
    image_size: int = 192
    snapshot_tag: str = "refiner"
    log_path: Path | None = None

    def resolved_replay_capacity(self) -> int:
        if self.replay_capacity is not None:
            return self.replay_capacity
        return 500 * self.batch_size

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.disc_steps_per_gen_step < 1:
            raise ValueError("disc_steps_per_gen_step must be at least 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even and at least 2")
        if self.resolved_replay_capacity() < self.batch_size // 2:
            raise ValueError("replay_capacity must be at least batch_size/2")


def refine_gen_loss(d_fake_score, refined_image, input_image, alpha: float) -> torch.Tensor:
    """(1 - D(R(x)))^2 plus alpha times the mean absolute change from the input."""
    d_fake = _as_float_tensor(d_fake_score)
    refined = _as_float_tensor(refined_image)
    original = torch.as_tensor(
        np.asarray(input_image) if not isinstance(input_image, torch.Tensor) else input_image
    ).to(refined.dtype)
    if refined.shape != original.shape:
        raise ValueError(f"image shapes differ: {tuple(refined.shape)} vs {tuple(original.shape)}")
    adv = ((1.0 - d_fake) ** 2).mean()
    return adv + alpha * (refined - original).abs().mean()


def normalize_slice(image: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-slice min-max normalization to [0, 1]; returns (image01, lo, hi)."""
    img = np.asarray(image, dtype=np.float32)
    lo = float(img.min())
    hi = float(img.max())
    if hi <= lo:
        return np.zeros_like(img), lo, hi
    return (img - lo) / (hi - lo), lo, hi


def denormalize_slice(image01: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.asarray(image01, dtype=np.float64) * (hi - lo) + lo


def _as_image01_stack(images) -> np.ndarray:
    """Stack images and min-max normalize each slice to [0, 1]."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        if len(images) == 0:
            raise ValueError("image dataset must be nonempty")
        arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim != 3:
        raise ValueError(f"expected a stack of 2-D images, got shape {arr.shape}")
    out = np.empty(arr.shape, dtype=np.float32)
    for i in range(arr.shape[0]):
        out[i] = normalize_slice(arr[i])[0]
    return out


def train_refinegan(
    heuristic_images,
    real_scar_images,
    config: RefineGanConfig,
    out_dir: Path | None = None,
) -> list[WeightSnapshot]:
    """Train the refiner against its discriminator (3 disc updates per gen update).

    ``heuristic_images`` are slices with heuristically painted scar;
    ``real_scar_images`` carry genuine scar. Both are normalized per slice.
    """
    config.validate()
    heur = _as_image01_stack(heuristic_images)
    real = _as_image01_stack(real_scar_images)
    if heur.shape[0] == 0 or real.shape[0] == 0:
        raise ValueError("both image datasets must be nonempty")
    if heur.shape[1] != heur.shape[2] or real.shape[1:] != heur.shape[1:]:
        raise ValueError("images must be square and share dimensions")
    size = heur.shape[1]

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    gen_spec = build_generator(
        1,
        1,
        "sigmoid",
        initial_filters=config.initial_filters,
        depth=config.depth,
        dropout_p=config.dropout_p,
        input_size=size,
    )
    disc_spec = build_discriminator(
        1, initial_filters=config.initial_filters, depth=config.depth, input_size=size
    )
    gen = instantiate(gen_spec, seed=config.seed)
    disc = instantiate(disc_spec, seed=config.seed + 1)
    opt_g = torch.optim.Adam(
        gen.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        disc.parameters(),
        lr=config.disc_learning_rate or config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    buffer = ReplayBuffer(config.resolved_replay_capacity(), seed=config.seed + 2)

    def sample_batch(stack: np.ndarray) -> torch.Tensor:
        idx = rng.integers(0, stack.shape[0], config.batch_size)
        return torch.from_numpy(stack[idx][:, None])  # (B, 1, H, W)

    log = _jsonl_logger(config.log_path)
    snapshots: list[WeightSnapshot] = []
    disc_updates = 0
    bs = config.batch_size
    try:
        for step in range(1, config.total_gen_steps + 1):
            for _ in range(config.disc_steps_per_gen_step):
                real_batch = sample_batch(real)
                with torch.no_grad():
                    fresh = gen(sample_batch(heur)).numpy()
                replay_push(buffer, fresh)
                fake_batch = torch.from_numpy(
                    replay_compose_batch(buffer, fresh, bs)
                )
                opt_d.zero_grad()
                # Shared batch-norm statistics across real and fake; see the
                # mask-stage trainer for the rationale.
                scores = disc(torch.cat([real_batch, fake_batch]))
                d_loss = disc_loss(scores[:bs], scores[bs:])
                d_loss.backward()
                opt_d.step()
                disc_updates += 1

            x = sample_batch(heur)
            opt_g.zero_grad()
            out = gen(x)
            mixed = torch.cat([sample_batch(real), out])
            g_loss = refine_gen_loss(disc(mixed)[bs:], out, x, config.alpha)
            if not torch.isfinite(g_loss):
                raise TrainingDivergedError(step, float(g_loss.detach()))
            g_loss.backward()
            opt_g.step()

            if log is not None:
                with torch.no_grad():
                    l1 = float((out - x).abs().mean())
                log.write(
                    json.dumps(
                        {
                            "step": step,
                            "gen_loss": float(g_loss.detach()),
                            "disc_loss": float(d_loss.detach()),
                            "l1_term": l1,
                            "gen_updates": step,
                            "disc_updates": disc_updates,
                        }
                    )
                    + "\n"
                )
            if step % config.snapshot_every == 0 or step == config.total_gen_steps:
                snap = WeightSnapshot.from_module(gen_spec, gen, step, config.snapshot_tag)
                snapshots.append(snap)
                if out_dir is not None:
                    snap.save(out_dir)
    finally:
        if log is not None:
            log.close()
    return snapshots


class Refiner:
    """Reusable inference wrapper around one refiner snapshot."""

    def __init__(self, snapshot: WeightSnapshot, dropout: bool = False):
        if snapshot.spec.kind != "generator" or snapshot.spec.out_channels != 1:
            raise SnapshotMismatchError("snapshot is not a single-channel refiner snapshot")
        self.snapshot = snapshot
        from .maskgan import _inference_module

        self.module = _inference_module(snapshot, dropout)

    def run(self, image01: np.ndarray, seed: int | None = None) -> np.ndarray:
        img = np.asarray(image01, dtype=np.float32)
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("refiner input must be normalized to [0, 1]")
        if seed is not None:
            torch.manual_seed(seed)
        x = torch.from_numpy(img[None, None])
        with torch.no_grad():
            out = self.module(x)[0, 0].numpy()
        return out


def refine(
    snapshot: WeightSnapshot,
    heuristic_image: np.ndarray,
    dropout: bool = False,
    seed: int | None = None,
) -> np.ndarray:
    """Run the refiner on a [0, 1] image; output stays in [0, 1].

    Deterministic with dropout disabled (the default).
    """
    return Refiner(snapshot, dropout=dropout).run(heuristic_image, seed=seed)
