"""Mask-stage GAN: simulates scar shapes on scar-free segmentation masks.

The generator maps a 5-channel one-hot mask (scar channel empty) to a
5-channel softmax mask that may contain scar. Least-squares adversarial
terms are regularized by cross-entropy against the generator's own input,
so every simulated scar pixel must be paid for by fooling the discriminator.
Experience replay keeps half of each discriminator fake batch drawn from
previously generated samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import LV_MYO, N_CLASSES, SCAR, SegMask
from .nets import (
    NetworkSpec,
    SnapshotMismatchError,
    WeightSnapshot,
    build_discriminator,
    build_generator,
    instantiate,
)


class TrainingDivergedError(RuntimeError):
    """Generator loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite generator loss ({loss}) at step {step}")
        self.step = step


@dataclass
class MaskGanConfig:
    alpha: float = 1.0  # cross-entropy regularization weight
    disc_steps_per_gen_step: int = 2
    batch_size: int = 8
    snapshot_every: int = 10000
    total_gen_steps: int = 50000
    replay_capacity: int | None = None  # default: 500 batches worth
    learning_rate: float = 2e-4
    disc_learning_rate: float | None = None  # None: same as the generator
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    initial_filters: int = 64
    depth: int = 4
    dropout_p: float = 0.25
    image_size: int = 192
    snapshot_tag: str = "maskgen"
    log_path: Path | None = None

    def resolved_replay_capacity(self) -> int:
        if self.replay_capacity is not None:
            return self.replay_capacity
        return 500 * self.batch_size

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.disc_steps_per_gen_step < 1:
            raise ValueError("disc_steps_per_gen_step must be at least 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even and at least 2")
        if self.resolved_replay_capacity() < self.batch_size // 2:
            raise ValueError("replay_capacity must be at least batch_size/2")
        if self.snapshot_every < 1 or self.total_gen_steps < 1:
            raise ValueError("snapshot_every and total_gen_steps must be positive")


class ReplayBuffer:
    """Bounded store of previously generated samples.

    Once full, pushes replace a stored item chosen uniformly at random.
    Sampling draws uniformly without replacement and never returns more
    items than are stored.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, samples: np.ndarray) -> None:
        """Store half of a newly generated batch (random half, rounded down)."""
        samples = np.asarray(samples)
        n = samples.shape[0]
        keep = self.rng.choice(n, n // 2, replace=False)
        for i in keep:
            item = samples[i].copy()
            if len(self.items) < self.capacity:
                self.items.append(item)
            else:
                self.items[int(self.rng.integers(0, self.capacity))] = item

    def sample(self, n: int) -> np.ndarray:
        k = min(n, len(self.items))
        if k == 0:
            return np.empty((0,), dtype=np.float32)
        idx = self.rng.choice(len(self.items), k, replace=False)
        return np.stack([self.items[int(i)] for i in idx])

    def compose_batch(self, fresh_samples: np.ndarray, batch_size: int) -> np.ndarray:
        """Half fresh, half replayed; shortfall in the buffer is filled with fresh."""
        fresh_samples = np.asarray(fresh_samples)
        if len(self.items) > 0 and batch_size % 2 != 0:
            raise ValueError("batch_size must be even when the buffer is non-empty")
        half = batch_size // 2
        replayed = self.sample(half)
        n_replayed = 0 if replayed.size == 0 else replayed.shape[0]
        n_fresh = batch_size - n_replayed
        if fresh_samples.shape[0] < n_fresh:
            raise ValueError(
                f"need {n_fresh} fresh samples to compose a batch of {batch_size}, got {fresh_samples.shape[0]}"
            )
        if n_replayed == 0:
            return fresh_samples[:n_fresh].copy()
        return np.concatenate([fresh_samples[:n_fresh], replayed], axis=0)


def replay_push(buffer: ReplayBuffer, samples: np.ndarray) -> ReplayBuffer:
    buffer.push(samples)
    return buffer


def replay_compose_batch(
    buffer: ReplayBuffer, fresh_samples: np.ndarray, batch_size: int
) -> np.ndarray:
    return buffer.compose_batch(fresh_samples, batch_size)


def _as_float_tensor(value) -> torch.Tensor:
    """Float tensors/arrays keep their precision; everything else becomes the
    default float dtype."""
    if isinstance(value, torch.Tensor):
        return value
    arr = np.asarray(value)
    if np.issubdtype(arr.dtype, np.floating):
        return torch.as_tensor(arr)
    return torch.as_tensor(arr, dtype=torch.get_default_dtype())


def _check_probabilities(pred_mask: torch.Tensor) -> None:
    sums = pred_mask.sum(dim=-3)
    if not torch.all((sums - 1.0).abs() <= 1e-4):
        worst = float((sums - 1.0).abs().max())
        raise ValueError(
            f"pred_mask rows must sum to 1 within 1e-4 (worst deviation {worst:.2e})"
        )


def mask_gen_loss(
    d_fake_score, pred_mask, input_mask, alpha: float
) -> torch.Tensor:
    """Least-squares fooling term plus cross-entropy against the input mask.

    (1 - D(M(x)))^2 averaged over the batch, plus alpha times the multiclass
    cross-entropy between the predicted probabilities and the (one-hot)
    input. The cross-entropy terms -t*log(p) are averaged over pixels and
    class planes, keeping the regularizer on the same [0, 1]-ish scale as
    the adversarial term at alpha = 1.
    """
    d_fake = _as_float_tensor(d_fake_score)
    pred = _as_float_tensor(pred_mask)
    target = torch.as_tensor(np.asarray(input_mask) if not isinstance(input_mask, torch.Tensor) else input_mask).to(pred.dtype)
    _check_probabilities(pred)
    adv = ((1.0 - d_fake) ** 2).mean()
    xent = -(target * pred.clamp_min(1e-12).log()).mean()
    return adv + alpha * xent


def disc_loss(d_real_score, d_fake_score) -> torch.Tensor:
    """Least-squares discriminator loss: real pulled to 1, fake to 0."""
    d_real = _as_float_tensor(d_real_score)
    d_fake = _as_float_tensor(d_fake_score)
    return ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()


def _as_class_stack(masks) -> np.ndarray:
    """Normalize a list of SegMask or an (N, H, W) array to a uint8 stack."""
    if isinstance(masks, np.ndarray):
        stack = masks
    else:
        if len(masks) == 0:
            raise ValueError("mask dataset must be nonempty")
        stack = np.stack([m.classes if isinstance(m, SegMask) else np.asarray(m) for m in masks])
    if stack.ndim != 3:
        raise ValueError(f"expected a stack of 2-D masks, got shape {stack.shape}")
    if stack.max(initial=0) >= N_CLASSES:
        raise ValueError("class out of range in mask stack")
    return stack.astype(np.uint8)


def _one_hot_batch(stack: np.ndarray) -> np.ndarray:
    n, h, w = stack.shape
    out = np.zeros((n, N_CLASSES, h, w), dtype=np.float32)
    for c in range(N_CLASSES):
        out[:, c] = stack == c
    return out


def _harden(soft: torch.Tensor) -> torch.Tensor:
    """Straight-through argmax: one-hot forward, softmax gradient backward.

    The discriminator compares crisp real masks against generated ones; fed
    raw softmax outputs it can win on smoothness alone and never pressure
    the generator about scar shapes. Discretizing the forward pass removes
    that shortcut while keeping the generator differentiable.
    """
    idx = soft.argmax(dim=1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(1, idx, 1.0)
    return hard + soft - soft.detach()


def _jsonl_logger(path: Path | None):
    if path is None:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w")


def train_maskgan(
    no_scar_masks,
    real_scar_masks,
    config: MaskGanConfig,
    out_dir: Path | None = None,
) -> list[WeightSnapshot]:
    """Train the mask generator against its discriminator.

    Per generator step the discriminator takes exactly
    ``disc_steps_per_gen_step`` updates, each on a fresh real batch and a
    replay-composed fake batch. Snapshots are emitted every
    ``snapshot_every`` generator steps and at termination. Reproducible for
    a fixed seed.
    """
    config.validate()
    no_scar = _as_class_stack(no_scar_masks)
    real = _as_class_stack(real_scar_masks)
    if no_scar.shape[0] == 0 or real.shape[0] == 0:
        raise ValueError("both mask datasets must be nonempty")
    if (no_scar == SCAR).any():
        raise ValueError("no_scar_masks must not contain scar pixels")
    if not all((real[i] == SCAR).any() for i in range(real.shape[0])):
        raise ValueError("every real-scar mask must contain scar pixels")
    size = no_scar.shape[1]
    if no_scar.shape[1] != no_scar.shape[2] or real.shape[1:] != no_scar.shape[1:]:
        raise ValueError("masks must be square and share dimensions")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    gen_spec = build_generator(
        N_CLASSES,
        N_CLASSES,
        "softmax",
        initial_filters=config.initial_filters,
        depth=config.depth,
        dropout_p=config.dropout_p,
        input_size=size,
    )
    disc_spec = build_discriminator(
        N_CLASSES, initial_filters=config.initial_filters, depth=config.depth, input_size=size
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
        return torch.from_numpy(_one_hot_batch(stack[idx]))

    log = _jsonl_logger(config.log_path)
    snapshots: list[WeightSnapshot] = []
    disc_updates = 0
    bs = config.batch_size
    try:
        for step in range(1, config.total_gen_steps + 1):
            for _ in range(config.disc_steps_per_gen_step):
                real_batch = sample_batch(real)
                with torch.no_grad():
                    fresh = _harden(gen(sample_batch(no_scar))).numpy()
                replay_push(buffer, fresh)
                fake_batch = torch.from_numpy(
                    replay_compose_batch(buffer, fresh, bs)
                )
                opt_d.zero_grad()
                # One forward over real+fake so batch-norm statistics are
                # shared; separate passes let both nets exploit the stats.
                scores = disc(torch.cat([real_batch, fake_batch]))
                d_loss = disc_loss(scores[:bs], scores[bs:])
                d_loss.backward()
                opt_d.step()
                disc_updates += 1

            x = sample_batch(no_scar)
            opt_g.zero_grad()
            out = gen(x)
            mixed = torch.cat([sample_batch(real), _harden(out)])
            g_loss = mask_gen_loss(disc(mixed)[bs:], out, x, config.alpha)
            if not torch.isfinite(g_loss):
                raise TrainingDivergedError(step, float(g_loss.detach()))
            g_loss.backward()
            opt_g.step()

            if log is not None:
                with torch.no_grad():
                    xent = float(-(x * out.clamp_min(1e-12).log()).mean())
                    scar_mean = float(out[:, SCAR].mean())
                log.write(
                    json.dumps(
                        {
                            "step": step,
                            "gen_loss": float(g_loss.detach()),
                            "disc_loss": float(d_loss.detach()),
                            "xent_term": xent,
                            "scar_pixel_mean": scar_mean,
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


def _inference_module(snapshot: WeightSnapshot, dropout: bool) -> torch.nn.Module:
    module = snapshot.instantiate_module()
    module.eval()  # batch norm uses stored running stats
    if dropout:
        for m in module.modules():
            if isinstance(m, torch.nn.Dropout):
                m.train()
    return module


class ShapeSimulator:
    """Reusable inference wrapper around one mask-generator snapshot."""

    def __init__(self, snapshot: WeightSnapshot, dropout: bool = True):
        if snapshot.spec.kind != "generator" or snapshot.spec.out_channels != N_CLASSES:
            raise SnapshotMismatchError("snapshot is not a 5-class mask-generator snapshot")
        self.snapshot = snapshot
        self.module = _inference_module(snapshot, dropout)

    def run(self, mask_no_scar: SegMask, seed: int | None = None) -> SegMask:
        if mask_no_scar.scar().any():
            raise ValueError("input mask must be scar-free")
        if seed is not None:
            torch.manual_seed(seed)
        x = torch.from_numpy(_one_hot_batch(mask_no_scar.classes[None]))
        with torch.no_grad():
            probs = self.module(x)[0].numpy()
        pred = probs.argmax(axis=0).astype(np.uint8)
        out = mask_no_scar.classes.copy()
        out[(pred == SCAR) & (mask_no_scar.classes == LV_MYO)] = SCAR
        return SegMask(out)


def simulate_shape(
    snapshot: WeightSnapshot,
    mask_no_scar: SegMask,
    dropout: bool = True,
    seed: int | None = None,
) -> SegMask:
    """Simulate a scar shape on a scar-free mask.

    The output keeps the input anatomy everywhere; predicted scar is accepted
    only inside the input LV myo region, so scar is guaranteed to live in
    myocardium. Dropout stays active by default as the generator's noise
    source; disable it (and fix the snapshot) for deterministic output.
    """
    return ShapeSimulator(snapshot, dropout=dropout).run(mask_no_scar, seed=seed)
