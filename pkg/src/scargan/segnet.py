"""Segmentation network training and prediction.

The network predicts four exclusive classes (background, RV endo, LV endo,
LV epi) plus an auxiliary scar-probability head. LV myo is derived at
inference by subtracting the LV endo region from the filled LV epi region.
Training happens in two phases: pretraining on phantoms without scar
contrast (the no-contrast analogue), then fine-tuning on a regime manifest
with scar-weighted cross-entropy and the auxiliary scar task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import map_coordinates

from . import evalkit
from .dataset import (
    BACKGROUND,
    LV_ENDO,
    LV_MYO,
    RV_ENDO,
    SCAR,
    FoldAssignment,
    ScanSlice,
    SegMask,
    read_dataset,
    split_folds,
)
from .maskgan import TrainingDivergedError
from .nets import WeightSnapshot, build_segnet, instantiate
from .refinegan import normalize_slice

# Exclusive prediction classes. The epi class covers the myocardium ring
# (including scar); the filled epicardial region is epi + endo.
SEG_BACKGROUND = 0
SEG_RV_ENDO = 1
SEG_LV_ENDO = 2
SEG_LV_EPI = 3
SEG_CLASSES = 4

_CLASS_MAP = np.zeros(5, dtype=np.int64)
_CLASS_MAP[BACKGROUND] = SEG_BACKGROUND
_CLASS_MAP[RV_ENDO] = SEG_RV_ENDO
_CLASS_MAP[LV_ENDO] = SEG_LV_ENDO
_CLASS_MAP[LV_MYO] = SEG_LV_EPI
_CLASS_MAP[SCAR] = SEG_LV_EPI


class FoldLeakageError(RuntimeError):
    """A patient appears in both a training and a validation fold."""


@dataclass
class AugmentToggles:
    translation: bool = True
    scale: bool = True
    rotation: bool = True
    elastic: bool = True


@dataclass
class SegTrainConfig:
    learning_rate: float = 1e-4
    scar_pixel_weight: float = 5.0
    aux_loss_weight: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    max_translation_frac: float = 0.08
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotation_deg: float = 15.0
    elastic_sigma_px: float = 2.0
    seed: int = 0
    initial_filters: int = 96
    depth: int = 4
    convs_per_block: int = 3
    image_size: int = 192
    fold_count: int = 4

    def validate(self) -> None:
        if self.scar_pixel_weight < 1:
            raise ValueError("scar_pixel_weight must be at least 1")
        if self.aux_loss_weight < 0:
            raise ValueError("aux_loss_weight must be non-negative")
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError("steps must be positive and batch_size at least 2")


@dataclass
class SegPrediction:
    """Per-pixel class probabilities, aux scar map and derived regions."""

    probs: np.ndarray  # (4, H, W)
    aux_scar: np.ndarray  # (H, W) probabilities
    class_map: np.ndarray  # (H, W) argmax classes

    @property
    def lv_endo_mask(self) -> np.ndarray:
        return self.class_map == SEG_LV_ENDO

    @property
    def lv_epi_mask(self) -> np.ndarray:
        """Filled epicardial region: epi ring plus enclosed blood pool."""
        return (self.class_map == SEG_LV_EPI) | (self.class_map == SEG_LV_ENDO)

    @property
    def lv_myo_mask(self) -> np.ndarray:
        """LV myo = filled LV epi minus LV endo (pixel-set difference)."""
        return self.lv_epi_mask & ~self.lv_endo_mask

    @property
    def rv_endo_mask(self) -> np.ndarray:
        return self.class_map == SEG_RV_ENDO

    @property
    def aux_scar_mask(self) -> np.ndarray:
        """Thresholded aux head, for reporting only."""
        return self.aux_scar >= 0.5


def seg_targets(mask: SegMask) -> np.ndarray:
    """Map a 5-class mask to the 4 exclusive prediction classes."""
    return _CLASS_MAP[mask.classes]


def weighted_seg_loss(
    pred_main,
    pred_aux,
    target_classes,
    target_scar,
    config: SegTrainConfig,
) -> torch.Tensor:
    """Scar-weighted cross-entropy plus the auxiliary scar binary term.

    Pixels inside the ground-truth scar mask get ``scar_pixel_weight``; the
    weighted per-pixel terms are averaged over all pixels (weights scale the
    numerator only). The aux head contributes ``aux_loss_weight`` times the
    mean binary cross-entropy against the scar mask.
    """
    pred = torch.as_tensor(pred_main)
    target = torch.as_tensor(np.asarray(target_classes), dtype=torch.long)
    scar = torch.as_tensor(np.asarray(target_scar, dtype=bool))
    if pred.shape[-2:] != target.shape[-2:]:
        raise ValueError("prediction and target shapes disagree")
    p_true = pred.gather(-3, target.unsqueeze(-3)).squeeze(-3)
    ce = -p_true.clamp_min(1e-12).log()
    weights = torch.where(scar, float(config.scar_pixel_weight), 1.0).to(ce.dtype)
    loss = (weights * ce).mean()
    if pred_aux is not None and config.aux_loss_weight > 0:
        aux = torch.as_tensor(pred_aux)
        if aux.dim() == target.dim() + 1:
            aux = aux.squeeze(-3)
        t = scar.to(aux.dtype)
        bce = -(
            t * aux.clamp_min(1e-12).log() + (1.0 - t) * (1.0 - aux).clamp_min(1e-12).log()
        ).mean()
        loss = loss + config.aux_loss_weight * bce
    return loss


# --------------------------------------------------------------------------
# Geometric augmentation: one joint warp for image (bilinear) and labels
# (nearest), built from translation/scale/rotation plus a smooth elastic
# displacement field.
# --------------------------------------------------------------------------


def _elastic_field(shape: tuple[int, int], sigma_px: float, rng: np.random.Generator):
    h, w = shape
    grid = 4  # coarse control grid
    coarse = rng.uniform(-sigma_px, sigma_px, size=(2, grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    dy = map_coordinates(coarse[0], [gy, gx], order=1, mode="nearest")
    dx = map_coordinates(coarse[1], [gy, gx], order=1, mode="nearest")
    return dy, dx


def augment_sample(
    image01: np.ndarray,
    classes: np.ndarray,
    scar: np.ndarray,
    toggles: AugmentToggles,
    config: SegTrainConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the enabled random transforms jointly to image and labels."""
    h, w = image01.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    angle = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)) if toggles.rotation else 0.0
    scale = rng.uniform(*config.scale_range) if toggles.scale else 1.0
    ty = rng.uniform(-config.max_translation_frac, config.max_translation_frac) * h if toggles.translation else 0.0
    tx = rng.uniform(-config.max_translation_frac, config.max_translation_frac) * w if toggles.translation else 0.0

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # Inverse map: output pixel -> source coordinate.
    ys = (np.cos(angle) * (yy - cy) - np.sin(angle) * (xx - cx)) / scale + cy - ty
    xs = (np.sin(angle) * (yy - cy) + np.cos(angle) * (xx - cx)) / scale + cx - tx
    if toggles.elastic:
        dy, dx = _elastic_field((h, w), config.elastic_sigma_px, rng)
        ys = ys + dy
        xs = xs + dx

    img = map_coordinates(image01, [ys, xs], order=1, mode="constant", cval=0.0)
    cls = map_coordinates(classes, [ys, xs], order=0, mode="constant", cval=SEG_BACKGROUND)
    sc = map_coordinates(scar.astype(np.uint8), [ys, xs], order=0, mode="constant", cval=0)
    return img.astype(np.float32), cls.astype(np.int64), sc.astype(bool)


@dataclass
class _Sample:
    image01: np.ndarray
    classes: np.ndarray
    scar: np.ndarray


def _prepare_samples(
    slices: list[ScanSlice], scar_masks: list[np.ndarray] | None = None
) -> list[_Sample]:
    out = []
    for i, s in enumerate(slices):
        scar = scar_masks[i] if scar_masks is not None else np.zeros(s.shape, dtype=bool)
        out.append(
            _Sample(
                image01=normalize_slice(s.image)[0],
                classes=seg_targets(s.mask),
                scar=np.asarray(scar, dtype=bool),
            )
        )
    return out


def _build_net(config: SegTrainConfig, size: int):
    spec = build_segnet(
        initial_filters=config.initial_filters,
        depth=config.depth,
        convs_per_block=config.convs_per_block,
        input_size=size,
    )
    return spec, instantiate(spec, seed=config.seed)


def _train_loop(
    samples: list[_Sample],
    config: SegTrainConfig,
    tag: str,
    use_aux: bool,
    init_from: WeightSnapshot | None = None,
) -> WeightSnapshot:
    if not samples:
        raise ValueError("no training samples")
    size = samples[0].image01.shape[0]
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    spec, net = _build_net(config, size)
    if init_from is not None:
        init_from.to_module(net)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    aux_config = config if use_aux else SegTrainConfig(
        scar_pixel_weight=config.scar_pixel_weight, aux_loss_weight=0.0
    )

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(samples), config.batch_size)
        imgs, clss, scars = [], [], []
        for i in idx:
            s = samples[int(i)]
            img, cls, sc = augment_sample(s.image01, s.classes, s.scar, config.augment, config, rng)
            imgs.append(img)
            clss.append(cls)
            scars.append(sc)
        x = torch.from_numpy(np.stack(imgs)[:, None])
        main, aux = net(x)
        loss = weighted_seg_loss(
            main, aux if use_aux else None, np.stack(clss), np.stack(scars), aux_config
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return WeightSnapshot.from_module(spec, net, config.steps, tag)


def pretrain(phantom_slices: list[ScanSlice], config: SegTrainConfig) -> WeightSnapshot:
    """Pretrain on phantoms without scar contrast (plain cross-entropy)."""
    config.validate()
    for s in phantom_slices:
        if s.has_scar:
            raise ValueError(f"pretraining slice {s.slice_id} has scar contrast")
    samples = _prepare_samples(phantom_slices)
    return _train_loop(samples, config, tag="segnet_pretrain", use_aux=False)


def scar_supervision_mask(slice: ScanSlice, entry: dict, seed: int) -> np.ndarray:
    """Ground-truth scar mask for loss weighting and the aux head.

    Real slices get the half-maximum-threshold derivation from a seeded ROI;
    simulated slices use the generator's scar labels directly; scar-free
    slices get an empty mask.
    """
    provenance = entry.get("provenance", "real")
    if not slice.has_scar:
        return np.zeros(slice.shape, dtype=bool)
    if provenance == "simulated":
        return slice.mask.scar()
    return evalkit.fwhm_ground_truth(slice.image, slice.mask, seed=seed)


def predict(snapshot: WeightSnapshot, slice_or_image) -> SegPrediction:
    """Deterministic inference on one slice; see SegPrediction for outputs."""
    image = slice_or_image.image if isinstance(slice_or_image, ScanSlice) else slice_or_image
    img01 = normalize_slice(image)[0]
    net = snapshot.instantiate_module()
    net.eval()
    with torch.no_grad():
        main, aux = net(torch.from_numpy(img01[None, None]))
    probs = main[0].numpy()
    return SegPrediction(
        probs=probs,
        aux_scar=aux[0, 0].numpy(),
        class_map=probs.argmax(axis=0).astype(np.uint8),
    )


def evaluate_slices(
    snapshot: WeightSnapshot,
    slices: list[ScanSlice],
    gt_scar_masks: list[np.ndarray],
) -> dict:
    """Dice and scar-inclusion metrics over a validation set."""
    dice_endo, dice_epi, in_myo, in_endo = [], [], [], []
    for s, gt_scar in zip(slices, gt_scar_masks):
        pred = predict(snapshot, s)
        dice_endo.append(evalkit.dice(pred.lv_endo_mask, s.mask.lv_endo()))
        dice_epi.append(evalkit.dice(pred.lv_epi_mask, s.mask.lv_epi()))
        if gt_scar.any():
            inc = evalkit.scar_inclusion(gt_scar, pred.lv_endo_mask, pred.lv_myo_mask)
            in_myo.append(inc.pct_scar_in_myo)
            in_endo.append(inc.pct_scar_in_endo)
    out = {
        "dice_endo": float(np.mean(dice_endo)),
        "dice_epi": float(np.mean(dice_epi)),
        "n_val_slices": len(slices),
        "n_scar_slices": len(in_myo),
    }
    out["pct_scar_in_myo"] = float(np.mean(in_myo)) if in_myo else None
    out["pct_scar_in_endo"] = float(np.mean(in_endo)) if in_endo else None
    return out


def prediction_to_segmask(pred: SegPrediction) -> SegMask:
    """Export a prediction as a 5-class mask (scar = thresholded aux inside myo)."""
    out = np.zeros(pred.class_map.shape, dtype=np.uint8)
    out[pred.rv_endo_mask] = RV_ENDO
    out[pred.lv_myo_mask] = LV_MYO
    out[pred.lv_endo_mask] = LV_ENDO
    out[pred.aux_scar_mask & pred.lv_myo_mask] = SCAR
    return SegMask(out)


def assert_no_leakage(train_slices: list[ScanSlice], val_slices: list[ScanSlice], entries: dict) -> None:
    """Hard checks on a train/validation split: patient-level separation and
    no simulated slices on the validation side."""
    overlap = {s.patient_id for s in train_slices} & {s.patient_id for s in val_slices}
    if overlap:
        raise FoldLeakageError(f"patients in both train and validation: {sorted(overlap)}")
    leaked = [
        s.slice_id
        for s in val_slices
        if entries.get(s.slice_id, {}).get("provenance", "real") == "simulated"
    ]
    if leaked:
        raise FoldLeakageError(f"simulated slices in a validation fold: {leaked}")


@dataclass
class FinetuneResult:
    fold_results: list[dict]
    snapshots: list[WeightSnapshot]
    fold_assignment: FoldAssignment


def finetune(
    pretrained: WeightSnapshot,
    manifest_root: Path,
    config: SegTrainConfig,
    out_dir: Path | None = None,
    folds: list[int] | None = None,
) -> FinetuneResult:
    """Fine-tune per fold under patient-level cross-validation.

    Validation folds contain only real slices (simulated and plain scar-free
    entries are training-only); a patient appearing on both sides is a hard
    error. Per-fold metrics are written as JSON when ``out_dir`` is given.
    """
    config.validate()
    slices, manifest = read_dataset(manifest_root)
    entries = {e["slice_id"]: e for e in manifest["slices"]}
    regime = manifest.get("regime", "0x")
    patients = sorted({s.patient_id for s in slices})
    assignment = split_folds(patients, k=config.fold_count, seed=config.seed)
    scar_seed_base = config.seed * 100003

    gt_cache: dict[str, np.ndarray] = {}

    def gt_scar(s: ScanSlice) -> np.ndarray:
        if s.slice_id not in gt_cache:
            gt_cache[s.slice_id] = scar_supervision_mask(
                s, entries[s.slice_id], seed=scar_seed_base + hash(s.slice_id) % 100000
            )
        return gt_cache[s.slice_id]

    fold_ids = folds if folds is not None else list(range(config.fold_count))
    results: list[dict] = []
    snapshots: list[WeightSnapshot] = []
    for fold in fold_ids:
        val_patients = set(assignment.patients_in_fold(fold))
        train_slices = [s for s in slices if s.patient_id not in val_patients]
        val_slices = [
            s
            for s in slices
            if s.patient_id in val_patients
            and entries[s.slice_id].get("provenance", "real") == "real"
        ]
        assert_no_leakage(train_slices, val_slices, entries)
        if not train_slices or not val_slices:
            raise ValueError(f"fold {fold}: empty train or validation split")

        samples = _prepare_samples(train_slices, [gt_scar(s) for s in train_slices])
        snap = _train_loop(
            samples, config, tag=f"segnet_{regime}_fold{fold}", use_aux=True, init_from=pretrained
        )
        snapshots.append(snap)
        metrics = evaluate_slices(snap, val_slices, [gt_scar(s) for s in val_slices])
        record = {"fold": fold, "regime": regime, **metrics}
        results.append(record)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"fold{fold}_results.json").write_text(json.dumps(record, indent=2) + "\n")
    return FinetuneResult(fold_results=results, snapshots=snapshots, fold_assignment=assignment)
