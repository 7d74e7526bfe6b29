"""Full simulation chain and training-set assembly.

Chains shape simulation, heuristic painting, refinement and blending into
``simulate_slice``, picks diverse mask-generator snapshots, and assembles
the 0x / 0x+ / 1x / 3x / 5x training regimes with provenance bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .dataset import LV_ENDO, LV_MYO, SCAR, ScanSlice, SegMask, write_dataset
from .heuristic import HeuristicParams, paint_scar
from .maskgan import ShapeSimulator
from .nets import WeightSnapshot
from .refinegan import Refiner, denormalize_slice, normalize_slice

REGIMES = ("0x", "0x+", "1x", "3x", "5x")


@dataclass
class BlendParams:
    kernel_size: int = 5
    sigma: float = 1.0

    def validate(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class AugmentPlan:
    """What to build: regime, snapshots and chain parameters."""

    regime: str
    snapshot_set: list[WeightSnapshot] = field(default_factory=list)
    refiner: WeightSnapshot | None = None
    blend_params: BlendParams = field(default_factory=BlendParams)
    heuristic_params: HeuristicParams = field(default_factory=HeuristicParams)
    dropout: bool = True
    seed: int = 0

    def snapshot_count(self) -> int:
        if self.regime in ("0x", "0x+"):
            return 0
        return int(self.regime[:-1])

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        k = self.snapshot_count()
        if len(self.snapshot_set) != k:
            raise ValueError(
                f"regime {self.regime} needs exactly {k} snapshots, got {len(self.snapshot_set)}"
            )
        if k > 0 and self.refiner is None:
            raise ValueError(f"regime {self.regime} needs a refiner snapshot")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel sampled at integer offsets."""
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def make_blend_weights(myo_mask: np.ndarray, params: BlendParams | None = None) -> np.ndarray:
    """Gaussian blur of the binary myocardium indicator, zero-padded at borders.

    Weights lie in [0, 1] and vanish beyond the kernel's reach (2 px for the
    default 5x5 kernel), so blending cannot touch far-away pixels.
    """
    params = params or BlendParams()
    params.validate()
    myo = np.asarray(myo_mask, dtype=np.float64)
    if not np.isin(np.unique(myo), (0.0, 1.0)).all():
        raise ValueError("myo_mask must be binary")
    kernel = gaussian_kernel(params.kernel_size, params.sigma)
    weights = convolve(myo, kernel, mode="constant", cval=0.0)
    return np.clip(weights, 0.0, 1.0)


def blend(
    original_image: np.ndarray,
    refined_image: np.ndarray,
    weights: np.ndarray,
    quantize: bool = True,
) -> np.ndarray:
    """Per-pixel weighted average: w*refined + (1-w)*original.

    With ``quantize`` the float result is rounded half-up back into the
    original integer domain; pass ``quantize=False`` for the raw floats.
    """
    original = np.asarray(original_image)
    refined = np.asarray(refined_image, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if original.shape != refined.shape or original.shape != w.shape:
        raise ValueError("image and weight shapes must match")
    if w.min() < 0.0 or w.max() > 1.0:
        raise ValueError("weights must lie in [0, 1]")
    out = w * refined + (1.0 - w) * original.astype(np.float64)
    if not quantize:
        return out
    if not np.issubdtype(original.dtype, np.integer):
        raise ValueError("quantization requires an integer-typed original image")
    info = np.iinfo(original.dtype)
    return np.clip(np.floor(out + 0.5), info.min, info.max).astype(original.dtype)


def _shape_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int((a | b).sum())
    if union == 0:
        return 1.0  # two empty shapes are identical
    return int((a & b).sum()) / union


def _contact_sheet(shapes: dict[str, list[np.ndarray]], probes: list[SegMask], path: Path) -> None:
    """Grid PNG: one row per snapshot, one column per probe, scar in white."""
    from PIL import Image

    names = sorted(shapes.keys())
    h, w = probes[0].shape
    pad = 2
    rows, cols = len(names), len(probes)
    sheet = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    for r, name in enumerate(names):
        for c, probe in enumerate(probes):
            cell = np.where(probe.region(LV_MYO), 80, 20).astype(np.uint8)
            cell[probe.lv_endo()] = 50
            cell[shapes[name][c]] = 255
            sheet[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = cell
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, mode="L").save(path)


def select_snapshots(
    snapshots: list[WeightSnapshot],
    k: int,
    probe_masks: list[SegMask],
    override_names: list[str] | None = None,
    contact_sheet_path: Path | None = None,
) -> list[WeightSnapshot]:
    """Pick k snapshots whose simulated shapes are mutually diverse.

    Each snapshot generates a shape for every probe (dropout disabled, so the
    scoring is deterministic); snapshot pairs are scored by the mean IoU of
    their shapes and a greedy pass keeps total pairwise IoU minimal. A
    contact sheet can be written for manual inspection, and an explicit name
    list overrides the automatic choice.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if len(snapshots) < k:
        raise ValueError(f"need at least {k} snapshots, got {len(snapshots)}")
    if not probe_masks:
        raise ValueError("probe_masks must be nonempty")
    for p in probe_masks:
        if p.scar().any():
            raise ValueError("probe masks must be scar-free")

    ordered = sorted(snapshots, key=lambda s: (s.step, s.tag))
    by_name = {s.name: s for s in ordered}
    if len(by_name) != len(ordered):
        raise ValueError("snapshot names (tag + step) must be unique")

    shapes: dict[str, list[np.ndarray]] = {}
    for snap in ordered:
        sim = ShapeSimulator(snap, dropout=False)
        shapes[snap.name] = [sim.run(p).scar() for p in probe_masks]
    if contact_sheet_path is not None:
        _contact_sheet(shapes, probe_masks, contact_sheet_path)

    if override_names is not None:
        if len(override_names) != k:
            raise ValueError(f"override must name exactly {k} snapshots")
        missing = [n for n in override_names if n not in by_name]
        if missing:
            raise ValueError(f"override names not found: {missing}")
        return [by_name[n] for n in override_names]

    names = [s.name for s in ordered]
    iou: dict[tuple[str, str], float] = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            val = float(np.mean([_shape_iou(x, y) for x, y in zip(shapes[a], shapes[b])]))
            iou[(a, b)] = iou[(b, a)] = val

    def pair_cost(a: str, b: str) -> float:
        return iou[(a, b)]

    if len(names) == k:
        return [by_name[n] for n in names]
    if k == 1:
        best = min(names, key=lambda n: (sum(pair_cost(n, m) for m in names if m != n), n))
        return [by_name[best]]

    # Seed with the least-similar pair, then grow greedily.
    first = min(
        ((a, b) for i, a in enumerate(names) for b in names[i + 1 :]),
        key=lambda ab: (pair_cost(*ab), ab),
    )
    selected = list(first)
    while len(selected) < k:
        best = min(
            (n for n in names if n not in selected),
            key=lambda n: (sum(pair_cost(n, m) for m in selected), n),
        )
        selected.append(best)
    return [by_name[n] for n in selected]


@dataclass
class SimulationResult:
    slice: ScanSlice
    degenerate: bool
    mask_snapshot_name: str
    refiner_snapshot_name: str
    source_slice_id: str

    @property
    def provenance(self) -> dict:
        entry = {
            "provenance": "simulated",
            "mask_snapshot_tag": self.mask_snapshot_name,
            "refiner_snapshot_tag": self.refiner_snapshot_name,
            "source_slice_id": self.source_slice_id,
        }
        if self.degenerate:
            entry["degenerate"] = True
        return entry


def simulate_slice(
    slice_no_scar: ScanSlice,
    mask_snapshot: WeightSnapshot,
    refiner_snapshot: WeightSnapshot,
    blend_params: BlendParams | None = None,
    heuristic_params: HeuristicParams | None = None,
    dropout: bool = True,
    seed: int | None = None,
    slice_id: str | None = None,
    _shape_sim: ShapeSimulator | None = None,
    _refiner: Refiner | None = None,
) -> SimulationResult:
    """Run the whole chain on one scar-free slice.

    Shape simulation -> heuristic painting -> refinement -> blending. The
    output mask is the input mask with simulated scar labels inserted. An
    empty generated shape passes the slice through unchanged with the
    ``degenerate`` flag set.
    """
    if slice_no_scar.has_scar:
        raise ValueError("simulate_slice expects a scar-free input slice")
    blend_params = blend_params or BlendParams()
    heuristic_params = heuristic_params or HeuristicParams()
    sim = _shape_sim if _shape_sim is not None else ShapeSimulator(mask_snapshot, dropout=dropout)
    new_id = slice_id if slice_id is not None else f"{slice_no_scar.slice_id}__{mask_snapshot.name}"

    shaped = sim.run(slice_no_scar.mask, seed=seed)
    scar_px = shaped.scar()
    if not scar_px.any():
        passthrough = ScanSlice(
            image=slice_no_scar.image.copy(),
            mask=slice_no_scar.mask.copy(),
            patient_id=slice_no_scar.patient_id,
            slice_id=new_id,
            has_scar=False,
        )
        return SimulationResult(
            slice=passthrough,
            degenerate=True,
            mask_snapshot_name=mask_snapshot.name,
            refiner_snapshot_name=refiner_snapshot.name,
            source_slice_id=slice_no_scar.slice_id,
        )

    heuristic_img = paint_scar(
        slice_no_scar.image, scar_px, slice_no_scar.mask.lv_endo(), heuristic_params
    )
    img01, lo, hi = normalize_slice(heuristic_img)
    refiner = _refiner if _refiner is not None else Refiner(refiner_snapshot, dropout=False)
    refined01 = refiner.run(img01)
    refined = denormalize_slice(refined01, lo, hi)

    myo_for_blend = slice_no_scar.mask.lv_myo()  # simulated scar lives inside it
    weights = make_blend_weights(myo_for_blend, blend_params)
    final = blend(slice_no_scar.image, refined, weights)

    out = ScanSlice(
        image=final,
        mask=shaped,
        patient_id=slice_no_scar.patient_id,
        slice_id=new_id,
        has_scar=True,
    )
    return SimulationResult(
        slice=out,
        degenerate=False,
        mask_snapshot_name=mask_snapshot.name,
        refiner_snapshot_name=refiner_snapshot.name,
        source_slice_id=slice_no_scar.slice_id,
    )


def build_training_set(
    real_scar_slices: list[ScanSlice],
    no_scar_slices: list[ScanSlice],
    plan: AugmentPlan,
    out_root: Path,
) -> dict:
    """Assemble one training regime into a dataset directory.

    0x keeps only real-scar slices, 0x+ adds the unmodified scar-free pool,
    and kx adds k simulation passes over the scar-free pool (pass i uses
    snapshot i). Every manifest entry carries its provenance; fold logic
    downstream keeps simulated slices out of validation.
    """
    plan.validate()
    if not real_scar_slices:
        raise ValueError("real-scar pool is empty")
    for s in real_scar_slices:
        if not s.has_scar:
            raise ValueError(f"slice {s.slice_id} in the real-scar pool has no scar")
    for s in no_scar_slices:
        if s.has_scar:
            raise ValueError(f"slice {s.slice_id} in the scar-free pool has scar")
    k = plan.snapshot_count()
    if k > 0 and not no_scar_slices:
        raise ValueError(f"regime {plan.regime} needs a nonempty scar-free pool")

    slices: list[ScanSlice] = []
    extra: dict[str, dict] = {}
    for s in real_scar_slices:
        slices.append(s)
        extra[s.slice_id] = {"provenance": "real"}
    if plan.regime == "0x+":
        for s in no_scar_slices:
            slices.append(s)
            extra[s.slice_id] = {"provenance": "no_scar"}

    degenerate_count = 0
    if k > 0:
        refiner = Refiner(plan.refiner, dropout=False)
        rng = np.random.default_rng(plan.seed)
        for snap in plan.snapshot_set:
            sim = ShapeSimulator(snap, dropout=plan.dropout)
            for s in no_scar_slices:
                result = simulate_slice(
                    s,
                    snap,
                    plan.refiner,
                    blend_params=plan.blend_params,
                    heuristic_params=plan.heuristic_params,
                    dropout=plan.dropout,
                    seed=int(rng.integers(0, 2**31 - 1)) if plan.dropout else None,
                    _shape_sim=sim,
                    _refiner=refiner,
                )
                slices.append(result.slice)
                extra[result.slice.slice_id] = result.provenance
                degenerate_count += int(result.degenerate)

    manifest_path = write_dataset(
        slices,
        out_root,
        extra_entries=extra,
        manifest_extra={
            "regime": plan.regime,
            "mask_snapshots": [s.name for s in plan.snapshot_set],
            "refiner_snapshot": plan.refiner.name if plan.refiner else None,
            "degenerate_count": degenerate_count,
            "plan_seed": plan.seed,
        },
    )
    import json

    return json.loads(manifest_path.read_text())
