"""Core data types, synthetic cardiac phantom generation, on-disk formats and fold splitting.

The phantom corpus stands in for clinical LGE short-axis scans: a bright
blood pool (LV endo), a dark myocardial annulus (LV myo), an RV blood pool,
and optionally a hyperintense scar arc inside the annulus whose intensity
overlaps the blood pool. Everything downstream (GAN training, segmentation,
evaluation) consumes these types.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

# Class indices used by every mask in the pipeline.
BACKGROUND = 0
RV_ENDO = 1
LV_MYO = 2
LV_ENDO = 3
SCAR = 4
N_CLASSES = 5
CLASS_NAMES = ("background", "rv_endo", "lv_myo", "lv_endo", "scar")

DEFAULT_SIZE = 192

# Phantom background tissue level (scanner units); not exposed as a knob.
_BG_LEVEL = 2500.0


class SliceFormatError(ValueError):
    """A slice file on disk is corrupt or violates the format contract."""


class PhantomGeometryError(ValueError):
    """Phantom parameters describe shapes that do not fit the frame."""


@dataclass(eq=False)
class SegMask:
    """Per-pixel class map over {background, RV endo, LV myo, LV endo, scar}."""

    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if self.classes.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.classes.shape}")
        if self.classes.dtype != np.uint8:
            if self.classes.min() < 0 or self.classes.max() >= N_CLASSES:
                raise ValueError("class out of range: labels must lie in 0..4")
            self.classes = self.classes.astype(np.uint8)
        if self.classes.max(initial=0) >= N_CLASSES:
            raise ValueError(
                f"class out of range: found label {int(self.classes.max())}, max is {N_CLASSES - 1}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def one_hot(self) -> np.ndarray:
        """Return (5, H, W) float32 one-hot planes; they sum to 1 everywhere."""
        planes = np.zeros((N_CLASSES,) + self.classes.shape, dtype=np.float32)
        for c in range(N_CLASSES):
            planes[c] = self.classes == c
        return planes

    def region(self, *labels: int) -> np.ndarray:
        out = np.zeros(self.classes.shape, dtype=bool)
        for c in labels:
            out |= self.classes == c
        return out

    def scar(self) -> np.ndarray:
        return self.classes == SCAR

    def lv_myo(self) -> np.ndarray:
        return self.classes == LV_MYO

    def lv_endo(self) -> np.ndarray:
        return self.classes == LV_ENDO

    def lv_epi(self) -> np.ndarray:
        """Filled epicardial region: myocardium, scar and the enclosed blood pool."""
        return self.region(LV_MYO, LV_ENDO, SCAR)

    def copy(self) -> "SegMask":
        return SegMask(self.classes.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, SegMask) and np.array_equal(self.classes, other.classes)


@dataclass(eq=False)
class ScanSlice:
    """One short-axis grayscale slice with its segmentation mask and identity."""

    image: np.ndarray
    mask: SegMask
    patient_id: str
    slice_id: str
    has_scar: bool

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.dtype != np.uint16:
            raise ValueError(f"image must be uint16, got {self.image.dtype}")
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image/mask dimension mismatch: {self.image.shape} vs {self.mask.shape}"
            )
        scar_present = bool(self.mask.scar().any())
        if self.has_scar != scar_present:
            raise ValueError(
                f"has_scar={self.has_scar} inconsistent with mask (scar pixels present: {scar_present})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScanSlice)
            and np.array_equal(self.image, other.image)
            and self.mask == other.mask
            and self.patient_id == other.patient_id
            and self.slice_id == other.slice_id
            and self.has_scar == other.has_scar
        )


@dataclass
class ScarArcParams:
    """Sampling intervals for the scar arc painted inside the myocardial annulus.

    Angles are radians. ``radial_fraction`` is the fraction of the annulus
    thickness the arc occupies, growing outward from the endocardial border
    (subendocardial scars).
    """

    start_angle: tuple[float, float] = (0.0, 2.0 * math.pi)
    extent_angle: tuple[float, float] = (math.radians(40), math.radians(140))
    radial_fraction: tuple[float, float] = (0.35, 0.80)


@dataclass
class PhantomParams:
    """Geometry and intensity model for one phantom slice family."""

    frame_size: int = DEFAULT_SIZE
    lv_center: tuple[float, float] | None = None  # defaults to frame centre
    r_endo: float = 20.0
    r_epi: float = 32.0
    rv_offset: float = 48.0  # distance from LV centre to RV centre, towards -x
    blood_intensity_range: tuple[float, float] = (36000.0, 48000.0)
    myo_intensity_range: tuple[float, float] = (10000.0, 16000.0)
    scar_intensity_range: tuple[float, float] = (34000.0, 50000.0)
    noise_sigma: float = 1200.0
    scar_arc: ScarArcParams = field(default_factory=ScarArcParams)
    center_jitter: float = 3.0  # per-seed uniform jitter of all centres, px

    @property
    def rv_radius(self) -> float:
        return 0.6 * self.r_epi

    @property
    def center(self) -> tuple[float, float]:
        if self.lv_center is not None:
            return self.lv_center
        return (self.frame_size / 2.0, self.frame_size / 2.0)

    def validate(self) -> None:
        if not self.r_endo < self.r_epi:
            raise PhantomGeometryError(
                f"r_endo ({self.r_endo}) must be smaller than r_epi ({self.r_epi})"
            )
        cx, cy = self.center
        j = self.center_jitter
        reach = self.r_epi + j
        n = self.frame_size
        if cx - reach < 0 or cx + reach > n - 1 or cy - reach < 0 or cy + reach > n - 1:
            raise PhantomGeometryError(
                f"LV epicardium (radius {self.r_epi} + jitter {j}) exceeds the {n}x{n} frame"
            )
        rv_cx = cx - self.rv_offset
        if rv_cx - self.rv_radius - j < 0:
            raise PhantomGeometryError(
                f"RV disk (centre x={rv_cx}, radius {self.rv_radius}) exceeds the frame on the left"
            )
        s_lo, s_hi = self.scar_intensity_range
        b_lo, b_hi = self.blood_intensity_range
        if s_hi < b_lo or b_hi < s_lo:
            raise PhantomGeometryError(
                "scar intensity range must overlap the blood pool range (scar is hyperintense)"
            )
        lo, hi = self.scar_arc.extent_angle
        if lo <= 0:
            raise PhantomGeometryError("scar arc extent must be positive")

    @staticmethod
    def scaled(frame_size: int) -> "PhantomParams":
        """Default parameters scaled proportionally to a different frame size."""
        s = frame_size / DEFAULT_SIZE
        return PhantomParams(
            frame_size=frame_size,
            r_endo=20.0 * s,
            r_epi=32.0 * s,
            rv_offset=48.0 * s,
            noise_sigma=1200.0,
            center_jitter=3.0 * s,
        )


@dataclass
class FoldAssignment:
    """Patient-level fold mapping for cross-validation."""

    fold_count: int
    mapping: dict[str, int]

    def patients_in_fold(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.mapping.items() if f == fold)

    def fold_of(self, patient_id: str) -> int:
        return self.mapping[patient_id]


def generate_slice(
    seed: int,
    with_scar: bool,
    params: PhantomParams | None = None,
    patient_id: str | None = None,
    slice_id: str | None = None,
) -> ScanSlice:
    """Render one phantom slice deterministically from ``seed``.

    The mask always contains the RV endo disk (clipped to a crescent where it
    would overlap the LV), the LV myo annulus and the LV endo disk. With
    ``with_scar`` a hyperintense arc is painted inside the annulus and
    labelled as scar.
    """
    params = params or PhantomParams()
    params.validate()
    rng = np.random.default_rng(seed)
    n = params.frame_size
    j = params.center_jitter

    cx0, cy0 = params.center
    cx = cx0 + rng.uniform(-j, j)
    cy = cy0 + rng.uniform(-j, j)
    rv_cx = cx - params.rv_offset + rng.uniform(-j, j)
    rv_cy = cy + rng.uniform(-j, j)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    d_lv = np.hypot(xx - cx, yy - cy)
    d_rv = np.hypot(xx - rv_cx, yy - rv_cy)

    endo = d_lv <= params.r_endo
    epi = d_lv <= params.r_epi
    myo = epi & ~endo
    rv = d_rv <= params.rv_radius

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[rv] = RV_ENDO  # clipped to a crescent by the LV labels below
    labels[myo] = LV_MYO
    labels[endo] = LV_ENDO

    scar_px = np.zeros((n, n), dtype=bool)
    if with_scar:
        arc = params.scar_arc
        start = rng.uniform(*arc.start_angle)
        extent = rng.uniform(*arc.extent_angle)
        frac = rng.uniform(*arc.radial_fraction)
        theta = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2.0 * math.pi)
        band = d_lv <= params.r_endo + frac * (params.r_epi - params.r_endo)
        scar_px = myo & band & (theta <= extent)
        if not scar_px.any():
            raise PhantomGeometryError(
                f"sampled scar arc rasterized to zero pixels (seed={seed}); widen scar_arc intervals"
            )
        labels[scar_px] = SCAR

    blood_lv = rng.uniform(*params.blood_intensity_range)
    blood_rv = rng.uniform(*params.blood_intensity_range)
    myo_level = rng.uniform(*params.myo_intensity_range)
    scar_level = rng.uniform(*params.scar_intensity_range)

    levels = np.full((n, n), _BG_LEVEL, dtype=np.float64)
    levels[rv] = blood_rv
    levels[myo] = myo_level
    levels[endo] = blood_lv
    if with_scar:
        levels[scar_px] = scar_level

    # Mild boundary smoothing so tissue interfaces are not knife-edged.
    from scipy.ndimage import gaussian_filter

    levels = gaussian_filter(levels, sigma=0.8, mode="nearest")
    img = levels + rng.normal(0.0, params.noise_sigma, size=(n, n))
    img = np.clip(np.rint(img), 0, 65535).astype(np.uint16)

    pid = patient_id if patient_id is not None else f"p{seed:08d}"
    sid = slice_id if slice_id is not None else f"s{seed:08d}"
    return ScanSlice(image=img, mask=SegMask(labels), patient_id=pid, slice_id=sid, has_scar=with_scar)


def generate_corpus(
    n_slices: int,
    scar_fraction: float,
    seed: int,
    params: PhantomParams | None = None,
    slices_per_patient: int = 2,
) -> list[ScanSlice]:
    """Generate a phantom corpus with a patient structure.

    Scar status is assigned per patient so that roughly ``scar_fraction`` of
    the slices carry scar tissue; all slices of one patient share it.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be positive")
    if not 0.0 <= scar_fraction <= 1.0:
        raise ValueError("scar_fraction must lie in [0, 1]")
    params = params or PhantomParams()
    n_patients = math.ceil(n_slices / slices_per_patient)
    n_scar_patients = round(scar_fraction * n_patients)
    rng = np.random.default_rng(seed)
    scar_flags = np.array([True] * n_scar_patients + [False] * (n_patients - n_scar_patients))
    rng.shuffle(scar_flags)
    child_seeds = np.random.SeedSequence(seed).generate_state(n_slices)

    slices: list[ScanSlice] = []
    for i in range(n_slices):
        p = i // slices_per_patient
        s = i % slices_per_patient
        slices.append(
            generate_slice(
                seed=int(child_seeds[i]),
                with_scar=bool(scar_flags[p]),
                params=params,
                patient_id=f"pat{p:04d}",
                slice_id=f"pat{p:04d}_s{s}",
            )
        )
    return slices


# --------------------------------------------------------------------------
# On-disk format: binary PGM pairs plus a JSON manifest.
#
# Image: P5, maxval 65535, big-endian 16-bit samples. Mask: P5, maxval 255,
# class indices 0..4. Slice identity and the scar flag ride in '#' comments
# of the image header so a file pair round-trips without the manifest.
# --------------------------------------------------------------------------

_META_RE = re.compile(rb"#\s*patient=(?P<pat>\S+)\s+scar=(?P<scar>[01])")


def _write_pgm(path: Path, data: np.ndarray, maxval: int, comment: str | None = None) -> None:
    h, w = data.shape
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n{maxval}\n".encode("ascii")
    raw = data.astype(">u2").tobytes() if maxval > 255 else data.astype(np.uint8).tobytes()
    path.write_bytes(header + raw)


class _PgmReader:
    """Strict P5 reader that tracks byte offsets for error reporting."""

    def __init__(self, path: Path):
        self.path = path
        try:
            self.buf = path.read_bytes()
        except FileNotFoundError:
            raise SliceFormatError(f"{path}: file missing") from None
        self.pos = 0
        self.comments: list[bytes] = []

    def fail(self, msg: str, offset: int | None = None) -> "SliceFormatError":
        off = self.pos if offset is None else offset
        return SliceFormatError(f"{self.path}: {msg} at byte {off}")

    def _skip_space_and_comments(self) -> None:
        while self.pos < len(self.buf):
            c = self.buf[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif c == b"#":
                end = self.buf.find(b"\n", self.pos)
                if end == -1:
                    raise self.fail("unterminated comment")
                self.comments.append(self.buf[self.pos : end])
                self.pos = end + 1
            else:
                return

    def token(self) -> bytes:
        self._skip_space_and_comments()
        start = self.pos
        while self.pos < len(self.buf) and not self.buf[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise self.fail("unexpected end of header", start)
        return self.buf[start : self.pos]

    def int_token(self, what: str) -> int:
        start_guess = self.pos
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            raise self.fail(f"invalid {what} {tok!r}", start_guess) from None

    def read(self) -> tuple[np.ndarray, int]:
        if self.buf[:2] != b"P5":
            raise self.fail("not a binary PGM (missing P5 magic)", 0)
        self.pos = 2
        width = self.int_token("width")
        height = self.int_token("height")
        maxval = self.int_token("maxval")
        if width <= 0 or height <= 0:
            raise self.fail(f"non-positive dimensions {width}x{height}")
        if maxval not in (255, 65535):
            raise self.fail(f"unsupported maxval {maxval}")
        # Exactly one whitespace byte separates the header from the raster.
        if self.pos >= len(self.buf) or not self.buf[self.pos : self.pos + 1].isspace():
            raise self.fail("missing whitespace before raster")
        self.pos += 1
        itemsize = 2 if maxval > 255 else 1
        expected = width * height * itemsize
        raw = self.buf[self.pos : self.pos + expected]
        if len(raw) != expected:
            raise self.fail(
                f"truncated raster: expected {expected} bytes, found {len(raw)}",
                self.pos + len(raw),
            )
        if len(self.buf) > self.pos + expected:
            raise self.fail("trailing bytes after raster", self.pos + expected)
        dtype = ">u2" if itemsize == 2 else np.uint8
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
        return data, self.pos


def image_path(dir: Path, slice_id: str) -> Path:
    return Path(dir) / f"{slice_id}.img.pgm"


def mask_path(dir: Path, slice_id: str) -> Path:
    return Path(dir) / f"{slice_id}.mask.pgm"


def write_slice(slice: ScanSlice, dir: Path) -> tuple[Path, Path]:
    """Write the image/mask PGM pair for one slice; returns the two paths."""
    dir = Path(dir)
    dir.mkdir(parents=True, exist_ok=True)
    ip = image_path(dir, slice.slice_id)
    mp = mask_path(dir, slice.slice_id)
    meta = f"patient={slice.patient_id} scar={int(slice.has_scar)}"
    _write_pgm(ip, slice.image, 65535, comment=meta)
    _write_pgm(mp, slice.mask.classes, 255)
    return ip, mp


def read_slice(dir: Path, slice_id: str) -> ScanSlice:
    """Read a slice pair back; raises SliceFormatError naming file and byte offset."""
    dir = Path(dir)
    ip = image_path(dir, slice_id)
    mp = mask_path(dir, slice_id)

    img_reader = _PgmReader(ip)
    img, _ = img_reader.read()
    if img.dtype != np.dtype(">u2"):
        raise SliceFormatError(f"{ip}: image must be 16-bit (maxval 65535)")
    img = img.astype(np.uint16)

    meta_pat, meta_scar = None, None
    for c in img_reader.comments:
        m = _META_RE.search(c)
        if m:
            meta_pat = m.group("pat").decode("ascii")
            meta_scar = m.group("scar") == b"1"
    if meta_pat is None:
        raise SliceFormatError(f"{ip}: missing 'patient=... scar=...' metadata comment")

    mask_reader = _PgmReader(mp)
    mdata, raster_off = mask_reader.read()
    if mdata.dtype != np.uint8:
        raise SliceFormatError(f"{mp}: mask must be 8-bit (maxval 255)")
    bad = mdata >= N_CLASSES
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise SliceFormatError(
            f"{mp}: class out of range (label {int(mdata.ravel()[idx])}) at byte {raster_off + idx}"
        )
    if img.shape != mdata.shape:
        raise SliceFormatError(
            f"{ip}: dimension mismatch: image {img.shape[1]}x{img.shape[0]} vs mask {mdata.shape[1]}x{mdata.shape[0]}"
        )
    return ScanSlice(
        image=img,
        mask=SegMask(mdata.copy()),
        patient_id=meta_pat,
        slice_id=slice_id,
        has_scar=bool(meta_scar),
    )


def _params_to_json(params: PhantomParams) -> dict:
    return asdict(params)


def write_dataset(
    slices: list[ScanSlice],
    root: Path,
    params: PhantomParams | None = None,
    seed: int | None = None,
    extra_entries: dict[str, dict] | None = None,
    manifest_extra: dict | None = None,
) -> Path:
    """Write a dataset directory: ``manifest.json`` plus ``slices/*.pgm`` pairs.

    ``extra_entries`` maps slice_id to extra manifest keys (e.g. provenance).
    """
    root = Path(root)
    slices_dir = root / "slices"
    slices_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in slices:
        write_slice(s, slices_dir)
        entry = {"slice_id": s.slice_id, "patient_id": s.patient_id, "has_scar": s.has_scar}
        if extra_entries and s.slice_id in extra_entries:
            entry.update(extra_entries[s.slice_id])
        entries.append(entry)
    manifest = {
        "slices": entries,
        "params": _params_to_json(params) if params else None,
        "seed": seed,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SliceFormatError(f"{path}: file missing") from None
    except json.JSONDecodeError as e:
        raise SliceFormatError(f"{path}: invalid JSON ({e})") from None


def read_dataset(root: Path) -> tuple[list[ScanSlice], dict]:
    """Load every slice listed in a dataset manifest."""
    root = Path(root)
    manifest = read_manifest(root)
    slices = [read_slice(root / "slices", e["slice_id"]) for e in manifest["slices"]]
    return slices, manifest


def split_folds(patients: list[str], k: int = 4, seed: int = 0) -> FoldAssignment:
    """Assign patients to k folds of near-equal size, deterministically."""
    if k < 2:
        raise ValueError(f"fold count must be at least 2, got {k}")
    unique = list(dict.fromkeys(patients))
    if len(unique) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {len(unique)}")
    order = sorted(unique)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    return FoldAssignment(fold_count=k, mapping={p: i % k for i, p in enumerate(order)})
