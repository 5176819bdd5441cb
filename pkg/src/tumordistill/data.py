"""Volume ingestion, slicing, preprocessing, sampling, and the phantom generator.

The pipeline runs in two intensity spaces: preprocessing emits [0, 1]
("unit") slices whose background is exactly 0, so pixel-level mask
multiplication blacks out everything outside the tumor; the network space
[-1, 1] is entered only immediately before tensors are built. Tumor images
are always constructed in unit space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np
from scipy import ndimage

from . import nifti
from .core import (
    LABEL_ED,
    LABEL_ET,
    LABEL_NCR_NET,
    MODALITY_ORDER,
    NETWORK,
    UNIT,
    ImageSlice,
    MaskMode,
    Modality,
    Sample,
    TumorMask,
    TumorRegion,
    compose_region,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class IngestionError(RuntimeError):
    """A volume could not be loaded; the message names the offending path."""


@dataclass(frozen=True)
class Volume:
    """A 3-D scalar volume in (Z, Y, X) order; voxels[k] is one axial slice."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]  # (sz, sy, sx) in mm
    subject_id: str = ""
    modality: Modality | None = None

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume voxels must be finite")


def load_volume(path, subject_id: str = "", modality: Modality | None = None) -> Volume:
    """Read a NIfTI volume, rejecting anything non-finite."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    try:
        voxels, spacing = nifti.read(path)
    except (nifti.NiftiError, OSError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(voxels)):
        raise IngestionError(f"{path}: volume contains NaN or Inf voxels")
    return Volume(np.asarray(voxels), spacing, subject_id=subject_id, modality=modality)


def save_volume(volume: Volume, path) -> None:
    nifti.write(path, volume.voxels, volume.spacing)


@dataclass(frozen=True)
class SliceRecord:
    """One axial slice paired with its label slice, pre-normalization."""

    index: int
    image: np.ndarray
    labels: np.ndarray


def extract_slices(volume: Volume, labels: Volume, threshold: float = 0.01) -> list[SliceRecord]:
    """Axial slices whose nonzero (brain) fraction is >= threshold, ascending.

    ``volume`` and ``labels`` must share a voxel grid.
    """
    if volume.voxels.shape != labels.voxels.shape:
        raise ValueError(
            f"image volume {volume.voxels.shape} and label volume "
            f"{labels.voxels.shape} have different shapes"
        )
    out = []
    area = volume.voxels.shape[1] * volume.voxels.shape[2]
    for k in range(volume.voxels.shape[0]):
        img = volume.voxels[k]
        if np.count_nonzero(img) / area >= threshold:
            out.append(SliceRecord(k, np.asarray(img), np.asarray(labels.voxels[k])))
    return out


def intensity_window(volume: Volume, p_low: float = 0.5, p_high: float = 99.5) -> tuple[float, float]:
    """Per-volume clipping window: percentiles of the nonzero (brain) voxels.

    With (0, 100) the window degenerates to plain min/max. An all-zero
    volume yields (0, 0), which ``preprocess`` treats as the constant case.
    """
    nz = volume.voxels[volume.voxels != 0]
    if nz.size == 0:
        return 0.0, 0.0
    lo = float(np.percentile(nz, p_low))
    hi = float(np.percentile(nz, p_high))
    return lo, hi


def preprocess(
    raw_slice: np.ndarray,
    window: tuple[float, float],
    resolution: int,
) -> ImageSlice:
    """Clip to the volume window, map min->0 / max->1, resize to ``resolution``.

    Background voxels (value 0, at or below the window floor) stay exactly 0,
    which the mask-multiplication step depends on. A degenerate window
    (max <= min) produces a defined all-zero slice and a log warning.
    """
    arr = np.asarray(raw_slice, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("preprocess requires finite input")
    lo, hi = window
    if hi <= lo:
        log.warning("constant intensity window (lo=%g hi=%g); emitting zeros", lo, hi)
        out = np.zeros_like(arr)
    else:
        out = (np.clip(arr, lo, hi) - lo) / (hi - lo)
    out = resize_image(out, resolution)
    return ImageSlice(np.clip(out, 0.0, 1.0), space=UNIT)


def resize_image(arr: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear/area resize to a square grid; identity when already there."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.shape == (resolution, resolution):
        return arr
    interp = cv2.INTER_AREA if resolution < min(arr.shape) else cv2.INTER_LINEAR
    return cv2.resize(arr, (resolution, resolution), interpolation=interp)


def resize_labels(labels: np.ndarray, resolution: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape == (resolution, resolution):
        return labels
    return cv2.resize(
        labels.astype(np.int16), (resolution, resolution), interpolation=cv2.INTER_NEAREST
    ).astype(labels.dtype)


def to_network_space(s: ImageSlice) -> ImageSlice:
    """[0, 1] -> [-1, 1] via x -> 2x - 1."""
    if s.space != UNIT:
        raise ValueError(f"expected a unit-space slice, got {s.space!r}")
    return ImageSlice(2.0 * s.pixels - 1.0, space=NETWORK)


def from_network_space(s: ImageSlice) -> ImageSlice:
    """[-1, 1] -> [0, 1] via x -> (x + 1) / 2."""
    if s.space != NETWORK:
        raise ValueError(f"expected a network-space slice, got {s.space!r}")
    return ImageSlice(np.clip((s.pixels + 1.0) / 2.0, 0.0, 1.0), space=UNIT)


@dataclass(frozen=True)
class TumorImage:
    """Pixel-level product of an image and a binary mask: black outside the tumor."""

    pixels: np.ndarray
    space: str = UNIT

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float32))


def make_tumor_image(image: ImageSlice, mask: TumorMask) -> TumorImage:
    """Multiply image and mask pixel-wise (unit space only)."""
    if image.space != UNIT:
        raise ValueError("tumor images are built in unit space, where background is 0")
    if image.pixels.shape != mask.pixels.shape:
        raise ValueError(
            f"image {image.pixels.shape} and mask {mask.pixels.shape} shapes differ"
        )
    return TumorImage(image.pixels * mask.pixels, space=UNIT)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Horizontal flip (p=0.5) plus a uniform rotation in [-10, +10] degrees.

    The identical spatial transform is applied to image and mask; the mask
    is re-binarized after interpolation.
    """
    img = sample.image.pixels
    msk = sample.mask.pixels.astype(np.float32)
    if rng.random() < 0.5:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    angle = float(rng.uniform(-10.0, 10.0))
    if angle != 0.0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        msk = ndimage.rotate(msk, angle, reshape=False, order=1, mode="constant", cval=0.0)
        img = np.clip(img, 0.0, 1.0)
    return Sample(
        subject_id=sample.subject_id,
        slice_index=sample.slice_index,
        modality=sample.modality,
        image=ImageSlice(np.ascontiguousarray(img), space=sample.image.space),
        mask=TumorMask(np.ascontiguousarray(msk > 0.5).astype(np.uint8), region=sample.mask.region),
    )


# --------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    split: str
    modality: Modality
    image_path: str
    label_path: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int

    def __post_init__(self):
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r}")
            prev = seen.setdefault(e.subject_id, e.split)
            if prev != e.split:
                raise ValueError(f"subject {e.subject_id} assigned to both {prev} and {e.split}")

    def subjects(self, split: str) -> list[str]:
        out: list[str] = []
        for e in self.entries:
            if e.split == split and e.subject_id not in out:
                out.append(e.subject_id)
        return out

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.subjects(s)) for s in SPLITS}

    def subject_entries(self, subject_id: str) -> dict[Modality, ManifestEntry]:
        return {e.modality: e for e in self.entries if e.subject_id == subject_id}


def build_manifest(root, seed: int = 0, n_val: int = 1, n_test: int = 2) -> DatasetManifest:
    """Discover a BRATS-layout dataset and split it at subject level.

    Layout: ``<root>/<subject>/<subject>_<modality>.nii.gz`` plus
    ``<subject>_seg.nii.gz``. Subjects are shuffled with ``seed``; the first
    ``n_test`` go to test, the next ``n_val`` to val, the rest to train.
    """
    root = Path(root)
    subjects = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise IngestionError(f"{root}: no subject directories found")
    if n_val + n_test >= len(subjects):
        raise ValueError(
            f"n_val+n_test={n_val + n_test} leaves no training subjects out of {len(subjects)}"
        )
    order = list(subjects)
    np.random.default_rng(seed).shuffle(order)
    assignment = {}
    for i, sub in enumerate(order):
        assignment[sub] = "test" if i < n_test else ("val" if i < n_test + n_val else "train")

    entries = []
    for sub in subjects:
        sub_dir = root / sub
        label_path = sub_dir / f"{sub}_seg.nii.gz"
        if not label_path.exists():
            raise IngestionError(f"{label_path}: missing label volume")
        for m in MODALITY_ORDER:
            img_path = sub_dir / f"{sub}_{m.file_tag}.nii.gz"
            if not img_path.exists():
                raise IngestionError(f"{img_path}: missing modality volume")
            entries.append(ManifestEntry(sub, assignment[sub], m, str(img_path), str(label_path)))
    return DatasetManifest(tuple(entries), seed=seed)


def save_manifest(manifest: DatasetManifest, path) -> None:
    sizes = manifest.split_sizes()
    with open(path, "w") as fh:
        fh.write(f"# seed = {manifest.seed}\n")
        fh.write(f"# split train={sizes['train']} val={sizes['val']} test={sizes['test']}\n")
        for e in manifest.entries:
            fh.write(
                f"{e.subject_id}\t{e.split}\t{e.modality.file_tag}\t{e.image_path}\t{e.label_path}\n"
            )


def load_manifest(path) -> DatasetManifest:
    seed = 0
    entries = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "seed" in line and "=" in line:
                    seed = int(line.split("=", 1)[1].strip())
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"bad manifest record: {raw!r}")
            sub, split, mod, img, lbl = parts
            entries.append(ManifestEntry(sub, split, Modality.from_name(mod), img, lbl))
    return DatasetManifest(tuple(entries), seed=seed)


# --------------------------------------------------------------------------
# slice pool + unpaired sampling

class SlicePool:
    """All preprocessed slices of one split, loaded eagerly and kept in [0, 1].

    Slice selection runs on the Flair volume (the canonical first modality);
    the selected indices are taken from every modality so the pool stays
    aligned across modalities.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str,
        resolution: int,
        slice_threshold: float = 0.01,
        percentile_low: float = 0.5,
        percentile_high: float = 99.5,
    ):
        self.split = split
        self.resolution = resolution
        self.keys: list[tuple[str, int]] = []  # (subject_id, slice_index)
        self.images: dict[tuple[str, int], dict[Modality, np.ndarray]] = {}
        self.labels: dict[tuple[str, int], np.ndarray] = {}

        subjects = manifest.subjects(split)
        if not subjects:
            raise ValueError(f"split {split!r} is empty")
        for sub in subjects:
            entries = manifest.subject_entries(sub)
            label_vol = load_volume(entries[Modality.FLAIR].label_path, subject_id=sub)
            vols = {
                m: load_volume(entries[m].image_path, subject_id=sub, modality=m)
                for m in MODALITY_ORDER
            }
            windows = {m: intensity_window(vols[m], percentile_low, percentile_high) for m in MODALITY_ORDER}
            records = extract_slices(vols[Modality.FLAIR], label_vol, threshold=slice_threshold)
            for rec in records:
                key = (sub, rec.index)
                self.keys.append(key)
                self.images[key] = {
                    m: preprocess(vols[m].voxels[rec.index], windows[m], resolution).pixels
                    for m in MODALITY_ORDER
                }
                self.labels[key] = resize_labels(rec.labels, resolution)

    def __len__(self) -> int:
        return len(self.keys)

    def mask_for(self, key, mask_mode: MaskMode, rng: np.random.Generator | None = None) -> TumorMask:
        if mask_mode is MaskMode.ZEROS:
            return TumorMask(np.zeros((self.resolution, self.resolution), dtype=np.uint8))
        if mask_mode is MaskMode.RANDOM:
            if rng is None:
                raise ValueError("RANDOM mask mode needs an rng")
            coins = (rng.random((self.resolution, self.resolution)) < 0.5).astype(np.uint8)
            return TumorMask(coins)
        return compose_region(self.labels[key], TumorRegion(mask_mode.value))

    def sample_at(self, key, modality: Modality, mask_mode: MaskMode,
                  rng: np.random.Generator | None = None) -> Sample:
        sub, idx = key
        return Sample(
            subject_id=sub,
            slice_index=idx,
            modality=modality,
            image=ImageSlice(self.images[key][modality], space=UNIT),
            mask=self.mask_for(key, mask_mode, rng),
        )

    def draw(self, mask_mode: MaskMode, rng: np.random.Generator) -> tuple[Sample, Modality]:
        """One unpaired draw: uniform slice, uniform source, uniform other target."""
        key = self.keys[int(rng.integers(len(self.keys)))]
        source = MODALITY_ORDER[int(rng.integers(4))]
        others = [m for m in MODALITY_ORDER if m is not source]
        target = others[int(rng.integers(3))]
        return self.sample_at(key, source, mask_mode, rng), target


def unpaired_sampler(
    manifest: DatasetManifest,
    mask_mode: MaskMode,
    seed: int,
    resolution: int = 128,
    split: str = "train",
    **pool_kw,
) -> Iterator[tuple[Sample, Modality]]:
    """Endless deterministic stream of (Sample, target_modality) draws.

    Every draw picks one slice, exactly one source modality (uniform), and a
    target modality uniform over the other three. ZEROS and RANDOM mask
    modes substitute the ablation maps for the composed region mask.
    """
    pool = SlicePool(manifest, split, resolution, **pool_kw)
    rng = np.random.default_rng(seed)
    while True:
        yield pool.draw(mask_mode, rng)


# --------------------------------------------------------------------------
# phantom generator

PHANTOM_SPACING = (2.0, 1.0, 1.0)

# Per-modality piecewise intensity model over four compartments: a central
# CSF zone, parenchyma driven by the shared anatomy field u, and the tumor
# labels. Contrasts follow the usual qualitative picture: edema and core run
# bright in the Flair-/T2-like channels, T1 shows white/gray structure with
# dark tumor, T1ce lights up the enhancing rim, CSF is bright in T2 but
# suppressed in Flair. Gradients are deliberately opposed across modalities
# so that "copy the source" is a weak translation baseline.
_CSF = {Modality.FLAIR: 0.10, Modality.T1: 0.15, Modality.T1CE: 0.18, Modality.T2: 0.95}
_PARENCHYMA = {
    Modality.FLAIR: (0.50, 0.20),
    Modality.T1: (0.45, 0.40),
    Modality.T1CE: (0.65, -0.25),
    Modality.T2: (0.60, -0.30),
}
_TUMOR = {
    LABEL_NCR_NET: {Modality.FLAIR: 0.55, Modality.T1: 0.25, Modality.T1CE: 0.20, Modality.T2: 0.80},
    LABEL_ED: {Modality.FLAIR: 0.95, Modality.T1: 0.35, Modality.T1CE: 0.35, Modality.T2: 0.85},
    LABEL_ET: {Modality.FLAIR: 0.75, Modality.T1: 0.30, Modality.T1CE: 0.95, Modality.T2: 0.70},
}


def _ellipsoid_radius(shape, center, semi_axes):
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    return np.sqrt(
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )


def _phantom_subject(rng: np.random.Generator, shape) -> tuple[dict[Modality, np.ndarray], np.ndarray]:
    d, h, w = shape
    center = (
        d / 2.0 + rng.uniform(-0.5, 0.5),
        h / 2.0 + rng.uniform(-2.0, 2.0),
        w / 2.0 + rng.uniform(-2.0, 2.0),
    )
    semi = (
        d * rng.uniform(0.40, 0.48),
        h * rng.uniform(0.38, 0.46),
        w * rng.uniform(0.38, 0.46),
    )
    r = _ellipsoid_radius(shape, center, semi)
    brain = r < 1.0
    csf = r < 0.28

    # shared anatomy field: radial falloff plus smooth texture
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(1.0, 3.0, 3.0))
    tex /= max(np.abs(tex).max(), 1e-6)
    u = np.clip((1.0 - r) + 0.18 * tex, 0.0, 1.0)

    # tumor: enhancing rim around a necrotic core, edema halo around both,
    # seated off-center so the CSF zone stays partly visible
    t_center = (
        center[0] + rng.uniform(-0.10, 0.10) * semi[0],
        center[1] + float(rng.choice([-1, 1])) * rng.uniform(0.30, 0.50) * semi[1],
        center[2] + float(rng.choice([-1, 1])) * rng.uniform(0.30, 0.50) * semi[2],
    )
    t_semi = (
        semi[0] * rng.uniform(0.50, 0.70),
        semi[1] * rng.uniform(0.26, 0.38),
        semi[2] * rng.uniform(0.26, 0.38),
    )
    td = _ellipsoid_radius(shape, t_center, t_semi)
    labels = np.zeros(shape, dtype=np.int16)
    labels[(td < 1.30) & brain] = LABEL_ED
    labels[(td < 0.85) & brain] = LABEL_ET
    labels[(td < 0.55) & brain] = LABEL_NCR_NET

    vols = {}
    for m in MODALITY_ORDER:
        base, slope = _PARENCHYMA[m]
        img = np.where(brain, base + slope * u, 0.0)
        img = np.where(csf, _CSF[m], img)
        for lab, table in _TUMOR.items():
            img = np.where(labels == lab, table[m], img)
        img = np.where(brain, np.clip(img + 0.05 * tex, 0.02, 1.0), 0.0)
        vols[m] = img.astype(np.float32)
    return vols, labels


def generate_phantom(out_dir, seed: int, n_subjects: int, shape=(12, 64, 64)) -> Path:
    """Write a BRATS-layout synthetic dataset; bitwise deterministic per seed.

    Each subject gets four perfectly aligned modality volumes over a shared
    anatomy, plus a 3-class label volume (NCR/NET=1, ED=2, ET=4).
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"{out_dir}: cannot create output directory ({exc})") from exc
    for i in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        vols, labels = _phantom_subject(rng, shape)
        sub = f"phantom_{i:03d}"
        sub_dir = out_dir / sub
        sub_dir.mkdir(parents=True, exist_ok=True)
        for m in MODALITY_ORDER:
            nifti.write(sub_dir / f"{sub}_{m.file_tag}.nii.gz", vols[m], PHANTOM_SPACING)
        nifti.write(sub_dir / f"{sub}_seg.nii.gz", labels, PHANTOM_SPACING)
    return out_dir
