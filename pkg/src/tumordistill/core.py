"""Domain value types shared by every module.

Everything here is an immutable value: enums for modalities and tumor
regions, thin array wrappers that record which intensity space an image
lives in, and the experiment configuration with its flat text
serialization. None of these types touch torch; they are plain
numpy/python so they can be shared freely between workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Iterable

import numpy as np

# Intensity spaces. Preprocessing emits UNIT ([0, 1], background exactly 0);
# networks consume and produce NETWORK ([-1, 1]). Mask multiplication is only
# meaningful in UNIT space, where "outside the mask" is black.
UNIT = "unit"
NETWORK = "network"

_SPACE_RANGE = {UNIT: (0.0, 1.0), NETWORK: (-1.0, 1.0)}

# Tolerance when checking that pixels respect their declared range; resize
# interpolation and float32 round-trips may overshoot by a few ulps.
_RANGE_EPS = 1e-5


class Modality(Enum):
    """The four MRI sequences, in their fixed canonical order.

    The order (Flair=0, T1=1, T1ce=2, T2=3) is load-bearing: one-hot
    conditioning vectors and checkpoint files both depend on it, so it is
    persisted in every checkpoint manifest.
    """

    FLAIR = 0
    T1 = 1
    T1CE = 2
    T2 = 3

    @property
    def canonical_index(self) -> int:
        return self.value

    @property
    def file_tag(self) -> str:
        """Lower-case tag used in dataset filenames (BRATS convention)."""
        return {"FLAIR": "flair", "T1": "t1", "T1CE": "t1ce", "T2": "t2"}[self.name]

    @classmethod
    def from_name(cls, name: str) -> "Modality":
        key = name.strip().lower()
        for m in cls:
            if key in (m.name.lower(), m.file_tag):
                return m
        raise ValueError(f"unknown modality name: {name!r}")


MODALITY_ORDER = (Modality.FLAIR, Modality.T1, Modality.T1CE, Modality.T2)


def one_hot(m: Modality) -> np.ndarray:
    """Length-4 binary conditioning vector for a modality."""
    v = np.zeros(len(MODALITY_ORDER), dtype=np.float32)
    v[m.canonical_index] = 1.0
    return v


# BRATS label values: 1 = necrotic/non-enhancing core, 2 = edema,
# 4 = enhancing tumor. 0 is background/healthy tissue.
LABEL_BACKGROUND = 0
LABEL_NCR_NET = 1
LABEL_ED = 2
LABEL_ET = 4

_KNOWN_LABELS = frozenset({LABEL_BACKGROUND, LABEL_NCR_NET, LABEL_ED, LABEL_ET})


class TumorRegion(Enum):
    """Composite tumor regions built from the three base labels."""

    WT = "WT"  # whole tumor: ET + ED + NCR/NET
    TC = "TC"  # tumor core: ET + NCR/NET
    ET = "ET"  # enhancing tumor only

    @property
    def base_labels(self) -> frozenset:
        return {
            TumorRegion.WT: frozenset({LABEL_ET, LABEL_ED, LABEL_NCR_NET}),
            TumorRegion.TC: frozenset({LABEL_ET, LABEL_NCR_NET}),
            TumorRegion.ET: frozenset({LABEL_ET}),
        }[self]


class MaskMode(Enum):
    """How the guiding mask of a training run is produced."""

    WT = "WT"
    TC = "TC"
    ET = "ET"
    ZEROS = "ZEROS"    # ablation: all-zero map, translation without guidance
    RANDOM = "RANDOM"  # ablation: each pixel an independent fair coin

    @property
    def region(self) -> TumorRegion | None:
        if self in (MaskMode.WT, MaskMode.TC, MaskMode.ET):
            return TumorRegion(self.value)
        return None


class StudentScheme(Enum):
    """Student generator architecture variants.

    A: full global+local branches (structurally identical to the teacher).
    B: only the global branch; no tumor output.
    C: no local encoder; the fusion block sees the global bottleneck only,
       both decoders present.
    D: no local decoder; two encoders fused, single decoder, no tumor output.

    ``feature_tap`` names the activation compared against the teacher's
    fused feature: the fusion-block output where one exists on the compared
    path (A, D), the last encoder layer otherwise (B, C).
    """

    A = "A"
    B = "B"
    C = "C"
    D = "D"

    @property
    def feature_tap(self) -> str:
        return "fusion" if self in (StudentScheme.A, StudentScheme.D) else "encoder"

    @property
    def has_tumor_output(self) -> bool:
        return self in (StudentScheme.A, StudentScheme.C)


def _frozen_array(pixels, dtype) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(pixels, dtype=dtype))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageSlice:
    """One 2-D single-channel brain image plus the intensity space it lives in."""

    pixels: np.ndarray
    space: str = UNIT

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen_array(self.pixels, np.float32))
        if self.pixels.ndim != 2:
            raise ValueError(f"ImageSlice expects a 2-D array, got shape {self.pixels.shape}")
        if self.space not in _SPACE_RANGE:
            raise ValueError(f"unknown intensity space {self.space!r}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("ImageSlice pixels must be finite")
        lo, hi = _SPACE_RANGE[self.space]
        if self.pixels.size and (self.pixels.min() < lo - _RANGE_EPS or self.pixels.max() > hi + _RANGE_EPS):
            raise ValueError(
                f"pixels outside declared {self.space!r} range [{lo}, {hi}]: "
                f"min={self.pixels.min():.6g} max={self.pixels.max():.6g}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class TumorMask:
    """Strictly binary 2-D mask aligned with an ImageSlice."""

    pixels: np.ndarray
    region: TumorRegion | None = None  # None for the ZEROS/RANDOM ablation maps

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen_array(self.pixels, np.uint8))
        if self.pixels.ndim != 2:
            raise ValueError(f"TumorMask expects a 2-D array, got shape {self.pixels.shape}")
        bad = set(np.unique(self.pixels)) - {0, 1}
        if bad:
            raise ValueError(f"TumorMask must be binary, found values {sorted(bad)}")


@dataclass(frozen=True)
class Sample:
    """The unpaired training unit: one slice of one subject in one modality."""

    subject_id: str
    slice_index: int
    modality: Modality
    image: ImageSlice
    mask: TumorMask

    def __post_init__(self):
        if self.image.pixels.shape != self.mask.pixels.shape:
            raise ValueError(
                f"image {self.image.pixels.shape} and mask {self.mask.pixels.shape} misaligned"
            )


def compose_region(labels: np.ndarray, region: TumorRegion) -> TumorMask:
    """Binary mask of the pixels whose base label belongs to ``region``.

    ``labels`` holds BRATS-style values {0, 1, 2, 4}; anything else is a
    rejected input.
    """
    labels = np.asarray(labels)
    found = set(np.unique(labels).tolist())
    unknown = found - _KNOWN_LABELS
    if unknown:
        raise ValueError(f"unknown label values {sorted(unknown)}; expected subset of {sorted(_KNOWN_LABELS)}")
    mask = np.isin(labels, sorted(region.base_labels)).astype(np.uint8)
    return TumorMask(mask, region=region)


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run. Serialized next to each run's outputs.

    Loss weights and the optimizer/schedule numbers default to the
    published recipe; the architecture sizes default to the full-scale
    model and are dialed down for desk-scale smoke runs.
    """

    lambda_gp: float = 10.0
    lambda_1: float = 10.0
    lambda_2: float = 10.0
    epochs: int = 100
    lr_initial: float = 1e-4
    lr_final: float = 1e-6
    lr_constant_epochs: int = 50
    moment_1: float = 0.9
    moment_2: float = 0.999
    batch_size: int = 16
    critic_steps_per_gen_step: int = 1
    mask_mode: MaskMode = MaskMode.WT
    seed: int = 0
    resolution: int = 128
    student_scheme: StudentScheme = StudentScheme.A
    # architecture
    base_width: int = 64
    depth: int = 4
    # data pipeline
    slice_threshold: float = 0.01
    percentile_low: float = 0.5
    percentile_high: float = 99.5
    augment: bool = True
    # run management
    steps_per_epoch: int = 0  # 0: one pass over the training slice pool
    checkpoint_every: int = 10
    sample_grid_every: int = 10

    def __post_init__(self):
        if isinstance(self.mask_mode, str):
            object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode.upper()))
        if isinstance(self.student_scheme, str):
            object.__setattr__(self, "student_scheme", StudentScheme(self.student_scheme.upper()))
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must be <= lr_initial")
        if not (0 <= self.lr_constant_epochs <= self.epochs):
            raise ValueError("lr_constant_epochs must lie in [0, epochs]")
        for name in ("lambda_gp", "lambda_1", "lambda_2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("epochs", "batch_size", "critic_steps_per_gen_step",
                     "resolution", "base_width", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        """Flat, human-readable ``key = value`` serialization."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse the ``to_text`` format. Unknown keys are rejected."""
        spec = {f.name: f for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in spec:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_field(spec[key].type, value)
        return cls(**kw)

    def config_hash(self) -> str:
        """Short stable hash tying reports back to exact hyperparameters."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _parse_field(annotation: str, value: str):
    ann = str(annotation)
    if "MaskMode" in ann:
        return MaskMode(value.upper())
    if "StudentScheme" in ann:
        return StudentScheme(value.upper())
    if "bool" in ann:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "int" in ann:
        return int(value)
    if "float" in ann:
        return float(value)
    return value


def directed_modality_pairs() -> list[tuple[Modality, Modality]]:
    """All 12 ordered (source, target) modality pairs."""
    return [(s, t) for s in MODALITY_ORDER for t in MODALITY_ORDER if s is not t]


def as_float32(arrays: Iterable[np.ndarray]) -> list[np.ndarray]:
    return [np.asarray(a, dtype=np.float32) for a in arrays]
