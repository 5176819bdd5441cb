"""Tumor-aware teacher-student translation of multi-modal brain MRI slices.

A mask-guided teacher generator learns unpaired cross-modality translation;
a structurally matched student distills it at the feature and image level
and translates without masks. The package ships the full data pipeline, the
losses, trainers, metric suite, and an ablation harness, all sized to run
on desk hardware against a synthetic phantom dataset.
"""

from .core import (
    ExperimentConfig,
    ImageSlice,
    MaskMode,
    Modality,
    Sample,
    StudentScheme,
    TumorMask,
    TumorRegion,
    compose_region,
    directed_modality_pairs,
    one_hot,
)
from .data import (
    DatasetManifest,
    Volume,
    augment,
    build_manifest,
    extract_slices,
    from_network_space,
    generate_phantom,
    load_manifest,
    load_volume,
    make_tumor_image,
    preprocess,
    save_manifest,
    save_volume,
    to_network_space,
    unpaired_sampler,
)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "ImageSlice",
    "MaskMode",
    "Modality",
    "Sample",
    "StudentScheme",
    "TumorMask",
    "TumorRegion",
    "compose_region",
    "directed_modality_pairs",
    "one_hot",
    "DatasetManifest",
    "Volume",
    "augment",
    "build_manifest",
    "extract_slices",
    "from_network_space",
    "generate_phantom",
    "load_manifest",
    "load_volume",
    "make_tumor_image",
    "preprocess",
    "save_manifest",
    "save_volume",
    "to_network_space",
    "unpaired_sampler",
    "__version__",
]
