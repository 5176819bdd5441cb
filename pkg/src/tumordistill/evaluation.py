"""Quantitative evaluation: image quality, tumor-local metrics, perceptual
distance, feature-error analysis, segmentation metrics, and report assembly.

All metric operations are pure. SSIM follows the standard windowed
formulation (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03) with the
dynamic range taken from the declared intensity space (2.0 for [-1, 1]).
Surface distances run on physical (mm) coordinates with face-neighbor
boundary extraction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree
from torch import nn

from .core import (
    MODALITY_ORDER,
    ExperimentConfig,
    MaskMode,
    Modality,
    StudentScheme,
    TumorMask,
    TumorRegion,
    compose_region,
    directed_modality_pairs,
)
from .data import SlicePool
from .model import derived_seed

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class EmptyMaskError(ValueError):
    """The requested metric is undefined for an empty mask."""


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    radius = size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k1d = np.exp(-0.5 * (x / sigma) ** 2)
    k1d /= k1d.sum()
    return np.outer(k1d, k1d)


_KERNEL = _gaussian_kernel()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Mean windowed structural similarity over the border-cropped map."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def win(x):
        return ndimage.correlate(x, _KERNEL, mode="reflect")

    mu_a, mu_b = win(a), win(b)
    var_a = win(a * a) - mu_a * mu_a
    var_b = win(b * b) - mu_b * mu_b
    cov = win(a * b) - mu_a * mu_b
    s_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    pad = SSIM_WINDOW // 2
    if min(a.shape) <= 2 * pad:
        return float(s_map.mean())
    return float(s_map[pad:-pad, pad:-pad].mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE) in dB; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


@dataclass(frozen=True)
class Rect:
    """Inclusive bounding rectangle."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate rect {self}")

    def crop(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.row_min : self.row_max + 1, self.col_min : self.col_max + 1]


def wt_bounding_box(mask) -> Rect:
    """Smallest rectangle framing the nonzero pixels of a binary mask."""
    pixels = mask.pixels if isinstance(mask, TumorMask) else np.asarray(mask)
    rows = np.any(pixels, axis=1)
    cols = np.any(pixels, axis=0)
    if not rows.any():
        raise EmptyMaskError("cannot frame an empty mask")
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return Rect(int(r[0]), int(r[-1]), int(c[0]), int(c[-1]))


def _expand_rect(rect: Rect, min_size: int, shape: tuple[int, int]) -> Rect:
    """Grow the rect symmetrically to at least min_size, clipped to bounds."""
    def grow(lo, hi, limit):
        span = hi - lo + 1
        while span < min_size and span < limit:
            if lo > 0:
                lo -= 1
                span += 1
            if span < min_size and hi < limit - 1:
                hi += 1
                span += 1
            if lo == 0 and hi == limit - 1:
                break
        return lo, hi

    r0, r1 = grow(rect.row_min, rect.row_max, shape[0])
    c0, c1 = grow(rect.col_min, rect.col_max, shape[1])
    return Rect(r0, r1, c0, c1)


def local_metric(a: np.ndarray, b: np.ndarray, gt_wt_mask, metric: str = "ssim",
                 data_range: float = 2.0) -> float:
    """SSIM/PSNR restricted to the smallest rectangle framing the WT mask.

    The crop is expanded to at least the SSIM window (clipped to image
    bounds) so the windowed statistic is well defined.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    rect = _expand_rect(wt_bounding_box(gt_wt_mask), SSIM_WINDOW, a.shape)
    fn = {"ssim": ssim, "psnr": psnr}[metric]
    return fn(rect.crop(a), rect.crop(b), data_range=data_range)


# --------------------------------------------------------------------------
# perceptual distance (adapter; pretrained weights are out of scope)

class SurrogateFeatureExtractor(nn.Module):
    """Fixed-seed random convolution stack standing in for a pretrained
    perceptual network. Deterministic; results must be labeled 'surrogate'."""

    name = "surrogate"

    def __init__(self, seed: int = 0, widths=(8, 16, 32)):
        super().__init__()
        torch.manual_seed(derived_seed("surrogate-extractor", seed))
        layers = []
        prev = 1
        for w in widths:
            layers.append(nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1))
            prev = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = torch.relu(layer(x))
            feats.append(x)
        return feats


def get_extractor(spec, allow_surrogate: bool = True):
    """Resolve the perceptual-feature extractor.

    ``spec`` may be a callable (external pretrained network), the string
    "surrogate", or None (meaning: use the fallback if permitted).
    """
    if callable(spec):
        return spec
    if spec in (None, "surrogate"):
        if not allow_surrogate and spec is None:
            raise ValueError("no perceptual extractor registered and the surrogate is disabled")
        return SurrogateFeatureExtractor()
    raise ValueError(f"unknown extractor spec {spec!r}")


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor) -> float:
    """Normalized feature-difference distance over the extractor's layers.

    Features are unit-normalized along the channel axis at every spatial
    location; the squared differences are averaged over space and summed
    over layers (uniform layer weights).
    """
    def prep(x):
        t = torch.as_tensor(np.asarray(x, dtype=np.float32))
        return t.view(1, 1, *t.shape[-2:])

    with torch.no_grad():
        feats_a = extractor(prep(a))
        feats_b = extractor(prep(b))
        total = 0.0
        for fa, fb in zip(feats_a, feats_b):
            na = fa / fa.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-10).sqrt()
            nb = fb / fb.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-10).sqrt()
            total += float((na - nb).pow(2).sum(dim=1).mean())
    return total


# --------------------------------------------------------------------------
# feature error (student scheme comparison)

@dataclass
class FeatureErrorResult:
    error_map: np.ndarray  # one mean-absolute-error value per channel
    mae: float
    mse: float
    scheme: StudentScheme | None = None


def feature_error(feat_teacher, feat_student, scheme: StudentScheme | None = None) -> FeatureErrorResult:
    """Per-channel mean absolute error plus scalar MAE/MSE over all entries.

    Accepts (C, h, w) or (B, C, h, w) tensors/arrays; mismatched spatial
    sizes are average-pooled to the smaller grid before comparison.
    """
    ft = torch.as_tensor(np.asarray(feat_teacher.detach() if torch.is_tensor(feat_teacher) else feat_teacher))
    fs = torch.as_tensor(np.asarray(feat_student.detach() if torch.is_tensor(feat_student) else feat_student))
    if ft.dim() == 3:
        ft = ft.unsqueeze(0)
    if fs.dim() == 3:
        fs = fs.unsqueeze(0)
    if ft.shape[1] != fs.shape[1]:
        raise ValueError(f"channel counts differ: {ft.shape[1]} vs {fs.shape[1]}")
    if ft.shape[-2:] != fs.shape[-2:]:
        target = (min(ft.shape[-2], fs.shape[-2]), min(ft.shape[-1], fs.shape[-1]))
        ft = torch.nn.functional.adaptive_avg_pool2d(ft, target)
        fs = torch.nn.functional.adaptive_avg_pool2d(fs, target)
    diff = (ft.double() - fs.double())
    per_channel = diff.abs().mean(dim=(0, 2, 3)).numpy()
    return FeatureErrorResult(
        error_map=per_channel,
        mae=float(diff.abs().mean()),
        mse=float(diff.pow(2).mean()),
        scheme=scheme,
    )


def error_map_image(result: FeatureErrorResult, path) -> None:
    """Render the per-channel error map as a square-ish grayscale heat image
    (each pixel is one channel)."""
    c = result.error_map.shape[0]
    cols = int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / cols))
    grid = np.zeros(rows * cols, dtype=np.float64)
    grid[:c] = result.error_map
    peak = grid.max() if grid.max() > 0 else 1.0
    img = (grid / peak * 255).astype(np.uint8).reshape(rows, cols)
    Image.fromarray(img, mode="L").resize((cols * 16, rows * 16), Image.NEAREST).save(path)


# --------------------------------------------------------------------------
# segmentation metrics

def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a&b| / (|a|+|b|); two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of voxels inside the mask with >=1 face neighbor outside
    (array borders count as outside)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> tuple[float, float]:
    """(ASSD, HD95) in mm between two nonempty masks.

    Directed nearest-boundary distances are computed both ways and pooled;
    ASSD is the pooled mean, HD95 the linear-interpolation 95th percentile.
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMaskError("surface distances are undefined for an empty mask")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (a.ndim,):
        raise ValueError(f"spacing must have {a.ndim} components, got {spacing.shape}")
    pa = _boundary_voxels(a) * spacing
    pb = _boundary_voxels(b) * spacing
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    pooled = np.concatenate([d_ab, d_ba])
    return float(pooled.mean()), float(np.percentile(pooled, 95))


# --------------------------------------------------------------------------
# translation report

@dataclass
class PairMetrics:
    source: str
    target: str
    n: int
    n_local: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    local_ssim_mean: float
    local_ssim_std: float
    local_psnr_mean: float
    local_psnr_std: float
    perceptual_mean: float | None = None
    perceptual_std: float | None = None


@dataclass
class MetricsReport:
    """Per-directed-pair metrics plus their aggregate, with provenance.

    The aggregate is the arithmetic mean of the 12 per-pair means; the
    "_std" fields hold per-sample standard deviations (not across-run
    spreads).
    """

    pairs: list[PairMetrics]
    aggregate: dict
    metadata: dict

    def to_json(self) -> str:
        return json.dumps(
            {"metadata": self.metadata, "pairs": [asdict(p) for p in self.pairs],
             "aggregate": self.aggregate},
            indent=2, sort_keys=True, allow_nan=True)

    def to_csv(self) -> str:
        cols = ("source,target,n,n_local,ssim_mean,ssim_std,psnr_mean,psnr_std,"
                "local_ssim_mean,local_ssim_std,local_psnr_mean,local_psnr_std,"
                "perceptual_mean,perceptual_std")
        lines = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        lines.append(cols)
        for p in self.pairs:
            d = asdict(p)
            lines.append(",".join("" if d[c] is None else repr(d[c]) if isinstance(d[c], float) else str(d[c])
                                  for c in cols.split(",")))
        agg = self.aggregate
        lines.append(",".join(
            ["aggregate", "", str(agg["n"]), str(agg["n_local"])]
            + [repr(agg[c]) for c in ("ssim_mean", "ssim_std", "psnr_mean", "psnr_std",
                                      "local_ssim_mean", "local_ssim_std",
                                      "local_psnr_mean", "local_psnr_std")]
            + (["" if agg.get("perceptual_mean") is None else repr(agg["perceptual_mean"]),
                "" if agg.get("perceptual_std") is None else repr(agg["perceptual_std"])])
        ))
        return "\n".join(lines) + "\n"

    def save(self, stem: Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())


def identity_translate(image: np.ndarray, source: Modality, target: Modality,
                       labels: np.ndarray | None = None) -> np.ndarray:
    """Floor baseline: output = input."""
    return image


def evaluate_translation(
    translate_fn,
    pool: SlicePool,
    metadata: dict | None = None,
    perceptual=None,
    error_map_dir=None,
) -> MetricsReport:
    """Translate every pool slice along all 12 directed modality pairs and
    score against the paired ground truth.

    ``translate_fn(image_unit, source, target, labels=labels) -> image_unit``
    operates on [0, 1] slices; mask-guided translators compose whatever
    region they need from the passed ground-truth label slice. Metrics are
    computed in network space (range 2.0). The local metrics use the
    ground-truth WT mask and skip maskless slices.
    """
    extractor = get_extractor(perceptual) if perceptual is not None else None
    if error_map_dir is not None:
        error_map_dir = Path(error_map_dir)
        error_map_dir.mkdir(parents=True, exist_ok=True)

    pairs_out = []
    for source, target in directed_modality_pairs():
        vals = {k: [] for k in ("ssim", "psnr", "local_ssim", "local_psnr", "perceptual")}
        n_local = 0
        for key in pool.keys:
            src_img = pool.images[key][source]
            gt_img = pool.images[key][target]
            gen_img = np.clip(
                np.asarray(translate_fn(src_img, source, target, labels=pool.labels[key]),
                           dtype=np.float64), 0.0, 1.0)
            gen_net, gt_net = 2 * gen_img - 1, 2 * gt_img - 1
            vals["ssim"].append(ssim(gen_net, gt_net))
            vals["psnr"].append(psnr(gen_net, gt_net))
            wt = compose_region(pool.labels[key], TumorRegion.WT)
            if wt.pixels.any():
                n_local += 1
                vals["local_ssim"].append(local_metric(gen_net, gt_net, wt, "ssim"))
                vals["local_psnr"].append(local_metric(gen_net, gt_net, wt, "psnr"))
            if extractor is not None:
                vals["perceptual"].append(perceptual_distance(gen_img, gt_img, extractor))
            if error_map_dir is not None:
                emap = np.abs(gen_img - gt_img)
                fname = f"{key[0]}_s{key[1]:03d}_{source.file_tag}_to_{target.file_tag}.png"
                Image.fromarray((np.clip(emap, 0, 1) * 255).astype(np.uint8)).save(
                    error_map_dir / fname)

        def stat(name):
            data = vals[name]
            if not data:
                return float("nan"), float("nan")
            return float(np.mean(data)), float(np.std(data))

        s_m, s_s = stat("ssim")
        p_m, p_s = stat("psnr")
        ls_m, ls_s = stat("local_ssim")
        lp_m, lp_s = stat("local_psnr")
        pair = PairMetrics(
            source=source.file_tag, target=target.file_tag,
            n=len(pool.keys), n_local=n_local,
            ssim_mean=s_m, ssim_std=s_s, psnr_mean=p_m, psnr_std=p_s,
            local_ssim_mean=ls_m, local_ssim_std=ls_s,
            local_psnr_mean=lp_m, local_psnr_std=lp_s,
        )
        if extractor is not None:
            pc_m, pc_s = stat("perceptual")
            pair.perceptual_mean, pair.perceptual_std = pc_m, pc_s
        pairs_out.append(pair)

    aggregate = {
        "n": sum(p.n for p in pairs_out),
        "n_local": sum(p.n_local for p in pairs_out),
    }
    for metric in ("ssim_mean", "ssim_std", "psnr_mean", "psnr_std",
                   "local_ssim_mean", "local_ssim_std", "local_psnr_mean", "local_psnr_std"):
        aggregate[metric] = float(np.mean([getattr(p, metric) for p in pairs_out]))
    if extractor is not None:
        aggregate["perceptual_mean"] = float(np.mean([p.perceptual_mean for p in pairs_out]))
        aggregate["perceptual_std"] = float(np.mean([p.perceptual_std for p in pairs_out]))
        aggregate["perceptual_extractor"] = getattr(extractor, "name", "external")

    meta = dict(metadata or {})
    meta.setdefault("split", pool.split)
    return MetricsReport(pairs=pairs_out, aggregate=aggregate, metadata=meta)


def translator_from_checkpoint(path, mask_rng_seed: int = 0):
    """Build a translate_fn from a checkpoint.

    Student checkpoints translate mask-free. Teacher checkpoints are
    mask-guided: passing the ground-truth ``labels`` slice (as
    evaluate_translation does) lets the translator compose the region its
    training mask mode used; alternatively an explicit ``mask`` can be
    given. A region-guided teacher with neither raises.
    """
    from .model import load_checkpoint, modality_batch, student_forward, teacher_forward

    nets, cfg, _, bundle = load_checkpoint(path)
    gen = nets["generator"]
    for p in gen.parameters():
        p.requires_grad_(False)
    is_teacher = bundle.role == "teacher"
    rng = np.random.default_rng(mask_rng_seed)

    def _resolve_mask(image_unit, labels, mask):
        if mask is not None:
            return np.asarray(mask, dtype=np.float32)
        if cfg.mask_mode is MaskMode.ZEROS:
            return np.zeros_like(image_unit, dtype=np.float32)
        if cfg.mask_mode is MaskMode.RANDOM:
            return (rng.random(image_unit.shape) < 0.5).astype(np.float32)
        if labels is None:
            raise ValueError("teacher translation requires a tumor mask or label slice")
        region = TumorRegion(cfg.mask_mode.value)
        return compose_region(labels, region).pixels.astype(np.float32)

    def translate(image_unit: np.ndarray, source: Modality, target: Modality,
                  labels: np.ndarray | None = None,
                  mask: np.ndarray | None = None) -> np.ndarray:
        x = torch.from_numpy(np.asarray(image_unit, dtype=np.float32)[None, None] * 2 - 1)
        t_vec = modality_batch([target])
        with torch.no_grad():
            if is_teacher:
                m = torch.from_numpy(_resolve_mask(image_unit, labels, mask)[None, None])
                tumor = (x + 1.0) * m - 1.0
                out = teacher_forward(gen, x, tumor, t_vec)
            else:
                out = student_forward(gen, x, t_vec)
        return ((out.whole[0, 0].numpy() + 1.0) / 2.0).clip(0.0, 1.0)

    translate.needs_mask = is_teacher and cfg.mask_mode not in (MaskMode.ZEROS, MaskMode.RANDOM)
    translate.config = cfg
    translate.role = bundle.role
    translate.scheme = bundle.scheme
    return translate
