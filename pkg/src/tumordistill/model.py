"""Generator, critics, student architecture schemes, and checkpoint I/O.

The generator is two U-net branches (global: whole image, local: tumor
image) whose bottlenecks are merged by a learned fusion block; both
decoders consume the fused feature. The target modality enters as four
constant one-hot channels concatenated to each branch input. Critics are
PatchGAN stacks without output squashing (Wasserstein) plus a pooled
4-way modality-classification head.

The teacher and the scheme-A student share the "full" arrangement; schemes
B/C/D drop the local encoder and/or decoder as described by
:class:`tumordistill.core.StudentScheme`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import MODALITY_ORDER, ExperimentConfig, Modality, StudentScheme, one_hot

N_MODALITIES = len(MODALITY_ORDER)

CHECKPOINT_MAGIC = b"TDCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture knobs shared by both branches.

    Both branches produce bottleneck features of identical shape; that is
    what the fusion block requires.
    """

    base_width: int = 64
    depth: int = 4
    in_channels: int = 1
    cond_channels: int = N_MODALITIES
    use_skips: bool = True

    def encoder_channels(self) -> list[int]:
        return [self.base_width * min(2 ** i, 8) for i in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_channels()[-1]

    def bottleneck_size(self, resolution: int) -> int:
        if resolution % (2 ** self.depth) != 0:
            raise ValueError(
                f"resolution {resolution} is not divisible by 2^depth={2 ** self.depth}"
            )
        return resolution // (2 ** self.depth)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "GeneratorSpec":
        return cls(base_width=cfg.base_width, depth=cfg.depth)


@dataclass
class TranslationOutput:
    """Generator result: whole/tumor images in [-1, 1] plus the distillation tap."""

    whole: torch.Tensor
    tumor: torch.Tensor | None
    feature: torch.Tensor

    def require_tumor(self) -> torch.Tensor:
        if self.tumor is None:
            raise ValueError("this architecture scheme has no tumor output")
        return self.tumor


@dataclass
class CriticOutput:
    src_map: torch.Tensor    # B x 1 x h x w patch realness, unbounded
    cls_logits: torch.Tensor  # B x 4 modality logits


class Encoder(nn.Module):
    """Strided conv stack; returns the bottleneck and per-stage skip features."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        chans = spec.encoder_channels()
        stages = []
        prev = spec.in_channels + spec.cond_channels
        for i, ch in enumerate(chans):
            block = [nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1)]
            if i > 0:
                block.append(nn.InstanceNorm2d(ch))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            stages.append(nn.Sequential(*block))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return x, skips[:-1]


class Decoder(nn.Module):
    """Transposed-conv stack mirroring the encoder, with per-branch skips."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        chans = spec.encoder_channels()
        self.use_skips = spec.use_skips
        ups = []
        prev = chans[-1]
        for i in range(spec.depth - 1, 0, -1):
            out_ch = chans[i - 1]
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(prev, out_ch, kernel_size=4, stride=2, padding=1),
                    nn.InstanceNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            prev = out_ch * (2 if self.use_skips else 1)
        ups.append(
            nn.Sequential(
                nn.ConvTranspose2d(prev, chans[0], kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(chans[0]),
                nn.ReLU(inplace=True),
            )
        )
        self.ups = nn.ModuleList(ups)
        self.head = nn.Sequential(
            nn.Conv2d(chans[0], spec.in_channels, kernel_size=7, padding=3),
            nn.Tanh(),
        )

    def forward(self, x, skips):
        for i, up in enumerate(self.ups):
            x = up(x)
            if self.use_skips and i < len(self.ups) - 1:
                x = torch.cat([x, skips[-(i + 1)]], dim=1)
        return self.head(x)


class FusionBlock(nn.Module):
    """Learned mixing of the two bottlenecks; output shape equals input shape.

    Channel-concatenates the global and local features, then two mixing
    convolutions. Kept behind this interface so an alternate fusion can be
    swapped without touching the trainers.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.mix = nn.Sequential(
            nn.Conv2d(2 * channels, channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, f_global, f_local):
        if f_global.shape != f_local.shape:
            raise ValueError(
                f"fusion inputs must share a shape: {tuple(f_global.shape)} vs {tuple(f_local.shape)}"
            )
        return self.mix(torch.cat([f_global, f_local], dim=1))


def _broadcast_condition(t_vec: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    b, _, h, w = like.shape
    return t_vec.view(b, -1, 1, 1).expand(b, t_vec.shape[-1], h, w)


class Generator(nn.Module):
    """Two-branch translation generator covering the teacher and all schemes.

    ``scheme`` is the student arrangement; the teacher and the scheme-A
    student are structurally identical ("full" arrangement), they differ
    only in what the caller feeds the local branch.
    """

    def __init__(self, spec: GeneratorSpec, scheme: StudentScheme = StudentScheme.A):
        super().__init__()
        self.spec = spec
        self.scheme = scheme
        self.global_encoder = Encoder(spec)
        self.global_decoder = Decoder(spec)
        self.has_local_encoder = scheme in (StudentScheme.A, StudentScheme.D)
        self.has_local_decoder = scheme.has_tumor_output
        self.has_fusion = scheme is not StudentScheme.B
        if self.has_local_encoder:
            self.local_encoder = Encoder(spec)
        if self.has_local_decoder:
            self.local_decoder = Decoder(spec)
        if self.has_fusion:
            self.fusion = FusionBlock(spec.bottleneck_channels)

    def forward(self, image: torch.Tensor, local_image: torch.Tensor | None,
                t_vec: torch.Tensor) -> TranslationOutput:
        _check_finite(image, "generator input")
        cond = _broadcast_condition(t_vec, image)
        f_g, skips_g = self.global_encoder(torch.cat([image, cond], dim=1))

        if self.scheme is StudentScheme.B:
            whole = self.global_decoder(f_g, skips_g)
            return TranslationOutput(whole=whole, tumor=None, feature=f_g)

        if self.has_local_encoder:
            if local_image is None:
                raise ValueError("this arrangement requires a local-branch input")
            _check_finite(local_image, "local-branch input")
            f_l, skips_l = self.local_encoder(torch.cat([local_image, cond], dim=1))
        else:  # scheme C: fusion consumes the global bottleneck only
            f_l, skips_l = f_g, skips_g
        fused = self.fusion(f_g, f_l)

        whole = self.global_decoder(fused, skips_g)
        tumor = self.local_decoder(fused, skips_l) if self.has_local_decoder else None
        feature = fused if self.scheme.feature_tap == "fusion" else f_g
        return TranslationOutput(whole=whole, tumor=tumor, feature=feature)


class PatchCritic(nn.Module):
    """PatchGAN realness map (no squashing) plus a pooled modality head.

    The src_map spatial size is fixed by the stride schedule (three stride-2
    convolutions, then two stride-1): a 128x128 input yields a 14x14 map.
    """

    def __init__(self, base_width: int = 64, in_channels: int = 1):
        super().__init__()
        w = base_width
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 8 * w, kernel_size=4, stride=1, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.src_head = nn.Conv2d(8 * w, 1, kernel_size=4, stride=1, padding=1)
        self.cls_head = nn.Linear(8 * w, N_MODALITIES)

    def forward(self, x) -> CriticOutput:
        _check_finite(x, "critic input")
        feat = self.trunk(x)
        src_map = self.src_head(feat)
        pooled = feat.mean(dim=(2, 3))
        return CriticOutput(src_map=src_map, cls_logits=self.cls_head(pooled))


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


def derived_seed(*parts) -> int:
    """Process-independent integer seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def modality_batch(modalities: list[Modality], dtype=torch.float32) -> torch.Tensor:
    """Stack one-hot conditioning vectors for a batch."""
    return torch.tensor(np.stack([one_hot(m) for m in modalities]), dtype=dtype)


def teacher_forward(gen: Generator, image: torch.Tensor, tumor_image: torch.Tensor,
                    t_vec: torch.Tensor) -> TranslationOutput:
    """Mask-guided mapping: global branch sees the whole image, local branch
    the tumor image, both conditioned on the target modality."""
    if gen.scheme is not StudentScheme.A:
        raise ValueError("the teacher uses the full (scheme A) arrangement")
    if image.shape != tumor_image.shape:
        raise ValueError(f"image {tuple(image.shape)} vs tumor image {tuple(tumor_image.shape)}")
    return gen(image, tumor_image, t_vec)


def student_forward(gen: Generator, image: torch.Tensor, t_vec: torch.Tensor) -> TranslationOutput:
    """Mask-free mapping: every branch the scheme retains sees the whole image."""
    return gen(image, image, t_vec)


def build_generator(cfg: ExperimentConfig, scheme: StudentScheme = StudentScheme.A,
                    seed_offset: int = 0) -> Generator:
    """Construct and deterministically initialize a generator.

    Seeds the global torch RNG from (cfg.seed, seed_offset) before building,
    so two builders with the same arguments produce bitwise-equal weights.
    """
    torch.manual_seed(derived_seed(cfg.seed, "generator", seed_offset))
    return Generator(GeneratorSpec.from_config(cfg), scheme=scheme)


def build_critics(cfg: ExperimentConfig, need_local: bool = True,
                  seed_offset: int = 0) -> dict[str, PatchCritic]:
    torch.manual_seed(derived_seed(cfg.seed, "critics", seed_offset))
    critics = {"critic_global": PatchCritic(cfg.base_width)}
    if need_local:
        critics["critic_local"] = PatchCritic(cfg.base_width)
    return critics


# --------------------------------------------------------------------------
# checkpoint container
#
# Layout: MAGIC | uint32 version | uint64 manifest_len | manifest JSON |
# concatenated little-endian raw arrays. The manifest records the format
# version, role, scheme, modality ordering, the full config text, and a
# name -> (dtype, shape, offset) table for every parameter.

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, nets: dict[str, nn.Module], config: ExperimentConfig,
                    epoch: int, role: str, scheme: StudentScheme = StudentScheme.A,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for net_name, net in nets.items():
        for p_name, tensor in net.state_dict().items():
            arrays.append((f"{net_name}.{p_name}", tensor.detach().cpu().numpy()))
    for name, arr in (extra_arrays or {}).items():
        arrays.append((f"extra.{name}", np.asarray(arr)))

    table = []
    offset = 0
    payload = bytearray()
    for name, arr in arrays:
        arr_le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr_le.tobytes()
        table.append({
            "name": name,
            "dtype": str(np.dtype(arr.dtype.newbyteorder("<")).str),
            "shape": list(arr.shape),
            "offset": offset,
        })
        payload.extend(raw)
        offset += len(raw)

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "role": role,
        "scheme": scheme.value,
        "epoch": int(epoch),
        "modality_order": [m.file_tag for m in MODALITY_ORDER],
        "config": config.to_text(),
        "arrays": table,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


@dataclass
class CheckpointBundle:
    config: ExperimentConfig
    epoch: int
    role: str
    scheme: StudentScheme
    modality_order: list[str]
    arrays: dict[str, np.ndarray]

    def net_arrays(self, net_name: str) -> dict[str, np.ndarray]:
        prefix = f"{net_name}."
        return {k[len(prefix):]: v for k, v in self.arrays.items()
                if k.startswith(prefix) and not k.startswith("extra.")}

    def extra(self, name: str) -> np.ndarray | None:
        return self.arrays.get(f"extra.{name}")

    def restore_into(self, net_name: str, net: nn.Module) -> None:
        """Copy stored arrays into ``net``; names the first offending
        parameter on any mismatch."""
        stored = self.net_arrays(net_name)
        state = net.state_dict()
        for p_name, tensor in state.items():
            if p_name not in stored:
                raise CheckpointError(f"checkpoint is missing parameter {net_name}.{p_name}")
            arr = stored[p_name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {net_name}.{p_name}: "
                    f"checkpoint {tuple(arr.shape)} vs model {tuple(tensor.shape)}"
                )
        leftovers = set(stored) - set(state)
        if leftovers:
            raise CheckpointError(
                f"checkpoint has unexpected parameter {net_name}.{sorted(leftovers)[0]}"
            )
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in stored.items()})


def read_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len))
        payload = fh.read()

    order = [Modality.from_name(n) for n in manifest["modality_order"]]
    if tuple(order) != MODALITY_ORDER:
        raise CheckpointError(f"{path}: modality ordering {manifest['modality_order']} differs")

    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr
    return CheckpointBundle(
        config=ExperimentConfig.from_text(manifest["config"]),
        epoch=manifest["epoch"],
        role=manifest["role"],
        scheme=StudentScheme(manifest["scheme"]),
        modality_order=manifest["modality_order"],
        arrays=arrays,
    )


def load_checkpoint(path):
    """Rebuild the saved networks: returns (nets, config, epoch, bundle)."""
    bundle = read_checkpoint(path)
    cfg = bundle.config
    gen = Generator(GeneratorSpec.from_config(cfg), scheme=bundle.scheme)
    nets: dict[str, nn.Module] = {"generator": gen}
    if any(k.startswith("critic_global.") for k in bundle.arrays):
        nets["critic_global"] = PatchCritic(cfg.base_width)
    if any(k.startswith("critic_local.") for k in bundle.arrays):
        nets["critic_local"] = PatchCritic(cfg.base_width)
    for name, net in nets.items():
        bundle.restore_into(name, net)
        net.eval()
    return nets, cfg, bundle.epoch, bundle
