"""Teacher and student training loops.

Determinism contract: every source of randomness in an epoch (batch
composition, augmentation, RANDOM-mode masks, gradient-penalty
interpolation) is derived from (seed, role, epoch), and torch runs
single-threaded inside :func:`run_training`. Fixed-seed reruns therefore
reproduce losses.csv bitwise, and resuming from an epoch-boundary
checkpoint (parameters + Adam moments) continues the exact run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .core import ExperimentConfig, MaskMode, Modality, Sample, StudentScheme
from .data import DatasetManifest, SlicePool, augment
from .model import (
    CheckpointBundle,
    Generator,
    GeneratorSpec,
    build_critics,
    build_generator,
    derived_seed,
    modality_batch,
    read_checkpoint,
    save_checkpoint,
    student_forward,
    teacher_forward,
)

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = "epoch,step,lr," + ",".join(L.LossBreakdown.COLUMNS)


class TrainingDiverged(RuntimeError):
    """A loss term went non-finite; the message names the term."""


@dataclass
class TrainState:
    """Progress and running averages of one training run."""

    role: str
    epoch: int = 0
    step: int = 0
    running: dict = field(default_factory=dict)

    def update(self, bd: L.LossBreakdown) -> None:
        self.step += 1
        for name in L.LossBreakdown.COLUMNS:
            v = float(getattr(bd, name))
            n = self.step
            self.running[name] = self.running.get(name, 0.0) * (n - 1) / n + v / n


def lr_at_epoch(e: int, cfg: ExperimentConfig) -> float:
    """Constant lr for the first lr_constant_epochs, then linear decay
    reaching lr_final at the last epoch."""
    if not 0 <= e < cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs})")
    c = cfg.lr_constant_epochs
    if e < c:
        return cfg.lr_initial
    denom = cfg.epochs - 1 - c
    if denom <= 0:
        return cfg.lr_final
    frac = (e - c) / denom
    return cfg.lr_initial + frac * (cfg.lr_final - cfg.lr_initial)


@dataclass
class Batch:
    """Network-space tensors assembled from unpaired draws."""

    image: torch.Tensor       # B x 1 x H x W in [-1, 1]
    tumor: torch.Tensor       # B x 1 x H x W, mask multiply done in unit space
    mask: torch.Tensor        # B x 1 x H x W binary float
    source: list[Modality]
    target: list[Modality]
    s_vec: torch.Tensor       # B x 4 one-hot of the source modality
    t_vec: torch.Tensor       # B x 4 one-hot of the target modality


def build_batch(draws: list[tuple[Sample, Modality]]) -> Batch:
    imgs = np.stack([s.image.pixels for s, _ in draws])[:, None]
    masks = np.stack([s.mask.pixels for s, _ in draws]).astype(np.float32)[:, None]
    tumor_unit = imgs * masks
    source = [s.modality for s, _ in draws]
    target = [t for _, t in draws]
    return Batch(
        image=torch.from_numpy(2.0 * imgs - 1.0),
        tumor=torch.from_numpy(2.0 * tumor_unit - 1.0),
        mask=torch.from_numpy(masks),
        source=source,
        target=target,
        s_vec=modality_batch(source),
        t_vec=modality_batch(target),
    )


def mask_crop(x_net: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Network-space equivalent of unit-space mask multiplication:
    (x+1)/2 * m mapped back, i.e. (x + 1) * m - 1."""
    return (x_net + 1.0) * mask - 1.0


def _critic_phase(critic, optimizer, real, fake_detached, source, lambda_gp, eps_rng, n_steps):
    """Train one critic; returns the last sub-step's (gap, gp, cls_real)."""
    for _ in range(n_steps):
        optimizer.zero_grad(set_to_none=True)
        gap = L.wasserstein_gap(critic, real, fake_detached)
        gp = L.gradient_penalty(critic, real, fake_detached, lambda_gp, rng=eps_rng)
        cls_real = L.cls_loss_real(critic, real, source)
        total = -(gap - gp) + cls_real
        total.backward()
        optimizer.step()
    return gap, gp, cls_real


def teacher_step(batch: Batch, nets: dict, optimizers: dict, cfg: ExperimentConfig,
                 eps_rng: torch.Generator) -> L.LossBreakdown:
    """One full teacher update: critics on both branches, then the generator
    with its cycle pass."""
    gen: Generator = nets["generator"]
    d_g, d_l = nets["critic_global"], nets["critic_local"]

    out = teacher_forward(gen, batch.image, batch.tumor, batch.t_vec)

    adv_g, gp_g, cls_real_g = _critic_phase(
        d_g, optimizers["critic_global"], batch.image, out.whole.detach(),
        batch.source, cfg.lambda_gp, eps_rng, cfg.critic_steps_per_gen_step)
    adv_l, gp_l, cls_real_l = _critic_phase(
        d_l, optimizers["critic_local"], batch.tumor, out.tumor.detach(),
        batch.source, cfg.lambda_gp, eps_rng, cfg.critic_steps_per_gen_step)

    # generator phase: adversarial + classification + cycle terms
    gen_adv_g = L.adversarial_generator_term(d_g, out.whole)
    gen_adv_l = L.adversarial_generator_term(d_l, out.tumor)
    cls_fake = L.cls_loss_fake(d_g, d_l, out.whole, out.tumor, batch.target)

    tumor_crop = mask_crop(out.whole, batch.mask)  # tumor area of the generated whole
    cycle = teacher_forward(gen, out.whole, tumor_crop, batch.s_vec)
    rec = L.reconstruct_loss(batch.image, cycle.whole)
    local = L.local_consistency_loss(out.tumor, tumor_crop, batch.tumor, cycle.tumor)

    bd = L.total_losses(
        adv_g=adv_g, adv_l=adv_l, gp_g=gp_g, gp_l=gp_l,
        cls_real_g=cls_real_g, cls_real_l=cls_real_l, cls_fake=cls_fake,
        gen_adv_g=gen_adv_g, gen_adv_l=gen_adv_l, local=local, rec=rec,
        dis=0.0, lambda_1=cfg.lambda_1, lambda_2=cfg.lambda_2, role="teacher")

    optimizers["generator"].zero_grad(set_to_none=True)
    bd.total_G.backward()
    optimizers["generator"].step()

    result = bd.floats()
    _abort_on_nonfinite(result)
    return result


def student_step(batch: Batch, nets: dict, optimizers: dict, teacher: Generator,
                 cfg: ExperimentConfig, eps_rng: torch.Generator) -> L.LossBreakdown:
    """One student update distilling from the frozen mask-guided teacher."""
    gen: Generator = nets["generator"]
    scheme = gen.scheme
    d_g = nets["critic_global"]
    d_l = nets.get("critic_local")

    with torch.no_grad():
        t_out = teacher_forward(teacher, batch.image, batch.tumor, batch.t_vec)

    out = student_forward(gen, batch.image, batch.t_vec)

    adv_g, gp_g, cls_real_g = _critic_phase(
        d_g, optimizers["critic_global"], batch.image, out.whole.detach(),
        batch.source, cfg.lambda_gp, eps_rng, cfg.critic_steps_per_gen_step)
    if d_l is not None:
        adv_l, gp_l, cls_real_l = _critic_phase(
            d_l, optimizers["critic_local"], batch.tumor, out.tumor.detach(),
            batch.source, cfg.lambda_gp, eps_rng, cfg.critic_steps_per_gen_step)
    else:
        adv_l = gp_l = cls_real_l = torch.zeros(())

    gen_adv_g = L.adversarial_generator_term(d_g, out.whole)
    gen_adv_l = (L.adversarial_generator_term(d_l, out.tumor)
                 if d_l is not None else torch.zeros(()))
    cls_fake = L.cls_loss_fake(d_g, d_l, out.whole, out.tumor, batch.target)

    # cycle: the generated whole image goes back through every branch
    cycle = student_forward(gen, out.whole, batch.s_vec)
    rec = L.reconstruct_loss(batch.image, cycle.whole)
    if scheme.has_tumor_output:
        tumor_crop = mask_crop(out.whole, batch.mask)
        local = L.local_consistency_loss(out.tumor, tumor_crop, batch.tumor, cycle.tumor)
    else:
        local = torch.zeros(())

    dis = L.distillation_loss(t_out.feature, out.feature, t_out.whole, out.whole)

    bd = L.total_losses(
        adv_g=adv_g, adv_l=adv_l, gp_g=gp_g, gp_l=gp_l,
        cls_real_g=cls_real_g, cls_real_l=cls_real_l, cls_fake=cls_fake,
        gen_adv_g=gen_adv_g, gen_adv_l=gen_adv_l, local=local, rec=rec,
        dis=dis, lambda_1=cfg.lambda_1, lambda_2=cfg.lambda_2, role="student")

    optimizers["generator"].zero_grad(set_to_none=True)
    bd.total_G.backward()
    optimizers["generator"].step()

    result = bd.floats()
    _abort_on_nonfinite(result)
    return result


def _abort_on_nonfinite(bd: L.LossBreakdown) -> None:
    term = bd.first_nonfinite()
    if term is not None:
        raise TrainingDiverged(f"non-finite loss term {term!r}; aborting the run")


# --------------------------------------------------------------------------
# optimizer state round-trip (Adam moments ride inside the checkpoint)

def _optimizer_arrays(name: str, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    state = opt.state_dict()["state"]
    for idx, entry in state.items():
        out[f"opt.{name}.{idx}.step"] = np.asarray(float(entry["step"]), dtype=np.float64)
        out[f"opt.{name}.{idx}.exp_avg"] = entry["exp_avg"].numpy()
        out[f"opt.{name}.{idx}.exp_avg_sq"] = entry["exp_avg_sq"].numpy()
    return out


def _restore_optimizer(name: str, opt: torch.optim.Adam, bundle: CheckpointBundle) -> None:
    sd = opt.state_dict()
    n_params = sum(len(g["params"]) for g in sd["param_groups"])
    state = {}
    for idx in range(n_params):
        step = bundle.extra(f"opt.{name}.{idx}.step")
        if step is None:
            continue
        state[idx] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(bundle.extra(f"opt.{name}.{idx}.exp_avg").copy()),
            "exp_avg_sq": torch.from_numpy(bundle.extra(f"opt.{name}.{idx}.exp_avg_sq").copy()),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


def _build_optimizers(nets: dict, cfg: ExperimentConfig) -> dict:
    return {
        name: torch.optim.Adam(net.parameters(), lr=cfg.lr_initial,
                               betas=(cfg.moment_1, cfg.moment_2))
        for name, net in nets.items()
    }


def _set_lr(optimizers: dict, lr: float) -> None:
    for opt in optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


# --------------------------------------------------------------------------
# run loop

def run_training(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    role: str,
    out_dir,
    teacher_checkpoint=None,
    resume_from=None,
) -> Path:
    """Train one network for cfg.epochs; returns the final checkpoint path.

    Writes losses.csv (one row per step), config.resolved, cadence
    checkpoints, and periodic sample grids into ``out_dir``. For
    role="student" a completed teacher checkpoint is required; the teacher
    is loaded frozen.
    """
    if role not in ("teacher", "student"):
        raise ValueError(f"role must be teacher or student, got {role!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.resolved")

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _run_training_inner(manifest, cfg, role, out_dir, teacher_checkpoint, resume_from)
    finally:
        torch.set_num_threads(prev_threads)


def _run_training_inner(manifest, cfg, role, out_dir, teacher_checkpoint, resume_from):
    scheme = cfg.student_scheme if role == "student" else StudentScheme.A
    need_local_critic = scheme.has_tumor_output or role == "teacher"

    teacher = None
    if role == "student":
        if teacher_checkpoint is None:
            raise ValueError("student training requires a teacher checkpoint")
        t_bundle = read_checkpoint(teacher_checkpoint)
        if t_bundle.role != "teacher":
            raise ValueError(f"{teacher_checkpoint}: not a teacher checkpoint")
        teacher = Generator(GeneratorSpec.from_config(t_bundle.config), scheme=StudentScheme.A)
        t_bundle.restore_into("generator", teacher)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    nets = {"generator": build_generator(cfg, scheme=scheme)}
    nets.update(build_critics(cfg, need_local=need_local_critic))
    optimizers = _build_optimizers(nets, cfg)

    start_epoch = 0
    if resume_from is not None:
        bundle = read_checkpoint(resume_from)
        if bundle.role != role:
            raise ValueError(f"{resume_from}: checkpoint role {bundle.role!r} != {role!r}")
        for name, net in nets.items():
            bundle.restore_into(name, net)
        for name, opt in optimizers.items():
            _restore_optimizer(name, opt, bundle)
        start_epoch = bundle.epoch + 1

    pool = SlicePool(
        manifest, "train", cfg.resolution,
        slice_threshold=cfg.slice_threshold,
        percentile_low=cfg.percentile_low,
        percentile_high=cfg.percentile_high,
    )
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(pool) // cfg.batch_size)

    csv_path = out_dir / "losses.csv"
    csv_mode = "a" if (resume_from is not None and csv_path.exists()) else "w"
    state = TrainState(role=role, epoch=start_epoch)

    def save_at(epoch: int, filename: str) -> Path:
        extras = {}
        for name, opt in optimizers.items():
            extras.update(_optimizer_arrays(name, opt))
        path = out_dir / filename
        save_checkpoint(path, nets, cfg, epoch=epoch, role=role, scheme=scheme,
                        extra_arrays=extras)
        return path

    with open(csv_path, csv_mode) as csv:
        if csv_mode == "w":
            csv.write(LOSS_CSV_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            _set_lr(optimizers, lr)
            draw_rng = np.random.default_rng(derived_seed(cfg.seed, role, "draw", epoch))
            eps_rng = torch.Generator().manual_seed(derived_seed(cfg.seed, role, "eps", epoch))
            state.epoch = epoch
            for step in range(steps_per_epoch):
                draws = []
                for _ in range(cfg.batch_size):
                    sample, target = pool.draw(cfg.mask_mode, draw_rng)
                    if cfg.augment:
                        sample = augment(sample, draw_rng)
                    draws.append((sample, target))
                batch = build_batch(draws)
                try:
                    if role == "teacher":
                        bd = teacher_step(batch, nets, optimizers, cfg, eps_rng)
                    else:
                        bd = student_step(batch, nets, optimizers, teacher, cfg, eps_rng)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
                state.update(bd)
                csv.write(f"{epoch},{step},{lr!r},{bd.csv_row()}\n")
            csv.flush()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_at(epoch, f"checkpoint_epoch{epoch:04d}.ckpt")
            if cfg.sample_grid_every and (epoch + 1) % cfg.sample_grid_every == 0:
                _write_sample_grid(out_dir / f"samples_epoch{epoch:04d}.png",
                                   nets["generator"], teacher, pool, cfg, role)
            log.info("epoch %d/%d done (lr=%.3g, mean total_G=%.4f)",
                     epoch + 1, cfg.epochs, lr, state.running.get("total_G", 0.0))

    return save_at(cfg.epochs - 1, "checkpoint_final.ckpt")


def _write_sample_grid(path, gen: Generator, teacher, pool: SlicePool,
                       cfg: ExperimentConfig, role: str, n: int = 4) -> None:
    """Rows of source | generated whole | tumor-branch output (when present)."""
    rng = np.random.default_rng(0)
    draws = [pool.draw(cfg.mask_mode, rng) for _ in range(min(n, len(pool)))]
    batch = build_batch(draws)
    gen.eval()
    with torch.no_grad():
        if role == "teacher":
            out = teacher_forward(gen, batch.image, batch.tumor, batch.t_vec)
        else:
            out = student_forward(gen, batch.image, batch.t_vec)
    gen.train()

    def to_u8(x):
        return (((x.numpy() + 1.0) / 2.0).clip(0, 1) * 255).astype(np.uint8)

    rows = []
    for i in range(batch.image.shape[0]):
        cells = [to_u8(batch.image[i, 0]), to_u8(out.whole[i, 0])]
        if out.tumor is not None:
            cells.append(to_u8(out.tumor[i, 0]))
        rows.append(np.concatenate(cells, axis=1))
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)
