"""Differentiable training objectives.

Every operation is a pure scalar-valued function of model outputs and works
in whatever dtype the inputs carry (training uses float32; the analytic
test oracles run in float64). The Wasserstein critic value is split into
the gap term and the gradient-penalty term so both totals can be composed
exactly:

    critic:     L_adv = gap - gp,         L_D = -L_adv + L_r_cls
    generator:  uses -E[D(fake)] only; the E[D(real)] offset and the GP
                term carry no generator gradient and are excluded.

The student total adds the distillation term: L_G_student = L_G_teacher
+ lambda_2 * L_dis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .core import Modality

# classification probabilities are clamped here before the log so a
# confidently-wrong head cannot produce a non-finite loss
PROB_FLOOR = 1e-12


def wasserstein_gap(critic, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """E[D_src(real)] - E[D_src(fake)], the gap part of the critic value."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    if real.shape[0] == 0:
        raise ValueError("empty batch")
    return critic(real).src_map.mean() - critic(fake).src_map.mean()


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, lambda_gp: float,
                     rng: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
    """lambda_gp * E[(||grad D(x_hat)||_2 - 1)^2].

    x_hat lies uniformly on the straight line between each real image and
    its generated counterpart: one coefficient per sample, broadcast over
    pixels. The norm pools every pixel of a sample. ``eps`` overrides the
    sampled coefficients (used by tests to pin the interpolation points).
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    b = real.shape[0]
    eps_shape = (b,) + (1,) * (real.dim() - 1)
    if eps is None:
        eps = torch.rand(eps_shape, generator=rng, dtype=real.dtype, device=real.device)
    else:
        eps = eps.reshape(eps_shape).to(dtype=real.dtype, device=real.device)
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    d_hat = critic(x_hat).src_map
    grads = torch.autograd.grad(
        outputs=d_hat, inputs=x_hat,
        grad_outputs=torch.ones_like(d_hat),
        create_graph=True, retain_graph=True,
    )[0]
    norms = grads.reshape(b, -1).norm(2, dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def adversarial_critic_objective(critic, real: torch.Tensor, fake: torch.Tensor,
                                 lambda_gp: float, rng: torch.Generator | None = None
                                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """The full critic-side adversarial value: (L_adv, gp_term).

    L_adv = E[D(real)] - E[D(fake)] - gp_term. The critic trains by
    minimizing -L_adv plus its classification loss. ``fake`` should be
    detached from the generator by the caller.
    """
    gap = wasserstein_gap(critic, real, fake)
    gp = gradient_penalty(critic, real, fake, lambda_gp, rng=rng)
    return gap - gp, gp


def adversarial_generator_term(critic, fake: torch.Tensor) -> torch.Tensor:
    """-E[D_src(fake)]: descending this pushes critic scores of fakes up."""
    return -critic(fake).src_map.mean()


def _modality_indices(s, batch: int, device) -> torch.Tensor:
    if isinstance(s, Modality):
        return torch.full((batch,), s.canonical_index, dtype=torch.long, device=device)
    if isinstance(s, (list, tuple)):
        return torch.tensor([m.canonical_index for m in s], dtype=torch.long, device=device)
    return torch.as_tensor(s, dtype=torch.long, device=device)


def _nll(logits: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    probs = torch.softmax(logits, dim=1)
    picked = probs.gather(1, idx.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def cls_loss_real(critic, x: torch.Tensor, s) -> torch.Tensor:
    """-E[log p_cls(s | x)] on real images; optimizes the discriminator."""
    logits = critic(x).cls_logits
    return _nll(logits, _modality_indices(s, x.shape[0], x.device))


def cls_loss_fake_branch(critic, generated: torch.Tensor, t) -> torch.Tensor:
    """One branch of the fake-image classification loss (Eq. of its head)."""
    logits = critic(generated).cls_logits
    return _nll(logits, _modality_indices(t, generated.shape[0], generated.device))


def cls_loss_fake(critic_global, critic_local, image_out: torch.Tensor,
                  tumor_out: torch.Tensor | None, t) -> torch.Tensor:
    """Sum of the global and local fake-classification terms.

    Schemes without a tumor output simply contribute no local term.
    """
    total = cls_loss_fake_branch(critic_global, image_out, t)
    if tumor_out is not None and critic_local is not None:
        total = total + cls_loss_fake_branch(critic_local, tumor_out, t)
    return total


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def local_consistency_loss(tumor_out: torch.Tensor, tumor_crop: torch.Tensor,
                           tumor_src: torch.Tensor, tumor_rec: torch.Tensor) -> torch.Tensor:
    """L1 agreement of the local branch with the mask-cropped whole outputs.

    First term: generated tumor image vs the tumor area cropped out of the
    generated whole image. Second term: source tumor image vs its
    reconstruction from the cycle pass. Each term is batch-averaged, then
    the two are summed.
    """
    return l1_mean(tumor_out, tumor_crop) + l1_mean(tumor_src, tumor_rec)


def reconstruct_loss(image_src: torch.Tensor, image_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute error of the cycle reconstruction."""
    return l1_mean(image_src, image_rec)


def distillation_loss(feat_teacher: torch.Tensor, feat_student: torch.Tensor,
                      image_teacher: torch.Tensor, image_student: torch.Tensor) -> torch.Tensor:
    """Feature-level plus image-level distillation distance.

    Teacher tensors must not carry gradients (the teacher is frozen); this
    is asserted rather than silently detached.
    """
    if feat_teacher.requires_grad or image_teacher.requires_grad:
        raise ValueError("teacher tensors must be detached (teacher is frozen)")
    return l1_mean(feat_teacher, feat_student) + l1_mean(image_teacher, image_student)


@dataclass
class LossBreakdown:
    """One training step's loss components and their exact compositions.

    ``adv_*`` store the Wasserstein gap; the full critic-side adversarial
    value is ``adv_* - gp_*``. ``gen_adv_*`` store the generator-side
    -E[D(fake)] terms. Fields may hold tensors (inside a step) or floats
    (logging); ``floats()`` converts.
    """

    adv_g: float = 0.0
    adv_l: float = 0.0
    gp_g: float = 0.0
    gp_l: float = 0.0
    cls_real_g: float = 0.0
    cls_real_l: float = 0.0
    cls_fake: float = 0.0
    gen_adv_g: float = 0.0
    gen_adv_l: float = 0.0
    local: float = 0.0
    rec: float = 0.0
    dis: float = 0.0
    total_D_g: float = 0.0
    total_D_l: float = 0.0
    total_G: float = 0.0

    COLUMNS = (
        "adv_g", "adv_l", "gp_g", "gp_l", "cls_real_g", "cls_real_l", "cls_fake",
        "gen_adv_g", "gen_adv_l", "local", "rec", "dis",
        "total_D_g", "total_D_l", "total_G",
    )

    def floats(self) -> "LossBreakdown":
        def val(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        return LossBreakdown(**{f.name: val(getattr(self, f.name)) for f in fields(self)})

    def csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, c))) for c in self.COLUMNS)

    def first_nonfinite(self) -> str | None:
        for c in self.COLUMNS:
            v = getattr(self, c)
            v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            if v != v or v in (float("inf"), float("-inf")):
                return c
        return None


def total_losses(*, adv_g, adv_l, gp_g, gp_l, cls_real_g, cls_real_l, cls_fake,
                 gen_adv_g, gen_adv_l, local, rec, dis,
                 lambda_1: float, lambda_2: float, role: str) -> LossBreakdown:
    """Compose the critic and generator totals from their components.

    Works on floats or tensors. ``role`` is "teacher" or "student"; only the
    student total includes the distillation term.
    """
    if role not in ("teacher", "student"):
        raise ValueError(f"role must be teacher or student, got {role!r}")
    total_d_g = -(adv_g - gp_g) + cls_real_g
    total_d_l = -(adv_l - gp_l) + cls_real_l
    total_g = gen_adv_g + gen_adv_l + cls_fake + lambda_1 * (rec + local)
    if role == "student":
        total_g = total_g + lambda_2 * dis
    return LossBreakdown(
        adv_g=adv_g, adv_l=adv_l, gp_g=gp_g, gp_l=gp_l,
        cls_real_g=cls_real_g, cls_real_l=cls_real_l, cls_fake=cls_fake,
        gen_adv_g=gen_adv_g, gen_adv_l=gen_adv_l,
        local=local, rec=rec, dis=dis,
        total_D_g=total_d_g, total_D_l=total_d_l, total_G=total_g,
    )
