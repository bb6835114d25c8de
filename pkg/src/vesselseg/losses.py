"""Supervised and consistency losses.

All functions take torch tensors so gradients flow when called inside a
training step. Predictions are softmax probabilities shaped (B, 2, D, H, W)
or a single (2, D, H, W); targets are (B, D, H, W) or (D, H, W) binary masks.
Per-sample losses are voxel means, then averaged over the batch.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np
import torch

CE_EPS = 1e-7
NORM_EPS = 1e-12


class CosineForm(str, enum.Enum):
    EXP_NEGATIVE_COS = "exp_negative_cos"  # exp(-cos), in [1/e, e]; minimizing raises similarity
    PAPER_EXACT_EXP_COS = "paper_exact_exp_cos"  # exp(+cos), literal form; minimizing lowers similarity
    NEGATIVE_COS = "negative_cos"  # 1 - cos, in [0, 2]


class MaskConvention(str, enum.Enum):
    UNSHIFTED = "unshifted"  # ones around index dim/2: highest frequencies (high-pass)
    SHIFTED = "shifted"  # ones around DC: low-pass


@dataclass(frozen=True)
class LossConfig:
    sup_weight: float = 4.0
    semi_weight: float = 1.0
    dice_epsilon: float = 1e-5
    boundary_mask_fraction: float = 0.5
    cosine_form: CosineForm = CosineForm.EXP_NEGATIVE_COS
    mask_convention: MaskConvention = MaskConvention.UNSHIFTED
    use_boundary: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cosine_form", CosineForm(self.cosine_form))
        object.__setattr__(self, "mask_convention", MaskConvention(self.mask_convention))
        if self.sup_weight < 0 or self.semi_weight < 0 or self.sup_weight + self.semi_weight == 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        if not 0 < self.boundary_mask_fraction < 1:
            raise ValueError("boundary_mask_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["cosine_form"] = self.cosine_form.value
        d["mask_convention"] = self.mask_convention.value
        return d


def _batched(pred: torch.Tensor, target: torch.Tensor | None = None):
    if pred.ndim == 4:
        pred = pred.unsqueeze(0)
        if target is not None:
            target = target.unsqueeze(0)
    if pred.ndim != 5 or pred.shape[1] != 2:
        raise ValueError(f"prediction must be (B, 2, D, H, W), got {tuple(pred.shape)}")
    if target is not None:
        if tuple(target.shape) != (pred.shape[0], *pred.shape[2:]):
            raise ValueError(f"target shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
        target = target.to(pred.dtype)
    return pred, target


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pred, target = _batched(pred, target)
    p = pred.clamp(CE_EPS, 1.0 - CE_EPS)
    nll = -(target * torch.log(p[:, 1]) + (1.0 - target) * torch.log(p[:, 0]))
    return nll.flatten(1).mean(1).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice on the vessel channel: 1 - (2 sum(p y) + eps) / (sum p + sum y + eps)."""
    pred, target = _batched(pred, target)
    p = pred[:, 1].flatten(1)
    y = target.flatten(1)
    dice = (2.0 * (p * y).sum(1) + eps) / (p.sum(1) + y.sum(1) + eps)
    return (1.0 - dice).mean()


def _axis_indicator(n: int, rho: float, convention: MaskConvention) -> np.ndarray:
    freq = np.minimum(np.arange(n), n - np.arange(n))  # |frequency| of each unshifted index
    if convention == MaskConvention.UNSHIFTED:
        return freq > (1.0 - rho) * n / 2.0
    return freq < rho * n / 2.0


def make_spectral_mask(shape, rho: float = 0.5, convention=MaskConvention.UNSHIFTED) -> np.ndarray:
    """Binary spectral mask, separable box in |frequency| per axis.

    The unshifted convention keeps, per axis, the indices whose frequency
    magnitude exceeds ``(1 - rho) * n / 2``: a box of roughly ``rho * n``
    indices centred on n/2 that never contains DC. Membership depends only on
    |frequency|, so the mask is invariant under i -> (n - i) mod n and the
    filtered signal stays real.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    convention = MaskConvention(convention)
    a, b, c = (_axis_indicator(n, rho, convention) for n in shape)
    out = a[:, None, None] & b[None, :, None] & c[None, None, :]
    return out.astype(np.uint8)


def high_frequency_component(x, mask) -> torch.Tensor:
    """Real part of ifftn(fftn(x) * mask) over the last three axes."""
    x_t = torch.as_tensor(x)
    m = torch.as_tensor(mask, dtype=x_t.dtype if x_t.is_floating_point() else torch.float64)
    if tuple(x_t.shape[-3:]) != tuple(m.shape):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match input {tuple(x_t.shape)}")
    spec = torch.fft.fftn(x_t, dim=(-3, -2, -1))
    return torch.fft.ifftn(spec * m, dim=(-3, -2, -1)).real


def fourier_boundary_loss(pred: torch.Tensor, target: torch.Tensor, mask) -> torch.Tensor:
    pred, target = _batched(pred, target)
    diff = high_frequency_component(pred[:, 1], mask) - high_frequency_component(target, mask)
    return (diff ** 2).flatten(1).mean(1).mean()


def consistency_mse(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over voxels and both channels (per patch, then batch mean)."""
    teacher, _ = _batched(teacher)
    student, _ = _batched(student)
    if teacher.shape != student.shape:
        raise ValueError("prediction shapes differ")
    return ((teacher - student) ** 2).flatten(1).mean(1).mean()


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-patch cosine of flattened predictions, norms guarded by 1e-12."""
    u, _ = _batched(u)
    v, _ = _batched(v)
    if u.shape != v.shape:
        raise ValueError("prediction shapes differ")
    u, v = u.flatten(1), v.flatten(1)
    return (u * v).sum(1) / ((u.norm(dim=1) + NORM_EPS) * (v.norm(dim=1) + NORM_EPS))


def consistency_cosine_loss(teacher: torch.Tensor, student: torch.Tensor,
                            form=CosineForm.EXP_NEGATIVE_COS) -> torch.Tensor:
    cos = cosine_similarity(teacher, student)
    form = CosineForm(form)
    if form == CosineForm.EXP_NEGATIVE_COS:
        h = torch.exp(-cos)
    elif form == CosineForm.PAPER_EXACT_EXP_COS:
        h = torch.exp(cos)
    else:
        h = 1.0 - cos
    return h.mean()


@dataclass
class SupervisedTerms:
    ce: torch.Tensor
    dice: torch.Tensor
    boundary: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.ce + self.dice + self.boundary

    def as_floats(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "dice": self.dice.item(), "boundary": self.boundary.item()}


def total_supervised_loss(pred, target, mask, cfg: LossConfig = LossConfig()) -> SupervisedTerms:
    """CE + Dice + boundary; the boundary term is zero when ``cfg.use_boundary`` is off."""
    ce = cross_entropy_loss(pred, target)
    dice = dice_loss(pred, target, cfg.dice_epsilon)
    if cfg.use_boundary:
        boundary = fourier_boundary_loss(pred, target, mask)
    else:
        boundary = torch.zeros((), dtype=ce.dtype)
    return SupervisedTerms(ce, dice, boundary)


@dataclass
class SemiTerms:
    mse: torch.Tensor
    sim: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.mse + self.sim

    def as_floats(self) -> dict[str, float]:
        return {"mse": self.mse.item(), "sim": self.sim.item()}


def semi_supervised_loss(teacher_l, student_l, teacher_u=None, student_u=None,
                         form=CosineForm.EXP_NEGATIVE_COS) -> SemiTerms:
    """MSE + cosine consistency, summed over the labeled pair and (if given) the unlabeled pair."""
    mse = consistency_mse(teacher_l, student_l)
    sim = consistency_cosine_loss(teacher_l, student_l, form)
    if teacher_u is not None:
        mse = mse + consistency_mse(student_u, teacher_u)
        sim = sim + consistency_cosine_loss(student_u, teacher_u, form)
    return SemiTerms(mse, sim)


def total_loss(sup, semi, cfg: LossConfig = LossConfig()):
    """Weighted mean (sup_weight * sup + semi_weight * semi) / (sup_weight + semi_weight)."""
    return (cfg.sup_weight * sup + cfg.semi_weight * semi) / (cfg.sup_weight + cfg.semi_weight)
