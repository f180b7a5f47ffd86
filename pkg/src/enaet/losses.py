"""Loss terms: MixMatch SSL loss, AET regression, KL consistency, and their weighting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-8

DEFAULT_WARM = (10.0, 7.5, 5.0, 2.0, 0.5)
DEFAULT_MAX = (1.0, 0.75, 0.5, 0.2, 0.05)


@dataclass
class LambdaSchedule:
    """Per-family AET weights ramped linearly over ``warm`` epochs up to ``max``."""

    warm: Sequence[float] = DEFAULT_WARM
    max: Sequence[float] = DEFAULT_MAX
    kl_lambda: float = 1.0

    def __post_init__(self):
        self.warm = tuple(float(w) for w in self.warm)
        self.max = tuple(float(m) for m in self.max)
        if len(self.warm) != len(self.max):
            raise ValueError(f"warm has {len(self.warm)} entries but max has {len(self.max)}")
        if min(self.warm + self.max + (self.kl_lambda,), default=0.0) < 0:
            raise ValueError("lambda schedule entries must be nonnegative")


def lambda_at(schedule: LambdaSchedule, epoch: float) -> list[float]:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return [m if w == 0 else m * min(epoch / w, 1.0) for w, m in zip(schedule.warm, schedule.max)]


def linear_rampup(epoch: float, length: float) -> float:
    return 1.0 if length <= 0 else min(max(epoch / length, 0.0), 1.0)


@dataclass
class LossTerms:
    l_x: float = 0.0
    l_u: float = 0.0
    l_mix: float = 0.0
    l_kl: float = 0.0
    l_aet: list = field(default_factory=list)
    l_total: float = 0.0
    lambdas: list = field(default_factory=list)
    kl_lambda: float = 0.0

    def combined(self) -> float:
        """Recompute the total from the stored components."""
        return self.l_mix + self.kl_lambda * self.l_kl + sum(l * a for l, a in zip(self.lambdas, self.l_aet))

    def as_row(self, names: Sequence[str]) -> dict:
        row = {"l_total": self.l_total, "l_mix": self.l_mix, "l_x": self.l_x, "l_u": self.l_u, "l_kl": self.l_kl}
        for name, value in zip(names, self.l_aet):
            row[f"l_aet_{name}"] = value
        return row


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over rows of H(targets, softmax(logits))."""
    return -(targets * F.log_softmax(logits, dim=1)).sum(1).mean()


def aet_loss(predicted: torch.Tensor, target) -> torch.Tensor:
    """Squared error between regressed and true normalized parameters.

    Averaged over the batch and over parameter coordinates, so families with
    different parameter counts produce comparable magnitudes. ``target`` is a
    tensor or a list of ``TransformSpec``.
    """
    if isinstance(target, (list, tuple)):
        target = np.stack([s.params for s in target])
    target = torch.as_tensor(target, dtype=predicted.dtype, device=predicted.device)
    if predicted.shape != target.shape:
        raise ValueError(f"predicted shape {tuple(predicted.shape)} != target shape {tuple(target.shape)}")
    return ((predicted - target) ** 2).mean()


def _probs(p) -> torch.Tensor:
    return p.probs if hasattr(p, "probs") else p


def kl_consistency_loss(p_orig, p_trans) -> torch.Tensor:
    """Mean KL(P(y|x) || P_t(y|x)) over samples and transformations.

    ``p_orig`` is a fixed target (detached). Probabilities are floored at
    ``PROB_FLOOR`` inside the logs only.
    """
    p = _probs(p_orig).detach()
    p_trans = [_probs(q) for q in p_trans]
    if not p_trans:
        return p.new_zeros(())
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    total = p.new_zeros(())
    for q in p_trans:
        if q.shape != p.shape:
            raise ValueError(f"class-probability shape {tuple(q.shape)} != {tuple(p.shape)}")
        total = total + (p * (log_p - torch.log(q.clamp_min(PROB_FLOOR)))).sum(1).mean()
    return total / len(p_trans)


def sharpen(p: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    # Work in log space so small temperatures do not underflow.
    return F.softmax(torch.log(p.clamp_min(1e-30)) / temperature, dim=1)


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(labels.long(), num_classes).to(dtype)


def mix_coefficients(n: int, a_mix: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample MixUp weights max(l, 1 - l) with l ~ Beta(a_mix, a_mix).

    ``a_mix <= 0`` disables mixing (all weights 1).
    """
    if a_mix <= 0:
        return np.ones(n)
    lam = rng.beta(a_mix, a_mix, size=n)
    return np.maximum(lam, 1.0 - lam)


@dataclass
class MixMatchBatch:
    x_mixed: torch.Tensor        # X': mixed labeled inputs
    x_targets: torch.Tensor      # mixed label rows for X'
    u_mixed: torch.Tensor        # U': mixed unlabeled inputs (K_aug * n_u rows)
    u_targets: torch.Tensor      # mixed guessed rows for U'
    guessed: torch.Tensor        # q, one row per unlabeled sample
    coefficients: np.ndarray     # lambda' per row of [X'; U']
    partners: np.ndarray         # index into [X_hat; U_hat] of each row's mixing partner
    u_views: list                # the K_aug augmented unlabeled batches, unmixed
    x_augmented: torch.Tensor = None


def mixmatch_build(
    x_l: torch.Tensor,
    y_l: torch.Tensor,
    x_u: torch.Tensor,
    guess: Callable[[torch.Tensor], torch.Tensor],
    temperature: float,
    k_aug: int,
    a_mix: float,
    rng: np.random.Generator,
    augment: Callable | None = None,
    num_classes: int | None = None,
    labeled_rng: np.random.Generator | None = None,
) -> MixMatchBatch:
    """Label guessing, sharpening and MixUp over labeled + unlabeled pools.

    ``y_l`` holds class indices or probability rows; ``guess`` maps images to
    logits (typically the teacher in eval mode). ``augment(images, rng)`` is
    the stochastic augmentation; ``None`` means identity. The labeled batch is
    augmented with ``labeled_rng`` when given, so its randomness can be kept
    independent from the unlabeled side.
    """
    if len(x_l) == 0 or len(x_u) == 0:
        raise ValueError("mixmatch_build needs nonempty labeled and unlabeled batches")
    if k_aug < 1:
        raise ValueError(f"k_aug must be >= 1, got {k_aug}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    augment = augment or (lambda images, _rng: images)
    labeled_rng = labeled_rng if labeled_rng is not None else rng

    if y_l.ndim == 1:
        if num_classes is None:
            raise ValueError("num_classes is required when labels are indices")
        y_l = one_hot(y_l, num_classes, x_l.dtype)

    x_hat = augment(x_l, labeled_rng)
    u_views = [augment(x_u, rng) for _ in range(k_aug)]
    with torch.no_grad():
        p = torch.stack([F.softmax(guess(u), dim=1) for u in u_views]).mean(0)
        q = sharpen(p, temperature).to(y_l.dtype)

    inputs = torch.cat([x_hat, *u_views])
    targets = torch.cat([y_l, *([q] * k_aug)])
    n_l = len(x_hat)
    partners = rng.permutation(len(inputs))
    lam = mix_coefficients(len(inputs), a_mix, rng)
    lam_t = torch.as_tensor(lam, dtype=inputs.dtype, device=inputs.device)
    mixed = lam_t.view(-1, 1, 1, 1) * inputs + (1 - lam_t.view(-1, 1, 1, 1)) * inputs[partners]
    mixed_t = lam_t.view(-1, 1) * targets + (1 - lam_t.view(-1, 1)) * targets[partners]
    return MixMatchBatch(
        x_mixed=mixed[:n_l], x_targets=mixed_t[:n_l],
        u_mixed=mixed[n_l:], u_targets=mixed_t[n_l:],
        guessed=q, coefficients=lam, partners=partners, u_views=u_views, x_augmented=x_hat,
    )


def mixmatch_loss(mixed: MixMatchBatch, logits_x: torch.Tensor, logits_u: torch.Tensor | None, lambda_u: float):
    """(l_x, l_u, l_mix): cross-entropy on X', squared L2 on U', weighted sum."""
    if logits_x.shape != mixed.x_targets.shape:
        raise ValueError(f"labeled logits {tuple(logits_x.shape)} misaligned with targets {tuple(mixed.x_targets.shape)}")
    l_x = soft_cross_entropy(logits_x, mixed.x_targets)
    if logits_u is None:
        l_u = l_x.new_zeros(())
    else:
        if logits_u.shape != mixed.u_targets.shape:
            raise ValueError(f"unlabeled logits {tuple(logits_u.shape)} misaligned with targets {tuple(mixed.u_targets.shape)}")
        l_u = ((F.softmax(logits_u, dim=1) - mixed.u_targets) ** 2).sum(1).mean()
    return l_x, l_u, l_x + lambda_u * l_u


def total_loss(terms: LossTerms, schedule: LambdaSchedule, epoch: float) -> float:
    lambdas = lambda_at(schedule, epoch)
    return terms.l_mix + schedule.kl_lambda * terms.l_kl + sum(l * a for l, a in zip(lambdas, terms.l_aet))


def weighted_total(l_mix, l_kl, l_aet, lambdas, kl_lambda):
    """Tensor form of the total used for backpropagation; zero weights drop their term."""
    total = l_mix
    if kl_lambda:
        total = total + kl_lambda * l_kl
    for lam, l in zip(lambdas, l_aet):
        if lam:
            total = total + lam * l
    return total
