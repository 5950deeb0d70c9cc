"""Training objectives as pure, differentiable torch functions.

Every function accepts single samples or batches (extra leading dims) and
reduces batch dims by the mean, so loss weights are independent of batch
size and sequence length. Epsilon 1e-8 guards logs and cosine denominators.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPSILON = 1e-8


class NonFiniteLossError(ArithmeticError):
    """A loss term went NaN/inf; carries the offending term's name."""

    def __init__(self, term: str, value: float | None = None):
        self.term = term
        suffix = "" if value is None else f" (value {value})"
        super().__init__(f"non-finite loss term '{term}'{suffix}")


@dataclass(frozen=True)
class StageOneWeights:
    lambda_dis: float = 0.2
    lambda_str: float = 1.0

    def __post_init__(self):
        if self.lambda_dis < 0 or self.lambda_str < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class StageTwoWeights:
    lambda_c: float = 0.0002

    def __post_init__(self):
        if self.lambda_c < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class StrengthMargins:
    delta1: float = 0.5
    delta2: float = 0.5

    def __post_init__(self):
        if not (0 <= self.delta1 <= 1 and 0 <= self.delta2 <= 1):
            raise ValueError("strength margins must lie in [0, 1]")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def classification_loss(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Cross-entropy -sum_k p_k log q_k, batch-averaged.

    q: predicted class distribution(s), p: one-hot target(s); q is clamped
    at epsilon inside the log.
    """
    _check_same_shape(q, p, "classification_loss")
    ce = -(p * torch.log(q.clamp_min(EPSILON))).sum(dim=-1)
    return ce.mean()


def strength_triplet_loss(
    s_x: torch.Tensor,
    s_pos: torch.Tensor,
    s_neg: torch.Tensor,
    margins: StrengthMargins = StrengthMargins(),
    form: str = "printed",
) -> torch.Tensor:
    """Relative strength ranking over an (emotional, same-emotion, neutral)
    triplet: max(|s_x - s_pos|, d1) + max(1 - (s_x - s_neg), d2).

    The default "printed" form floors each term at its margin (minimum value
    d1 + d2, zero gradient below margin); "hinge" subtracts the margin and
    clamps at zero instead.
    """
    s_x, s_pos, s_neg = torch.broadcast_tensors(
        torch.as_tensor(s_x), torch.as_tensor(s_pos), torch.as_tensor(s_neg)
    )
    pos_gap = torch.abs(s_x - s_pos)
    neg_gap = 1.0 - (s_x - s_neg)
    if form == "printed":
        loss = torch.clamp(pos_gap, min=margins.delta1) + torch.clamp(
            neg_gap, min=margins.delta2
        )
    elif form == "hinge":
        loss = torch.relu(pos_gap - margins.delta1) + torch.relu(neg_gap - margins.delta2)
    else:
        raise ValueError(f"unknown strength loss form {form!r}")
    return loss.mean()


def frame_similarity(e: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Frame-wise absolute cosine similarity |e_t . c_t| / (|e_t||c_t| + eps).

    e, c: (..., T, D) with matching frame counts; returns (..., T) in [0, 1].
    """
    if e.shape[-2] != c.shape[-2]:
        raise ValueError(
            f"frame_similarity: {e.shape[-2]} vs {c.shape[-2]} frames"
        )
    dot = (e * c).sum(dim=-1)
    denom = e.norm(dim=-1) * c.norm(dim=-1) + EPSILON
    return torch.abs(dot) / denom


def disentanglement_loss(cue: torch.Tensor, similarity: torch.Tensor) -> torch.Tensor:
    """Cue-weighted mean frame similarity: (1/T) sum_t M_t S_t."""
    _check_same_shape(cue, similarity, "disentanglement_loss")
    return (cue * similarity).mean()


def reconstruction_loss(out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all entries."""
    _check_same_shape(out, target, "reconstruction_loss")
    return torch.abs(out - target).mean()


def content_consistency_loss(c_z: torch.Tensor, c_x: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between converted and source content features."""
    _check_same_shape(c_z, c_x, "content_consistency_loss")
    return torch.abs(c_z - c_x).mean()


def category_consistency_loss(q_y: torch.Tensor, q_z: torch.Tensor) -> torch.Tensor:
    """KL(reference distribution || converted distribution), batch-averaged.

    Both arguments are clamped at epsilon inside the logs only, so zero
    reference entries contribute nothing.
    """
    _check_same_shape(q_y, q_z, "category_consistency_loss")
    kl = (
        q_y * (torch.log(q_y.clamp_min(EPSILON)) - torch.log(q_z.clamp_min(EPSILON)))
    ).sum(dim=-1)
    return kl.mean()


def strength_consistency_loss(s_z: torch.Tensor, s_y: torch.Tensor) -> torch.Tensor:
    """Squared strength gap (s_z - s_y)^2, batch-averaged."""
    s_z = torch.as_tensor(s_z)
    s_y = torch.as_tensor(s_y)
    _check_same_shape(s_z, s_y, "strength_consistency_loss")
    return ((s_z - s_y) ** 2).mean()


def _require_finite(**terms) -> None:
    for name, value in terms.items():
        t = torch.as_tensor(value).detach()
        if not torch.isfinite(t).all():
            raise NonFiniteLossError(name, float(t.reshape(-1)[0]))


def stage_one_total(
    rec: torch.Tensor,
    cls: torch.Tensor,
    dis: torch.Tensor,
    strength: torch.Tensor,
    weights: StageOneWeights = StageOneWeights(),
) -> torch.Tensor:
    """rec + cls + lambda_dis * dis + lambda_str * strength."""
    _require_finite(rec=rec, cls=cls, dis=dis, str=strength)
    return rec + cls + weights.lambda_dis * dis + weights.lambda_str * strength


def stage_two_total(
    rec: torch.Tensor,
    cc: torch.Tensor,
    ecc: torch.Tensor,
    esc: torch.Tensor,
    weights: StageTwoWeights = StageTwoWeights(),
) -> torch.Tensor:
    """rec + lambda_c * (cc + ecc + esc)."""
    _require_finite(rec=rec, cc=cc, ecc=ecc, esc=esc)
    return rec + weights.lambda_c * (cc + ecc + esc)
