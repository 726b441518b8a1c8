"""Locality guidance: pick student/teacher layer pairs, align their features,
and measure how far the student's hidden tokens are from the teacher's maps.

The pipeline for one pair is

    tokens (B, L, C) --drop class token, reshape--> (B, H_t, W_t, C)
    both sides --bilinear resize to (max H, max W)--> aligned maps
    student side --transform (1x1 projection | attention map | similarity)--> compare
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .models.resnet import MapFeature
from .models.vit import TokenFeature


class TransformKind(str, enum.Enum):
    LINEAR = "linear"
    AT = "at"
    SP = "sp"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "TransformKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown transform kind {value!r}; expected one of {choices}") from None


# ------------------------------------------------------------ guidance positions


@dataclass(frozen=True)
class GuidancePlan:
    """One-to-one pairing of student blocks and teacher stages (both 1-based)."""

    pairs: tuple
    ratio: float
    student_depth: int
    teacher_stages: int

    @property
    def student_blocks(self) -> tuple:
        return tuple(i for i, _ in self.pairs)

    @property
    def teacher_indices(self) -> tuple:
        return tuple(j for _, j in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def _exact(value) -> Fraction:
    # Decimal-exact ratio so e.g. R=0.29 with N_T=100 floors as 28, not 27.
    return Fraction(str(value)) if isinstance(value, float) else Fraction(value)


def select_positions(student_depth: int, teacher_stages: int, ratio: float) -> GuidancePlan:
    """Pair every teacher stage k with student block
    ``floor((k - 1) * (R * N_T - 1) / (N_C - 1)) + 1``.

    >>> select_positions(12, 3, 1.0).student_blocks
    (1, 6, 12)
    """
    if teacher_stages < 2:
        raise ValueError(f"need at least 2 teacher stages to spread guidance, got {teacher_stages}")
    r = _exact(ratio)
    if not 0 < r <= 1:
        raise ValueError(f"ratio R must lie in (0, 1], got {ratio}")
    span = r * student_depth - 1
    if span < 0:
        raise ValueError(f"R * N_T must be >= 1, got {float(r * student_depth)}")
    pairs = []
    for k in range(1, teacher_stages + 1):
        i = math.floor((k - 1) * span / (teacher_stages - 1)) + 1
        if not 1 <= i <= student_depth:
            raise ValueError(f"student block {i} for stage {k} is outside 1..{student_depth}")
        pairs.append((i, k))
    blocks = [i for i, _ in pairs]
    if any(b <= a for a, b in zip(blocks, blocks[1:])):
        raise ValueError(
            f"R={ratio} squeezes {teacher_stages} stages into blocks {tuple(blocks)}; positions must strictly increase"
        )
    return GuidancePlan(tuple(pairs), float(ratio), student_depth, teacher_stages)


# ------------------------------------------------------------------- alignment


def tokens_to_map(feature: TokenFeature) -> Tensor:
    """(B, L, C) tokens -> (B, H_t, W_t, C), class token removed."""
    h, w = feature.grid
    if h * w == 0:
        raise ValueError(f"degenerate token grid {feature.grid}")
    tokens = feature.tokens
    if feature.has_class_token:
        tokens = tokens[:, 1:, :]
    b, n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} spatial tokens do not fill grid {feature.grid}")
    return ops.reshape(tokens, (b, h, w, c))


def align_spatial(token: TokenFeature, fmap: MapFeature):
    """Resize the student's reshaped tokens and the teacher map to a common grid.

    The common size is the elementwise maximum of the two grids. The teacher
    side is returned detached from any tape.
    """
    student = tokens_to_map(token)
    teacher = Tensor(fmap.map.data)
    if student.shape[0] != teacher.shape[0]:
        raise ValueError(f"batch sizes differ: student {student.shape}, teacher {teacher.shape}")
    h = max(student.shape[1], teacher.shape[1])
    w = max(student.shape[2], teacher.shape[2])
    return ops.bilinear_resize(student, h, w), ops.bilinear_resize(teacher, h, w)


# --------------------------------------------------------- channel transforms


@dataclass
class Projection:
    """Learnable point-wise map C -> C_j for one guidance pair."""

    weight: Tensor  # (1, 1, C, C_j)
    bias: Tensor  # (C_j,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[:2] != (1, 1):
            raise ValueError(f"projection kernel must be 1x1, got {self.weight.shape}")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


def init_projections(
    plan: GuidancePlan,
    student_dim: int,
    teacher_widths: Sequence[int],
    rng: np.random.Generator,
    identity: bool = False,
    dtype=np.float32,
) -> list:
    """One projection per pair.

    The default kernel is uniform in +-1/sqrt(C) with zero bias. ``identity``
    builds an identity-extended kernel instead (test use: it reduces the
    guidance to a plain distance between the aligned features).
    """
    projections = []
    for k, (_, j) in enumerate(plan.pairs):
        cj = teacher_widths[j - 1]
        if identity:
            w = np.eye(student_dim, cj, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(student_dim)
            w = rng.uniform(-bound, bound, size=(student_dim, cj)).astype(dtype)
        projections.append(
            Projection(
                Tensor(w.reshape(1, 1, student_dim, cj), requires_grad=True, name=f"proj.{k}.weight"),
                Tensor(np.zeros(cj, dtype=dtype), requires_grad=True, name=f"proj.{k}.bias"),
            )
        )
    return projections


def attention_map(x: Tensor) -> Tensor:
    """Channel-pooled spatial attention: sum_c x^2, flattened and L2-normalized per sample."""
    b = x.shape[0]
    energy = ops.sum(ops.square(x), axis=-1)
    return ops.l2_normalize(ops.reshape(energy, (b, -1)), axis=1)


def similarity_matrix(x: Tensor) -> Tensor:
    """Row-normalized (B, B) Gram matrix of the flattened per-sample features."""
    b = x.shape[0]
    flat = ops.reshape(x, (b, -1))
    gram = ops.matmul(flat, ops.transpose(flat, (1, 0)))
    return ops.l2_normalize(gram, axis=1)


@dataclass
class TransformedPair:
    student: Tensor
    teacher: Tensor
    kind: TransformKind
    spatial: tuple  # (H_hat, W_hat)


def transform_channels(kind, f_vt: Tensor, f_cnn: Tensor, proj: Optional[Projection] = None) -> TransformedPair:
    kind = TransformKind.parse(kind)
    spatial = tuple(f_vt.shape[1:3])
    teacher = Tensor(f_cnn.data)
    if kind is TransformKind.LINEAR:
        if proj is None:
            raise ValueError("linear transform needs a projection")
        return TransformedPair(proj(f_vt), teacher, kind, spatial)
    if kind is TransformKind.AT:
        return TransformedPair(attention_map(f_vt), attention_map(teacher), kind, spatial)
    if kind is TransformKind.SP:
        return TransformedPair(similarity_matrix(f_vt), similarity_matrix(teacher), kind, spatial)
    raise ValueError(f"transform kind {kind.value!r} has nothing to compare (guidance disabled)")


# ---------------------------------------------------------------------- losses


def pair_loss(pair: TransformedPair) -> Tensor:
    if pair.student.shape != pair.teacher.shape:
        raise ValueError(f"guidance pair shapes differ: {pair.student.shape} vs {pair.teacher.shape}")
    diff = ops.sub(pair.student, pair.teacher)
    b = pair.student.shape[0]
    sq = ops.frobenius_sq(diff)
    if pair.kind is TransformKind.LINEAR:
        h, w = pair.spatial
        return ops.scale(sq, 1.0 / (h * w * b))
    if pair.kind is TransformKind.AT:
        return ops.scale(sq, 1.0 / diff.size)
    return ops.scale(sq, 1.0 / (b * b))


def guidance_loss(plan: GuidancePlan, pairs: Sequence[TransformedPair]):
    """Per-pair losses and their sum.

    Linear pairs use ``||F_vt - F_cnn||_F^2 / (H_hat * W_hat)`` averaged over
    the batch; AT pairs the mean squared difference of attention maps; SP pairs
    ``||G_s - G_t||_F^2 / B^2``.
    """
    if len(pairs) != len(plan):
        raise ValueError(f"plan has {len(plan)} pairs but {len(pairs)} transformed features were given")
    per_pair = [pair_loss(p) for p in pairs]
    total = per_pair[0]
    for term in per_pair[1:]:
        total = ops.add(total, term)
    return per_pair, total


@dataclass
class LossBreakdown:
    l_cls: float
    l_guidance: float
    beta: float
    total: float
    l_guidance_per_pair: list = field(default_factory=list)
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l_cls, l_guidance, beta: float, per_pair: Sequence = ()) -> LossBreakdown:
    """Combine the classification and guidance losses as ``l_cls + beta * l_guidance``.

    Tensor inputs also produce the differentiable ``objective``; the guidance
    term stays on the tape even at ``beta == 0`` so the update is the
    supervised one exactly (its gradient contribution is identically zero).
    """
    beta = float(beta)
    if beta < 0 or not math.isfinite(beta):
        raise ValueError(f"beta must be a finite non-negative number, got {beta}")
    objective = None
    if isinstance(l_cls, Tensor):
        objective = l_cls if l_guidance is None else ops.add(l_cls, ops.scale(l_guidance, beta))
    cls_v = _value(l_cls)
    guid_v = 0.0 if l_guidance is None else _value(l_guidance)
    return LossBreakdown(
        l_cls=cls_v,
        l_guidance=guid_v,
        beta=beta,
        total=cls_v + beta * guid_v,
        l_guidance_per_pair=[_value(p) for p in per_pair],
        objective=objective,
    )


class LocalityGuidance:
    """Bundles a plan, a transform kind and (for Linear) the projections."""

    def __init__(self, plan: GuidancePlan, kind, projections: Optional[list] = None):
        self.plan = plan
        self.kind = TransformKind.parse(kind)
        if self.kind is TransformKind.NONE:
            raise ValueError("LocalityGuidance with kind 'none' has nothing to do")
        if self.kind is TransformKind.LINEAR and (projections is None or len(projections) != len(plan)):
            raise ValueError("linear guidance needs one projection per pair")
        self.projections = projections or []

    def parameters(self) -> list:
        out = []
        for p in self.projections:
            out.extend([p.weight, p.bias])
        return out

    def __call__(self, student_taps: Sequence[TokenFeature], teacher_taps: Sequence[MapFeature]):
        pairs = []
        for k, (i, j) in enumerate(self.plan.pairs):
            f_vt, f_cnn = align_spatial(student_taps[i - 1], teacher_taps[j - 1])
            proj = self.projections[k] if self.kind is TransformKind.LINEAR else None
            pairs.append(transform_channels(self.kind, f_vt, f_cnn, proj))
        return guidance_loss(self.plan, pairs)
