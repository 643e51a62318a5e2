"""Identity, language and adversarial objectives and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, l2_normalize, matmul, max_over, note_branch, reshape, scale, softmax_cross_entropy

COS_CLAMP = 1e-7


class TrainingAbort(RuntimeError):
    """A loss term became non-finite or diverged."""


class SubcenterArcMarginParams:
    """Class weights ``(S, K, d)`` plus margin ``m`` (radians) and scale ``s``."""

    def __init__(self, class_weights, margin: float = 0.2, scale: float = 32.0):
        w = class_weights if isinstance(class_weights, Tensor) else Tensor(class_weights, requires_grad=True)
        if w.ndim != 3:
            raise ValueError(f"class weights must be (S, K, d), got {w.shape}")
        if margin < 0:
            raise ValueError("margin must be non-negative")
        if scale <= 0:
            raise ValueError("scale must be positive")
        w.name = w.name or "arcmargin.weight"
        self.class_weights = w
        self.margin = float(margin)
        self.scale = float(scale)

    @classmethod
    def init(cls, n_classes: int, K: int, d: int, rng: np.random.Generator, margin: float = 0.2, scale: float = 32.0):
        if K < 1:
            raise ValueError("need at least one sub-center per class")
        w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_classes, K, d)), requires_grad=True, name="arcmargin.weight")
        return cls(w, margin, scale)

    @property
    def n_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def K(self) -> int:
        return self.class_weights.shape[1]

    @property
    def dim(self) -> int:
        return self.class_weights.shape[2]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        for key in ("lambda1", "lambda2"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{key} must be finite and non-negative, got {v}")


def subcenter_cosines(e: Tensor, p: SubcenterArcMarginParams) -> Tensor:
    """Per-class cosine: max over the K sub-centers of cos(e, w_ck). Shape (n, S)."""
    if e.ndim != 2 or e.shape[1] != p.dim:
        raise ValueError(f"embedding width {e.shape} does not match class weights {p.class_weights.shape}")
    S, K, d = p.class_weights.shape
    e_n = l2_normalize(e)
    w_n = l2_normalize(reshape(p.class_weights, (S * K, d)))
    cos = matmul(e_n, w_n.T)
    return max_over(reshape(cos, (e.shape[0], S, K)), axis=2)


def margin_logits(cos: Tensor, labels: np.ndarray, margin: float, s: float) -> Tensor:
    """Scale cosines by ``s`` and replace each target entry with ``s*cos(theta+m)``.

    When ``theta + m`` would pass pi the target falls back to
    ``s*(cos(theta) - m*sin(theta))``.
    """
    n = cos.shape[0]
    rows = np.arange(n)
    c = np.clip(cos.data[rows, labels], -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    sin = np.sqrt(np.clip(1.0 - c * c, 0.0, 1.0))
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    # theta + m <= pi  <=>  cos(theta) >= cos(pi - m)
    regular = c >= math.cos(math.pi - margin)
    note_branch(regular)
    note_branch(np.abs(cos.data[rows, labels]) < 1.0 - COS_CLAMP)
    target = np.where(regular, c * cos_m - sin * sin_m, c - margin * sin)
    # d sin / d c = -c / sin
    dsin = -c / sin
    dtarget = np.where(regular, cos_m - sin_m * dsin, 1.0 - margin * dsin)
    inside = np.abs(cos.data[rows, labels]) < 1.0 - COS_CLAMP
    dtarget = np.where(inside, dtarget, 0.0)

    out = cos.data * s
    out[rows, labels] = s * target

    def bw(g):
        gc = g * s
        gc[rows, labels] = g[rows, labels] * s * dtarget
        return (gc,)

    return Tensor.from_op(out, (cos,), bw, "arc_margin")


def subcenter_arcmargin(e_spk: Tensor, labels, p: SubcenterArcMarginParams) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= p.n_classes):
        raise IndexError(f"speaker label out of range for {p.n_classes} classes")
    cos = subcenter_cosines(e_spk, p)
    return softmax_cross_entropy(margin_logits(cos, labels, p.margin, p.scale), labels)


def language_loss(logits_anchor: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(logits_anchor, labels)


def adversarial_loss(logits_adv: Tensor, labels) -> Tensor:
    # Same cross-entropy as the anchor loss; the reversal lives in the GRL upstream.
    return softmax_cross_entropy(logits_adv, labels)


def total_loss(l_id: Tensor, l_lang: Tensor, l_adv: Tensor, w: LossWeights) -> Tensor:
    for name, term in (("L_id", l_id), ("L_lang", l_lang), ("L_adv", l_adv)):
        if not math.isfinite(term.item()):
            raise TrainingAbort(f"{name} is not finite ({term.item()})")
    return add(add(l_id, scale(l_lang, w.lambda1)), scale(l_adv, w.lambda2))
