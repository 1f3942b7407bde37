"""Image-level logistic loss, MIL loss, weak segmentation loss and their sums."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

if TYPE_CHECKING:
    from .cam import PseudoSegGT


@dataclass(frozen=True)
class LossWeights:
    lambda_gap: float = 1.0
    lambda_seg: float = 1.0
    lambda_mil: float = 1.0

    def __post_init__(self) -> None:
        if min(self.lambda_gap, self.lambda_seg, self.lambda_mil) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def one_hot(class_index: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[class_index] = 1.0
    return y


def gap_loss(logits: Tensor, labels) -> Tensor:
    """Sum of C binary logistic losses per image, averaged over the batch.

    Uses -y log s(z) - (1-y) log(1-s(z)) = softplus(z) - y z.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    per_entry = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    return ad.scale(ad.sum_axis(per_entry), 1.0 / logits.shape[0])


def mil_score(bag: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-class max over the boxes of a [C, n] score matrix, plus the argmax box per class."""
    if bag.ndim != 2 or bag.shape[1] < 1:
        raise ad.ShapeError("mil_score", "[C, n] with n >= 1", bag.shape)
    return ad.max_axis(bag, axis=1), np.argmax(bag.data, axis=1)


def mil_loss(bag: Tensor, labels) -> Tensor:
    """Cross-entropy of the softmax over per-class max box scores against a one-hot label."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (bag.shape[0],) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"mil_loss: labels must be one-hot over {bag.shape[0]} classes, got {y}")
    scores, _ = mil_score(bag)
    return ad.neg(ad.sum_axis(ad.mul(ad.log_softmax_axis(scores, axis=0), y)))


def pixel_softmax(scores: Tensor) -> Tensor:
    """Softmax over the class axis of a [K, h, w] score map."""
    if scores.ndim != 3:
        raise ad.ShapeError("pixel_softmax", "[K, h, w]", scores.shape)
    return ad.softmax_axis(scores, axis=0)


def weak_seg_loss(S: Tensor, labels, pseudo: "PseudoSegGT") -> Tensor:
    """Peak-pixel image-level term plus alpha-weighted pseudo-label term.

    ``S`` is a [C+1, h, w] pixel softmax (last channel background). For each
    present class c the first term takes -log S at the pixel where channel c
    peaks; the second is -sum alpha_i log S[G_i, i] over the labeled pixels,
    with ``G`` holding 1-based class ids (C+1 = background).
    """
    y = np.asarray(labels, dtype=np.float64)
    k, h, w = S.shape
    if k != y.shape[0] + 1:
        raise ad.ShapeError("weak_seg_loss", f"{y.shape[0] + 1} channels", S.shape)
    G = np.asarray(pseudo.G)
    alpha = np.asarray(pseudo.alpha, dtype=np.float64)
    if G.shape != (h, w) or alpha.shape != (h, w):
        raise ad.ShapeError("weak_seg_loss", f"G and alpha of shape {(h, w)}", (G.shape, alpha.shape))
    if G.size and (G.min() < 1 or G.max() > k):
        raise ValueError(f"weak_seg_loss: G values must lie in [1, {k}], got [{G.min()}, {G.max()}]")
    if (alpha < 0).any():
        raise ValueError("weak_seg_loss: alpha must be nonnegative")

    hw = h * w
    flat = S.data.reshape(k, hw)
    present = np.flatnonzero(y > 0)
    peak_idx = present * hw + np.argmax(flat[present], axis=1)
    pix = np.asarray(sorted(pseudo.I_s), dtype=np.intp)
    g = G.reshape(-1)[pix].astype(np.intp) - 1
    seg_idx = g * hw + pix
    idx = np.concatenate([peak_idx, seg_idx]).astype(np.intp)
    weights = np.concatenate([np.ones(len(peak_idx)), alpha.reshape(-1)[pix]])
    if idx.size == 0:
        return ad.scale(ad.sum_axis(S), 0.0)
    picked = ad.log(ad.take(S, idx))
    return ad.neg(ad.sum_axis(ad.mul(picked, weights)))


def total_loss(parts: Mapping[str, Tensor | None], w: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of the present parts among ``gap``, ``mil`` and ``seg``."""
    weight = {"gap": w.lambda_gap, "mil": w.lambda_mil, "seg": w.lambda_seg}
    unknown = set(parts) - set(weight)
    if unknown:
        raise KeyError(f"unknown loss parts: {sorted(unknown)}")
    terms = []
    for name in ("gap", "mil", "seg"):
        t = parts.get(name)
        if t is None:
            continue
        if t.data.size != 1:
            raise ad.ShapeError("total_loss", f"scalar {name} loss", t.shape)
        terms.append(ad.scale(t, weight[name]))
    if not terms:
        raise ValueError("total_loss: no loss parts given")
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
