"""Correspondence guidance: additive attention masks, the weighted-BCE attention
objective and its gradient with respect to the noise latent."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .domain import (
    NEG_INF,
    AttentionKind,
    AttentionMap,
    AttentionMask,
    CorrespondenceField,
    GridShape,
    GuidanceConfig,
    LatentTensor,
    Status,
)

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


class GradientError(ArithmeticError):
    """Non-finite gradient; ``layer`` names the offending attention layer."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class ObjectiveReport:
    per_layer_loss: tuple[float, ...]
    total_loss: float
    grad_norm: float

    def to_dict(self) -> dict:
        return {
            "per_layer_loss": list(self.per_layer_loss),
            "total_loss": self.total_loss,
            "grad_norm": self.grad_norm,
        }


def _chebyshev(shape: GridShape, coords: np.ndarray) -> np.ndarray:
    """(len(coords), h*w) Chebyshev distance from each coordinate to every half-grid token."""
    ri, rj = np.divmod(np.arange(shape.n_half), shape.w)
    return np.maximum(np.abs(coords[:, 0:1] - ri[None]), np.abs(coords[:, 1:2] - rj[None]))


def build_attention_mask(
    p: CorrespondenceField,
    cfg: GuidanceConfig,
    shape: GridShape,
    damaged: np.ndarray | None = None,
) -> AttentionMask:
    """Compose the stitched additive mask from a refined correspondence field.

    ``damaged`` (h x w target-half mask) is only consulted when
    ``cfg.restrict_to_masked`` is set.
    """
    status = p.status.reshape(-1)
    coords = p.coords.reshape(-1, 2)
    if cfg.restrict_to_masked and damaged is not None:
        status = np.where(np.asarray(damaged).reshape(-1) == 1, status, Status.UNMATCHED)

    near = _chebyshev(shape, np.where(coords < 0, 0, coords)) <= cfg.win_a
    block = np.zeros((shape.n_half, shape.n_half))
    inlier = status == Status.INLIER
    outlier = status == Status.OUTLIER
    block[inlier] = np.where(near[inlier], cfg.str_a, NEG_INF)
    block[outlier] = np.where(near[outlier], NEG_INF, 0.0)

    values = np.zeros((shape.n_stitched, shape.n_stitched))
    ref, tar = shape.stitched_index_arrays()
    values[np.ix_(tar, ref)] = block
    return AttentionMask(shape, values)


def downsample_mask(values: np.ndarray, shape: GridShape, factor: int) -> np.ndarray:
    """Convert a base-scale stitched mask to a coarser layer.

    A coarse entry is boosted if any covered fine entry is boosted, suppressed
    only if every covered fine entry is suppressed, and 0 otherwise.
    """
    if factor == 1:
        return values
    h, w2 = shape.h, 2 * shape.w
    hs, ws = h // factor, w2 // factor
    blocks = values.reshape(hs, factor, ws, factor, hs, factor, ws, factor)
    blocks = blocks.transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(hs * ws, hs * ws, -1)
    boost = blocks.max(axis=-1)
    any_boost = boost > 0
    all_neg = np.all(blocks == NEG_INF, axis=-1)
    return np.where(any_boost, boost, np.where(all_neg, NEG_INF, 0.0))


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None, d_a: int) -> np.ndarray:
    x = logits if mask is None else logits + mask
    x = x / np.sqrt(d_a)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def apply_mask(logits: AttentionMap, m: AttentionMask | None, d_a: int) -> AttentionMap:
    if d_a <= 0:
        raise ValueError("embedding dimension must be positive")
    mask = None if m is None else m.values
    if mask is not None and mask.shape != logits.scores.shape:
        raise ValueError("mask shape does not match logits")
    probs = masked_softmax(logits.scores, mask, d_a)
    return AttentionMap(probs, logits.query_grid, logits.key_grid, AttentionKind.SOFTMAX)


def one_hot_target(p: CorrespondenceField) -> np.ndarray:
    n = p.shape.n_half
    target = np.zeros((n, n))
    rows = np.flatnonzero(p.status.reshape(-1) == Status.INLIER)
    target[rows, p.flat_targets()[rows]] = 1.0
    return target


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def objective_and_grad(scores: np.ndarray, target: np.ndarray, row_weight: np.ndarray):
    """Weighted BCE of sigmoid(row-standardised scores) against one-hot targets.

    Returns the loss and its gradient with respect to ``scores``. Rows with zero
    ``row_weight`` contribute nothing. Positive entries are up-weighted by
    (#negatives / #positives) of their row; the loss is summed over all entries.
    """
    n_rows, n_cols = scores.shape
    mu = scores.mean(axis=1, keepdims=True)
    c = scores - mu
    sigma = np.sqrt((c * c).mean(axis=1, keepdims=True))
    s = sigma + NORM_EPS
    z = c / s

    n_pos = target.sum(axis=1, keepdims=True)
    pos_w = np.where(n_pos > 0, (n_cols - n_pos) / np.maximum(n_pos, 1), 0.0)
    scale = row_weight[:, None]
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    elem = pos_w * target * _softplus(-z) + (1.0 - target) * _softplus(z)
    loss = float(np.sum(scale * elem))

    sig = _sigmoid(z)
    dz = scale * (pos_w * target * (sig - 1.0) + (1.0 - target) * sig)
    dc = dz / s
    live = sigma > 0
    dc = dc - np.where(live, c * (dz * c).sum(axis=1, keepdims=True) / (s * s * n_cols * np.where(live, sigma, 1.0)), 0.0)
    dscores = dc - dc.mean(axis=1, keepdims=True)
    return loss, dscores


def _row_weight(p: CorrespondenceField, damaged=None, restrict: bool = False) -> np.ndarray:
    w = (p.status.reshape(-1) == Status.INLIER).astype(np.float64)
    if restrict and damaged is not None:
        w = w * (np.asarray(damaged).reshape(-1) == 1)
    return w


def objective_S(a: AttentionMap, p: CorrespondenceField) -> float:
    if a.scores.shape != (p.shape.n_half, p.shape.n_half):
        raise ValueError("attention submatrix does not match the correspondence grid")
    loss, _ = objective_and_grad(a.scores, one_hot_target(p), _row_weight(p))
    return loss


def grad_latent(
    model,
    z: LatentTensor,
    t: int,
    p: CorrespondenceField,
    mask: AttentionMask | None = None,
    *,
    accumulate: bool = False,
    restrict_to_masked: bool = False,
) -> tuple[np.ndarray, ObjectiveReport]:
    """Gradient of the per-layer objective sum with respect to ``z.noise_latent``.

    With ``accumulate`` each layer's gradient is carried all the way back to
    the latent and summed, otherwise the layer adjoints are merged before the
    shared feature stage.
    """
    shape = z.shape
    damaged = z.mask[:, shape.w :]
    target = one_hot_target(p)
    rows = _row_weight(p, damaged, restrict_to_masked)
    ref, tar = shape.stitched_index_arrays()

    tape = model.attention_tape(z, t, mask)
    losses = []
    grad = np.zeros_like(z.noise_latent)
    feature_adjoint = None
    for layer, rec in enumerate(tape.layers):
        t2r = rec.rescaled[np.ix_(tar, ref)]
        loss, d_t2r = objective_and_grad(t2r, target, rows)
        losses.append(loss)
        d_rescaled = np.zeros_like(rec.rescaled)
        d_rescaled[np.ix_(tar, ref)] = d_t2r
        d_feat = model.layer_backward(tape, layer, d_rescaled)
        if accumulate:
            grad += model.feature_backward(tape, d_feat)
        else:
            feature_adjoint = d_feat if feature_adjoint is None else feature_adjoint + d_feat
        if not np.all(np.isfinite(d_feat)):
            raise GradientError(f"non-finite gradient in attention layer {layer} (loss={loss!r})", layer)
    if not accumulate and feature_adjoint is not None:
        grad = model.feature_backward(tape, feature_adjoint)
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite latent gradient")
    report = ObjectiveReport(tuple(losses), float(sum(losses)), float(np.linalg.norm(grad)))
    return grad, report


def total_objective(model, z: LatentTensor, t: int, p: CorrespondenceField, mask=None, restrict_to_masked=False) -> float:
    """Forward-only evaluation of the summed per-layer objective."""
    shape = z.shape
    target = one_hot_target(p)
    rows = _row_weight(p, z.mask[:, shape.w :], restrict_to_masked)
    ref, tar = shape.stitched_index_arrays()
    tape = model.attention_tape(z, t, mask)
    return float(sum(objective_and_grad(rec.rescaled[np.ix_(tar, ref)], target, rows)[0] for rec in tape.layers))


def optimize_latent(z: LatentTensor, grad: np.ndarray, cfg: GuidanceConfig) -> LatentTensor:
    if grad.shape != z.noise_latent.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match noise latent {z.noise_latent.shape}")
    if cfg.str_o == 0 or not np.any(grad):
        return z
    return z.with_noise(z.noise_latent - cfg.str_o * grad)


def finite_difference_check(model, z: LatentTensor, t: int, p: CorrespondenceField, mask=None, step: float = 1e-5, corrupt: float = 0.0):
    """Compare ``grad_latent`` with central differences over every noise entry.

    Returns ``(max_rel_err, analytic, numeric)`` where the error is the largest
    absolute deviation divided by the largest numeric magnitude. ``corrupt``
    perturbs one analytic entry, as a negative control.
    """
    analytic, _ = grad_latent(model, z, t, p, mask)
    analytic = analytic.copy()
    if corrupt:
        analytic.reshape(-1)[0] += corrupt * (np.abs(analytic).max() + 1.0)
    base = z.noise_latent
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for idx in range(base.size):
        bump = np.zeros(base.size)
        bump[idx] = step
        bump = bump.reshape(base.shape)
        hi = total_objective(model, z.with_noise(base + bump), t, p, mask)
        lo = total_objective(model, z.with_noise(base - bump), t, p, mask)
        flat[idx] = (hi - lo) / (2 * step)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale), analytic, numeric
