"""Desk-scale stitched inpainting diffusion: a two-scale self-attention denoiser,
deterministic DDIM sampling and the cyclic correspondence-guidance loop."""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import attn, corr, guide
from .domain import (
    AttentionKind,
    AttentionMap,
    AttentionMask,
    CorrespondenceField,
    GridShape,
    GuidanceConfig,
    LatentTensor,
    MatchingMap,
    Status,
    make_rng,
)

log = logging.getLogger(__name__)

ALPHA_BAR_FLOOR = 1e-3
FEATURE_EPS = 1e-12


class NumericError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Schedule:
    """Linear cumulative-alpha schedule indexed by t = 0..T (t = 0 is clean)."""

    steps: int
    alphas: np.ndarray

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alphas[t]))

    def sqrt_1m_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alphas[t]))

    def predict_eps(self, z_t: np.ndarray, x0: np.ndarray, t: int) -> np.ndarray:
        return (z_t - self.sqrt_ab(t) * x0) / self.sqrt_1m_ab(t)

    def predict_x0(self, z_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
        return (z_t - self.sqrt_1m_ab(t) * eps) / self.sqrt_ab(t)

    def ddim_step(self, x0: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
        """Deterministic (eta = 0) move from step t to t - 1."""
        return self.sqrt_ab(t - 1) * x0 + self.sqrt_1m_ab(t - 1) * eps


def build_schedule(steps: int) -> Schedule:
    if steps < 2:
        raise ValueError(f"need at least 2 sampling steps, got {steps}")
    t = np.arange(steps + 1)
    alphas = 1.0 - (1.0 - ALPHA_BAR_FLOOR) * t / steps
    alphas.setflags(write=False)
    return Schedule(steps, alphas)


@dataclass
class LayerRecord:
    scale: int
    features: np.ndarray
    norm: np.ndarray
    query: np.ndarray
    key: np.ndarray
    probs: np.ndarray
    rescaled: np.ndarray


@dataclass
class Tape:
    """Forward intermediates of one attention pass, consumed by the backward pass."""

    shape: GridShape
    d: int
    t: int
    layers: list[LayerRecord]


@dataclass
class DenoiseOutput:
    eps_hat: np.ndarray
    x0_pred: np.ndarray
    layer_tar2ref: list[AttentionMap]
    tar2ref: AttentionMap
    fallback: bool


@dataclass(frozen=True)
class _Operators:
    gather: tuple[np.ndarray, ...]
    replicate: tuple[np.ndarray, ...]
    split: tuple[np.ndarray, ...]


class ToyDenoiser:
    """Two-scale self-attention stand-in for the inpainting U-Net.

    Token features embed the unmasked image channels and the noise channels
    into one latent space and blend them with their same-half 3x3
    neighbourhood mean. The noise channels enter with a small weight so that
    the frozen content dominates matching once it emerges. Each layer
    average-pools features to its scale and normalises them per token. Queries
    use a seeded projection; keys use the same projection perturbed per
    timestep, standing in for timestep conditioning, so every step carries its
    own attention bias. The clean estimate of a damaged token is the mean of
    reference image content weighted by the finest layer's attention.
    """

    def __init__(
        self,
        d: int,
        schedule: Schedule,
        *,
        d_a: int = 16,
        scales: tuple[int, ...] = (1, 2),
        gain: float = 10.0,
        mix: float = 1.0,
        context: int = 1,
        jitter: float = 0.5,
        noise_weight: float = 0.05,
        seed: int = 0,
    ):
        self.d = d
        self.schedule = schedule
        self.d_a = d_a
        self.scales = tuple(scales)
        self.gain = gain
        self.mix = mix
        self.context = context
        self.jitter = jitter
        self.noise_weight = noise_weight
        self.seed = seed
        self._ops: dict[GridShape, _Operators] = {}
        self._keys: dict[tuple[int, int], np.ndarray] = {}

    @cached_property
    def projections(self) -> tuple[np.ndarray, ...]:
        mats = []
        for layer, _ in enumerate(self.scales):
            g = make_rng(self.seed, "proj", layer).standard_normal((self.d_a, self.d))
            if self.d_a >= self.d:
                q, _ = np.linalg.qr(g)
                mats.append(self.gain * q.T)
            else:
                mats.append(self.gain * g.T / np.sqrt(self.d_a))
        return tuple(mats)

    def key_projection(self, layer: int, t: int) -> np.ndarray:
        """Key projection conditioned on the timestep: the query projection plus a
        seeded per-(layer, t) perturbation of relative size ``jitter``."""
        mat = self._keys.get((layer, t))
        if mat is None:
            base = self.projections[layer]
            g = make_rng(self.seed, "key", layer, t).standard_normal(base.shape)
            mat = base + self.jitter * self.gain * g / np.sqrt(base.shape[1])
            self._keys[(layer, t)] = mat
        return mat

    def operators(self, shape: GridShape) -> _Operators:
        ops = self._ops.get(shape)
        if ops is None:
            ops = self._build_operators(shape)
            self._ops[shape] = ops
        return ops

    def _build_operators(self, shape: GridShape) -> _Operators:
        h, w2 = shape.h, 2 * shape.w
        n = h * w2
        r = self.context
        nbr = np.zeros((n, n))
        for idx in range(n):
            i, col = divmod(idx, w2)
            lo, hi = (0, shape.w) if col < shape.w else (shape.w, w2)
            cells = [
                ii * w2 + jj
                for ii in range(max(i - r, 0), min(i + r + 1, h))
                for jj in range(max(col - r, lo), min(col + r + 1, hi))
                if (ii, jj) != (i, col)
            ]
            nbr[idx, cells] = 1.0 / len(cells)
        blend = np.eye(n) + self.mix * nbr
        gather, replicate, split = [], [], []
        for s in self.scales:
            coarse = (h // s, w2 // s)
            if h % s or shape.w % s:
                raise ValueError(f"scale {s} does not divide grid {h}x{shape.w}")
            up = attn.expansion_matrix(coarse, (h, w2), split=False)
            dn = attn.expansion_matrix(coarse, (h, w2), split=True)
            gather.append(dn.T @ blend)
            replicate.append(up)
            split.append(dn)
        return _Operators(tuple(gather), tuple(replicate), tuple(split))

    def features(self, z: LatentTensor) -> np.ndarray:
        """Token features (n, d): the concatenated [image * (1 - mask), noise]
        channels embedded into one latent space as image + noise_weight * noise."""
        n = z.shape.n_stitched
        keep = (1.0 - z.mask)[..., None]
        return (z.image_latent * keep + self.noise_weight * z.noise_latent).reshape(n, self.d)

    def layer_masks(self, mask: AttentionMask | None, shape: GridShape) -> list[np.ndarray | None]:
        if mask is None:
            return [None] * len(self.scales)
        return [guide.downsample_mask(mask.values, shape, s) for s in self.scales]

    def attention_tape(self, z: LatentTensor, t: int, mask: AttentionMask | None = None) -> Tape:
        shape = z.shape
        ops = self.operators(shape)
        f = self.features(z)
        masks = self.layer_masks(mask, shape)
        layers = []
        for k, s in enumerate(self.scales):
            m = masks[k]
            pooled = ops.gather[k] @ f
            norm = np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), FEATURE_EPS)
            feats = pooled / norm
            query = feats @ self.projections[k]
            key = feats @ self.key_projection(k, t)
            probs = guide.masked_softmax(query @ key.T, m, self.d_a)
            rescaled = ops.replicate[k] @ probs @ ops.split[k].T
            layers.append(LayerRecord(s, feats, norm, query, key, probs, rescaled))
        return Tape(shape, self.d, t, layers)

    def layer_backward(self, tape: Tape, layer: int, d_rescaled: np.ndarray) -> np.ndarray:
        """Adjoint of one layer's rescaled attention with respect to token features."""
        ops = self.operators(tape.shape)
        rec = tape.layers[layer]
        d_probs = ops.replicate[layer].T @ d_rescaled @ ops.split[layer]
        p = rec.probs
        d_logits = p * (d_probs - (d_probs * p).sum(axis=1, keepdims=True)) / np.sqrt(self.d_a)
        d_feats = (d_logits @ rec.key) @ self.projections[layer].T
        d_feats += (d_logits.T @ rec.query) @ self.key_projection(layer, tape.t).T
        y = rec.features
        d_pooled = (d_feats - y * (y * d_feats).sum(axis=1, keepdims=True)) / rec.norm
        return ops.gather[layer].T @ d_pooled

    def feature_backward(self, tape: Tape, d_features: np.ndarray) -> np.ndarray:
        h, w2 = tape.shape.h, 2 * tape.shape.w
        return self.noise_weight * d_features.reshape(h, w2, tape.d)


def denoiser_forward(model: ToyDenoiser, z: LatentTensor, t: int, m: AttentionMask | None = None) -> DenoiseOutput:
    shape = z.shape
    tape = model.attention_tape(z, t, m)
    ref, tar = shape.stitched_index_arrays()
    stitched = (shape.h, 2 * shape.w)
    maps = [AttentionMap(rec.rescaled, stitched, stitched) for rec in tape.layers]
    a_t = attn.aggregate_layers(maps)
    layer_t2r = [attn.extract_tar2ref(a, shape) for a in maps]
    tar2ref = attn.extract_tar2ref(a_t, shape)

    n = shape.n_stitched
    img = z.image_latent.reshape(n, -1)
    # content is blended with the finest layer's attention
    ref_mass = tape.layers[0].rescaled[:, ref]
    total = ref_mass.sum(axis=1, keepdims=True)
    damaged = z.mask.reshape(-1) == 1
    starved = damaged & (total[:, 0] <= 1e-300)
    fallback = bool(starved.any())
    if fallback:
        log.debug("t=%d: %d damaged tokens with no reference mass, using uniform fallback", t, starved.sum())
    weights = np.where(starved[:, None], 1.0 / len(ref), ref_mass / np.where(total > 0, total, 1.0))
    blended = weights @ img[ref]
    x0 = np.where(damaged[:, None], blended, img).reshape(z.image_latent.shape)
    eps = model.schedule.predict_eps(z.noise_latent, x0, t)
    return DenoiseOutput(eps, x0, layer_t2r, tar2ref, fallback)


class Policy(enum.Enum):
    ACCUMULATE = "accumulate"
    LATEST = "latest"
    FIRST = "first"
    ORACLE = "oracle"


class Mode(str, enum.Enum):
    FULL = "full"
    NO_ACC = "noacc"
    NO_CYC = "nocyc"
    MASK_ONLY = "maskonly"
    MASK_FILTER = "maskfilter"
    MASK_FILTER_SMOOTH = "maskfiltersmooth"
    NO_GUIDE = "noguide"
    NO_SMOOTH = "nosmooth"
    NO_FILTER = "nofilter"
    ORACLE = "oracle"

    @property
    def flags(self) -> ModeFlags:
        return _MODE_FLAGS[self]


@dataclass(frozen=True)
class ModeFlags:
    mask: bool
    optimize: bool
    filter: bool
    smooth: bool
    policy: Policy = Policy.ACCUMULATE


_MODE_FLAGS = {
    Mode.FULL: ModeFlags(True, True, True, True),
    Mode.NO_ACC: ModeFlags(True, True, True, True, Policy.LATEST),
    Mode.NO_CYC: ModeFlags(True, True, True, True, Policy.FIRST),
    Mode.MASK_ONLY: ModeFlags(True, False, False, False),
    Mode.MASK_FILTER: ModeFlags(True, False, True, False),
    Mode.MASK_FILTER_SMOOTH: ModeFlags(True, False, True, True),
    Mode.NO_GUIDE: ModeFlags(False, False, False, False),
    Mode.NO_SMOOTH: ModeFlags(True, True, True, False),
    Mode.NO_FILTER: ModeFlags(True, True, False, True),
    Mode.ORACLE: ModeFlags(True, False, False, False, Policy.ORACLE),
}

TIMING_KEYS = ("mask", "optimize", "forward", "correspondence")


@dataclass
class StepTrace:
    index: int
    t: int
    attention: list[np.ndarray] | None
    field: CorrespondenceField
    report: guide.ObjectiveReport | None
    timing: dict[str, float]
    fallback: bool = False

    @property
    def step_time(self) -> float:
        return sum(self.timing.values())

    def to_dict(self, include_attention: bool = True, include_timing: bool = False) -> dict:
        out = {
            "index": self.index,
            "t": self.t,
            "fallback": self.fallback,
            "correspondence": {
                "status": self.field.status.reshape(-1).tolist(),
                "coords": self.field.coords.reshape(-1).tolist(),
                "consensus": self.field.consensus.reshape(-1).tolist(),
            },
            "loss": None if self.report is None else self.report.to_dict(),
        }
        if include_attention and self.attention is not None:
            out["attention"] = [a.tolist() for a in self.attention]
        if include_timing:
            out["timing"] = dict(self.timing)
        return out


def write_trace(path, traces: list[StepTrace], include_attention: bool = True, include_timing: bool = False):
    """One JSON object per line, keys sorted, so identical runs give identical bytes."""
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_dict(include_attention, include_timing), sort_keys=True))
            fh.write("\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class InpaintResult:
    restored: np.ndarray
    traces: list[StepTrace]
    matching: MatchingMap
    field: CorrespondenceField
    latent: LatentTensor = field(repr=False)

    def __iter__(self):
        # unpacks as (restored, traces)
        yield self.restored
        yield self.traces


def gt_field(scene) -> CorrespondenceField:
    """Ground-truth correspondence of a scene as an all-inlier field."""
    shape = scene.shape
    status = np.where(scene.overlap_mask == 1, Status.INLIER, Status.UNMATCHED)
    coords = np.where(scene.overlap_mask[..., None] == 1, scene.gt_coords, -1)
    return CorrespondenceField(shape, status, coords, (status == Status.INLIER).astype(np.float64))


def run_inpaint(
    scene,
    cfg: GuidanceConfig,
    mode: Mode | str = Mode.FULL,
    *,
    model: ToyDenoiser | None = None,
    z: LatentTensor | None = None,
    keep_attention: bool = True,
) -> InpaintResult:
    """Run the full denoising trajectory with the guidance components of ``mode``."""
    from .synthdata import embed_stitched

    mode = Mode(mode)
    flags = mode.flags
    shape = scene.shape
    if z is None:
        z = embed_stitched(scene)
    if model is None:
        model = ToyDenoiser(z.d, build_schedule(cfg.steps_total))
    sched = model.schedule
    if sched.steps != cfg.steps_total:
        raise ValueError("model schedule length differs from cfg.steps_total")
    damaged = z.mask[:, shape.w :]

    oracle = gt_field(scene) if flags.policy is Policy.ORACLE else None
    field_prev: CorrespondenceField | None = oracle
    matching = MatchingMap.zeros(shape)
    traces: list[StepTrace] = []
    x0 = None

    for k in range(cfg.steps_total):
        t = cfg.steps_total - k
        timing = dict.fromkeys(TIMING_KEYS, 0.0)
        try:
            tic = time.perf_counter()
            mask = None
            if flags.mask and k < cfg.step_a and field_prev is not None:
                mask = guide.build_attention_mask(field_prev, cfg, shape, damaged)
            timing["mask"] = time.perf_counter() - tic

            report = None
            tic = time.perf_counter()
            if flags.optimize and k < cfg.step_o and field_prev is not None:
                grad, report = guide.grad_latent(
                    model, z, t, field_prev, mask, restrict_to_masked=cfg.restrict_to_masked
                )
                z = guide.optimize_latent(z, grad, cfg)
            timing["optimize"] = time.perf_counter() - tic

            tic = time.perf_counter()
            out = denoiser_forward(model, z, t, mask)
            x0 = out.x0_pred
            z = z.with_noise(sched.ddim_step(out.x0_pred, out.eps_hat, t))
            if not np.all(np.isfinite(z.noise_latent)):
                raise NumericError("non-finite latent after DDIM update", k)
            timing["forward"] = time.perf_counter() - tic

            tic = time.perf_counter()
            if flags.policy is Policy.ORACLE:
                matching = attn.accumulate_matching(matching, out.tar2ref)
                current = oracle
            elif flags.policy is Policy.FIRST and k > 0:
                matching = attn.accumulate_matching(matching, out.tar2ref)
                current = field_prev
            else:
                if flags.policy is Policy.LATEST:
                    matching = MatchingMap(shape, out.tar2ref.scores)
                else:
                    matching = attn.accumulate_matching(matching, out.tar2ref)
                current = corr.refine(
                    corr.estimate(matching),
                    cfg.outlier_threshold,
                    cfg.win_s,
                    do_filter=flags.filter,
                    do_smooth=flags.smooth,
                )
            timing["correspondence"] = time.perf_counter() - tic
        except guide.GradientError as exc:
            raise NumericError(str(exc), k) from exc
        except FloatingPointError as exc:
            raise NumericError(str(exc), k) from exc

        traces.append(
            StepTrace(
                index=k,
                t=t,
                attention=[m.scores for m in out.layer_tar2ref] if keep_attention else None,
                field=current,
                report=report,
                timing=timing,
                fallback=out.fallback,
            )
        )
        field_prev = current

    restored = x0[:, shape.w :, :].copy()
    return InpaintResult(restored, traces, matching, field_prev, z)
