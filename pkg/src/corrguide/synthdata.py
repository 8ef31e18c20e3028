"""Synthetic reference/target scene pairs with exact token correspondence,
rectangle-plus-stroke inpainting masks and the CRFS scene file format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .domain import GridShape, LatentTensor, TokenCoord, make_rng

MAGIC = b"CRFS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneParams:
    """Scene geometry: target(i, j) shows reference(matrix @ (i, j) + shift)."""

    h: int = 8
    w: int = 8
    d: int = 4
    shift: tuple[int, int] = (0, 0)
    matrix: tuple[tuple[int, int], tuple[int, int]] = ((1, 0), (0, 1))
    corr_len: float = 2.0
    mask_ratio: tuple[float, float] = (0.10, 0.40)
    strokes: tuple[int, int] = (1, 4)
    stroke_len: tuple[int, int] = (2, 5)
    min_overlap_cover: float = 0.8

    @classmethod
    def from_dict(cls, data: dict) -> SceneParams:
        data = dict(data)
        for key in ("shift", "mask_ratio", "strokes", "stroke_len"):
            if key in data:
                data[key] = tuple(data[key])
        if "matrix" in data:
            data["matrix"] = tuple(tuple(r) for r in data["matrix"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class ScenePair:
    shape: GridShape
    reference_latent: np.ndarray
    target_latent: np.ndarray
    gt_coords: np.ndarray
    overlap_mask: np.ndarray
    inpaint_mask: np.ndarray
    seed: int
    params: SceneParams | None = None

    def __post_init__(self):
        h, w = self.shape.h, self.shape.w
        for name in ("reference_latent", "target_latent", "gt_coords", "overlap_mask", "inpaint_mask"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.reference_latent.shape[:2] != (h, w) or self.target_latent.shape != self.reference_latent.shape:
            raise ValueError("latent arrays do not match the grid")
        ov = self.overlap_mask == 1
        if np.any(self.gt_coords[~ov] != -1) or np.any(self.gt_coords[ov] < 0):
            raise ValueError("ground truth must be defined exactly on overlap tokens")

    @property
    def d(self) -> int:
        return self.reference_latent.shape[2]

    def gt(self, coord: TokenCoord) -> TokenCoord | None:
        if not self.overlap_mask[coord]:
            return None
        return TokenCoord(*map(int, self.gt_coords[coord]))

    @property
    def value_range(self) -> tuple[float, float]:
        both = np.concatenate([self.reference_latent.ravel(), self.target_latent.ravel()])
        return float(both.min()), float(both.max())

    @property
    def mask_ratio(self) -> float:
        return float(self.inpaint_mask.mean())


def value_noise(rng: np.random.Generator, h: int, w: int, d: int, corr_len: float) -> np.ndarray:
    """Per-channel value noise: random lattice values bilinearly interpolated."""
    gh = int(np.ceil(h / corr_len)) + 2
    gw = int(np.ceil(w / corr_len)) + 2
    lattice = rng.standard_normal((gh, gw, d))
    off_i, off_j = rng.uniform(0, 1, size=2)
    y = np.arange(h) / corr_len + off_i
    x = np.arange(w) / corr_len + off_j
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = (y - y0)[:, None, None], (x - x0)[None, :, None]
    c00 = lattice[y0][:, x0]
    c01 = lattice[y0][:, x0 + 1]
    c10 = lattice[y0 + 1][:, x0]
    c11 = lattice[y0 + 1][:, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def _texture(rng, h, w, d, corr_len):
    tex = value_noise(rng, h, w, d, corr_len)
    # unit-norm tokens make the attention inner product a cosine similarity
    norm = np.linalg.norm(tex, axis=2, keepdims=True)
    return tex / np.maximum(norm, 1e-12)


def generate_scene(seed: int, params: SceneParams = SceneParams(), with_mask: bool = True) -> ScenePair:
    h, w, d = params.h, params.w, params.d
    shape = GridShape(h, w)
    di, dj = params.shift
    if abs(di) > h / 2 or abs(dj) > w / 2:
        raise ValueError(f"shift {params.shift} exceeds half the grid")
    mat = np.array(params.matrix, dtype=np.int64)
    if mat.shape != (2, 2) or round(np.linalg.det(mat)) == 0:
        raise ValueError("affine matrix must be a non-singular integer 2x2 matrix")
    if params.corr_len < 1:
        raise ValueError("corr_len must be at least 1 token")

    reference = _texture(make_rng(seed, "reference"), h, w, d, params.corr_len)
    filler = _texture(make_rng(seed, "filler"), h, w, d, params.corr_len)

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src = np.einsum("ab,bij->ija", mat, np.stack([ii, jj])) + np.array([di, dj])
    inside = (src[..., 0] >= 0) & (src[..., 0] < h) & (src[..., 1] >= 0) & (src[..., 1] < w)
    if not inside.any():
        raise ValueError("scene parameters leave no overlap between reference and target")
    gt = np.where(inside[..., None], src, -1)
    target = filler.copy()
    target[inside] = reference[src[inside][:, 0], src[inside][:, 1]]

    scene = ScenePair(
        shape,
        reference,
        target,
        gt,
        inside.astype(np.float64),
        np.zeros((h, w)),
        seed,
        params,
    )
    if with_mask:
        mask = generate_mask(seed, scene, params.mask_ratio)
        scene = replace(scene, inpaint_mask=mask)
    return scene


def random_params(seed: int, base: SceneParams = SceneParams(), max_shift: tuple[int, int] = (1, 3)) -> SceneParams:
    """Pure-shift parameters drawn from the seed, never the zero shift."""
    rng = make_rng(seed, "params")
    while True:
        di = int(rng.integers(-max_shift[0], max_shift[0] + 1))
        dj = int(rng.integers(-max_shift[1], max_shift[1] + 1))
        if (di, dj) != (0, 0):
            return replace(base, shift=(di, dj))


def generate_mask(
    seed: int,
    scene: ScenePair,
    ratio: tuple[float, float] = (0.10, 0.40),
    *,
    strokes: tuple[int, int] | None = None,
    stroke_len: tuple[int, int] | None = None,
    min_overlap_cover: float | None = None,
    attempts: int = 32,
) -> np.ndarray:
    """One rectangle unioned with random-walk strokes on the target half."""
    lo, hi = ratio
    if not 0 < lo < hi < 1:
        raise ValueError(f"invalid ratio bounds {ratio}")
    params = scene.params or SceneParams()
    strokes = params.strokes if strokes is None else strokes
    stroke_len = params.stroke_len if stroke_len is None else stroke_len
    cover = params.min_overlap_cover if min_overlap_cover is None else min_overlap_cover

    h, w = scene.shape.h, scene.shape.w
    n = h * w
    overlap = scene.overlap_mask == 1
    rows, cols = np.nonzero(overlap)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    rng = make_rng(seed, "mask")

    for _ in range(attempts):
        mask = np.zeros((h, w), dtype=bool)
        n_strokes = int(rng.integers(strokes[0], strokes[1] + 1))
        share = 1.0 if n_strokes == 0 else 0.75
        area = rng.uniform(lo, lo + share * (hi - lo)) * n
        rh = int(rng.integers(1, min(h, r1 - r0) + 1))
        rw = int(np.clip(round(area / rh), 1, c1 - c0))
        top = int(rng.integers(r0, r1 - rh + 1))
        left = int(rng.integers(c0, c1 - rw + 1))
        mask[top : top + rh, left : left + rw] = True

        for _ in range(n_strokes):
            k = int(rng.integers(len(rows)))
            i, j = int(rows[k]), int(cols[k])
            mask[i, j] = True
            for _ in range(int(rng.integers(stroke_len[0], stroke_len[1] + 1)) - 1):
                step = ((0, 1), (0, -1), (1, 0), (-1, 0))[int(rng.integers(4))]
                ni, nj = i + step[0], j + step[1]
                # walks stay on overlap tokens; a blocked step is skipped
                if 0 <= ni < h and 0 <= nj < w and overlap[ni, nj]:
                    i, j = ni, nj
                    mask[i, j] = True

        count = mask.sum()
        if lo <= count / n <= hi and (mask & overlap).sum() >= cover * count:
            return mask.astype(np.float64)
    raise GenerationError(f"no mask with ratio in [{lo}, {hi}] after {attempts} attempts (seed {seed})")


def embed_stitched(scene: ScenePair, noise_seed: int | None = None) -> LatentTensor:
    """Reference on the left, target on the right, seeded standard-normal noise."""
    h, w, d = scene.shape.h, scene.shape.w, scene.d
    image = np.concatenate([scene.reference_latent, scene.target_latent], axis=1)
    mask = np.concatenate([np.zeros((h, w)), scene.inpaint_mask], axis=1)
    seed = scene.seed if noise_seed is None else noise_seed
    noise = make_rng(seed, "noise").standard_normal((h, 2 * w, d))
    return LatentTensor.build(scene.shape, image, noise, mask)


def _arrays(scene: ScenePair):
    return (
        scene.reference_latent,
        scene.target_latent,
        scene.gt_coords,
        scene.overlap_mask,
        scene.inpaint_mask,
    )


def scene_bytes(scene: ScenePair) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, scene.shape.h, scene.shape.w, scene.d, scene.seed)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _arrays(scene))
    return header + body


def scene_metadata(scene: ScenePair, payload: bytes) -> dict:
    return {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "seed": scene.seed,
        "shape": [scene.shape.h, scene.shape.w],
        "d": scene.d,
        "params": None if scene.params is None else asdict(scene.params),
        "mask_ratio": scene.mask_ratio,
        "overlap_tokens": int(scene.overlap_mask.sum()),
        "value_range": list(scene.value_range),
        "arrays": ["reference_latent", "target_latent", "gt_coords", "overlap_mask", "inpaint_mask"],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }


def save_scene(scene: ScenePair, path) -> tuple[Path, Path]:
    """Write ``path`` (binary) and ``path.json`` (sidecar)."""
    path = Path(path)
    payload = scene_bytes(scene)
    path.write_bytes(payload)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(scene_metadata(scene, payload), indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_scene(path) -> ScenePair:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, h, w, d, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    sizes = [h * w * d, h * w * d, h * w * 2, h * w, h * w]
    if len(raw) != _HEADER.size + 8 * sum(sizes):
        raise ValueError(f"{path}: payload size mismatch")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    params = None
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("params"):
            params = SceneParams.from_dict(meta["params"])
    return ScenePair(
        GridShape(h, w),
        parts[0].reshape(h, w, d),
        parts[1].reshape(h, w, d),
        parts[2].reshape(h, w, 2).astype(np.int64),
        parts[3].reshape(h, w),
        parts[4].reshape(h, w),
        seed,
        params,
    )
