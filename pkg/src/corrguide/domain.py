"""Core value types, stitched-grid geometry and seeded randomness.

Everything here is immutable after construction. Arrays held by the
dataclasses are copied and flagged read-only so a value can be shared
between runs without defensive copies downstream.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

NEG_INF = -1e9

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Derive an independent 64-bit stream seed from a base seed and tags."""
    state = splitmix64(seed & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            for byte in tag.encode():
                state = splitmix64(state ^ byte)
        else:
            state = splitmix64(state ^ (tag & _MASK64))
    return state


def make_rng(seed: int, *tags: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Half(enum.Enum):
    REFERENCE = 0
    TARGET = 1


class TokenCoord(NamedTuple):
    i: int
    j: int


@dataclass(frozen=True)
class GridShape:
    """Token grid of one image half; the stitched grid is h x 2w."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.h}x{self.w}")

    @property
    def n_half(self) -> int:
        return self.h * self.w

    @property
    def n_stitched(self) -> int:
        return 2 * self.h * self.w

    def contains(self, coord: TokenCoord) -> bool:
        return 0 <= coord[0] < self.h and 0 <= coord[1] < self.w

    def half_index(self, coord: TokenCoord) -> int:
        """Row-major index inside one half (0 .. h*w-1)."""
        if not self.contains(coord):
            raise IndexError(f"{tuple(coord)} out of bounds for {self.h}x{self.w}")
        return coord[0] * self.w + coord[1]

    def scaled(self, factor: int) -> GridShape:
        if self.h % factor or self.w % factor:
            raise ValueError(f"scale {factor} does not divide {self.h}x{self.w}")
        return GridShape(self.h // factor, self.w // factor)

    def stitched_index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stitched flat indices of every reference and target token, half-row-major."""
        ii, jj = np.divmod(np.arange(self.n_half), self.w)
        ref = ii * 2 * self.w + jj
        return ref, ref + self.w


def flatten(coord: TokenCoord, half: Half, shape: GridShape) -> int:
    if not shape.contains(coord):
        raise IndexError(f"{tuple(coord)} out of bounds for {shape.h}x{shape.w}")
    offset = shape.w if half is Half.TARGET else 0
    return coord[0] * 2 * shape.w + coord[1] + offset


def unflatten(index: int, shape: GridShape) -> tuple[TokenCoord, Half]:
    if not 0 <= index < shape.n_stitched:
        raise IndexError(f"index {index} out of range for {shape.h}x{2 * shape.w}")
    i, col = divmod(index, 2 * shape.w)
    if col < shape.w:
        return TokenCoord(i, col), Half.REFERENCE
    return TokenCoord(i, col - shape.w), Half.TARGET


def neighborhood(coord: TokenCoord, radius: int, shape: GridShape) -> frozenset[TokenCoord]:
    """Chebyshev ball around ``coord`` clipped to the half grid, centre included."""
    if not shape.contains(coord):
        raise IndexError(f"{tuple(coord)} out of bounds for {shape.h}x{shape.w}")
    i0, i1 = max(coord[0] - radius, 0), min(coord[0] + radius, shape.h - 1)
    j0, j1 = max(coord[1] - radius, 0), min(coord[1] + radius, shape.w - 1)
    return frozenset(TokenCoord(i, j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1))


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """Stitched inpainting state: frozen image channels, evolving noise channels, mask."""

    shape: GridShape
    image_latent: np.ndarray
    noise_latent: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        h, w2 = self.shape.h, 2 * self.shape.w
        img = _frozen(self.image_latent)
        noise = _frozen(self.noise_latent)
        mask = _frozen(self.mask)
        if img.ndim != 3 or img.shape[:2] != (h, w2):
            raise ValueError(f"image_latent must be {h}x{w2}xd, got {img.shape}")
        if noise.shape != img.shape:
            raise ValueError("noise_latent must match image_latent shape")
        if mask.shape != (h, w2) or not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"mask must be binary {h}x{w2}")
        if np.any(mask[:, : self.shape.w]):
            raise ValueError("mask has damaged tokens on the reference half")
        if np.any(img[mask == 1] != 0):
            raise ValueError("image_latent must be zeroed under the mask")
        object.__setattr__(self, "image_latent", img)
        object.__setattr__(self, "noise_latent", noise)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def build(cls, shape: GridShape, image_latent, noise_latent, mask) -> LatentTensor:
        """Construct, zeroing image channels under the mask first."""
        img = np.array(image_latent, dtype=np.float64)
        img[np.asarray(mask) == 1] = 0.0
        return cls(shape, img, noise_latent, mask)

    @property
    def d(self) -> int:
        return self.image_latent.shape[2]

    def concatenated(self) -> np.ndarray:
        """The (h, 2w, 2d+1) view fed to the denoiser."""
        return np.concatenate([self.image_latent, self.noise_latent, self.mask[..., None]], axis=2)

    def with_noise(self, noise_latent) -> LatentTensor:
        return LatentTensor(self.shape, self.image_latent, noise_latent, self.mask)


class AttentionKind(enum.Enum):
    SOFTMAX = "softmax"
    LOGITS = "logits"


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Dense query x key score matrix over flattened token grids.

    ``query_grid`` / ``key_grid`` are (rows, cols) of the flattened token
    layout, e.g. (h, 2w) for a stitched map or (h, w) for a half map.
    """

    scores: np.ndarray
    query_grid: tuple[int, int]
    key_grid: tuple[int, int]
    kind: AttentionKind = AttentionKind.SOFTMAX

    def __post_init__(self):
        scores = _frozen(self.scores)
        nq = self.query_grid[0] * self.query_grid[1]
        nk = self.key_grid[0] * self.key_grid[1]
        if scores.shape != (nq, nk):
            raise ValueError(f"scores {scores.shape} inconsistent with grids {self.query_grid}, {self.key_grid}")
        if self.kind is AttentionKind.SOFTMAX:
            if scores.min(initial=0.0) < 0:
                raise ValueError("post-softmax attention has negative entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "query_grid", tuple(self.query_grid))
        object.__setattr__(self, "key_grid", tuple(self.key_grid))

    def row_sums(self) -> np.ndarray:
        return self.scores.sum(axis=1)


@dataclass(frozen=True, eq=False)
class MatchingMap:
    """Accumulated target->reference consensus, stored as (h*w, h*w)."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        n = self.shape.n_half
        if vals.shape != (n, n):
            vals = vals.reshape(n, n)
        if vals.min(initial=0.0) < 0:
            raise ValueError("matching map entries must be non-negative")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, shape: GridShape) -> MatchingMap:
        return cls(shape, np.zeros((shape.n_half, shape.n_half)))

    def as_4d(self) -> np.ndarray:
        h, w = self.shape.h, self.shape.w
        return self.values.reshape(h, w, h, w)


class Status(enum.IntEnum):
    UNMATCHED = 0
    INLIER = 1
    OUTLIER = 2


@dataclass(frozen=True, eq=False)
class CorrespondenceField:
    """Per-target-token reference correspondence with consensus and displacement.

    ``coords`` holds the reference token for inliers and outliers and -1 for
    unmatched tokens.
    """

    shape: GridShape
    status: np.ndarray
    coords: np.ndarray
    consensus: np.ndarray
    displacement: np.ndarray = field(default=None)

    def __post_init__(self):
        h, w = self.shape.h, self.shape.w
        status = _frozen(self.status, np.int8)
        coords = _frozen(self.coords, np.int64)
        consensus = _frozen(self.consensus)
        if status.shape != (h, w) or coords.shape != (h, w, 2) or consensus.shape != (h, w):
            raise ValueError("correspondence arrays do not match grid shape")
        if consensus.min(initial=0.0) < 0:
            raise ValueError("consensus must be non-negative")
        if np.any(consensus[status == Status.OUTLIER] != 0):
            raise ValueError("outlier entries must carry zero consensus")
        if np.any(consensus[status == Status.UNMATCHED] != 0):
            raise ValueError("unmatched entries must carry zero consensus")
        placed = status != Status.UNMATCHED
        c = coords[placed]
        if np.any((c[:, 0] < 0) | (c[:, 0] >= h) | (c[:, 1] < 0) | (c[:, 1] >= w)):
            raise ValueError("correspondence coordinate out of bounds")
        if self.displacement is None:
            disp = _frozen(grid_displacement(coords, status))
        else:
            disp = _frozen(self.displacement)
            if disp.shape != (h, w, 2):
                raise ValueError("displacement must be h x w x 2")
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "consensus", consensus)
        object.__setattr__(self, "displacement", disp)

    @classmethod
    def unmatched(cls, shape: GridShape) -> CorrespondenceField:
        return cls(
            shape,
            np.zeros((shape.h, shape.w)),
            -np.ones((shape.h, shape.w, 2)),
            np.zeros((shape.h, shape.w)),
        )

    @classmethod
    def from_pairs(cls, shape: GridShape, inliers=(), outliers=()) -> CorrespondenceField:
        """Build a field from ``{target: reference}`` mappings; consensus 1 for inliers."""
        status = np.zeros((shape.h, shape.w), dtype=np.int8)
        coords = -np.ones((shape.h, shape.w, 2), dtype=np.int64)
        consensus = np.zeros((shape.h, shape.w))
        for kind, pairs in ((Status.INLIER, inliers), (Status.OUTLIER, outliers)):
            items = pairs.items() if isinstance(pairs, dict) else pairs
            for tgt, ref in items:
                status[tgt] = kind
                coords[tgt] = ref
                consensus[tgt] = 1.0 if kind is Status.INLIER else 0.0
        return cls(shape, status, coords, consensus)

    def get(self, coord: TokenCoord) -> tuple[Status, TokenCoord | None]:
        st = Status(int(self.status[coord]))
        if st is Status.UNMATCHED:
            return st, None
        return st, TokenCoord(*map(int, self.coords[coord]))

    def flat_targets(self) -> np.ndarray:
        """Half-grid flat index of each token's reference coordinate (-1 if unmatched)."""
        flat = self.coords[..., 0] * self.shape.w + self.coords[..., 1]
        return np.where(self.status == Status.UNMATCHED, -1, flat).reshape(-1)


def grid_displacement(coords: np.ndarray, status: np.ndarray) -> np.ndarray:
    h, w = status.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    disp = np.stack([coords[..., 0] - ii, coords[..., 1] - jj], axis=-1).astype(np.float64)
    disp[status == Status.UNMATCHED] = 0.0
    return disp


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Additive logit mask over the stitched grid, values in {v, NEG_INF, 0}."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        n = self.shape.n_stitched
        if vals.shape != (n, n):
            raise ValueError(f"mask must be {n}x{n}, got {vals.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, shape: GridShape) -> AttentionMask:
        return cls(shape, np.zeros((shape.n_stitched, shape.n_stitched)))


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance hyper-parameters.

    ``step_a`` and ``step_o`` default to all steps and to ceil(0.6 T).
    """

    steps_total: int = 50
    step_a: int | None = None
    step_o: int | None = None
    win_a: int = 1
    win_s: int = 2
    str_a: float = 1.0
    str_o: float = 0.1
    outlier_threshold: int = 4
    restrict_to_masked: bool = False

    def __post_init__(self):
        if self.step_a is None:
            object.__setattr__(self, "step_a", self.steps_total)
        if self.step_o is None:
            object.__setattr__(self, "step_o", math.ceil(0.6 * self.steps_total))
        if self.steps_total < 1:
            raise ValueError("steps_total must be positive")
        if not 0 <= self.step_a <= self.steps_total:
            raise ValueError("step_a must lie in [0, steps_total]")
        if not 0 <= self.step_o <= self.steps_total:
            raise ValueError("step_o must lie in [0, steps_total]")
        if self.win_a < 0 or self.win_s < 0:
            raise ValueError("window radii must be non-negative")
        if not self.str_a > 0:
            raise ValueError("str_a must be positive")
        if self.str_o < 0:
            raise ValueError("str_o must be non-negative")
        if self.outlier_threshold < 1:
            raise ValueError("outlier_threshold must be at least 1")
