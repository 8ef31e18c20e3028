"""Attention aggregation: head averaging, multi-scale rescaling, layer summation,
target-to-reference extraction and matching-map accumulation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .domain import AttentionKind, AttentionMap, GridShape, MatchingMap


@dataclass(frozen=True)
class LayerAttention:
    layer_id: int
    head_maps: tuple[AttentionMap, ...]
    scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "head_maps", tuple(self.head_maps))
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.head_maps:
            q, k = self.head_maps[0].query_grid, self.head_maps[0].key_grid
            if any(m.query_grid != q or m.key_grid != k for m in self.head_maps):
                raise ValueError("all heads of a layer must share one shape")


def average_heads(layer: LayerAttention) -> AttentionMap:
    if not layer.head_maps:
        raise ValueError(f"layer {layer.layer_id} has no heads")
    first = layer.head_maps[0]
    scores = np.mean([m.scores for m in layer.head_maps], axis=0)
    return AttentionMap(scores, first.query_grid, first.key_grid, AttentionKind.SOFTMAX)


def expansion_matrix(src: tuple[int, int], dst: tuple[int, int], split: bool) -> np.ndarray:
    """(n_dst, n_src) matrix mapping each fine token to the coarse token covering it.

    With ``split`` the entries are 1/(block size) so that mass is shared
    uniformly; otherwise they are 1 (replication).
    """
    (sr, sc), (dr, dc) = src, dst
    if dr % sr or dc % sc:
        raise ValueError(f"cannot rescale grid {src} to {dst}: non-integer ratio")
    fr, fc = dr // sr, dc // sc
    ii, jj = np.divmod(np.arange(dr * dc), dc)
    parent = (ii // fr) * sc + jj // fc
    mat = np.zeros((dr * dc, sr * sc))
    mat[np.arange(dr * dc), parent] = 1.0 / (fr * fc) if split else 1.0
    return mat


def rescale_map(amap: AttentionMap, query_grid: tuple[int, int], key_grid: tuple[int, int]) -> AttentionMap:
    """Upsample a map: replicate query rows, split key mass uniformly over key blocks."""
    if amap.query_grid == tuple(query_grid) and amap.key_grid == tuple(key_grid):
        return amap
    uq = expansion_matrix(amap.query_grid, query_grid, split=False)
    dk = expansion_matrix(amap.key_grid, key_grid, split=True)
    return AttentionMap(uq @ amap.scores @ dk.T, query_grid, key_grid, amap.kind)


def aggregate_layers(maps: Sequence[AttentionMap]) -> AttentionMap:
    if not maps:
        raise ValueError("no attention maps to aggregate")
    q, k = maps[0].query_grid, maps[0].key_grid
    for m in maps[1:]:
        if m.query_grid != q or m.key_grid != k:
            raise ValueError(f"shape mismatch: {m.query_grid}x{m.key_grid} vs {q}x{k}")
    return AttentionMap(np.sum([m.scores for m in maps], axis=0), q, k, maps[0].kind)


def extract_tar2ref(a_t: AttentionMap, shape: GridShape) -> AttentionMap:
    """Rows of target-half queries, columns of reference-half keys, half-grid order."""
    stitched = (shape.h, 2 * shape.w)
    if a_t.query_grid != stitched or a_t.key_grid != stitched:
        raise ValueError(f"expected a stitched {stitched} map, got {a_t.query_grid}x{a_t.key_grid}")
    ref, tar = shape.stitched_index_arrays()
    half = (shape.h, shape.w)
    return AttentionMap(a_t.scores[np.ix_(tar, ref)], half, half, a_t.kind)


def accumulate_matching(prev: MatchingMap, a: AttentionMap) -> MatchingMap:
    if a.scores.shape != prev.values.shape:
        raise ValueError("attention submatrix does not match the matching map")
    if a.scores.min(initial=0.0) < 0:
        raise ValueError("attention entries must be non-negative")
    return MatchingMap(prev.shape, prev.values + a.scores)
