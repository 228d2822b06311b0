"""Multi-view consistent editing of a rendered view sequence.

Key views are edited jointly: their feature grids attend to one another
(every query row attends over all key views' cells), so per-view noise is
homogenized toward content-matched consensus. Every other view receives
features by correspondence: candidate cells in the two nearest key views
are filtered to an epipolar band, matched by appearance, and blended with
inverse-angular-distance weights. Decoding turns the feature payload back
into an image.

All randomness is derived from explicit seeds; identical inputs and seeds
give bit-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import (
    Camera,
    epipolar_line,
    forward_angle,
    fundamental_matrix,
    nearest_key_views,
    sort_cameras,
)
from .images import load_dgeimg, save_dgeimg

__all__ = [
    "EDIT_KINDS",
    "EditError",
    "FeatureGrid",
    "MatchResult",
    "CorrespondenceMap",
    "EditSpec",
    "ViewSequence",
    "save_edit_spec",
    "load_edit_spec",
    "select_key_views",
    "st_attention",
    "match_epipolar",
    "inject_features",
    "edit_sequence",
    "edit_views_independently",
    "save_feature_grid",
    "load_feature_grid",
]

EDIT_KINDS = ("recolor-by-world-position", "style-tint", "per-view-random")

_ZERO_NORM = 1e-12

_KIND_DEFAULTS = {
    "recolor-by-world-position": {
        "center": (0.0, 0.0, 0.0),
        "radius": 1.0,
        "gain": (1.0, 1.0, 1.0),
        "bias": (0.0, 0.0, 0.0),
        "strength": 1.0,
    },
    "style-tint": {
        "gain": (1.1, 1.0, 0.9),
        "bias": (0.02, 0.0, -0.02),
        "strength": 1.0,
    },
    "per-view-random": {
        "magnitude": 0.25,
        "strength": 1.0,
    },
}


class EditError(RuntimeError):
    """Editing failed; the message carries the offending view index."""


@dataclass
class FeatureGrid:
    """Per-view feature map on a coarse cell grid.

    data is (cells_h, cells_w, dim); cell (r, c) sits at pixel
    ((c + 0.5) * stride, (r + 0.5) * stride).
    """

    data: np.ndarray
    stride: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be (cells_h, cells_w, dim), got {self.data.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature grid contains non-finite values")

    @property
    def cells_h(self) -> int:
        return self.data.shape[0]

    @property
    def cells_w(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def rows(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)

    def cell_centers(self) -> np.ndarray:
        """Pixel coordinates of every cell center, row-major (C, 2)."""
        cs = (np.arange(self.cells_w) + 0.5) * self.stride
        rs = (np.arange(self.cells_h) + 0.5) * self.stride
        xx, yy = np.meshgrid(cs, rs)
        return np.stack([xx, yy], axis=-1).reshape(-1, 2)

    def copy(self) -> "FeatureGrid":
        return FeatureGrid(self.data.copy(), self.stride)


@dataclass(frozen=True)
class EditSpec:
    """Declarative description of a mock edit; stands in for a text prompt."""

    kind: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}, expected one of {EDIT_KINDS}")
        defaults = _KIND_DEFAULTS[self.kind]
        unknown = set(self.parameters) - set(defaults)
        if unknown:
            raise ValueError(f"parameters {sorted(unknown)} not valid for kind {self.kind!r}")
        merged = {**defaults, **self.parameters}
        if merged["strength"] < 0:
            raise ValueError("strength must be >= 0")
        if self.kind == "recolor-by-world-position" and merged["radius"] <= 0:
            raise ValueError("radius must be positive")
        if self.kind == "per-view-random" and merged["magnitude"] < 0:
            raise ValueError("magnitude must be >= 0")
        object.__setattr__(self, "parameters", merged)

    def param(self, name: str):
        return self.parameters[name]

    def with_strength(self, strength: float) -> "EditSpec":
        params = {**self.parameters, "strength": float(strength)}
        return EditSpec(kind=self.kind, parameters=params, seed=self.seed)

    def to_json(self) -> str:
        params = {
            k: (list(v) if isinstance(v, (tuple, np.ndarray)) else v)
            for k, v in self.parameters.items()
        }
        return json.dumps({"kind": self.kind, "parameters": params, "seed": self.seed},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EditSpec":
        obj = json.loads(text)
        return cls(kind=obj["kind"], parameters=obj.get("parameters", {}),
                   seed=int(obj.get("seed", 0)))


def save_edit_spec(path, spec: EditSpec) -> None:
    Path(path).write_text(spec.to_json())


def load_edit_spec(path) -> EditSpec:
    return EditSpec.from_json(Path(path).read_text())


@dataclass
class ViewSequence:
    """Ordered (camera, image) pairs, ordered per sort_cameras."""

    views: list

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("sequence must contain at least one view")
        shape = self.views[0][1].shape
        for i, (_, img) in enumerate(self.views):
            if img.shape != shape:
                raise ValueError(f"view {i} image shape {img.shape} != {shape}")

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def cameras(self) -> list:
        return [cam for cam, _ in self.views]

    @property
    def images(self) -> list:
        return [img for _, img in self.views]


def select_key_views(count: int, density: int, seed: int) -> list[int]:
    """One uniformly drawn key per consecutive block of `density` frames."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if density < 1:
        raise ValueError("density must be >= 1")
    rng = np.random.default_rng(seed)
    keys = []
    for start in range(0, count, density):
        stop = min(start + density, count)
        keys.append(int(rng.integers(start, stop)))
    return keys


def st_attention(queries: Sequence[FeatureGrid], keys: Sequence[FeatureGrid],
                 values: Sequence[FeatureGrid], t: int) -> FeatureGrid:
    """Joint attention: view t's queries attend over all views' cells.

    Output row u = softmax_u(Q_t[u] . K_all / sqrt(d)) . V_all, a convex
    combination of value rows. t indexes into the given lists.
    """
    if not len(queries) == len(keys) == len(values):
        raise ValueError("queries, keys, values must have equal view counts")
    if not 0 <= t < len(queries):
        raise ValueError(f"view index {t} out of range")
    dim = queries[t].dim
    shape = queries[t].data.shape
    for g in (*queries, *keys, *values):
        if g.data.shape != shape:
            raise ValueError(f"grid shape {g.data.shape} != {shape}")
    q = queries[t].rows()
    k_all = np.concatenate([g.rows() for g in keys], axis=0)
    v_all = np.concatenate([g.rows() for g in values], axis=0)
    logits = (q @ k_all.T) / np.sqrt(dim)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    out = weights @ v_all
    return FeatureGrid(out.reshape(shape), queries[t].stride)


@dataclass
class MatchResult:
    """Per-cell best correspondence of one view against one key view."""

    rows: np.ndarray  # (cells_h, cells_w) row index into the key grid
    cols: np.ndarray
    cos_dist: np.ndarray
    fallback: np.ndarray  # empty/invalid candidate set; nearest-to-line used
    epipole: np.ndarray  # degenerate epipolar line; unconstrained argmin


def _cosine_distance_matrix(rows_t: np.ndarray, rows_k: np.ndarray) -> np.ndarray:
    """1 - cosine similarity; infinite where either side has zero norm."""
    nt = np.linalg.norm(rows_t, axis=1)
    nk = np.linalg.norm(rows_k, axis=1)
    dots = rows_t @ rows_k.T
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dots / np.outer(nt, nk)
    dist = 1.0 - cos
    dist[nt < _ZERO_NORM, :] = np.inf
    dist[:, nk < _ZERO_NORM] = np.inf
    return dist


def match_epipolar(feat_t: FeatureGrid, feat_k: FeatureGrid,
                   F: Optional[np.ndarray], band: float) -> MatchResult:
    """Best appearance match per cell, restricted to an epipolar band.

    Candidates are cells of feat_k whose centers lie within `band` pixels of
    the epipolar line of the query cell's center; ties break on (cosine
    distance, line distance, row-major index). With F None the search is
    unconstrained pure-appearance matching (ties on index). An empty or
    zero-norm candidate set falls back to the cell nearest the line.
    """
    if feat_t.data.shape != feat_k.data.shape:
        raise ValueError("grids must share shape")
    if F is not None and band <= 0:
        raise ValueError("band must be positive")
    ch, cw = feat_t.cells_h, feat_t.cells_w
    n_t, n_k = ch * cw, ch * cw
    centers_t = feat_t.cell_centers()
    centers_k = feat_k.cell_centers()
    cos_d = _cosine_distance_matrix(feat_t.rows(), feat_k.rows())
    valid_t = np.linalg.norm(feat_t.rows(), axis=1) >= _ZERO_NORM

    sel = np.zeros(n_t, dtype=np.int64)
    sel_cos = np.zeros(n_t)
    fallback = np.zeros(n_t, dtype=bool)
    epipole = np.zeros(n_t, dtype=bool)
    all_idx = np.arange(n_k)

    for u in range(n_t):
        cos_row = cos_d[u]
        if F is None:
            if not valid_t[u] or not np.isfinite(cos_row).any():
                sel[u] = 0
                fallback[u] = True
                continue
            finite = np.flatnonzero(np.isfinite(cos_row))
            best = finite[np.lexsort((finite, cos_row[finite]))[0]]
            sel[u] = best
            sel_cos[u] = cos_row[best]
            continue

        line = epipolar_line(F, centers_t[u])
        if line is None:
            epipole[u] = True
            if not valid_t[u] or not np.isfinite(cos_row).any():
                sel[u] = 0
                fallback[u] = True
                continue
            finite = np.flatnonzero(np.isfinite(cos_row))
            best = finite[np.lexsort((finite, cos_row[finite]))[0]]
            sel[u] = best
            sel_cos[u] = cos_row[best]
            continue

        ldist = np.abs(line.a * centers_k[:, 0] + line.b * centers_k[:, 1] + line.c)
        in_band = ldist <= band
        cand = np.flatnonzero(in_band & np.isfinite(cos_row)) if valid_t[u] else np.array([], dtype=np.int64)
        if cand.size == 0:
            fallback[u] = True
            best = all_idx[np.lexsort((all_idx, ldist))[0]]
            sel[u] = best
            sel_cos[u] = cos_row[best] if np.isfinite(cos_row[best]) else np.inf
            continue
        order = np.lexsort((cand, ldist[cand], cos_row[cand]))
        best = cand[order[0]]
        sel[u] = best
        sel_cos[u] = cos_row[best]

    return MatchResult(
        rows=(sel // cw).reshape(ch, cw),
        cols=(sel % cw).reshape(ch, cw),
        cos_dist=sel_cos.reshape(ch, cw),
        fallback=fallback.reshape(ch, cw),
        epipole=epipole.reshape(ch, cw),
    )


@dataclass
class CorrespondenceMap:
    """Two-key correspondence of one non-key view: matches plus blend weights."""

    key_views: tuple
    matches: tuple
    weights: np.ndarray  # (2,), nonnegative, sums to 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(2)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
        self.weights = w


def _blend_weights(theta1: float, theta2: float, eps: float = 1e-6) -> np.ndarray:
    w = np.array([1.0 / (theta1 + eps), 1.0 / (theta2 + eps)])
    return w / w.sum()


def inject_features(feat_t: FeatureGrid, t: int, key_feats: Mapping[int, FeatureGrid],
                    cameras: Sequence[Camera], keys: Sequence[int], band: float,
                    epipolar: bool = True):
    """Replace view t's features with a blend from its two nearest key views.

    Returns (grid, CorrespondenceMap). Weights follow inverse angular
    distance w_i proportional to 1/(theta_i + 1e-6).
    """
    if t in set(keys):
        raise ValueError(f"view {t} is a key view")
    k1, k2 = nearest_key_views(t, list(keys), list(cameras))
    theta1 = forward_angle(cameras[t], cameras[k1])
    theta2 = forward_angle(cameras[t], cameras[k2])
    weights = _blend_weights(theta1, theta2)

    out = np.zeros_like(feat_t.data)
    matches = []
    for ki, w in zip((k1, k2), weights):
        F = fundamental_matrix(cameras[t], cameras[ki]) if epipolar else None
        match = match_epipolar(feat_t, key_feats[ki], F, band)
        rows_k = key_feats[ki].rows()
        flat = match.rows.reshape(-1) * feat_t.cells_w + match.cols.reshape(-1)
        out += w * rows_k[flat].reshape(feat_t.data.shape)
        matches.append(match)
    grid = FeatureGrid(out, feat_t.stride)
    cmap = CorrespondenceMap(key_views=(k1, k2), matches=tuple(matches), weights=weights)
    return grid, cmap


def _check_sorted(cameras: Sequence[Camera]) -> None:
    order = sort_cameras(list(cameras))
    if order != list(range(len(cameras))):
        raise ValueError("sequence is not in sorted camera order; apply sort_cameras first")


def edit_sequence(seq: ViewSequence, spec: EditSpec, editor, key_density: int = 5,
                  band: Optional[float] = None, seed: int = 0,
                  epipolar: bool = True) -> ViewSequence:
    """Key-view joint editing plus feature injection for all other views.

    Key views are edited together (the editor's transform couples them via
    st_attention); each remaining view gets features injected from its two
    nearest edited keys and is decoded back to an image.
    """
    t_count = len(seq)
    if t_count < 2:
        raise ValueError("multi-view editing needs at least 2 views")
    cameras = seq.cameras
    _check_sorted(cameras)
    if band is None:
        band = 1.5 * editor.stride

    keys = select_key_views(t_count, key_density, seed)
    key_set = set(keys)

    grids = {}
    for t, (_, image) in enumerate(seq.views):
        try:
            grids[t] = editor.extract(image, t)
        except Exception as exc:
            raise EditError(f"view {t}: feature extraction failed: {exc}") from exc

    try:
        edited_keys = editor.transform({k: grids[k] for k in keys}, spec)
    except Exception as exc:
        raise EditError(f"key views {sorted(key_set)}: transform failed: {exc}") from exc

    edited_views = []
    for t, (camera, image) in enumerate(seq.views):
        try:
            if t in key_set:
                grid = edited_keys[t]
            else:
                grid, _ = inject_features(grids[t], t, edited_keys, cameras, keys,
                                          band, epipolar=epipolar)
            edited_views.append((camera, editor.decode(grid, image, t)))
        except EditError:
            raise
        except Exception as exc:
            raise EditError(f"view {t}: edit failed: {exc}") from exc
    return ViewSequence(edited_views)


def edit_views_independently(seq: ViewSequence, spec: EditSpec, editor) -> ViewSequence:
    """Apply the editor to every view separately (no cross-view coupling)."""
    edited = []
    for t, (camera, image) in enumerate(seq.views):
        try:
            grid = editor.extract(image, t)
            out = editor.transform({t: grid}, spec)
            edited.append((camera, editor.decode(out[t], image, t)))
        except Exception as exc:
            raise EditError(f"view {t}: edit failed: {exc}") from exc
    return ViewSequence(edited)


def save_feature_grid(path, grid: FeatureGrid) -> None:
    """Dump grid cells to the raw float container (channels = dim)."""
    save_dgeimg(path, grid.data)


def load_feature_grid(path, stride: int) -> FeatureGrid:
    return FeatureGrid(load_dgeimg(path), stride)
