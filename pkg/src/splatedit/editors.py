"""Pluggable image editors built from deterministic stages.

An editor exposes three stages: extract (image to feature grid), transform
(feature grids plus an edit spec to edited grids, with cross-view attention
coupling applied inside when several grids are given), and decode (feature
grid back to an image, conditioned on the view it re-renders).

The mock editors here are invertible by construction so ground truth exists
for every pipeline test: the feature payload is a residual affine color
transform (per-cell gain and bias), decoded by bilinear upsampling. A zero
payload decodes to the input image exactly, which makes the identity editor
bit-exact end to end.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np

from .geometry import Camera
from .mveditor import EditSpec, FeatureGrid, st_attention

__all__ = ["Editor", "MockEditor", "IdentityEditor", "DESCRIPTOR_DIM", "PAYLOAD_DIM"]

DESCRIPTOR_DIM = 16
PAYLOAD_DIM = 6  # residual color transform: gain - 1 (3) and bias (3)
_DIM = DESCRIPTOR_DIM + PAYLOAD_DIM
_HIST_BINS = 8


class Editor(ABC):
    """Three-stage editing contract; implementations must be deterministic."""

    stride: int = 8

    @abstractmethod
    def extract(self, image: np.ndarray, view_index: int) -> FeatureGrid:
        """Image to per-cell features."""

    @abstractmethod
    def transform(self, grids: dict, spec: EditSpec) -> dict:
        """Edit feature grids; couples views via attention when given several.

        grids maps view index to FeatureGrid; the same indices come back.
        """

    @abstractmethod
    def decode(self, grid: FeatureGrid, image: np.ndarray, view_index: int) -> np.ndarray:
        """Feature grid back to an image, conditioned on the source view."""


def _bilinear_upsample(cells: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    """Upsample per-cell values from cell centers to pixel centers.

    Edge cells extend outward (clamped coordinates). Zero cells give exact
    zeros: every output is a weighted sum of cell values.
    """
    ch, cw = cells.shape[0], cells.shape[1]

    def axis_weights(n_pix, n_cells):
        f = (np.arange(n_pix) + 0.5) / stride - 0.5
        f = np.clip(f, 0.0, n_cells - 1.0)
        i0 = np.minimum(f.astype(np.int64), max(n_cells - 2, 0))
        frac = f - i0
        return i0, frac

    r0, fr = axis_weights(height, ch)
    c0, fc = axis_weights(width, cw)
    r1 = np.minimum(r0 + 1, ch - 1)
    c1 = np.minimum(c0 + 1, cw - 1)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = cells[r0][:, c0] * (1 - fc) + cells[r0][:, c1] * fc
    bot = cells[r1][:, c0] * (1 - fc) + cells[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


class MockEditor(Editor):
    """Deterministic editor driven by EditSpec kinds.

    Descriptors: per-cell patch statistics (mean/std color, gradient
    means, an orientation histogram), unit-normalized then scaled by
    attention_gain so attention logits are content-dominated. Payload:
    residual color transform produced by the edit rule, then homogenized
    across views by repeated attention stages (default 4), emulating the
    structure of iterative denoising.

    recolor-by-world-position needs scene context (cameras plus per-view
    depth images) to unproject cell centers; bind it with set_scene_context.
    """

    def __init__(self, cameras: Optional[Sequence[Camera]] = None,
                 depths: Optional[Sequence[np.ndarray]] = None,
                 stride: int = 8, stages: int = 4, attention_gain: float = 10.0):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if stages < 1:
            raise ValueError("stages must be >= 1")
        self.stride = stride
        self.stages = stages
        self.attention_gain = attention_gain
        self._cameras = list(cameras) if cameras is not None else None
        self._depths = list(depths) if depths is not None else None

    def set_scene_context(self, cameras: Sequence[Camera], depths: Sequence[np.ndarray]) -> None:
        if len(cameras) != len(depths):
            raise ValueError("cameras and depths must align")
        self._cameras = list(cameras)
        self._depths = list(depths)

    # -- extract ----------------------------------------------------------

    def extract(self, image: np.ndarray, view_index: int) -> FeatureGrid:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
        h, w, _ = img.shape
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"image size {h}x{w} not divisible by stride {s}")
        ch, cw = h // s, w // s

        patches = img.reshape(ch, s, cw, s, 3)
        mean_rgb = patches.mean(axis=(1, 3))
        std_rgb = patches.std(axis=(1, 3))

        lum = img.mean(axis=2)
        gy, gx = np.gradient(lum)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # (-pi, pi]
        bins = np.clip(((ang + np.pi) / (2 * np.pi) * _HIST_BINS).astype(np.int64),
                       0, _HIST_BINS - 1)
        cell_idx = (np.arange(h)[:, None] // s) * cw + (np.arange(w)[None, :] // s)
        flat_idx = (cell_idx * _HIST_BINS + bins).reshape(-1)
        counts = np.bincount(flat_idx, weights=mag.reshape(-1), minlength=ch * cw * _HIST_BINS)
        hist = counts.reshape(ch, cw, _HIST_BINS) / (s * s)

        gx_abs = np.abs(gx).reshape(ch, s, cw, s).mean(axis=(1, 3))
        gy_abs = np.abs(gy).reshape(ch, s, cw, s).mean(axis=(1, 3))

        desc = np.concatenate(
            [mean_rgb, std_rgb, gx_abs[..., None], gy_abs[..., None], hist], axis=2)
        norms = np.linalg.norm(desc, axis=2, keepdims=True)
        desc = np.where(norms > 1e-12, desc / np.where(norms > 0, norms, 1.0), 0.0)
        desc *= self.attention_gain

        data = np.zeros((ch, cw, _DIM))
        data[:, :, :DESCRIPTOR_DIM] = desc
        return FeatureGrid(data, s)

    # -- transform --------------------------------------------------------

    def _payload_target(self, grid: FeatureGrid, spec: EditSpec, view_index: int) -> np.ndarray:
        ch, cw = grid.cells_h, grid.cells_w
        strength = float(spec.param("strength"))
        target = np.zeros((ch, cw, PAYLOAD_DIM))
        if spec.kind == "style-tint":
            gain = np.asarray(spec.param("gain"), dtype=np.float64).reshape(3)
            bias = np.asarray(spec.param("bias"), dtype=np.float64).reshape(3)
            target[:, :, 0:3] = (gain - 1.0) * strength
            target[:, :, 3:6] = bias * strength
        elif spec.kind == "per-view-random":
            mag = float(spec.param("magnitude")) * strength
            rng = np.random.default_rng([spec.seed, 7919, view_index])
            draw = rng.uniform(-1.0, 1.0, size=(ch, cw, PAYLOAD_DIM)) * mag
            draw[:, :, 0:3] *= 0.5  # gain channel multiplies the image
            target[:] = draw
        elif spec.kind == "recolor-by-world-position":
            if self._cameras is None or self._depths is None:
                raise ValueError("recolor-by-world-position needs scene context "
                                 "(set_scene_context with cameras and depths)")
            camera = self._cameras[view_index]
            depth = np.asarray(self._depths[view_index])[:, :, 0]
            center = np.asarray(spec.param("center"), dtype=np.float64).reshape(3)
            radius = float(spec.param("radius"))
            gain = np.asarray(spec.param("gain"), dtype=np.float64).reshape(3)
            bias = np.asarray(spec.param("bias"), dtype=np.float64).reshape(3)

            s = grid.stride
            intr = camera.intrinsics
            px = np.minimum(((np.arange(cw) + 0.5) * s).astype(np.int64), intr.width - 1)
            py = np.minimum(((np.arange(ch) + 0.5) * s).astype(np.int64), intr.height - 1)
            z = depth[np.ix_(py, px)]
            xs = (px + 0.5 - intr.cx) / intr.fx
            ys = (py + 0.5 - intr.cy) / intr.fy
            cam_pts = np.stack([z * xs[None, :], z * ys[:, None], z], axis=-1)
            world = (cam_pts - camera.translation) @ camera.rotation
            dist = np.linalg.norm(world - center, axis=2)
            falloff = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0) * strength
            target[:, :, 0:3] = falloff[..., None] * (gain - 1.0)
            target[:, :, 3:6] = falloff[..., None] * bias
        return target

    def transform(self, grids: dict, spec: EditSpec) -> dict:
        order = sorted(grids)
        out = {t: grids[t].copy() for t in order}
        for t in order:
            out[t].data[:, :, DESCRIPTOR_DIM:] += self._payload_target(out[t], spec, t)
        # homogenize across views (self-attention when only one grid)
        for _ in range(self.stages - 1):
            grid_list = [out[t] for t in order]
            mixed = [st_attention(grid_list, grid_list, grid_list, i)
                     for i in range(len(order))]
            for t, g in zip(order, mixed):
                out[t] = g
        return out

    # -- decode -----------------------------------------------------------

    def decode(self, grid: FeatureGrid, image: np.ndarray, view_index: int) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w, _ = img.shape
        payload = _bilinear_upsample(grid.data[:, :, DESCRIPTOR_DIM:], grid.stride, h, w)
        return img + payload[:, :, 0:3] * img + payload[:, :, 3:6]


class IdentityEditor(MockEditor):
    """No-op editor: payload stays zero, so decode returns the input image."""

    def transform(self, grids: dict, spec: EditSpec) -> dict:
        return {t: g.copy() for t, g in grids.items()}
