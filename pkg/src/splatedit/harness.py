"""Synthetic scenes, consistency metrics, and paired method comparison.

Scenes are generated rather than captured: every layout places separated
Gaussians inside a documented extent, builds an inward-looking camera orbit,
and shuffles the camera order (downstream code must sort, which exercises
the trajectory-ordering path). run_experiment runs each requested editing
method end-to-end against shared, seed-paired references and writes a
machine-readable summary per method.
"""

from __future__ import annotations

import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .editors import MockEditor
from .field import GaussianMixture, load_ply
from .geometry import Camera, Intrinsics, forward_angle, sort_cameras
from .images import psnr, save_png
from .mveditor import (
    EditSpec,
    ViewSequence,
    edit_sequence,
    edit_views_independently,
)
from .fitter import FitConfig, fit, idu_baseline
from .renderer import RenderConfig, render_depth, splat_render

__all__ = [
    "SceneSpec",
    "ExperimentResult",
    "generate_scene",
    "reprojection_consistency",
    "run_experiment",
    "run_experiment_views",
    "METHODS",
]

LAYOUTS = ("orbit-sphere", "box-grid", "two-cluster", "from-ply")
METHODS = ("direct", "independent", "idu")

_CLUSTER_CENTERS = np.array([[-1.2, 0.0, 0.0], [1.2, 0.0, 0.0]])
_PLACEMENT_EXTENT = 1.2  # ball radius the point layouts stay inside
_MIN_SEPARATION = 0.45
_DEPTH_AGREEMENT = 0.02  # relative depth mismatch treated as occlusion
_CONFIDENT_DEPTH = 0.95  # fraction of far below which depth counts as surface
_TARGET_SAMPLES = 200
_NEIGHBOR_VIEWS = 3


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a deterministic synthetic scene."""

    layout: str = "orbit-sphere"
    gaussian_count: int = 24
    camera_count: Optional[int] = None  # None draws from the 20..30 default range
    radius: float = 4.0
    elevation: float = 0.1  # orbit elevation angle, radians
    image_size: int = 48
    seed: int = 0
    ply_path: Optional[str] = None

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}, expected one of {LAYOUTS}")
        if self.gaussian_count < 1:
            raise ValueError("gaussian_count must be >= 1")
        if self.camera_count is not None and self.camera_count < 2:
            raise ValueError("camera_count must be >= 2")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.layout == "from-ply" and not self.ply_path:
            raise ValueError("from-ply layout requires ply_path")
        if self.layout != "from-ply" and self.radius <= _scene_extent_bound(self.layout):
            raise ValueError(
                f"radius {self.radius} must exceed the scene extent "
                f"{_scene_extent_bound(self.layout)}")

    def to_json(self) -> str:
        obj = {k: v for k, v in vars(self).items() if v is not None}
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))


@dataclass
class ExperimentResult:
    method: str
    consistency_error: float
    psnr: list
    iterations_to_target: Optional[int]
    duration_ms: float
    seed: int

    def summary_dict(self) -> dict:
        # the wall-clock field is redacted so summaries are bit-reproducible;
        # real timings live in the experiment root's timings.json
        return {
            "method": self.method,
            "consistency_error": self.consistency_error,
            "psnr": self.psnr,
            "iterations_to_target": self.iterations_to_target,
            "duration_ms": None,
            "seed": self.seed,
        }


def _scene_extent_bound(layout: str) -> float:
    if layout == "two-cluster":
        return float(np.linalg.norm(_CLUSTER_CENTERS[1])) + 0.6
    return _PLACEMENT_EXTENT


def _separated_points(rng, count: int, extent: float) -> np.ndarray:
    """Rejection-sample points in a ball, progressively relaxing separation."""
    sep = _MIN_SEPARATION
    pts = []
    for _ in range(count):
        placed = False
        while not placed:
            for _ in range(200):
                p = rng.uniform(-extent, extent, 3)
                if np.linalg.norm(p) > extent:
                    continue
                if all(np.linalg.norm(p - q) >= sep for q in pts):
                    pts.append(p)
                    placed = True
                    break
            else:
                sep *= 0.9  # too crowded at this separation, relax and retry
    return np.array(pts)


def _layout_means(spec: SceneSpec, rng) -> np.ndarray:
    n = spec.gaussian_count
    if spec.layout == "orbit-sphere":
        return _separated_points(rng, n, _PLACEMENT_EXTENT)
    if spec.layout == "box-grid":
        side = int(np.ceil(n ** (1.0 / 3.0)))
        axis = np.linspace(-0.9, 0.9, side) if side > 1 else np.zeros(1)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
        cell = axis[1] - axis[0] if side > 1 else 0.4
        return grid[:n] + rng.uniform(-0.1, 0.1, (n, 3)) * cell
    if spec.layout == "two-cluster":
        means = np.empty((n, 3))
        for i in range(n):
            center = _CLUSTER_CENTERS[i % 2]
            if i < 2:
                means[i] = center  # first member sits exactly on its center
            else:
                means[i] = center + rng.normal(0.0, 0.2, 3)
        return means
    raise AssertionError(spec.layout)


def _orbit_camera(azimuth: float, elevation: float, radius: float, size: int) -> Camera:
    center = radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.sin(elevation),
        np.cos(elevation) * np.sin(azimuth),
    ])
    fwd = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(fwd, right)
    R = np.stack([right, true_up, fwd])
    intr = Intrinsics(fx=1.1 * size, fy=1.1 * size, cx=size / 2, cy=size / 2,
                      width=size, height=size)
    return Camera(intrinsics=intr, rotation=R, translation=-R @ center)


def generate_scene(spec: SceneSpec):
    """Deterministic (mixture, cameras) from a scene recipe.

    Camera order is shuffled before returning; callers needing trajectory
    order must apply sort_cameras.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.layout == "from-ply":
        mix = load_ply(spec.ply_path)
        extent = float(np.max(np.linalg.norm(mix.means, axis=1))) if len(mix) else 0.0
        if spec.radius <= extent:
            raise ValueError(f"radius {spec.radius} must exceed scene extent {extent:.3f}")
    else:
        n = spec.gaussian_count
        means = _layout_means(spec, rng)
        scales = rng.uniform(0.04, 0.12, (n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        opacities = rng.uniform(1.0, 6.0, n)
        sh = np.zeros((n, 3, 4))
        sh[:, :, 0] = rng.uniform(0.15, 0.9, (n, 3))
        sh[:, :, 1:] = rng.uniform(-0.08, 0.08, (n, 3, 3))
        mix = GaussianMixture(opacities, means, scales, quats, sh, sh_degree=1)

    count = spec.camera_count
    if count is None:
        count = int(rng.integers(20, 31))
    azimuths = 2.0 * np.pi * np.arange(count) / count
    azimuths = azimuths + rng.uniform(-0.15, 0.15, count) * (2.0 * np.pi / count)
    cameras = [_orbit_camera(az, spec.elevation, spec.radius, spec.image_size)
               for az in azimuths]
    order = rng.permutation(count)
    return mix, [cameras[i] for i in order]


def _bilinear(img: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample at continuous pixel coords (pixel centers at +0.5), edge-clamped."""
    h, w = img.shape[0], img.shape[1]
    gx = min(max(x - 0.5, 0.0), w - 1.0)
    gy = min(max(y - 0.5, 0.0), h - 1.0)
    x0, y0 = int(gx), int(gy)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1 - fy) * top + fy * bot


def _neighbor_views(cameras: Sequence[Camera], t: int, count: int) -> list:
    angles = [(forward_angle(cameras[t], cameras[j]), j)
              for j in range(len(cameras)) if j != t]
    angles.sort()
    return [j for _, j in angles[:count]]


def reprojection_consistency(seq: ViewSequence, depths: Sequence[np.ndarray],
                             cameras: Optional[Sequence[Camera]] = None,
                             far: float = 50.0) -> float:
    """Mean absolute color difference at depth-transported pixel pairs.

    Pixels are sampled on a fixed stride; a sample participates when its
    depth is confident (below 0.95 * far), and a transported pair counts only
    when the target view's depth agrees within 2 percent (occlusion check).
    Depths must come from the pre-edit scene so methods are measured against
    the same geometry.
    """
    images = seq.images
    cams = list(cameras) if cameras is not None else list(seq.cameras)
    if len(images) != len(depths) or len(images) != len(cams):
        raise ValueError("views, depths, and cameras must align")
    if len(images) < 2:
        raise ValueError("need at least two views")

    total = 0.0
    count = 0
    for t, camera in enumerate(cams):
        intr = camera.intrinsics
        h, w = intr.height, intr.width
        stride = max(1, int(np.sqrt(h * w / _TARGET_SAMPLES)))
        depth_t = np.asarray(depths[t])[:, :, 0]
        neighbors = _neighbor_views(cams, t, _NEIGHBOR_VIEWS)
        Kinv_rows = np.array([
            [1.0 / intr.fx, 0.0, -intr.cx / intr.fx],
            [0.0, 1.0 / intr.fy, -intr.cy / intr.fy],
            [0.0, 0.0, 1.0],
        ])
        for r in range(stride // 2, h, stride):
            for c in range(stride // 2, w, stride):
                z = depth_t[r, c]
                if z >= _CONFIDENT_DEPTH * far:
                    continue
                uh = np.array([c + 0.5, r + 0.5, 1.0])
                x_cam = z * (Kinv_rows @ uh)
                world = (x_cam - camera.translation) @ camera.rotation
                color_t = images[t][r, c]
                for j in neighbors:
                    cam_j = cams[j]
                    xj = cam_j.rotation @ world + cam_j.translation
                    zj = xj[2]
                    if zj <= 0:
                        continue
                    uj = np.array([
                        cam_j.intrinsics.fx * xj[0] / zj + cam_j.intrinsics.cx,
                        cam_j.intrinsics.fy * xj[1] / zj + cam_j.intrinsics.cy,
                    ])
                    if not (0 <= uj[0] < cam_j.intrinsics.width
                            and 0 <= uj[1] < cam_j.intrinsics.height):
                        continue
                    zj_map = float(_bilinear(np.asarray(depths[j]), uj[0], uj[1])[0])
                    if abs(zj_map - zj) > _DEPTH_AGREEMENT * zj:
                        continue
                    color_j = _bilinear(images[j], uj[0], uj[1])
                    total += float(np.mean(np.abs(color_t - color_j)))
                    count += 1
    return total / count if count else 0.0


def _write_views(out_dir: Path, prefix: str, images: Sequence[np.ndarray]) -> None:
    for i, img in enumerate(images):
        save_png(out_dir / f"{prefix}_{i:03d}.png", np.clip(img, 0.0, 1.0))


def run_experiment(scene: SceneSpec, spec: EditSpec, methods: Sequence[str],
                   cfg: FitConfig, out_dir, editor=None):
    """Paired end-to-end comparison of editing methods on one generated scene.

    Every method starts from the same scene, and PSNR for all methods is
    measured against the same reference targets (the jointly edited
    sequence), so iterations-to-target numbers are comparable. Writes
    per-method edited_*.png, final_*.png, and summary.json; wall-clock goes
    to timings.json at the root. A method failure is recorded in errors.json
    and does not stop the remaining methods.
    """
    mix, cameras = generate_scene(scene)
    return run_experiment_views(mix, cameras, spec, methods, cfg, out_dir,
                                editor=editor)


def run_experiment_views(mix: GaussianMixture, cameras: Sequence[Camera],
                         spec: EditSpec, methods: Sequence[str],
                         cfg: FitConfig, out_dir, editor=None):
    """run_experiment on an explicit mixture and camera set.

    Cameras may arrive in any order; they are sorted internally.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}, expected one of {METHODS}")
    if len(set(methods)) != len(methods):
        raise ValueError("duplicate methods")

    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    order = sort_cameras(list(cameras))
    cameras = [cameras[i] for i in order]

    renders = [splat_render(mix, cam, cfg.render) for cam in cameras]
    depths = [render_depth(mix, cam, cfg.render) for cam in cameras]
    seq = ViewSequence(list(zip(cameras, renders)))

    if editor is None:
        editor = MockEditor(stride=8)
    if hasattr(editor, "set_scene_context"):
        editor.set_scene_context(cameras, depths)

    # shared evaluation reference: the consistent jointly-edited sequence
    reference = edit_sequence(seq, spec, editor, seed=cfg.seed)
    ref_images = reference.images

    results = []
    errors = {}
    timings = {}
    for method in methods:
        method_dir = out_root / method
        try:
            start = time.perf_counter()
            if method == "direct":
                targets = ref_images
                fitted, report = fit(mix, reference, cfg)
            elif method == "independent":
                edited = edit_views_independently(seq, spec, editor)
                targets = edited.images
                fitted, report = fit(mix, edited, cfg, eval_targets=ref_images)
            else:  # idu
                fitted, report, targets = idu_baseline(
                    mix, editor, spec, cameras, cfg, eval_targets=ref_images)
            elapsed_ms = (time.perf_counter() - start) * 1000.0

            consistency = reprojection_consistency(
                ViewSequence(list(zip(cameras, targets))), depths, cameras,
                far=cfg.render.far)
            finals = [splat_render(fitted, cam, cfg.render) for cam in cameras]
            # exact matches give infinite PSNR; cap so metrics stay finite
            final_psnr = [min(psnr(np.clip(f, 0, 1), np.clip(g, 0, 1)), 99.0)
                          for f, g in zip(finals, ref_images)]

            method_dir.mkdir(parents=True, exist_ok=True)
            _write_views(method_dir, "edited", targets)
            _write_views(method_dir, "final", finals)
            result = ExperimentResult(
                method=method,
                consistency_error=float(consistency),
                psnr=[float(v) for v in final_psnr],
                iterations_to_target=report.iterations_to_target,
                duration_ms=elapsed_ms,
                seed=cfg.seed,
            )
            (method_dir / "summary.json").write_text(
                json.dumps(result.summary_dict(), indent=2, sort_keys=True))
            timings[method] = elapsed_ms
            results.append(result)
        except Exception as exc:  # noqa: BLE001 - per-method fault isolation
            errors[method] = f"{type(exc).__name__}: {exc}"
            errors[method + "_trace"] = traceback.format_exc(limit=5)

    (out_root / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    if errors:
        (out_root / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True))
    return results
