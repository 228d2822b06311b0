"""Calibrated multi-view pinhole geometry.

Cameras store a world-to-camera rigid transform plus pinhole intrinsics.
Conventions: right-handed frames, camera z-axis looks forward (points with
positive camera-frame z are in front), pixel coordinates are (x, y) with x
along image width.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Intrinsics",
    "Camera",
    "EpipolarLine",
    "CoincidentCamerasError",
    "project",
    "project_many",
    "fundamental_matrix",
    "epipolar_line",
    "point_line_distance",
    "sort_cameras",
    "nearest_key_views",
    "forward_angle",
    "cameras_to_json",
    "cameras_from_json",
    "save_cameras",
    "load_cameras",
]

_ORTHO_TOL = 1e-9
_MIN_BASELINE = 1e-9


class CoincidentCamerasError(ValueError):
    """Raised when epipolar geometry is requested for cameras with no baseline."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Camera:
    """World-to-camera pose plus intrinsics.

    ``rotation`` maps world coordinates into the camera frame; ``translation``
    is the world origin expressed in the camera frame, so a world point X maps
    to ``rotation @ X + translation``.
    """

    intrinsics: Intrinsics
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        err = np.linalg.norm(R @ R.T - np.eye(3))
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (||RR^T - I|| = {err:.3e})")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must have determinant +1 (no reflections)")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Unit camera z-axis expressed in world coordinates."""
        f = self.rotation[2, :]
        return f / np.linalg.norm(f)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def project(camera: Camera, point: Sequence[float]) -> Optional[np.ndarray]:
    """Pinhole-project one world point; ``None`` when the point is not in front.

    The behind-camera case (camera-frame depth <= 0) is a signal, not an
    error: callers iterate over arbitrary scene points.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    pc = camera.rotation @ p + camera.translation
    if pc[2] <= 0.0:
        return None
    K = camera.intrinsics
    return np.array([K.fx * pc[0] / pc[2] + K.cx, K.fy * pc[1] / pc[2] + K.cy])


def project_many(camera: Camera, points: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,), in_front (N,) bool). Pixel values for
    points at or behind the camera plane are NaN.
    """
    pc = camera.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    in_front = z > 0.0
    K = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.where(in_front, K.fx * pc[:, 0] / z + K.cx, np.nan)
        py = np.where(in_front, K.fy * pc[:, 1] / z + K.cy, np.nan)
    return np.stack([px, py], axis=1), z, in_front


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """Fundamental matrix F mapping pixels of ``cam_a`` to epipolar lines in ``cam_b``.

    Built analytically from the known calibration and relative pose:
    F = K_b^-T [t]_x R K_a^-1 with (R, t) the a-to-b relative motion. For a
    shared world point projecting to u in a and v in b, v^T F u = 0.
    """
    baseline = np.linalg.norm(cam_a.center - cam_b.center)
    if baseline <= _MIN_BASELINE:
        raise CoincidentCamerasError(
            f"cameras are coincident (baseline {baseline:.3e}); epipolar geometry undefined"
        )
    R_rel = cam_b.rotation @ cam_a.rotation.T
    t_rel = cam_b.translation - R_rel @ cam_a.translation
    E = _cross_matrix(t_rel) @ R_rel
    Ka_inv = np.linalg.inv(cam_a.intrinsics.matrix)
    Kb_inv = np.linalg.inv(cam_b.intrinsics.matrix)
    return Kb_inv.T @ E @ Ka_inv


@dataclass(frozen=True)
class EpipolarLine:
    """Image line a*x + b*y + c = 0, stored with (a, b) unit-normalized."""

    a: float
    b: float
    c: float


def epipolar_line(F: np.ndarray, u: Sequence[float]) -> Optional[EpipolarLine]:
    """Epipolar line F @ u in the target view; ``None`` when u is the epipole.

    The degenerate case (u in the kernel of F, so the line coefficients
    vanish) is a signal rather than an exception, mirroring `project`.
    """
    uh = np.array([u[0], u[1], 1.0], dtype=np.float64)
    l = np.asarray(F, dtype=np.float64) @ uh
    norm_ab = math.hypot(l[0], l[1])
    # Scale-aware degeneracy test: vanishing (a, b) relative to F and u.
    scale = np.abs(F).max() * max(1.0, np.abs(uh).max())
    if norm_ab <= 1e-12 * max(scale, 1e-300):
        return None
    return EpipolarLine(l[0] / norm_ab, l[1] / norm_ab, l[2] / norm_ab)


def point_line_distance(line: EpipolarLine, v: Sequence[float]) -> float:
    """Unsigned pixel distance from point v to a normalized line."""
    return abs(line.a * v[0] + line.b * v[1] + line.c)


def forward_angle(cam_a: Camera, cam_b: Camera) -> float:
    """Angle in radians between the two cameras' forward vectors."""
    d = float(np.dot(cam_a.forward, cam_b.forward))
    return math.acos(min(1.0, max(-1.0, d)))


def sort_cameras(cameras: Sequence[Camera]) -> list[int]:
    """Order snapshots into a smooth trajectory.

    The reference is the camera whose center has the largest world-frame x
    value; the rest follow by ascending forward-vector angle to the
    reference. Ties keep the original index order, so runs are deterministic.
    """
    if len(cameras) == 0:
        raise ValueError("need at least one camera")
    centers_x = [cam.center[0] for cam in cameras]
    ref = int(np.argmax(centers_x))  # argmax takes the first of equal values
    angles = [forward_angle(cameras[ref], cam) for cam in cameras]
    rest = sorted((i for i in range(len(cameras)) if i != ref), key=lambda i: (angles[i], i))
    return [ref] + rest


def nearest_key_views(
    t: int, keys: Sequence[int], cameras: Sequence[Camera]
) -> tuple[int, int]:
    """The two key views angularly closest to view t, nearest first.

    A single-element key set is returned twice so callers can always blend
    two sources. Ties break by original index.
    """
    ks = sorted(set(int(k) for k in keys))
    if not ks:
        raise ValueError("key set is empty")
    if t in ks:
        raise ValueError(f"view {t} is itself a key view")
    ranked = sorted(ks, key=lambda k: (forward_angle(cameras[t], cameras[k]), k))
    if len(ranked) == 1:
        return ranked[0], ranked[0]
    return ranked[0], ranked[1]


def cameras_to_json(cameras: Sequence[Camera]) -> str:
    """Serialize cameras to the interchange JSON document (a top-level array)."""
    doc = []
    for cam in cameras:
        K = cam.intrinsics
        doc.append(
            {
                "fx": K.fx,
                "fy": K.fy,
                "cx": K.cx,
                "cy": K.cy,
                "width": K.width,
                "height": K.height,
                "rotation": [float(x) for x in cam.rotation.reshape(9)],
                "translation": [float(x) for x in cam.translation],
            }
        )
    return json.dumps(doc, indent=2)


def cameras_from_json(text: str) -> list[Camera]:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValueError("camera document must be a JSON array")
    cameras = []
    for entry in doc:
        intr = Intrinsics(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=int(entry["width"]),
            height=int(entry["height"]),
        )
        R = np.array(entry["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.array(entry["translation"], dtype=np.float64)
        cameras.append(Camera(intrinsics=intr, rotation=R, translation=t))
    return cameras


def save_cameras(path: str | Path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(cameras_to_json(cameras))


def load_cameras(path: str | Path) -> list[Camera]:
    return cameras_from_json(Path(path).read_text())
