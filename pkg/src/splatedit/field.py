"""Gaussian-mixture radiance field: pointwise opacity/color evaluation.

The mixture stores covariance in factored form (per-axis scales plus a unit
quaternion) so optimizer steps can never leave the positive-definite cone.
Directional color uses a real spherical-harmonics basis up to degree 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "MAX_SH_DEGREE",
    "UndefinedColorError",
    "sh_basis_size",
    "sh_basis",
    "quat_to_rotation",
    "rotation_to_quat",
    "GaussianPrimitive",
    "GaussianMixture",
    "covariance",
    "gaussian_eval",
    "sh_color",
    "field_opacity",
    "field_color",
    "save_ply",
    "load_ply",
]

MAX_SH_DEGREE = 2

_QUAT_TOL = 1e-9

# Real spherical harmonics, positive (no Condon-Shortley) convention,
# ordered (l, m) with m = -l..l, so index = l^2 + l + m.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)


class UndefinedColorError(ValueError):
    """Color queried at a point where the weighted opacity vanishes."""


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(directions: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis for unit directions.

    directions: (..., 3) unit vectors. Returns (..., (degree+1)^2).
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"sh degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_basis_size(degree),), dtype=np.float64)
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = _C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = _C1 * x
    if degree >= 2:
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (3.0 * z * z - 1.0)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (x * x - y * y)
    return out


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized internally, so near-unit inputs are safe.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian: opacity, mean, factored covariance, SH color."""

    opacity: float
    mean: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    sh_coeffs: np.ndarray  # (3, (L+1)^2), channel-major

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        quat = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        sh = np.atleast_2d(np.asarray(self.sh_coeffs, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "orientation", quat)
        object.__setattr__(self, "sh_coeffs", sh)
        if self.opacity < 0:
            raise ValueError(f"opacity must be >= 0, got {self.opacity}")
        if np.any(scale <= 0):
            raise ValueError(f"scale components must be positive, got {scale}")
        if abs(np.linalg.norm(quat) - 1.0) > _QUAT_TOL:
            raise ValueError(f"orientation quaternion not unit norm: {quat}")
        if sh.shape[0] != 3 or sh.shape[1] not in (1, 4, 9):
            raise ValueError(f"sh_coeffs must be (3, (L+1)^2), got {sh.shape}")
        if not np.all(np.isfinite(sh)):
            raise ValueError("sh_coeffs must be finite")

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1


class GaussianMixture:
    """Ordered collection of Gaussians, stored struct-of-arrays.

    Arrays are the optimizer's parameter storage and may be mutated in place;
    mutation requires exclusive access. Read-only evaluation is thread-safe.
    """

    def __init__(self, opacities, means, scales, quaternions, sh_coeffs, sh_degree=None):
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(-1).copy()
        n = self.opacities.shape[0]
        self.means = np.asarray(means, dtype=np.float64).reshape(n, 3).copy()
        self.scales = np.asarray(scales, dtype=np.float64).reshape(n, 3).copy()
        self.quaternions = np.asarray(quaternions, dtype=np.float64).reshape(n, 4).copy()
        sh = np.asarray(sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[1] != 3:
            raise ValueError(f"sh_coeffs must be (N, 3, B), got {sh.shape}")
        self.sh_coeffs = sh.copy()
        basis = sh.shape[2]
        degree = int(np.sqrt(basis)) - 1
        if sh_basis_size(degree) != basis:
            raise ValueError(f"sh basis size {basis} is not a perfect square count")
        if sh_degree is not None and sh_degree != degree:
            raise ValueError(f"sh_degree {sh_degree} inconsistent with basis size {basis}")
        self.sh_degree = degree
        self.validate()

    def __len__(self) -> int:
        return self.opacities.shape[0]

    def validate(self, quat_tol: float = 1e-3) -> None:
        """Raise if any stored parameter violates its type invariant."""
        if np.any(self.opacities < 0):
            raise ValueError("negative opacity in mixture")
        if np.any(self.scales <= 0):
            raise ValueError("non-positive scale in mixture")
        norms = np.linalg.norm(self.quaternions, axis=1)
        if np.any(np.abs(norms - 1.0) > quat_tol):
            raise ValueError("non-unit quaternion in mixture")
        if not np.all(np.isfinite(self.sh_coeffs)) or not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite parameter in mixture")

    @classmethod
    def from_primitives(cls, primitives: Iterable[GaussianPrimitive]) -> "GaussianMixture":
        prims = list(primitives)
        if not prims:
            raise ValueError("mixture must contain at least one Gaussian")
        degrees = {p.sh_degree for p in prims}
        if len(degrees) != 1:
            raise ValueError(f"all primitives must share one sh degree, got {degrees}")
        return cls(
            opacities=[p.opacity for p in prims],
            means=[p.mean for p in prims],
            scales=[p.scale for p in prims],
            quaternions=[p.orientation for p in prims],
            sh_coeffs=np.stack([p.sh_coeffs for p in prims]),
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            opacity=float(self.opacities[i]),
            mean=self.means[i],
            scale=self.scales[i],
            orientation=self.quaternions[i],
            sh_coeffs=self.sh_coeffs[i],
        )

    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def copy(self) -> "GaussianMixture":
        return GaussianMixture(
            self.opacities, self.means, self.scales, self.quaternions, self.sh_coeffs
        )

    def rotations(self) -> np.ndarray:
        """(N, 3, 3) rotation matrices from the stored quaternions."""
        return quat_to_rotation(self.quaternions)

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) covariance matrices R diag(scale^2) R^T."""
        R = self.rotations()
        S2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def gaussian_values(self, points: np.ndarray) -> np.ndarray:
        """g_i(x) for (M, 3) points against every Gaussian; returns (M, N)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        R = self.rotations()  # (N, 3, 3)
        d = pts[:, None, :] - self.means[None, :, :]  # (M, N, 3)
        local = np.einsum("nab,mna->mnb", R, d)  # R^T d
        q = np.sum((local / self.scales[None, :, :]) ** 2, axis=-1)
        return np.exp(-0.5 * q)


def covariance(prim: GaussianPrimitive) -> np.ndarray:
    """Covariance Sigma = R diag(scale^2) R^T of one primitive."""
    R = quat_to_rotation(prim.orientation)
    return (R * prim.scale**2) @ R.T


def gaussian_eval(prim: GaussianPrimitive, x: Sequence[float]) -> float:
    """Unnormalized Gaussian exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    p = np.asarray(x, dtype=np.float64).reshape(3)
    R = quat_to_rotation(prim.orientation)
    local = R.T @ (p - prim.mean)
    q = float(np.sum((local / prim.scale) ** 2))
    return float(np.exp(-0.5 * q))


def sh_color(prim: GaussianPrimitive, nu: Sequence[float]) -> np.ndarray:
    """Directional RGB of one primitive for a unit view direction."""
    d = np.asarray(nu, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError(f"view direction must be unit length, |nu| = {np.linalg.norm(d)}")
    basis = sh_basis(d, prim.sh_degree)
    return prim.sh_coeffs @ basis


def field_opacity(mix: GaussianMixture, x: Sequence[float]) -> float:
    """Total opacity sum_i sigma_i g_i(x) at a world point."""
    g = mix.gaussian_values(np.asarray(x, dtype=np.float64).reshape(1, 3))[0]
    return float(np.dot(mix.opacities, g))


def field_color(mix: GaussianMixture, x: Sequence[float], nu: Sequence[float]) -> np.ndarray:
    """Opacity-weighted RGB at a world point for a unit view direction.

    Raises UndefinedColorError where the weighted opacity is zero; the ratio
    in the mixture color definition has no value there.
    """
    d = np.asarray(nu, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("view direction must be unit length")
    g = mix.gaussian_values(np.asarray(x, dtype=np.float64).reshape(1, 3))[0]
    w = mix.opacities * g
    total = w.sum()
    if total <= 0.0:
        raise UndefinedColorError(f"zero weighted opacity at {x}")
    basis = sh_basis(d, mix.sh_degree)  # (B,)
    colors = mix.sh_coeffs @ basis  # (N, 3)
    return (w @ colors) / total


# ---------------------------------------------------------------------------
# PLY serialization: binary little-endian, one vertex per Gaussian, float32.
# A JSON sidecar at <path>.json records the SH degree.

def _ply_property_names(degree: int) -> list[str]:
    names = ["x", "y", "z", "opacity",
             "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    rest = 3 * (sh_basis_size(degree) - 1)
    names += [f"f_rest_{i}" for i in range(rest)]
    return names


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_ply(path: str | Path, mix: GaussianMixture) -> None:
    """Write the mixture as binary little-endian PLY plus a JSON sidecar."""
    path = Path(path)
    names = _ply_property_names(mix.sh_degree)
    n = len(mix)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    basis = sh_basis_size(mix.sh_degree)
    cols = [mix.means[:, 0], mix.means[:, 1], mix.means[:, 2], mix.opacities,
            mix.scales[:, 0], mix.scales[:, 1], mix.scales[:, 2],
            mix.quaternions[:, 0], mix.quaternions[:, 1],
            mix.quaternions[:, 2], mix.quaternions[:, 3],
            mix.sh_coeffs[:, 0, 0], mix.sh_coeffs[:, 1, 0], mix.sh_coeffs[:, 2, 0]]
    # f_rest is channel-major: all higher-order red coeffs, then green, then blue.
    for ch in range(3):
        for b in range(1, basis):
            cols.append(mix.sh_coeffs[:, ch, b])
    data = np.stack(cols, axis=1).astype("<f4")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
    sidecar_path(path).write_text(json.dumps({"sh_degree": mix.sh_degree}))


def load_ply(path: str | Path) -> GaussianMixture:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header_lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]

    n = None
    names: list[str] = []
    fmt_ok = False
    for line in header_lines:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            fmt_ok = True
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise ValueError(f"unsupported property type {parts[1]}")
            names.append(parts[2])
    if not fmt_ok or n is None:
        raise ValueError(f"{path}: expected binary little-endian PLY with a vertex element")

    expected = n * len(names) * 4
    if len(body) < expected:
        raise ValueError(f"{path}: truncated PLY body ({len(body)} < {expected} bytes)")
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(n, len(names)).astype(np.float64)
    col = {name: data[:, i] for i, name in enumerate(names)}

    rest = [name for name in names if name.startswith("f_rest_")]
    basis = 1 + len(rest) // 3
    degree = int(np.sqrt(basis)) - 1
    side = sidecar_path(path)
    if side.exists():
        degree = int(json.loads(side.read_text())["sh_degree"])
        if sh_basis_size(degree) != basis:
            raise ValueError(f"{path}: sidecar degree {degree} inconsistent with f_rest count")

    sh = np.zeros((n, 3, basis))
    for ch, key in enumerate(["f_dc_0", "f_dc_1", "f_dc_2"]):
        sh[:, ch, 0] = col[key]
    for ch in range(3):
        for b in range(1, basis):
            sh[:, ch, b] = col[f"f_rest_{ch * (basis - 1) + (b - 1)}"]

    return GaussianMixture(
        opacities=col["opacity"],
        means=np.stack([col["x"], col["y"], col["z"]], axis=1),
        scales=np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1),
        quaternions=np.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], axis=1),
        sh_coeffs=sh,
    )
