"""Image formation from a Gaussian mixture.

Two render paths share one compositing model:

* raymarch_render: numerically integrates the emission-absorption equation
  along each pixel ray (midpoint samples, running-product transmittance).
  Slow, used as the semantic reference.
* splat_render: projects each Gaussian to a 2D footprint (local affine
  perspective Jacobian applied to the camera-frame covariance) and
  alpha-composites front to back in camera-depth order. The footprint
  carries a per-pixel line-integral amplitude sqrt(2*pi / (d^T Sigma^-1 d))
  so a splat's alpha matches the ray integral of the same Gaussian; the two
  paths agree to quadrature/linearization error.

render_with_gradients implements the exact adjoint of splat_render by hand;
it is validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import GaussianMixture, quat_to_rotation, sh_basis
from .geometry import Camera

__all__ = [
    "RenderConfig",
    "raymarch_render",
    "splat_render",
    "render_depth",
    "render_mask",
    "render_coverage",
    "render_with_gradients",
]

_ALPHA_MAX = 0.999  # keeps transmittance positive and gradients finite
_Z_EPS = 1e-6
_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class RenderConfig:
    near: float = 0.1
    far: float = 50.0
    steps: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    cutoff: float = 3.0  # Mahalanobis truncation radius of the 2D footprint

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got ({self.near}, {self.far})")
        if self.steps < 2:
            raise ValueError(f"steps must be >= 2, got {self.steps}")
        if self.cutoff <= 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        bg.flags.writeable = False
        object.__setattr__(self, "background", bg)


def _pixel_dirs_cam(camera: Camera) -> np.ndarray:
    """Unit camera-frame direction through every pixel center, (H*W, 3)."""
    intr = camera.intrinsics
    cols = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    rows = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    xx, yy = np.meshgrid(cols, rows)
    d = np.stack([xx, yy, np.ones_like(xx)], axis=-1).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _pixel_centers(camera: Camera) -> np.ndarray:
    """Pixel-center coordinates (x, y) for every pixel, (H*W, 2)."""
    intr = camera.intrinsics
    xs = np.arange(intr.width) + 0.5
    ys = np.arange(intr.height) + 0.5
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx, yy], axis=-1).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Reference ray-marching integrator

def raymarch_render(mix: GaussianMixture, camera: Camera, cfg: RenderConfig) -> np.ndarray:
    """Midpoint-quadrature integration of the emission-absorption equation.

    Per sample: alpha_k = 1 - exp(-sigma_k dt), transmittance is the running
    product of exp(-sigma_j dt); residual transmittance takes the background.
    The per-pixel weights (samples + residual) sum to one exactly.
    """
    if len(mix) == 0:
        raise ValueError("mixture must be non-empty")
    intr = camera.intrinsics
    h, w = intr.height, intr.width
    n_pix = h * w
    steps = cfg.steps
    dt = (cfg.far - cfg.near) / steps
    t_mid = cfg.near + (np.arange(steps) + 0.5) * dt

    origin = camera.center
    dirs_cam = _pixel_dirs_cam(camera)
    dirs = dirs_cam @ camera.rotation  # R^T d, rows are world unit dirs

    R = mix.rotations()
    inv_s = 1.0 / mix.scales
    # Sigma^-1 = B B^T with B = R diag(1/scale)
    B = R * inv_s[:, None, :]
    u_vec = np.einsum("nab,na->nb", B, origin - mix.means)  # B^T (o - mu)
    c_coef = np.sum(u_vec**2, axis=1)

    img = np.empty((n_pix, 3))
    chunk = max(64, (1 << 21) // steps)
    for lo in range(0, n_pix, chunk):
        d = dirs[lo:lo + chunk]
        m = d.shape[0]
        basis = sh_basis(d, mix.sh_degree)  # (m, B)
        sigma = np.zeros((m, steps))
        emission = np.zeros((m, steps, 3))
        for i in range(len(mix)):
            e = d @ B[i]  # (m, 3)
            a = np.sum(e * e, axis=1)
            b = 2.0 * (e @ u_vec[i])
            # skip rays whose closest approach is far outside the support,
            # and restrict samples to the t-window where the exponent < 45
            q_min = c_coef[i] - 0.25 * b * b / a
            rows = np.flatnonzero(q_min < 45.0)
            if rows.size == 0:
                continue
            t_star = -0.5 * b[rows] / a[rows]
            half = np.sqrt((45.0 - q_min[rows]) / a[rows])
            k0 = max(0, int(np.floor((np.min(t_star - half) - cfg.near) / dt)))
            k1 = min(steps, int(np.ceil((np.max(t_star + half) - cfg.near) / dt)) + 1)
            if k0 >= k1:
                continue
            t_win = t_mid[k0:k1]
            q = a[rows, None] * t_win**2 + b[rows, None] * t_win + c_coef[i]
            g = mix.opacities[i] * np.exp(-0.5 * q)  # (rows, window)
            sigma[rows, k0:k1] += g
            color_i = basis[rows] @ mix.sh_coeffs[i].T  # (rows, 3)
            emission[rows, k0:k1] += g[:, :, None] * color_i[:, None, :]

        alpha = -np.expm1(-sigma * dt)
        cum = np.cumsum(sigma, axis=1) - sigma  # exclusive
        trans = np.exp(-dt * cum)
        w_k = alpha * trans  # (m, steps)
        # emission already carries a sigma factor; the mixture color is
        # emission / sigma, guarded where sigma vanishes.
        ratio = np.divide(w_k, sigma, out=np.zeros_like(w_k), where=sigma > 0)
        img[lo:lo + m] = np.einsum("mk,mkc->mc", ratio, emission)
        t_end = np.exp(-dt * np.sum(sigma, axis=1))
        img[lo:lo + m] += t_end[:, None] * cfg.background

    return img.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# Fast path: projected-footprint compositing

class _Fragments:
    """Flat per-(pixel, Gaussian) records produced by footprint rasterization."""

    def __init__(self, n_pix):
        self.pix = np.empty(0, dtype=np.int64)
        self.gauss = np.empty(0, dtype=np.int64)  # index into the culled set
        self.delta = np.empty((0, 2))
        self.mdist = np.empty(0)
        self.n_pix = n_pix

    @classmethod
    def collect(cls, parts):
        out = cls(parts[0][3] if parts else 0)
        if parts:
            out.pix = np.concatenate([p[0] for p in parts])
            out.gauss = np.concatenate([p[1] for p in parts])
            out.delta = np.concatenate([p[2] for p in parts])
        return out


def _project_gaussians(mix: GaussianMixture, camera: Camera):
    """Camera-frame projection of every Gaussian; returns the kept subset.

    kept fields: orig (indices into mix), mu_c, p (pixel), J, Sigma_c, V
    (2x2 footprint inverse), Pc (3x3 camera-frame precision), z.
    """
    W = camera.rotation
    mu_c = mix.means @ W.T + camera.translation
    keep = mu_c[:, 2] > _Z_EPS

    R = mix.rotations()
    M = R * mix.scales[:, None, :]  # R diag(s)
    Sigma = np.einsum("nij,nkj->nik", M, M)
    Sigma_c = np.einsum("ij,njk,lk->nil", W, Sigma, W)

    intr = camera.intrinsics
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        J = np.zeros((len(mix), 2, 3))
        J[:, 0, 0] = intr.fx / z
        J[:, 0, 2] = -intr.fx * x / z**2
        J[:, 1, 1] = intr.fy / z
        J[:, 1, 2] = -intr.fy * y / z**2
        p = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)

    Sigma_p = np.einsum("nij,njk,nlk->nil", J, Sigma_c, J)
    det = Sigma_p[:, 0, 0] * Sigma_p[:, 1, 1] - Sigma_p[:, 0, 1] * Sigma_p[:, 1, 0]
    keep &= det > 1e-24
    keep &= Sigma_p[:, 0, 0] > 0

    idx = np.flatnonzero(keep)
    Sigma_p = Sigma_p[idx]
    det = det[idx]
    V = np.empty_like(Sigma_p)
    V[:, 0, 0] = Sigma_p[:, 1, 1] / det
    V[:, 1, 1] = Sigma_p[:, 0, 0] / det
    V[:, 0, 1] = -Sigma_p[:, 0, 1] / det
    V[:, 1, 0] = -Sigma_p[:, 1, 0] / det

    inv_s = 1.0 / mix.scales[idx]
    Bc = np.einsum("ij,njk->nik", W, R[idx]) * inv_s[:, None, :]
    Pc = np.einsum("nij,nkj->nik", Bc, Bc)

    return {
        "orig": idx,
        "mu_c": mu_c[idx],
        "p": p[idx],
        "J": J[idx],
        "Sigma": Sigma[idx],
        "Sigma_c": Sigma_c[idx],
        "Sigma_p": Sigma_p,
        "V": V,
        "Pc": Pc,
        "M": M[idx],
        "R": R[idx],
        "z": z[idx],
    }


def _rasterize(proj, camera: Camera, cutoff: float) -> _Fragments:
    intr = camera.intrinsics
    h, w = intr.height, intr.width
    n_pix = h * w
    cut2 = cutoff * cutoff

    parts = []
    n_kept = proj["orig"].shape[0]
    for k in range(n_kept):
        px, py = proj["p"][k]
        sp = proj["Sigma_p"][k]
        rx = cutoff * np.sqrt(sp[0, 0])
        ry = cutoff * np.sqrt(sp[1, 1])
        c0 = max(0, int(np.ceil(px - rx - 0.5)))
        c1 = min(w - 1, int(np.floor(px + rx - 0.5)))
        r0 = max(0, int(np.ceil(py - ry - 0.5)))
        r1 = min(h - 1, int(np.floor(py + ry - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        cols = np.arange(c0, c1 + 1) + 0.5 - px
        rows = np.arange(r0, r1 + 1) + 0.5 - py
        dx, dy = np.meshgrid(cols, rows)
        V = proj["V"][k]
        m = V[0, 0] * dx**2 + 2.0 * V[0, 1] * dx * dy + V[1, 1] * dy**2
        inside = m <= cut2
        if not inside.any():
            continue
        rr, cc = np.nonzero(inside)
        pix = (rr + r0) * w + (cc + c0)
        delta = np.stack([dx[inside], dy[inside]], axis=1)
        parts.append((pix, np.full(pix.shape, k, dtype=np.int64), delta, n_pix))

    frags = _Fragments.collect(parts)
    frags.n_pix = n_pix
    return frags


def _splat_forward(mix: GaussianMixture, camera: Camera, cfg: RenderConfig):
    """Shared forward pass. Returns (state dict) with the composited weights.

    Fragment arrays are sorted by (pixel, depth rank); `state` carries every
    intermediate the backward pass needs.
    """
    if len(mix) == 0:
        raise ValueError("mixture must be non-empty")
    proj = _project_gaussians(mix, camera)
    frags = _rasterize(proj, camera, cfg.cutoff)
    n_pix = frags.n_pix

    state = {"proj": proj, "camera": camera, "cfg": cfg, "n_pix": n_pix, "mix": mix}
    if frags.pix.size == 0:
        state["empty"] = True
        return state
    state["empty"] = False

    # depth order: camera z ascending, ties by original index
    order = np.lexsort((proj["orig"], proj["z"]))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)

    sort_idx = np.lexsort((rank[frags.gauss], frags.pix))
    pix = frags.pix[sort_idx]
    gs = frags.gauss[sort_idx]
    delta = frags.delta[sort_idx]

    V = proj["V"][gs]
    y_vec = np.einsum("fij,fj->fi", V, delta)
    mdist = np.sum(y_vec * delta, axis=1)
    gauss2d = np.exp(-0.5 * mdist)

    dirs_cam = _pixel_dirs_cam(camera)
    d_f = dirs_cam[pix]  # (F, 3) unit camera-frame directions
    a_f = np.einsum("fi,fij,fj->f", d_f, proj["Pc"][gs], d_f)
    amp = np.sqrt(_TWO_PI / a_f)

    sigma = mix.opacities[proj["orig"]][gs]
    tau = sigma * amp * gauss2d
    alpha = np.minimum(_ALPHA_MAX, -np.expm1(-tau))

    # segmented exclusive product of (1 - alpha) over each pixel's fragments
    boundary = np.empty(pix.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = pix[1:] != pix[:-1]
    seg_first = np.flatnonzero(boundary)
    seg_id = np.cumsum(boundary) - 1
    log1m = np.log1p(-alpha)
    cum = np.cumsum(log1m)
    excl = cum - log1m
    base = excl[seg_first]
    trans = np.exp(excl - base[seg_id])
    weight = alpha * trans

    seg_last = np.append(seg_first[1:] - 1, pix.size - 1)
    t_end = np.ones(n_pix)
    t_end[pix[seg_first]] = np.exp(cum[seg_last] - base)

    state.update(
        pix=pix, gs=gs, delta=delta, y_vec=y_vec, mdist=mdist, gauss2d=gauss2d,
        d_f=d_f, a_f=a_f, amp=amp, tau=tau, alpha=alpha, trans=trans,
        weight=weight, t_end=t_end, seg_first=seg_first, seg_last=seg_last,
        seg_id=seg_id,
    )
    return state


def _composite_color(state) -> np.ndarray:
    """RGB composite of a completed forward pass."""
    cfg = state["cfg"]
    camera = state["camera"]
    mix = state["mix"]
    intr = camera.intrinsics
    n_pix = state["n_pix"]
    img = np.zeros((n_pix, 3))
    if not state["empty"]:
        proj = state["proj"]
        dirs_world = state["d_f"] @ camera.rotation
        basis = sh_basis(dirs_world, mix.sh_degree)  # (F, B)
        coeffs = mix.sh_coeffs[proj["orig"]][state["gs"]]  # (F, 3, B)
        colors = np.einsum("fcb,fb->fc", coeffs, basis)
        state["basis"] = basis
        state["colors"] = colors
        for ch in range(3):
            img[:, ch] = np.bincount(
                state["pix"], weights=state["weight"] * colors[:, ch], minlength=n_pix
            )
        img += state["t_end"][:, None] * cfg.background
    else:
        img += cfg.background
    return img.reshape(intr.height, intr.width, 3)


def splat_render(mix: GaussianMixture, camera: Camera, cfg: RenderConfig) -> np.ndarray:
    """Projected-footprint compositing in camera-depth order."""
    return _composite_color(_splat_forward(mix, camera, cfg))


def render_depth(mix: GaussianMixture, camera: Camera, cfg: RenderConfig) -> np.ndarray:
    """Expected camera-frame depth under the compositing weights.

    Normalized over the covered part so partial coverage does not drag the
    estimate toward the background; pixels with no coverage carry far.
    """
    state = _splat_forward(mix, camera, cfg)
    intr = camera.intrinsics
    n_pix = state["n_pix"]
    depth = np.full(n_pix, cfg.far)
    if not state["empty"]:
        z_f = state["proj"]["z"][state["gs"]]
        acc = np.bincount(state["pix"], weights=state["weight"] * z_f, minlength=n_pix)
        total = np.bincount(state["pix"], weights=state["weight"], minlength=n_pix)
        covered = total > 0.0
        depth[covered] = acc[covered] / total[covered]
    return depth.reshape(intr.height, intr.width, 1)


def render_mask(mix: GaussianMixture, camera: Camera, cfg: RenderConfig,
                selected: np.ndarray) -> np.ndarray:
    """Soft coverage of the selected subset: selected emit 1, others 0."""
    selected = np.asarray(selected, dtype=bool).reshape(-1)
    if selected.shape[0] != len(mix):
        raise ValueError(f"selected has length {selected.shape[0]}, mixture {len(mix)}")
    state = _splat_forward(mix, camera, cfg)
    intr = camera.intrinsics
    n_pix = state["n_pix"]
    if state["empty"]:
        return np.zeros((intr.height, intr.width, 1))
    emit = selected[state["proj"]["orig"]][state["gs"]].astype(np.float64)
    mask = np.bincount(state["pix"], weights=state["weight"] * emit, minlength=n_pix)
    return mask.reshape(intr.height, intr.width, 1)


def render_coverage(mix: GaussianMixture, camera: Camera, cfg: RenderConfig) -> np.ndarray:
    """Total coverage 1 - residual transmittance, (H, W, 1)."""
    return render_mask(mix, camera, cfg, np.ones(len(mix), dtype=bool))


def _bincount_cols(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Column-wise bincount: values (F, ...) summed per index into (n, ...)."""
    flat = values.reshape(values.shape[0], -1)
    out = np.empty((n, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(idx, weights=flat[:, j], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def _dR_dqhat(q: np.ndarray) -> np.ndarray:
    """d(rotation)/d(unit quaternion): (N, 4, 3, 3) for unit q (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    D = np.empty((q.shape[0], 4, 3, 3))
    D[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    D[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    D[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    D[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    return D


def _splat_backward(state, loss_adjoint: np.ndarray) -> dict:
    """Exact adjoint of a completed _splat_forward + _composite_color pass.

    loss_adjoint is dL/d(image). Returns per-parameter-class gradients
    shaped like the mixture's own storage.
    """
    mix = state["mix"]
    camera = state["camera"]
    intr = camera.intrinsics
    adj = np.asarray(loss_adjoint, dtype=np.float64)
    if adj.shape != (intr.height, intr.width, 3):
        raise ValueError(f"adjoint shape {adj.shape} != {(intr.height, intr.width, 3)}")

    n = len(mix)
    basis_size = mix.sh_coeffs.shape[2]
    grads = {
        "opacities": np.zeros(n),
        "means": np.zeros((n, 3)),
        "scales": np.zeros((n, 3)),
        "quaternions": np.zeros((n, 4)),
        "sh_coeffs": np.zeros((n, 3, basis_size)),
    }
    if state["empty"]:
        return grads

    proj = state["proj"]
    pix = state["pix"]
    gs = state["gs"]
    A = adj.reshape(-1, 3)  # per-pixel adjoint
    A_f = A[pix]
    colors = state["colors"]
    weight = state["weight"]
    alpha = state["alpha"]
    trans = state["trans"]
    n_kept = proj["orig"].shape[0]

    # dL/dalpha via reverse-order suffix sums within each pixel segment
    p_dot = np.sum(A_f * colors, axis=1)  # adjoint . fragment color
    v = weight * p_dot
    cumv = np.cumsum(v)
    base_v = (cumv - v)[state["seg_first"]]
    prefix_incl = cumv - base_v[state["seg_id"]]
    total = (cumv[state["seg_last"]] - base_v)[state["seg_id"]]
    suffix_excl = total - prefix_incl
    bg_dot = A @ state["cfg"].background
    suffix = suffix_excl + state["t_end"][pix] * bg_dot[pix]
    g_alpha = trans * p_dot - suffix / (1.0 - alpha)

    # color path: dL/d(sh coefficients)
    g_color = weight[:, None] * A_f  # (F, 3)
    g_sh_f = np.einsum("fc,fb->fcb", g_color, state["basis"])
    g_sh = _bincount_cols(gs, g_sh_f, n_kept)

    # alpha -> tau -> (opacity, amplitude, 2D gaussian)
    unclamped = alpha < _ALPHA_MAX
    g_tau = g_alpha * np.exp(-state["tau"]) * unclamped
    sigma_f = mix.opacities[proj["orig"]][gs]
    g_sigma_f = g_tau * state["amp"] * state["gauss2d"]
    g_amp = g_tau * sigma_f * state["gauss2d"]
    g_g2d = g_tau * sigma_f * state["amp"]
    g_m = -0.5 * state["gauss2d"] * g_g2d
    g_a = -0.5 * (state["amp"] / state["a_f"]) * g_amp

    g_opac = np.bincount(gs, weights=g_sigma_f, minlength=n_kept)

    # m = delta^T V delta: dL/dp and dL/dSigma'
    y_vec = state["y_vec"]
    g_p_f = -2.0 * g_m[:, None] * y_vec
    g_Sp_f = -g_m[:, None, None] * np.einsum("fi,fj->fij", y_vec, y_vec)
    g_p = _bincount_cols(gs, g_p_f, n_kept)
    g_Sp = _bincount_cols(gs, g_Sp_f, n_kept)

    # a = d^T Pc d: dL/dPc
    g_Pc_f = g_a[:, None, None] * np.einsum("fi,fj->fij", state["d_f"], state["d_f"])
    g_Pc = _bincount_cols(gs, g_Pc_f, n_kept)

    # Sigma' = J Sigma_c J^T and Pc = Sigma_c^-1
    J = proj["J"]
    Sigma_c = proj["Sigma_c"]
    Pc = proj["Pc"]
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_Sp, J, Sigma_c)
    g_Sc = np.einsum("nji,njk,nkl->nil", J, g_Sp, J)
    g_Sc -= np.einsum("nij,njk,nkl->nil", Pc, g_Pc, Pc)

    # projection point and Jacobian entries depend on mu_c
    fx, fy = intr.fx, intr.fy
    x, y, z = proj["mu_c"][:, 0], proj["mu_c"][:, 1], proj["mu_c"][:, 2]
    g_mu_c = np.einsum("nji,nj->ni", J, g_p)
    g_mu_c[:, 0] += g_J[:, 0, 2] * (-fx / z**2)
    g_mu_c[:, 1] += g_J[:, 1, 2] * (-fy / z**2)
    g_mu_c[:, 2] += (g_J[:, 0, 0] * (-fx / z**2)
                     + g_J[:, 0, 2] * (2.0 * fx * x / z**3)
                     + g_J[:, 1, 1] * (-fy / z**2)
                     + g_J[:, 1, 2] * (2.0 * fy * y / z**3))

    W = camera.rotation
    g_mu = g_mu_c @ W  # W^T g, row-wise
    g_Sigma = np.einsum("ji,njk,kl->nil", W, g_Sc, W)

    # Sigma = M M^T, M = R diag(s)
    M = proj["M"]
    R = proj["R"]
    g_M = 2.0 * np.einsum("nij,njk->nik", g_Sigma, M)
    scales = mix.scales[proj["orig"]]
    g_R = g_M * scales[:, None, :]
    g_scale = np.einsum("nji,nji->ni", R, g_M)  # diag(R^T g_M)

    quats = mix.quaternions[proj["orig"]]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    q_hat = quats / norms
    D = _dR_dqhat(q_hat)
    g_qhat = np.einsum("nij,nkij->nk", g_R, D)
    g_q = (g_qhat - q_hat * np.sum(q_hat * g_qhat, axis=1, keepdims=True)) / norms

    orig = proj["orig"]
    grads["opacities"][orig] = g_opac
    grads["means"][orig] = g_mu
    grads["scales"][orig] = g_scale
    grads["quaternions"][orig] = g_q
    grads["sh_coeffs"][orig] = g_sh
    return grads


def render_with_gradients(mix: GaussianMixture, camera: Camera, cfg: RenderConfig,
                          loss_adjoint: np.ndarray):
    """Forward splat render plus exact parameter gradients.

    loss_adjoint is dL/d(image), shaped like the rendered image. Returns
    (image, grads) where grads maps parameter class to an array shaped like
    the mixture's own storage: opacities (N,), means (N, 3), scales (N, 3),
    quaternions (N, 4), sh_coeffs (N, 3, B).
    """
    state = _splat_forward(mix, camera, cfg)
    img = _composite_color(state)
    grads = _splat_backward(state, loss_adjoint)
    return img, grads
