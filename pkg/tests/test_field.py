"""Gaussian-mixture field evaluation, SH color, and PLY serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from splatedit.field import (
    GaussianMixture,
    GaussianPrimitive,
    UndefinedColorError,
    covariance,
    field_color,
    field_opacity,
    gaussian_eval,
    load_ply,
    quat_to_rotation,
    rotation_to_quat,
    save_ply,
    sh_basis,
    sh_color,
    sidecar_path,
)

_Y00 = 0.28209479177387814


def _prim(rng, degree=0, opacity=2.0):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    basis = (degree + 1) ** 2
    return GaussianPrimitive(
        opacity=opacity,
        mean=rng.uniform(-1, 1, 3),
        scale=rng.uniform(0.2, 1.5, 3),
        orientation=q,
        sh_coeffs=rng.uniform(-1, 1, (3, basis)),
    )


def _real_sh_oracle(l, m, nu):
    """Independent real-basis evaluation via scipy's complex harmonics."""
    x, y, z = nu
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    if m == 0:
        return float(np.real(sph_harm_y(l, 0, theta, phi)))
    if m > 0:
        return float(np.sqrt(2) * (-1) ** m * np.real(sph_harm_y(l, m, theta, phi)))
    return float(np.sqrt(2) * (-1) ** m * np.imag(sph_harm_y(l, -m, theta, phi)))


class TestQuaternionRotation:
    def test_matches_independent_implementation(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            R_mine = quat_to_rotation(q[None])[0]
            R_scipy = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
            assert np.abs(R_mine - R_scipy).max() <= 1e-12

    def test_round_trip_up_to_sign(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            back = rotation_to_quat(quat_to_rotation(q[None])[0])
            assert min(np.abs(back - q).max(), np.abs(back + q).max()) <= 1e-9

    def test_unnormalized_input_normalized_internally(self):
        R1 = quat_to_rotation(np.array([[2.0, 0.0, 0.0, 0.0]]))[0]
        assert np.allclose(R1, np.eye(3))


class TestCovariance:
    def test_identity(self):
        p = GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))
        assert np.allclose(covariance(p), np.eye(3))

    def test_axis_aligned_anisotropic(self):
        p = GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(2, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))
        assert np.allclose(covariance(p), np.diag([4.0, 1.0, 1.0]))

    def test_eigenvalues_are_squared_scales(self, rng):
        for _ in range(20):
            p = _prim(rng)
            ev = np.sort(np.linalg.eigvalsh(covariance(p)))
            assert np.abs(ev - np.sort(p.scale**2)).max() <= 1e-9

    def test_round_trip_through_eigendecomposition(self, rng):
        for _ in range(20):
            p = _prim(rng)
            S = covariance(p)
            lam, V = np.linalg.eigh(S)
            if np.linalg.det(V) < 0:
                V[:, 0] = -V[:, 0]
            rebuilt = GaussianPrimitive(
                opacity=1.0, mean=np.zeros(3), scale=np.sqrt(lam),
                orientation=rotation_to_quat(V), sh_coeffs=np.ones((3, 1)))
            assert np.abs(covariance(rebuilt) - S).max() <= 1e-9


class TestGaussianEval:
    def test_peak_at_mean(self, rng):
        p = _prim(rng)
        assert gaussian_eval(p, p.mean) == 1.0

    def test_isotropic_unit_distance(self):
        p = GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))
        assert gaussian_eval(p, [1.0, 0.0, 0.0]) == pytest.approx(np.exp(-0.5))

    def test_matches_explicit_solve(self, rng):
        for _ in range(30):
            p = _prim(rng)
            x = rng.uniform(-2, 2, 3)
            d = x - p.mean
            m = d @ np.linalg.solve(covariance(p), d)
            assert gaussian_eval(p, x) == pytest.approx(np.exp(-0.5 * m), rel=1e-10)

    @given(dx=st.floats(-3, 3), dy=st.floats(-3, 3), dz=st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_bounded_and_maximized_at_mean(self, dx, dy, dz):
        p = GaussianPrimitive(opacity=1.0, mean=(0.5, -0.2, 0.1),
                              scale=(0.8, 1.1, 0.6), orientation=(1, 0, 0, 0),
                              sh_coeffs=np.ones((3, 1)))
        v = gaussian_eval(p, np.asarray(p.mean) + [dx, dy, dz])
        assert 0.0 < v <= 1.0
        if (dx, dy, dz) != (0.0, 0.0, 0.0):
            assert v <= 1.0


class TestSHColor:
    def test_dc_only(self):
        p = GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0),
                              sh_coeffs=np.array([[0.5], [0.25], [1.0]]))
        c = sh_color(p, [0.0, 0.0, 1.0])
        assert np.allclose(c, _Y00 * np.array([0.5, 0.25, 1.0]))
        c2 = sh_color(p, [1.0, 0.0, 0.0])
        assert np.array_equal(c, c2)  # direction independent at degree 0

    def test_degree1_z_linear(self):
        sh = np.zeros((3, 4))
        sh[0, 2] = 1.0  # the middle degree-1 slot responds to the z component
        p = GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=sh)
        zs = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        reds = []
        for z in zs:
            x = np.sqrt(1 - z * z)
            reds.append(sh_color(p, [x, 0.0, z])[0])
        reds = np.array(reds)
        # linear in z: finite differences of equal z-steps are equal
        steps = np.diff(reds)
        assert np.abs(steps - steps[0]).max() <= 1e-12

    def test_basis_matches_scipy_to_degree2(self, rng):
        dirs = rng.normal(size=(40, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        B = sh_basis(dirs, 2)
        assert B.shape == (40, 9)
        for i, nu in enumerate(dirs):
            for l in range(3):
                for m in range(-l, l + 1):
                    idx = l * l + l + m
                    assert B[i, idx] == pytest.approx(
                        _real_sh_oracle(l, m, nu), abs=1e-12)

    def test_unit_direction_required(self, rng):
        p = _prim(rng, degree=1)
        with pytest.raises(ValueError):
            sh_color(p, [0.0, 0.0, 2.0])


class TestFieldOps:
    def test_opacity_single_at_mean(self, rng):
        p = _prim(rng, opacity=3.5)
        mix = GaussianMixture.from_primitives([p])
        assert field_opacity(mix, p.mean) == pytest.approx(3.5)

    def test_opacity_additive_for_identical_pair(self, rng):
        p = _prim(rng, opacity=2.0)
        mix = GaussianMixture.from_primitives([p, p])
        assert field_opacity(mix, p.mean) == pytest.approx(4.0)

    def test_opacity_matches_explicit_loop(self, rng):
        prims = [_prim(rng) for _ in range(6)]
        mix = GaussianMixture.from_primitives(prims)
        x = rng.uniform(-1, 1, 3)
        expected = sum(p.opacity * gaussian_eval(p, x) for p in prims)
        assert field_opacity(mix, x) == pytest.approx(expected, rel=1e-12)

    def test_color_single_gaussian_everywhere(self, rng):
        p = _prim(rng, degree=1)
        mix = GaussianMixture.from_primitives([p])
        nu = np.array([0.0, 0.6, 0.8])
        for _ in range(5):
            x = rng.uniform(-1, 1, 3)
            assert np.allclose(field_color(mix, x, nu), sh_color(p, nu))

    def test_color_equal_weight_midpoint(self):
        def prim_with_color(rgb):
            return GaussianPrimitive(opacity=1.0, mean=np.zeros(3),
                                     scale=(1, 1, 1), orientation=(1, 0, 0, 0),
                                     sh_coeffs=np.array(rgb, float)[:, None] / _Y00)
        mix = GaussianMixture.from_primitives(
            [prim_with_color([1, 0, 0]), prim_with_color([0, 0, 1])])
        c = field_color(mix, np.zeros(3), [0.0, 0.0, 1.0])
        assert np.allclose(c, [0.5, 0.0, 0.5])

    def test_color_matches_explicit_loop(self, rng):
        prims = [_prim(rng, degree=1) for _ in range(5)]
        mix = GaussianMixture.from_primitives(prims)
        x = rng.uniform(-0.5, 0.5, 3)
        nu = np.array([0.6, 0.0, 0.8])
        w = np.array([p.opacity * gaussian_eval(p, x) for p in prims])
        cs = np.stack([sh_color(p, nu) for p in prims])
        expected = (w[:, None] * cs).sum(0) / w.sum()
        assert np.allclose(field_color(mix, x, nu), expected, rtol=1e-12)

    def test_color_convex_hull_property(self, rng):
        prims = [_prim(rng) for _ in range(4)]
        mix = GaussianMixture.from_primitives(prims)
        nu = np.array([1.0, 0.0, 0.0])
        colors = np.stack([sh_color(p, nu) for p in prims])
        for _ in range(10):
            x = rng.uniform(-1, 1, 3)
            c = field_color(mix, x, nu)
            assert np.all(c >= colors.min(0) - 1e-12)
            assert np.all(c <= colors.max(0) + 1e-12)

    def test_zero_weight_color_is_error(self):
        p = GaussianPrimitive(opacity=0.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))
        mix = GaussianMixture.from_primitives([p])
        with pytest.raises(UndefinedColorError):
            field_color(mix, np.zeros(3), [0.0, 0.0, 1.0])

    def test_permutation_invariance(self, rng):
        prims = [_prim(rng) for _ in range(6)]
        mix = GaussianMixture.from_primitives(prims)
        perm = rng.permutation(6)
        mix2 = GaussianMixture.from_primitives([prims[i] for i in perm])
        x = rng.uniform(-1, 1, 3)
        nu = np.array([0.0, 1.0, 0.0])
        assert field_opacity(mix, x) == pytest.approx(field_opacity(mix2, x), abs=1e-12)
        assert np.allclose(field_color(mix, x, nu), field_color(mix2, x, nu),
                           atol=1e-12)


class TestValidation:
    def test_negative_opacity(self, rng):
        with pytest.raises(ValueError):
            GaussianPrimitive(opacity=-0.1, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 0, 1),
                              orientation=(1, 0, 0, 0), sh_coeffs=np.ones((3, 1)))

    def test_non_unit_quaternion(self):
        with pytest.raises(ValueError):
            GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 1, 0, 0), sh_coeffs=np.ones((3, 1)))

    def test_nonfinite_sh(self):
        with pytest.raises(ValueError):
            GaussianPrimitive(opacity=1.0, mean=np.zeros(3), scale=(1, 1, 1),
                              orientation=(1, 0, 0, 0),
                              sh_coeffs=np.full((3, 1), np.nan))

    def test_mixture_degree_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            GaussianMixture.from_primitives([_prim(rng, 0), _prim(rng, 1)])


class TestPlyIO:
    @pytest.mark.parametrize("degree", [0, 1, 2])
    def test_round_trip(self, rng, tmp_path, degree):
        prims = [_prim(rng, degree) for _ in range(7)]
        mix = GaussianMixture.from_primitives(prims)
        path = tmp_path / "scene.ply"
        save_ply(path, mix)
        loaded = load_ply(path)
        assert loaded.sh_degree == degree
        assert len(loaded) == 7
        # storage is 32-bit; round trip is exact at that precision
        for key in ("opacities", "means", "scales", "quaternions", "sh_coeffs"):
            a, b = getattr(mix, key), getattr(loaded, key)
            assert np.array_equal(np.float32(a), np.float32(b))

    def test_sidecar_written_and_consistent(self, rng, tmp_path):
        mix = GaussianMixture.from_primitives([_prim(rng, 2) for _ in range(3)])
        path = tmp_path / "s.ply"
        save_ply(path, mix)
        sidecar = sidecar_path(path)
        assert sidecar.exists()
        assert load_ply(path).sh_degree == 2

    def test_degree_inferred_without_sidecar(self, rng, tmp_path):
        mix = GaussianMixture.from_primitives([_prim(rng, 1) for _ in range(3)])
        path = tmp_path / "s.ply"
        save_ply(path, mix)
        sidecar_path(path).unlink()
        assert load_ply(path).sh_degree == 1

    def test_sidecar_mismatch_rejected(self, rng, tmp_path):
        mix = GaussianMixture.from_primitives([_prim(rng, 1) for _ in range(3)])
        path = tmp_path / "s.ply"
        save_ply(path, mix)
        sidecar_path(path).write_text('{"sh_degree": 2}')
        with pytest.raises(ValueError):
            load_ply(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"not a ply file at all")
        with pytest.raises(ValueError):
            load_ply(path)
