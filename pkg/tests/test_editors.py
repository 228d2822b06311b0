"""Mock editor stages: feature extraction, edit transforms, decoding."""

import numpy as np
import pytest

from splatedit.editors import (
    DESCRIPTOR_DIM,
    PAYLOAD_DIM,
    Editor,
    IdentityEditor,
    MockEditor,
)
from splatedit.mveditor import EditSpec, FeatureGrid
from splatedit.renderer import RenderConfig, render_depth
from tests.conftest import make_orbit_camera, make_separated_mixture


def _image(rng, size=32):
    img = rng.uniform(0, 1, (size, size, 3))
    for _ in range(2):
        img = 0.25 * (np.roll(img, 1, 0) + np.roll(img, -1, 0)
                      + np.roll(img, 1, 1) + np.roll(img, -1, 1))
    return img


class TestExtract:
    def test_grid_shape_and_stride(self, rng):
        editor = MockEditor(stride=8)
        grid = editor.extract(_image(rng, 32), 0)
        assert isinstance(grid, FeatureGrid)
        assert grid.data.shape == (4, 4, DESCRIPTOR_DIM + PAYLOAD_DIM)
        assert grid.stride == 8

    def test_descriptors_unit_scaled_payload_zero(self, rng):
        editor = MockEditor(stride=8, attention_gain=10.0)
        grid = editor.extract(_image(rng, 32), 0)
        desc = grid.data[:, :, :DESCRIPTOR_DIM]
        norms = np.linalg.norm(desc, axis=2)
        assert np.abs(norms - 10.0).max() <= 1e-9
        assert not np.any(grid.data[:, :, DESCRIPTOR_DIM:])

    def test_content_dependent(self, rng):
        editor = MockEditor(stride=8)
        a = editor.extract(_image(rng, 32), 0)
        b = editor.extract(_image(rng, 32), 0)
        assert np.abs(a.data - b.data).max() > 1e-3

    def test_indivisible_size_rejected(self, rng):
        with pytest.raises(ValueError):
            MockEditor(stride=8).extract(rng.uniform(size=(20, 20, 3)), 0)

    def test_non_rgb_rejected(self, rng):
        with pytest.raises(ValueError):
            MockEditor(stride=8).extract(rng.uniform(size=(16, 16)), 0)

    def test_constructor_validation(self):
        with pytest.raises(ValueError):
            MockEditor(stride=0)
        with pytest.raises(ValueError):
            MockEditor(stages=0)


class TestDecode:
    def test_zero_payload_is_exact_identity(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        grid = editor.extract(img, 0)
        assert np.array_equal(editor.decode(grid, img, 0), img)

    def test_constant_payload_is_affine(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        grid = editor.extract(img, 0)
        grid.data[:, :, DESCRIPTOR_DIM:DESCRIPTOR_DIM + 3] = [0.2, -0.1, 0.0]
        grid.data[:, :, DESCRIPTOR_DIM + 3:] = [0.05, 0.0, -0.02]
        out = editor.decode(grid, img, 0)
        expected = img * [1.2, 0.9, 1.0] + [0.05, 0.0, -0.02]
        assert np.abs(out - expected).max() <= 1e-12


class TestTransform:
    def test_style_tint_single_view(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        spec = EditSpec(kind="style-tint",
                        parameters={"gain": (1.3, 1.0, 0.7),
                                    "bias": (0.0, 0.05, 0.0)})
        out = editor.transform({0: editor.extract(img, 0)}, spec)
        decoded = editor.decode(out[0], img, 0)
        expected = img * [1.3, 1.0, 0.7] + [0.0, 0.05, 0.0]
        assert np.abs(decoded - expected).max() <= 1e-9

    def test_strength_scales_the_edit(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        spec = EditSpec(kind="style-tint", parameters={"gain": (1.4, 1.0, 0.8)})
        full = editor.decode(
            editor.transform({0: editor.extract(img, 0)}, spec)[0], img, 0)
        half = editor.decode(
            editor.transform({0: editor.extract(img, 0)},
                             spec.with_strength(0.5))[0], img, 0)
        assert np.abs((half - img) * 2 - (full - img)).max() <= 1e-9

    def test_zero_strength_is_identity(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        spec = EditSpec(kind="per-view-random").with_strength(0.0)
        out = editor.transform({0: editor.extract(img, 0)}, spec)
        assert np.array_equal(editor.decode(out[0], img, 0), img)

    def test_per_view_random_deterministic(self, rng):
        editor = MockEditor(stride=8)
        img = _image(rng, 32)
        spec = EditSpec(kind="per-view-random", seed=11)
        a = editor.transform({3: editor.extract(img, 3)}, spec)[3]
        b = editor.transform({3: editor.extract(img, 3)}, spec)[3]
        assert np.array_equal(a.data, b.data)

    def test_per_view_random_differs_across_views_and_seeds(self, rng):
        editor = MockEditor(stride=8, stages=1)
        img = _image(rng, 32)
        grid = editor.extract(img, 0)
        spec = EditSpec(kind="per-view-random", seed=11)
        p0 = editor.transform({0: grid.copy()}, spec)[0].data[:, :, DESCRIPTOR_DIM:]
        p1 = editor.transform({1: grid.copy()}, spec)[1].data[:, :, DESCRIPTOR_DIM:]
        assert np.abs(p0 - p1).max() > 1e-3
        other = EditSpec(kind="per-view-random", seed=12)
        q0 = editor.transform({0: grid.copy()}, other)[0].data[:, :, DESCRIPTOR_DIM:]
        assert np.abs(p0 - q0).max() > 1e-3

    def test_per_view_random_payload_independent_of_content(self, rng):
        # the draw is keyed by (seed, view); with a single attention stage
        # nothing mixes it back into the descriptors
        editor = MockEditor(stride=8, stages=1)
        spec = EditSpec(kind="per-view-random", seed=5)
        ga = editor.extract(_image(rng, 32), 2)
        gb = editor.extract(_image(rng, 32), 2)
        pa = editor.transform({2: ga}, spec)[2].data[:, :, DESCRIPTOR_DIM:]
        pb = editor.transform({2: gb}, spec)[2].data[:, :, DESCRIPTOR_DIM:]
        assert np.array_equal(pa, pb)

    def test_recolor_requires_scene_context(self, rng):
        editor = MockEditor(stride=8)
        spec = EditSpec(kind="recolor-by-world-position")
        with pytest.raises(ValueError):
            editor.transform({0: editor.extract(_image(rng, 32), 0)}, spec)

    def test_recolor_falloff_is_radial(self, rng):
        # constant-depth plane at the orbit radius: the cell under the
        # principal point unprojects to the world origin, corners land far
        cam = make_orbit_camera(0.0, size=32, elevation=0.0)
        depth = np.full((32, 32, 1), 4.0)
        editor = MockEditor(cameras=[cam], depths=[depth], stride=8, stages=1)
        img = _image(rng, 32)
        spec = EditSpec(kind="recolor-by-world-position",
                        parameters={"center": (0.0, 0.0, 0.0), "radius": 0.9,
                                    "gain": (2.0, 1.0, 1.0), "bias": (0.1, 0, 0)})
        out = editor.transform({0: editor.extract(img, 0)}, spec)[0]
        payload = out.data[:, :, DESCRIPTOR_DIM:]
        norms = np.linalg.norm(payload, axis=2)
        # center cells straddle the principal point; corners are outside
        assert norms[1:3, 1:3].max() > 0.1
        assert norms[0, 0] == 0.0 and norms[3, 3] == 0.0

    def test_recolor_with_rendered_depth(self, rng):
        mix = make_separated_mixture(rng, 5)
        cam = make_orbit_camera(0.4, size=32)
        depth = render_depth(mix, cam, RenderConfig())
        editor = MockEditor(cameras=[cam], depths=[depth], stride=8)
        spec = EditSpec(kind="recolor-by-world-position",
                        parameters={"radius": 1.5, "gain": (1.5, 0.8, 0.8)})
        img = _image(rng, 32)
        out = editor.transform({0: editor.extract(img, 0)}, spec)
        decoded = editor.decode(out[0], img, 0)
        assert np.abs(decoded - img).max() > 1e-3

    def test_context_length_mismatch_rejected(self):
        editor = MockEditor(stride=8)
        cam = make_orbit_camera(0.0, size=16)
        with pytest.raises(ValueError):
            editor.set_scene_context([cam], [])


class TestIdentityEditor:
    def test_is_an_editor(self):
        assert isinstance(IdentityEditor(), Editor)

    def test_transform_copies_without_change(self, rng):
        editor = IdentityEditor(stride=8)
        grid = editor.extract(_image(rng, 32), 0)
        out = editor.transform({0: grid}, EditSpec(kind="style-tint"))
        assert out[0] is not grid
        assert np.array_equal(out[0].data, grid.data)
        out[0].data[0, 0, 0] += 1.0  # the copy is independent
        assert out[0].data[0, 0, 0] != grid.data[0, 0, 0]

    def test_end_to_end_identity(self, rng):
        editor = IdentityEditor(stride=8)
        img = _image(rng, 32)
        out = editor.transform({0: editor.extract(img, 0)},
                               EditSpec(kind="per-view-random"))
        assert np.array_equal(editor.decode(out[0], img, 0), img)
