"""Gaussian-splat radiance fields: rendering, multi-view editing, refitting."""

from .editors import Editor, IdentityEditor, MockEditor
from .field import (
    GaussianMixture,
    GaussianPrimitive,
    UndefinedColorError,
    field_color,
    field_opacity,
    gaussian_eval,
    load_ply,
    save_ply,
    sh_color,
)
from .fitter import (
    FitConfig,
    FitDivergenceError,
    FitReport,
    GaussianMask,
    fit,
    idu_baseline,
    partial_fit,
    refine_loop,
    unproject_masks,
)
from .geometry import Camera, Intrinsics, load_cameras, save_cameras, sort_cameras
from .harness import (
    ExperimentResult,
    SceneSpec,
    generate_scene,
    reprojection_consistency,
    run_experiment,
    run_experiment_views,
)
from .images import load_image, psnr, save_image
from .mveditor import (
    EditError,
    EditSpec,
    FeatureGrid,
    ViewSequence,
    edit_sequence,
    edit_views_independently,
    inject_features,
    load_edit_spec,
    match_epipolar,
    save_edit_spec,
    select_key_views,
    st_attention,
)
from .perceptual import perceptual_proxy, perceptual_proxy_with_grad
from .renderer import (
    RenderConfig,
    raymarch_render,
    render_coverage,
    render_depth,
    render_mask,
    render_with_gradients,
    splat_render,
)

__version__ = "0.1.0"
