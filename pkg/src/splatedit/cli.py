"""Command-line surface: gen / render / edit / fit / compare.

Every subcommand validates and loads all of its inputs before writing any
output file, so a validation failure (exit 1) leaves no partial artifacts.
Failures during computation exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .editors import MockEditor
from .field import load_ply, save_ply
from .fitter import FitConfig, GaussianMask, fit, partial_fit
from .geometry import load_cameras, save_cameras, sort_cameras
from .harness import SceneSpec, generate_scene, run_experiment_views
from .images import load_image, save_image, save_png
from .mveditor import (
    ViewSequence,
    edit_sequence,
    edit_views_independently,
    load_edit_spec,
)
from .renderer import RenderConfig, render_depth, render_mask, splat_render

__all__ = ["main"]

_EXIT_OK = 0
_EXIT_VALIDATION = 1
_EXIT_RUNTIME = 2


class _ValidationError(Exception):
    """Input problems detected before any output is written."""


def _load_text(path, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise _ValidationError(f"cannot read {what} {path!r}: {exc}") from exc


def _load_scene(path):
    try:
        return load_ply(path)
    except (OSError, ValueError) as exc:
        raise _ValidationError(f"bad scene {path!r}: {exc}") from exc


def _load_cams(path):
    try:
        cams = load_cameras(path)
    except (OSError, ValueError, KeyError) as exc:
        raise _ValidationError(f"bad cameras {path!r}: {exc}") from exc
    if len(cams) == 0:
        raise _ValidationError(f"camera file {path!r} is empty")
    return cams


def _load_selection(path, n: int) -> np.ndarray:
    """Gaussian selection file: {"selected": bool list or index list}."""
    try:
        obj = json.loads(_load_text(path, "selection"))
        entries = obj["selected"]
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise _ValidationError(f"bad selection {path!r}: {exc}") from exc
    selected = np.zeros(n, dtype=bool)
    if len(entries) == n and all(isinstance(e, bool) for e in entries):
        selected[:] = entries
        return selected
    try:
        idx = np.asarray(entries, dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise _ValidationError(f"bad selection {path!r}: {exc}") from exc
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise _ValidationError(
            f"selection index out of range for {n} Gaussians: {path!r}")
    selected[idx] = True
    return selected


def _load_editspec(path):
    try:
        return load_edit_spec(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise _ValidationError(f"bad edit spec {path!r}: {exc}") from exc


def _cmd_gen(args) -> int:
    try:
        spec = SceneSpec.from_json(_load_text(args.spec, "scene spec"))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise _ValidationError(f"bad scene spec {args.spec!r}: {exc}") from exc
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    mix, cameras = generate_scene(spec)
    save_ply(args.out, mix)
    save_cameras(args.cams, cameras)
    print(f"wrote {len(mix)} Gaussians to {args.out}, "
          f"{len(cameras)} cameras to {args.cams}")
    return _EXIT_OK


def _cmd_render(args) -> int:
    mix = _load_scene(args.scene)
    cameras = _load_cams(args.cams)
    selected = None
    if args.mask is not None:
        selected = _load_selection(args.mask, len(mix))
    cfg = RenderConfig()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, camera in enumerate(cameras):
        img = np.clip(splat_render(mix, camera, cfg), 0.0, 1.0)
        save_png(out / f"view_{i:03d}.png", img)
        if args.depth:
            save_image(out / f"depth_{i:03d}.dgeimg",
                       render_depth(mix, camera, cfg))
        if selected is not None:
            m = np.clip(render_mask(mix, camera, cfg, selected), 0.0, 1.0)
            save_png(out / f"mask_{i:03d}.png", m)
    print(f"rendered {len(cameras)} views to {out}")
    return _EXIT_OK


def _cmd_edit(args) -> int:
    mix = _load_scene(args.scene)
    cameras = _load_cams(args.cams)
    spec = _load_editspec(args.spec)
    if len(cameras) < 2:
        raise _ValidationError("edit requires at least 2 cameras")
    if args.key_density < 1:
        raise _ValidationError("--key-density must be >= 1")
    if args.band <= 0:
        raise _ValidationError("--band must be positive")

    order = sort_cameras(cameras)
    cameras = [cameras[i] for i in order]
    cfg = RenderConfig()
    renders = [splat_render(mix, cam, cfg) for cam in cameras]
    depths = [render_depth(mix, cam, cfg) for cam in cameras]
    seq = ViewSequence(list(zip(cameras, renders)))
    editor = MockEditor(stride=8)
    editor.set_scene_context(cameras, depths)

    if args.independent:
        edited = edit_views_independently(seq, spec, editor)
    else:
        edited = edit_sequence(
            seq, spec, editor,
            key_density=args.key_density,
            band=args.band * editor.stride,
            seed=args.seed if args.seed is not None else 0,
            epipolar=not args.no_epipolar,
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(edited.images):
        save_png(out / f"edited_{i:03d}.png", np.clip(img, 0.0, 1.0))
    print(f"edited {len(cameras)} views to {out}")
    return _EXIT_OK


def _cmd_fit(args) -> int:
    mix = _load_scene(args.scene)
    cameras = _load_cams(args.cams)
    if args.config is not None:
        try:
            cfg = FitConfig.from_json(_load_text(args.config, "fit config"))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise _ValidationError(f"bad fit config {args.config!r}: {exc}") from exc
    else:
        cfg = FitConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mask is not None:
        cfg.mask = GaussianMask(_load_selection(args.mask, len(mix)))

    targets_dir = Path(args.targets)
    files = sorted(targets_dir.glob("edited_*.png"))
    if not files:
        raise _ValidationError(f"no edited_*.png targets in {targets_dir!r}")
    if len(files) != len(cameras):
        raise _ValidationError(
            f"{len(files)} target images but {len(cameras)} cameras")
    try:
        images = [load_image(f) for f in files]
    except (OSError, ValueError) as exc:
        raise _ValidationError(f"bad target image: {exc}") from exc

    order = sort_cameras(cameras)
    cameras = [cameras[i] for i in order]
    seq = ViewSequence(list(zip(cameras, images)))
    if cfg.mask is not None:
        fitted, report = partial_fit(mix, seq, cfg)
    else:
        fitted, report = fit(mix, seq, cfg)
    save_ply(args.out, fitted)
    mean_psnr = float(np.mean(report.psnr))
    print(f"fit {cfg.iterations} iterations, mean PSNR {mean_psnr:.2f} dB, "
          f"wrote {args.out}")
    return _EXIT_OK


def _cmd_compare(args) -> int:
    mix = _load_scene(args.scene)
    cameras = _load_cams(args.cams)
    spec = _load_editspec(args.spec)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise _ValidationError("--methods must name at least one method")
    if args.config is not None:
        try:
            cfg = FitConfig.from_json(_load_text(args.config, "fit config"))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise _ValidationError(f"bad fit config {args.config!r}: {exc}") from exc
    else:
        cfg = FitConfig(iterations=200)
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        results = run_experiment_views(mix, cameras, spec, methods, cfg, args.out)
    except ValueError as exc:
        raise _ValidationError(str(exc)) from exc
    for r in results:
        print(f"{r.method}: consistency={r.consistency_error:.5f} "
              f"mean_psnr={float(np.mean(r.psnr)):.2f} "
              f"iterations_to_target={r.iterations_to_target}")
    if len(results) < len(methods):
        return _EXIT_RUNTIME
    return _EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatedit",
        description="Gaussian-splat scene editing: generate, render, edit, "
                    "re-fit, and compare editing methods.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene")
    p.add_argument("--spec", required=True, help="SceneSpec JSON file")
    p.add_argument("--out", default="scene.ply", help="output mixture PLY")
    p.add_argument("--cams", default="cams.json", help="output camera JSON")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("render", help="render all views of a scene")
    p.add_argument("--scene", required=True, help="mixture PLY")
    p.add_argument("--cams", required=True, help="camera JSON")
    p.add_argument("--out", default="renders", help="output directory")
    p.add_argument("--depth", action="store_true", help="also write depth maps")
    p.add_argument("--mask", default=None, help="selection JSON for coverage masks")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("edit", help="multi-view consistent edit of rendered views")
    p.add_argument("--scene", required=True)
    p.add_argument("--cams", required=True)
    p.add_argument("--spec", required=True, help="EditSpec JSON file")
    p.add_argument("--out", default="edited", help="output directory")
    p.add_argument("--key-density", type=int, default=5,
                   help="one key view per this many views")
    p.add_argument("--band", type=float, default=1.5,
                   help="epipolar band half-width in feature-cell strides")
    p.add_argument("--no-epipolar", action="store_true",
                   help="disable the epipolar constraint during injection")
    p.add_argument("--independent", action="store_true",
                   help="edit each view separately (inconsistent baseline)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("fit", help="re-fit a mixture to edited target views")
    p.add_argument("--scene", required=True)
    p.add_argument("--cams", required=True)
    p.add_argument("--targets", required=True, help="directory of edited_*.png")
    p.add_argument("--config", default=None, help="FitConfig JSON file")
    p.add_argument("--out", default="edited.ply", help="output mixture PLY")
    p.add_argument("--mask", default=None, help="selection JSON for partial fit")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("compare", help="run paired method comparison")
    p.add_argument("--scene", required=True)
    p.add_argument("--cams", required=True)
    p.add_argument("--spec", required=True, help="EditSpec JSON file")
    p.add_argument("--methods", default="direct,independent,idu")
    p.add_argument("--config", default=None, help="FitConfig JSON file")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; normalize to the validation code
        return _EXIT_VALIDATION if exc.code not in (0, None) else _EXIT_OK
    try:
        return args.func(args)
    except _ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
