"""Command-line entry point ``texrig``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import texel, validate
from .config import VARIANTS, load_config
from .errors import ConfigError, NumericError, ShapeMismatch, TexrigError
from .fit import FitConfig, Frame, fit, perturb, prepare_scene, render_frames, write_trace
from .mesh import Variant, frame_arrays, load_pair
from .objfile import parse_obj
from .render import Camera, read_png, render, write_png
from .rig import LocalAttributeMaps, export_gaussians, lift_naive, lift_quasi_phong
from .seams import compare_seams

log = logging.getLogger("texrig")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared loading


class _Inputs:
    """Meshes, cameras and maps named by a config, loaded once."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.rest = parse_obj(cfg.path(cfg.rest_obj))
        self.deformed = [parse_obj(cfg.path(p)) for p in cfg.deformed_objs] or [self.rest]
        self.pairs = [load_pair(self.rest, d) for d in self.deformed]
        self.out = cfg.path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.face_map = texel.rasterize_faces(self.rest, cfg.uv_width, cfg.uv_height)
        self.frame_variant = Variant(cfg.frame_variant)

    def frames(self, k):
        return frame_arrays(self.pairs[k], self.frame_variant)

    def field(self, k):
        fld = texel.build_jacobian_field(self.frames(k), self.face_map)
        return texel.dilate_field(fld, self.cfg.dilation_rings)

    def cameras(self):
        path = self.cfg.path(self.cfg.cameras)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            cams = [Camera.from_dict(d) for d in (data if isinstance(data, list) else [data])]
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{path}: bad camera file ({exc})") from None
        if not cams:
            raise ConfigError(f"{path}: no cameras")
        return cams

    def maps(self):
        cfg = self.cfg
        if cfg.maps:
            local = LocalAttributeMaps.load(cfg.path(cfg.maps))
            if local.mask.shape != self.face_map.face.shape:
                raise ShapeMismatch(f"maps are {local.mask.shape}, uv grid is "
                                    f"{self.face_map.face.shape}")
        else:
            local = LocalAttributeMaps.surface_init(self.rest, self.face_map)
        if cfg.init_noise > 0:
            local = perturb(local, cfg.init_noise, cfg.seed)
        return local

    def lift(self, local, k, variant):
        if variant == "naive":
            return lift_naive(local, self.face_map, self.frames(k))
        return lift_quasi_phong(local, self.field(k))


# ---------------------------------------------------------------------------
# commands


def cmd_build_field(cfg):
    cfg.validate_paths(need=("rest_obj",))
    inp = _Inputs(cfg)
    write_png(inp.out / "mask.png", inp.face_map.mask.astype(np.float64))
    for k in range(len(inp.pairs)):
        texel.write_field(inp.out / f"field_{k:03d}.txf", inp.field(k))
    print(f"{int(inp.face_map.mask.sum())} valid texels of {inp.face_map.mask.size}; "
          f"{len(inp.pairs)} field(s) written to {inp.out}")


def cmd_rig(cfg):
    cfg.validate_paths(need=("rest_obj",))
    inp = _Inputs(cfg)
    local = inp.maps()
    for k in range(len(inp.pairs)):
        gs = inp.lift(local, k, cfg.variant)
        export_gaussians(gs, inp.out / f"gaussians_{k:03d}.ply")
    print(f"{len(inp.pairs)} point cloud(s) written to {inp.out}")


def cmd_render(cfg):
    cfg.validate_paths(need=("rest_obj", "cameras"))
    inp = _Inputs(cfg)
    local, cams = inp.maps(), inp.cameras()
    for k in range(len(inp.pairs)):
        gs = inp.lift(local, k, cfg.variant)
        for c, cam in enumerate(cams):
            write_png(inp.out / f"render_{k:03d}_{c:02d}.png", render(gs, cam).image)
    print(f"{len(inp.pairs) * len(cams)} image(s) written to {inp.out}")


def cmd_fit(cfg):
    cfg.validate_paths(need=("rest_obj", "cameras", "targets"))
    inp = _Inputs(cfg)
    cams = inp.cameras()
    if len(cfg.targets) != len(inp.deformed) * len(cams):
        raise ConfigError(f"need {len(inp.deformed) * len(cams)} targets (frames x cameras, "
                          f"frame-major), got {len(cfg.targets)}")
    frames = []
    for k, mesh in enumerate(inp.deformed):
        for c, cam in enumerate(cams):
            target = read_png(cfg.path(cfg.targets[k * len(cams) + c]))
            if target.shape[:2] != (cam.height, cam.width):
                raise ShapeMismatch(f"target {cfg.targets[k * len(cams) + c]} is "
                                    f"{target.shape[1]}x{target.shape[0]}, camera {c} is "
                                    f"{cam.width}x{cam.height}")
            frames.append(Frame(mesh, cam, target))
    fc = FitConfig(inp.rest, frames, iterations=cfg.iterations,
                   learning_rates=cfg.learning_rates, seed=cfg.seed,
                   dilation_rings=cfg.dilation_rings, variant=cfg.variant,
                   frame_variant=inp.frame_variant, weights=cfg.weights())
    local = inp.maps()
    scene = prepare_scene(inp.rest, frames, cfg.uv_width, cfg.uv_height, cfg.dilation_rings,
                          inp.frame_variant)
    fitted, trace = fit(fc, local, scene=scene)
    fitted.save(inp.out / "maps.txf")
    write_trace(inp.out / "trace.csv", trace)
    for n, image in enumerate(render_frames(fitted, scene, cfg.variant)):
        write_png(inp.out / f"fit_{n // len(cams):03d}_{n % len(cams):02d}.png", image)
    if trace:
        print(f"loss {trace[0][1]:.6f} -> {trace[-1][1]:.6f} over {len(trace)} iterations")
    print(f"checkpoint, trace and renders written to {inp.out}")


def cmd_compare_seams(cfg):
    cfg.validate_paths(need=("rest_obj",))
    inp = _Inputs(cfg)
    for k, mesh in enumerate(inp.deformed):
        report = compare_seams(inp.rest, mesh, cfg.uv_width, cfg.uv_height, cfg.dilation_rings,
                               inp.frame_variant)
        report.write_csv(inp.out / f"seams_{k:03d}.csv")
        print(f"frame {k}: {len(report.pairs)} seam texel pairs")
        for variant, row in report.summary().items():
            print(f"  {variant:<12} position max {row['position_max']:.6g} "
                  f"mean {row['position_mean']:.6g}  covariance max {row['covariance_max']:.6g} "
                  f"mean {row['covariance_mean']:.6g}")


def cmd_validate(checks=None, seed=0, faults=()):
    t0 = time.perf_counter()
    fault_args = {}
    for item in faults:
        name, _, value = item.partition("=")
        fault_args[name] = float(value or -1.0)
    with validate.injected_faults(**fault_args):
        results = validate.run_checks(checks, seed=seed, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"total {time.perf_counter() - t0:.1f}s; "
          + (f"FAILED: {', '.join(failed)}" if failed else "all checks passed"))
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "build-field": cmd_build_field,
    "rig": cmd_rig,
    "render": cmd_render,
    "fit": cmd_fit,
    "compare-seams": cmd_compare_seams,
}


def build_parser():
    parser = _Parser(prog="texrig", description="Texel-space Jacobian rigging of 3D Gaussians.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in list(COMMANDS) + ["validate"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "validate", help="key = value run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        if name == "validate":
            p.add_argument("--check", action="append", choices=list(validate.CHECKS),
                           help="run only this check (repeatable)")
            p.add_argument("--inject-fault", action="append", default=[],
                           help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            seed = args.seed
            if seed is None:
                seed = load_config(args.config).seed if args.config else 0
            return cmd_validate(args.check, seed, args.inject_fault)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.variant is not None:
            cfg.variant = args.variant
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except NumericError as exc:
        print(f"texrig: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TexrigError as exc:
        print(f"texrig: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"texrig: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"texrig: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
