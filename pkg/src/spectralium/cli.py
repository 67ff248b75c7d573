"""Command-line entry points: render a scene, or run the scaling benchmark.

Exit codes: 0 success, 1 scene/flag problem, 2 render failure,
3 output I/O failure. SPECTRALIUM_THREADS overrides --workers when set.
"""

from __future__ import annotations

import argparse
import math
import os
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colorimetry import XYZ, xyz_from_values, standard_observer, xyz_to_srgb
from .ddm import DdmError, ScheduleMetrics, run_ddm
from .image_io import rgb8_from_float, write_png, write_ppm
from .render import RenderSettings, render_image
from .scene import Scene, SceneError, parse_scene
from .spectral import SpdFormatError, SpdParseError

__all__ = ["RenderConfig", "cmd_render", "cmd_bench", "main"]

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_RENDER = 2
EXIT_IO = 3


@dataclass
class RenderConfig:
    scene_path: Path
    width: int = 64
    height: int = 64
    samples_per_pixel: int = 1
    n_photons: int = 0
    max_depth: int = 8
    seed: int = 0
    n_subdomains: int = 1
    n_workers: int = 1
    max_resident: int = 1
    load_cost_ms: float = 0.0
    output_path: Path | None = None

    def __post_init__(self):
        for name in ("width", "height", "samples_per_pixel", "max_depth",
                     "n_subdomains", "n_workers", "max_resident"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_subdomains & (self.n_subdomains - 1):
            raise ValueError("n_subdomains must be a power of two")


def white_luminance(scene: Scene) -> float:
    """Y of a perfect diffuser facing the scene's suns (exposure reference)."""
    if not scene.lights:
        return 1.0
    total = sum(light.emission.values for light in scene.lights) / math.pi
    _, y, _ = xyz_from_values(total, standard_observer())
    return y if y > 0.0 else 1.0


def xyz_image_to_rgb8(xyz_image: np.ndarray, white_y: float) -> np.ndarray:
    h, w, _ = xyz_image.shape
    rgb = np.zeros((h, w, 3))
    for row in range(h):
        for col in range(w):
            x, y, z = xyz_image[row, col]
            rgb[row, col] = xyz_to_srgb(XYZ(float(x), float(y), float(z)), white_y)
    return rgb8_from_float(rgb)


def _render_once(config: RenderConfig) -> tuple[np.ndarray, ScheduleMetrics, Scene]:
    scene = parse_scene(config.scene_path)
    settings = RenderSettings(
        width=config.width,
        height=config.height,
        samples_per_pixel=config.samples_per_pixel,
        n_photons=config.n_photons,
        max_depth=config.max_depth,
        seed=config.seed,
        workers=config.n_workers,
    )
    if config.n_subdomains == 1 and config.n_workers == 1 and config.load_cost_ms == 0:
        t0 = time.perf_counter()
        accumulator = render_image(scene, settings)
        metrics = ScheduleMetrics(wall_time=time.perf_counter() - t0,
                                  worker_busy=[0.0], worker_idle=[0.0])
        metrics.worker_busy[0] = metrics.wall_time
        n = config.width * config.height
        metrics.messages_enqueued = metrics.messages_retired = n
        metrics.max_resident_observed = 1
    else:
        accumulator, metrics = run_ddm(
            scene,
            settings,
            n_subdomains=config.n_subdomains,
            n_workers=config.n_workers,
            max_resident=config.max_resident,
            load_cost_ms=config.load_cost_ms,
        )
    return accumulator.finalize(), metrics, scene


def _write_image(path: Path, xyz_image: np.ndarray, scene: Scene) -> None:
    rgb8 = xyz_image_to_rgb8(xyz_image, white_luminance(scene))
    suffix = path.suffix.lower()
    if suffix == ".png":
        write_png(path, rgb8)
    elif suffix == ".ppm":
        write_ppm(path, rgb8)
    else:
        raise ValueError(f"unsupported output format {suffix!r} (use .png or .ppm)")


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene", required=True, help="scene file path")
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--height", type=int, default=64)
    parser.add_argument("--spp", type=int, default=1, help="samples per pixel")
    parser.add_argument("--photons", type=int, default=0, help="photons per light")
    parser.add_argument("--max-depth", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--subdomains", type=int, default=1)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--max-resident", type=int, default=1)
    parser.add_argument("--load-cost-ms", type=float, default=0.0)


def _config_from_args(args, workers_override: int | None = None) -> RenderConfig:
    workers = args.workers if workers_override is None else workers_override
    env = os.environ.get("SPECTRALIUM_THREADS")
    if env is not None:
        workers = int(env)
    return RenderConfig(
        scene_path=Path(args.scene),
        width=args.width,
        height=args.height,
        samples_per_pixel=args.spp,
        n_photons=args.photons,
        max_depth=args.max_depth,
        seed=args.seed,
        n_subdomains=args.subdomains,
        n_workers=workers,
        max_resident=args.max_resident,
        load_cost_ms=args.load_cost_ms,
        output_path=Path(args.out) if getattr(args, "out", None) else None,
    )


def cmd_render(args) -> int:
    try:
        config = _config_from_args(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        xyz_image, metrics, scene = _render_once(config)
    except (SceneError, SpdParseError, SpdFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DdmError as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return EXIT_RENDER
    try:
        if config.output_path is not None:
            _write_image(config.output_path, xyz_image, scene)
    except (OSError, ValueError) as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(metrics.summary())
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def cmd_bench(args) -> int:
    """Cross product of worker and sub-domain counts; CSV plus a median
    wall-time matrix (rows: sub-domains, columns: workers)."""
    try:
        workers_list = _int_list(args.workers_list)
        subdomains_list = _int_list(args.subdomains_list)
        if not workers_list or not subdomains_list or args.reps < 1:
            raise ValueError("need at least one worker count, sub-domain count and rep")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    rows = []
    walls: dict[tuple[int, int], list[float]] = {}
    for n_sub in subdomains_list:
        for n_workers in workers_list:
            for rep in range(args.reps):
                try:
                    config = _config_from_args(args, workers_override=n_workers)
                    config.n_subdomains = n_sub
                except ValueError as exc:
                    print(f"error: {exc}", file=sys.stderr)
                    return EXIT_PARSE
                try:
                    _, metrics, _ = _render_once(config)
                except (SceneError, SpdParseError, SpdFormatError, ValueError) as exc:
                    print(f"error: {exc}", file=sys.stderr)
                    return EXIT_PARSE
                except DdmError as exc:
                    print(f"render error: {exc}", file=sys.stderr)
                    return EXIT_RENDER
                rows.append(
                    (
                        n_sub,
                        n_workers,
                        rep,
                        metrics.wall_time,
                        sum(metrics.worker_busy),
                        sum(metrics.worker_idle),
                        metrics.load_time_total,
                        metrics.migrations,
                    )
                )
                walls.setdefault((n_sub, n_workers), []).append(metrics.wall_time)

    if args.csv:
        try:
            with open(args.csv, "w", encoding="utf-8") as fh:
                fh.write("subdomains,workers,rep,wall_seconds,busy,idle,load,migrations\n")
                for r in rows:
                    fh.write(
                        f"{r[0]},{r[1]},{r[2]},{r[3]:.6f},{r[4]:.6f},"
                        f"{r[5]:.6f},{r[6]:.6f},{r[7]}\n"
                    )
        except OSError as exc:
            print(f"output error: {exc}", file=sys.stderr)
            return EXIT_IO

    print(format_bench_matrix(subdomains_list, workers_list, walls))
    return EXIT_OK


def format_bench_matrix(
    subdomains_list: list[int],
    workers_list: list[int],
    walls: dict[tuple[int, int], list[float]],
) -> str:
    """Median wall seconds, rows by sub-domain count, columns by workers."""
    header = "subdomains \\ workers" + "".join(f"{w:>12}" for w in workers_list)
    lines = [header]
    for n_sub in subdomains_list:
        cells = "".join(
            f"{statistics.median(walls[(n_sub, w)]):>12.3f}" for w in workers_list
        )
        lines.append(f"{n_sub:>20}{cells}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spectralium",
        description="Multi-spectral physically-based renderer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_render = sub.add_parser("render", help="render a scene to PNG or PPM")
    _common_flags(p_render)
    p_render.add_argument("--out", help="output image (.png or .ppm)")
    p_render.set_defaults(func=cmd_render)

    p_bench = sub.add_parser("bench", help="scaling benchmark over configurations")
    _common_flags(p_bench)
    p_bench.add_argument("--workers-list", default="1", help="comma-separated")
    p_bench.add_argument("--subdomains-list", default="1", help="comma-separated")
    p_bench.add_argument("--reps", type=int, default=1)
    p_bench.add_argument("--csv", help="CSV output path")
    p_bench.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
