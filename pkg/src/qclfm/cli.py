"""Command-line entry point.

Every subcommand reads a JSON config (the bundled paper preset by default),
applies flag overrides, and writes its products into ``--out``: binary
(EVT1/FLD1/DPT1), delimited text (CSV), previews (PGM/PPM), a PNG report
figure and ``summary.json``. Commands that consume coincidences take
``--events`` or, without it, simulate an acquisition from the config.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .coincidence import (PAIRS_HEADER, Calibration, FitError, accidental_floor, ghost_image, idler_singles,
                          joint_momentum_histogram, fit_gaussian, pair_events, split_arms)
from .config import ConfigError, ExperimentConfig, load_config, load_preset, with_overrides
from .fields import AliasingWarning, ComplexField
from .io import (FormatError, read_events, write_csv, write_depth, write_events, write_field, write_json,
                 write_pgm, write_ppm)
from .metrics import REPORT_HEADER, conventional_dof, dof_curve, non_decreasing_in_abs_z, resolvability
from .pipeline import (camera_events, camera_records, depth_seed, ideal_idler_singles, ideal_records,
                       parallel_map, thread_count)
from .refocus import RefocusWarning, refocus
from .source import TRUTH_HEADER, momentum_sigma
from .volumetric import all_in_focus, depth_map, depth_preview_rgb, depth_values, sweep

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# sum-coordinate histogram half-width, in idler pixels
SUM_RANGE_PX = 6
GHOST_MIN_SINGLES = 20
DOF_E_UM = (5.0, 10.0)
THRESHOLD_SENSITIVITY = (0.1, 0.2, 0.3)


class NumericalFailure(RuntimeError):
    """A computation produced no usable result."""


# --- configuration ------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else load_preset("paper")
    recon = {}
    for flag, key in (("z_um", "z_um"), ("z_min_um", "z_min_um"), ("z_max_um", "z_max_um"),
                      ("z_step_um", "z_step_um"), ("iterations", "iterations"), ("gate_ns", "gate_ns"),
                      ("threshold", "threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            recon[key] = value
    over = {}
    if recon:
        over["reconstruction"] = recon
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "duration_s", None) is not None:
        over["simulation"] = {"duration_s": args.duration_s}
    return with_overrides(cfg, **over) if over else cfg


def _workers() -> int:
    try:
        return thread_count()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _n_pairs(cfg: ExperimentConfig) -> int:
    return int(round(cfg.source.pair_rate_per_s * cfg.simulation.duration_s))


def _signal_sigma(cfg: ExperimentConfig, cal: Calibration) -> float:
    return cfg.source.signal_sigma(cal.idler_k_per_px)


def simulate_run(cfg: ExperimentConfig, scene="config", fourier_signal=None, keep_truth=False):
    """Camera-chain acquisition for ``cfg``; ``scene="config"`` builds the configured scene."""
    cal = cfg.calibration()
    scene = cfg.build_scene() if scene == "config" else scene
    fourier = cfg.simulation.fourier_signal if fourier_signal is None else fourier_signal
    det = cfg.detector
    return camera_events(
        scene, cfg.source.pump(), cfg.simulation.duration_s, cfg.seed, cal,
        cfg.signal_camera(), None if det.mode == "single_camera" else cfg.idler_camera(),
        det.idler_region(), cfg.illumination.illumination(), _signal_sigma(cfg, cal),
        fourier_signal=fourier, keep_truth=keep_truth, batch_size=cfg.simulation.batch_pairs,
        gap_px=det.gap_px, window_ns=det.window_ns,
    )


def _ideal(cfg: ExperimentConfig, scene, seed: int):
    if scene is None:
        raise ConfigError("scene: ideal detection needs a target (scene type 'none' given)")
    cal = cfg.calibration()
    return ideal_records(scene, cfg.source.pump(), _n_pairs(cfg), seed, cfg.simulation.ideal(),
                         cfg.illumination.illumination(), _signal_sigma(cfg, cal),
                         batch_size=cfg.simulation.batch_pairs)


def acquire(cfg: ExperimentConfig, events_path=None, fourier_signal=None, calibration=None):
    """Coincidence records plus bookkeeping, from an event file or a fresh simulation.

    Returns ``(records, info, events)``; ``events`` is ``None`` for ideal detection.
    """
    cal = cfg.calibration() if calibration is None else calibration
    region = cfg.detector.idler_region()
    gate = cfg.reconstruction.gate_ns
    if events_path is not None:
        events = read_events(events_path)
        info = {"source": "events", "events": int(len(events))}
    elif cfg.simulation.detection == "ideal" and not fourier_signal:
        records = _ideal(cfg, cfg.build_scene(), cfg.seed)
        return records, {"source": "ideal", "pairs": _n_pairs(cfg), "coincidences": len(records)}, None
    else:
        run = simulate_run(cfg, fourier_signal=fourier_signal)
        events = run.events
        info = {"source": "camera", **run.summary()}
    records = pair_events(events, gate, region, cal)
    info["coincidences"] = int(len(records))
    return records, info, events


# --- products -------------------------------------------------------------------------


def _real_field(image, pitch_um, wavelength_um) -> ComplexField:
    return ComplexField(np.nan_to_num(np.asarray(image, dtype=float)).astype(np.complex128), pitch_um, wavelength_um)


def _summary(out: Path, command: str, cfg: ExperimentConfig, **fields) -> dict:
    summary = {"command": command, "version": __version__, **fields, "config": cfg.to_dict()}
    write_json(out / "summary.json", summary)
    return summary


def _require_records(records, what="reconstruction"):
    if len(records) == 0:
        raise NumericalFailure(f"no coincidences to use for the {what}")


# --- subcommands -------------------------------------------------------------------------


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> dict:
    run = simulate_run(cfg, keep_truth=args.dump_truth)
    write_events(out / "events.evt", run.events)
    cam = cfg.detector.signal_camera
    plotting.plot_events(run.events, out / "events.png", cam.width_px, cam.height_px)
    if args.dump_truth and run.truth is not None:
        write_csv(out / "truth.csv", TRUTH_HEADER, run.truth.truth_columns())
    return _summary(out, "simulate", cfg, duration_s=cfg.simulation.duration_s, **run.summary())


def cmd_reconstruct(args, cfg: ExperimentConfig, out: Path) -> dict:
    rc = cfg.reconstruction
    records, info, _ = acquire(cfg, args.events)
    _require_records(records)
    grid = rc.grid(cfg.wavelength_um)
    shifted, result = refocus(records, rc.z_um, grid, rc.iterations, rc.smoothing_px, bilinear=rc.bilinear,
                              tolerance=rc.tolerance, warn_dropped=False)
    if not np.all(np.isfinite(result.field.values)):
        raise NumericalFailure("retrieval produced non-finite values")
    write_field(out / "field.fld", result.field)
    write_pgm(out / "amplitude.pgm", result.amplitude)
    write_pgm(out / "shifted.pgm", shifted.amplitude)
    write_csv(out / "error_trace.csv", ["iter", "residual"],
              [np.arange(1, result.iterations + 1), result.errors])
    if args.pairs_csv:
        write_csv(out / "pairs.csv", PAIRS_HEADER, records.columns())
    plotting.plot_reconstruction(shifted, result, out / "reconstruct.png")
    return _summary(out, "reconstruct", cfg, **info, z_um=rc.z_um, iterations=result.iterations,
                    dropped_off_grid=int(shifted.dropped), final_residual=float(result.errors[-1]))


def _stack(cfg: ExperimentConfig, args):
    rc = cfg.reconstruction
    records, info, _ = acquire(cfg, args.events)
    _require_records(records, "focal stack")
    st = sweep(records, rc.z_min_um, rc.z_max_um, rc.z_step_um, rc.iterations, rc.grid(cfg.wavelength_um),
               rc.smoothing_px, workers=_workers(), bilinear=rc.bilinear, tolerance=rc.tolerance)
    if not np.all(np.isfinite(st.slices)):
        raise NumericalFailure("focal stack contains non-finite values")
    return st, info


def cmd_stack(args, cfg: ExperimentConfig, out: Path) -> dict:
    st, info = _stack(cfg, args)
    lam = cfg.wavelength_um
    index = {}
    for i, (z, s) in enumerate(zip(st.z_um, st.slices)):
        name = f"slice_{i:03d}"
        write_field(out / "stack" / f"{name}.fld", _real_field(s, st.grid.pitch_um, lam))
        write_pgm(out / "stack" / f"{name}.pgm", s)
        index[f"{z:g}"] = f"{name}.fld"
    write_json(out / "stack" / "index.json", index)
    aif = all_in_focus(st)
    write_field(out / "all_in_focus.fld", _real_field(aif.total, st.grid.pitch_um, lam))
    write_pgm(out / "all_in_focus.pgm", aif.preview)
    plotting.plot_stack(st, aif.total, out / "stack.png")
    return _summary(out, "stack", cfg, **info, z_um=[float(z) for z in st.z_um])


def cmd_depth(args, cfg: ExperimentConfig, out: Path) -> dict:
    st, info = _stack(cfg, args)
    if len(st) < 2:
        raise ConfigError("reconstruction: a depth map needs at least two depths in the sweep")
    dm = depth_map(st, cfg.reconstruction.sharpness_window_px)
    aif = all_in_focus(st)
    lam = cfg.wavelength_um
    write_depth(out / "depth.dpt", dm.depth_um, st.grid.pitch_um, lam)
    z_range = (float(st.z_um[0]), float(st.z_um[-1]))
    write_ppm(out / "depth.ppm", depth_preview_rgb(dm, z_range))
    write_pgm(out / "confidence.pgm", dm.confidence)
    write_pgm(out / "all_in_focus.pgm", aif.preview)
    plotting.plot_depth(dm, aif.total, st.grid.pitch_um, out / "depth.png", z_range)
    counts = {f"{z:g}": int(np.sum(~dm.background & (dm.index == i))) for i, z in enumerate(st.z_um)}
    return _summary(out, "depth", cfg, **info, z_um=[float(z) for z in st.z_um],
                    foreground_fraction=dm.foreground_fraction, background_threshold=dm.threshold,
                    pixels_per_depth=counts)


def cmd_fit_momentum(args, cfg: ExperimentConfig, out: Path) -> dict:
    base = cfg.calibration()
    # both arms image the crystal's far field: signal pixels read out in 1/um too
    cal = Calibration(base.signal_center_px, base.idler_k_per_px, base.idler_center_px, base.idler_k_per_px)
    records, info, events = acquire(cfg, args.events, fourier_signal=True, calibration=cal)
    pitch = cal.idler_k_per_px
    background = None
    if events is not None:
        background = accidental_floor(events, cfg.reconstruction.gate_ns, cfg.detector.idler_region(), cal)
        info["accidentals"] = int(len(background))
    cam = cfg.detector.signal_camera
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hist = joint_momentum_histogram(records, cam.width_px / 2 * pitch, pitch / 4,
                                        sum_range=SUM_RANGE_PX * pitch, background=background)
    profiles = {"x": np.maximum(hist.sum_profile_x(2), 0.0), "y": np.maximum(hist.sum_profile_y(2), 0.0)}
    fits = [fit_gaussian(p, hist.sum_centers, pitch) for p in profiles.values()]
    e = hist.sum_edges
    write_field(out / "sum_hist.fld", _real_field(hist.sum_hist, e[1] - e[0], cfg.wavelength_um))
    write_pgm(out / "sum_hist.pgm", hist.sum_hist)
    write_pgm(out / "joint_x.pgm", hist.joint_x.T)
    write_csv(out / "profiles.csv", ["k_per_um", "profile_x", "profile_y"],
              [hist.sum_centers, profiles["x"], profiles["y"]])
    plotting.plot_momentum(hist, {"profiles": profiles, "fits": fits}, out / "momentum.png")
    fit_info = {name: {"a": f.a, "b_per_um": f.b, "sigma_per_um": f.sigma, "sigma_px": f.sigma_px}
                for name, f in zip(("x", "y"), fits)}
    return _summary(out, "fit-momentum", cfg, **info, fits=fit_info,
                    expected_sigma_per_um=momentum_sigma(cfg.source.pump()),
                    momentum_pitch_per_px=pitch, low_statistics=hist.low_statistics)


def cmd_dof(args, cfg: ExperimentConfig, out: Path) -> dict:
    lam = cfg.wavelength_um
    conv = {f"{e:g}": conventional_dof(cfg.microscope.dof_params(lam, e)) for e in DOF_E_UM}
    write_csv(out / "dof_conventional.csv", ["e_um", "dof_um"], [list(DOF_E_UM), list(conv.values())])
    extra = {"conventional_dof_um": conv}
    if args.conventional_only:
        return _summary(out, "dof", cfg, **extra)
    scene = cfg.build_scene()
    if cfg.scene.type != "usaf" or scene is None:
        raise ConfigError("scene: the depth-of-field sweep needs a 'usaf' scene")
    rc = cfg.reconstruction
    target = scene.targets[0].at(0.0)
    grid = rc.grid(lam)
    z_values = [float(z) for z in depth_values(rc.z_min_um, rc.z_max_um, rc.z_step_um)]

    def image_at(item):
        i, z = item
        seed = depth_seed(cfg.seed, i)
        placed = target.at(z)
        if cfg.simulation.detection == "ideal":
            rec = _ideal(cfg, placed, seed)
        else:
            run = simulate_run(with_overrides(cfg, seed=seed), scene=placed)
            rec = camera_records(run, rc.gate_ns, cfg.detector.idler_region(), cfg.calibration())
        _require_records(rec, f"depth {z:g} um")
        return refocus(rec, z, grid, rc.iterations, rc.smoothing_px, bilinear=rc.bilinear,
                       tolerance=rc.tolerance, warn_dropped=False)[1].amplitude

    images = dict(zip(z_values, parallel_map(image_at, list(enumerate(z_values)), _workers())))
    curve = dof_curve(z_values, images.__getitem__, target, rc.threshold)
    rows = [r for rep in curve.reports for r in rep.rows()]
    write_csv(out / "dof_report.csv", REPORT_HEADER, list(zip(*rows)))
    write_csv(out / "dof_curve.csv", ["z_um", "smallest_um", "median_filtered_um"],
              [curve.z_um, curve.smallest_um, curve.median_filtered()])
    plotting.plot_dof(curve, out / "dof.png")
    sensitivity = {f"{t:g}": [resolvability(images[z], target, t, z_um=z).smallest_resolved_um()
                              for z in z_values] for t in THRESHOLD_SENSITIVITY}
    return _summary(out, "dof", cfg, **extra, z_um=[float(z) for z in z_values],
                    smallest_resolved_um=[float(v) for v in curve.smallest_um],
                    non_decreasing_in_abs_z=non_decreasing_in_abs_z(curve) if len(z_values) >= 3 else None,
                    threshold_sensitivity=sensitivity)


def cmd_ghost(args, cfg: ExperimentConfig, out: Path) -> dict:
    cal = cfg.calibration()
    det = cfg.detector
    if det.mode == "single_camera":
        x0, y0, x1, y1 = det.idler_region_px
        nb = int(round(max(x1 - x0, y1 - y0)))
    else:
        nb = (det.idler_camera or det.signal_camera).width_px
    pitch = cal.idler_k_per_px
    edges = (np.arange(nb + 1) - nb / 2) * pitch
    records, info, events = acquire(cfg, args.events)
    _require_records(records, "ghost image")
    if events is None:
        singles = ideal_idler_singles(cfg.source.pump(), _n_pairs(cfg), cfg.seed, edges,
                                      signal_sigma=_signal_sigma(cfg, cal), batch_size=cfg.simulation.batch_pairs)
    else:
        _, idl = split_arms(events, det.idler_region())
        kx, ky = cal.idler_momenta(idl["x_px"], idl["y_px"])
        singles = idler_singles(kx, ky, edges)
    raw = ghost_image(records, edges)
    norm = ghost_image(records, edges, singles=singles, min_singles=GHOST_MIN_SINGLES)
    write_field(out / "ghost.fld", _real_field(norm, pitch, cfg.wavelength_um))
    write_pgm(out / "ghost.pgm", norm)
    write_pgm(out / "ghost_counts.pgm", raw)
    write_csv(out / "ghost_edges.csv", ["k_edge_per_um"], [edges])
    plotting.plot_ghost(norm, edges, out / "ghost.png")
    return _summary(out, "ghost", cfg, **info, bins=nb, momentum_pitch_per_px=pitch,
                    valid_bins=int(np.isfinite(norm).sum()))


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "stack": cmd_stack,
    "depth": cmd_depth,
    "fit-momentum": cmd_fit_momentum,
    "dof": cmd_dof,
    "ghost": cmd_ghost,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (default: bundled paper preset)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    common.add_argument("--events", type=Path, help="EVT1 file to use instead of simulating")
    common.add_argument("--z-um", dest="z_um", type=float, help="refocus depth")
    common.add_argument("--z-min-um", dest="z_min_um", type=float)
    common.add_argument("--z-max-um", dest="z_max_um", type=float)
    common.add_argument("--z-step-um", dest="z_step_um", type=float)
    common.add_argument("--iterations", type=int, help="Gerchberg-Saxton loops")
    common.add_argument("--gate-ns", dest="gate_ns", type=float, help="total coincidence window")
    common.add_argument("--threshold", type=float, help="bar contrast needed to call an element resolved")
    common.add_argument("--duration-s", dest="duration_s", type=float, help="simulated acquisition time")
    common.add_argument("--dump-truth", dest="dump_truth", action="store_true",
                        help="simulate: also write the ground-truth pairs as truth.csv")

    parser = argparse.ArgumentParser(prog="qclfm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "simulate": "camera-level acquisition to an EVT1 event file",
        "reconstruct": "refocus and retrieve at one depth",
        "stack": "focal stack over a depth sweep plus the all-in-focus image",
        "depth": "depth map from a focal stack",
        "fit-momentum": "momentum-correlation calibration fit",
        "dof": "depth of field: conventional formula and simulated resolvability sweep",
        "ghost": "coincidence image in idler coordinates",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "reconstruct":
            p.add_argument("--pairs-csv", dest="pairs_csv", action="store_true",
                           help="also write the coincidence records as pairs.csv")
        if name == "dof":
            p.add_argument("--conventional-only", dest="conventional_only", action="store_true",
                           help="skip the simulated sweep")
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(f"qclfm: {kind}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _workers()
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AliasingWarning)
            warnings.simplefilter("ignore", RefocusWarning)
            COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except FormatError as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    except (NumericalFailure, FitError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, "numerical failure", exc)
    print(f"qclfm {args.command}: wrote {out}/summary.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
