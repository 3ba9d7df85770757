"""Command line entry point: simulate, ulm, report, selftest."""
from __future__ import annotations

import argparse
import ast
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, default_config, load_config
from .volume import Volume

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT = 0, 1, 2


class InputMismatch(RuntimeError):
    pass


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _config_from_args(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.seed if args.seed is not None else 0)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v.strip())
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _log(msg: str, quiet: bool = False):
    if not quiet:
        print(msg, file=sys.stderr)


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .trackloop import SafetyViolation, check_record, run_closed_loop

    cfg = _config_from_args(args)
    t0 = time.perf_counter()
    try:
        record = run_closed_loop(cfg)
    except SafetyViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    out = record.save(args.out, volume_stride=args.volume_stride)
    problems = check_record(record)
    _log(f"simulated {record.n_frames} frames in {time.perf_counter() - t0:.1f} s; "
         f"retention {100 * record.retention():.1f}%; config {record.config_hash} -> {out}", args.quiet)
    for p in problems:
        print(f"invariant violated: {p}", file=sys.stderr)
    return EXIT_INVARIANT if problems else EXIT_OK


# -- ulm ----------------------------------------------------------------------

def _write_maps(out: Path, result, h: str):
    from .beamform import log_mip

    sm = result.smoothed
    io.write_volume(out / "density", Volume(result.maps.density, result.maps.grid), h)
    io.write_volume(out / "speed", Volume(result.maps.speed, result.maps.grid), h)
    io.write_volume(out / "density_smoothed", Volume(sm.density, sm.grid), h)
    io.write_volume(out / "speed_smoothed", Volume(sm.speed, sm.grid), h)
    io.write_volume(out / "mean_contrast", result.mean_contrast, h)
    io.write_pgm(out / "density_mip.pgm", log_mip(sm.density, 30.0, axis=2))
    speed_mip = sm.speed.max(axis=2)
    top = speed_mip.max()
    io.write_pgm(out / "speed_mip.pgm", speed_mip / top * 255.0 if top > 0 else speed_mip)
    io.write_pgm(out / "contrast_mip.pgm", log_mip(result.mean_contrast, 20.0, axis=2))


def cmd_ulm(args) -> int:
    from . import ulm
    from .trackloop import AcquisitionRecord

    record = AcquisitionRecord.load(args.record)
    h = record.config_hash
    t0 = time.perf_counter()
    result = ulm.run_ulm(record)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ulm.write_localizations_csv(out / "localizations.csv", result.localizations, h)
    ulm.write_tracks_csv(out / "tracks.csv", result.tracks, h)
    io.write_csv(out / "translations.csv", ["frame", "tx", "ty", "tz", "iterations"],
                 ((k, *t.as_array(), r.iterations if r is not None else 0)
                  for k, (t, r) in enumerate(zip(result.translations, result.registration))), h)
    _write_maps(out, result, h)
    _log(f"{result.n_localizations} localizations, {len(result.tracks)} tracks, "
         f"{result.invalid_voxels} invalid voxels in {time.perf_counter() - t0:.1f} s -> {out}", args.quiet)
    return EXIT_OK


# -- report -------------------------------------------------------------------

def _check_hashes(record_dir: Path, ulm_dir: Path | None, expected: str):
    files = [record_dir / n for n in ("poses.csv", "events.csv", "iterations.csv", "ground_truth.csv")]
    if ulm_dir is not None:
        files += [ulm_dir / n for n in ("localizations.csv", "tracks.csv", "translations.csv")]
    for f in files:
        if io.csv_hash(f) != expected:
            raise InputMismatch(f"{f} carries config hash {io.csv_hash(f)}, expected {expected}")
    if ulm_dir is not None:
        for f in sorted(ulm_dir.glob("*.hdr")):
            h = io.read_header(f).get("config_hash", "")
            if h != expected:
                raise InputMismatch(f"{f} carries config hash {h}, expected {expected}")


def build_report(record, ulm_dir: Path | None = None):
    """Text report plus CSV tables (name -> (header, rows))."""
    from . import metrics
    from .scene import ProbePose

    cfg = record.config
    h = record.config_hash
    series = metrics.residual_series(record, window=cfg.metrics.centroid_window,
                                     threshold=cfg.metrics.onset_threshold)
    stats = metrics.residual_statistics(series)
    lines = [f"config_hash = {h}", f"seed = {cfg.seed}", f"frames = {record.n_frames}",
             f"profile = {cfg.scene.profile.kind} ({cfg.scene.profile.direction})",
             f"tracking = {'on' if cfg.tracking.enabled else 'off'}", ""]
    # retention with the recorded probe path and with the probe held at its start pose
    lo = record.crop_grid.origin - record.crop_grid.spacing / 2
    hi = record.crop_grid.upper + record.crop_grid.spacing / 2
    still = ProbePose(tuple(record.probe[0]), record.yaw_deg)
    off = np.array([still.to_probe(record.world.phantom.landmark_center + s) for s in record.stage])
    off_ret = float(np.mean(np.all((off >= lo) & (off <= hi), axis=1))) if len(off) else 1.0
    lines += ["FoV retention",
              f"  recorded run: {100 * record.retention():.2f}%",
              f"  probe held still: {100 * off_ret:.2f}%", ""]
    lines.append("Residual displacement during stage motion (mm)")
    lines.append(f"  onset frame: {series.onset}")
    lines.append("  speed_mm_s  direction  mean  std  frames")
    for s in stats:
        lines.append(f"  {s.speed:.2f}  {s.direction}  {s.mean:.4f}  {s.std:.4f}  {s.n}")
    tables = {"residual_stats.csv": (["speed", "direction", "mean", "std", "frames"],
                                     [(s.speed, s.direction, s.mean, s.std, s.n) for s in stats]),
              "residual_series.csv": (["frame", "time", "dx", "dy", "moving", "speed_level"],
                                      [(k, series.times[k], *series.displacement[k], int(series.moving[k]),
                                        series.speed_level[k]) for k in range(len(series.times))])}
    speeds = [s.speed for s in stats if s.speed > 0]
    if len(set(speeds)) >= 2:
        fit = metrics.linear_fit(speeds, [s.mean for s in stats if s.speed > 0])
        lines += ["", "Linear fit of mean residual against speed",
                  f"  slope = {fit.slope:.5f} mm per mm/s", f"  intercept = {fit.intercept:.5f} mm",
                  f"  R2 = {fit.r2:.4f}"]
    else:
        lines += ["", "Linear fit: fewer than two speed levels"]
    if ulm_dir is not None:
        lines += [""] + _ulm_section(record, ulm_dir, tables)
    return "\n".join(lines) + "\n", tables


def _ulm_section(record, ulm_dir: Path, tables):
    from . import metrics, ulm
    from .registration import downsample

    h, _, rows = io.read_csv(ulm_dir / "tracks.csv")
    tracks = {}
    for r in rows:
        tracks.setdefault(int(r[0]), []).append(
            ulm.Localization((float(r[3]), float(r[4]), float(r[5])), 1.0, int(r[1]), float(r[2])))
    u = record.config.ulm
    track_list = []
    for i in sorted(tracks):
        tr = ulm.Track(tracks[i])
        tr.velocities = ulm.estimate_velocities(tr.positions, tr.times, u.velocity_window)
        track_list.append(tr)
    dens = io.read_volume(ulm_dir / "density_smoothed")
    grid = dens.grid
    lines = ["Super-resolution maps", f"  tracks = {len(track_list)}"]
    speeds = np.concatenate([t.link_speeds() for t in track_list]) if track_list else np.zeros(0)
    if len(speeds):
        lines.append(f"  mean link speed = {speeds.mean():.4f} mm/s "
                     f"(configured flow {record.world.flow_speed:.4f} mm/s)")
    axis = 1
    dip, _ = metrics.ridge_dip(metrics.cross_profile(dens, axis))
    coarse = downsample(io.read_volume(ulm_dir / "mean_contrast"), 4)
    dip_c, _ = metrics.ridge_dip(metrics.cross_profile(coarse, axis))
    lines += [f"  ridge dip, super-resolved density = {dip:.3f}",
              f"  ridge dip, 0.4 mm contrast image = {dip_c:.3f}"]
    if len(track_list) >= 2:
        odd, even = metrics.split_tracks_odd_even(track_list, grid)
        so = ulm.smooth_maps(odd, u.density_fwhm, u.speed_ball_diameter)
        se = ulm.smooth_maps(even, u.density_fwhm, u.speed_ball_diameter)
        try:
            res = metrics.fsc(Volume(so.density, grid), Volume(se.density, grid),
                              pad_cube=record.config.metrics.fsc_pad_cube)
            lines.append(f"  FSC half-bit resolution = {res.resolution_um:.1f} um"
                         + ("" if res.crossed else " (no crossing; Nyquist limit)"))
            tables["fsc.csv"] = (["frequency_per_mm", "fsc", "half_bit", "n_voxels"],
                                 list(zip(res.frequency, res.correlation, res.threshold, res.n_voxels)))
        except ValueError as exc:
            lines.append(f"  FSC unavailable: {exc}")
    else:
        lines.append("  FSC unavailable: fewer than two tracks")
    return lines


def cmd_report(args) -> int:
    from .trackloop import AcquisitionRecord

    record_dir = Path(args.record)
    ulm_dir = Path(args.ulm) if args.ulm else None
    record = AcquisitionRecord.load(record_dir)
    try:
        _check_hashes(record_dir, ulm_dir, record.config_hash)
    except InputMismatch as exc:
        print(f"refusing mismatched inputs: {exc}", file=sys.stderr)
        return EXIT_INPUT
    text, tables = build_report(record, ulm_dir)
    out = Path(args.out) if args.out else record_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    for name, (header, rows) in tables.items():
        io.write_csv(out / name, header, rows, record.config_hash)
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


# -- selftest -----------------------------------------------------------------

def selftest_checks():
    """(name, callable returning (ok, detail)) pairs; quick sanity of every layer."""
    from . import acoustics, kernels, metrics, ulm
    from .scene import (BUBBLE, TISSUE, ArraySpec, ScattererSet, trapezoid_duration)
    from .trackloop import Workspace, check_record, clamp_to_workspace, robot_move_duration, run_closed_loop

    def backends():
        rng = np.random.default_rng(0)
        pts = rng.uniform([-1, -1, 4], [1, 1, 6], (5, 3))
        amps = rng.uniform(0.5, 1, 5)
        a = kernels.splat_gaussians(pts, amps, np.array([-2.0, -2.0, 3.0]), np.array([0.2] * 3), (20, 20, 15),
                                    np.array([0.17, 0.17, 0.1]))
        b = kernels.python_backend.splat_gaussians(pts, amps, np.array([-2.0, -2.0, 3.0]), np.array([0.2] * 3),
                                       (20, 20, 15), np.array([0.17, 0.17, 0.1]))
        err = float(np.max(np.abs(a - b)))
        return err < 1e-12, f"backend {kernels.BACKEND}, max difference {err:.2e}"

    def am():
        s = ScattererSet([[0.3, -0.2, 8.0], [-0.5, 0.4, 9.0]], [1.0, 0.7], [TISSUE, TISSUE])
        arr = ArraySpec(8, 8, 2.4, 2.4)
        params = acoustics.ChannelParams(depth=12.0)
        tri = acoustics.simulate_am_triplet(s, arr, params)
        res = acoustics.am_subtract(tri).samples
        ratio = float(np.sum(res ** 2) / np.sum(tri.full.samples ** 2))
        return ratio < 1e-10, f"tissue residual energy ratio {ratio:.1e}"

    def kinematics():
        d = (robot_move_duration(10.0), robot_move_duration(5.0), trapezoid_duration(20.0, 2.0, 3.0))
        ok = abs(d[0] - 0.4) < 1e-12 and abs(d[1] - 0.28284271) < 1e-8 and abs(d[2] - 10.6666667) < 1e-6
        return ok, f"durations {d[0]:.4f}, {d[1]:.4f}, {d[2]:.4f} s"

    def workspace():
        ws = Workspace()
        got = [clamp_to_workspace(t, ws).accepted for t in ((49, 0, 0), (51, 0, 0), (0, 0, 6))]
        return got == [True, False, False], f"accepted {got}"

    def fsc_identity():
        v = np.random.default_rng(1).random((16, 16, 16))
        r = metrics.fsc(v, v)
        return bool(np.allclose(r.correlation, 1.0)), f"min shell correlation {r.correlation.min():.12f}"

    def persistence():
        mk = lambda n: ulm.Track([ulm.Localization((0.0, 0.0, 0.0), 1.0, i, i / 85) for i in range(n)])
        kept = [len(t) for t in ulm.persistence_filter([mk(3), mk(4)], 4)]
        return kept == [4], f"kept lengths {kept}"

    def short_loop():
        cfg = default_config(7, **{"acquisition.duration": 1.0})
        r1, r2 = run_closed_loop(cfg), run_closed_loop(cfg)
        same = np.array_equal(r1.probe, r2.probe) and r1.events == r2.events
        problems = check_record(r1)
        return same and not problems, f"{r1.n_frames} frames, deterministic={same}, violations={problems}"

    return [("kernel backends agree", backends), ("AM cancels tissue", am), ("move durations", kinematics),
            ("workspace bounds", workspace), ("FSC of identical volumes", fsc_identity),
            ("persistence boundary", persistence), ("closed loop determinism", short_loop)]


def cmd_selftest(args) -> int:
    failed = 0
    for name, fn in selftest_checks():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_INVARIANT if failed else EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulmtrack", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the closed-loop acquisition and write a record directory")
    s.add_argument("--config", help="TOML experiment config (defaults when omitted)")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. acquisition.duration=5")
    s.add_argument("--volume-stride", type=int, default=None, help="write every n-th crop volume (0: none)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    u = sub.add_parser("ulm", help="super-resolution pipeline on a record directory")
    u.add_argument("record")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_ulm)

    r = sub.add_parser("report", help="residual, retention, regression and FSC summary")
    r.add_argument("record")
    r.add_argument("--ulm", help="output directory of the ulm subcommand")
    r.add_argument("--out", help="report directory (default <record>/report)")
    r.set_defaults(func=cmd_report)

    t = sub.add_parser("selftest", help="quick internal consistency checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        if "different config" in str(exc):
            print(f"refusing mismatched inputs: {exc}", file=sys.stderr)
            return EXIT_INPUT
        raise


if __name__ == "__main__":
    sys.exit(main())
