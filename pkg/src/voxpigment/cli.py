"""Command-line driver: calibrate, build-lut, convert, preview, stats."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calib, gamut, pipeline, spectral, volume
from .errors import ConfigurationError, VoxPigmentError
from .kmcore import (DEFAULT_DELTA_T_MM, DEFAULT_FIT_SAMPLES, DEFAULT_T_MAX_MM,
                     DEFAULT_T_REF_MM, PIGMENTS, fit_error, fit_sigma_band, mix_ks, pure,
                     sigma_scalar, concentration_to_rgb)

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2
COLOR_LUT_NAME = "color_lut.vppl"
RHOK_LUT_NAME = "rhok_lut.vppr"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _pigment_args(p):
    g = p.add_argument_group("pigments")
    g.add_argument("--calibration", type=Path, help="calibration JSON (solved if needed)")
    g.add_argument("--recipe", default="default", choices=sorted(calib.RECIPES),
                   help="synthetic pigment recipe used when no calibration is given")


def _density_args(p):
    p.add_argument("--t-ref", type=_positive(float), default=DEFAULT_T_REF_MM,
                   help="reference layer thickness for colour (mm)")
    p.add_argument("--delta-t", type=_positive(float), default=DEFAULT_DELTA_T_MM,
                   help="thickness step used to collapse per-band densities (mm)")
    p.add_argument("--t-max", type=_positive(float), default=DEFAULT_T_MAX_MM,
                   help="largest thickness sampled when fitting densities (mm)")
    p.add_argument("--fit-samples", type=_positive(int), default=DEFAULT_FIT_SAMPLES,
                   help="thickness samples used when fitting densities")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="voxpigment", formatter_class=fmt,
                     description="Convert radiance volumes into printable pigment voxels.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", formatter_class=fmt,
                       help="solve per-band absorption/scattering from R/T measurements")
    p.add_argument("--measurements", type=Path, help="calibration JSON with measurements")
    p.add_argument("--recipe", default="default", choices=sorted(calib.RECIPES),
                   help="synthesize measurements from this recipe when --measurements is absent")
    p.add_argument("--thickness", type=_positive(float), default=1.0,
                   help="sample thickness for synthesized measurements (mm)")
    p.add_argument("-o", "--out", type=Path, default=Path("calibration.json"))

    p = sub.add_parser("build-lut", formatter_class=fmt,
                       help="build the colour and brightness lookup tables")
    _pigment_args(p)
    p.add_argument("--resolution", type=int, default=gamut.DEFAULT_LUT_RESOLUTION,
                   help="colour LUT nodes per axis (resolution^3 entries)")
    p.add_argument("--rhok-entries", type=int, default=gamut.DEFAULT_RHOK_ENTRIES,
                   help="brightness samples in the black-fraction LUT")
    p.add_argument("--t-ref", type=_positive(float), default=DEFAULT_T_REF_MM,
                   help="reference layer thickness for colour (mm)")
    p.add_argument("--workers", type=_positive(int), default=1)
    p.add_argument("--out-dir", type=Path, default=Path("luts"))

    p = sub.add_parser("convert", formatter_class=fmt,
                       help="convert a radiance volume into label slices")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", type=Path, help="RVOL input file")
    src.add_argument("--synth", choices=sorted(volume.GENERATOR_PARAMS),
                     help="generate a synthetic input volume")
    p.add_argument("--dims", type=int, nargs=3, default=(32, 32, 32), metavar=("NX", "NY", "NZ"),
                   help="dimensions of a synthetic volume")
    p.add_argument("--synth-seed", type=int, default=0, help="seed of a synthetic volume")
    _pigment_args(p)
    _density_args(p)
    p.add_argument("--lut-dir", type=Path, default=Path("luts"))
    p.add_argument("--out", type=Path, default=Path("slices"))
    p.add_argument("--seed", type=int, default=0, help="halftone seed")
    p.add_argument("--workers", type=_positive(int), default=1)
    p.add_argument("--density-scale", type=float, default=1.0,
                   help="multiply input densities to map scene units to per-mm print units")
    p.add_argument("--rho-plus-cap", type=float, default=0.1,
                   help="largest gray fraction blended in to raise density")
    p.add_argument("--empty-threshold", type=float, default=1e-3,
                   help="densities below this (per mm) are printed as nothing")
    p.add_argument("--dilution", choices=("matched", "closed-form"), default="matched",
                   help="how the Clear fraction is chosen when lowering density")
    p.add_argument("--exterior", choices=("air", "clear"), default="air",
                   help="what empty voxels become")
    p.add_argument("--srgb-input", action="store_true",
                   help="input colours are display-encoded sRGB; decode to linear first")
    p.add_argument("--baseline", choices=("none", "brute-force"), default="none",
                   help="emit the neighbourhood-average baseline instead")
    p.add_argument("--neighborhood", type=int, default=3, help="baseline box size (odd)")

    p = sub.add_parser("preview", formatter_class=fmt, help="render label slices to PNG")
    p.add_argument("--slices", type=Path, required=True, help="directory written by convert")
    _pigment_args(p)
    p.add_argument("--axes", default="z", help="comma-separated view axes from x,y,z")
    p.add_argument("--source", type=Path, help="also render this RVOL file")
    p.add_argument("--mix-radius", type=int, default=0,
                   help="blend label colours over a (2r+1)^3 box")
    p.add_argument("--color-thickness", type=_positive(float), default=DEFAULT_T_REF_MM,
                   help="thickness at which pigment colours are evaluated (mm)")
    p.add_argument("--delta-t", type=_positive(float), default=DEFAULT_DELTA_T_MM)
    p.add_argument("--out", type=Path, default=Path("preview"))

    p = sub.add_parser("stats", formatter_class=fmt, help="print pigment and table diagnostics")
    _pigment_args(p)
    _density_args(p)
    p.add_argument("--tables", action="store_true",
                   help="dump the colorimetry tables (observer, illuminant, RGB matrix)")
    p.add_argument("--lut-dir", type=Path, help="also report LUT coverage from this directory")
    return parser


# ---------------------------------------------------------------------------

def _pigment_set(args):
    if args.calibration is None:
        return calib.synth_pigment_set(args.recipe)
    cal = calib.load_calibration(args.calibration)
    if cal.solved is None:
        cal = calib.solve_calibration(cal)
        if cal.flagged:
            print(f"warning: calibration has flagged bands: {cal.flagged}", file=sys.stderr)
    return cal.solved


def _load_luts(lut_dir: Path):
    cpath, rpath = lut_dir / COLOR_LUT_NAME, lut_dir / RHOK_LUT_NAME
    for path in (cpath, rpath):
        if not path.exists():
            raise ConfigurationError(f"missing lookup table {path}; run build-lut first")
    return gamut.load_color_lut(cpath), gamut.load_rhok_lut(rpath)


def cmd_calibrate(args) -> int:
    if args.measurements is not None:
        cal = calib.load_calibration(args.measurements)
    else:
        cal = calib.synth_calibration(args.recipe, args.thickness)
    cal = calib.solve_calibration(cal)
    calib.save_calibration(cal, args.out)
    print(f"wrote {args.out} ({len(cal.solved.profiles)} pigments)")
    if cal.flagged:
        for pig, bands in cal.flagged.items():
            print(f"flagged {pig}: bands {bands}")
        return EXIT_FLAGGED
    print("no flagged bands")
    return EXIT_OK


def cmd_build_lut(args) -> int:
    if args.resolution < 2:
        raise ConfigurationError(f"--resolution must be >= 2, got {args.resolution}")
    if args.rhok_entries < 2:
        raise ConfigurationError(f"--rhok-entries must be >= 2, got {args.rhok_entries}")
    pset = _pigment_set(args)
    key = gamut.lut_key(pset, args.t_ref)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    cpath, rpath = args.out_dir / COLOR_LUT_NAME, args.out_dir / RHOK_LUT_NAME
    for path, loader in ((cpath, gamut.load_color_lut), (rpath, gamut.load_rhok_lut)):
        if path.exists():
            try:
                stale = loader(path).key != key
            except VoxPigmentError:
                stale = True
            if stale:
                print(f"notice: overwriting stale cache {path}")
    lut = gamut.build_color_lut(pset, args.resolution, args.t_ref, args.workers)
    rhok = gamut.build_rhok_lut(pset, args.rhok_entries, args.t_ref)
    gamut.save_color_lut(lut, cpath)
    gamut.save_rhok_lut(rhok, rpath)
    print(f"wrote {cpath} ({args.resolution}^3) and {rpath} ({args.rhok_entries})")
    print(f"key {key.hex()}")
    print(f"gamut coverage (residual < 0.02): {lut.coverage(0.02):.4f}")
    return EXIT_OK


def _input_volume(args) -> volume.RadianceVolume:
    if args.volume is not None:
        vol = volume.load_rvol(args.volume)
    else:
        vol = volume.synth_volume(args.synth, tuple(args.dims), args.synth_seed)
    if args.srgb_input:
        vol = vol.linearized()
    if args.density_scale != 1.0:
        vol = vol.scaled(args.density_scale)
    return vol


def cmd_convert(args) -> int:
    vol = _input_volume(args)
    pset = _pigment_set(args)
    if args.baseline == "brute-force":
        labels = pipeline.brute_force_convert(vol, pset, args.neighborhood, args.t_ref,
                                              args.empty_threshold)
        hist = labels.histogram()
        report = {"baseline": "brute-force", "neighborhood": args.neighborhood,
                  "label_histogram": hist, "volume_digest": vol.digest()}
        flagged = 0
    else:
        params = pipeline.AlignmentParams(
            rho_plus_cap=args.rho_plus_cap, sigma_empty_threshold=args.empty_threshold,
            delta_t_mm=args.delta_t, t_ref_mm=args.t_ref, t_max_mm=args.t_max,
            fit_samples=args.fit_samples, dilution=args.dilution)
        color_lut, rhok_lut = _load_luts(args.lut_dir)
        result = pipeline.convert(vol, pset, color_lut, rhok_lut, params, args.seed,
                                  args.workers, exterior=args.exterior)
        labels = result.labels
        report = result.report.to_dict()
        flagged = result.report.flagged
    manifest = pipeline.export_slices(labels, args.out, args.seed, args.workers)
    (args.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest['layers'])} layers to {args.out}")
    print("labels: " + ", ".join(f"{k}={v}" for k, v in report["label_histogram"].items()))
    if "color_residual" in report:
        r = report["color_residual"]
        print(f"colour residual p50={r['p50']:.4f} p95={r['p95']:.4f} max={r['max']:.4f}")
        print(f"flags: {report['flag_counts']}  branches: {report['branch_counts']}")
    return EXIT_FLAGGED if flagged else EXIT_OK


def cmd_preview(args) -> int:
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    bad = [a for a in axes if a not in ("x", "y", "z")]
    if bad or not axes:
        raise ConfigurationError(f"--axes must list x, y and/or z; got {args.axes!r}")
    labels = pipeline.import_slices(args.slices)
    pset = _pigment_set(args)
    params = pipeline.PreviewParams(args.color_thickness, args.mix_radius, args.delta_t)
    source = volume.load_rvol(args.source) if args.source else None
    args.out.mkdir(parents=True, exist_ok=True)
    for axis in axes:
        img = pipeline.preview_render(labels, pset, axis, params)
        path = args.out / f"preview_{axis}.png"
        pipeline.save_preview_png(img, path)
        print(f"wrote {path} mean rgba {np.round(img.reshape(-1, 4).mean(0), 4).tolist()}")
        if source is not None:
            simg = pipeline.preview_radiance(source, axis)
            spath = args.out / f"source_{axis}.png"
            pipeline.save_preview_png(simg, spath)
            print(f"wrote {spath} mean rgba {np.round(simg.reshape(-1, 4).mean(0), 4).tolist()}")
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.tables:
        print(json.dumps(spectral.default_colorimeter().tables(), indent=1))
        return EXIT_OK
    pset = _pigment_set(args)
    print(f"pigment set {pset.digest()[:16]}  t_max={args.t_max} mm  "
          f"samples={args.fit_samples}  delta_t={args.delta_t} mm")
    print(f"{'pigment':>7} {'sigma/mm':>9} {'fit mean%':>9} {'fit max%':>9}  rgb@t_ref")
    for label in PIGMENTS:
        c = pure(label)
        K, S = mix_ks(pset, c)
        sig_b = fit_sigma_band(K, S, args.t_max, args.fit_samples)
        err = fit_error(K, S, sig_b, args.t_max, args.fit_samples) * 100
        sigma = sigma_scalar(pset, c, args.delta_t, args.t_max, args.fit_samples)
        rgb = concentration_to_rgb(pset, c, args.t_ref)
        print(f"{label:>7} {float(sigma):9.4f} {err.mean():9.4f} {err.max():9.4f}  "
              f"{np.round(rgb, 4).tolist()}")
    if args.lut_dir is not None:
        color_lut, _ = _load_luts(args.lut_dir)
        print(f"LUT {color_lut.resolution}^3 coverage (residual < 0.02): "
              f"{color_lut.coverage(0.02):.4f}")
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "build-lut": cmd_build_lut, "convert": cmd_convert,
            "preview": cmd_preview, "stats": cmd_stats}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (VoxPigmentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
