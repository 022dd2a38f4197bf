"""Radiance volume -> pigment labels.

Per voxel: colour lookup, density alignment (Clear dilution or K/W
augmentation), stochastic halftoning.  Also the neighbourhood-average
baseline, a forward preview renderer and slice export/import.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .errors import ConfigurationError, FormatError
from .gamut import (ColorLut, RhoKLut, gray_concentration, lookup_concentration, lookup_rhok,
                    lut_key, solve_rhok)
from .kmcore import (CLEAR, DEFAULT_DELTA_T_MM, DEFAULT_FIT_SAMPLES, DEFAULT_T_MAX_MM,
                     DEFAULT_T_REF_MM, PIGMENTS, DensityModel, PigmentSet,
                     concentration_to_rgb, pure, sigma_scalar)
from .spectral import mean_brightness, srgb_encode
from .volume import EMPTY, LABEL_NAMES, LabelVolume, RadianceVolume, slabs

FLAG_CAPPED = 1        # target density unreachable even at the gray cap
FLAG_DEGENERATE = 2    # looked-up concentration had zero density
OUT_OF_GAMUT = 0.02    # colour residual counted as out of gamut in reports

SIGMA_HIST_EDGES = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, np.inf)


@dataclass(frozen=True)
class AlignmentParams:
    rho_plus_cap: float = 0.1
    sigma_empty_threshold: float = 1e-3
    delta_t_mm: float = DEFAULT_DELTA_T_MM
    t_ref_mm: float = DEFAULT_T_REF_MM
    t_max_mm: float = DEFAULT_T_MAX_MM
    fit_samples: int = DEFAULT_FIT_SAMPLES
    # "matched" refines the closed-form dilution ratio until the density
    # matches; "closed-form" uses sigma_target / sigma_star as is.
    dilution: str = "matched"
    bisect_iters: int = 40
    match_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.rho_plus_cap <= 1.0:
            raise ConfigurationError(f"rho_plus_cap must lie in [0, 1], got {self.rho_plus_cap}")
        if self.sigma_empty_threshold < 0:
            raise ConfigurationError("sigma_empty_threshold must be >= 0")
        if self.delta_t_mm <= 0 or self.t_ref_mm <= 0 or self.t_max_mm <= 0:
            raise ConfigurationError("delta_t_mm, t_ref_mm and t_max_mm must be positive")
        if self.fit_samples < 1:
            raise ConfigurationError("fit_samples must be >= 1")
        if self.dilution not in ("matched", "closed-form"):
            raise ConfigurationError(f"unknown dilution mode {self.dilution!r}")

    def density_model(self, pset: PigmentSet, tabulated: bool = True) -> DensityModel:
        return DensityModel(pset, self.delta_t_mm, self.t_max_mm, self.fit_samples,
                            tabulated=tabulated)


# ---------------------------------------------------------------------------
# density alignment

def _bisect(f, target, lo, hi, iters, tol, want_upper):
    """Vectorised bisection for f(rho) crossing ``target`` (f increasing on the bracket).

    Stops early per row once f is within ``tol`` relative of the target.
    With ``want_upper`` the returned point satisfies f >= target.
    """
    lo, hi = lo.copy(), hi.copy()
    out = hi.copy() if want_upper else 0.5 * (lo + hi)
    active = np.ones(lo.shape, dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        mid = 0.5 * (lo[idx] + hi[idx])
        val = f(idx, mid)
        above = val >= target[idx]
        hi[idx[above]] = mid[above]
        lo[idx[~above]] = mid[~above]
        close = np.abs(val - target[idx]) <= tol * target[idx]
        done = close & (above | (not want_upper))
        out[idx[done]] = mid[done]
        active[idx[done]] = False
    rest = np.flatnonzero(active)
    out[rest] = hi[rest] if want_upper else 0.5 * (lo[rest] + hi[rest])
    return out


def align_density_batch(density, conc_star, sigma_star, sigma_target, brightness,
                        rhok, params: AlignmentParams = AlignmentParams()):
    """Align many voxels at once.

    ``density`` maps (N, 6) concentrations to sigma; ``rhok`` is a
    :class:`RhoKLut` or a callable brightness -> black fraction.
    Returns (concentrations, rho, flags) where rho is the Clear-free
    fraction for diluted rows and the gray fraction for augmented rows.
    """
    C = np.array(conc_star, dtype=np.float64, copy=True).reshape(-1, len(PIGMENTS))
    ss = np.asarray(sigma_star, dtype=np.float64).reshape(-1)
    st = np.asarray(sigma_target, dtype=np.float64).reshape(-1)
    br = np.asarray(brightness, dtype=np.float64).reshape(-1)
    n = len(C)
    rho = np.ones(n)
    flags = np.zeros(n, dtype=np.uint8)
    tol = params.match_tol
    clear = pure("Cl")

    dil = np.flatnonzero(ss > st * (1 + tol))
    if dil.size:
        Cd = C[dil]
        r0 = st[dil] / ss[dil]
        if params.dilution == "closed-form":
            r = r0
        else:
            def f(idx, x):
                return density(x[:, None] * Cd[idx] + (1 - x[:, None]) * clear)
            s0 = f(np.arange(dil.size), r0)
            r = r0.copy()
            bad = np.flatnonzero(np.abs(s0 - st[dil]) > tol * st[dil])
            if bad.size:
                over = s0[bad] > st[dil][bad]
                r[bad] = _bisect(lambda idx, x: f(bad[idx], x), st[dil][bad],
                                 np.where(over, 0.0, r0[bad]), np.where(over, r0[bad], 1.0),
                                 params.bisect_iters, tol, False)
        C[dil] = r[:, None] * Cd + (1 - r[:, None]) * clear
        rho[dil] = r

    aug = np.flatnonzero(ss < st * (1 - tol))
    if aug.size:
        if isinstance(rhok, RhoKLut):
            rk = lookup_rhok(rhok, br[aug])
        else:
            rk = np.array([rhok(b) for b in br[aug]])
        Cx = gray_concentration(rk)
        Ca = C[aug]
        flags[aug[ss[aug] <= 0]] |= FLAG_DEGENERATE
        cap = params.rho_plus_cap

        def f(idx, x):
            return density((1 - x[:, None]) * Ca[idx] + x[:, None] * Cx[idx])
        s_cap = f(np.arange(aug.size), np.full(aug.size, cap))
        capped = s_cap < st[aug]
        r = np.full(aug.size, cap)
        ok = np.flatnonzero(~capped)
        if ok.size:
            def g(idx, x):
                return f(ok[idx], x)
            r[ok] = _bisect(g, st[aug][ok], np.zeros(ok.size), np.full(ok.size, cap),
                            params.bisect_iters, tol, True)
        flags[aug[capped]] |= FLAG_CAPPED
        C[aug] = (1 - r[:, None]) * Ca + r[:, None] * Cx
        rho[aug] = r
    return C, rho, flags


@dataclass
class AlignmentResult:
    concentration: np.ndarray
    rho: float
    flags: int

    @property
    def flagged(self) -> bool:
        return self.flags != 0


def align_density(pset: PigmentSet, conc_star, sigma_star: float, sigma_target: float,
                  params: AlignmentParams = AlignmentParams(), brightness: float | None = None,
                  rhok_lut: RhoKLut | None = None, density=None) -> AlignmentResult:
    """Single-voxel alignment with exact density evaluation by default.

    ``brightness`` is the target colour's mean brightness; when omitted the
    brightness of ``conc_star``'s own colour is used.
    """
    conc_star = np.asarray(conc_star, dtype=np.float64)
    if density is None:
        density = params.density_model(pset, tabulated=False)
    if brightness is None:
        brightness = float(mean_brightness(concentration_to_rgb(pset, conc_star, params.t_ref_mm)))
    rhok = rhok_lut if rhok_lut is not None else (
        lambda b: solve_rhok(pset, b, params.t_ref_mm))
    C, rho, flags = align_density_batch(density, conc_star[None], [sigma_star], [sigma_target],
                                        [brightness], rhok, params)
    return AlignmentResult(C[0], float(rho[0]), int(flags[0]))


# ---------------------------------------------------------------------------
# halftoning: counter-based RNG keyed by (seed, linear voxel index)

_M64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def voxel_uniforms(seed: int, indices) -> np.ndarray:
    """Uniform [0, 1) variates, a pure function of (seed, voxel index).

    key = mix64(seed * golden + golden); u = mix64(key ^ (index * golden)) >> 11, scaled by 2^-53.
    """
    key = _mix64(np.array([(int(seed) * 0x9E3779B97F4A7C15 + 0x9E3779B97F4A7C15) & _M64],
                          dtype=np.uint64))[0]
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(key ^ (idx * _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _sample_labels(conc: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(conc, axis=-1)
    total = cdf[..., -1:]
    cdf = cdf / np.where(total > 0, total, 1.0)
    # zero-probability pigments share the preceding edge and are skipped
    return (1 + np.sum(u[..., None] >= cdf[..., :-1], axis=-1)).astype(np.uint8)


def halftone(conc_volume, occupied=None, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Draw one label per voxel from its concentration.

    ``conc_volume`` is (nz, ny, nx, 6); ``occupied`` masks non-Empty voxels
    (default: all).  Returns uint8 labels (nz, ny, nx).
    """
    conc = np.asarray(conc_volume, dtype=np.float64)
    nz, ny, nx = conc.shape[:3]
    occ = np.ones((nz, ny, nx), dtype=bool) if occupied is None else np.asarray(occupied, bool)
    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    plane = ny * nx

    def run(span):
        z0, z1 = span
        idx = np.arange(z0 * plane, z1 * plane, dtype=np.uint64).reshape(z1 - z0, ny, nx)
        u = voxel_uniforms(seed, idx)
        lab = _sample_labels(conc[z0:z1], u)
        lab[~occ[z0:z1]] = EMPTY
        out[z0:z1] = lab

    _run_slabs(run, nz, workers)
    return out


def _run_slabs(fn, nz, workers, per_layer=False):
    # per_layer keeps batch shapes fixed whatever the worker count, for code
    # whose floating-point rounding depends on batch size
    spans = [(z, z + 1) for z in range(nz)] if per_layer else slabs(nz, workers)
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(fn, spans))
    else:
        for s in spans:
            fn(s)


# ---------------------------------------------------------------------------
# conversion

@dataclass
class ConversionReport:
    voxels: int
    occupied: int
    label_histogram: dict
    flag_counts: dict
    branch_counts: dict
    color_residual: dict
    sigma_target: dict
    seed: int
    volume_digest: str
    lut_key: str
    params: dict = field(default_factory=dict)

    @property
    def flagged(self) -> int:
        return int(sum(self.flag_counts.values()))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _percentiles(x) -> dict:
    if x.size == 0:
        return {"p50": 0.0, "p95": 0.0, "p99": 0.0, "max": 0.0, "mean": 0.0}
    p = np.percentile(x, [50, 95, 99])
    return {"p50": float(p[0]), "p95": float(p[1]), "p99": float(p[2]),
            "max": float(x.max()), "mean": float(x.mean())}


def check_lut_keys(pset: PigmentSet, t_ref_mm: float, *luts) -> None:
    want = lut_key(pset, t_ref_mm)
    for lut in luts:
        if lut.key != want:
            raise ConfigurationError(
                "lookup table was built for a different pigment set or reference thickness; "
                "rebuild it (build-lut)")


@dataclass
class ConversionResult:
    labels: LabelVolume
    report: ConversionReport
    concentrations: np.ndarray   # aligned, (nz, ny, nx, 6); zeros where Empty


def convert(volume: RadianceVolume, pset: PigmentSet, color_lut: ColorLut, rhok_lut: RhoKLut,
            params: AlignmentParams = AlignmentParams(), seed: int = 0, workers: int = 1,
            density: DensityModel | None = None, exterior: str = "air") -> ConversionResult:
    """Full per-voxel chain followed by halftoning.

    ``exterior`` chooses what Empty voxels become: "air" (label 0) or
    "clear" (Clear resin, label 6).
    """
    if exterior not in ("air", "clear"):
        raise ConfigurationError(f"exterior must be 'air' or 'clear', got {exterior!r}")
    check_lut_keys(pset, params.t_ref_mm, color_lut, rhok_lut)
    density = density or params.density_model(pset)
    nz, ny, nx = volume.data.shape[:3]
    conc = np.zeros((nz, ny, nx, len(PIGMENTS)))
    flags = np.zeros((nz, ny, nx), dtype=np.uint8)
    branch = np.zeros((nz, ny, nx), dtype=np.int8)     # -1 dilute, 0 keep, 1 augment
    resid = np.full((nz, ny, nx), np.nan)
    occ = volume.sigma >= params.sigma_empty_threshold

    def run(span):
        z0, z1 = span
        m = occ[z0:z1]
        if not m.any():
            return
        rgb = volume.rgb[z0:z1][m].astype(np.float64)
        st = volume.sigma[z0:z1][m].astype(np.float64)
        cs = lookup_concentration(color_lut, rgb)
        ss = density(cs)
        c, _, fl = align_density_batch(density, cs, ss, st, mean_brightness(rgb),
                                       rhok_lut, params)
        tol = params.match_tol
        br = np.where(ss > st * (1 + tol), -1, np.where(ss < st * (1 - tol), 1, 0))
        r = np.linalg.norm(concentration_to_rgb(pset, cs, params.t_ref_mm) - rgb, axis=-1)
        for arr, val in ((conc, c), (flags, fl), (branch, br), (resid, r)):
            view = arr[z0:z1]
            view[m] = val

    _run_slabs(run, nz, workers, per_layer=True)
    labels = halftone(conc, occ, seed, workers)
    if exterior == "clear":
        labels[~occ] = CLEAR + 1
    lv = LabelVolume(labels, volume.pitch_mm)

    st_occ = volume.sigma[occ].astype(np.float64)
    hist, _ = np.histogram(st_occ, bins=np.array(SIGMA_HIST_EDGES))
    f_occ = flags[occ]
    b_occ = branch[occ]
    r_occ = resid[occ]
    report = ConversionReport(
        voxels=int(occ.size),
        occupied=int(occ.sum()),
        label_histogram=lv.histogram(),
        flag_counts={"capped": int(np.count_nonzero(f_occ & FLAG_CAPPED)),
                     "degenerate": int(np.count_nonzero(f_occ & FLAG_DEGENERATE))},
        branch_counts={"diluted": int(np.sum(b_occ < 0)), "unchanged": int(np.sum(b_occ == 0)),
                       "augmented": int(np.sum(b_occ > 0)),
                       "out_of_gamut": int(np.sum(r_occ > OUT_OF_GAMUT))},
        color_residual=_percentiles(r_occ),
        sigma_target={**_percentiles(st_occ),
                      "histogram": {"edges": [float(e) for e in SIGMA_HIST_EDGES[:-1]] + ["inf"],
                                    "counts": [int(c) for c in hist]}},
        seed=int(seed),
        volume_digest=volume.digest(),
        lut_key=color_lut.key.hex(),
        params={**asdict(params), "exterior": exterior, "workers_independent": True},
    )
    return ConversionResult(lv, report, conc)


def brute_force_convert(volume: RadianceVolume, pset: PigmentSet, neighborhood: int = 3,
                        t_ref_mm: float = DEFAULT_T_REF_MM,
                        sigma_empty_threshold: float = 1e-3) -> LabelVolume:
    """Hyper-voxel baseline: density-weighted neighbourhood colour snapped to the
    nearest pure-pigment colour (all six pigments, Clear included)."""
    if neighborhood < 1 or neighborhood % 2 == 0:
        raise ConfigurationError(f"neighborhood must be a positive odd integer, got {neighborhood}")
    sig = volume.sigma.astype(np.float64)
    rgb = volume.rgb.astype(np.float64)
    box = dict(size=neighborhood, mode="constant", cval=0.0)
    wsum = uniform_filter(sig, **box)
    csum = np.stack([uniform_filter(sig * rgb[..., i], **box) for i in range(3)], axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = csum / wsum[..., None]
    palette = concentration_to_rgb(pset, np.eye(len(PIGMENTS)), t_ref_mm)
    d = np.linalg.norm(avg[..., None, :] - palette, axis=-1)
    labels = (np.argmin(d, axis=-1) + 1).astype(np.uint8)
    empty = (sig < sigma_empty_threshold) | ~(wsum > 0)
    labels[empty] = EMPTY
    return LabelVolume(labels, volume.pitch_mm)


# ---------------------------------------------------------------------------
# preview

@dataclass(frozen=True)
class PreviewParams:
    """Emission colour is each pigment's appearance at ``color_thickness_mm``;
    opacity comes from its density over the voxel pitch along the view axis.
    ``mix_radius`` > 0 replaces each voxel's colour by the K-M mixture of label
    frequencies in a (2r+1)^3 box, approximating the optical blending of a
    dithered print."""
    color_thickness_mm: float = DEFAULT_T_REF_MM
    mix_radius: int = 0
    delta_t_mm: float = DEFAULT_DELTA_T_MM


_AXES = {"x": 2, "y": 1, "z": 0}
_PITCH_INDEX = {"x": 0, "y": 1, "z": 2}


def _composite(colors, alpha, axis):
    """Front-to-back over along ``axis`` of (nz, ny, nx); returns premultiplied rgb, alpha."""
    ax = _AXES[axis]
    col = np.moveaxis(colors, ax, 0)
    al = np.moveaxis(alpha, ax, 0)
    acc = np.zeros(col.shape[1:])
    trans = np.ones(al.shape[1:])
    for k in range(al.shape[0]):
        a = al[k]
        acc += (trans * a)[..., None] * col[k]
        trans *= 1.0 - a
    return acc, 1.0 - trans


def _finish(acc, a):
    with np.errstate(invalid="ignore", divide="ignore"):
        rgb = np.where(a[..., None] > 0, acc / a[..., None], 0.0)
    return np.concatenate([np.clip(rgb, 0, 1), a[..., None]], axis=-1)


def preview_render(labels: LabelVolume, pset: PigmentSet, axis: str = "z",
                   params: PreviewParams = PreviewParams()) -> np.ndarray:
    """Orthographic emission-absorption render, viewed from the low-index side.

    Returns a float RGBA image (linear colour, straight alpha).  For axis z
    the image is (ny, nx); for y it is (nz, nx); for x it is (nz, ny).
    """
    if axis not in _AXES:
        raise ConfigurationError(f"axis must be one of x, y, z; got {axis!r}")
    pitch = labels.pitch_mm[_PITCH_INDEX[axis]]
    lab = labels.labels
    eye = np.eye(len(PIGMENTS))
    sig = np.concatenate([[0.0], sigma_scalar(pset, eye, params.delta_t_mm)])
    alpha = (1.0 - np.exp(-sig * pitch))[lab]
    if params.mix_radius > 0:
        onehot = np.stack([(lab == i + 1).astype(np.float64) for i in range(len(PIGMENTS))], -1)
        size = 2 * params.mix_radius + 1
        # box means of 0/1 data are whole counts / size^3; rounding removes the
        # running-sum residue (e.g. -5e-16 where a box is empty)
        freq = np.stack([np.rint(uniform_filter(onehot[..., i], size=size, mode="nearest")
                                 * size ** 3)
                         for i in range(len(PIGMENTS))], axis=-1)
        tot = freq.sum(axis=-1, keepdims=True)
        freq = np.where(tot > 0, freq / np.where(tot > 0, tot, 1.0), eye[CLEAR])
        colors = concentration_to_rgb(pset, freq, params.color_thickness_mm)
    else:
        pal = np.concatenate([np.zeros((1, 3)),
                              concentration_to_rgb(pset, eye, params.color_thickness_mm)])
        colors = pal[lab]
    return _finish(*_composite(colors, alpha, axis))


def preview_radiance(volume: RadianceVolume, axis: str = "z") -> np.ndarray:
    """Same compositor applied to the source colours and densities."""
    pitch = volume.pitch_mm[_PITCH_INDEX[axis]]
    alpha = 1.0 - np.exp(-volume.sigma.astype(np.float64) * pitch)
    return _finish(*_composite(volume.rgb.astype(np.float64), alpha, axis))


def save_preview_png(image: np.ndarray, path) -> None:
    """Write an RGBA float image as 8-bit PNG with the sRGB transfer applied."""
    rgb = srgb_encode(np.clip(image[..., :3], 0, 1))
    out = np.concatenate([rgb, image[..., 3:4]], axis=-1)
    Image.fromarray(np.round(out * 255).astype(np.uint8), mode="RGBA").save(path)


# ---------------------------------------------------------------------------
# slice export / import

PALETTE = {str(i): name for i, name in enumerate(LABEL_NAMES)}


def layer_hash(layer: np.ndarray) -> str:
    """sha256 of one layer's label codes (uint8, x fastest)."""
    return hashlib.sha256(np.ascontiguousarray(layer, dtype=np.uint8).tobytes()).hexdigest()


def export_slices(labels: LabelVolume, out_dir, seed: int = 0, workers: int = 1,
                  extra: dict | None = None) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"cannot create output directory {out}: {e}") from None
    lab = labels.labels
    nz = lab.shape[0]

    def write(k):
        Image.fromarray(lab[k], mode="L").save(out / f"layer_{k:05d}.png")
        return layer_hash(lab[k])

    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                hashes = list(ex.map(write, range(nz)))
        else:
            hashes = [write(k) for k in range(nz)]
    except OSError as e:
        raise ConfigurationError(f"cannot write slices to {out}: {e}") from None
    manifest = {
        "dims": list(labels.dims),
        "pitch_mm": list(labels.pitch_mm),
        "palette": PALETTE,
        "seed": int(seed),
        "layers": [{"index": k, "hash": h} for k, h in enumerate(hashes)],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def import_slices(in_dir) -> LabelVolume:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{src}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{src / 'manifest.json'}: {e}") from None
    nx, ny, nz = manifest["dims"]
    layers = np.zeros((nz, ny, nx), dtype=np.uint8)
    for entry in manifest["layers"]:
        k = entry["index"]
        path = src / f"layer_{k:05d}.png"
        try:
            arr = np.asarray(Image.open(path))
        except FileNotFoundError:
            raise FormatError(f"missing layer file {path}") from None
        if arr.shape != (ny, nx):
            raise FormatError(f"{path}: shape {arr.shape} does not match dims")
        if layer_hash(arr) != entry["hash"]:
            raise FormatError(f"{path}: content hash does not match manifest")
        layers[k] = arr
    return LabelVolume(layers, tuple(manifest["pitch_mm"]))
