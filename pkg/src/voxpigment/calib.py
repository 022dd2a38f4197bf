"""Pigment calibration: K/S recovery from R/T measurements, calibration files,
and synthetic pigment sets standing in for measured inks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .kmcore import PIGMENTS, PigmentProfile, PigmentSet, km_rt
from .spectral import DEFAULT_GRID, WavelengthGrid

log = logging.getLogger(__name__)

CALIBRATION_VERSION = 1
RT_TOLERANCE = 0.02
FLAG_RESIDUAL = 1e-4
CLEAR_RESIDUAL = 1e-6

LM_STARTS = ((0.1, 0.1), (1.0, 0.1), (0.1, 1.0), (5.0, 5.0))
LM_LAMBDA0 = 1e-3
LM_MAX_ITER = 200
LM_STEP_TOL = 1e-10
LM_FD_STEP = 1e-6


@dataclass(frozen=True)
class MeasurementRecord:
    pigment: str
    sample_thickness_mm: float
    reflectance: np.ndarray
    transmittance: np.ndarray

    def __post_init__(self):
        if self.pigment not in PIGMENTS:
            raise FormatError(f"unknown pigment {self.pigment!r}")
        if not self.sample_thickness_mm > 0:
            raise FormatError(f"pigment {self.pigment}: thickness must be > 0")
        R = np.asarray(self.reflectance, dtype=np.float64)
        T = np.asarray(self.transmittance, dtype=np.float64)
        if R.shape != T.shape or R.ndim != 1:
            raise FormatError(f"pigment {self.pigment}: R and T must be equal-length lists")
        for name, arr in (("R", R), ("T", T)):
            bad = np.flatnonzero(~np.isfinite(arr) | (arr < 0) | (arr > 1))
            if bad.size:
                raise FormatError(
                    f"pigment {self.pigment}: {name} outside [0, 1] at band {int(bad[0])}")
        over = np.flatnonzero(R + T > 1 + RT_TOLERANCE)
        if over.size:
            b = int(over[0])
            raise FormatError(
                f"pigment {self.pigment}: R+T = {R[b] + T[b]:.4f} exceeds 1 at band {b}")
        object.__setattr__(self, "reflectance", R)
        object.__setattr__(self, "transmittance", T)


@dataclass
class InversionResult:
    profile: PigmentProfile
    flagged_bands: list[int]
    residuals: np.ndarray


@dataclass
class CalibrationFile:
    measurements: list[MeasurementRecord]
    solved: PigmentSet | None = None
    grid: WavelengthGrid = DEFAULT_GRID
    version: int = CALIBRATION_VERSION
    flagged: dict[str, list[int]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt inversion of the slab model, one 2-parameter problem per
# band, all bands and starts advanced together.

def _residual(p, R, T, t):
    Rm, Tm = km_rt(p[..., 0], p[..., 1], t)
    return np.stack([Rm - R, Tm - T], axis=-1)


def _jacobian(p, R, T, t):
    J = np.empty(p.shape + (2,))    # (..., residual j, param i) laid out as [..., i, j]
    for i in range(2):
        h = LM_FD_STEP * np.maximum(np.abs(p[..., i]), 1e-3)
        up = p.copy()
        dn = p.copy()
        up[..., i] += h
        dn[..., i] = np.maximum(dn[..., i] - h, 0.0)
        span = up[..., i] - dn[..., i]
        J[..., :, i] = ((_residual(up, R, T, t) - _residual(dn, R, T, t))
                        / span[..., None])
    return J


def _levenberg_marquardt(p0, R, T, t):
    p = np.maximum(p0.astype(np.float64), 0.0)
    r = _residual(p, R, T, t)
    cost = np.sum(r * r, axis=-1)
    lam = np.full(cost.shape, LM_LAMBDA0)
    active = np.ones(cost.shape, dtype=bool)
    eye = np.eye(2)
    for _ in range(LM_MAX_ITER):
        if not active.any():
            break
        J = _jacobian(p, R, T, t)
        JtJ = np.swapaxes(J, -1, -2) @ J
        g = np.einsum("...ji,...j->...i", J, r)
        A = JtJ + lam[..., None, None] * (np.diagonal(JtJ, axis1=-2, axis2=-1)[..., None] * eye
                                          + 1e-12 * eye)
        step = -np.linalg.solve(A, g[..., None])[..., 0]
        trial = np.maximum(p + step, 0.0)
        r_new = _residual(trial, R, T, t)
        cost_new = np.sum(r_new * r_new, axis=-1)
        ok = active & (cost_new < cost)
        p = np.where(ok[..., None], trial, p)
        r = np.where(ok[..., None], r_new, r)
        cost = np.where(ok, cost_new, cost)
        lam = np.where(ok, lam * 0.1, np.where(active, lam * 10.0, lam))
        step_norm = np.linalg.norm(step, axis=-1)
        active &= ~((step_norm < LM_STEP_TOL) | (lam > 1e20) | (cost == 0.0))
    return p, cost


def invert_km(record: MeasurementRecord) -> InversionResult:
    """Per-band K and S that reproduce a measured R/T pair at the sample thickness."""
    R = record.reflectance
    T = record.transmittance
    t = record.sample_thickness_mm
    starts = np.asarray(LM_STARTS, dtype=np.float64)
    nb = R.shape[0]
    p0 = np.broadcast_to(starts[:, None, :], (len(starts), nb, 2)).copy()
    p, cost = _levenberg_marquardt(p0, R[None, :], T[None, :], t)
    best = np.argmin(cost, axis=0)                      # first start wins ties
    idx = np.arange(nb)
    params = p[best, idx]
    resid = cost[best, idx]
    # degenerate transparent bands: collapse to the trivial solution
    zero = _residual(np.zeros((nb, 2)), R, T, t)
    zero_cost = np.sum(zero * zero, axis=-1)
    trivial = zero_cost < CLEAR_RESIDUAL
    params = np.where(trivial[:, None], 0.0, params)
    resid = np.where(trivial, zero_cost, resid)
    flagged = [int(b) for b in np.flatnonzero(resid > FLAG_RESIDUAL)]
    if flagged:
        log.warning("pigment %s: residual above %g at bands %s",
                    record.pigment, FLAG_RESIDUAL, flagged)
    profile = PigmentProfile(record.pigment, params[:, 0], params[:, 1])
    return InversionResult(profile, flagged, resid)


def measure(profile: PigmentProfile, thickness_mm: float = 1.0) -> MeasurementRecord:
    """Noise-free synthetic measurement of a profile (forward K-M)."""
    R, T = km_rt(profile.absorption, profile.scattering, thickness_mm)
    return MeasurementRecord(profile.id, thickness_mm, R, T)


def solve_calibration(cal: CalibrationFile) -> CalibrationFile:
    profiles = []
    flagged = {}
    for rec in cal.measurements:
        res = invert_km(rec)
        profiles.append(res.profile)
        if res.flagged_bands:
            flagged[rec.pigment] = res.flagged_bands
    cal.solved = PigmentSet(tuple(profiles), cal.grid)
    cal.flagged = flagged
    return cal


# ---------------------------------------------------------------------------
# Synthetic pigments.  Gaussian absorption bumps on a flat floor; every
# constant lives in RECIPES.

def _bump(wl, center, width, height):
    return height * np.exp(-0.5 * ((wl - center) / width) ** 2)


# label -> (K floor, [(center nm, width nm, height /mm)], S rule)
# The S rule is either a flat value or ("ratio", r) meaning S = r * K per band.
RECIPES = {
    "default": {
        "C": (0.08, [(640.0, 45.0, 1.5), (590.0, 25.0, 0.56)], 0.4),
        "M": (0.04, [(540.0, 35.0, 4.0)], 0.4),
        "Y": (0.08, [(440.0, 35.0, 2.5), (400.0, 30.0, 1.25)], 0.4),
        "K": (5.0, [], 0.3),
        "W": (0.005, [], 6.0),
        "Cl": (0.0, [], 0.0),
    },
    "absorber-heavy": {
        "C": (0.12, [(640.0, 45.0, 1.5), (590.0, 25.0, 0.56)], ("ratio", 0.1)),
        "M": (0.08, [(540.0, 35.0, 4.0)], ("ratio", 0.1)),
        "Y": (0.12, [(440.0, 35.0, 2.5), (400.0, 30.0, 1.25)], ("ratio", 0.1)),
        "K": (5.0, [], ("ratio", 0.05)),
        "W": (0.8, [], ("ratio", 0.1)),
        "Cl": (0.0, [], 0.0),
    },
    "scatter-heavy": {
        "C": (0.08, [(640.0, 45.0, 1.5), (590.0, 25.0, 0.56)], 2.0),
        "M": (0.04, [(540.0, 35.0, 4.0)], 2.0),
        "Y": (0.08, [(440.0, 35.0, 2.5), (400.0, 30.0, 1.25)], 2.0),
        "K": (5.0, [], 1.0),
        "W": (0.005, [], 12.0),
        "Cl": (0.0, [], 0.0),
    },
    # flat, non-scattering inks: density is exactly linear in concentration
    "flat-absorber": {
        "C": (1.0, [], 0.0),
        "M": (1.5, [], 0.0),
        "Y": (0.5, [], 0.0),
        "K": (4.0, [], 0.0),
        "W": (2.0, [], 0.0),
        "Cl": (0.0, [], 0.0),
    },
}


def synth_pigment_set(recipe_name: str = "default") -> PigmentSet:
    try:
        recipe = RECIPES[recipe_name]
    except KeyError:
        raise ConfigurationError(
            f"unknown pigment recipe {recipe_name!r}; choose from {sorted(RECIPES)}") from None
    wl = DEFAULT_GRID.wavelengths
    profiles = []
    for label in PIGMENTS:
        floor, bumps, s_spec = recipe[label]
        K = np.full(wl.shape, floor)
        for c, w, h in bumps:
            K = K + _bump(wl, c, w, h)
        if isinstance(s_spec, tuple):
            S = s_spec[1] * K
        else:
            S = np.full(wl.shape, float(s_spec))
        profiles.append(PigmentProfile(label, K, S))
    return PigmentSet(tuple(profiles))


def synth_calibration(recipe_name: str = "default", thickness_mm: float = 1.0) -> CalibrationFile:
    pset = synth_pigment_set(recipe_name)
    return CalibrationFile([measure(p, thickness_mm) for p in pset.profiles])


# ---------------------------------------------------------------------------
# Calibration file I/O (JSON)

def _floats(values) -> list[float]:
    return [float(v) for v in values]


def calibration_to_dict(cal: CalibrationFile) -> dict:
    doc = {
        "version": cal.version,
        "grid": cal.grid.as_dict(),
        "measurements": [
            {"pigment": m.pigment, "thickness_mm": float(m.sample_thickness_mm),
             "R": _floats(m.reflectance), "T": _floats(m.transmittance)}
            for m in cal.measurements
        ],
    }
    if cal.solved is not None:
        doc["solved"] = [
            {"pigment": p.id, "K": _floats(p.absorption), "S": _floats(p.scattering)}
            for p in cal.solved.profiles
        ]
    return doc


def save_calibration(cal: CalibrationFile, path) -> None:
    Path(path).write_text(json.dumps(calibration_to_dict(cal), indent=1) + "\n",
                          encoding="utf-8")


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing key {key!r}")
    return obj[key]


def calibration_from_dict(doc: dict) -> CalibrationFile:
    version = _require(doc, "version", "calibration")
    if version != CALIBRATION_VERSION:
        raise FormatError(f"unsupported calibration version {version!r} "
                          f"(expected {CALIBRATION_VERSION})")
    g = _require(doc, "grid", "calibration")
    try:
        grid = WavelengthGrid(float(g["start_nm"]), float(g["end_nm"]), float(g["step_nm"]))
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise FormatError(f"calibration grid is malformed: {exc}") from None
    if grid != DEFAULT_GRID:
        raise FormatError(f"calibration grid mismatch: {grid.as_dict()} "
                          f"!= {DEFAULT_GRID.as_dict()}")
    nb = grid.band_count
    records = {}
    for i, m in enumerate(_require(doc, "measurements", "calibration")):
        where = f"measurement {i}"
        pig = _require(m, "pigment", where)
        R = _require(m, "R", where)
        T = _require(m, "T", where)
        if len(R) != nb or len(T) != nb:
            raise FormatError(f"{where} ({pig}): expected {nb} bands")
        if pig in records:
            raise FormatError(f"duplicate measurement for pigment {pig}")
        records[pig] = MeasurementRecord(pig, float(_require(m, "thickness_mm", where)),
                                         np.array(R, dtype=np.float64),
                                         np.array(T, dtype=np.float64))
    missing = [p for p in PIGMENTS if p not in records]
    if missing:
        raise FormatError(f"calibration is missing pigment(s): {', '.join(missing)}")
    solved = None
    if "solved" in doc:
        profiles = {}
        for i, s in enumerate(doc["solved"]):
            where = f"solved entry {i}"
            pig = _require(s, "pigment", where)
            K = _require(s, "K", where)
            S = _require(s, "S", where)
            if len(K) != nb or len(S) != nb:
                raise FormatError(f"{where} ({pig}): expected {nb} bands")
            try:
                profiles[pig] = PigmentProfile(pig, np.array(K, dtype=np.float64),
                                               np.array(S, dtype=np.float64))
            except ConfigurationError as exc:
                raise FormatError(str(exc)) from None
        missing = [p for p in PIGMENTS if p not in profiles]
        if missing:
            raise FormatError(f"solved set is missing pigment(s): {', '.join(missing)}")
        solved = PigmentSet(tuple(profiles[p] for p in PIGMENTS), grid)
    return CalibrationFile([records[p] for p in PIGMENTS], solved, grid, version)


def load_calibration(path) -> CalibrationFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return calibration_from_dict(doc)
