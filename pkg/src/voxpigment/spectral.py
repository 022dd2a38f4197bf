"""Wavelength grids, CIE 1931 colorimetry under D65, and linear RGB conversion.

The observer and illuminant tables are the CIE 15:2004 values (Tables T.1 and
T.2) subsampled to 10 nm between 380 and 750 nm.  Every spectrum handled by the
package lives on :data:`DEFAULT_GRID`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

# (nm, D65 relative SPD, x_bar, y_bar, z_bar)
_CIE_TABLE = np.array([
    (380, 49.9755, 0.001368, 0.000039, 0.006450),
    (390, 54.6482, 0.004243, 0.000120, 0.020050),
    (400, 82.7549, 0.014310, 0.000396, 0.067850),
    (410, 91.486, 0.043510, 0.001210, 0.207400),
    (420, 93.4318, 0.134380, 0.004000, 0.645600),
    (430, 86.6823, 0.283900, 0.011600, 1.385600),
    (440, 104.865, 0.348280, 0.023000, 1.747060),
    (450, 117.008, 0.336200, 0.038000, 1.772110),
    (460, 117.812, 0.290800, 0.060000, 1.669200),
    (470, 114.861, 0.195360, 0.090980, 1.287640),
    (480, 115.923, 0.095640, 0.139020, 0.812950),
    (490, 108.811, 0.032010, 0.208020, 0.465180),
    (500, 109.354, 0.004900, 0.323000, 0.272000),
    (510, 107.802, 0.009300, 0.503000, 0.158200),
    (520, 104.79, 0.063270, 0.710000, 0.078250),
    (530, 107.689, 0.165500, 0.862000, 0.042160),
    (540, 104.405, 0.290400, 0.954000, 0.020300),
    (550, 104.046, 0.433450, 0.994950, 0.008750),
    (560, 100.0, 0.594500, 0.995000, 0.003900),
    (570, 96.3342, 0.762100, 0.952000, 0.002100),
    (580, 95.788, 0.916300, 0.870000, 0.001650),
    (590, 88.6856, 1.026300, 0.757000, 0.001100),
    (600, 90.0062, 1.062200, 0.631000, 0.000800),
    (610, 89.5991, 1.002600, 0.503000, 0.000340),
    (620, 87.6987, 0.854450, 0.381000, 0.000190),
    (630, 83.2886, 0.642400, 0.265000, 0.000050),
    (640, 83.6992, 0.447900, 0.175000, 0.000020),
    (650, 80.0268, 0.283500, 0.107000, 0.000000),
    (660, 80.2146, 0.164900, 0.061000, 0.000000),
    (670, 82.2778, 0.087400, 0.032000, 0.000000),
    (680, 78.2842, 0.046770, 0.017000, 0.000000),
    (690, 69.7213, 0.022700, 0.008210, 0.000000),
    (700, 71.6091, 0.011359, 0.004102, 0.000000),
    (710, 74.349, 0.005790, 0.002091, 0.000000),
    (720, 61.604, 0.002899, 0.001047, 0.000000),
    (730, 69.8856, 0.001440, 0.000520, 0.000000),
    (740, 75.087, 0.000690, 0.000249, 0.000000),
    (750, 63.5927, 0.000332, 0.000120, 0.000000),
], dtype=np.float64)

# sRGB / Rec. 709 primaries (CIE xy)
RGB_PRIMARIES_XY = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])


@dataclass(frozen=True)
class WavelengthGrid:
    start_nm: float = 380.0
    end_nm: float = 750.0
    step_nm: float = 10.0

    def __post_init__(self):
        if self.step_nm <= 0 or self.end_nm < self.start_nm:
            raise ConfigurationError(
                f"invalid wavelength grid {self.start_nm}-{self.end_nm} step {self.step_nm}")

    @property
    def band_count(self) -> int:
        return int(np.floor((self.end_nm - self.start_nm) / self.step_nm + 1e-9)) + 1

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start_nm + self.step_nm * np.arange(self.band_count)

    def as_dict(self) -> dict:
        return {"start_nm": self.start_nm, "end_nm": self.end_nm, "step_nm": self.step_nm}


DEFAULT_GRID = WavelengthGrid()


def check_grid(grid: WavelengthGrid) -> None:
    """Raise ConfigurationError unless ``grid`` matches the tabulated CMF grid."""
    if grid != DEFAULT_GRID:
        raise ConfigurationError(
            f"wavelength grid mismatch: got {grid.as_dict()}, "
            f"colorimetry tables are tabulated on {DEFAULT_GRID.as_dict()}")


def _xyz_to_rgb_matrix(white_xyz: np.ndarray) -> np.ndarray:
    # Standard primaries + white-point derivation (RP 177 style), so the
    # table-derived white maps exactly to RGB (1, 1, 1).
    xy = RGB_PRIMARIES_XY
    prim = np.stack([xy[:, 0] / xy[:, 1], np.ones(3), (1 - xy[:, 0] - xy[:, 1]) / xy[:, 1]])
    scale = np.linalg.solve(prim, white_xyz)
    rgb_to_xyz = prim * scale
    return np.linalg.inv(rgb_to_xyz)


class Colorimeter:
    """CMF projection of band spectra to linear RGB under D65.

    Works on any array whose last axis is the band axis.
    """

    def __init__(self, grid: WavelengthGrid = DEFAULT_GRID):
        check_grid(grid)
        self.grid = grid
        wl = _CIE_TABLE[:, 0]
        if not np.array_equal(wl, grid.wavelengths):
            raise ConfigurationError("CIE table wavelengths do not match the grid")
        self.d65 = _CIE_TABLE[:, 1].copy()
        self.cmf = _CIE_TABLE[:, 2:5].copy()
        self.norm = float(np.sum(self.d65 * self.cmf[:, 1]))
        # weights[b, j]: contribution of band b to X/Y/Z, unit spectrum -> Y = 1
        self.weights = (self.d65[:, None] * self.cmf) / self.norm
        self.white_xyz = self.weights.sum(axis=0)
        self.xyz_to_rgb = _xyz_to_rgb_matrix(self.white_xyz)
        # band -> linear RGB in one matrix (pre-clamp)
        self.band_to_rgb = self.weights @ self.xyz_to_rgb.T
        self._self_check()

    def _self_check(self) -> None:
        y_total = float(np.sum(self.d65 * self.cmf[:, 1]))
        if not np.isclose(y_total, self.norm, rtol=0, atol=1e-12 * self.norm):
            raise ConfigurationError("y_bar/D65 normalization is inconsistent")
        if not np.isclose(self.white_xyz[1], 1.0, atol=1e-12):
            raise ConfigurationError("unit spectrum does not map to Y = 1")

    def to_xyz(self, spectra: np.ndarray) -> np.ndarray:
        spectra = np.asarray(spectra, dtype=np.float64)
        if spectra.shape[-1] != self.grid.band_count:
            raise ConfigurationError(
                f"spectrum has {spectra.shape[-1]} bands, expected {self.grid.band_count}")
        return spectra @ self.weights

    def to_rgb_unclamped(self, spectra: np.ndarray) -> np.ndarray:
        spectra = np.asarray(spectra, dtype=np.float64)
        if spectra.shape[-1] != self.grid.band_count:
            raise ConfigurationError(
                f"spectrum has {spectra.shape[-1]} bands, expected {self.grid.band_count}")
        return spectra @ self.band_to_rgb

    def to_rgb(self, spectra: np.ndarray) -> np.ndarray:
        return np.clip(self.to_rgb_unclamped(spectra), 0.0, 1.0)

    def tables(self) -> dict:
        """Embedded tables, for audit dumps."""
        return {
            "wavelength_nm": self.grid.wavelengths.tolist(),
            "d65": self.d65.tolist(),
            "x_bar": self.cmf[:, 0].tolist(),
            "y_bar": self.cmf[:, 1].tolist(),
            "z_bar": self.cmf[:, 2].tolist(),
            "normalization": self.norm,
            "white_xyz": self.white_xyz.tolist(),
            "xyz_to_rgb": self.xyz_to_rgb.tolist(),
        }


_DEFAULT: Colorimeter | None = None


def default_colorimeter() -> Colorimeter:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Colorimeter()
    return _DEFAULT


def spectrum_to_rgb(spectrum) -> np.ndarray:
    """Linear RGB (clamped to [0, 1]) of a reflectance+transmittance spectrum."""
    return default_colorimeter().to_rgb(spectrum)


def mean_brightness(color) -> np.ndarray | float:
    color = np.asarray(color, dtype=np.float64)
    out = color.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def srgb_decode(values) -> np.ndarray:
    """Display-encoded sRGB -> linear light."""
    v = np.asarray(values, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def srgb_encode(values) -> np.ndarray:
    """Linear light -> display-encoded sRGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1 / 2.4) - 0.055)
