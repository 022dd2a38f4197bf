"""Forward Kubelka-Munk physics for pigment layers and mixtures.

Concentrations are plain arrays whose last axis has length 6, ordered as
:data:`PIGMENTS`.  Spectra are arrays whose last axis is the band axis of
:data:`~voxpigment.spectral.DEFAULT_GRID`.  All functions broadcast over
leading axes.

The reflectance/transmittance of a slab is evaluated in a rescaled form,

    beta = sqrt(K (K + 2 S)),  x = beta t,  D = (K + S) t tanh(x)/x + 1
    R = S t (tanh(x)/x) / D,   T = sech(x) / D

which is algebraically the classic two-flux solution (multiply numerator and
denominator by S sech(x)) but never overflows and is exact at S = 0 and K = 0.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .spectral import DEFAULT_GRID, WavelengthGrid, check_grid, default_colorimeter

PIGMENTS = ("C", "M", "Y", "K", "W", "Cl")
PIGMENT_INDEX = {p: i for i, p in enumerate(PIGMENTS)}
CLEAR = PIGMENT_INDEX["Cl"]
BLACK = PIGMENT_INDEX["K"]
WHITE = PIGMENT_INDEX["W"]

EPS_S = 1e-9   # per mm; below this a band is treated as a pure absorber
EPS_VACUUM = 1e-12

DEFAULT_T_MAX_MM = 5.0
DEFAULT_FIT_SAMPLES = 100
DEFAULT_DELTA_T_MM = 1.0
DEFAULT_T_REF_MM = 1.0


@dataclass(frozen=True)
class PigmentProfile:
    id: str
    absorption: np.ndarray
    scattering: np.ndarray

    def __post_init__(self):
        if self.id not in PIGMENT_INDEX:
            raise ConfigurationError(f"unknown pigment label {self.id!r}")
        k = np.asarray(self.absorption, dtype=np.float64)
        s = np.asarray(self.scattering, dtype=np.float64)
        if k.shape != s.shape or k.ndim != 1:
            raise ConfigurationError(f"pigment {self.id}: K and S must be 1-D and equal length")
        if np.any(~np.isfinite(k)) or np.any(~np.isfinite(s)) or k.min() < 0 or s.min() < 0:
            raise ConfigurationError(f"pigment {self.id}: K and S must be finite and >= 0")
        k.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "absorption", k)
        object.__setattr__(self, "scattering", s)


@dataclass(frozen=True)
class PigmentSet:
    profiles: tuple
    grid: WavelengthGrid = DEFAULT_GRID
    K: np.ndarray = field(init=False, repr=False)
    S: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        check_grid(self.grid)
        by_id = {}
        for p in self.profiles:
            if p.id in by_id:
                raise ConfigurationError(f"duplicate pigment {p.id}")
            by_id[p.id] = p
        missing = [p for p in PIGMENTS if p not in by_id]
        if missing:
            raise ConfigurationError(f"pigment set is missing {', '.join(missing)}")
        ordered = tuple(by_id[p] for p in PIGMENTS)
        for p in ordered:
            if p.absorption.shape[0] != self.grid.band_count:
                raise ConfigurationError(
                    f"pigment {p.id} has {p.absorption.shape[0]} bands, "
                    f"expected {self.grid.band_count}")
        K = np.stack([p.absorption for p in ordered])
        S = np.stack([p.scattering for p in ordered])
        K.flags.writeable = False
        S.flags.writeable = False
        object.__setattr__(self, "profiles", ordered)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "S", S)

    def __getitem__(self, label: str) -> PigmentProfile:
        return self.profiles[PIGMENT_INDEX[label]]

    def digest(self) -> str:
        """SHA-256 over grid and K/S tables; identifies LUTs built from this set."""
        h = hashlib.sha256()
        h.update(repr(self.grid.as_dict()).encode())
        h.update(np.ascontiguousarray(self.K, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.S, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LayerOptics:
    reflectance: np.ndarray
    transmittance: np.ndarray
    thickness_mm: float


def pure(label: str) -> np.ndarray:
    c = np.zeros(len(PIGMENTS))
    c[PIGMENT_INDEX[label]] = 1.0
    return c


def concentration(**weights: float) -> np.ndarray:
    """Build a concentration vector from keyword weights, e.g. ``concentration(C=.5, M=.5)``."""
    c = np.zeros(len(PIGMENTS))
    for k, v in weights.items():
        c[PIGMENT_INDEX[k]] = v
    validate_concentration(c)
    return c


def validate_concentration(conc, atol: float = 1e-9) -> None:
    c = np.asarray(conc, dtype=np.float64)
    if c.shape[-1] != len(PIGMENTS):
        raise ValueError(f"concentration must have {len(PIGMENTS)} components")
    if np.any(c < -atol) or np.any(c > 1 + atol):
        raise ValueError("concentration components must lie in [0, 1]")
    if np.any(np.abs(c.sum(axis=-1) - 1.0) > atol):
        raise ValueError("concentration components must sum to 1")


def mix_ks(pset: PigmentSet, conc) -> tuple[np.ndarray, np.ndarray]:
    """Concentration-weighted K and S spectra of a mixture."""
    c = np.asarray(conc, dtype=np.float64)
    # explicit accumulation keeps each row's arithmetic independent of batch size
    K = c[..., 0, None] * pset.K[0]
    S = c[..., 0, None] * pset.S[0]
    for i in range(1, len(PIGMENTS)):
        K = K + c[..., i, None] * pset.K[i]
        S = S + c[..., i, None] * pset.S[i]
    return K, S


def _tanhc(x):
    # tanh(x)/x, with the x -> 0 limit
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x * x / 3.0, np.tanh(xs) / xs)


def _tanh_rem(x):
    # (x - tanh x) / x^3
    small = np.abs(x) < 1e-2
    xs = np.where(small, 1.0, x)
    x2 = x * x
    series = 1.0 / 3.0 - 2.0 * x2 / 15.0 + 17.0 * x2 * x2 / 315.0
    return np.where(small, series, (xs - np.tanh(xs)) / (xs * xs * xs))


def _sech(x):
    e = np.exp(-np.abs(x))
    return 2.0 * e / (1.0 + e * e)


def km_rt(K, S, t):
    """Reflectance and transmittance arrays of a slab of thickness ``t`` mm."""
    K = np.asarray(K, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("thickness must be non-negative")
    u = K + S
    beta = np.sqrt(K * (K + 2.0 * S))
    x = beta * t
    gt = _tanhc(x)
    sech = _sech(x)
    den = u * t * gt + 1.0
    R = S * t * gt / den
    T = sech / den
    absorber = S < EPS_S
    R = np.where(absorber, 0.0, R)
    T = np.where(absorber, np.exp(-K * t), T)
    vacuum = (K < EPS_VACUUM) & (S < EPS_VACUUM)
    R = np.where(vacuum, 0.0, R)
    T = np.where(vacuum, 1.0, T)
    return R, T


def km_layer(K, S, thickness_mm: float) -> LayerOptics:
    if thickness_mm <= 0:
        raise ValueError(f"thickness must be positive, got {thickness_mm}")
    R, T = km_rt(K, S, thickness_mm)
    return LayerOptics(R, T, float(thickness_mm))


def km_total_and_grad(K, S, t):
    """R+T together with its partial derivatives in K and S (same shapes)."""
    K = np.asarray(K, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    u = K + S
    beta = np.sqrt(K * (K + 2.0 * S))
    x = beta * t
    gt = _tanhc(x)
    ht = _tanh_rem(x)
    sech = _sech(x)
    den = u * t * gt + 1.0           # D * sech
    num = S * t * gt + sech           # N * sech
    t2, t3 = t * t, t * t * t
    # derivatives of N and D, each scaled by sech
    dN_dK = S * ht * t3 * u
    dN_dS = t * gt + S * ht * t3 * K
    dD_dK = t * gt + ht * t3 * u * u + t2 * u * gt
    dD_dS = t * gt + ht * t3 * u * K + t2 * K * gt
    F = num / den
    dF_dK = (dN_dK * den - num * dD_dK) / (den * den)
    dF_dS = (dN_dS * den - num * dD_dS) / (den * den)
    return F, dF_dK, dF_dS


def concentration_to_rgb(pset: PigmentSet, conc, t_ref_mm: float = DEFAULT_T_REF_MM,
                         clamp: bool = True) -> np.ndarray:
    """Linear RGB of a mixture layer: CMF projection of R + T at ``t_ref_mm``."""
    if t_ref_mm <= 0:
        raise ValueError(f"t_ref_mm must be positive, got {t_ref_mm}")
    K, S = mix_ks(pset, conc)
    R, T = km_rt(K, S, t_ref_mm)
    cm = default_colorimeter()
    return cm.to_rgb(R + T) if clamp else cm.to_rgb_unclamped(R + T)


def rgb_and_jacobian(pset: PigmentSet, conc, t_ref_mm: float = DEFAULT_T_REF_MM):
    """Unclamped RGB of mixtures and d(RGB)/d(conc), shapes (..., 3) and (..., 3, 6)."""
    K, S = mix_ks(pset, conc)
    F, dK, dS = km_total_and_grad(K, S, t_ref_mm)
    M = default_colorimeter().band_to_rgb            # (bands, 3)
    rgb = F @ M
    # dF/dc_i = dF/dK * K_i + dF/dS * S_i  (per band)
    dF_dc = dK[..., None, :] * pset.K + dS[..., None, :] * pset.S   # (..., 6, bands)
    jac = np.swapaxes(dF_dc @ M, -1, -2)
    return rgb, jac


def _fit_samples(t_max_mm: float, samples: int) -> np.ndarray:
    # bin midpoints in (0, t_max]; avoids the trivial t = 0 sample
    return (np.arange(samples) + 0.5) * (t_max_mm / samples)


def fit_sigma_band(K_band, S_band, t_max_mm: float = DEFAULT_T_MAX_MM,
                   samples: int = DEFAULT_FIT_SAMPLES, tol: float = 1e-9):
    """Least-squares decay rate sigma with exp(-sigma t) closest to T(t).

    Minimises sum over thickness samples of (exp(-sigma t) - T(t))^2 by
    bisection on the derivative.  Accepts scalars or arrays.
    """
    if t_max_mm <= 0 or samples < 2:
        raise ValueError("need t_max_mm > 0 and samples >= 2")
    K = np.asarray(K_band, dtype=np.float64)
    S = np.asarray(S_band, dtype=np.float64)
    shape = np.broadcast_shapes(K.shape, S.shape)
    K = np.broadcast_to(K, shape).reshape(-1)
    S = np.broadcast_to(S, shape).reshape(-1)
    ts = _fit_samples(t_max_mm, samples)
    _, T = km_rt(K[:, None], S[:, None], ts[None, :])

    def slope(sig):
        e = np.exp(-sig[:, None] * ts)
        return np.sum(ts * e * (e - T), axis=1)   # -(1/2) f'(sigma)

    lo = np.zeros_like(K)
    hi = 1.01 * (K + S) + 1e-6
    # expand until f'(hi) >= 0, i.e. slope <= 0
    for _ in range(60):
        bad = slope(hi) > 0
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi, hi)
    flat = np.all(T >= 1.0 - 1e-15, axis=1)
    # each element stops on its own bracket width, so results do not
    # depend on what else is in the batch
    while True:
        active = hi - lo > tol
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        up = slope(mid) > 0        # still descending: minimum lies to the right
        lo = np.where(active & up, mid, lo)
        hi = np.where(active & ~up, mid, hi)
    sigma = np.where(flat, 0.0, 0.5 * (lo + hi))
    return float(sigma[0]) if shape == () else sigma.reshape(shape)


def fit_error(K_band, S_band, sigma, t_max_mm: float = DEFAULT_T_MAX_MM,
              samples: int = DEFAULT_FIT_SAMPLES):
    """Mean |exp(-sigma t) - T(t)| over the thickness samples."""
    ts = _fit_samples(t_max_mm, samples)
    K = np.asarray(K_band, dtype=np.float64)[..., None]
    S = np.asarray(S_band, dtype=np.float64)[..., None]
    _, T = km_rt(K, S, ts)
    return np.mean(np.abs(np.exp(-np.asarray(sigma)[..., None] * ts) - T), axis=-1)


def combine_band_sigmas(sigma_bands, delta_t_mm: float = DEFAULT_DELTA_T_MM,
                        reading: str = "product", grid: WavelengthGrid = DEFAULT_GRID):
    """Scalar density from per-band decay rates: -ln(mean_band exp(-sigma dt)) / dt.

    ``reading="literal"`` instead evaluates the band rates at wavelength
    ``lambda * dt`` (linear interpolation, clamped to the grid) and uses
    ``exp(-sigma(lambda dt))`` without the thickness factor.
    """
    if delta_t_mm <= 0:
        raise ValueError(f"delta_t_mm must be positive, got {delta_t_mm}")
    sig = np.asarray(sigma_bands, dtype=np.float64)
    if reading == "product":
        expo = sig * delta_t_mm
    elif reading == "literal":
        wl = grid.wavelengths
        pos = np.clip((wl * delta_t_mm - wl[0]) / grid.step_nm, 0, len(wl) - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, len(wl) - 1)
        w = pos - i0
        expo = sig[..., i0] * (1 - w) + sig[..., i1] * w
    else:
        raise ConfigurationError(f"unknown sigma reading {reading!r}")
    # log-mean-exp, stabilised by the smallest exponent
    m = expo.min(axis=-1, keepdims=True)
    lme = -m[..., 0] + np.log(np.mean(np.exp(-(expo - m)), axis=-1))
    out = np.maximum(-lme / delta_t_mm, 0.0)
    return float(out) if out.ndim == 0 else out


def sigma_scalar(pset: PigmentSet, conc, delta_t_mm: float = DEFAULT_DELTA_T_MM,
                 t_max_mm: float = DEFAULT_T_MAX_MM, samples: int = DEFAULT_FIT_SAMPLES,
                 reading: str = "product"):
    """Scalar density (per mm) of a mixture, from per-band fitted decay rates."""
    K, S = mix_ks(pset, conc)
    sig = fit_sigma_band(K, S, t_max_mm, samples)
    return combine_band_sigmas(sig, delta_t_mm, reading, pset.grid)


class SigmaTable:
    """Tabulated per-band decay rate over (K, S), for bulk density queries.

    The fitted rate depends only on the band's K and S, so one bilinear
    table over ``[0, K_max] x [0, S_max]`` serves every band and every
    mixture of a pigment set.  Nodes are square-root spaced because the rate
    curves most sharply near K = 0 and S = 0.
    """

    def __init__(self, k_max: float, s_max: float, nodes: int = 129,
                 t_max_mm: float = DEFAULT_T_MAX_MM, samples: int = DEFAULT_FIT_SAMPLES):
        self.k_max = max(float(k_max), 1e-6)
        self.s_max = max(float(s_max), 1e-6)
        self.nodes = nodes
        self.t_max_mm = t_max_mm
        self.samples = samples
        self.k_axis = self.k_max * np.linspace(0.0, 1.0, nodes) ** 2
        self.s_axis = self.s_max * np.linspace(0.0, 1.0, nodes) ** 2
        kk, ss = np.meshgrid(self.k_axis, self.s_axis, indexing="ij")
        self.values = fit_sigma_band(kk, ss, t_max_mm, samples)

    @classmethod
    def for_set(cls, pset: PigmentSet, **kw) -> "SigmaTable":
        return cls(pset.K.max(), pset.S.max(), **kw)

    def __call__(self, K, S):
        K = np.asarray(K, dtype=np.float64)
        S = np.asarray(S, dtype=np.float64)
        n = self.nodes - 1
        fk = np.clip(np.sqrt(np.maximum(K, 0) / self.k_max) * n, 0, n)
        fs = np.clip(np.sqrt(np.maximum(S, 0) / self.s_max) * n, 0, n)
        i = np.minimum(fk.astype(np.intp), n - 1)
        j = np.minimum(fs.astype(np.intp), n - 1)
        ka, sa = self.k_axis, self.s_axis
        wk = np.clip((K - ka[i]) / (ka[i + 1] - ka[i]), 0.0, 1.0)
        ws = np.clip((S - sa[j]) / (sa[j + 1] - sa[j]), 0.0, 1.0)
        v = self.values
        return ((1 - wk) * (1 - ws) * v[i, j] + wk * (1 - ws) * v[i + 1, j]
                + (1 - wk) * ws * v[i, j + 1] + wk * ws * v[i + 1, j + 1])


class DensityModel:
    """Scalar density of concentrations, exact or via a :class:`SigmaTable`."""

    def __init__(self, pset: PigmentSet, delta_t_mm: float = DEFAULT_DELTA_T_MM,
                 t_max_mm: float = DEFAULT_T_MAX_MM, samples: int = DEFAULT_FIT_SAMPLES,
                 reading: str = "product", tabulated: bool = True, nodes: int = 129):
        self.pset = pset
        self.delta_t_mm = delta_t_mm
        self.t_max_mm = t_max_mm
        self.samples = samples
        self.reading = reading
        self.table = SigmaTable.for_set(pset, nodes=nodes, t_max_mm=t_max_mm,
                                        samples=samples) if tabulated else None

    def band_sigmas(self, conc):
        K, S = mix_ks(self.pset, conc)
        if self.table is not None:
            return self.table(K, S)
        return fit_sigma_band(K, S, self.t_max_mm, self.samples)

    def __call__(self, conc):
        return combine_band_sigmas(self.band_sigmas(conc), self.delta_t_mm,
                                   self.reading, self.pset.grid)
