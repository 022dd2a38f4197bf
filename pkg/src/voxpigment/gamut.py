"""Concentration-from-color solving and the RGB / brightness lookup tables.

The colour objective is the Euclidean distance between the rendered mixture
colour and a target, over the five printable pigments (Clear is held at 0).
Residuals reported everywhere in this module are that distance (not squared).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, FormatError
from .kmcore import (BLACK, CLEAR, DEFAULT_T_REF_MM, PIGMENTS, WHITE, PigmentSet,
                     concentration_to_rgb, rgb_and_jacobian)
from .spectral import mean_brightness

log = logging.getLogger(__name__)

N_ACTIVE = 5                     # C, M, Y, K, W
DEFAULT_LUT_RESOLUTION = 100
DEFAULT_RHOK_ENTRIES = 100
INTERIOR_STARTS = 20
LUT_CHUNK_ROWS = 128
MAX_ITER = 300
STEP_TOL = 1e-7
TIE_TOL = 1e-6

LUT_MAGIC = b"VPPL"
RHOK_MAGIC = b"VPPR"
LUT_VERSION = 1


def project_simplex(v):
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    u = np.sort(v, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = np.count_nonzero(cond, axis=-1)
    theta = np.take_along_axis(css, (rho - 1)[..., None], axis=-1) / rho[..., None]
    return np.maximum(v - theta, 0.0)


def _full(x5):
    c = np.zeros(x5.shape[:-1] + (len(PIGMENTS),))
    c[..., :N_ACTIVE] = x5
    return c


def simplex_points(count: int) -> np.ndarray:
    """Deterministic low-discrepancy interior points of the 5-pigment simplex."""
    if count <= 0:
        return np.zeros((0, N_ACTIVE))
    u = qmc.Halton(d=N_ACTIVE - 1, scramble=False).random(count + 1)[1:]
    u = np.sort(u, axis=1)
    edges = np.concatenate([np.zeros((count, 1)), u, np.ones((count, 1))], axis=1)
    return np.diff(edges, axis=1)


def default_starts(interior: int = INTERIOR_STARTS) -> np.ndarray:
    """Vertices, the barycentre, then ``interior`` low-discrepancy points."""
    verts = np.eye(N_ACTIVE)
    center = np.full((1, N_ACTIVE), 1.0 / N_ACTIVE)
    return np.concatenate([verts, center, simplex_points(interior)])


def _color_residual(pset, x5, targets, t_ref):
    rgb, jac = rgb_and_jacobian(pset, _full(x5), t_ref)
    clipped = np.clip(rgb, 0.0, 1.0)
    inside = (rgb > 0.0) & (rgb < 1.0)
    r = clipped - targets
    J = jac[..., :N_ACTIVE] * inside[..., None]
    return r, J


def _tangent_projector(x, g, eps: float = 1e-12):
    """Projector onto sum-preserving moves of the free coordinates.

    A coordinate pinned at zero stays fixed unless its gradient is below the
    mean gradient of the positive coordinates (it would enter the support).
    """
    pos = x > eps
    npos = np.maximum(pos.sum(axis=-1, keepdims=True), 1)
    nu = np.sum(np.where(pos, g, 0.0), axis=-1, keepdims=True) / npos
    free = (pos | (g < nu - 1e-15)).astype(np.float64)
    nfree = np.maximum(free.sum(axis=-1), 1.0)
    D = free[..., :, None] * np.eye(x.shape[-1])
    return D - free[..., :, None] * free[..., None, :] / nfree[:, None, None]


def refine(pset: PigmentSet, targets, x0, t_ref_mm: float = DEFAULT_T_REF_MM,
           max_iter: int = MAX_ITER, step_tol: float = STEP_TOL):
    """Projected damped Gauss-Newton descent on the 5-pigment simplex.

    ``targets`` (B, 3) and starts ``x0`` (B, 5) are refined independently;
    returns final points and their colour distances.
    """
    x = project_simplex(np.asarray(x0, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    r, J = _color_residual(pset, x, targets, t_ref_mm)
    cost = np.sum(r * r, axis=-1)
    mu = np.full(cost.shape, 1e-3)
    active = np.ones(cost.shape, dtype=bool)
    eye = np.eye(N_ACTIVE)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, ra, Ja, ma = x[idx], r[idx], J[idx], mu[idx]
        JtJ = np.swapaxes(Ja, -1, -2) @ Ja
        g = np.einsum("bji,bj->bi", Ja, ra)
        P = _tangent_projector(xa, g)
        H = P @ JtJ @ P
        scale = np.maximum(np.trace(JtJ, axis1=-2, axis2=-1), 1e-6)[:, None, None]
        rhs = -(P @ g[..., None])
        step = np.linalg.solve(H + (ma[:, None, None] * scale) * eye, rhs)[..., 0]
        trial = project_simplex(xa + step)
        r_new, J_new = _color_residual(pset, trial, targets[idx], t_ref_mm)
        c_new = np.sum(r_new * r_new, axis=-1)
        ok = c_new < cost[idx]
        moved = np.linalg.norm(trial - xa, axis=-1)
        acc = idx[ok]
        x[acc] = trial[ok]
        r[acc] = r_new[ok]
        J[acc] = J_new[ok]
        cost[acc] = c_new[ok]
        mu[idx] = np.where(ok, np.maximum(ma * 0.3, 1e-9), ma * 5.0)
        # a short step only means convergence if it was not forced by heavy damping
        done = (ok & (moved < step_tol) & (ma <= 1e-2)) | (mu[idx] > 1e10)
        active[idx[done]] = False
    return x, np.sqrt(cost)


def _pick(cands, resid, prefer=None, tie_tol: float = TIE_TOL):
    """Best candidate per target.

    cands (N, S, 5), resid (N, S).  Among candidates within ``tie_tol`` of the
    best, the ``prefer`` column wins if present, else the lexicographically
    smallest concentration.
    """
    n, s, _ = cands.shape
    best = resid.min(axis=1, keepdims=True)
    tied = resid <= best + tie_tol
    # lexicographic rank via stable sorts from the last key to the first
    order = np.tile(np.arange(s), (n, 1))
    for k in range(N_ACTIVE - 1, -1, -1):
        key = np.take_along_axis(cands[..., k], order, axis=1)
        o = np.argsort(key, axis=1, kind="stable")
        order = np.take_along_axis(order, o, axis=1)
    tied_sorted = np.take_along_axis(tied, order, axis=1)
    first = np.argmax(tied_sorted, axis=1)
    choice = order[np.arange(n), first]
    if prefer is not None:
        choice = np.where(tied[np.arange(n), prefer], prefer, choice)
    return cands[np.arange(n), choice], resid[np.arange(n), choice]


def solve_concentrations(pset: PigmentSet, targets, t_ref_mm: float = DEFAULT_T_REF_MM,
                         starts=None, extra_starts=None):
    """Batched multi-start solve; returns (N, 6) concentrations and (N,) residuals."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = targets.shape[0]
    starts = default_starts() if starts is None else np.asarray(starts, dtype=np.float64)
    s = starts.shape[0]
    x0 = np.broadcast_to(starts, (n, s, N_ACTIVE))
    if extra_starts is not None:
        extra = np.asarray(extra_starts, dtype=np.float64).reshape(n, -1, N_ACTIVE)
        x0 = np.concatenate([x0, extra], axis=1)
    m = x0.shape[1]
    tt = np.repeat(targets, m, axis=0)
    xs, res = refine(pset, tt, x0.reshape(-1, N_ACTIVE), t_ref_mm)
    best, resid = _pick(xs.reshape(n, m, N_ACTIVE), res.reshape(n, m))
    return _full(best), resid


def solve_concentration(pset: PigmentSet, target, t_ref_mm: float = DEFAULT_T_REF_MM):
    """Concentration (Clear = 0) whose colour is closest to ``target``, and that distance."""
    conc, resid = solve_concentrations(pset, np.asarray(target)[None, :], t_ref_mm)
    return conc[0], float(resid[0])


def brute_force_residuals(pset: PigmentSet, targets, step: float = 0.05,
                          t_ref_mm: float = DEFAULT_T_REF_MM):
    """Best colour distance over a regular simplex grid (test oracle)."""
    n = int(round(1.0 / step))
    pts = []
    for a in range(n + 1):
        for b in range(n + 1 - a):
            for c in range(n + 1 - a - b):
                for d in range(n + 1 - a - b - c):
                    pts.append((a, b, c, d, n - a - b - c - d))
    grid = np.array(pts, dtype=np.float64) / n
    rgb = concentration_to_rgb(pset, _full(grid), t_ref_mm)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    d2 = (np.sum(targets ** 2, axis=1)[:, None] - 2 * targets @ rgb.T
          + np.sum(rgb ** 2, axis=1)[None, :])
    best = np.argmin(d2, axis=1)
    dist = np.linalg.norm(rgb[best] - targets, axis=1)
    return dist, _full(grid[best])


# ---------------------------------------------------------------------------
# RGB -> concentration table

def lut_key(pset: PigmentSet, t_ref_mm: float) -> bytes:
    return hashlib.sha256(f"{pset.digest()}|t_ref_mm={float(t_ref_mm)!r}".encode()).digest()


@dataclass
class ColorLut:
    resolution: int
    entries: np.ndarray        # (res_b, res_g, res_r, 6): red varies fastest
    residuals: np.ndarray      # (res_b, res_g, res_r)
    key: bytes = b""

    def node_colors(self) -> np.ndarray:
        ax = np.linspace(0.0, 1.0, self.resolution)
        b, g, r = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([r, g, b], axis=-1)

    def coverage(self, threshold: float = 0.02) -> float:
        return float(np.mean(self.residuals < threshold))


def build_color_lut(pset: PigmentSet, resolution: int = DEFAULT_LUT_RESOLUTION,
                    t_ref_mm: float = DEFAULT_T_REF_MM, workers: int = 1,
                    bank_size: int = 256, keep: int = 4) -> ColorLut:
    """Solve every node of a resolution^3 RGB grid.

    Nodes are swept along red; each row's previous solution is an extra start
    and wins ties.  The remaining starts are the ``keep`` members of a fixed
    start bank (vertices, barycentre, low-discrepancy points) whose colours
    are nearest the target.
    """
    if resolution < 2:
        raise ConfigurationError(f"LUT resolution must be >= 2, got {resolution}")
    res = resolution
    bank = np.concatenate([default_starts(), simplex_points(bank_size)[INTERIOR_STARTS:]])
    bank_rgb = concentration_to_rgb(pset, _full(bank), t_ref_mm)
    ax = np.linspace(0.0, 1.0, res)
    gb = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)   # (b, g) rows
    entries = np.zeros((res * res, res, N_ACTIVE))
    resid = np.zeros((res * res, res))

    def sweep(rows):
        prev = None
        for ix in range(res):
            targets = np.column_stack([np.full(len(rows), ax[ix]), gb[rows, 1], gb[rows, 0]])
            d = np.linalg.norm(targets[:, None, :] - bank_rgb[None], axis=-1)
            near = np.argsort(d, axis=1, kind="stable")[:, :keep]
            cand = bank[near]
            if prev is not None:
                cand = np.concatenate([prev[:, None, :], cand], axis=1)
            m = cand.shape[1]
            xs, rs = refine(pset, np.repeat(targets, m, axis=0), cand.reshape(-1, N_ACTIVE),
                            t_ref_mm)
            best, r = _pick(xs.reshape(-1, m, N_ACTIVE), rs.reshape(-1, m),
                            prefer=0 if prev is not None else None)
            entries[rows, ix] = best
            resid[rows, ix] = r
            prev = best

    # chunk layout is fixed so batch shapes (and so every rounding) ignore `workers`
    rows = np.arange(res * res)
    chunks = [rows[i:i + LUT_CHUNK_ROWS] for i in range(0, len(rows), LUT_CHUNK_ROWS)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(sweep, chunks))
    else:
        for chunk in chunks:
            sweep(chunk)
    return ColorLut(res, _full(entries).reshape(res, res, res, 6),
                    resid.reshape(res, res, res), lut_key(pset, t_ref_mm))


def lookup_concentration(lut: ColorLut, targets) -> np.ndarray:
    """Trilinear interpolation of stored concentrations, re-normalised onto the simplex."""
    t = np.clip(np.asarray(targets, dtype=np.float64), 0.0, 1.0)
    n = lut.resolution - 1
    f = t * n
    i0 = np.minimum(np.floor(f).astype(np.intp), n - 1)
    w = f - i0
    r0, g0, b0 = i0[..., 0], i0[..., 1], i0[..., 2]
    wr, wg, wb = w[..., 0, None], w[..., 1, None], w[..., 2, None]
    E = lut.entries
    out = 0.0
    for db, fb in ((0, 1 - wb), (1, wb)):
        for dg, fg in ((0, 1 - wg), (1, wg)):
            for dr, fr in ((0, 1 - wr), (1, wr)):
                out = out + fb * fg * fr * E[b0 + db, g0 + dg, r0 + dr]
    out = np.maximum(out, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def save_color_lut(lut: ColorLut, path) -> None:
    head = LUT_MAGIC + struct.pack("<II", LUT_VERSION, lut.resolution) + lut.key.ljust(32, b"\0")
    payload = np.concatenate([lut.entries, lut.residuals[..., None]], axis=-1)
    Path(path).write_bytes(head + payload.astype("<f4").tobytes())


def load_color_lut(path) -> ColorLut:
    data = Path(path).read_bytes()
    if data[:4] != LUT_MAGIC:
        raise FormatError(f"{path}: not a colour LUT (bad magic)")
    version, res = struct.unpack_from("<II", data, 4)
    if version != LUT_VERSION:
        raise FormatError(f"{path}: unsupported LUT version {version}")
    key = data[12:44]
    body = data[44:]
    expected = res ** 3 * 7 * 4
    if len(body) != expected:
        raise FormatError(f"{path}: truncated LUT payload ({len(body)} of {expected} bytes)")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(res, res, res, 7)
    return ColorLut(res, arr[..., :6].copy(), arr[..., 6].copy(), key)


# ---------------------------------------------------------------------------
# brightness -> black fraction of the K/W grey

def gray_concentration(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    c = np.zeros(rho.shape + (len(PIGMENTS),))
    c[..., BLACK] = rho
    c[..., WHITE] = 1.0 - rho
    return c


def solve_rhok(pset: PigmentSet, brightness: float, t_ref_mm: float = DEFAULT_T_REF_MM,
               tol: float = 1e-6) -> float:
    """Black fraction whose K/W grey best matches ``brightness`` (golden-section)."""
    def f(rho):
        rgb = concentration_to_rgb(pset, gray_concentration(rho), t_ref_mm)
        return (mean_brightness(rgb) - brightness) ** 2

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, 1.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    rho = 0.5 * (a + b)
    # the optimum often sits on a boundary; golden-section only approaches it
    best = min((f(0.0), 0.0), (f(rho), rho), (f(1.0), 1.0))
    return best[1]


@dataclass
class RhoKLut:
    values: np.ndarray         # black fraction at brightness i / (n - 1)
    key: bytes = b""

    @property
    def brightness(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.values))


def build_rhok_lut(pset: PigmentSet, entries: int = DEFAULT_RHOK_ENTRIES,
                   t_ref_mm: float = DEFAULT_T_REF_MM) -> RhoKLut:
    b = np.linspace(0.0, 1.0, entries)
    vals = np.array([solve_rhok(pset, x, t_ref_mm) for x in b])
    return RhoKLut(vals, lut_key(pset, t_ref_mm))


def lookup_rhok(lut: RhoKLut, brightness):
    return np.interp(np.asarray(brightness, dtype=np.float64), lut.brightness, lut.values)


def save_rhok_lut(lut: RhoKLut, path) -> None:
    head = RHOK_MAGIC + struct.pack("<II", LUT_VERSION, len(lut.values)) + lut.key.ljust(32, b"\0")
    Path(path).write_bytes(head + lut.values.astype("<f4").tobytes())


def load_rhok_lut(path) -> RhoKLut:
    data = Path(path).read_bytes()
    if data[:4] != RHOK_MAGIC:
        raise FormatError(f"{path}: not a brightness LUT (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != LUT_VERSION:
        raise FormatError(f"{path}: unsupported LUT version {version}")
    body = data[44:]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: truncated brightness LUT payload")
    return RhoKLut(np.frombuffer(body, dtype="<f4").astype(np.float64), data[12:44])
