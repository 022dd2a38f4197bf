"""Voxel volumes: radiance input, pigment-label output, RVOL I/O and
synthetic test volumes.

Arrays are indexed ``[z, y, x]`` so that C-order flattening runs x fastest,
then y, then z, matching the on-disk layout.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

DEFAULT_PITCH_MM = (0.084, 0.028, 0.014)
EMPTY = 0
LABEL_NAMES = ("Empty", "C", "M", "Y", "K", "W", "Cl")


def _voxel_xyz(flat_index: int, dims) -> tuple[int, int, int]:
    nx, ny, _ = dims
    return flat_index % nx, (flat_index // nx) % ny, flat_index // (nx * ny)


@dataclass
class RadianceVolume:
    """Per-voxel linear RGB in [0, 1] and density sigma (per mm).

    ``data`` has shape (nz, ny, nx, 4) and dtype float32; ``dims`` is
    reported as (nx, ny, nz).
    """
    data: np.ndarray
    pitch_mm: tuple = DEFAULT_PITCH_MM

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4 or d.shape[-1] != 4 or min(d.shape[:3]) < 1:
            raise FormatError(f"radiance data must have shape (nz, ny, nx, 4), got {d.shape}")
        self.data = np.ascontiguousarray(d, dtype=np.float32)
        self.pitch_mm = tuple(float(p) for p in self.pitch_mm)
        if len(self.pitch_mm) != 3 or min(self.pitch_mm) <= 0:
            raise FormatError(f"voxel pitch must be three positive values, got {self.pitch_mm}")
        self.validate()

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape[:3]
        return nx, ny, nz

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def sigma(self) -> np.ndarray:
        return self.data[..., 3]

    def validate(self) -> None:
        flat = self.data.reshape(-1, 4)
        sig = flat[:, 3]
        bad = np.flatnonzero(~np.isfinite(sig) | (sig < 0))
        if bad.size:
            i = int(bad[0])
            raise FormatError(f"invalid density {sig[i]} at voxel {_voxel_xyz(i, self.dims)}")
        rgb = flat[:, :3]
        bad = np.flatnonzero(np.any(~np.isfinite(rgb) | (rgb < 0) | (rgb > 1), axis=1))
        if bad.size:
            i = int(bad[0])
            raise FormatError(
                f"colour {rgb[i].tolist()} outside [0, 1] at voxel {_voxel_xyz(i, self.dims)}")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.dims, self.pitch_mm)).encode())
        h.update(self.data.astype("<f4").tobytes())
        return h.hexdigest()

    def scaled(self, density_scale: float) -> "RadianceVolume":
        """Copy with sigma multiplied by ``density_scale`` (scene -> print units)."""
        if density_scale < 0:
            raise ConfigurationError("density scale must be non-negative")
        d = self.data.copy()
        d[..., 3] *= np.float32(density_scale)
        return RadianceVolume(d, self.pitch_mm)

    def linearized(self) -> "RadianceVolume":
        """Copy with display-encoded sRGB colours decoded to linear light."""
        from .spectral import srgb_decode
        d = self.data.copy()
        d[..., :3] = srgb_decode(d[..., :3])
        return RadianceVolume(d, self.pitch_mm)


@dataclass
class LabelVolume:
    """Pigment label per voxel: 0 = Empty, 1..6 = C, M, Y, K, W, Cl."""
    labels: np.ndarray
    pitch_mm: tuple = DEFAULT_PITCH_MM

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise FormatError(f"labels must have shape (nz, ny, nx), got {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > 6):
            raise FormatError("labels must lie in 0..6")
        self.labels = np.ascontiguousarray(lab, dtype=np.uint8)
        self.pitch_mm = tuple(float(p) for p in self.pitch_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return nx, ny, nz

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels.ravel(), minlength=7)
        return {LABEL_NAMES[i]: int(c) for i, c in enumerate(counts) if i > 0 and c > 0}


# ---------------------------------------------------------------------------
# RVOL: four text header lines, a blank line, then little-endian float32
# (r, g, b, sigma) per voxel, x fastest, then y, then z.

def _header(vol: RadianceVolume) -> bytes:
    nx, ny, nz = vol.dims
    px, py, pz = vol.pitch_mm
    return (f"RVOL 1\ndims {nx} {ny} {nz}\npitch_mm {px!r} {py!r} {pz!r}\n"
            f"data float32 rgba\n\n").encode("ascii")


def save_rvol(vol: RadianceVolume, path) -> None:
    Path(path).write_bytes(_header(vol) + vol.data.astype("<f4").tobytes())


def load_rvol(path) -> RadianceVolume:
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(5):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated RVOL header")
        lines.append(raw[pos:end].decode("ascii", errors="replace"))
        pos = end + 1
    if lines[0] != "RVOL 1":
        raise FormatError(f"{path}: bad magic {lines[0]!r} (expected 'RVOL 1')")
    try:
        key, *dims = lines[1].split()
        assert key == "dims" and len(dims) == 3
        nx, ny, nz = (int(v) for v in dims)
        key, *pitch = lines[2].split()
        assert key == "pitch_mm" and len(pitch) == 3
        pitch = tuple(float(v) for v in pitch)
    except (AssertionError, ValueError):
        raise FormatError(f"{path}: malformed RVOL header") from None
    if lines[3] != "data float32 rgba" or lines[4] != "":
        raise FormatError(f"{path}: unsupported RVOL data layout {lines[3]!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: dims must be >= 1, got {(nx, ny, nz)}")
    expected = nx * ny * nz * 16
    body = raw[pos:]
    if len(body) != expected:
        raise FormatError(f"{path}: truncated payload ({len(body)} of {expected} bytes)")
    data = np.frombuffer(body, dtype="<f4").reshape(nz, ny, nx, 4)
    return RadianceVolume(data.astype(np.float32), pitch)


# ---------------------------------------------------------------------------
# Synthetic volumes.  Geometry is in voxel index units; every constant is
# listed in GENERATOR_PARAMS.

GENERATOR_PARAMS = {
    "solid-sphere": {"radius_frac": 0.4, "sigma_max": 1.5, "color": (0.2, 0.5, 0.8)},
    "cloud": {"cells": 6, "octaves": 3, "sigma_max": 3.0, "threshold": 0.35,
              "falloff": 1.0, "color_lo": (0.75, 0.8, 0.9), "color_hi": (0.97, 0.96, 0.94)},
    "fur-shell": {"core_frac": 0.28, "shell_frac": 0.45, "core_sigma": 1.2,
                  "strands": 60, "strand_sigma": 3.0, "strand_radius": 0.75,
                  "core_color": (0.55, 0.35, 0.2), "strand_color": (0.85, 0.7, 0.45)},
    "gradient-cube": {"sigma_max": 4.0, "color_start": (0.0, 0.8, 1.0),
                      "color_end": (1.0, 0.9, 0.0)},
}


def _centered_coords(dims):
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return x - (nx - 1) / 2.0, y - (ny - 1) / 2.0, z - (nz - 1) / 2.0


def _value_noise(dims, cells, rng):
    nx, ny, nz = dims
    lattice = rng.random((cells + 1, cells + 1, cells + 1))
    fz = np.linspace(0, cells, nz, endpoint=False) if nz > 1 else np.zeros(1)
    fy = np.linspace(0, cells, ny, endpoint=False) if ny > 1 else np.zeros(1)
    fx = np.linspace(0, cells, nx, endpoint=False) if nx > 1 else np.zeros(1)
    z, y, x = np.meshgrid(fz, fy, fx, indexing="ij")
    i, j, k = z.astype(int), y.astype(int), x.astype(int)
    # smoothstep weights
    w = [(f - f.astype(int)) for f in (z, y, x)]
    w = [t * t * (3 - 2 * t) for t in w]
    out = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                out = out + (lattice[i + dz, j + dy, k + dx]
                             * (w[0] if dz else 1 - w[0])
                             * (w[1] if dy else 1 - w[1])
                             * (w[2] if dx else 1 - w[2]))
    return out


def synth_volume(recipe: str, dims=(32, 32, 32), seed: int = 0,
                 pitch_mm=DEFAULT_PITCH_MM) -> RadianceVolume:
    """Deterministic synthetic radiance volume for one of GENERATOR_PARAMS' recipes."""
    if recipe not in GENERATOR_PARAMS:
        raise ConfigurationError(
            f"unknown volume recipe {recipe!r}; choose from {sorted(GENERATOR_PARAMS)}")
    p = GENERATOR_PARAMS[recipe]
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 1:
        raise ConfigurationError("volume dims must be >= 1")
    dims = (nx, ny, nz)
    rng = np.random.default_rng(seed)
    data = np.zeros((nz, ny, nx, 4))
    x, y, z = _centered_coords(dims)
    r = np.sqrt(x * x + y * y + z * z)
    half = min(dims) / 2.0

    if recipe == "solid-sphere":
        inside = r <= p["radius_frac"] * min(dims)
        data[inside, :3] = p["color"]
        data[inside, 3] = p["sigma_max"]

    elif recipe == "cloud":
        noise = np.zeros(r.shape)
        amp, total = 1.0, 0.0
        for o in range(p["octaves"]):
            noise += amp * _value_noise(dims, p["cells"] * 2 ** o, rng)
            total += amp
            amp *= 0.5
        noise /= total
        radial = np.clip(1.0 - p["falloff"] * (r / max(half, 1e-9)) ** 2, 0.0, 1.0)
        dens = np.clip((noise * radial - p["threshold"] * 0.5) / (1 - p["threshold"] * 0.5), 0, 1)
        dens = np.clip(dens * 2.0, 0.0, 1.0)
        lo, hi = np.array(p["color_lo"]), np.array(p["color_hi"])
        data[..., :3] = lo + (hi - lo) * noise[..., None]
        data[..., 3] = p["sigma_max"] * dens
        data[dens <= 0, :3] = 0.0

    elif recipe == "fur-shell":
        core = r <= p["core_frac"] * min(dims)
        data[core, :3] = p["core_color"]
        data[core, 3] = p["core_sigma"]
        r0 = p["core_frac"] * min(dims)
        r1 = p["shell_frac"] * min(dims)
        dirs = rng.normal(size=(p["strands"], 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = np.stack([x, y, z], axis=-1)
        for d in dirs:
            along = pts @ d
            perp = np.linalg.norm(pts - along[..., None] * d, axis=-1)
            hit = (along >= r0) & (along <= r1) & (perp <= p["strand_radius"]) & ~core
            data[hit, :3] = p["strand_color"]
            data[hit, 3] = p["strand_sigma"]

    elif recipe == "gradient-cube":
        s = (np.arange(nx) / (nx - 1)) if nx > 1 else np.zeros(1)
        a, b = np.array(p["color_start"]), np.array(p["color_end"])
        data[..., :3] = (a + (b - a) * s[:, None])[None, None, :, :]
        data[..., 3] = (p["sigma_max"] * (np.arange(nx) + 1) / nx)[None, None, :]

    return RadianceVolume(data.astype(np.float32), pitch_mm)


def slabs(nz: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous z-ranges, one per worker (empty ranges dropped)."""
    edges = np.linspace(0, nz, max(1, workers) + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
