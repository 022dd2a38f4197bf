import json

import numpy as np
import pytest

from voxpigment.calib import synth_pigment_set
from voxpigment.errors import ConfigurationError, FormatError
from voxpigment.gamut import build_color_lut, build_rhok_lut, lookup_concentration
from voxpigment.kmcore import PIGMENT_INDEX, PIGMENTS, concentration_to_rgb, pure, sigma_scalar
from voxpigment.pipeline import (FLAG_CAPPED, FLAG_DEGENERATE, AlignmentParams, PreviewParams,
                                 align_density, brute_force_convert, convert, export_slices,
                                 halftone, import_slices, layer_hash, preview_radiance,
                                 preview_render, save_preview_png, voxel_uniforms)
from voxpigment.volume import EMPTY, LabelVolume, RadianceVolume, synth_volume

C, M, Y, K, W, CL = (PIGMENT_INDEX[p] for p in PIGMENTS)


@pytest.fixture(scope="module")
def lut9(default_set):
    return build_color_lut(default_set, 9)


def _uniform(rgb, sigma, shape=(4, 4, 4)):
    d = np.zeros(shape + (4,), dtype=np.float32)
    d[..., :3] = rgb
    d[..., 3] = sigma
    return RadianceVolume(d)


def _rho_scan(pset, conc, target):
    """Clear-free fraction whose density is closest to ``target``: 1-D scan at
    step 1e-2, then 1e-4 around the best coarse point."""
    def best(rho):
        mix = rho[:, None] * conc + (1 - rho[:, None]) * pure("Cl")
        return rho[np.argmin(np.abs(sigma_scalar(pset, mix) - target))]
    r = best(np.linspace(0.0, 1.0, 101))
    return best(np.clip(r + np.arange(-100, 101) * 1e-4, 0.0, 1.0))


# -- density alignment ---------------------------------------------------------

@pytest.mark.parametrize("mode", ["closed-form", "matched"])
def test_halving_density_dilutes_by_half(flat_set, mode):
    res = align_density(flat_set, pure("C"), 1.0, 0.5, AlignmentParams(dilution=mode))
    assert res.rho == pytest.approx(0.5, abs=1e-6)
    assert res.concentration[CL] == pytest.approx(0.5, abs=1e-6)
    assert res.concentration[C] == pytest.approx(0.5, abs=1e-6)
    assert not res.flagged


def test_equal_density_is_unchanged(default_set):
    conc = np.array([0.3, 0.2, 0.1, 0.1, 0.3, 0.0])
    s = float(sigma_scalar(default_set, conc))
    res = align_density(default_set, conc, s, s)
    assert np.array_equal(res.concentration, conc)
    assert res.rho == 1.0 and res.flags == 0


def test_unreachable_density_is_capped(default_set):
    res = align_density(default_set, pure("C"), 1.0, 10.0)
    assert res.rho == 0.1
    assert res.flags & FLAG_CAPPED
    assert res.concentration.sum() == pytest.approx(1.0)
    assert res.concentration[C] == pytest.approx(0.9)


def test_zero_density_lookup_is_degenerate(default_set):
    res = align_density(default_set, pure("Cl"), 0.0, 1.0)
    assert res.flags & FLAG_DEGENERATE
    assert res.concentration[CL] == pytest.approx(0.9)
    assert res.concentration[K] + res.concentration[W] == pytest.approx(0.1)


def test_augmentation_reaches_target(default_set):
    conc = pure("Y")
    s = float(sigma_scalar(default_set, conc))
    res = align_density(default_set, conc, s, 1.02 * s)
    assert not res.flagged
    assert 0 < res.rho <= 0.1
    got = float(sigma_scalar(default_set, res.concentration))
    assert got >= 1.02 * s * (1 - 1e-6)
    assert got == pytest.approx(1.02 * s, rel=0.02)


def test_dilution_matches_scan_oracle(default_set):
    rng = np.random.default_rng(41)
    for _ in range(12):
        conc = np.concatenate([rng.dirichlet(np.ones(5)), [0.0]])
        s = float(sigma_scalar(default_set, conc))
        target = s * rng.uniform(0.02, 0.98)
        res = align_density(default_set, conc, s, target)
        assert float(sigma_scalar(default_set, res.concentration)) == pytest.approx(target,
                                                                                   rel=0.02)
        assert res.rho == pytest.approx(_rho_scan(default_set, conc, target), abs=2e-4)
        assert np.allclose(res.concentration.sum(), 1.0)


def test_alignment_params_validated():
    with pytest.raises(ConfigurationError):
        AlignmentParams(rho_plus_cap=1.5)
    with pytest.raises(ConfigurationError):
        AlignmentParams(dilution="exact")
    with pytest.raises(ConfigurationError):
        AlignmentParams(t_max_mm=0)


# -- halftoning -----------------------------------------------------------------

def test_uniforms_are_pure_function_of_index():
    idx = np.arange(1000, dtype=np.uint64)
    u = voxel_uniforms(9, idx)
    perm = np.random.default_rng(0).permutation(1000)
    assert np.array_equal(voxel_uniforms(9, idx[perm]), u[perm])
    assert np.all((u >= 0) & (u < 1))
    assert not np.array_equal(voxel_uniforms(10, idx), u)


def test_uniforms_are_uniform():
    u = voxel_uniforms(3, np.arange(200_000, dtype=np.uint64))
    counts, _ = np.histogram(u, bins=10, range=(0, 1))
    assert np.all(np.abs(counts - 20_000) < 4 * np.sqrt(20_000 * 0.9))


def test_pure_pigment_halftones_to_itself():
    conc = np.zeros((3, 4, 5, 6))
    conc[..., M] = 1.0
    assert np.all(halftone(conc, seed=2) == M + 1)


def test_fifty_fifty_frequencies():
    conc = np.zeros((100, 100, 100, 6))
    conc[..., C] = conc[..., M] = 0.5
    lab = halftone(conc, seed=5, workers=4)
    assert abs(np.mean(lab == C + 1) - 0.5) <= 0.0015
    assert np.all((lab == C + 1) | (lab == M + 1))


def test_halftone_worker_invariant_and_masks_empty():
    rng = np.random.default_rng(6)
    conc = rng.dirichlet(np.ones(6), size=(7, 5, 6))
    occ = rng.random((7, 5, 6)) > 0.3
    a = halftone(conc, occ, seed=1, workers=1)
    assert np.array_equal(a, halftone(conc, occ, seed=1, workers=3))
    assert np.all(a[~occ] == EMPTY) and np.all(a[occ] > 0)


def test_zero_concentration_voxel_does_not_crash():
    lab = halftone(np.zeros((1, 1, 2, 6)), seed=0)
    assert lab.shape == (1, 1, 2)


# -- conversion ---------------------------------------------------------------

def test_all_empty_volume(default_set, lut9, rhok_lut):
    vol = RadianceVolume(np.zeros((3, 3, 3, 4), dtype=np.float32))
    res = convert(vol, default_set, lut9, rhok_lut)
    assert np.all(res.labels.labels == EMPTY)
    assert res.report.occupied == 0 and res.report.label_histogram == {}
    clear = convert(vol, default_set, lut9, rhok_lut, exterior="clear")
    assert np.all(clear.labels.labels == CL + 1)


def test_uniform_volume_matches_alignment(default_set, lut33, rhok_lut):
    lut, _ = lut33
    rgb = np.array([0.45, 0.55, 0.35])
    vol = _uniform(rgb, 0.4, (40, 50, 50))
    res = convert(vol, default_set, lut, rhok_lut, seed=3)
    cs = lookup_concentration(lut, rgb)
    expect = align_density(default_set, cs, float(sigma_scalar(default_set, cs)), 0.4,
                           brightness=float(rgb.mean()), rhok_lut=rhok_lut).concentration
    n = vol.data[..., 0].size
    for i, name in enumerate(PIGMENTS):
        freq = res.report.label_histogram.get(name, 0) / n
        sd = np.sqrt(expect[i] * (1 - expect[i]) / n)
        assert abs(freq - expect[i]) <= 4 * sd + 1e-3, name
    assert res.report.branch_counts["diluted"] == n


def test_sphere_boundary(default_set, lut9, rhok_lut):
    vol = synth_volume("solid-sphere", (16, 16, 16))
    res = convert(vol, default_set, lut9, rhok_lut)
    inside = vol.sigma > 0
    assert np.all(res.labels.labels[~inside] == EMPTY)
    assert np.all(res.labels.labels[inside] > 0)
    assert res.report.occupied == int(inside.sum())


def test_conversion_deterministic_across_workers(default_set, lut9, rhok_lut):
    vol = synth_volume("cloud", (20, 18, 16), seed=4)
    a = convert(vol, default_set, lut9, rhok_lut, seed=8, workers=1)
    b = convert(vol, default_set, lut9, rhok_lut, seed=8, workers=5)
    assert np.array_equal(a.labels.labels, b.labels.labels)
    assert a.report.to_json() == b.report.to_json()
    c = convert(vol, default_set, lut9, rhok_lut, seed=9)
    assert not np.array_equal(a.labels.labels, c.labels.labels)


def test_report_is_json(default_set, lut9, rhok_lut):
    res = convert(synth_volume("gradient-cube", (8, 4, 4)), default_set, lut9, rhok_lut)
    doc = json.loads(res.report.to_json())
    assert doc["voxels"] == 128
    assert sum(doc["sigma_target"]["histogram"]["counts"]) == doc["occupied"]
    assert set(doc["flag_counts"]) == {"capped", "degenerate"}


def test_lut_key_mismatch_rejected(default_set, lut9, rhok_lut):
    other = synth_pigment_set("scatter-heavy")
    with pytest.raises(ConfigurationError, match="rebuild"):
        convert(_uniform([0.5, 0.5, 0.5], 1.0), other, lut9, rhok_lut)
    with pytest.raises(ConfigurationError):
        convert(_uniform([0.5, 0.5, 0.5], 1.0), default_set, lut9, rhok_lut, exterior="water")


# -- brute-force baseline ------------------------------------------------------

def test_baseline_uniform_pure_colour(default_set):
    cyan = concentration_to_rgb(default_set, pure("C"))
    lab = brute_force_convert(_uniform(cyan, 1.0), default_set)
    assert np.all(lab.labels == C + 1)


def test_baseline_zero_density_is_empty(default_set):
    lab = brute_force_convert(_uniform([0.2, 0.9, 0.3], 0.0), default_set)
    assert np.all(lab.labels == EMPTY)


def test_baseline_gradient_matches_hand_average(default_set):
    from voxpigment.volume import GENERATOR_PARAMS
    p = GENERATOR_PARAMS["gradient-cube"]
    nx = 24
    vol = synth_volume("gradient-cube", (nx, 5, 5))
    lab = brute_force_convert(vol, default_set, neighborhood=3)
    palette = concentration_to_rgb(default_set, np.eye(6))
    a, b = np.array(p["color_start"]), np.array(p["color_end"])
    expect = []
    for x in range(nx):
        js = [j for j in (x - 1, x, x + 1) if 0 <= j < nx]
        w = [p["sigma_max"] * (j + 1) / nx for j in js]
        s_bar = sum(wi * j / (nx - 1) for wi, j in zip(w, js)) / sum(w)
        col = a + (b - a) * s_bar
        expect.append(1 + int(np.argmin(np.linalg.norm(palette - col, axis=1))))
    assert lab.labels[2, 2].tolist() == expect
    assert len(set(expect)) > 1


def test_baseline_rejects_even_neighbourhood(default_set):
    with pytest.raises(ConfigurationError):
        brute_force_convert(_uniform([0.5] * 3, 1.0), default_set, neighborhood=4)


# -- preview ------------------------------------------------------------------------

def test_empty_volume_is_transparent(default_set):
    img = preview_render(LabelVolume(np.zeros((4, 5, 6), np.uint8)), default_set, "z")
    assert img.shape == (5, 6, 4)
    assert np.all(img == 0)


def test_preview_axis_shapes(default_set):
    lv = LabelVolume(np.ones((4, 5, 6), np.uint8))
    assert preview_render(lv, default_set, "y").shape == (4, 6, 4)
    assert preview_render(lv, default_set, "x").shape == (4, 5, 4)
    with pytest.raises(ConfigurationError):
        preview_render(lv, default_set, "w")


def test_black_slab_is_near_black(default_set):
    img = preview_render(LabelVolume(np.full((40, 4, 4), K + 1, np.uint8)), default_set, "z")
    assert np.all(img[..., :3] < 0.05)
    assert np.all(img[..., 3] > 0.9)


def test_checkerboard_mixes_between_pigments(default_set):
    z, y, x = np.indices((6, 12, 12))
    lab = np.where((x + y + z) % 2 == 0, C + 1, M + 1).astype(np.uint8)
    img = preview_render(LabelVolume(lab), default_set, "z", PreviewParams(mix_radius=1))
    mixed = concentration_to_rgb(default_set, 0.5 * (pure("C") + pure("M")))
    assert np.allclose(img[3:-3, 3:-3, :3], mixed, atol=0.02)
    c_rgb = concentration_to_rgb(default_set, pure("C"))
    m_rgb = concentration_to_rgb(default_set, pure("M"))
    centre = img[6, 6, :3]
    assert min(c_rgb[0], m_rgb[0]) <= centre[0] <= max(c_rgb[0], m_rgb[0])


def test_mixed_preview_of_sparse_labels_is_finite(default_set, lut9, rhok_lut):
    # mixed labels next to large empty regions leave box-filter residue behind them
    lab = convert(synth_volume("cloud", (32, 32, 32)), default_set, lut9, rhok_lut).labels
    for axis in "xyz":
        img = preview_render(lab, default_set, axis, PreviewParams(mix_radius=2))
        assert np.all(np.isfinite(img))
        assert np.all((img >= 0) & (img <= 1))


def test_mixed_preview_recovers_target_colour(default_set, lut33, rhok_lut):
    lut, _ = lut33
    target = np.array([0.4, 0.6, 0.3])
    cs = lookup_concentration(lut, target)
    vol = _uniform(target, float(sigma_scalar(default_set, cs)), (1, 128, 128))
    lab = convert(vol, default_set, lut, rhok_lut, seed=1).labels
    err = {}
    for r in (0, 4):
        img = preview_render(lab, default_set, "z", PreviewParams(mix_radius=r))
        err[r] = np.linalg.norm(img[..., :3].mean(axis=(0, 1)) - target)
    assert err[4] < 0.02 < err[0]


def test_radiance_preview_and_png(tmp_path, default_set):
    vol = synth_volume("solid-sphere", (10, 10, 10))
    img = preview_radiance(vol, "z")
    assert img.shape == (10, 10, 4)
    assert img[5, 5, 3] > 0 and img[0, 0, 3] == 0
    save_preview_png(img, tmp_path / "p.png")
    from PIL import Image
    back = np.asarray(Image.open(tmp_path / "p.png"))
    assert back.shape == (10, 10, 4) and back[0, 0, 3] == 0


# -- slices ----------------------------------------------------------------------

def _labels():
    rng = np.random.default_rng(12)
    return LabelVolume(rng.integers(0, 7, size=(5, 6, 7)).astype(np.uint8), (0.1, 0.2, 0.3))


def test_slice_round_trip(tmp_path):
    lv = _labels()
    man = export_slices(lv, tmp_path / "s", seed=4, workers=3)
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == \
        [f"layer_{k:05d}.png" for k in range(5)] + ["manifest.json"]
    assert man["dims"] == [7, 6, 5] and man["seed"] == 4
    assert man["layers"][2]["hash"] == layer_hash(lv.labels[2])
    back = import_slices(tmp_path / "s")
    assert np.array_equal(back.labels, lv.labels)
    assert back.pitch_mm == lv.pitch_mm


def test_re_export_is_byte_identical(tmp_path):
    lv = _labels()
    export_slices(lv, tmp_path / "a")
    export_slices(lv, tmp_path / "b", workers=4)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_tampered_layer_detected(tmp_path):
    lv = _labels()
    export_slices(lv, tmp_path / "s")
    from PIL import Image
    bad = lv.labels[1].copy()
    bad[0, 0] = (bad[0, 0] + 1) % 7
    Image.fromarray(bad, mode="L").save(tmp_path / "s" / "layer_00001.png")
    with pytest.raises(FormatError, match="hash"):
        import_slices(tmp_path / "s")
    with pytest.raises(FormatError, match="manifest"):
        import_slices(tmp_path / "nowhere")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigurationError, match="cannot"):
        export_slices(_labels(), blocker / "out")
