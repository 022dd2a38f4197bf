import numpy as np
import pytest

from voxpigment.errors import ConfigurationError, FormatError
from voxpigment.volume import (DEFAULT_PITCH_MM, GENERATOR_PARAMS, LabelVolume, RadianceVolume,
                               load_rvol, save_rvol, slabs, synth_volume)


def test_rvol_round_trip_is_byte_identical(tmp_path):
    vol = synth_volume("cloud", (9, 7, 5), seed=3)
    a, b = tmp_path / "a.rvol", tmp_path / "b.rvol"
    save_rvol(vol, a)
    back = load_rvol(a)
    assert np.array_equal(back.data, vol.data)
    assert back.pitch_mm == vol.pitch_mm and back.dims == (9, 7, 5)
    save_rvol(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_rvol_layout_is_x_fastest(tmp_path):
    data = np.zeros((2, 3, 4, 4), dtype=np.float32)
    data[1, 2, 3, 3] = 0.5          # x=3, y=2, z=1: the last voxel
    data[0, 0, 1, 3] = 0.25         # x=1: the second voxel
    path = tmp_path / "v.rvol"
    save_rvol(RadianceVolume(data), path)
    raw = path.read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n\n") + 2:], dtype="<f4").reshape(-1, 4)
    assert payload[1, 3] == 0.25 and payload[-1, 3] == 0.5
    assert raw.startswith(b"RVOL 1\ndims 4 3 2\n")


def test_zero_volume_loads(tmp_path):
    vol = RadianceVolume(np.zeros((2, 2, 2, 4), dtype=np.float32))
    save_rvol(vol, tmp_path / "z.rvol")
    back = load_rvol(tmp_path / "z.rvol")
    assert back.dims == (2, 2, 2) and not back.data.any()
    assert back.pitch_mm == DEFAULT_PITCH_MM


def test_negative_density_names_voxel():
    data = np.zeros((2, 2, 2, 4), dtype=np.float32)
    data[0, 0, 0, 3] = -1
    with pytest.raises(FormatError, match=r"\(0, 0, 0\)"):
        RadianceVolume(data)
    data[0, 0, 0, 3] = 0
    data[1, 0, 1, 3] = np.nan
    with pytest.raises(FormatError, match=r"\(1, 0, 1\)"):
        RadianceVolume(data)


def test_colour_out_of_range_names_voxel():
    data = np.zeros((1, 2, 3, 4), dtype=np.float32)
    data[0, 1, 2, 0] = 1.5
    with pytest.raises(FormatError, match=r"\(2, 1, 0\)"):
        RadianceVolume(data)


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "v.rvol"
    save_rvol(synth_volume("solid-sphere", (4, 4, 4)), path)
    raw = path.read_bytes()
    (tmp_path / "m.rvol").write_bytes(b"RVOX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_rvol(tmp_path / "m.rvol")
    (tmp_path / "t.rvol").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_rvol(tmp_path / "t.rvol")
    (tmp_path / "h.rvol").write_bytes(b"RVOL 1\ndims 4 4\n")
    with pytest.raises(FormatError):
        load_rvol(tmp_path / "h.rvol")
    (tmp_path / "p.rvol").write_bytes(raw.replace(b"dims 4 4 4", b"dims 4 x 4"))
    with pytest.raises(FormatError, match="malformed"):
        load_rvol(tmp_path / "p.rvol")


def test_wrong_shape_rejected():
    with pytest.raises(FormatError):
        RadianceVolume(np.zeros((2, 2, 2, 3)))
    with pytest.raises(FormatError):
        RadianceVolume(np.zeros((2, 2, 2, 4)), (0.1, 0.0, 0.1))


@pytest.mark.parametrize("recipe", sorted(GENERATOR_PARAMS))
def test_generators_are_deterministic(recipe):
    a = synth_volume(recipe, (12, 10, 8), seed=7)
    b = synth_volume(recipe, (12, 10, 8), seed=7)
    assert a.digest() == b.digest()
    assert a.dims == (12, 10, 8)
    assert np.all(a.sigma >= 0) and np.all((a.rgb >= 0) & (a.rgb <= 1))


def test_seed_changes_noise_volumes():
    assert synth_volume("cloud", (16, 16, 16), 1).digest() != \
        synth_volume("cloud", (16, 16, 16), 2).digest()


def test_solid_sphere_centre_and_exterior():
    p = GENERATOR_PARAMS["solid-sphere"]
    vol = synth_volume("solid-sphere", (21, 21, 21))
    assert vol.sigma[10, 10, 10] == pytest.approx(p["sigma_max"])
    assert np.allclose(vol.rgb[10, 10, 10], p["color"])
    assert vol.sigma[0, 0, 0] == 0


def test_gradient_density_is_linear_in_x():
    p = GENERATOR_PARAMS["gradient-cube"]
    vol = synth_volume("gradient-cube", (10, 3, 2))
    expected = p["sigma_max"] * np.arange(1, 11) / 10
    assert np.allclose(vol.sigma[1, 2], expected, rtol=1e-6)
    assert np.allclose(vol.rgb[0, 0, 0], p["color_start"])
    assert np.allclose(vol.rgb[0, 0, -1], p["color_end"])


def test_cloud_has_empty_and_dense_regions():
    vol = synth_volume("cloud", (32, 32, 32))
    assert (vol.sigma == 0).mean() > 0.2
    assert vol.sigma.max() > 1.0


def test_unknown_recipe():
    with pytest.raises(ConfigurationError, match="unknown"):
        synth_volume("teapot")


def test_slabs_cover_range():
    for nz in (1, 5, 64):
        for w in (1, 3, 8, 100):
            spans = slabs(nz, w)
            assert spans[0][0] == 0 and spans[-1][1] == nz
            assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
            assert all(b > a for a, b in spans)


def test_scaled_and_linearized():
    vol = synth_volume("solid-sphere", (6, 6, 6))
    assert np.allclose(vol.scaled(2.0).sigma, 2 * vol.sigma)
    with pytest.raises(ConfigurationError):
        vol.scaled(-1)
    lin = vol.linearized()
    assert np.all(lin.rgb <= vol.rgb + 1e-7)
    assert np.array_equal(lin.sigma, vol.sigma)


def test_label_volume_histogram():
    lab = np.zeros((2, 2, 2), dtype=np.uint8)
    lab[0, 0, :] = 1
    lab[1, 1, 1] = 6
    lv = LabelVolume(lab)
    assert lv.histogram() == {"C": 2, "Cl": 1}
    assert lv.dims == (2, 2, 2)
    with pytest.raises(FormatError):
        LabelVolume(np.full((1, 1, 1), 7))
