import json
import math

import numpy as np
import pytest

from voxpigment.calib import (RECIPES, CalibrationFile, MeasurementRecord, calibration_to_dict,
                              invert_km, load_calibration, measure, save_calibration,
                              solve_calibration, synth_calibration, synth_pigment_set)
from voxpigment.errors import ConfigurationError, FormatError
from voxpigment.kmcore import PIGMENTS, PigmentProfile, concentration_to_rgb, km_layer, pure

NB = 38


def _record(K, S, t=1.0, pigment="C"):
    L = km_layer(np.full(NB, K), np.full(NB, S), t)
    return MeasurementRecord(pigment, t, L.reflectance, L.transmittance)


def test_known_pair_round_trip():
    res = invert_km(_record(1.0, 0.5))
    assert np.allclose(res.profile.absorption, 1.0, rtol=1e-4)
    assert np.allclose(res.profile.scattering, 0.5, rtol=1e-4)
    assert res.flagged_bands == []


def test_pure_absorber_record():
    rec = MeasurementRecord("K", 2.0, np.zeros(NB), np.full(NB, math.exp(-2)))
    res = invert_km(rec)
    assert np.allclose(res.profile.absorption, 1.0, atol=1e-5)
    assert np.allclose(res.profile.scattering, 0.0, atol=1e-5)


def test_vacuum_record():
    rec = MeasurementRecord("Cl", 1.0, np.zeros(NB), np.ones(NB))
    res = invert_km(rec)
    assert np.all(res.profile.absorption == 0) and np.all(res.profile.scattering == 0)


def test_random_round_trip_log_uniform():
    rng = np.random.default_rng(21)
    for _ in range(100):
        K = 10 ** rng.uniform(-3, 1, NB)
        S = 10 ** rng.uniform(-3, 1, NB)
        res = invert_km(measure(PigmentProfile("M", K, S), 1.0))
        assert np.allclose(res.profile.absorption, K, rtol=1e-3, atol=0)
        assert np.allclose(res.profile.scattering, S, rtol=1e-3, atol=0)
        assert res.flagged_bands == []


def test_inversion_is_deterministic():
    rec = _record(0.3, 2.0)
    a, b = invert_km(rec), invert_km(rec)
    assert np.array_equal(a.profile.absorption, b.profile.absorption)
    assert np.array_equal(a.profile.scattering, b.profile.scattering)


def test_inconsistent_record_is_flagged():
    # R + T = 1.018: inside the measurement tolerance but no slab conserves
    # less energy than that, so the best fit misses by 0.018 / sqrt(2)
    R = np.full(NB, 0.509)
    T = np.full(NB, 0.509)
    res = invert_km(MeasurementRecord("Y", 1.0, R, T))
    assert res.flagged_bands == list(range(NB))


def test_record_rejects_energy_violation_with_band():
    R = np.full(NB, 0.2)
    T = np.full(NB, 0.5)
    T[7] = 0.85
    with pytest.raises(FormatError, match="band 7"):
        MeasurementRecord("C", 1.0, R, T)


def test_record_rejects_out_of_range():
    with pytest.raises(FormatError, match="band 3"):
        R = np.zeros(NB)
        R[3] = -0.1
        MeasurementRecord("C", 1.0, R, np.zeros(NB))


# -- synthetic sets --------------------------------------------------------

def test_default_yellow_absorbs_blue(default_set):
    r, g, b = concentration_to_rgb(default_set, pure("Y"))
    assert b < r and b < g


def test_default_clear_is_empty(default_set):
    assert default_set["Cl"].absorption.max() <= 1e-6
    assert default_set["Cl"].scattering.max() <= 1e-6


def test_absorber_heavy_scatter_ratio(absorber_set):
    for p in absorber_set.profiles[:5]:
        assert np.all(p.scattering <= 0.1 * p.absorption + 1e-15), p.id


def test_hue_placement(default_set):
    wl = default_set.grid.wavelengths
    peak = {p: wl[np.argmax(default_set[p].absorption)] for p in ("C", "M", "Y")}
    assert peak["C"] > peak["M"] > peak["Y"]
    assert np.ptp(default_set["K"].absorption) == 0
    assert default_set["W"].scattering.min() > 10 * default_set["W"].absorption.max()


def test_unknown_recipe():
    with pytest.raises(ConfigurationError, match="unknown"):
        synth_pigment_set("neon")


def test_all_recipes_build():
    for name in RECIPES:
        assert len(synth_pigment_set(name).profiles) == 6


def test_default_calibration_round_trip_is_clean():
    cal = solve_calibration(synth_calibration("default"))
    truth = synth_pigment_set("default")
    assert cal.flagged == {}
    assert np.allclose(cal.solved.K, truth.K, rtol=1e-6, atol=1e-12)
    assert np.allclose(cal.solved.S, truth.S, rtol=1e-6, atol=1e-12)


# -- file format -----------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    cal = solve_calibration(synth_calibration("default"))
    path = tmp_path / "cal.json"
    save_calibration(cal, path)
    back = load_calibration(path)
    assert np.array_equal(back.solved.K, cal.solved.K)
    assert np.array_equal(back.solved.S, cal.solved.S)
    for a, b in zip(back.measurements, cal.measurements):
        assert np.array_equal(a.reflectance, b.reflectance)
    save_calibration(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def _doc():
    return calibration_to_dict(synth_calibration("default"))


def test_missing_pigment_named(tmp_path):
    doc = _doc()
    doc["measurements"] = [m for m in doc["measurements"] if m["pigment"] != "W"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="W"):
        load_calibration(path)


def test_grid_mismatch_rejected(tmp_path):
    doc = _doc()
    doc["grid"]["step_nm"] = 5
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="grid"):
        load_calibration(path)


def test_version_mismatch_rejected(tmp_path):
    doc = _doc()
    doc["version"] = 99
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="version"):
        load_calibration(path)


def test_parse_error(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(FormatError, match="JSON"):
        load_calibration(path)


def test_energy_violation_in_file_names_band(tmp_path):
    doc = _doc()
    doc["measurements"][0]["R"][5] = 0.6
    doc["measurements"][0]["T"][5] = 0.45
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="band 5"):
        load_calibration(path)


def test_calibration_file_defaults():
    cal = CalibrationFile([measure(p) for p in synth_pigment_set().profiles])
    assert [m.pigment for m in cal.measurements] == list(PIGMENTS)
    assert cal.solved is None
