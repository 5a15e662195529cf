import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinmr import smrt
from swinmr.fourier import fft2c, ifft2c
from swinmr.kspace import (MultiCoilStack, ParameterError, UndersamplingMask, apply_sensitivities, degrade,
                           import_volume, make_mask, measured_noise_level, rss_combine, synth_phantom,
                           synth_sensitivity_maps)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- FFT ----------------------------------------------------------------------


def test_fft_round_trip(rng):
    x = rng.standard_normal((3, 16, 12)) + 1j * rng.standard_normal((3, 16, 12))
    np.testing.assert_allclose(ifft2c(fft2c(x)), x, rtol=1e-5, atol=1e-12)


@pytest.mark.parametrize("H,W", [(8, 8), (7, 10), (16, 5)])
def test_fft_of_constant_is_centered_spike(H, W):
    c = 2.5
    k = fft2c(np.full((H, W), c, dtype=complex))
    assert np.isclose(k[H // 2, W // 2], c * np.sqrt(H * W))
    k[H // 2, W // 2] = 0
    assert np.max(np.abs(k)) < 1e-12


def test_fft_is_unitary(rng):
    x = rng.standard_normal((9, 14)) + 1j * rng.standard_normal((9, 14))
    assert np.isclose(np.sum(np.abs(fft2c(x)) ** 2), np.sum(np.abs(x) ** 2))


# -- masks ----------------------------------------------------------------------


def test_gaussian1d_30_percent_has_77_columns():
    m = make_mask("gaussian1d", 256, 256, 0.30, seed=3).mask
    cols = m.any(axis=0)
    assert cols.sum() == 77
    # column-constant except the forced DC sample
    assert np.all(m[:, cols])


@pytest.mark.parametrize("trajectory", ["gaussian1d", "radial", "spiral"])
def test_ratio_one_is_all_ones(trajectory):
    assert make_mask(trajectory, 32, 32, 1.0).mask.all()


@pytest.mark.parametrize("trajectory,ratio", [("gaussian1d", 0.1), ("gaussian1d", 0.3), ("gaussian1d", 0.5),
                                              ("radial", 0.1), ("spiral", 0.1)])
def test_trajectory_ratios_at_256(trajectory, ratio):
    m = make_mask(trajectory, 256, 256, ratio, seed=0)
    assert abs(m.achieved_ratio - ratio) <= 0.01
    assert m.mask[128, 128]


def test_radial_ratio_range():
    assert 0.09 <= make_mask("radial", 256, 256, 0.10).achieved_ratio <= 0.11


@pytest.mark.parametrize("trajectory", ["gaussian1d", "radial", "spiral"])
def test_mask_determinism(trajectory):
    a = make_mask(trajectory, 64, 48, 0.25, seed=5).mask
    b = make_mask(trajectory, 64, 48, 0.25, seed=5).mask
    np.testing.assert_array_equal(a, b)


def test_gaussian1d_seed_changes_pattern():
    a = make_mask("gaussian1d", 64, 64, 0.3, seed=1).mask
    b = make_mask("gaussian1d", 64, 64, 0.3, seed=2).mask
    assert not np.array_equal(a, b)


def test_gaussian1d_centre_band_fully_sampled():
    m = make_mask("gaussian1d", 100, 100, 0.3, center_fraction=0.1).mask
    assert m[:, 45:55].all()


@pytest.mark.parametrize("ratio,cf", [(0.0, None), (-0.1, None), (1.5, None), (0.2, 0.3)])
def test_infeasible_mask_parameters(ratio, cf):
    with pytest.raises(ParameterError):
        make_mask("gaussian1d", 32, 32, ratio, center_fraction=cf)


def test_unknown_trajectory():
    with pytest.raises(ParameterError):
        make_mask("rosette", 32, 32, 0.2)


def test_mask_save_load_round_trip(tmp_path):
    m = make_mask("radial", 40, 40, 0.2, seed=4)
    m.save(tmp_path / "m.smrt")
    back = UndersamplingMask.load(tmp_path / "m.smrt")
    np.testing.assert_array_equal(back.mask, m.mask)
    assert back.metadata() == m.metadata()
    assert json.loads((tmp_path / "m.smrt.json").read_text())["achieved_ratio"] == m.achieved_ratio


# -- degradation ------------------------------------------------------------------


def test_degrade_without_noise_is_masked_fft(rng):
    x = synth_phantom(32, 32)
    mask = make_mask("gaussian1d", 32, 32, 0.3)
    x_u, y_u = degrade(x, mask, 0.0)
    np.testing.assert_array_equal(y_u, mask.mask * fft2c(x.astype(complex)))
    np.testing.assert_array_equal(x_u, np.abs(ifft2c(y_u)))


@pytest.mark.parametrize("nl", [0.2, 0.3, 0.5, 0.7, 0.8])
def test_measured_noise_level_matches_request(nl):
    x = synth_phantom(64, 64, "random_ellipses", seed=1)
    mask = make_mask("gaussian1d", 64, 64, 0.3)
    _, y_u = degrade(x, mask, nl, seed=2)
    assert abs(measured_noise_level(x, y_u, mask) - nl) <= 0.02


def test_half_noise_level_means_equal_powers():
    x = synth_phantom(32, 32)
    mask = make_mask("radial", 32, 32, 0.3)
    _, y_u = degrade(x, mask, 0.5, seed=0)
    clean = fft2c(x.astype(complex))[mask.mask]
    noise = y_u[mask.mask] - clean
    assert np.isclose(np.mean(np.abs(noise) ** 2), np.mean(np.abs(clean) ** 2))


def test_degrade_is_seeded():
    x = synth_phantom(32, 32)
    mask = make_mask("gaussian1d", 32, 32, 0.3)
    np.testing.assert_array_equal(degrade(x, mask, 0.3, seed=1)[1], degrade(x, mask, 0.3, seed=1)[1])
    assert not np.array_equal(degrade(x, mask, 0.3, seed=1)[1], degrade(x, mask, 0.3, seed=2)[1])


@pytest.mark.parametrize("nl", [1.0, 1.2, -0.1])
def test_degrade_rejects_bad_noise_level(nl):
    with pytest.raises(ParameterError):
        degrade(np.ones((4, 4)), np.ones((4, 4), bool), nl)


# -- coils ------------------------------------------------------------------------


def test_rss_examples():
    one = MultiCoilStack(np.array([[[3 - 4j, -2.0]]]), "coil_images")
    np.testing.assert_allclose(rss_combine(one), [[5.0, 2.0]])
    two = MultiCoilStack(np.array([[[3.0]], [[4.0j]]]), "coil_images")
    assert rss_combine(two)[0, 0] == 5.0


def test_rss_rejects_wrong_role():
    maps = MultiCoilStack(np.ones((1, 2, 2)), "sensitivity_maps")
    with pytest.raises(TypeError):
        rss_combine(maps)


def test_rss_of_sensitised_image_recovers_magnitude(rng):
    x = rng.standard_normal((24, 20)) + 1j * rng.standard_normal((24, 20))
    maps = synth_sensitivity_maps(6, 24, 20, seed=3)
    np.testing.assert_allclose(rss_combine(apply_sensitivities(x, maps)), np.abs(x), atol=1e-4)


def test_apply_sensitivities_examples(rng):
    x = rng.standard_normal((5, 6))
    ones = MultiCoilStack(np.ones((1, 5, 6)), "sensitivity_maps")
    np.testing.assert_array_equal(apply_sensitivities(x, ones).data[0], x)
    maps = synth_sensitivity_maps(3, 5, 6)
    assert not np.any(apply_sensitivities(np.zeros((5, 6)), maps).data)
    with pytest.raises(ValueError):
        apply_sensitivities(np.zeros((4, 6)), maps)


def test_single_coil_map_is_unit_magnitude():
    m = synth_sensitivity_maps(1, 16, 16, seed=9).data
    np.testing.assert_allclose(np.abs(m), 1.0, atol=1e-12)


@pytest.mark.parametrize("S", [2, 4, 8])
def test_maps_normalized_and_smooth(S):
    m = synth_sensitivity_maps(S, 64, 64, seed=S).data
    np.testing.assert_allclose(np.sum(np.abs(m) ** 2, axis=0), 1.0, atol=1e-12)
    assert np.max(np.abs(np.diff(m, axis=-1))) < 0.1


def test_unnormalized_maps_rejected():
    with pytest.raises(ValueError, match="normalized"):
        MultiCoilStack(np.zeros((2, 4, 4)), "sensitivity_maps")


# -- phantoms -------------------------------------------------------------------


def test_shepp_logan_peak():
    img = synth_phantom(256, 256, "shepp_logan")
    assert img.max() == 1.0
    assert img.min() >= 0.0
    # the brightest ring is the outer skull
    rows, cols = np.nonzero(img == 1.0)
    r = np.hypot((cols - 127.5) / (0.69 * 128), (rows - 127.5) / (0.92 * 128))
    assert np.all((r > 0.85) & (r <= 1.01))


def test_phantom_determinism():
    np.testing.assert_array_equal(synth_phantom(48, 48, "random_ellipses", 7),
                                  synth_phantom(48, 48, "random_ellipses", 7))
    assert not np.array_equal(synth_phantom(48, 48, "random_ellipses", 7),
                              synth_phantom(48, 48, "random_ellipses", 8))


def test_phantom_errors():
    with pytest.raises(ParameterError):
        synth_phantom(16, 64)
    with pytest.raises(ParameterError):
        synth_phantom(64, 64, "cube")


# -- file formats -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.booleans())
def test_smrt_round_trip(shape, cplx):
    rng = np.random.default_rng(len(shape))
    a = rng.standard_normal(shape).astype(np.float32)
    if cplx:
        a = (a + 1j * a[::-1]).astype(np.complex64)
    b = smrt.decode(smrt.encode(a))
    assert b.dtype == a.dtype
    np.testing.assert_array_equal(b, a)


def test_smrt_rejects_bad_magic_and_truncation():
    buf = smrt.encode(np.ones((2, 3), np.float32))
    with pytest.raises(smrt.FormatError):
        smrt.decode(b"XXXXX" + buf[5:])
    with pytest.raises(smrt.FormatError, match="offset"):
        smrt.decode(buf[:-3])


def _write_volume(tmp_path, data, complex_=True, extra=b""):
    N, S, H, W = data.shape
    raw = np.stack([data.real, data.imag], -1) if complex_ else data.real
    (tmp_path / "vol.raw").write_bytes(raw.astype("<f4").tobytes() + extra)
    (tmp_path / "vol.json").write_text(json.dumps({"S": S, "H": H, "W": W, "layout": "SHW", "complex": complex_}))
    return tmp_path / "vol.json"


def test_import_volume_round_trip(tmp_path, rng):
    data = (rng.standard_normal((2, 3, 4, 5)) + 1j * rng.standard_normal((2, 3, 4, 5))).astype(np.complex64)
    out = import_volume(_write_volume(tmp_path, data))
    assert out.shape == (2, 3, 4, 5)
    np.testing.assert_array_equal(out, data)


def test_import_volume_truncated_names_offset(tmp_path, rng):
    data = rng.standard_normal((2, 1, 4, 4)).astype(np.complex64)
    header = _write_volume(tmp_path, data, complex_=False, extra=b"\0" * 6)
    with pytest.raises(smrt.FormatError, match="offset 128"):
        import_volume(header)
