import numpy as np
import pytest
from hypothesis import given, strategies as st

from sleeploop.core import SleepStage, epoch_view
from sleeploop.errors import TooShort, ZeroPower
from sleeploop.features import (
    CLAMP_UV, FEATURE_NAMES, RSP_BANDS, RSP_TOTAL, DerivationFilters, DspConfig, decompose,
    epoch_spectrogram, feature_vector_38, preprocess, relative_spectral_power,
)
from sleeploop.synthgen import SessionSpec, gen_session

FS = 250.0
N = 7500
t = np.arange(N) / FS
CFG = DspConfig()


def tone(f, amp=20.0):
    return amp * np.sin(2 * np.pi * f * t)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def energy(x):
    return float(np.sum(np.square(x)))


def test_feature_table_has_38_names():
    assert len(FEATURE_NAMES) == 38 == len(set(FEATURE_NAMES))
    assert sum(n.startswith("eeg_") for n in FEATURE_NAMES) == 22


def test_clamp_before_filter():
    x = np.zeros(N)
    x[3000] = 600.0
    y = preprocess(x)
    assert np.max(np.abs(y)) <= CLAMP_UV
    # the response matches a 500 µV impulse, not a 600 µV one
    x500 = np.zeros(N)
    x500[3000] = 500.0
    np.testing.assert_allclose(y, preprocess(x500), atol=1e-9)


def test_notch_attenuates_50hz():
    x = tone(50.0, 100.0)
    core = slice(int(2 * FS), N - int(2 * FS))
    assert rms(preprocess(x)[core]) <= 0.05 * rms(x[core])


def test_notch_passband_flat_at_10hz():
    x = tone(10.0)
    core = slice(int(2 * FS), N - int(2 * FS))
    assert abs(rms(preprocess(x)[core]) / rms(x[core]) - 1.0) <= 0.02


def test_causal_notch_attenuates_after_settling():
    st_ = DerivationFilters(CFG)
    x = tone(50.0, 100.0)
    y = preprocess(x, CFG, mode="causal", state=st_)
    assert rms(y[int(5 * FS):]) <= 0.05 * rms(x)


@given(st.integers(0, 2 ** 16), st.floats(1.0, 20.0))
def test_clamp_never_exceeded(seed, scale):
    x = np.random.default_rng(seed).standard_cauchy(2000) * 100 * scale
    assert np.max(np.abs(preprocess(x))) <= CLAMP_UV


def test_decompose_band_membership():
    core = slice(int(3 * FS), N - int(3 * FS))
    c1 = decompose(preprocess(tone(1.0)))
    assert energy(c1.emg[core]) < 1e-4 * energy(c1.eeg[core])
    assert energy(c1.eog[core]) > 0.5 * energy(tone(1.0)[core])
    c30 = decompose(preprocess(tone(30.0)))
    assert energy(c30.eog[core]) < 1e-3 * energy(c30.eeg[core])
    assert energy(c30.emg[core]) > 0.5 * energy(tone(30.0)[core])


def test_spindle_energy_in_eeg():
    x = np.zeros(N)
    seg = (t >= 10) & (t < 11)
    x[seg] = 30 * np.sin(2 * np.pi * 13 * t[seg]) * np.hanning(seg.sum())
    c = decompose(preprocess(x))
    assert energy(c.eeg) >= 0.9 * energy(x)


def test_spectrogram_shape_and_tone():
    s = epoch_spectrogram(tone(10.0))
    assert s.power.shape == (29, 64)
    assert s.freqs[0] == 0.5 and s.freqs[-1] == 32.0
    assert np.all(s.freqs[np.argmax(s.power, axis=1)] == 10.0)


def test_spectrogram_silence_and_short():
    assert not epoch_spectrogram(np.zeros(N)).power.any()
    with pytest.raises(TooShort):
        epoch_spectrogram(np.zeros(1000))


def test_spectrogram_chirp_ridge_monotone():
    from scipy.signal import chirp
    x = 20 * chirp(t, f0=2.0, t1=30.0, f1=20.0)
    s = epoch_spectrogram(x)
    ridge = s.freqs[np.argmax(s.power, axis=1)]
    assert np.all(np.diff(ridge) >= 0) and ridge[-1] > ridge[0]


@given(st.integers(0, 2 ** 16), st.floats(0.1, 10.0))
def test_spectrogram_scales_quadratically(seed, k):
    x = np.random.default_rng(seed).normal(0, 10, N)
    a, b = epoch_spectrogram(x).power, epoch_spectrogram(k * x).power
    assert np.all(a >= 0)
    np.testing.assert_allclose(b, k * k * a, rtol=1e-9, atol=1e-18)


def test_rsp_pure_tone_and_two_tones():
    r = relative_spectral_power(tone(10.0))
    assert r.alpha >= 0.95 and max(r.delta, r.theta, r.beta) < 0.02
    r2 = relative_spectral_power(tone(2.0) + tone(10.0))
    assert r2.delta == pytest.approx(0.5, abs=0.02) and r2.alpha == pytest.approx(0.5, abs=0.02)


def test_rsp_white_noise_proportional_to_bandwidth():
    x = np.random.default_rng(0).normal(0, 10, N)
    r = relative_spectral_power(x).as_array()
    widths = np.array([hi - lo for lo, hi in RSP_BANDS.values()])
    total = RSP_TOTAL[1] - RSP_TOTAL[0]
    # flat spectrum: each band takes its share of the 0.5-30 Hz total
    np.testing.assert_allclose(r, widths / total, atol=0.02)
    # the same ratios normalised by the summed band widths stay within 0.05
    np.testing.assert_allclose(r, np.array([3.5, 4, 5, 15]) / 27.5, atol=0.05)


def test_rsp_errors():
    with pytest.raises(ZeroPower):
        relative_spectral_power(np.zeros(N))
    with pytest.raises(TooShort):
        relative_spectral_power(np.zeros(500))


@given(st.sampled_from([1.0, 2.0, 5.0, 10.0, 11.0, 20.0, 25.0]), st.floats(5.0, 100.0))
def test_rsp_in_unit_interval_and_single_band(f, amp):
    r = relative_spectral_power(tone(f, amp)).as_array()
    assert np.all((r >= 0) & (r <= 1))
    assert r.max() >= 0.95


def _fv(x):
    return feature_vector_38(decompose(preprocess(x)))


def test_feature_pure_alpha():
    fv = _fv(tone(10.0))
    assert fv["eeg_rel_alpha"] > 0.9 and fv["eeg_rel_delta"] < 0.05


def test_feature_zero_signal():
    fv = _fv(np.zeros(N))
    assert np.all(np.isfinite(fv.values))
    for name in ("eeg_abs_delta", "eeg_rel_alpha", "eeg_hjorth_activity", "emg_abs_power",
                 "eeg_spectral_entropy", "eeg_kurtosis", "emg_kurtosis"):
        assert fv[name] == 0.0


@pytest.fixture(scope="module")
def night():
    return gen_session(SessionSpec(seed=31, n_epochs=200, sol_epoch=20))


def _first_epoch(night, stage):
    return int(np.flatnonzero(night.hypnogram.codes() == int(stage))[5])


def test_feature_deep_delta_beta_ratio(night):
    e = _first_epoch(night, SleepStage.DEEP)
    x = epoch_view(night.recording, e).channel("FH_L") - epoch_view(night.recording, e).channel("BE_R")
    assert _fv(x)["eeg_delta_beta_ratio"] > 10


@given(st.floats(0.0, 20.0), st.floats(0, 2 * np.pi))
def test_features_invariant_to_small_line_tone(amp, phase):
    rng = np.random.default_rng(7)
    base = tone(10.0, 15.0) + tone(2.0, 25.0) + rng.normal(0, 3, N)
    a = _fv(base).values
    b = _fv(base + amp * np.sin(2 * np.pi * 50 * t + phase)).values
    scale = np.maximum(np.abs(a), 1e-6)
    assert np.all(np.abs(b - a) <= 0.02 * scale + 1e-9)
