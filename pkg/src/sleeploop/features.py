"""Derivation cleaning, EEG/EOG/EMG decomposition and per-epoch features.

Two filter modes exist. ``"zero-phase"`` applies every filter forward and
backward on the epoch in isolation (offline paths). ``"causal"`` runs the same
designs forward only through a :class:`DerivationFilters` instance that keeps
filter state between consecutive epochs of one derivation (real-time path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import TooShort, ValidationError, ZeroPower

CLAMP_UV = 500.0

RSP_BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (15.0, 30.0),
}
RSP_TOTAL = (0.5, 30.0)
SIGMA_BAND = (12.0, 15.0)

EEG_FEATURES = (
    "eeg_abs_delta", "eeg_abs_theta", "eeg_abs_alpha", "eeg_abs_sigma", "eeg_abs_beta",
    "eeg_rel_delta", "eeg_rel_theta", "eeg_rel_alpha", "eeg_rel_sigma", "eeg_rel_beta",
    "eeg_delta_beta_ratio", "eeg_theta_alpha_ratio",
    "eeg_sef95", "eeg_median_freq",
    "eeg_hjorth_activity", "eeg_hjorth_mobility", "eeg_hjorth_complexity",
    "eeg_spectral_entropy", "eeg_kurtosis", "eeg_skewness", "eeg_zcr", "eeg_ptp",
)
EOG_FEATURES = (
    "eog_var", "eog_max_abs", "eog_zcr", "eog_power_0p3_2", "eog_power_2_6",
    "eog_sem_index", "eog_blink_count", "eog_p75_abs",
)
EMG_FEATURES = (
    "emg_rms", "emg_var", "emg_abs_power", "emg_rel_power", "emg_zcr",
    "emg_kurtosis", "emg_p95_abs", "emg_hjorth_mobility",
)
FEATURE_NAMES = EEG_FEATURES + EOG_FEATURES + EMG_FEATURES
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

_EPS = 1e-12


@dataclass(frozen=True)
class DspConfig:
    fs: float = 250.0
    notch_freqs: tuple[float, ...] = (50.0, 60.0)
    notch_q: float = 20.0
    eeg_band: tuple[float, float] = (0.5, 35.0)
    eog_band: tuple[float, float] = (0.3, 10.0)
    emg_band: tuple[float, float] = (20.0, 45.0)
    filter_order: int = 4
    spec_window_s: float = 2.0
    spec_overlap: float = 0.5
    spec_fmin: float = 0.5
    spec_fmax: float = 32.0
    welch_window_s: float = 4.0
    blink_slope_uv_s: float = 600.0

    def __post_init__(self):
        if not self.fs > 0:
            raise ValidationError("fs must be positive")
        nyq = self.fs / 2
        for lo, hi in (self.eeg_band, self.eog_band, self.emg_band):
            if not 0 < lo < hi < nyq:
                raise ValidationError(f"band ({lo}, {hi}) invalid for fs={self.fs}")
        if any(not 0 < f < nyq for f in self.notch_freqs):
            raise ValidationError("notch frequency above Nyquist")


@dataclass(frozen=True)
class ComponentSignals:
    broadband: np.ndarray
    eeg: np.ndarray
    eog: np.ndarray
    emg: np.ndarray


@dataclass(frozen=True)
class EpochSpectrogram:
    freqs: np.ndarray
    times: np.ndarray
    power: np.ndarray  # (time bins, freq bins)


@dataclass(frozen=True)
class RspBands:
    delta: float
    theta: float
    alpha: float
    beta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.theta, self.alpha, self.beta])

    def dominant(self) -> str:
        return ("delta", "theta", "alpha", "beta")[int(np.argmax(self.as_array()))]


@dataclass(frozen=True)
class FeatureVector38:
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(FEATURE_NAMES),):
            raise ValidationError("feature vector must have 38 entries")

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_INDEX[name]])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(FEATURE_NAMES, self.values)}


# ---------------------------------------------------------------- filters


def _notch_sos(cfg: DspConfig) -> np.ndarray:
    sections = []
    for f0 in cfg.notch_freqs:
        b, a = signal.iirnotch(f0, cfg.notch_q, cfg.fs)
        sections.append(signal.tf2sos(b, a))
    return np.vstack(sections)


def _band_sos(band, cfg: DspConfig) -> np.ndarray:
    return signal.butter(cfg.filter_order, band, btype="bandpass", fs=cfg.fs, output="sos")


@dataclass
class _Designs:
    notch: np.ndarray
    eeg: np.ndarray
    eog: np.ndarray
    emg: np.ndarray


_DESIGN_CACHE: dict[DspConfig, _Designs] = {}


def designs(cfg: DspConfig) -> _Designs:
    d = _DESIGN_CACHE.get(cfg)
    if d is None:
        d = _Designs(
            notch=_notch_sos(cfg),
            eeg=_band_sos(cfg.eeg_band, cfg),
            eog=_band_sos(cfg.eog_band, cfg),
            emg=_band_sos(cfg.emg_band, cfg),
        )
        _DESIGN_CACHE[cfg] = d
    return d


class StreamingSos:
    """Forward-only SOS filter whose state survives between calls."""

    def __init__(self, sos: np.ndarray):
        self.sos = sos
        self.zi = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.zi is None:
            self.zi = signal.sosfilt_zi(self.sos) * (x[0] if len(x) else 0.0)
        y, self.zi = signal.sosfilt(self.sos, x, zi=self.zi)
        return y

    def reset(self):
        self.zi = None


class DerivationFilters:
    """Causal filter state for one derivation."""

    def __init__(self, cfg: DspConfig):
        d = designs(cfg)
        self.notch = StreamingSos(d.notch)
        self.eeg = StreamingSos(d.eeg)
        self.eog = StreamingSos(d.eog)
        self.emg = StreamingSos(d.emg)


def _filtfilt(sos, x, padlen=None):
    padlen = None if padlen is None else min(padlen, x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padlen=padlen)


def remove_line_tones(x, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Subtract the least-squares fit of a sinusoid at each notch frequency.

    A stationary mains tone is removed exactly, so the notch that follows
    only has to deal with drift and never rings at the epoch edges.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < 4 or not cfg.notch_freqs:
        return x
    tt = np.arange(n) / cfg.fs
    cols = []
    for f0 in cfg.notch_freqs:
        if f0 < cfg.fs / 2:
            cols += [np.sin(2 * np.pi * f0 * tt), np.cos(2 * np.pi * f0 * tt)]
    if not cols:
        return x
    basis = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(basis, x.T, rcond=None)
    return x - (basis @ coef).T


def preprocess(x, cfg: DspConfig = DspConfig(), mode: str = "zero-phase",
               state: DerivationFilters | None = None) -> np.ndarray:
    """Clamp to ±500 µV, then remove 50 and 60 Hz mains.

    Mains removal is a per-epoch sinusoid fit followed by the notch filters.
    The output is clamped again so filter ringing at the rails cannot exceed
    the bound.
    """
    x = np.clip(np.asarray(x, dtype=float), -CLAMP_UV, CLAMP_UV)
    x = remove_line_tones(x, cfg)
    if mode == "zero-phase":
        y = _filtfilt(designs(cfg).notch, x)
    elif mode == "causal":
        if state is None:
            raise ValidationError("causal mode needs a DerivationFilters state")
        y = state.notch(x)
    else:
        raise ValidationError(f"unknown filter mode {mode!r}")
    return np.clip(y, -CLAMP_UV, CLAMP_UV)


def decompose(x, cfg: DspConfig = DspConfig(), mode: str = "zero-phase",
              state: DerivationFilters | None = None) -> ComponentSignals:
    """Split a preprocessed series into EEG, EOG and EMG band components."""
    x = np.asarray(x, dtype=float)
    if mode == "zero-phase":
        d = designs(cfg)
        pad = int(3 * cfg.fs)
        return ComponentSignals(x, _filtfilt(d.eeg, x, pad), _filtfilt(d.eog, x, pad),
                                _filtfilt(d.emg, x, pad))
    if mode == "causal":
        if state is None:
            raise ValidationError("causal mode needs a DerivationFilters state")
        return ComponentSignals(x, state.eeg(x), state.eog(x), state.emg(x))
    raise ValidationError(f"unknown filter mode {mode!r}")


# --------------------------------------------------------------- spectra


def epoch_spectrogram(eeg, cfg: DspConfig = DspConfig()) -> EpochSpectrogram:
    """Hann short-time power; 2 s windows at 50% overlap, 0.5-32 Hz rows."""
    eeg = np.asarray(eeg, dtype=float)
    nper = int(round(cfg.spec_window_s * cfg.fs))
    if eeg.shape[-1] < int(round(30 * cfg.fs)):
        raise TooShort("spectrogram needs a 30 s epoch")
    noverlap = int(round(nper * cfg.spec_overlap))
    f, t, sxx = signal.spectrogram(eeg, fs=cfg.fs, window="hann", nperseg=nper,
                                   noverlap=noverlap, detrend=False, scaling="density",
                                   mode="psd")
    keep = (f >= cfg.spec_fmin - 1e-9) & (f <= cfg.spec_fmax + 1e-9)
    return EpochSpectrogram(freqs=f[keep], times=t, power=sxx[keep].T.copy())


def welch_psd(x, cfg: DspConfig = DspConfig()):
    x = np.asarray(x, dtype=float)
    nper = min(int(round(cfg.welch_window_s * cfg.fs)), x.shape[-1])
    return signal.welch(x, fs=cfg.fs, window="hann", nperseg=nper, noverlap=nper // 2,
                        detrend="constant", scaling="density")


def band_power(f, psd, lo, hi) -> float:
    """Integrated PSD over the half-open band [lo, hi)."""
    df = f[1] - f[0]
    mask = (f >= lo - 1e-9) & (f < hi - 1e-9)
    return float(psd[..., mask].sum(axis=-1) * df)


def relative_spectral_power(eeg, cfg: DspConfig = DspConfig()) -> RspBands:
    """Band power over total 0.5-30 Hz power for the four classic bands."""
    eeg = np.asarray(eeg, dtype=float)
    if eeg.shape[-1] < 4 * cfg.fs:
        raise TooShort("relative spectral power needs at least 4 s")
    f, psd = welch_psd(eeg, cfg)
    total = band_power(f, psd, *RSP_TOTAL)
    if total <= 0:
        raise ZeroPower("no power between 0.5 and 30 Hz")
    return RspBands(**{k: band_power(f, psd, lo, hi) / total for k, (lo, hi) in RSP_BANDS.items()})


# --------------------------------------------------------------- features


def _zcr(x, fs) -> float:
    s = np.signbit(x - x.mean())
    return float(np.count_nonzero(s[1:] != s[:-1]) * fs / len(x))


def _moments(x):
    d = x - x.mean()
    d2 = d * d
    m2 = d2.mean()
    if np.ptp(x) == 0 or m2 <= 0:
        return 0.0, 0.0
    return float((d2 * d2).mean() / m2 ** 2 - 3.0), float((d2 * d).mean() / m2 ** 1.5)


def _hjorth(x):
    dx = np.diff(x)
    ddx = np.diff(dx)
    act = float(np.var(x))
    if act <= 0:
        return 0.0, 0.0, 0.0
    mob = float(np.sqrt(np.var(dx) / act))
    mob_dx = np.sqrt(np.var(ddx) / np.var(dx)) if np.var(dx) > 0 else 0.0
    comp = float(mob_dx / mob) if mob > 0 else 0.0
    return act, mob, comp


def _edge_freq(f, psd, frac):
    c = np.cumsum(psd)
    if c[-1] <= 0:
        return 0.0
    return float(f[np.searchsorted(c, frac * c[-1])])


def _blink_count(eog, cfg: DspConfig) -> float:
    # upward crossings of |smoothed derivative| above a fixed slope
    w = max(1, int(round(0.1 * cfg.fs)))
    slope = np.convolve(np.diff(eog) * cfg.fs, np.ones(w) / w, mode="same")
    above = np.abs(slope) > cfg.blink_slope_uv_s
    return float(np.count_nonzero(above[1:] & ~above[:-1]))


def feature_vector_38(c: ComponentSignals, cfg: DspConfig = DspConfig()) -> FeatureVector38:
    """Fixed-order 38 features: 22 EEG, 8 EOG, 8 EMG. See ``FEATURE_NAMES``."""
    fs = cfg.fs
    if len(c.eeg) < int(fs):
        raise TooShort("feature extraction needs at least 1 s")
    out = np.zeros(len(FEATURE_NAMES))
    put = lambda name, v: out.__setitem__(FEATURE_INDEX[name], v)

    eeg = c.eeg
    f, psd = welch_psd(eeg, cfg)
    bands = {
        "delta": RSP_BANDS["delta"], "theta": RSP_BANDS["theta"], "alpha": RSP_BANDS["alpha"],
        "sigma": SIGMA_BAND, "beta": RSP_BANDS["beta"],
    }
    total = band_power(f, psd, *RSP_TOTAL)
    for name, (lo, hi) in bands.items():
        p = band_power(f, psd, lo, hi)
        put(f"eeg_abs_{name}", p)
        put(f"eeg_rel_{name}", p / total if total > 0 else 0.0)
    put("eeg_delta_beta_ratio", out[FEATURE_INDEX["eeg_abs_delta"]] / (out[FEATURE_INDEX["eeg_abs_beta"]] + _EPS))
    put("eeg_theta_alpha_ratio", out[FEATURE_INDEX["eeg_abs_theta"]] / (out[FEATURE_INDEX["eeg_abs_alpha"]] + _EPS))
    band = (f >= RSP_TOTAL[0]) & (f < RSP_TOTAL[1])
    put("eeg_sef95", _edge_freq(f[band], psd[band], 0.95))
    put("eeg_median_freq", _edge_freq(f[band], psd[band], 0.5))
    act, mob, comp = _hjorth(eeg)
    put("eeg_hjorth_activity", act)
    put("eeg_hjorth_mobility", mob)
    put("eeg_hjorth_complexity", comp)
    pb = psd[band]
    if pb.sum() > 0:
        q = pb / pb.sum()
        q = q[q > 0]
        put("eeg_spectral_entropy", float(-(q * np.log(q)).sum() / np.log(band.sum())))
    k, s = _moments(eeg)
    put("eeg_kurtosis", k)
    put("eeg_skewness", s)
    put("eeg_zcr", _zcr(eeg, fs) if np.ptp(eeg) > 0 else 0.0)
    put("eeg_ptp", float(np.ptp(eeg)))

    eog = c.eog
    fo, po = welch_psd(eog, cfg)
    put("eog_var", float(np.var(eog)))
    put("eog_max_abs", float(np.max(np.abs(eog))))
    put("eog_zcr", _zcr(eog, fs) if np.ptp(eog) > 0 else 0.0)
    slow = band_power(fo, po, 0.3, 2.0)
    put("eog_power_0p3_2", slow)
    put("eog_power_2_6", band_power(fo, po, 2.0, 6.0))
    wide = band_power(fo, po, 0.3, 10.0)
    put("eog_sem_index", band_power(fo, po, 0.3, 1.0) / wide if wide > 0 else 0.0)
    put("eog_blink_count", _blink_count(eog, cfg))
    put("eog_p75_abs", float(np.percentile(np.abs(eog), 75)))

    emg = c.emg
    fm, pm = welch_psd(emg, cfg)
    put("emg_rms", float(np.sqrt(np.mean(emg ** 2))))
    put("emg_var", float(np.var(emg)))
    emg_power = band_power(fm, pm, *cfg.emg_band)
    put("emg_abs_power", emg_power)
    fb, pbb = welch_psd(c.broadband, cfg)
    broad = band_power(fb, pbb, 0.5, cfg.emg_band[1])
    put("emg_rel_power", min(1.0, band_power(fb, pbb, *cfg.emg_band) / broad) if broad > 0 else 0.0)
    put("emg_zcr", _zcr(emg, fs) if np.ptp(emg) > 0 else 0.0)
    put("emg_kurtosis", _moments(emg)[0])
    put("emg_p95_abs", float(np.percentile(np.abs(emg), 95)))
    put("emg_hjorth_mobility", _hjorth(emg)[1])
    return FeatureVector38(out)
