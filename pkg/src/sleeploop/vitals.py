"""Heart rate from PPG, respiratory rate and posture from the accelerometer.

Device frame: X points toward the left ear, Y toward the crown and Z out of
the forehead. A reading of (0, 0, +1) g therefore means the wearer lies on
their back.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage, signal

from .errors import AllMasked, TooFewBreaths, TooShort, ValidationError
from .quality import PpgQualityConfig, bandpass_sos, imu_outlier_mask, ppg_quality_ac

RR_BAND = (0.1, 0.7)
HR_LIMITS = (30.0, 200.0)
RR_LIMITS = (4.0, 40.0)


@dataclass(frozen=True)
class HrEstimate:
    bpm: float
    window_start: float
    quality: bool


@dataclass(frozen=True)
class RrEstimate:
    brpm: float
    window_start: float


class Posture(Enum):
    SUPINE = "Supine"
    PRONE = "Prone"
    LEFT_SIDE = "LeftSide"
    RIGHT_SIDE = "RightSide"
    UPRIGHT = "Upright"

    @classmethod
    def parse(cls, value) -> "Posture":
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace(" ", "").lower()
        for p in cls:
            if p.value.lower() == key:
                return p
        raise ValidationError(f"unknown posture {value!r}")


# gravity reading (g, device frame) when lying still in each posture
POSTURE_GRAVITY = {
    Posture.SUPINE: (0.0, 0.0, 1.0),
    Posture.PRONE: (0.0, 0.0, -1.0),
    Posture.RIGHT_SIDE: (1.0, 0.0, 0.0),
    Posture.LEFT_SIDE: (-1.0, 0.0, 0.0),
    Posture.UPRIGHT: (0.0, 1.0, 0.0),
}
_POSTURE_AXES = {p: [np.array(g)] for p, g in POSTURE_GRAVITY.items()}
_POSTURE_AXES[Posture.UPRIGHT].append(np.array((0.0, -1.0, 0.0)))


# ------------------------------------------------------------------ HR


def _refine_peaks(x, peaks):
    """Sub-sample peak positions by parabolic interpolation."""
    pos = peaks.astype(float)
    inner = (peaks > 0) & (peaks < len(x) - 1)
    p = peaks[inner]
    a, b, c = x[p - 1], x[p], x[p + 1]
    den = a - 2 * b + c
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(den != 0, 0.5 * (a - c) / den, 0.0)
    pos[inner] += np.clip(off, -0.5, 0.5)
    return pos


def pulse_waveform(ppg, fs: float, cfg: PpgQualityConfig = PpgQualityConfig()):
    """Average of the band-passed, z-normalized channels that pass quality.

    Returns None when no channel passes.
    """
    ppg = np.atleast_2d(np.asarray(ppg, dtype=float))
    good = []
    for ch in ppg:
        ok, y = ppg_quality_ac(ch, fs, cfg)
        if not ok:
            continue
        sd = y.std()
        if sd > 0:
            good.append((y - y.mean()) / sd)
    if not good:
        return None
    return np.mean(good, axis=0)


def ppg_motion_mask(ppg, fs: float = 50.0, ratio: float = 25.0, dilate_s: float = 0.1) -> np.ndarray:
    """True on samples hit by a motion transient on any channel.

    A sample is flagged when its step from a neighbour exceeds ``ratio``
    times the channel's median absolute step. Clean pulse upstrokes stay
    near 12x, so the margin is wide.
    """
    ppg = np.atleast_2d(np.asarray(ppg, dtype=float))
    n = ppg.shape[1]
    mask = np.zeros(n, dtype=bool)
    if n < 2:
        return mask
    for ch in ppg:
        d = np.abs(np.diff(ch))
        ref = np.median(d)
        if ref <= 0:
            continue
        big = d > ratio * ref
        mask[:-1] |= big
        mask[1:] |= big
    k = int(round(dilate_s * fs))
    if k > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=np.ones(2 * k + 1, dtype=bool))
    return mask


def _bridge(x, mask):
    if not mask.any():
        return x
    idx = np.arange(x.shape[-1])
    out = np.array(x, dtype=float)
    for row in out:
        row[mask] = np.interp(idx[mask], idx[~mask], row[~mask])
    return out


def heart_rate(ppg, fs: float = 50.0, window_start: float = 0.0,
               cfg: PpgQualityConfig = PpgQualityConfig(), mask=None) -> HrEstimate:
    """Heart rate over one 5 s window of (3, n) PPG samples.

    Motion transients are bridged by interpolation; beats inside them and
    intervals spanning them are ignored. Intervals further than 30% from
    the window median are discarded before averaging, which keeps a single
    transient from producing a spurious beat.
    """
    ppg = np.atleast_2d(np.asarray(ppg, dtype=float))
    if ppg.shape[1] < int(round(cfg.window_s * fs)):
        raise TooShort("heart rate needs a 5 s window")
    bad = HrEstimate(float("nan"), window_start, False)
    mask = ppg_motion_mask(ppg, fs) if mask is None else np.asarray(mask, dtype=bool)
    if mask.mean() > 0.5:
        return bad
    pulse = pulse_waveform(_bridge(ppg, mask), fs, cfg)
    if pulse is None:
        return bad
    peaks, props = signal.find_peaks(pulse, distance=max(1, int(np.floor(fs * 60.0 / HR_LIMITS[1]))),
                                     prominence=0.5)
    if len(peaks) >= 2:
        # systolic peaks dominate; drop dicrotic and noise bumps
        prom = props["prominences"]
        peaks = peaks[prom >= 0.5 * np.percentile(prom, 90)]
    peaks = peaks[~mask[peaks]]
    if len(peaks) < 2:
        return bad
    cum = np.concatenate(([0], np.cumsum(mask)))
    clean = cum[peaks[1:]] - cum[peaks[:-1]] == 0
    ibi = (np.diff(_refine_peaks(pulse, peaks)) / fs)[clean]
    if len(ibi) == 0:
        return bad
    med = np.median(ibi)
    ibi = ibi[np.abs(ibi - med) <= 0.3 * med]
    if len(ibi) == 0:
        return bad
    bpm = 60.0 / ibi.mean()
    if not HR_LIMITS[0] <= bpm <= HR_LIMITS[1]:
        return bad
    return HrEstimate(float(bpm), window_start, True)


class HrTracker:
    """Moving average over the last ``span`` quality-passing window estimates."""

    def __init__(self, span: int = 5):
        if span < 1:
            raise ValidationError("span must be >= 1")
        self._buf: deque[float] = deque(maxlen=span)

    def update(self, est: HrEstimate) -> HrEstimate:
        if est.quality:
            self._buf.append(est.bpm)
        if not self._buf:
            return HrEstimate(float("nan"), est.window_start, False)
        return HrEstimate(float(np.mean(self._buf)), est.window_start, est.quality)


def hr_series(ppg, fs: float = 50.0, window_s: float = 5.0, smooth_span: int = 5,
              t0: float = 0.0) -> list[HrEstimate]:
    """Smoothed HR for every non-overlapping window of a PPG stream."""
    ppg = np.atleast_2d(np.asarray(ppg, dtype=float))
    k = int(round(window_s * fs))
    tracker = HrTracker(smooth_span)
    out = []
    for i in range(ppg.shape[1] // k):
        est = heart_rate(ppg[:, i * k:(i + 1) * k], fs, t0 + i * window_s)
        out.append(tracker.update(est))
    return out


# ------------------------------------------------------------------ RR


def motion_mask(imu, fs: float, dilate_s: float = 0.5) -> np.ndarray:
    """Outlier mask grown by ``dilate_s`` on each side."""
    mask = imu_outlier_mask(imu, fs)
    k = int(round(dilate_s * fs))
    if k > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=np.ones(2 * k + 1, dtype=bool))
    return mask


def respiratory_rate(imu, fs: float = 50.0, window_start: float = 0.0,
                     mask=None) -> RrEstimate:
    """Breathing rate from the Y-axis ripple of a 60 s (3, n) window.

    Masked samples are bridged by linear interpolation; peaks inside the
    mask and intervals spanning it are ignored.
    """
    imu = np.atleast_2d(np.asarray(imu, dtype=float))
    n = imu.shape[1]
    if n < int(round(20 * fs)):
        raise TooShort("respiratory rate needs at least 20 s of samples")
    mask = motion_mask(imu, fs) if mask is None else np.asarray(mask, dtype=bool)
    if mask.all():
        raise AllMasked("every IMU sample in the window is masked")
    y = imu[1].copy()
    idx = np.arange(n)
    if mask.any():
        y[mask] = np.interp(idx[mask], idx[~mask], y[~mask])
    sos = bandpass_sos(*RR_BAND, fs)
    yf = signal.sosfiltfilt(sos, y - y.mean())
    yf = yf / (np.abs(yf[~mask]).max() + 1e-300)
    dist = max(1, int(np.floor(fs * 60.0 / RR_LIMITS[1])))
    cum = np.concatenate(([0], np.cumsum(mask)))
    intervals = []
    n_peaks = 0
    for sgn in (1.0, -1.0):
        pk, _ = signal.find_peaks(sgn * yf, distance=dist, prominence=0.3)
        pk = pk[~mask[pk]]
        if sgn > 0:
            n_peaks = len(pk)
        if len(pk) < 2:
            continue
        pos = _refine_peaks(sgn * yf, pk)
        clean = cum[pk[1:]] - cum[pk[:-1]] == 0
        intervals.extend((np.diff(pos) / fs)[clean])
    if n_peaks < 3 or len(intervals) < 2:
        raise TooFewBreaths(f"only {n_peaks} breath peaks found")
    brpm = float(np.clip(60.0 / np.median(intervals), *RR_LIMITS))
    return RrEstimate(brpm, window_start)


# ------------------------------------------------------------------ posture


def _angle_deg(u, v) -> float:
    return float(np.degrees(np.arccos(np.clip(np.dot(u, v), -1.0, 1.0))))


def _posture_angle(g, p: Posture) -> float:
    return min(_angle_deg(g, a) for a in _POSTURE_AXES[p])


def mean_gravity(imu, fs: float = 50.0) -> np.ndarray:
    imu = np.atleast_2d(np.asarray(imu, dtype=float))
    keep = ~imu_outlier_mask(imu, fs)
    if not keep.any():
        raise AllMasked("every IMU sample in the window is masked")
    g = imu[:, keep].mean(axis=1)
    norm = np.linalg.norm(g)
    if norm == 0:
        raise AllMasked("zero mean acceleration")
    return g / norm


def classify_gravity(g) -> Posture:
    """Dominant axis and sign of a gravity vector."""
    g = np.asarray(g, dtype=float)
    ax = int(np.argmax(np.abs(g)))
    if ax == 1:
        return Posture.UPRIGHT
    if ax == 2:
        return Posture.SUPINE if g[2] > 0 else Posture.PRONE
    return Posture.RIGHT_SIDE if g[0] > 0 else Posture.LEFT_SIDE


def posture(imu, fs: float = 50.0, prev: Posture | None = None,
            hysteresis_deg: float = 15.0) -> Posture:
    """Posture of one 10 s window, sticky toward ``prev``.

    The label changes only once gravity sits ``hysteresis_deg`` past the
    45° boundary, i.e. when it is at least twice that much closer to the
    new axis than to the old one.
    """
    g = mean_gravity(imu, fs)
    cand = classify_gravity(g)
    if prev is None or cand is prev:
        return cand
    if _posture_angle(g, prev) - _posture_angle(g, cand) >= 2 * hysteresis_deg:
        return cand
    return prev


class PostureTracker:
    def __init__(self, hysteresis_deg: float = 15.0):
        self.hysteresis_deg = hysteresis_deg
        self.current: Posture | None = None

    def update(self, imu, fs: float = 50.0) -> Posture:
        self.current = posture(imu, fs, self.current, self.hysteresis_deg)
        return self.current


def posture_series(imu, fs: float = 50.0, window_s: float = 10.0,
                   hysteresis_deg: float = 15.0) -> list[Posture | None]:
    """Labels per non-overlapping window; None where the window is fully masked."""
    imu = np.atleast_2d(np.asarray(imu, dtype=float))
    k = int(round(window_s * fs))
    tr = PostureTracker(hysteresis_deg)
    out = []
    for i in range(imu.shape[1] // k):
        try:
            out.append(tr.update(imu[:, i * k:(i + 1) * k], fs))
        except AllMasked:
            out.append(None)
    return out


def count_transitions(labels) -> int:
    seq = [p for p in labels if p is not None]
    return sum(1 for a, b in zip(seq, seq[1:]) if a is not b)
