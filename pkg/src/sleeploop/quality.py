"""Per-epoch scorability gates for ExG channels, PPG windows and IMU samples.

The ExG gate is a small decision tree over six summary features. No trained
tree ships with the package; :data:`DEFAULT_TREE` is hand-built and any tree
in the JSON node format below can replace it::

    {"feature": "clip_fraction", "threshold": 0.05,
     "le": <node>, "gt": <node>}        # internal node: value <= threshold -> "le"
    {"leaf": "scorable"} | {"leaf": "unscorable"}
"""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import signal

from .core import EXG_CHANNELS, EpochView
from .errors import MalformedTree, TooShort

CLIP_MARGIN_UV = 490.0
LINE_FREQS = (50.0, 60.0)
LINE_HALF_WIDTH = 1.0
HF_CUTOFF = 40.0
MAX_TREE_DEPTH = 16


@dataclass(frozen=True)
class QualityFeatures:
    flatline_fraction: float
    clip_fraction: float
    line_noise_ratio: float
    rms_uv: float
    hf_rms_uv: float
    kurtosis: float


FEATURE_IDS = tuple(f.name for f in fields(QualityFeatures))


def excess_kurtosis(x) -> float:
    """Fisher kurtosis (biased estimator); 0 for constant input."""
    x = np.asarray(x, dtype=float)
    d2 = (x - x.mean()) ** 2
    m2 = d2.mean()
    if m2 <= 0:
        return 0.0
    return float((d2 * d2).mean() / (m2 * m2) - 3.0)


def _flatline_fraction(x: np.ndarray, min_run: int) -> float:
    if len(x) == 0:
        return 0.0
    change = np.flatnonzero(np.diff(x) != 0)
    starts = np.concatenate(([0], change + 1))
    ends = np.concatenate((change + 1, [len(x)]))
    runs = ends - starts
    return float(runs[runs >= min_run].sum() / len(x))


def exg_quality_features(x, fs: float = 250.0) -> QualityFeatures:
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < fs:
        raise TooShort("quality features need at least 1 s of samples")
    flat = _flatline_fraction(x, max(2, int(round(fs / 10))))
    clip = float(np.mean(np.abs(x) >= CLIP_MARGIN_UV))
    xc = x - x.mean()
    rms = float(np.sqrt(np.mean(xc ** 2)))

    f, p = signal.periodogram(xc, fs=fs, window="hann", detrend=False)
    df = f[1] - f[0]
    total = p.sum()
    line = np.zeros_like(f, dtype=bool)
    for f0 in LINE_FREQS:
        line |= np.abs(f - f0) <= LINE_HALF_WIDTH
    line_ratio = float(p[line].sum() / total) if total > 0 else 0.0
    hf = float(np.sqrt(p[(f > HF_CUTOFF) & ~line].sum() * df))
    kurt = excess_kurtosis(x)
    return QualityFeatures(flat, clip, line_ratio, rms, hf, kurt)


@dataclass(frozen=True)
class TreeNode:
    feature: str | None = None
    threshold: float = 0.0
    le: "TreeNode | None" = None
    gt: "TreeNode | None" = None
    leaf: bool | None = None  # True = scorable

    def to_obj(self) -> dict:
        if self.leaf is not None:
            return {"leaf": "scorable" if self.leaf else "unscorable"}
        return {"feature": self.feature, "threshold": self.threshold,
                "le": self.le.to_obj(), "gt": self.gt.to_obj()}


def _leaf(ok: bool) -> TreeNode:
    return TreeNode(leaf=ok)


def _split(feature, threshold, le, gt) -> TreeNode:
    return TreeNode(feature=feature, threshold=threshold, le=le, gt=gt)


class QualityTree:
    """Binary decision tree mapping :class:`QualityFeatures` to a verdict."""

    def __init__(self, root: TreeNode):
        self.root = root
        self.validate()

    def validate(self):
        def walk(node, depth):
            if node is None:
                raise MalformedTree("missing child")
            if depth > MAX_TREE_DEPTH:
                raise MalformedTree(f"tree deeper than {MAX_TREE_DEPTH}")
            if node.leaf is not None:
                return
            if node.feature not in FEATURE_IDS:
                raise MalformedTree(f"unknown feature {node.feature!r}")
            if not np.isfinite(node.threshold):
                raise MalformedTree("non-finite threshold")
            walk(node.le, depth + 1)
            walk(node.gt, depth + 1)

        walk(self.root, 0)

    def classify(self, f: QualityFeatures) -> bool:
        node = self.root
        while node.leaf is None:
            node = node.le if getattr(f, node.feature) <= node.threshold else node.gt
        return node.leaf

    @classmethod
    def from_obj(cls, obj) -> "QualityTree":
        def build(o, depth=0):
            if depth > MAX_TREE_DEPTH:
                raise MalformedTree(f"tree deeper than {MAX_TREE_DEPTH}")
            if not isinstance(o, dict):
                raise MalformedTree("node must be an object")
            if "leaf" in o:
                if o["leaf"] not in ("scorable", "unscorable") or len(o) != 1:
                    raise MalformedTree(f"bad leaf {o!r}")
                return _leaf(o["leaf"] == "scorable")
            if set(o) != {"feature", "threshold", "le", "gt"}:
                raise MalformedTree(f"bad node keys {sorted(o)}")
            try:
                thr = float(o["threshold"])
            except (TypeError, ValueError):
                raise MalformedTree("threshold must be a number") from None
            return _split(o["feature"], thr, build(o["le"], depth + 1), build(o["gt"], depth + 1))

        return cls(build(obj))

    def to_obj(self) -> dict:
        return self.root.to_obj()

    def dumps(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "QualityTree":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise MalformedTree(f"tree file is not valid JSON: {e}") from None
        return cls.from_obj(obj)

    @classmethod
    def load(cls, path) -> "QualityTree":
        return cls.loads(Path(path).read_text())


# Thresholds: flat or railed data, dead or exploding amplitude, mains
# overwhelming the signal, broadband >40 Hz contamination (electrode pops,
# headband movement), extreme impulsiveness.
DEFAULT_TREE = QualityTree(
    _split("flatline_fraction", 0.5, _split(
        "clip_fraction", 0.05, _split(
            "rms_uv", 0.5, _leaf(False), _split(
                "rms_uv", 150.0, _split(
                    "line_noise_ratio", 0.9, _split(
                        "hf_rms_uv", 25.0, _split(
                            "kurtosis", 30.0, _leaf(True), _leaf(False)),
                        _leaf(False)),
                    _leaf(False)),
                _leaf(False))),
        _leaf(False)),
        _leaf(False))
)


def classify_channel(f: QualityFeatures, tree: QualityTree = DEFAULT_TREE) -> bool:
    return tree.classify(f)


def select_channels(view: EpochView, tree: QualityTree = DEFAULT_TREE) -> dict[str, bool]:
    """Scorable mask over the six source channels of one epoch."""
    return {
        name: classify_channel(exg_quality_features(view.exg[i], view.fs_exg), tree)
        for i, name in enumerate(EXG_CHANNELS)
    }


# ------------------------------------------------------------------ PPG


@dataclass(frozen=True)
class PpgQualityConfig:
    window_s: float = 5.0
    ac_min: float = 5.0
    ac_max: float = 20000.0
    rail_lo: float = 0.0
    rail_hi: float = 65535.0
    max_rail_fraction: float = 0.01
    lag_band_hz: tuple[float, float] = (0.5, 3.0)
    min_autocorr: float = 0.3


@lru_cache(maxsize=32)
def bandpass_sos(lo: float, hi: float, fs: float, order: int = 2) -> np.ndarray:
    return signal.butter(order, (lo, hi), btype="bandpass", fs=fs, output="sos")


def _ppg_ac(x, fs):
    return signal.sosfiltfilt(bandpass_sos(0.5, 8.0, fs), x - np.mean(x))


def ppg_quality(window, fs: float = 50.0, cfg: PpgQualityConfig = PpgQualityConfig()) -> bool:
    """Rule-based fidelity check for one PPG channel over a 5 s window."""
    return ppg_quality_ac(window, fs, cfg)[0]


def ppg_quality_ac(window, fs: float = 50.0, cfg: PpgQualityConfig = PpgQualityConfig()):
    """Quality verdict plus the 0.5-8 Hz band-passed trace (None when not computed)."""
    x = np.asarray(window, dtype=float)
    if len(x) < int(round(cfg.window_s * fs)):
        raise TooShort("ppg quality needs a 5 s window")
    if np.mean((x <= cfg.rail_lo) | (x >= cfg.rail_hi)) > cfg.max_rail_fraction:
        return False, None
    if np.ptp(x) == 0:
        return False, None
    ac = _ppg_ac(x, fs)
    lo_q, hi_q = np.percentile(ac, (2.5, 97.5))
    if not cfg.ac_min <= hi_q - lo_q <= cfg.ac_max:
        return False, ac
    r = signal.correlate(ac, ac, mode="full")[len(ac) - 1:]
    if r[0] <= 0:
        return False, ac
    r = r / r[0]
    lo = int(np.floor(fs / cfg.lag_band_hz[1]))
    hi = int(np.ceil(fs / cfg.lag_band_hz[0]))
    seg = r[max(lo, 1):min(hi, len(r) - 1) + 1]
    peaks, _ = signal.find_peaks(seg)
    return bool(len(peaks) and seg[peaks].max() > cfg.min_autocorr), ac


# ------------------------------------------------------------------ IMU


def imu_outlier_mask(window, fs: float = 50.0, mag_tol_g: float = 0.5,
                     jerk_g_per_s: float = 2.0) -> np.ndarray:
    """True where a sample is rejected: off-gravity magnitude or a sharp jerk.

    ``window`` is (3, n) acceleration in g. The jerk at a sample is the
    smaller of its incoming and outgoing differences, so an isolated spike
    flags only itself while a sustained burst flags every sample in it.
    """
    a = np.asarray(window, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    mag = np.linalg.norm(a, axis=0)
    mask = np.abs(mag - 1.0) > mag_tol_g
    n = a.shape[1]
    if n > 1:
        d = np.linalg.norm(np.diff(a, axis=1), axis=0) * fs
        incoming = np.concatenate(([np.inf], d))
        outgoing = np.concatenate((d, [np.inf]))
        mask |= np.minimum(incoming, outgoing) > jerk_g_per_s
    return mask
