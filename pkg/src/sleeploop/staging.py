"""Per-epoch stage distributions.

Two scorers exist for referenced ExG derivations: a loadable neural forward
pass (:func:`pml_forward`) and the rule-based :func:`baseline_stage`, which is
the default because no trained weights ship with the package. When no
derivation is scorable, a fallback (:func:`sml_forward` or
:func:`sml_baseline`) works from heart rate, breathing and movement.
:class:`StagingPipeline` ties these together epoch by epoch.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .core import EPOCH_S, EpochView, SleepStage, StageDistribution
from .errors import EmptyEnsemble, InsufficientContext, ShapeMismatch, SleepLoopError, ValidationError
from .features import (
    DspConfig, DerivationFilters, EpochSpectrogram, FeatureVector38, RspBands,
    decompose, epoch_spectrogram, feature_vector_38, preprocess, relative_spectral_power,
)
from .quality import DEFAULT_TREE, QualityTree, imu_outlier_mask, select_channels
from .referencing import ReferencingScheme, apply_scheme
from .vitals import HrTracker, PostureTracker, heart_rate, respiratory_rate

LATENT_DIM = 928
HISTORY_LEN = 8
N_FEATURES = 38
N_SML_FEATURES = 24


# ---------------------------------------------------------------- PML


# manifest entries: name -> shape expressed with symbolic sizes
_PML_LAYOUT = {
    "conv1_w": ("C1", 1, 3, 3), "conv1_b": ("C1",),
    "conv2_w": ("C2", "C1", 3, 3), "conv2_b": ("C2",),
    "gru_wz": ("H", N_FEATURES), "gru_wr": ("H", N_FEATURES), "gru_wh": ("H", N_FEATURES),
    "gru_uz": ("H", "H"), "gru_ur": ("H", "H"), "gru_uh": ("H", "H"),
    "gru_bz": ("H",), "gru_br": ("H",), "gru_bh": ("H",),
    "head_w": (4, LATENT_DIM), "head_b": (4,),
    "feat_mean": (N_FEATURES,), "feat_scale": (N_FEATURES,),
}
DEFAULT_ARCH = {"C1": 8, "C2": 28, "H": 480, "n_freq": 64}


@dataclass(frozen=True)
class PmlWeights:
    """Immutable parameter set for :func:`pml_forward`.

    The convolutional branch maps a (time, 64) log spectrogram through two
    3x3 same-padded conv + ReLU + 2x2 max-pool layers and averages over time,
    giving ``C2 * n_freq / 4`` values. The recurrent branch is a GRU of width
    ``H`` over the 8-step feature history. Both must add up to 928.
    """

    tensors: dict
    n_freq: int = 64

    def __post_init__(self):
        t = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}
        for v in t.values():
            v.setflags(write=False)
        object.__setattr__(self, "tensors", t)
        self.validate()

    @property
    def dims(self) -> dict:
        t = self.tensors
        return {"C1": t["conv1_w"].shape[0], "C2": t["conv2_w"].shape[0], "H": t["gru_uz"].shape[0]}

    def validate(self):
        missing = sorted(set(_PML_LAYOUT) - set(self.tensors))
        if missing:
            raise ShapeMismatch(f"weights lack tensors {missing}")
        extra = sorted(set(self.tensors) - set(_PML_LAYOUT))
        if extra:
            raise ShapeMismatch(f"unexpected tensors {extra}")
        if any(s.ndim == 0 for s in self.tensors.values()):
            raise ShapeMismatch("scalar tensor in weights")
        dims = self.dims
        for name, sym in _PML_LAYOUT.items():
            want = tuple(dims[s] if isinstance(s, str) else s for s in sym)
            if self.tensors[name].shape != want:
                raise ShapeMismatch(f"{name}: shape {self.tensors[name].shape}, expected {want}")
        if self.n_freq % 4:
            raise ShapeMismatch("n_freq must be divisible by 4")
        latent = dims["C2"] * (self.n_freq // 4) + dims["H"]
        if latent != LATENT_DIM:
            raise ShapeMismatch(f"latent width {latent} != {LATENT_DIM}")

    def manifest(self) -> dict:
        return {"n_freq": self.n_freq,
                "tensors": {k: list(v.shape) for k, v in sorted(self.tensors.items())}}

    def save(self, path):
        """npz container plus a JSON manifest stored under ``__manifest__``."""
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, __manifest__=np.frombuffer(json.dumps(self.manifest(), sort_keys=True).encode(), dtype=np.uint8),
                     **{k: self.tensors[k] for k in sorted(self.tensors)})

    @classmethod
    def load(cls, path) -> "PmlWeights":
        try:
            with np.load(path, allow_pickle=False) as z:
                data = {k: z[k] for k in z.files}
        except (OSError, ValueError) as e:
            raise ShapeMismatch(f"cannot read weight file {path}: {e}") from None
        if "__manifest__" not in data:
            raise ShapeMismatch("weight file has no manifest")
        manifest = json.loads(bytes(data.pop("__manifest__")).decode())
        for name, shape in manifest.get("tensors", {}).items():
            if name not in data or list(data[name].shape) != list(shape):
                raise ShapeMismatch(f"manifest disagrees with tensor {name}")
        return cls(data, n_freq=int(manifest.get("n_freq", 64)))

    @classmethod
    def zeros(cls, arch: dict = DEFAULT_ARCH) -> "PmlWeights":
        dims = {k: arch[k] for k in ("C1", "C2", "H")}
        t = {name: np.zeros(tuple(dims[s] if isinstance(s, str) else s for s in sym))
             for name, sym in _PML_LAYOUT.items()}
        t["feat_scale"] = np.ones(N_FEATURES)
        return cls(t, n_freq=arch["n_freq"])

    @classmethod
    def random(cls, seed: int, arch: dict = DEFAULT_ARCH, scale: float = 0.1) -> "PmlWeights":
        rng = np.random.default_rng(seed)
        base = cls.zeros(arch).tensors
        t = {k: scale * rng.standard_normal(v.shape) for k, v in sorted(base.items())}
        t["feat_mean"] = np.zeros(N_FEATURES)
        t["feat_scale"] = np.ones(N_FEATURES)
        return cls(t, n_freq=arch["n_freq"])


class FeatureHistory:
    """Last 8 feature vectors (oldest first), padded with the earliest one."""

    capacity = HISTORY_LEN

    def __init__(self):
        self._buf: deque[np.ndarray] = deque(maxlen=HISTORY_LEN)

    def push(self, fv: FeatureVector38):
        self._buf.append(np.asarray(fv.values, dtype=float))

    def __len__(self) -> int:
        return len(self._buf)

    def matrix(self) -> np.ndarray:
        if not self._buf:
            raise InsufficientContext("feature history is empty")
        rows = list(self._buf)
        return np.stack([rows[0]] * (HISTORY_LEN - len(rows)) + rows)


def _conv_same(x, w, b):
    """3x3 same-padded cross-correlation. x: (Cin, H, W), w: (Cout, Cin, 3, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", win, w, optimize=True) + b[:, None, None]


def _pool2(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).max(axis=(2, 4))


def _gru(seq, t):
    h = np.zeros(t["gru_uz"].shape[0])
    for x in seq:
        z = special.expit(t["gru_wz"] @ x + t["gru_uz"] @ h + t["gru_bz"])
        r = special.expit(t["gru_wr"] @ x + t["gru_ur"] @ h + t["gru_br"])
        hc = np.tanh(t["gru_wh"] @ x + t["gru_uh"] @ (r * h) + t["gru_bh"])
        h = (1 - z) * h + z * hc
    return h


def _softmax(logits) -> StageDistribution:
    p = special.softmax(np.asarray(logits, dtype=float))
    return StageDistribution.from_array(p, normalize=True)


def pml_latent(spec: EpochSpectrogram, hist: FeatureHistory | np.ndarray, w: PmlWeights) -> np.ndarray:
    t = w.tensors
    power = np.asarray(spec.power, dtype=float)
    if power.ndim != 2 or power.shape[1] != w.n_freq or power.shape[0] < 4:
        raise ShapeMismatch(f"spectrogram shape {power.shape} incompatible with n_freq={w.n_freq}")
    hmat = hist.matrix() if isinstance(hist, FeatureHistory) else np.asarray(hist, dtype=float)
    if hmat.shape != (HISTORY_LEN, N_FEATURES):
        raise ShapeMismatch(f"history shape {hmat.shape}, expected ({HISTORY_LEN}, {N_FEATURES})")
    x = np.log(power + 1e-6)[None]
    x = _pool2(np.maximum(_conv_same(x, t["conv1_w"], t["conv1_b"]), 0))
    x = _pool2(np.maximum(_conv_same(x, t["conv2_w"], t["conv2_b"]), 0))
    conv = x.mean(axis=1).reshape(-1)  # average over time
    seq = (hmat - t["feat_mean"]) / t["feat_scale"]
    latent = np.concatenate([conv, _gru(seq, t)])
    if latent.shape != (LATENT_DIM,):
        raise ShapeMismatch(f"latent width {latent.shape[0]} != {LATENT_DIM}")
    return latent


def pml_forward(spec: EpochSpectrogram, hist: FeatureHistory | np.ndarray, w: PmlWeights) -> StageDistribution:
    """Conv branch on the spectrogram, GRU branch on the history, dense softmax head."""
    latent = pml_latent(spec, hist, w)
    return _softmax(w.tensors["head_w"] @ latent + w.tensors["head_b"])


# ---------------------------------------------------------------- baseline

# Neutral reference point: at equal band powers and these feature values
# every stage score is zero, so the output is exactly uniform.
NEUTRAL = {"emg_rms": 4.0, "eog_var": 100.0, "sigma": 0.05}
# gains fitted once (bounded log-loss) on synthetic nights with seeds 100-101
BASELINE_GAINS = {
    "w_alpha": 30.0, "w_emg": 15.0,
    "d_delta": 8.0,
    "r_theta": 2.0, "r_emg": 4.0, "r_eog": 0.5,
    "l_sigma": 60.0,
}


def baseline_scores(rsp: RspBands, fv: FeatureVector38, gains: dict = BASELINE_GAINS) -> np.ndarray:
    """Unnormalized log scores (Wake, Light, Deep, REM)."""
    g = gains
    emg = np.log(max(fv["emg_rms"], 1e-6) / NEUTRAL["emg_rms"])
    eog = np.log(max(fv["eog_var"], 1e-6) / NEUTRAL["eog_var"])
    s_w = g["w_alpha"] * (rsp.alpha - 0.25) + g["w_emg"] * emg
    # squared excess so moderate delta (K-complexes, light sleep) stays weak
    s_d = g["d_delta"] * max(0.0, rsp.delta - 0.25) ** 2 / 0.75
    s_r = g["r_theta"] * (rsp.theta - 0.25) - g["r_emg"] * emg + g["r_eog"] * eog
    s_l = g["l_sigma"] * (fv["eeg_rel_sigma"] - NEUTRAL["sigma"])
    return np.array([s_w, s_l, s_d, s_r])


def baseline_stage(rsp: RspBands, fv: FeatureVector38) -> StageDistribution:
    """Hallmark rules turned into a softmax over stage scores.

    Wake rises with alpha dominance and EMG tone, Deep with delta dominance,
    REM with theta, weak EMG and eye-movement energy. Light is the residual
    class, nudged up by spindle-band power.
    """
    return _softmax(baseline_scores(rsp, fv))


def ensemble(dists) -> StageDistribution:
    dists = list(dists)
    if not dists:
        raise EmptyEnsemble("ensemble needs at least one distribution")
    return StageDistribution.from_array(np.mean([d.as_array() for d in dists], axis=0), normalize=True)


# ---------------------------------------------------------------- SML

SML_FEATURES = (
    "hr_mean", "hr_std", "hr_min", "hr_max", "hr_slope",
    "rr_mean", "rr_std", "rr_min", "rr_max", "rr_slope",
    "sdnn_ms", "rmssd_ms", "activity_mean", "activity_max", "stillness_fraction",
    "posture_changes", "accel_mag_std", "accel_std_x", "accel_std_y", "accel_std_z",
    "hr_delta_baseline", "movement_delta_baseline", "minutes_since_movement", "epoch_index_norm",
)
SML_INDEX = {n: i for i, n in enumerate(SML_FEATURES)}
NOMINAL_NIGHT_EPOCHS = 960
ACTIVITY_JERK_G_S = 0.5
MAJOR_MOVEMENT_COUNT = 10


@dataclass(frozen=True)
class SmlFeatures:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (N_SML_FEATURES,):
            raise ShapeMismatch(f"need {N_SML_FEATURES} SML features")
        if not np.all(np.isfinite(v)):
            raise ValidationError("SML features must be finite")
        object.__setattr__(self, "values", v)

    def __getitem__(self, name: str) -> float:
        return float(self.values[SML_INDEX[name]])


@dataclass(frozen=True)
class SmlContext:
    """Session-level context the 60 s window cannot see on its own."""

    hr_baseline: float | None = None        # trailing 5-min mean HR
    movement_baseline: float | None = None  # trailing 5-min mean activity
    minutes_since_movement: float = 0.0
    epoch_index: int = 0


def _slope_per_min(y, dt_s):
    y = np.asarray(y, dtype=float)
    if len(y) < 2 or np.ptp(y) == 0:
        return 0.0
    t = np.arange(len(y)) * dt_s / 60.0
    return float(np.polyfit(t, y, 1)[0])


def activity_counts(imu, fs: float) -> np.ndarray:
    """Per-second count of samples whose magnitude jerk exceeds 0.5 g/s."""
    imu = np.atleast_2d(np.asarray(imu, dtype=float))
    mag = np.linalg.norm(imu, axis=0)
    jerk = np.abs(np.diff(mag, prepend=mag[:1])) * fs
    k = int(round(fs))
    m = len(mag) // k
    return (jerk[:m * k] > ACTIVITY_JERK_G_S).reshape(m, k).sum(axis=1).astype(float)


def sml_features(hr, rr, imu, fs_imu: float = 50.0, hr_dt_s: float = 5.0,
                 rr_dt_s: float = EPOCH_S, ctx: SmlContext = SmlContext()) -> SmlFeatures:
    """24 features from 60 s of HR/RR estimates and accelerometer samples."""
    hr = np.asarray([v for v in np.atleast_1d(hr) if np.isfinite(v)], dtype=float)
    rr = np.asarray([v for v in np.atleast_1d(rr) if np.isfinite(v)], dtype=float)
    imu = np.atleast_2d(np.asarray(imu, dtype=float))
    if imu.shape[1] < int(round(60 * fs_imu)) or len(hr) == 0 or len(rr) == 0:
        raise InsufficientContext("SML features need 60 s of IMU and at least one HR and RR value")
    imu = imu[:, -int(round(60 * fs_imu)):]
    out = np.zeros(N_SML_FEATURES)
    put = lambda n, v: out.__setitem__(SML_INDEX[n], v)
    for key, x, dt in (("hr", hr, hr_dt_s), ("rr", rr, rr_dt_s)):
        put(f"{key}_mean", x.mean())
        put(f"{key}_std", x.std())
        put(f"{key}_min", x.min())
        put(f"{key}_max", x.max())
        put(f"{key}_slope", _slope_per_min(x, dt))
    ibi_ms = 60000.0 / hr
    put("sdnn_ms", ibi_ms.std())
    put("rmssd_ms", float(np.sqrt(np.mean(np.diff(ibi_ms) ** 2))) if len(ibi_ms) > 1 else 0.0)
    counts = activity_counts(imu, fs_imu)
    put("activity_mean", counts.mean())
    put("activity_max", counts.max())
    put("stillness_fraction", float(np.mean(counts == 0)))
    k = int(round(10 * fs_imu))
    tracker = PostureTracker()
    labels = []
    for i in range(imu.shape[1] // k):
        try:
            labels.append(tracker.update(imu[:, i * k:(i + 1) * k], fs_imu))
        except SleepLoopError:
            pass
    put("posture_changes", sum(1 for a, b in zip(labels, labels[1:]) if a is not b))
    put("accel_mag_std", float(np.linalg.norm(imu, axis=0).std()))
    for ax, name in enumerate(("x", "y", "z")):
        put(f"accel_std_{name}", float(imu[ax].std()))
    put("hr_delta_baseline", hr.mean() - ctx.hr_baseline if ctx.hr_baseline is not None else 0.0)
    put("movement_delta_baseline",
        counts.mean() - ctx.movement_baseline if ctx.movement_baseline is not None else 0.0)
    put("minutes_since_movement", ctx.minutes_since_movement)
    put("epoch_index_norm", ctx.epoch_index / NOMINAL_NIGHT_EPOCHS)
    return SmlFeatures(out)


@dataclass(frozen=True)
class SmlWeights:
    """Single-layer tanh RNN over successive minutes plus a softmax head."""

    w_in: np.ndarray   # (H, 24)
    w_rec: np.ndarray  # (H, H)
    b: np.ndarray      # (H,)
    head_w: np.ndarray  # (4, H)
    head_b: np.ndarray  # (4,)
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_SML_FEATURES))
    feat_scale: np.ndarray = field(default_factory=lambda: np.ones(N_SML_FEATURES))

    def __post_init__(self):
        h = np.asarray(self.w_rec).shape[0]
        want = {"w_in": (h, N_SML_FEATURES), "w_rec": (h, h), "b": (h,), "head_w": (4, h),
                "head_b": (4,), "feat_mean": (N_SML_FEATURES,), "feat_scale": (N_SML_FEATURES,)}
        for name, shape in want.items():
            if np.asarray(getattr(self, name)).shape != shape:
                raise ShapeMismatch(f"{name}: expected shape {shape}")

    @classmethod
    def zeros(cls, hidden: int = 32) -> "SmlWeights":
        return cls(np.zeros((hidden, N_SML_FEATURES)), np.zeros((hidden, hidden)), np.zeros(hidden),
                   np.zeros((4, hidden)), np.zeros(4))

    @classmethod
    def random(cls, seed: int, hidden: int = 32, scale: float = 0.1) -> "SmlWeights":
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((hidden, N_SML_FEATURES)),
                   scale * rng.standard_normal((hidden, hidden)), scale * rng.standard_normal(hidden),
                   scale * rng.standard_normal((4, hidden)), scale * rng.standard_normal(4))


def sml_forward(f: SmlFeatures, w: SmlWeights, h_prev=None) -> tuple[StageDistribution, np.ndarray]:
    """One recurrent step; returns the distribution and the new hidden state."""
    x = (np.asarray(f.values) - w.feat_mean) / w.feat_scale
    h = np.zeros(w.w_rec.shape[0]) if h_prev is None else np.asarray(h_prev, dtype=float)
    if h.shape != (w.w_rec.shape[0],):
        raise ShapeMismatch("hidden state width mismatch")
    h = np.tanh(w.w_in @ x + w.w_rec @ h + w.b)
    return _softmax(w.head_w @ h + w.head_b), h


# centroids per stage over (HR mean, RR mean, HR std, log1p activity mean)
SML_CENTROIDS = np.array([
    [72.0, 16.5, 2.0, 1.0],
    [62.0, 14.0, 0.8, 0.0],
    [55.0, 12.0, 0.5, 0.0],
    [68.0, 17.0, 2.5, 0.0],
])
SML_SCALES = np.array([3.0, 1.0, 1.5, 0.5])
SML_LOG_PRIOR = np.log([0.1, 0.5, 0.2, 0.2])


def sml_baseline(f: SmlFeatures) -> StageDistribution:
    """Nearest-centroid scorer over heart rate, breathing and movement."""
    x = np.array([f["hr_mean"], f["rr_mean"], f["hr_std"], np.log1p(f["activity_mean"])])
    d2 = (((x[None, :] - SML_CENTROIDS) / SML_SCALES) ** 2).sum(axis=1)
    return _softmax(SML_LOG_PRIOR - 0.5 * d2)


# ---------------------------------------------------------------- pipeline


class Provenance:
    PML = "PML"
    SML = "SML"
    NONE = "none"


@dataclass(frozen=True)
class EpochResult:
    index: int
    stage: SleepStage
    distribution: StageDistribution | None
    provenance: str
    derivations: tuple[str, ...] = ()
    sml_distribution: StageDistribution | None = None


@dataclass(frozen=True)
class PipelineConfig:
    scheme: str = "dynamic"
    scorer: str = "baseline"           # "baseline" or "pml:<path>"
    filter_mode: str = "causal"
    dsp: DspConfig = field(default_factory=DspConfig)
    tree: QualityTree = DEFAULT_TREE
    pml_weights: PmlWeights | None = None
    sml_weights: SmlWeights | None = None
    min_hr_windows: int = 3            # of 6 per epoch

    def __post_init__(self):
        ReferencingScheme.parse(self.scheme)
        if self.filter_mode not in ("causal", "zero-phase"):
            raise ValidationError(f"unknown filter mode {self.filter_mode!r}")
        if self.scorer != "baseline" and not self.scorer.startswith("pml"):
            raise ValidationError(f"unknown scorer {self.scorer!r}")
        if self.scorer.startswith("pml") and self.pml_weights is None:
            path = self.scorer.partition(":")[2]
            if not path:
                raise ValidationError("pml scorer needs a weights path")
            object.__setattr__(self, "pml_weights", PmlWeights.load(path))


class StagingPipeline:
    """Real-time epoch-by-epoch staging for one session.

    Owns per-derivation filter state and feature histories, plus rolling
    vitals used by the fallback. The fallback is evaluated on a one-minute
    cadence: a fresh estimate at every odd epoch from the 60 s ending there,
    held for the following epoch.
    """

    def __init__(self, config: PipelineConfig = PipelineConfig()):
        self.cfg = config
        self.scheme = ReferencingScheme.parse(config.scheme)
        self._filters: dict[str, DerivationFilters] = {}
        self._hist: dict[str, FeatureHistory] = {}
        self._hr_tracker = HrTracker(5)
        self._hr_raw: deque[float] = deque(maxlen=12)
        self._hr_epoch: deque[float] = deque(maxlen=10)
        self._rr: deque[float] = deque(maxlen=2)
        self._act_epoch: deque[float] = deque(maxlen=10)
        self._prev_imu: np.ndarray | None = None
        self._prev_imu_buffer: np.ndarray | None = None
        self._last_move_epoch: int | None = None
        self._sml_h = None
        self._sml_held: StageDistribution | None = None
        self._vitals_ok: deque[bool] = deque(maxlen=2)
        self.n_seen = 0

    # -- ExG path

    def _derivation_dist(self, name, x, fs):
        cfg = self.cfg.dsp if self.cfg.dsp.fs == fs else DspConfig(fs=fs)
        if self.cfg.filter_mode == "causal":
            st = self._filters.setdefault(name, DerivationFilters(cfg))
            comp = decompose(preprocess(x, cfg, "causal", st), cfg, "causal", st)
        else:
            comp = decompose(preprocess(x, cfg), cfg)
        fv = feature_vector_38(comp, cfg)
        hist = self._hist.setdefault(name, FeatureHistory())
        hist.push(fv)
        if self.cfg.pml_weights is not None:
            return pml_forward(epoch_spectrogram(comp.eeg, cfg), hist, self.cfg.pml_weights)
        try:
            rsp = relative_spectral_power(comp.eeg, cfg)
        except SleepLoopError:
            return None
        return baseline_stage(rsp, fv)

    # -- fallback path

    def _update_vitals(self, view: EpochView) -> bool:
        ok_hr = 0
        if view.ppg is not None:
            k = int(round(5 * view.fs_ppg))
            for i in range(view.ppg.shape[1] // k):
                est = heart_rate(view.ppg[:, i * k:(i + 1) * k], view.fs_ppg, view.t_start + 5 * i)
                self._hr_tracker.update(est)
                if est.quality:
                    ok_hr += 1
                    self._hr_raw.append(est.bpm)
                    self._hr_epoch.append(est.bpm)
        imu_ok = False
        if view.imu is not None and view.imu.shape[1]:
            counts = activity_counts(view.imu, view.fs_imu)
            self._act_epoch.append(float(counts.mean()))
            if counts.max() >= MAJOR_MOVEMENT_COUNT:
                self._last_move_epoch = view.index
            imu_ok = not imu_outlier_mask(view.imu, view.fs_imu).all()
            if self._prev_imu is not None:
                win = np.concatenate([self._prev_imu, view.imu], axis=1)
                try:
                    self._rr.append(respiratory_rate(win, view.fs_imu, view.t_start - EPOCH_S).brpm)
                except SleepLoopError:
                    pass
            self._prev_imu = np.array(view.imu)
        return ok_hr >= self.cfg.min_hr_windows and imu_ok

    def _sml_fresh(self, view: EpochView) -> StageDistribution | None:
        if self._prev_imu_buffer is None or view.imu is None or not self._rr or not self._hr_raw:
            return None
        win = np.concatenate([self._prev_imu_buffer, view.imu], axis=1)
        since = 0.0 if self._last_move_epoch is None else (view.index - self._last_move_epoch) * EPOCH_S / 60
        ctx = SmlContext(
            hr_baseline=float(np.mean(self._hr_epoch)) if self._hr_epoch else None,
            movement_baseline=float(np.mean(self._act_epoch)) if self._act_epoch else None,
            minutes_since_movement=since if self._last_move_epoch is not None else view.index * EPOCH_S / 60,
            epoch_index=view.index,
        )
        try:
            f = sml_features(list(self._hr_raw), list(self._rr), win, view.fs_imu, ctx=ctx)
        except SleepLoopError:
            return None
        if self.cfg.sml_weights is not None:
            d, self._sml_h = sml_forward(f, self.cfg.sml_weights, self._sml_h)
            return d
        return sml_baseline(f)

    def _sml_step(self, view: EpochView) -> StageDistribution | None:
        self._prev_imu_buffer = self._prev_imu
        ok = self._update_vitals(view)
        self._vitals_ok.append(ok)
        if view.index % 2 == 1:
            self._sml_held = self._sml_fresh(view) if ok else None
            return self._sml_held
        held = self._sml_held
        self._sml_held = None
        return held if ok else None

    def stage_epoch(self, view: EpochView) -> EpochResult:
        self.n_seen += 1
        sml = self._sml_step(view)
        mask = select_channels(view, self.cfg.tree)
        derivations = apply_scheme(view, mask, self.scheme)
        dists, names = [], []
        for name, x in derivations.items():
            d = self._derivation_dist(name, x, view.fs_exg)
            if d is not None:
                dists.append(d)
                names.append(name)
        if dists:
            d = ensemble(dists)
            return EpochResult(view.index, d.argmax(), d, Provenance.PML, tuple(names), sml)
        if sml is not None:
            return EpochResult(view.index, sml.argmax(), sml, Provenance.SML, (), sml)
        return EpochResult(view.index, SleepStage.UNSCORED, None, Provenance.NONE, (), None)

    def run(self, recording) -> list[EpochResult]:
        from .core import slice_epochs

        return [self.stage_epoch(v) for v in slice_epochs(recording)]


def stage_epoch(pipeline: StagingPipeline, view: EpochView) -> EpochResult:
    return pipeline.stage_epoch(view)
