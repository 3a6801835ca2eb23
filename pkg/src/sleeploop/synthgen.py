"""Deterministic synthetic sessions with planted ground truth.

Everything is driven by ``SessionSpec.seed``: separate random streams feed
the hypnogram, ExG, PPG, IMU and artifact generators, so changing one part of
a spec does not perturb the others. Signals are idealized on purpose. Each
stage carries a strong, textbook hallmark (alpha + EMG in wake, spindles and
K-complexes in light sleep, high-amplitude delta in deep sleep, theta + eye
movements + atonia in REM).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal, special

from .core import (
    EPOCH_S, EXG_CHANNELS, PPG_CHANNELS, Hypnogram, SessionRecording, SleepStage,
)
from .formats import quantize
from .errors import InfeasibleProportions, SpanOutOfRange, ValidationError
from .vitals import Posture, POSTURE_GRAVITY

W, L, D, R = (int(s) for s in (SleepStage.WAKE, SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM))

# stage-driven physiology
STAGE_HR = {W: 72.0, L: 62.0, D: 55.0, R: 68.0}
STAGE_HR_JITTER = {W: 2.0, L: 0.8, D: 0.5, R: 3.5}
STAGE_RR = {W: 16.5, L: 14.0, D: 12.0, R: 17.0}
STAGE_RR_JITTER = {W: 1.0, L: 0.4, D: 0.2, R: 1.5}
STAGE_MOVE_PROB = {W: 0.25, L: 0.02, D: 0.005, R: 0.01}
STAGE_EMG_UV = {W: 9.0, L: 3.0, D: 2.5, R: 0.7}

EEG_GAIN = {"FH": 1.0, "OTE": 0.9, "BE": 0.8}
EOG_GAIN = {"FH": 1.0, "OTE": 0.6, "BE": 0.3}
EMG_GAIN = {"FH": 0.8, "OTE": 1.2, "BE": 1.0}

PPG_DC = {"ir": 30000.0, "red": 25000.0, "green": 15000.0}
PPG_AC = {"ir": 800.0, "red": 500.0, "green": 1200.0}
PPG_RAIL = 65535.0

ARTIFACT_KINDS = ("flatline", "saturation", "line_noise", "movement")
REJECTABLE = {"flatline": True, "saturation": True, "line_noise": False, "movement": True}

_STREAM = {"hyp": 0, "exg": 1, "ppg": 2, "imu": 3, "art": 4, "plan": 5}


def _rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM[stream], *extra]))


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    start_s: float
    end_s: float
    channels: tuple[str, ...] = EXG_CHANNELS
    amplitude: float | None = None


@dataclass(frozen=True)
class SessionSpec:
    seed: int = 0
    n_epochs: int = 960
    sol_epoch: int | None = 40
    light: float = 0.55
    deep: float = 0.20
    rem: float = 0.225
    hr_bpm: float | None = None       # None: stage-driven profile
    rr_brpm: float | None = None      # None: stage-driven profile
    postures: tuple[tuple[float, str], ...] | None = None  # None: auto schedule
    n_posture_changes: int = 4
    movements: tuple[tuple[float, float], ...] | None = None  # None: stage-driven bursts
    artifacts: tuple[ArtifactSpec, ...] = ()
    fs_exg: float = 250.0
    fs_ppg: float = 50.0
    fs_imu: float = 50.0
    exg_white_uv: float = 1.0
    ppg_noise: float = 15.0
    imu_noise_g: float = 0.002
    resp_amp_g: float = 0.01
    onset_run: int = 4

    def __post_init__(self):
        props = (self.light, self.deep, self.rem)
        if any(p < 0 for p in props) or sum(props) > 1 + 1e-12:
            raise InfeasibleProportions(f"stage proportions {props} must be >= 0 and sum <= 1")
        if self.n_epochs < 0:
            raise ValidationError("n_epochs must be >= 0")
        if self.sol_epoch is not None and self.sol_epoch < 0:
            raise ValidationError("sol_epoch must be >= 0")

    @property
    def target_distribution(self) -> np.ndarray:
        return np.array([1.0 - self.light - self.deep - self.rem, self.light, self.deep, self.rem])


@dataclass
class SyntheticSession:
    spec: SessionSpec
    recording: SessionRecording
    hypnogram: Hypnogram
    truth: dict = field(default_factory=dict)


# ---------------------------------------------------------------- hypnogram

# symmetric exchange rates between stages; transitions are s_ij * pi_j,
# which keeps the chain reversible with stationary distribution pi
_EXCHANGE = np.array([
    [0.0, 0.8, 0.0, 0.2],
    [0.8, 0.0, 0.2, 0.1],
    [0.0, 0.2, 0.0, 0.0],
    [0.2, 0.1, 0.0, 0.0],
])


def transition_matrix(pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    p = _EXCHANGE * pi[None, :]
    np.fill_diagonal(p, 0.0)
    np.fill_diagonal(p, 1.0 - p.sum(axis=1))
    return p


def gen_hypnogram(spec: SessionSpec) -> Hypnogram:
    """Wake until the planted onset, then a stationary Markov chain.

    The onset opens with ``onset_run`` Light epochs. For long nights the
    chain is redrawn (deterministically) until the post-onset stage
    frequencies sit within 0.03 of the targets.
    """
    n = spec.n_epochs
    if spec.sol_epoch is None or spec.sol_epoch >= n:
        return Hypnogram((SleepStage.WAKE,) * n)
    pi = spec.target_distribution
    p = transition_matrix(pi)
    cum = np.cumsum(p, axis=1)
    rng = _rng(spec.seed, "hyp")
    post = n - spec.sol_epoch
    head = min(spec.onset_run, post)
    best = None
    for _ in range(500):
        u = rng.random(post)
        seq = np.empty(post, dtype=np.int64)
        seq[:head] = L
        state = L
        for i in range(head, post):
            state = int(np.searchsorted(cum[state], u[i], side="right"))
            state = min(state, 3)
            seq[i] = state
        freq = np.bincount(seq, minlength=4) / post
        err = np.abs(freq - pi).max()
        if best is None or err < best[0]:
            best = (err, seq)
        if post < 400 or err <= 0.03:
            break
    codes = np.concatenate([np.full(spec.sol_epoch, W), best[1]])
    return Hypnogram.from_codes(codes)


# ---------------------------------------------------------------- ExG


def _pink(rng, n, fs, lo=0.3, hi=40.0):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / fs)
    shape = np.zeros_like(f)
    band = (f >= lo) & (f <= hi)
    shape[band] = 1.0 / np.sqrt(f[band])
    x = np.fft.irfft(spec * shape, n)
    return x / (x.std() + 1e-300)


def _bandnoise(rng, n, fs, lo, hi):
    sos = signal.butter(4, (lo, min(hi, 0.45 * fs)), btype="bandpass", fs=fs, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n))
    return x / (x.std() + 1e-300)


def _site(name: str) -> str:
    return name.split("_")[0]


def _epoch_levels(codes, table, n_samples, fs):
    """Per-sample stage level, linearly ramped over 2 s at epoch borders."""
    per_epoch = np.array([table[int(c)] for c in codes], dtype=float)
    ne = int(round(EPOCH_S * fs))
    lev = np.repeat(per_epoch, ne)
    lev = np.concatenate([lev, np.full(max(0, n_samples - len(lev)), per_epoch[-1] if len(per_epoch) else 0.0)])[:n_samples]
    k = int(2 * fs)
    if k > 1 and len(lev) > k:
        lev = np.convolve(np.pad(lev, (k // 2, k - 1 - k // 2), mode="edge"), np.ones(k) / k, mode="valid")
    return lev


def _burst(t, t0, dur, freq, amp, phase):
    x = np.zeros_like(t)
    m = (t >= t0) & (t < t0 + dur)
    tt = t[m] - t0
    x[m] = amp * np.hanning(m.sum()) * np.sin(2 * np.pi * freq * tt + phase)
    return x


def _k_complex(t, t0, amp):
    return -amp * np.exp(-((t - t0) / 0.12) ** 2) + 0.55 * amp * np.exp(-((t - t0 - 0.4) / 0.22) ** 2)


def _saccade(t, t0, hold, amp):
    rise = special.expit((t - t0) / 0.012)
    fall = special.expit((t - t0 - hold) / 0.08)
    return amp * (rise - fall)


def _blink(t, t0, amp):
    return amp * np.exp(-((t - t0) / 0.09) ** 2)


def _eeg_epoch(stage, rng, t, fs, log):
    """Stage-specific brain activity for one channel-epoch."""
    x = np.zeros_like(t)
    if stage == W:
        f = rng.uniform(9.5, 10.5)
        env = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.05, 0.2) * t + rng.uniform(0, 2 * np.pi))
        x += 22.0 * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif stage == L:
        x += 7.0 * np.sin(2 * np.pi * rng.uniform(5.0, 7.0) * t + rng.uniform(0, 2 * np.pi))
        n_sp = max(1, rng.poisson(3.0))
        for t0 in np.sort(rng.uniform(0.5, 28.5, n_sp)):
            x += _burst(t, t0, rng.uniform(0.5, 1.0), rng.uniform(12.5, 14.0), 24.0, rng.uniform(0, 2 * np.pi))
        n_kc = rng.poisson(0.6)
        for t0 in rng.uniform(1.0, 28.5, n_kc):
            x += _k_complex(t, t0, rng.uniform(50, 70))
        log["spindles"] += n_sp
        log["k_complexes"] += n_kc
    elif stage == D:
        for f, a in ((rng.uniform(0.6, 0.9), 38.0), (rng.uniform(1.0, 1.5), 30.0), (rng.uniform(1.6, 2.0), 22.0)):
            x += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif stage == R:
        x += 14.0 * np.sin(2 * np.pi * rng.uniform(5.0, 7.0) * t + rng.uniform(0, 2 * np.pi))
        x += 6.0 * np.sin(2 * np.pi * rng.uniform(4.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    return x


_BACKGROUND_UV = {W: 3.0, L: 5.0, D: 6.0, R: 4.0}


def gen_exg(h: Hypnogram, seed: int, fs: float = 250.0, white_uv: float = 1.0):
    """Six CMS-referenced channels (µV) plus a per-epoch event log."""
    codes = h.codes()
    ne = int(round(EPOCH_S * fs))
    n = len(codes) * ne
    t_epoch = np.arange(ne) / fs
    out = np.zeros((len(EXG_CHANNELS), n))
    log = {"spindles": np.zeros((len(EXG_CHANNELS), len(codes)), dtype=int),
           "k_complexes": np.zeros((len(EXG_CHANNELS), len(codes)), dtype=int),
           "saccades": np.zeros(len(codes), dtype=int),
           "blinks": np.zeros(len(codes), dtype=int)}
    if n == 0:
        return out, log
    common = 1.5 * _pink(_rng(seed, "exg", 99), n, fs)
    bg_level = _epoch_levels(codes, _BACKGROUND_UV, n, fs)
    emg_level = _epoch_levels(codes, STAGE_EMG_UV, n, fs)
    # shared eye movements: horizontal saccades flip sign between sides,
    # blinks do not
    eye = np.zeros((2, n))
    erng = _rng(seed, "exg", 98)
    for e, s in enumerate(codes):
        sl = slice(e * ne, (e + 1) * ne)
        if s == R:
            k = erng.poisson(4.0)
            for t0 in erng.uniform(0.2, 29.0, k):
                eye[0, sl] += _saccade(t_epoch, t0, erng.uniform(0.3, 0.8), erng.choice([-1, 1]) * erng.uniform(40, 70))
            log["saccades"][e] = k
        elif s == W:
            k = erng.poisson(3.0)
            for t0 in erng.uniform(0.3, 29.5, k):
                eye[1, sl] += _blink(t_epoch, t0, erng.uniform(60, 90))
            log["blinks"][e] = k
    for ci, name in enumerate(EXG_CHANNELS):
        rng = _rng(seed, "exg", ci)
        site = _site(name)
        side = 1.0 if name.endswith("_L") else -1.0
        x = bg_level * _pink(rng, n, fs)
        x += emg_level * EMG_GAIN[site] * _bandnoise(rng, n, fs, 20.0, 100.0)
        x += white_uv * rng.standard_normal(n)
        x += common
        x += EOG_GAIN[site] * (side * eye[0] + eye[1])
        brain = np.zeros(n)
        elog = {"spindles": 0, "k_complexes": 0}
        for e, s in enumerate(codes):
            elog["spindles"] = elog["k_complexes"] = 0
            brain[e * ne:(e + 1) * ne] = _eeg_epoch(int(s), rng, t_epoch, fs, elog)
            log["spindles"][ci, e] = elog["spindles"]
            log["k_complexes"][ci, e] = elog["k_complexes"]
        out[ci] = x + EEG_GAIN[site] * brain
    return out, log


# ---------------------------------------------------------------- vitals


def _ou(rng, n, dt, tau, sigma):
    """Ornstein-Uhlenbeck path with unit-free stationary std ``sigma``."""
    a = np.exp(-dt / tau)
    eps = rng.standard_normal(n) * np.sqrt(1 - a * a)
    x = np.empty(n)
    acc = 0.0
    # lfilter would also do; explicit to stay seed-stable across scipy versions
    x = signal.lfilter([1.0], [1.0, -a], eps)
    return sigma * x


def _rate_profile(codes, fs, n, table, jitter, constant, rng, tau_s=45.0):
    """Instantaneous rate per sample (per minute units)."""
    if constant is not None:
        return np.full(n, float(constant))
    if n == 0:
        return np.zeros(0)
    target = _epoch_levels(codes, table, n, fs)
    # first-order lag toward the stage target
    a = np.exp(-1.0 / (tau_s * fs))
    lagged = signal.lfilter([1 - a], [1, -a], target, zi=[a * target[0]])[0]
    j = _epoch_levels(codes, jitter, n, fs)
    return lagged + j * _ou(rng, n, 1.0 / fs, 15.0, 1.0)


def gen_ppg(codes, seed: int, fs: float = 50.0, hr_bpm: float | None = None, noise: float = 15.0):
    """Three PPG channels (ADC counts) and the instantaneous HR used."""
    n = int(round(len(codes) * EPOCH_S * fs))
    rng = _rng(seed, "ppg")
    hr = _rate_profile(codes, fs, n, STAGE_HR, STAGE_HR_JITTER, hr_bpm, rng)
    phase = np.cumsum(hr / 60.0) / fs
    phase += rng.uniform(0, 1)
    ph = np.mod(phase, 1.0)
    pulse = np.exp(-((ph - 0.2) / 0.07) ** 2) + 0.35 * np.exp(-((ph - 0.5) / 0.1) ** 2)
    t = np.arange(n) / fs
    out = np.zeros((3, n))
    for i, name in enumerate(PPG_CHANNELS):
        wander = 0.02 * PPG_DC[name] * np.sin(2 * np.pi * 0.05 * t + rng.uniform(0, 2 * np.pi))
        out[i] = PPG_DC[name] + wander + PPG_AC[name] * pulse + noise * rng.standard_normal(n)
    return np.clip(np.round(out), 0, PPG_RAIL), hr


def _movement_burst(rng, n, fs, amp=0.3):
    x = np.stack([_bandnoise(rng, n + int(fs), fs, 1.0, 8.0)[int(fs):] for _ in range(3)])
    return amp * x * np.hanning(n)[None, :] if n > 1 else np.zeros((3, n))


def gen_imu(codes, seed: int, fs: float = 50.0, rr_brpm: float | None = None,
            postures: Sequence[tuple[float, str]] = ((0.0, "supine"),),
            movements: Sequence[tuple[float, float]] = (), noise_g: float = 0.002,
            resp_amp_g: float = 0.01):
    """Accelerometer (g, device frame) with posture, breathing and movement."""
    n = int(round(len(codes) * EPOCH_S * fs))
    rng = _rng(seed, "imu")
    rr = _rate_profile(codes, fs, n, STAGE_RR, STAGE_RR_JITTER, rr_brpm, rng, tau_s=60.0)
    t = np.arange(n) / fs
    grav = np.zeros((3, n))
    sched = sorted((float(t0), Posture.parse(p)) for t0, p in postures) or [(0.0, Posture.SUPINE)]
    turn = 2.0
    for k, (t0, p) in enumerate(sched):
        g = np.asarray(POSTURE_GRAVITY[p], dtype=float)
        grav[:, t >= t0] = g[:, None]
        if k > 0:
            prev = np.asarray(POSTURE_GRAVITY[sched[k - 1][1]], dtype=float)
            m = (t >= t0) & (t < t0 + turn)
            w = (t[m] - t0) / turn
            v = (1 - w)[None, :] * prev[:, None] + w[None, :] * g[:, None]
            grav[:, m] = v / np.linalg.norm(v, axis=0, keepdims=True)
    acc = grav.copy()
    resp_phase = 2 * np.pi * np.cumsum(rr / 60.0) / fs + rng.uniform(0, 2 * np.pi)
    acc[1] += resp_amp_g * np.sin(resp_phase)
    acc += noise_g * rng.standard_normal((3, n))
    for t0, dur in movements:
        i0, i1 = int(round(t0 * fs)), int(round((t0 + dur) * fs))
        i0, i1 = max(0, i0), min(n, i1)
        if i1 > i0:
            acc[:, i0:i1] += _movement_burst(rng, i1 - i0, fs)
    return quantize(acc, 5), rr


def _auto_plan(spec: SessionSpec, codes):
    """Posture schedule and movement bursts when SessionSpec leaves them open."""
    rng = _rng(spec.seed, "plan")
    dur = len(codes) * EPOCH_S
    postures = spec.postures
    movements = list(spec.movements) if spec.movements is not None else None
    posture_moves = []
    if postures is None:
        cycle = [Posture.SUPINE, Posture.LEFT_SIDE, Posture.SUPINE, Posture.RIGHT_SIDE, Posture.PRONE]
        sched = [(0.0, Posture.SUPINE)]
        # each change needs a 120 s slot clear of the first and last 5 min
        k = min(spec.n_posture_changes, max(0, int((dur - 600.0) // 120.0)))
        if k:
            edges = np.linspace(300.0, dur - 300.0, k + 1)
            for j in range(k):
                t0 = float(np.round(rng.uniform(edges[j] + 60, edges[j + 1] - 60)))
                sched.append((t0, cycle[(j + 1) % len(cycle)]))
                posture_moves.append((t0 - 0.5, 3.0))
        postures = tuple((t0, p.value) for t0, p in sched)
    if movements is None:
        movements = []
        for e, s in enumerate(codes):
            if rng.random() < STAGE_MOVE_PROB[int(s)]:
                movements.append((e * EPOCH_S + float(rng.uniform(2, 24)), float(rng.uniform(2, 5))))
        movements += posture_moves
    return postures, tuple(sorted(movements))


def _window_means(x, fs, win_s):
    k = int(round(win_s * fs))
    m = len(x) // k
    return x[:m * k].reshape(m, k).mean(axis=1) if m else np.zeros(0)


def gen_session(spec: SessionSpec) -> SyntheticSession:
    """Full recording plus a truth log for one spec."""
    hyp = gen_hypnogram(spec)
    codes = hyp.codes()
    exg, elog = gen_exg(hyp, spec.seed, spec.fs_exg, spec.exg_white_uv)
    ppg, hr = gen_ppg(codes, spec.seed, spec.fs_ppg, spec.hr_bpm, spec.ppg_noise)
    postures, movements = _auto_plan(spec, codes)
    imu, rr = gen_imu(codes, spec.seed, spec.fs_imu, spec.rr_brpm, postures, movements,
                      spec.imu_noise_g, spec.resp_amp_g)
    rec = SessionRecording(exg=quantize(exg, 3), ppg=ppg, imu=imu, fs_exg=spec.fs_exg,
                           fs_ppg=spec.fs_ppg, fs_imu=spec.fs_imu)
    truth = {
        "seed": spec.seed,
        "n_epochs": spec.n_epochs,
        "hypnogram": hyp.tokens(),
        "sol_epoch": spec.sol_epoch if spec.sol_epoch is not None and spec.sol_epoch < spec.n_epochs else None,
        "hr_bpm_5s": [round(float(v), 4) for v in _window_means(hr, spec.fs_ppg, 5.0)],
        "rr_brpm_60s": [round(float(v), 4) for v in _window_means(rr, spec.fs_imu, 60.0)],
        "postures": [[float(t0), str(p)] for t0, p in postures],
        "movements": [[float(a), float(b)] for a, b in movements],
        "spindles_per_epoch": elog["spindles"].tolist(),
        "saccades_per_epoch": elog["saccades"].tolist(),
        "artifacts": [],
    }
    session = SyntheticSession(spec, rec, hyp, truth)
    for k, art in enumerate(spec.artifacts):
        session = inject_artifact(session, art, seed=spec.seed * 1000 + k)
    return session


# ---------------------------------------------------------------- artifacts


def _span_indices(start_s, end_s, fs, n):
    i0, i1 = int(round(start_s * fs)), int(round(end_s * fs))
    return max(0, i0), min(n, i1)


def inject_artifact(session: SyntheticSession | SessionRecording, art: ArtifactSpec, seed: int = 0):
    """Apply one labelled artifact; returns the same kind of object it was given.

    For a :class:`SyntheticSession` the label is appended to
    ``truth["artifacts"]``. For a bare recording a ``(recording, label)`` pair
    is returned.
    """
    rec = session.recording if isinstance(session, SyntheticSession) else session
    if art.kind not in ARTIFACT_KINDS:
        raise ValidationError(f"unknown artifact kind {art.kind!r}")
    if not 0 <= art.start_s < art.end_s <= rec.duration_s + 1e-9:
        raise SpanOutOfRange(f"span [{art.start_s}, {art.end_s}) outside session of {rec.duration_s} s")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM["art"]]))
    exg = np.array(rec.exg)
    ppg = None if rec.ppg is None else np.array(rec.ppg)
    imu = None if rec.imu is None else np.array(rec.imu)
    chans = tuple(art.channels)
    unknown = set(chans) - set(EXG_CHANNELS) - set(PPG_CHANNELS) - {"imu"}
    if unknown:
        raise ValidationError(f"unknown artifact channels {sorted(unknown)}")

    i0, i1 = _span_indices(art.start_s, art.end_s, rec.fs_exg, exg.shape[1])
    t = np.arange(i1 - i0) / rec.fs_exg
    for c in chans:
        if c not in EXG_CHANNELS:
            continue
        ci = EXG_CHANNELS.index(c)
        if art.kind == "flatline":
            exg[ci, i0:i1] = exg[ci, i0] if i0 < exg.shape[1] else 0.0
        elif art.kind == "saturation":
            exg[ci, i0:i1] = 500.0 * (art.amplitude or 1.0) * rng.choice([-1.0, 1.0])
        elif art.kind == "line_noise":
            amp = 30.0 if art.amplitude is None else art.amplitude
            exg[ci, i0:i1] += amp * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
        elif art.kind == "movement":
            amp = 150.0 if art.amplitude is None else art.amplitude
            n = i1 - i0
            swing = np.cumsum(rng.standard_normal(n)) / np.sqrt(rec.fs_exg)
            swing = amp * (swing - swing.mean()) / (swing.std() + 1e-12)
            exg[ci, i0:i1] += swing + 40.0 * _bandnoise(rng, n, rec.fs_exg, 30.0, 110.0)
    exg = quantize(np.clip(exg, -500.0, 500.0), 3)

    if ppg is not None:
        j0, j1 = _span_indices(art.start_s, art.end_s, rec.fs_ppg, ppg.shape[1])
        for c in chans:
            if c not in PPG_CHANNELS:
                continue
            pi_ = PPG_CHANNELS.index(c)
            if art.kind == "flatline":
                ppg[pi_, j0:j1] = ppg[pi_, j0]
            elif art.kind == "saturation":
                ppg[pi_, j0:j1] = PPG_RAIL
            elif art.kind == "movement":
                ppg[pi_, j0:j1] += np.round(5000.0 * rng.standard_normal(j1 - j0))
        ppg = np.clip(ppg, 0, PPG_RAIL)

    if imu is not None and "imu" in chans:
        k0, k1 = _span_indices(art.start_s, art.end_s, rec.fs_imu, imu.shape[1])
        if art.kind == "movement":
            imu[:, k0:k1] += _movement_burst(rng, k1 - k0, rec.fs_imu, art.amplitude or 0.3)
        elif art.kind == "saturation":
            imu[:, k0:k1] = 4.0
        elif art.kind == "flatline":
            imu[:, k0:k1] = imu[:, k0:k0 + 1]

    if imu is not None:
        imu = quantize(imu, 5)
    new = rec.with_streams(exg=exg, ppg=ppg, imu=imu)
    label = {"kind": art.kind, "start_s": float(art.start_s), "end_s": float(art.end_s),
             "channels": list(chans), "rejectable": REJECTABLE[art.kind]}
    if isinstance(session, SyntheticSession):
        truth = dict(session.truth)
        truth["artifacts"] = list(truth.get("artifacts", [])) + [label]
        return replace(session, recording=new, truth=truth)
    return new, label


def artifact_epoch_labels(truth: dict, n_epochs: int, min_overlap: float = 0.5) -> dict[str, np.ndarray]:
    """Per-channel boolean arrays: True where a rejectable artifact covers the epoch."""
    out = {c: np.zeros(n_epochs, dtype=bool) for c in EXG_CHANNELS}
    for art in truth.get("artifacts", []):
        if not art["rejectable"]:
            continue
        for e in range(n_epochs):
            a, b = e * EPOCH_S, (e + 1) * EPOCH_S
            ov = max(0.0, min(b, art["end_s"]) - max(a, art["start_s"]))
            if ov >= min_overlap * EPOCH_S:
                for c in art["channels"]:
                    if c in out:
                        out[c][e] = True
    return out
