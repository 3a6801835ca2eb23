"""Shared data types: stages, hypnograms, recordings and epoch views."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyRecording, LengthMismatch, TooFewRaters, ValidationError

EPOCH_S = 30.0
EXG_CHANNELS = ("FH_L", "FH_R", "OTE_L", "OTE_R", "BE_L", "BE_R")
PPG_CHANNELS = ("ir", "red", "green")
IMU_AXES = ("ax", "ay", "az")


class SleepStage(IntEnum):
    """Four scored stages plus ``UNSCORED``.

    The integer values double as the fixed tie order used by every argmax
    in the package (Wake < Light < Deep < REM).
    """

    WAKE = 0
    LIGHT = 1
    DEEP = 2
    REM = 3
    UNSCORED = 4

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "SleepStage":
        try:
            return _FROM_TOKEN[token]
        except KeyError:
            raise ValidationError(f"unknown stage token {token!r}") from None


_TOKENS = {
    SleepStage.WAKE: "W",
    SleepStage.LIGHT: "L",
    SleepStage.DEEP: "D",
    SleepStage.REM: "R",
    SleepStage.UNSCORED: "U",
}
_FROM_TOKEN = {v: k for k, v in _TOKENS.items()}
SCORED_STAGES = (SleepStage.WAKE, SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM)


@dataclass(frozen=True)
class Hypnogram:
    stages: tuple[SleepStage, ...]
    epoch_duration_s: float = EPOCH_S

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(SleepStage(s) for s in self.stages))

    @classmethod
    def from_tokens(cls, tokens: str | Iterable[str]) -> "Hypnogram":
        return cls(tuple(SleepStage.from_token(t) for t in tokens))

    @classmethod
    def from_codes(cls, codes: Iterable[int]) -> "Hypnogram":
        return cls(tuple(SleepStage(int(c)) for c in codes))

    def codes(self) -> np.ndarray:
        return np.fromiter((int(s) for s in self.stages), dtype=np.int64, count=len(self.stages))

    def tokens(self) -> str:
        return "".join(s.token for s in self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]

    def __iter__(self):
        return iter(self.stages)

    @property
    def n_unscored(self) -> int:
        return sum(1 for s in self.stages if s is SleepStage.UNSCORED)


@dataclass(frozen=True)
class StageDistribution:
    """Probability vector over (Wake, Light, Deep, REM)."""

    p: tuple[float, float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.p, dtype=float)
        if arr.shape != (4,):
            raise ValidationError(f"stage distribution needs 4 components, got {arr.shape}")
        if np.any(~np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("stage distribution has negative or non-finite entries")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise ValidationError(f"stage distribution sums to {arr.sum()!r}")
        object.__setattr__(self, "p", tuple(float(x) for x in arr))

    @classmethod
    def from_array(cls, arr, normalize: bool = False) -> "StageDistribution":
        arr = np.asarray(arr, dtype=float)
        if normalize:
            arr = arr / arr.sum()
        return cls(tuple(arr))

    @classmethod
    def uniform(cls) -> "StageDistribution":
        return cls((0.25, 0.25, 0.25, 0.25))

    def as_array(self) -> np.ndarray:
        return np.array(self.p)

    def argmax(self) -> SleepStage:
        # np.argmax returns the first maximum, i.e. the fixed tie order
        return SleepStage(int(np.argmax(self.p)))

    @property
    def sleep_mass(self) -> float:
        return self.p[1] + self.p[2] + self.p[3]


def _readonly(a) -> np.ndarray | None:
    if a is None:
        return None
    a = np.asarray(a, dtype=float).view()
    if a.ndim == 1:
        a = a[None, :]
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SessionRecording:
    """Synchronized device streams sharing a common time origin.

    ``exg`` has shape (6, n) in :data:`EXG_CHANNELS` order, CMS referenced,
    in µV. ``ppg`` is (3, n) in :data:`PPG_CHANNELS` order; ``imu`` is (3, n)
    acceleration in g. PPG and IMU may be absent.
    """

    exg: np.ndarray
    ppg: np.ndarray | None = None
    imu: np.ndarray | None = None
    fs_exg: float = 250.0
    fs_ppg: float = 50.0
    fs_imu: float = 50.0
    start_time: float = 0.0

    def __post_init__(self):
        for name in ("exg", "ppg", "imu"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.exg.shape[0] != len(EXG_CHANNELS):
            raise ValidationError(f"exg needs {len(EXG_CHANNELS)} channels, got {self.exg.shape[0]}")
        if self.ppg is not None and self.ppg.shape[0] != 3:
            raise ValidationError("ppg needs 3 channels (ir, red, green)")
        if self.imu is not None and self.imu.shape[0] != 3:
            raise ValidationError("imu needs 3 axes")
        for fs in (self.fs_exg, self.fs_ppg, self.fs_imu):
            if not fs > 0:
                raise ValidationError("sampling rates must be positive")

    @property
    def duration_s(self) -> float:
        durations = [self.exg.shape[1] / self.fs_exg]
        if self.ppg is not None:
            durations.append(self.ppg.shape[1] / self.fs_ppg)
        if self.imu is not None:
            durations.append(self.imu.shape[1] / self.fs_imu)
        return min(durations)

    @property
    def n_epochs(self) -> int:
        return int(self.duration_s // EPOCH_S + 1e-9)

    def channel(self, name: str) -> np.ndarray:
        return self.exg[EXG_CHANNELS.index(name)]

    def with_streams(self, **kw) -> "SessionRecording":
        fields_ = dict(exg=self.exg, ppg=self.ppg, imu=self.imu, fs_exg=self.fs_exg,
                       fs_ppg=self.fs_ppg, fs_imu=self.fs_imu, start_time=self.start_time)
        fields_.update(kw)
        return SessionRecording(**fields_)


@dataclass(frozen=True)
class EpochView:
    """One 30 s slice of a recording. Arrays are views, not copies."""

    index: int
    exg: np.ndarray
    ppg: np.ndarray | None
    imu: np.ndarray | None
    fs_exg: float
    fs_ppg: float
    fs_imu: float
    recording: SessionRecording | None = field(default=None, repr=False, compare=False)

    @property
    def t_start(self) -> float:
        return self.index * EPOCH_S

    def channel(self, name: str) -> np.ndarray:
        return self.exg[EXG_CHANNELS.index(name)]

    def channels(self) -> dict[str, np.ndarray]:
        return {name: self.exg[i] for i, name in enumerate(EXG_CHANNELS)}


def _epoch_samples(fs: float) -> int:
    return int(round(EPOCH_S * fs))


def epoch_view(recording: SessionRecording, index: int) -> EpochView:
    def cut(stream, fs):
        if stream is None:
            return None
        n = _epoch_samples(fs)
        return stream[:, index * n:(index + 1) * n]

    return EpochView(
        index=index,
        exg=cut(recording.exg, recording.fs_exg),
        ppg=cut(recording.ppg, recording.fs_ppg),
        imu=cut(recording.imu, recording.fs_imu),
        fs_exg=recording.fs_exg,
        fs_ppg=recording.fs_ppg,
        fs_imu=recording.fs_imu,
        recording=recording,
    )


def slice_epochs(recording: SessionRecording) -> list[EpochView]:
    """Cut a recording into contiguous 30 s views; a trailing partial epoch is dropped."""
    for name in ("exg", "ppg", "imu"):
        stream = getattr(recording, name)
        if stream is not None and stream.shape[1] == 0:
            raise EmptyRecording(f"{name} stream has no samples")
    return [epoch_view(recording, i) for i in range(recording.n_epochs)]


def rater_agreement(votes: np.ndarray) -> np.ndarray:
    """Mean pairwise epoch agreement of each rater with every other rater."""
    k, n = votes.shape
    agree = np.zeros(k)
    if n == 0:
        return agree
    for i in range(k):
        for j in range(k):
            if i != j:
                agree[i] += np.mean(votes[i] == votes[j])
    return agree / (k - 1)


def consensus_hypnogram(hypnograms: Sequence[Hypnogram], agreements=None) -> Hypnogram:
    """Majority vote per epoch over three or more raters.

    A full tie goes to the rater with the highest mean pairwise epoch
    agreement over the whole session (computed over all epochs unless
    ``agreements`` is given); remaining ties go to the lowest rater index.
    """
    if len(hypnograms) < 3:
        raise TooFewRaters(f"need at least 3 raters, got {len(hypnograms)}")
    n = len(hypnograms[0])
    if any(len(h) != n for h in hypnograms):
        raise LengthMismatch("hypnograms differ in length")
    votes = np.stack([h.codes() for h in hypnograms])
    if np.any(votes == SleepStage.UNSCORED):
        raise ValidationError("consensus inputs must be fully scored")

    if agreements is None:
        agree = rater_agreement(votes)
    else:
        agree = np.asarray(agreements, dtype=float)
        if agree.shape != (votes.shape[0],):
            raise LengthMismatch("one agreement value per rater required")
    rater_rank = np.argsort(-agree, kind="stable")

    out = np.empty(n, dtype=np.int64)
    for e in range(n):
        counts = np.bincount(votes[:, e], minlength=4)
        top = counts.max()
        winners = np.flatnonzero(counts == top)
        if len(winners) == 1:
            out[e] = winners[0]
            continue
        for r in rater_rank:
            if votes[r, e] in winners:
                out[e] = votes[r, e]
                break
    return Hypnogram.from_codes(out)


def sol_from_hypnogram(h: Hypnogram, run_len: int = 2) -> int | None:
    """First epoch opening ``run_len`` consecutive scored sleep epochs, or None."""
    if run_len < 1:
        raise ValidationError("run_len must be >= 1")
    run = 0
    for i, s in enumerate(h.stages):
        if s in (SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM):
            run += 1
            if run == run_len:
                return i - run_len + 1
        else:
            run = 0
    return None
