"""Flat ``key = value`` configuration.

Blank lines and lines starting with ``#`` are ignored. Every key is
documented in :data:`KEYS`; unknown keys are an error. Environment variables
are never consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .closedloop import BanditConfig, ControllerConfig, StimTimeline
from .errors import ConfigError, SleepLoopError
from .features import DspConfig
from .referencing import ReferencingScheme


@dataclass(frozen=True)
class Config:
    fs_exg: float = 250.0
    fs_ppg: float = 50.0
    fs_imu: float = 50.0
    notch_q: float = 20.0
    eeg_lo: float = 0.5
    eeg_hi: float = 35.0
    eog_lo: float = 0.3
    eog_hi: float = 10.0
    emg_lo: float = 20.0
    emg_hi: float = 45.0
    quality_tree: str = ""         # path to a JSON tree; empty = built-in
    scheme: str = "dynamic"
    scorer: str = "baseline"
    filter_mode: str = "causal"
    smoothing_params: str = ""     # path; empty = built-in defaults
    alpha: float = 0.2
    theta: float = 0.5
    t1: float = 300.0
    t2: float = 720.0
    fade_s: float = 30.0
    hard_stop_s: float = 3000.0
    run_len: int = 2
    mu0: float = 0.0
    sigma0_2: float = 100.0
    sigma_obs2: float = 1.0
    contents: str = "c0,c1,c2"
    seed: int = 0

    def __post_init__(self):
        try:
            self.dsp()
            self.controller()
            self.bandit()
            ReferencingScheme.parse(self.scheme)
        except ConfigError:
            raise
        except SleepLoopError as e:
            raise ConfigError(str(e)) from None
        if self.filter_mode not in ("causal", "zero-phase"):
            raise ConfigError(f"filter_mode must be causal or zero-phase, got {self.filter_mode!r}")
        if self.scorer != "baseline" and not self.scorer.startswith("pml:"):
            raise ConfigError(f"scorer must be baseline or pml:<path>, got {self.scorer!r}")
        if self.sigma_obs2 <= 0 or self.sigma0_2 <= 0:
            raise ConfigError("variances must be positive")
        if len(self.content_ids()) < 2:
            raise ConfigError("need at least two contents")

    def content_ids(self) -> list[str]:
        return [c.strip() for c in self.contents.split(",") if c.strip()]

    def dsp(self) -> DspConfig:
        return DspConfig(fs=self.fs_exg, notch_q=self.notch_q, eeg_band=(self.eeg_lo, self.eeg_hi),
                         eog_band=(self.eog_lo, self.eog_hi), emg_band=(self.emg_lo, self.emg_hi))

    def controller(self) -> ControllerConfig:
        return ControllerConfig(StimTimeline(self.t1, self.t2, self.fade_s, self.hard_stop_s),
                                alpha=self.alpha, theta=self.theta, run_len=self.run_len)

    def bandit(self) -> BanditConfig:
        ids = self.content_ids()
        return BanditConfig(len(ids), tuple([0.0] * len(ids)), self.mu0, self.sigma0_2, self.sigma_obs2)


KEYS = {f.name: f.type for f in fields(Config)}
_CASTS = {"float": float, "int": int, "str": str}


def parse_kv(text: str, allowed=None, repeatable=()) -> dict:
    """Parse ``key = value`` lines; repeatable keys collect into lists."""
    out: dict = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key = value")
        key, _, value = (p.strip() for p in line.partition("="))
        if allowed is not None and key not in allowed:
            raise ConfigError(f"line {i}: unknown key {key!r}")
        if key in repeatable:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"line {i}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def config_from_dict(values: dict) -> Config:
    kw = {}
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        try:
            kw[key] = _CASTS[KEYS[key]](value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {KEYS[key]}") from None
    return Config(**kw)


def loads_config(text: str) -> Config:
    return config_from_dict(parse_kv(text, allowed=KEYS))


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return loads_config(text)


def dumps_config(cfg: Config) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
