"""Real-time sleep-onset controller and the content recommender.

PoAs (probability of being asleep) is tracked as an exponentially smoothed
non-wake probability mass, in percent. The controller plays a guided
breathing voice (GBV), then a relaxation therapy voice (RTV), over
background music (BM), stops shortly after sleep onset is detected and never
runs past the hard stop. Background music can be switched automatically
early in the session when PoAs is not rising, and content is chosen by
Thompson sampling over per-user Normal value models.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import SleepStage, StageDistribution
from .errors import FormatError, TooFewContents, ValidationError

LAYERS = ("GBV", "RTV", "BM")
PHASES = ("GBV", "RTV", "BM", "Off")


# ---------------------------------------------------------------- PoAs


@dataclass(frozen=True)
class PoAsState:
    value: float = 0.0
    history: tuple[tuple[float, float], ...] = ()
    alpha: float = 0.2

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValidationError("PoAs smoothing factor must lie in (0, 1]")
        if not 0 <= self.value <= 100:
            raise ValidationError("PoAs value must lie in [0, 100]")


def update_poas(d: StageDistribution, s: PoAsState, t: float | None = None) -> PoAsState:
    """One exponential-smoothing step toward 100 x the non-wake mass."""
    raw = 100.0 * d.sleep_mass
    value = float(np.clip(s.alpha * raw + (1 - s.alpha) * s.value, 0.0, 100.0))
    if t is None:
        t = s.history[-1][0] + 30.0 if s.history else 30.0
    if s.history and t <= s.history[-1][0]:
        raise ValidationError("PoAs history must be strictly time ordered")
    return PoAsState(value, s.history + ((float(t), value),), s.alpha)


def poas_slope(history: Sequence[tuple[float, float]], t_from: float, t_to: float,
               exclude: Sequence[tuple[float, float]] = ()) -> float | None:
    """Least-squares PoAs slope (%/min) over points in [t_from, t_to].

    Points inside any ``exclude`` interval are dropped. None when fewer than
    two points remain.
    """
    pts = [(t, v) for t, v in history
           if t_from <= t <= t_to and not any(a <= t <= b for a, b in exclude)]
    if len(pts) < 2:
        return None
    t = np.array([p[0] for p in pts]) / 60.0
    v = np.array([p[1] for p in pts])
    if np.ptp(t) == 0:
        return None
    return float(np.polyfit(t, v, 1)[0])


class SolDetector:
    """Streaming sleep-onset detector; fires once per session."""

    def __init__(self, run_len: int = 2):
        if run_len < 1:
            raise ValidationError("run_len must be >= 1")
        self.run_len = run_len
        self._run = 0
        self._i = -1
        self.onset: int | None = None

    def push(self, stage: SleepStage) -> int | None:
        """Feed the next epoch; returns the onset epoch on the call that detects it."""
        self._i += 1
        if self.onset is not None:
            return None
        if SleepStage(stage) in (SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM):
            self._run += 1
        else:
            self._run = 0
        if self._run >= self.run_len:
            self.onset = self._i - self.run_len + 1
            return self.onset
        return None


def detect_sol(stages, run_len: int = 2) -> int | None:
    det = SolDetector(run_len)
    for s in stages:
        hit = det.push(s)
        if hit is not None:
            return hit
    return None


# ---------------------------------------------------------------- bandit


@dataclass(frozen=True)
class ArmPosterior:
    mu: float = 0.0
    sigma2: float = 100.0
    n: int = 0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValidationError("posterior variance must be positive")


def acr_update(post: ArmPosterior, reward: float, sigma_obs2: float = 1.0) -> ArmPosterior:
    """Conjugate Normal update with known observation variance."""
    if not np.isfinite(reward):
        raise ValidationError("reward must be finite")
    prec = 1.0 / post.sigma2 + 1.0 / sigma_obs2
    mu = (post.mu / post.sigma2 + reward / sigma_obs2) / prec
    return ArmPosterior(float(mu), float(1.0 / prec), post.n + 1)


def acr_select(posteriors: Mapping[str, ArmPosterior], rng: np.random.Generator,
               exclude: str | None = None) -> str:
    """Thompson sampling: one draw per eligible arm (sorted by id), argmax wins."""
    if len(posteriors) < 2:
        raise TooFewContents("content selection needs at least two contents")
    ids = [c for c in sorted(posteriors) if c != exclude]
    draws = [rng.normal(posteriors[c].mu, np.sqrt(posteriors[c].sigma2)) for c in ids]
    return ids[int(np.argmax(draws))]


def dumps_posteriors(posteriors: Mapping[str, ArmPosterior]) -> str:
    buf = io.StringIO()
    buf.write("# schema=1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["content_id", "mu", "sigma2", "n"])
    for cid in sorted(posteriors):
        p = posteriors[cid]
        w.writerow([cid, repr(p.mu), repr(p.sigma2), p.n])
    return buf.getvalue()


def loads_posteriors(text: str) -> dict[str, ArmPosterior]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    if not lines or lines[0] != "content_id,mu,sigma2,n":
        raise FormatError("posterior table needs header content_id,mu,sigma2,n", line=1, column=1)
    out = {}
    for i, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != 4:
            raise FormatError("expected 4 columns", line=i, column=len(row))
        try:
            out[row[0]] = ArmPosterior(float(row[1]), float(row[2]), int(row[3]))
        except ValueError as e:
            raise FormatError(str(e), line=i, column=2) from None
    return out


def save_posteriors(path, posteriors):
    Path(path).write_text(dumps_posteriors(posteriors))


def load_posteriors(path) -> dict[str, ArmPosterior]:
    return loads_posteriors(Path(path).read_text())


# ---------------------------------------------------------------- controller


@dataclass(frozen=True)
class StimTimeline:
    t1: float = 300.0
    t2: float = 720.0
    fade_s: float = 30.0
    hard_stop_s: float = 3000.0
    t0: float = 0.0

    def __post_init__(self):
        if not (self.t0 == 0 and 0 < self.t1 < self.t2 < self.hard_stop_s):
            raise ValidationError("timeline needs 0 = t0 < t1 < t2 < hard_stop_s")
        if not 0 <= self.fade_s <= self.t2 - self.t1:
            raise ValidationError("fade_s must fit between t1 and t2")

    def fade_windows(self) -> tuple[tuple[float, float], ...]:
        f = self.fade_s
        return ((0.0, f), (self.t1, self.t1 + f), (self.t2, self.t2 + f))


@dataclass(frozen=True)
class ControllerConfig:
    timeline: StimTimeline = field(default_factory=StimTimeline)
    alpha: float = 0.2
    theta: float = 0.5            # %/min
    run_len: int = 2
    acs_window_s: float = 300.0
    acs_close_s: float = 1200.0
    acs_min_gap_s: float = 300.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValidationError("alpha must lie in (0, 1]")
        if self.run_len < 1:
            raise ValidationError("run_len must be >= 1")


@dataclass(frozen=True)
class Action:
    t: float
    action: str          # start | volume | switch | stop
    layer: str = ""
    volume: float | None = None
    content_id: str = ""


@dataclass(frozen=True)
class ControllerState:
    phase: str = "GBV"
    volumes: tuple[float, float, float] = (0.0, 0.0, 0.0)
    current_content: str = ""
    last_switch_t: float | None = None
    sol_detected: int | None = None
    sol_time: float | None = None
    stop_time: float | None = None
    clock: float = -1.0
    poas: PoAsState = field(default_factory=PoAsState)
    epochs_seen: int = 0
    run: int = 0
    plays: tuple[tuple[str, float, float | None], ...] = ()  # (content, start, end)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValidationError(f"unknown phase {self.phase!r}")
        if any(not 0 <= v <= 1 for v in self.volumes):
            raise ValidationError("volumes must lie in [0, 1]")


def _ramp(t, start, dur, v0, v1):
    if dur <= 0:
        return v1 if t >= start else v0
    w = min(max((t - start) / dur, 0.0), 1.0)
    return v0 + (v1 - v0) * w


def scheduled_volumes(t: float, tl: StimTimeline, sol_time: float | None = None):
    """(GBV, RTV, BM) volumes at clock ``t`` before any stop."""
    f = tl.fade_s
    gbv = _ramp(t, tl.t1, f, 1.0, 0.0)
    rtv = _ramp(t, tl.t1, f, 0.0, 1.0) if t < tl.t2 else _ramp(t, tl.t2, f, 1.0, 0.0)
    bm = _ramp(t, 0.0, f, 0.0, 1.0)
    if sol_time is not None and t >= sol_time:
        # everything that is still audible fades out together
        k = 1.0 - _ramp(t, sol_time, f, 0.0, 1.0)
        g0, r0, b0 = scheduled_volumes(sol_time, tl)
        gbv, rtv, bm = g0 * k, r0 * k, b0 * k
    return gbv, rtv, bm


def _phase_at(t, tl: StimTimeline) -> str:
    if t < tl.t1:
        return "GBV"
    if t < tl.t2:
        return "RTV"
    return "BM"


def acs_should_switch(history: Sequence[tuple[float, float]], clock: float, state: ControllerState,
                      cfg: ControllerConfig = ControllerConfig()) -> bool:
    """Switch music when PoAs is not rising fast enough early in the session."""
    if clock >= cfg.acs_close_s:
        return False
    if state.last_switch_t is not None and clock - state.last_switch_t < cfg.acs_min_gap_s:
        return False
    if not history or history[0][0] > clock - cfg.acs_window_s:
        return False
    slope = poas_slope(history, clock - cfg.acs_window_s, clock)
    return slope is not None and slope < cfg.theta


def initial_state(content_id: str = "") -> ControllerState:
    return ControllerState(current_content=content_id, plays=((content_id, 0.0, None),))


def controller_step(state: ControllerState, result, clock: float,
                    cfg: ControllerConfig = ControllerConfig(),
                    choose_content=None) -> tuple[ControllerState, list[Action]]:
    """Advance to ``clock``, optionally consuming one epoch result.

    ``result`` is None on pure timer ticks, otherwise a ``(stage,
    distribution)`` pair (distribution may be None for unscored epochs).
    ``choose_content(exclude)`` returns the next content id when automatic
    content switching fires.
    """
    if clock < state.clock:
        raise ValidationError("controller clock must be monotone")
    tl = cfg.timeline
    actions: list[Action] = []
    if state.phase == "Off":
        return replace(state, clock=clock), actions
    if state.clock < 0:
        actions.append(Action(clock, "start", "", None, state.current_content))

    st = replace(state, clock=clock)
    if result is not None:
        stage, dist = result
        stage = SleepStage(stage)
        poas = st.poas
        if dist is not None:
            poas = update_poas(dist, replace(poas, alpha=cfg.alpha), clock)
        run = st.run + 1 if stage in (SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM) else 0
        st = replace(st, poas=poas, run=run, epochs_seen=st.epochs_seen + 1)
        if st.sol_detected is None and run >= cfg.run_len:
            st = replace(st, sol_detected=st.epochs_seen - cfg.run_len, sol_time=clock)
        elif (st.sol_time is None and choose_content is not None
              and acs_should_switch(poas.history, clock, st, cfg)):
            new = choose_content(st.current_content)
            if new != st.current_content:
                plays = st.plays[:-1] + ((st.plays[-1][0], st.plays[-1][1], clock), (new, clock, None))
                st = replace(st, current_content=new, last_switch_t=clock, plays=plays)
                actions.append(Action(clock, "switch", "BM", None, new))

    stop_at = tl.hard_stop_s
    if st.sol_time is not None:
        stop_at = min(stop_at, st.sol_time + tl.fade_s)
    if clock >= stop_at:
        vols = (0.0, 0.0, 0.0)
        for layer, old in zip(LAYERS, state.volumes):
            if old != 0.0:
                actions.append(Action(stop_at, "volume", layer, 0.0, st.current_content))
        actions.append(Action(stop_at, "stop", "", 0.0, st.current_content))
        plays = st.plays[:-1] + ((st.plays[-1][0], st.plays[-1][1], stop_at),)
        return replace(st, phase="Off", volumes=vols, stop_time=stop_at, plays=plays), actions

    vols = tuple(float(round(v, 9)) for v in scheduled_volumes(clock, tl, st.sol_time))
    for layer, old, new in zip(LAYERS, state.volumes, vols):
        if new != old:
            actions.append(Action(clock, "volume", layer, new, st.current_content))
    return replace(st, phase=_phase_at(clock, tl), volumes=vols), actions


def session_rewards(state: ControllerState, cfg: ControllerConfig = ControllerConfig()) -> dict[str, float]:
    """PoAs slope (%/min) per content over the time it played, fades excluded."""
    tl = cfg.timeline
    exclude = list(tl.fade_windows())
    if state.sol_time is not None:
        exclude.append((state.sol_time, state.sol_time + tl.fade_s))
    out: dict[str, list[float]] = {}
    for cid, a, b in state.plays:
        end = b if b is not None else state.clock
        s = poas_slope(state.poas.history, a, end, exclude)
        if s is not None and cid:
            out.setdefault(cid, []).append(s)
    return {c: float(np.mean(v)) for c, v in out.items()}


ACTION_HEADER = "t,action,layer,volume,content_id"


def dumps_actions(actions: Sequence[Action]) -> str:
    lines = ["# schema=1", ACTION_HEADER]
    for a in actions:
        vol = "" if a.volume is None else repr(float(a.volume))
        lines.append(f"{a.t:.6f},{a.action},{a.layer},{vol},{a.content_id}")
    return "\n".join(lines) + "\n"


def loads_actions(text: str) -> list[Action]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    if not lines or lines[0] != ACTION_HEADER:
        raise FormatError(f"action log needs header {ACTION_HEADER}", line=1, column=1)
    out = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 5:
            raise FormatError("expected 5 columns", line=i, column=len(parts))
        try:
            out.append(Action(float(parts[0]), parts[1], parts[2],
                              None if parts[3] == "" else float(parts[3]), parts[4]))
        except ValueError as e:
            raise FormatError(str(e), line=i, column=1) from None
    return out


# ---------------------------------------------------------------- drivers


def run_controller(epoch_results, cfg: ControllerConfig = ControllerConfig(), content: str = "",
                   choose_content=None, tick_s: float = 1.0, epoch_s: float = 30.0):
    """Drive the controller with 1 s ticks and one result per ``epoch_s``.

    ``epoch_results`` yields ``(stage, distribution)`` pairs; epoch k is
    delivered at clock (k + 1) * epoch_s. Runs until Off or input runs out;
    missing epochs after the input ends are treated as pure ticks.
    """
    st = initial_state(content)
    actions: list[Action] = []
    results = list(epoch_results)
    n_ticks = int(round(cfg.timeline.hard_stop_s / tick_s))
    per_epoch = int(round(epoch_s / tick_s))
    st, acts = controller_step(st, None, 0.0, cfg, choose_content)
    actions += acts
    for k in range(1, n_ticks + 1):
        clock = k * tick_s
        res = None
        if k % per_epoch == 0 and k // per_epoch - 1 < len(results):
            res = results[k // per_epoch - 1]
        st, acts = controller_step(st, res, clock, cfg, choose_content)
        actions += acts
        if st.phase == "Off":
            break
    return st, actions


@dataclass(frozen=True)
class BanditConfig:
    n_contents: int = 3
    true_means: tuple[float, ...] = (2.0, 0.5, 0.5)
    mu0: float = 0.0
    sigma0_2: float = 100.0
    sigma_obs2: float = 1.0


def bandit_simulation(n_sessions: int = 500, seed: int = 0, cfg: BanditConfig = BanditConfig()):
    """Synthetic user study: one selection and one Normal reward per session.

    Returns the chosen content index per session and the final posteriors.
    """
    if len(cfg.true_means) != cfg.n_contents:
        raise ValidationError("need one true mean per content")
    ids = [f"c{i}" for i in range(cfg.n_contents)]
    post = {c: ArmPosterior(cfg.mu0, cfg.sigma0_2, 0) for c in ids}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    obs_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    choices = []
    for _ in range(n_sessions):
        c = acr_select(post, rng)
        i = ids.index(c)
        r = obs_rng.normal(cfg.true_means[i], np.sqrt(cfg.sigma_obs2))
        post[c] = acr_update(post[c], r, cfg.sigma_obs2)
        choices.append(i)
    return np.array(choices), post
