"""Agreement and scoring statistics, plus the gap-ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EPOCH_S, Hypnogram, SleepStage, sol_from_hypnogram
from .errors import (
    DegenerateMarginals, EmptyMatrix, GapLongerThanSession, LengthMismatch, NonPositiveValue,
    TooShort, ZeroVariance,
)
from .smoothing import HmmParams, smooth

U = int(SleepStage.UNSCORED)


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # truth rows x predicted columns, (W, L, D, R)
    unscored_pred_count: int = 0
    unscored_truth_count: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: Hypnogram, truth: Hypnogram) -> ConfusionMatrix:
    p, t = pred.codes(), truth.codes()
    if len(p) != len(t):
        raise LengthMismatch(f"pred has {len(p)} epochs, truth {len(t)}")
    both = (p != U) & (t != U)
    counts = np.zeros((4, 4), dtype=np.int64)
    np.add.at(counts, (t[both], p[both]), 1)
    return ConfusionMatrix(counts, int(np.sum(p == U)), int(np.sum(t == U)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    undefined: dict = field(default_factory=dict)  # metric -> tuple of class indices
    macro_f1: float = 0.0           # over classes present in truth
    macro_f1_all: float = 0.0       # over all four classes


def _safe_div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(b > 0, a / np.where(b > 0, b, 1), 0.0)
    return out, tuple(int(i) for i in np.flatnonzero(b == 0))


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy and per-class precision/recall/F1; empty denominators give 0 and a flag."""
    c = np.asarray(cm.counts, dtype=float)
    n = c.sum()
    if n == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    tp = np.diag(c)
    prec, bad_p = _safe_div(tp, c.sum(axis=0))
    rec, bad_r = _safe_div(tp, c.sum(axis=1))
    f1, bad_f = _safe_div(2 * prec * rec, prec + rec)
    present = c.sum(axis=1) > 0
    return Metrics(
        accuracy=float(tp.sum() / n), precision=prec, recall=rec, f1=f1,
        undefined={"precision": bad_p, "recall": bad_r, "f1": bad_f},
        macro_f1=float(f1[present].mean()), macro_f1_all=float(f1.mean()),
    )


def cohens_kappa(cm: ConfusionMatrix) -> float:
    c = np.asarray(cm.counts, dtype=float)
    n = c.sum()
    if n == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    p_o = np.trace(c) / n
    p_e = float((c.sum(axis=0) / n) @ (c.sum(axis=1) / n))
    if abs(1.0 - p_e) < 1e-15:
        raise DegenerateMarginals("expected agreement is 1; kappa undefined")
    return float((p_o - p_e) / (1.0 - p_e))


def kappa_from_agreement(p_o: float, p_e: float) -> float:
    if abs(1.0 - p_e) < 1e-15:
        raise DegenerateMarginals("expected agreement is 1; kappa undefined")
    return (p_o - p_e) / (1.0 - p_e)


@dataclass(frozen=True)
class SleepMacros:
    tib_min: float
    sol_min: float
    tst_min: float
    se_pct: float
    ls_min: float
    ls_pct_tib: float
    ds_min: float
    ds_pct_tib: float
    rem_min: float
    rem_pct_tib: float
    no_sleep: bool = False


def sleep_macros(h: Hypnogram, tib_min: float | None = None, run_len: int = 2) -> SleepMacros:
    """Table-style sleep variables. A night with no sleep onset reports SOL = TIB."""
    codes = h.codes()
    ep_min = h.epoch_duration_s / 60.0
    tib = len(codes) * ep_min if tib_min is None else float(tib_min)
    if tib < len(codes) * ep_min - 1e-9:
        raise TooShort("hypnogram is longer than the stated time in bed")
    mins = {s: int(np.sum(codes == int(s))) * ep_min for s in (SleepStage.LIGHT, SleepStage.DEEP, SleepStage.REM)}
    tst = sum(mins.values())
    onset = sol_from_hypnogram(h, run_len)
    sol = tib if onset is None else onset * ep_min
    pct = (lambda m: 100.0 * m / tib) if tib > 0 else (lambda m: 0.0)
    return SleepMacros(
        tib_min=tib, sol_min=sol, tst_min=tst, se_pct=pct(tst),
        ls_min=mins[SleepStage.LIGHT], ls_pct_tib=pct(mins[SleepStage.LIGHT]),
        ds_min=mins[SleepStage.DEEP], ds_pct_tib=pct(mins[SleepStage.DEEP]),
        rem_min=mins[SleepStage.REM], rem_pct_tib=pct(mins[SleepStage.REM]),
        no_sleep=onset is None,
    )


@dataclass(frozen=True)
class BlandAltman:
    mean_ratio: float
    lower: float
    upper: float
    means: np.ndarray
    ratios: np.ndarray


def bland_altman(a, b) -> BlandAltman:
    """Ratio form: per-pair mean (a+b)/2 against ratio a/b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch("paired series differ in length")
    if len(a) < 2:
        raise TooShort("Bland-Altman needs at least two pairs")
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveValue("ratio Bland-Altman needs positive values")
    r = a / b
    m = float(r.mean())
    sd = float(r.std(ddof=1))
    return BlandAltman(m, m - 1.96 * sd, m + 1.96 * sd, (a + b) / 2, r)


@dataclass(frozen=True)
class BandAgreement:
    mae: float
    r: float


def rsp_agreement(series_a: dict, series_b: dict) -> dict[str, BandAgreement]:
    """MAE and Pearson r per band between two dicts of equal-length series."""
    out = {}
    for band in series_a:
        a = np.asarray(series_a[band], dtype=float)
        b = np.asarray(series_b[band], dtype=float)
        if a.shape != b.shape:
            raise LengthMismatch(f"band {band}: series differ in length")
        if len(a) < 2:
            raise TooShort("agreement needs at least two values")
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            raise ZeroVariance(f"band {band}: constant series, Pearson undefined")
        r = float(np.corrcoef(a, b)[0, 1])
        out[band] = BandAgreement(float(np.mean(np.abs(a - b))), float(np.clip(r, -1.0, 1.0)))
    return out


def study_accuracy(pairs: Sequence[tuple[Hypnogram, Hypnogram]]) -> tuple[float, float]:
    """(mean of per-study accuracies, epoch-weighted pooled accuracy)."""
    per, hits, total = [], 0, 0
    for pred, truth in pairs:
        cm = confusion(pred, truth)
        per.append(metrics(cm).accuracy)
        hits += int(np.trace(cm.counts))
        total += cm.total
    if total == 0:
        raise EmptyMatrix("no scored epochs")
    return float(np.mean(per)), hits / total


# ---------------------------------------------------------------- gap ablation


@dataclass(frozen=True)
class AblationSession:
    truth: Hypnogram
    pml: Hypnogram                 # per-epoch ExG predictions
    sml: Hypnogram                 # per-epoch fallback predictions (U where unavailable)


DEFAULT_GAPS = (0, 10, 40, 80, 120, 150, 160, 200, 240, 320, 400, 480)


@dataclass(frozen=True)
class AblationResult:
    gaps: tuple[int, ...]
    sml_smooth: np.ndarray   # mean accuracy per gap
    smooth_only: np.ndarray
    spans: tuple[tuple[int, int, int], ...]  # (gap, session index, start)


def _accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    ok = truth != U
    return float(np.mean(pred[ok] == truth[ok]))


def gap_ablation(sessions: Sequence[AblationSession], params: HmmParams,
                 gaps: Sequence[int] = DEFAULT_GAPS, trials: int = 50, seed: int = 0) -> AblationResult:
    """Blank one random contiguous span per trial and recover it two ways.

    ``smooth-only`` leaves the span Unscored before smoothing;
    ``SML+smooth`` substitutes the fallback predictions inside the span
    first. Each trial picks a session and a start uniformly.
    """
    if not sessions:
        raise EmptyMatrix("gap ablation needs sessions")
    min_len = min(len(s.truth) for s in sessions)
    if max(gaps) >= min_len:
        raise GapLongerThanSession(f"gap {max(gaps)} is not shorter than session length {min_len}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    cache: dict[tuple, float] = {}
    a_sml, a_only, spans = [], [], []
    for g in gaps:
        acc_s, acc_o = [], []
        for _ in range(trials):
            k = int(rng.integers(len(sessions)))
            s = sessions[k]
            n = len(s.truth)
            start = int(rng.integers(0, n - g + 1))
            spans.append((int(g), k, start))
            truth = s.truth.codes()
            base = s.pml.codes().copy()
            if g == 0:
                key = ("base", k)
                if key not in cache:
                    cache[key] = _accuracy(smooth(s.pml, params).codes(), truth)
                acc_s.append(cache[key])
                acc_o.append(cache[key])
                continue
            blank = base.copy()
            blank[start:start + g] = U
            only = smooth(Hypnogram.from_codes(blank), params).codes()
            fill = blank.copy()
            fill[start:start + g] = s.sml.codes()[start:start + g]
            with_sml = smooth(Hypnogram.from_codes(fill), params).codes()
            acc_o.append(_accuracy(only, truth))
            acc_s.append(_accuracy(with_sml, truth))
        a_sml.append(np.mean(acc_s))
        a_only.append(np.mean(acc_o))
    return AblationResult(tuple(int(g) for g in gaps), np.array(a_sml), np.array(a_only), tuple(spans))


def report_csv(cm: ConfusionMatrix, m: Metrics, kappa: float) -> str:
    lines = ["# schema=1", "metric,class,value", f"accuracy,all,{m.accuracy!r}", f"kappa,all,{kappa!r}",
             f"macro_f1,present,{m.macro_f1!r}", f"macro_f1,all,{m.macro_f1_all!r}"]
    for i, s in enumerate("WLDR"):
        lines += [f"precision,{s},{float(m.precision[i])!r}", f"recall,{s},{float(m.recall[i])!r}",
                  f"f1,{s},{float(m.f1[i])!r}"]
    for i, s in enumerate("WLDR"):
        for j, p in enumerate("WLDR"):
            lines.append(f"confusion,{s}>{p},{int(cm.counts[i, j])}")
    lines.append(f"unscored,pred,{cm.unscored_pred_count}")
    lines.append(f"unscored,truth,{cm.unscored_truth_count}")
    return "\n".join(lines) + "\n"


def report_text(cm: ConfusionMatrix, m: Metrics, kappa: float) -> str:
    rows = [f"accuracy {m.accuracy:.4f}  kappa {kappa:.4f}  macro F1 {m.macro_f1:.4f}",
            "        " + "".join(f"{p:>7s}" for p in "WLDR") + "   prec    rec     f1"]
    for i, s in enumerate("WLDR"):
        rows.append(f"  {s}     " + "".join(f"{int(v):7d}" for v in cm.counts[i])
                    + f" {m.precision[i]:6.3f} {m.recall[i]:6.3f} {m.f1[i]:6.3f}")
    return "\n".join(rows) + "\n"
