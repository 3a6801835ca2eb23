"""Offline hypnogram completion: rule-based fill, then Viterbi re-decoding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Hypnogram, SleepStage
from .errors import AllUnscored, EmptyCorpus, FormatError, ValidationError

STATES = ("W", "L", "D", "R")
SYMBOLS = ("W", "L", "D", "R", "U")
W, L, D, R, U = range(5)


def _check_stochastic(name, m, shape):
    m = np.asarray(m, dtype=float)
    if m.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        raise ValidationError(f"{name} entries must be finite and strictly positive")
    if m.ndim == 1:
        if abs(m.sum() - 1) > 1e-9:
            raise ValidationError(f"{name} must sum to 1")
    elif np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
        raise ValidationError(f"{name} rows must sum to 1")
    m = m.copy()
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class HmmParams:
    """Stage transitions (4x4) and label emissions (4x5, last column Unscored).

    ``initial`` is optional; Viterbi uses a uniform start when it is None.
    """

    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "transition", _check_stochastic("transition", self.transition, (4, 4)))
        object.__setattr__(self, "emission", _check_stochastic("emission", self.emission, (4, 5)))
        if self.initial is not None:
            object.__setattr__(self, "initial", _check_stochastic("initial", self.initial, (4,)))

    def dumps(self) -> str:
        lines = ["# schema=1", "transition " + " ".join(STATES)]
        lines += [f"{s} " + " ".join(repr(float(v)) for v in row) for s, row in zip(STATES, self.transition)]
        lines.append("emission " + " ".join(SYMBOLS))
        lines += [f"{s} " + " ".join(repr(float(v)) for v in row) for s, row in zip(STATES, self.emission)]
        if self.initial is not None:
            lines.append("initial " + " ".join(STATES))
            lines.append("p " + " ".join(repr(float(v)) for v in self.initial))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "HmmParams":
        rows = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())
                if ln.strip() and not ln.startswith("#")]
        blocks: dict[str, list[list[float]]] = {}
        current = None
        expect = {"transition": (STATES, STATES), "emission": (SYMBOLS, STATES), "initial": (STATES, ("p",))}
        for lineno, tok in rows:
            if tok[0] in expect:
                current = tok[0]
                if tuple(tok[1:]) != expect[current][0]:
                    raise FormatError(f"bad {current} header", line=lineno, column=1)
                blocks[current] = []
                continue
            if current is None:
                raise FormatError("matrix row before any header", line=lineno, column=1)
            want_label = expect[current][1][len(blocks[current])] if len(blocks[current]) < len(expect[current][1]) else None
            if tok[0] != want_label:
                raise FormatError(f"unexpected row label {tok[0]!r}", line=lineno, column=1)
            try:
                vals = [float(v) for v in tok[1:]]
            except ValueError:
                raise FormatError("non-numeric matrix entry", line=lineno, column=2) from None
            if len(vals) != len(expect[current][0]):
                raise FormatError("wrong number of columns", line=lineno, column=len(tok))
            blocks[current].append(vals)
        for name in ("transition", "emission"):
            if name not in blocks or len(blocks[name]) != 4:
                raise FormatError(f"missing or incomplete {name} block", line=len(text.splitlines()), column=1)
        init = np.array(blocks["initial"][0]) if blocks.get("initial") else None
        return cls(np.array(blocks["transition"]), np.array(blocks["emission"]), init)

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "HmmParams":
        return cls.loads(Path(path).read_text())


def estimate_hmm(corpus: Sequence[tuple[Hypnogram, Hypnogram]], alpha: float = 1.0) -> HmmParams:
    """Add-``alpha`` smoothed counts from (truth, observed) hypnogram pairs.

    The initial vector comes from the truth stage at epoch 0.
    """
    if not corpus:
        raise EmptyCorpus("HMM estimation needs at least one session")
    trans = np.full((4, 4), alpha, dtype=float)
    emit = np.full((4, 5), alpha, dtype=float)
    init = np.full(4, alpha, dtype=float)
    for truth, obs in corpus:
        t = truth.codes()
        o = obs.codes()
        if len(t) != len(o):
            raise ValidationError("truth and observed hypnograms differ in length")
        if np.any(t == U):
            raise ValidationError("truth hypnograms must be fully scored")
        if len(t) == 0:
            continue
        np.add.at(trans, (t[:-1], t[1:]), 1)
        np.add.at(emit, (t, o), 1)
        init[t[0]] += 1
    return HmmParams(trans / trans.sum(axis=1, keepdims=True),
                     emit / emit.sum(axis=1, keepdims=True),
                     init / init.sum())


def default_params() -> HmmParams:
    """Sticky transitions and a 0.9-diagonal emission, for use without a corpus."""
    trans = np.array([
        [0.90, 0.08, 0.005, 0.015],
        [0.02, 0.92, 0.04, 0.02],
        [0.01, 0.07, 0.915, 0.005],
        [0.02, 0.05, 0.005, 0.925],
    ])
    emit = np.full((4, 5), 0.02)
    np.fill_diagonal(emit, 0.9)
    emit /= emit.sum(axis=1, keepdims=True)
    return HmmParams(trans, emit, np.array([0.85, 0.05, 0.05, 0.05]))


def rule_fill(h: Hypnogram) -> Hypnogram:
    """Replace every Unscored run using its scored neighbours.

    Same stage on both sides fills with that stage. Different stages split
    the run, first half left, second half right, with an odd middle epoch
    going left. Runs touching the session edge copy the nearest scored
    stage. A Wake/Deep junction inside a fill of two or more epochs gets a
    Light epoch in between.
    """
    x = h.codes().copy()
    scored = np.flatnonzero(x != U)
    if len(scored) == 0:
        raise AllUnscored("no scored epoch to fill from")
    n = len(x)
    i = 0
    while i < n:
        if x[i] != U:
            i += 1
            continue
        j = i
        while j < n and x[j] == U:
            j += 1
        left = x[i - 1] if i > 0 else None
        right = x[j] if j < n else None
        run = j - i
        if left is None or right is None:
            x[i:j] = right if left is None else left
        elif left == right:
            x[i:j] = left
        else:
            k = (run + 1) // 2
            x[i:i + k] = left
            x[i + k:j] = right
            if run >= 2 and {int(left), int(right)} == {W, D}:
                # junction epoch on the Deep side of the split becomes Light
                x[i + k if left == W else i + k - 1] = L
        i = j
    return Hypnogram.from_codes(x)


def viterbi(observed: Hypnogram, params: HmmParams) -> Hypnogram:
    """MAP stage path in log space; ties resolve to the lower stage index."""
    o = observed.codes()
    n = len(o)
    if n == 0:
        return Hypnogram(())
    log_a = np.log(params.transition)
    log_b = np.log(params.emission)
    init = params.initial if params.initial is not None else np.full(4, 0.25)
    delta = np.log(init) + log_b[:, o[0]]
    back = np.zeros((n, 4), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + log_a  # [from, to]
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(4)] + log_b[:, o[t]]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return Hypnogram.from_codes(path)


def path_log_prob(path, observed, params: HmmParams) -> float:
    """Joint log probability of a stage path and an observation sequence."""
    p = np.asarray(path, dtype=np.int64)
    o = np.asarray(observed, dtype=np.int64)
    init = params.initial if params.initial is not None else np.full(4, 0.25)
    lp = np.log(init[p[0]]) + np.log(params.emission[p, o]).sum()
    return float(lp + np.log(params.transition[p[:-1], p[1:]]).sum())


MAX_SMOOTH_ITER = 100


def smooth(h: Hypnogram, params: HmmParams) -> Hypnogram:
    """Rule fill, then Viterbi decoding repeated until the path stops changing.

    Iterating to a fixed point makes ``smooth`` idempotent; in practice it
    converges within a handful of passes.
    """
    x = viterbi(rule_fill(h), params)
    for _ in range(MAX_SMOOTH_ITER):
        y = viterbi(x, params)
        if y == x:
            return x
        x = y
    raise ValidationError("smoothing did not reach a fixed point")
