"""Text formats for recordings, hypnograms, provenance, vitals and truth logs.

Recording CSVs start with a ``# schema=1`` comment, then a bit-exact header.
Timestamps are written with six decimals; sample values use a fixed
precision that matches how the generator quantizes them (ExG 0.001 µV, PPG
integer counts, IMU 1e-5 g), so a write/read cycle is lossless.
Hypnogram files carry no header: one token per line.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import SCHEMA_VERSION
from .core import EXG_CHANNELS, IMU_AXES, PPG_CHANNELS, Hypnogram, SessionRecording, SleepStage
from .errors import ChannelMissing, FormatError, RateMismatch

SCHEMA_LINE = f"# schema={SCHEMA_VERSION}"
EXG_HEADER = ("t",) + EXG_CHANNELS
PPG_HEADER = ("t",) + PPG_CHANNELS
IMU_HEADER = ("t",) + IMU_AXES
VALUE_FMT = {"exg": "%.3f", "ppg": "%.0f", "imu": "%.5f"}
RECORDING_FILES = {"exg": "exg.csv", "ppg": "ppg.csv", "imu": "imu.csv"}
RATE_TOL = 0.01


def quantize(x, decimals: int) -> np.ndarray:
    """Round so that the value equals the double nearest its decimal text."""
    s = 10.0 ** decimals
    return np.rint(np.asarray(x, dtype=float) * s) / s


def write_stream(path, values: np.ndarray, fs: float, kind: str, start_time: float = 0.0):
    header = {"exg": EXG_HEADER, "ppg": PPG_HEADER, "imu": IMU_HEADER}[kind]
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    t = start_time + np.arange(n) / fs
    data = np.column_stack([t, values.T])
    fmt = ["%.6f"] + [VALUE_FMT[kind]] * values.shape[0]
    with open(path, "w", newline="\n") as fh:
        fh.write(SCHEMA_LINE + "\n" + ",".join(header) + "\n")
        np.savetxt(fh, data, fmt=fmt, delimiter=",")


def _locate_bad_cell(lines, first_data_line, ncol):
    for i, ln in enumerate(lines):
        cells = ln.split(",")
        if len(cells) != ncol:
            raise FormatError(f"expected {ncol} columns, found {len(cells)}",
                              line=first_data_line + i, column=min(len(cells), ncol) + 1)
        for j, c in enumerate(cells):
            try:
                v = float(c)
            except ValueError:
                raise FormatError(f"not a number: {c!r}", line=first_data_line + i, column=j + 1) from None
            if not np.isfinite(v):
                raise FormatError("non-finite value", line=first_data_line + i, column=j + 1)
    raise FormatError("unparseable data", line=first_data_line, column=1)


def read_stream(path, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps, values (channels, n)) with headers checked."""
    want = {"exg": EXG_HEADER, "ppg": PPG_HEADER, "imu": IMU_HEADER}[kind]
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        i += 1
    if i >= len(lines):
        raise FormatError(f"{path.name}: missing header", line=i + 1, column=1)
    header = tuple(lines[i].split(","))
    missing = [c for c in want if c not in header]
    if missing:
        raise ChannelMissing(f"{path.name}: missing columns {missing}")
    if header != want:
        raise FormatError(f"{path.name}: header must be {','.join(want)}", line=i + 1, column=1)
    body = lines[i + 1:]
    if not body:
        return np.zeros(0), np.zeros((len(want) - 1, 0))
    try:
        data = np.loadtxt(body, delimiter=",", dtype=float, ndmin=2)
    except ValueError:
        _locate_bad_cell(body, i + 2, len(want))
    if data.shape[1] != len(want):
        _locate_bad_cell(body, i + 2, len(want))
    if not np.all(np.isfinite(data)):
        _locate_bad_cell(body, i + 2, len(want))
    return data[:, 0], data[:, 1:].T.copy()


def infer_rate(t: np.ndarray) -> float | None:
    if len(t) < 2:
        return None
    span = t[-1] - t[0]
    return (len(t) - 1) / span if span > 0 else None


def check_rate(t: np.ndarray, expected: float, name: str):
    fs = infer_rate(t)
    if fs is None:
        return
    if abs(fs - expected) > RATE_TOL * expected:
        raise RateMismatch(f"{name}: timestamps imply {fs:.3f} Hz, configured {expected} Hz")
    if np.any(np.diff(t) <= 0):
        raise FormatError(f"{name}: timestamps must increase", line=None, column=1)


def save_recording(directory, rec: SessionRecording):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_stream(d / RECORDING_FILES["exg"], rec.exg, rec.fs_exg, "exg", rec.start_time)
    if rec.ppg is not None:
        write_stream(d / RECORDING_FILES["ppg"], rec.ppg, rec.fs_ppg, "ppg", rec.start_time)
    if rec.imu is not None:
        write_stream(d / RECORDING_FILES["imu"], rec.imu, rec.fs_imu, "imu", rec.start_time)


def load_recording(paths, fs_exg: float = 250.0, fs_ppg: float = 50.0, fs_imu: float = 50.0) -> SessionRecording:
    """Read a recording from a directory or a mapping ``{"exg": path, ...}``.

    Sampling rates are inferred from timestamps and must agree with the
    configured ones within 1%. PPG and IMU files are optional.
    """
    if isinstance(paths, (str, Path)):
        d = Path(paths)
        paths = {k: d / v for k, v in RECORDING_FILES.items() if (d / v).exists()}
    if "exg" not in paths:
        raise ChannelMissing("recording has no ExG file")
    t_exg, exg = read_stream(paths["exg"], "exg")
    check_rate(t_exg, fs_exg, "exg")
    streams = {"exg": exg}
    for kind, fs in (("ppg", fs_ppg), ("imu", fs_imu)):
        if kind in paths:
            t, v = read_stream(paths[kind], kind)
            check_rate(t, fs, kind)
            if len(t) and len(t_exg) and abs(t[0] - t_exg[0]) > 1.0 / fs:
                raise FormatError(f"{kind}: stream does not share the ExG time origin", line=3, column=1)
            streams[kind] = v
    start = float(t_exg[0]) if len(t_exg) else 0.0
    return SessionRecording(exg=streams["exg"], ppg=streams.get("ppg"), imu=streams.get("imu"),
                            fs_exg=fs_exg, fs_ppg=fs_ppg, fs_imu=fs_imu, start_time=start)


# ---------------------------------------------------------------- hypnograms


def dumps_hypnogram(h: Hypnogram) -> str:
    return "".join(t + "\n" for t in h.tokens())


def loads_hypnogram(text: str) -> Hypnogram:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    stages = []
    for i, ln in enumerate(lines, start=1):
        if len(ln) != 1 or ln not in "WLDRU":
            raise FormatError(f"bad hypnogram token {ln!r}", line=i, column=1)
        stages.append(SleepStage.from_token(ln))
    return Hypnogram(tuple(stages))


def save_hypnogram(path, h: Hypnogram):
    Path(path).write_text(dumps_hypnogram(h), newline="\n")


def load_hypnogram(path) -> Hypnogram:
    return loads_hypnogram(Path(path).read_text())


PROVENANCE_HEADER = "epoch,stage,provenance,p_W,p_L,p_D,p_R,derivations"


def provenance_path(hyp_path) -> Path:
    p = Path(hyp_path)
    return p.with_name(p.stem + ".provenance.csv")


def dumps_provenance(results) -> str:
    lines = [SCHEMA_LINE, PROVENANCE_HEADER]
    for r in results:
        p = ["", "", "", ""] if r.distribution is None else [repr(v) for v in r.distribution.p]
        lines.append(",".join([str(r.index), r.stage.token, r.provenance, *p, ";".join(r.derivations)]))
    return "\n".join(lines) + "\n"


VITALS_HEADER = "t_start,hr_bpm,hr_quality,rr_brpm,posture"


def dumps_vitals(rows: Sequence[tuple[float, float, bool, float, str]]) -> str:
    def num(v):
        return "" if v is None or not np.isfinite(v) else repr(float(v))

    lines = [SCHEMA_LINE, VITALS_HEADER]
    for t, hr, q, rr, pos in rows:
        lines.append(f"{t:.6f},{num(hr)},{int(bool(q))},{num(rr)},{pos or ''}")
    return "\n".join(lines) + "\n"


def dumps_truth(truth: dict) -> str:
    return json.dumps(truth, sort_keys=True, indent=1) + "\n"


def load_truth(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"truth file is not valid JSON: {e.msg}", line=e.lineno, column=e.colno) from None
