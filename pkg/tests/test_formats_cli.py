import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sleeploop import SCHEMA_VERSION
from sleeploop.cli import load_session_spec, main
from sleeploop.config import Config, dumps_config, load_config, loads_config
from sleeploop.core import Hypnogram, SessionRecording
from sleeploop.errors import ChannelMissing, ConfigError, FormatError, RateMismatch
from sleeploop.formats import (
    dumps_hypnogram, load_recording, loads_hypnogram, quantize, read_stream, save_recording,
    write_stream,
)
from sleeploop.synthgen import SessionSpec, gen_session


def test_config_defaults_round_trip(tmp_path):
    cfg = Config()
    assert loads_config(dumps_config(cfg)) == cfg
    (tmp_path / "c.cfg").write_text("# comment\n\nalpha = 0.3\nseed = 4\n")
    got = load_config(tmp_path / "c.cfg")
    assert got.alpha == 0.3 and got.seed == 4


@pytest.mark.parametrize("text", ["alpha = 2\n", "bogus = 1\n", "alpha = x\n", "seed = 1\nseed = 2\n",
                                  "t1 = 900\n", "scheme = mastoid\n", "contents = only\n", "novalue\n"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_config_ignores_environment(monkeypatch):
    monkeypatch.setenv("ALPHA", "0.9")
    monkeypatch.setenv("SLEEPLOOP_SEED", "5")
    assert loads_config("") == Config()


@pytest.fixture(scope="module")
def small():
    return gen_session(SessionSpec(seed=12, n_epochs=4, sol_epoch=None))


def test_recording_round_trip_exact(small, tmp_path):
    save_recording(tmp_path, small.recording)
    back = load_recording(tmp_path)
    for k in ("exg", "ppg", "imu"):
        assert np.array_equal(getattr(back, k), getattr(small.recording, k))
    head = (tmp_path / "exg.csv").read_text().splitlines()[:2]
    assert head == [f"# schema={SCHEMA_VERSION}", "t,FH_L,FH_R,OTE_L,OTE_R,BE_L,BE_R"]
    assert (tmp_path / "ppg.csv").read_text().splitlines()[1] == "t,ir,red,green"
    assert (tmp_path / "imu.csv").read_text().splitlines()[1] == "t,ax,ay,az"


@given(st.lists(st.floats(-500, 500, allow_nan=False), min_size=2, max_size=30))
def test_quantized_stream_round_trip(vals):
    import tempfile, pathlib
    x = quantize(np.tile(vals, (6, 1)), 3)
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "exg.csv"
        write_stream(p, x, 250.0, "exg", start_time=12.5)
        t, back = read_stream(p, "exg")
    assert np.array_equal(back, x)
    np.testing.assert_array_equal(t, np.round(12.5 + np.arange(len(vals)) / 250.0, 6))


def test_missing_column_and_rate_mismatch(small, tmp_path):
    save_recording(tmp_path, small.recording)
    lines = (tmp_path / "exg.csv").read_text().splitlines()
    cut = [",".join(ln.split(",")[:-1]) if not ln.startswith("#") else ln for ln in lines]
    (tmp_path / "exg.csv").write_text("\n".join(cut) + "\n")
    with pytest.raises(ChannelMissing):
        load_recording(tmp_path)
    d = tmp_path / "fast"
    d.mkdir()
    write_stream(d / "exg.csv", small.recording.exg[:, :3000], 300.0, "exg")
    with pytest.raises(RateMismatch):
        load_recording(d)


def test_format_error_carries_position(small, tmp_path):
    save_recording(tmp_path, small.recording)
    lines = (tmp_path / "ppg.csv").read_text().splitlines()
    lines[5] = lines[5].replace(",", ",abc", 1)
    (tmp_path / "ppg.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError) as ei:
        load_recording(tmp_path)
    assert ei.value.line == 6 and ei.value.column == 2


@given(st.text("WLDRU", max_size=50))
def test_hypnogram_text_round_trip(s):
    h = Hypnogram.from_tokens(s)
    assert loads_hypnogram(dumps_hypnogram(h)) == h


def test_hypnogram_bad_token():
    with pytest.raises(FormatError) as ei:
        loads_hypnogram("W\nL\nN2\n")
    assert ei.value.line == 3


# ---------------------------------------------------------------- CLI


def _spec(tmp_path, text):
    p = tmp_path / "spec.txt"
    p.write_text(text)
    return p


def test_session_spec_parsing(tmp_path):
    s = load_session_spec(_spec(tmp_path, "n_epochs = 30\nsol_epoch = none\nhr_bpm = 70\n"
                                          "artifact = flatline 30 60 FH_L,FH_R\n"
                                          "artifact = movement 90 120 imu 0.5\n"))
    assert s.n_epochs == 30 and s.sol_epoch is None and s.hr_bpm == 70.0
    assert [a.kind for a in s.artifacts] == ["flatline", "movement"] and s.artifacts[1].amplitude == 0.5
    with pytest.raises(ConfigError):
        load_session_spec(_spec(tmp_path, "artifact = burn 0 1 FH_L\n"))


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
    assert f"schema={SCHEMA_VERSION}" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert main(["stage", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x.hyp")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"] == "ChannelMissing"
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpha = 7\n")
    (tmp_path / "h.hyp").write_text("W\n")
    assert main(["smooth", "--in", str(tmp_path / "h.hyp"), "--out", str(tmp_path / "o.hyp"),
                 "--params", str(tmp_path / "missing.txt")]) == 2
    assert main(["closed-loop", str(tmp_path), "--config", str(bad), "--out", str(tmp_path / "a.csv")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 3 and err["error"] == "ConfigError"
    (tmp_path / "u.hyp").write_text("U\nU\n")
    assert main(["smooth", "--in", str(tmp_path / "u.hyp"), "--out", str(tmp_path / "o.hyp")]) == 3
    (tmp_path / "t.hyp").write_text("W\nL\n")
    assert main(["evaluate", "--pred", str(tmp_path / "t.hyp"), "--truth", str(tmp_path / "t.hyp"),
                 "--truth2", str(tmp_path / "t.hyp")]) == 3


def test_simulate_stage_evaluate_seed7(tmp_path, capsys):
    spec = _spec(tmp_path, "n_epochs = 200\nsol_epoch = 20\n")
    d = tmp_path / "s"
    assert main(["simulate", str(spec), "--seed", "7", "--out", str(d)]) == 0
    for f in ("exg.csv", "ppg.csv", "imu.csv", "truth.json", "truth.hyp"):
        assert (d / f).exists()
    assert main(["stage", str(d), "--out", str(tmp_path / "pred.hyp")]) == 0
    assert (tmp_path / "pred.provenance.csv").exists()
    assert main(["evaluate", "--pred", str(tmp_path / "pred.hyp"), "--truth", str(d / "truth.hyp"),
                 "--out", str(tmp_path / "rep.csv")]) == 0
    rep = dict((ln.split(",")[0] + ln.split(",")[1], ln.split(",")[2])
               for ln in (tmp_path / "rep.csv").read_text().splitlines()[2:])
    assert float(rep["accuracyall"]) >= 0.85
    assert "accuracy" in capsys.readouterr().out
    # three identical raters form a consensus equal to themselves
    t = str(d / "truth.hyp")
    assert main(["evaluate", "--pred", t, "--truth", t, "--truth2", t, "--truth3", t]) == 0


def test_closed_loop_no_sleep_stops_at_3000(tmp_path):
    spec = _spec(tmp_path, "n_epochs = 12\nsol_epoch = none\n")
    d = tmp_path / "s"
    assert main(["simulate", str(spec), "--seed", "3", "--out", str(d)]) == 0
    out = tmp_path / "actions.csv"
    assert main(["closed-loop", str(d), "--out", str(out), "--poas-out", str(tmp_path / "p.csv"),
                 "--posteriors-out", str(tmp_path / "post.csv")]) == 0
    last = out.read_text().splitlines()[-1].split(",")
    assert last[0] == "3000.000000" and last[1] == "stop"
    assert (tmp_path / "post.csv").read_text().splitlines()[1] == "content_id,mu,sigma2,n"


def test_bandit_sim_table(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bandit-sim", "--contents", "3", "--sessions", "500", "--seed", "1", "--out", str(out)]) == 0
    rows = [ln.split(",") for ln in out.read_text().splitlines()[2:]]
    assert len(rows) == 15
    last = [r for r in rows if r[0] == "401"]
    assert sum(int(r[3]) for r in last) == 100
    assert float([r for r in last if r[2] == "c0"][0][4]) >= 0.8


def test_console_script_installed():
    r = subprocess.run(["sleeploop", "--version"], capture_output=True, text=True)
    if r.returncode != 0:  # fall back to the module when the script is not on PATH
        r = subprocess.run([sys.executable, "-m", "sleeploop.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "sleeploop" in r.stdout
