"""Command-line entry point: ``sleeploop <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .closedloop import (
    ArmPosterior, acr_select, acr_update, bandit_simulation, dumps_actions, load_posteriors,
    run_controller, save_posteriors, session_rewards, BanditConfig,
)
from .config import Config, load_config, parse_kv
from .core import EPOCH_S, Hypnogram, consensus_hypnogram, epoch_view
from .errors import ConfigError, InputError, SleepLoopError, TooFewRaters
from .evaluation import cohens_kappa, confusion, metrics, report_csv, report_text
from .formats import (
    SCHEMA_LINE, dumps_provenance, dumps_truth, dumps_vitals, load_hypnogram, load_recording,
    provenance_path, save_hypnogram, save_recording,
)
from .quality import DEFAULT_TREE, QualityTree
from .smoothing import HmmParams, default_params, estimate_hmm, smooth
from .staging import PipelineConfig, StagingPipeline
from .synthgen import ARTIFACT_KINDS, ArtifactSpec, SessionSpec, gen_session
from .vitals import HrTracker, PostureTracker, heart_rate, respiratory_rate

SPEC_KEYS = {
    "seed": int, "n_epochs": int, "sol_epoch": str, "light": float, "deep": float, "rem": float,
    "hr_bpm": str, "rr_brpm": str, "n_posture_changes": int, "exg_white_uv": float,
    "ppg_noise": float, "imu_noise_g": float, "resp_amp_g": float, "artifact": str,
}


def load_session_spec(path, seed: int | None = None) -> SessionSpec:
    """Simulation spec: same key = value syntax as the config file.

    ``sol_epoch``, ``hr_bpm`` and ``rr_brpm`` accept ``none`` / ``stage``.
    ``artifact`` may repeat: ``kind start_s end_s channels [amplitude]`` with
    channels comma separated.
    """
    raw = parse_kv(Path(path).read_text(), allowed=SPEC_KEYS, repeatable=("artifact",))
    kw = {}
    for key, value in raw.items():
        if key == "artifact":
            arts = []
            for v in value:
                parts = v.split()
                if len(parts) not in (4, 5) or parts[0] not in ARTIFACT_KINDS:
                    raise ConfigError(f"bad artifact line {v!r}")
                arts.append(ArtifactSpec(parts[0], float(parts[1]), float(parts[2]),
                                         tuple(parts[3].split(",")),
                                         float(parts[4]) if len(parts) == 5 else None))
            kw["artifacts"] = tuple(arts)
        elif key in ("sol_epoch", "hr_bpm", "rr_brpm"):
            if value.lower() in ("none", "stage"):
                kw[key] = None
            else:
                kw[key] = int(value) if key == "sol_epoch" else float(value)
        else:
            try:
                kw[key] = SPEC_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if seed is not None:
        kw["seed"] = seed
    return SessionSpec(**kw)


def _config(args) -> Config:
    return load_config(args.config) if getattr(args, "config", None) else Config()


def _pipeline(cfg: Config, scheme=None, scorer=None) -> StagingPipeline:
    tree = QualityTree.load(cfg.quality_tree) if cfg.quality_tree else DEFAULT_TREE
    return StagingPipeline(PipelineConfig(scheme=scheme or cfg.scheme, scorer=scorer or cfg.scorer,
                                          filter_mode=cfg.filter_mode, dsp=cfg.dsp(), tree=tree))


def _recording(directory, cfg: Config):
    return load_recording(directory, cfg.fs_exg, cfg.fs_ppg, cfg.fs_imu)


def _write(path, text):
    Path(path).write_text(text, newline="\n")


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    spec = load_session_spec(args.spec, args.seed)
    session = gen_session(spec)
    out = Path(args.out)
    save_recording(out, session.recording)
    _write(out / "truth.json", dumps_truth(session.truth))
    save_hypnogram(out / "truth.hyp", session.hypnogram)


def cmd_stage(args):
    cfg = _config(args)
    rec = _recording(args.dir, cfg)
    pipe = _pipeline(cfg, args.ref_scheme, args.scorer)
    results = pipe.run(rec)
    save_hypnogram(args.out, Hypnogram(tuple(r.stage for r in results)))
    _write(provenance_path(args.out), dumps_provenance(results))


def cmd_smooth(args):
    params = HmmParams.load(args.params) if args.params else default_params()
    save_hypnogram(args.out, smooth(load_hypnogram(args.input), params))


def cmd_fit_hmm(args):
    corpus = [(load_hypnogram(t), load_hypnogram(p)) for t, p in args.pair]
    estimate_hmm(corpus, alpha=args.alpha).save(args.out)


def cmd_vitals(args):
    cfg = _config(args)
    rec = _recording(args.dir, cfg)
    if rec.ppg is None or rec.imu is None:
        raise InputError("vitals need ppg.csv and imu.csv")
    k_hr = int(round(5 * rec.fs_ppg))
    k_rr = int(round(60 * rec.fs_imu))
    k_po = int(round(10 * rec.fs_imu))
    rr = []
    for i in range(rec.imu.shape[1] // k_rr):
        try:
            rr.append(respiratory_rate(rec.imu[:, i * k_rr:(i + 1) * k_rr], rec.fs_imu, 60.0 * i).brpm)
        except SleepLoopError:
            rr.append(float("nan"))
    postures = []
    tracker = PostureTracker()
    for i in range(rec.imu.shape[1] // k_po):
        try:
            postures.append(tracker.update(rec.imu[:, i * k_po:(i + 1) * k_po], rec.fs_imu).value)
        except SleepLoopError:
            postures.append("")
    hr = HrTracker(5)
    rows = []
    n_win = min(rec.ppg.shape[1] // k_hr, int(rec.duration_s // 5))
    for i in range(n_win):
        t = 5.0 * i
        est = hr.update(heart_rate(rec.ppg[:, i * k_hr:(i + 1) * k_hr], rec.fs_ppg, t))
        r = rr[i // 12] if i // 12 < len(rr) else float("nan")
        p = postures[i // 2] if i // 2 < len(postures) else ""
        rows.append((rec.start_time + t, est.bpm, est.quality, r, p))
    _write(args.out, dumps_vitals(rows))


def cmd_evaluate(args):
    truths = [load_hypnogram(p) for p in args.truth]
    if len(truths) == 1:
        truth = truths[0]
    elif len(truths) >= 3:
        truth = consensus_hypnogram(truths)
    else:
        raise TooFewRaters("consensus needs at least 3 truth hypnograms")
    pred = load_hypnogram(args.pred)
    cm = confusion(pred, truth)
    m = metrics(cm)
    k = cohens_kappa(cm)
    sys.stdout.write(report_text(cm, m, k))
    if args.out:
        _write(args.out, report_csv(cm, m, k))


def cmd_closed_loop(args):
    cfg = _config(args)
    ccfg = cfg.controller()
    rec = _recording(args.dir, cfg)
    ids = cfg.content_ids()
    if args.posteriors and Path(args.posteriors).exists():
        post = load_posteriors(args.posteriors)
    else:
        post = {}
    for c in ids:
        post.setdefault(c, ArmPosterior(cfg.mu0, cfg.sigma0_2, 0))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    first = acr_select(post, rng)
    pipe = _pipeline(cfg)
    n = min(rec.n_epochs, int(np.ceil(ccfg.timeline.hard_stop_s / EPOCH_S)))

    def results():
        for i in range(n):
            r = pipe.stage_epoch(epoch_view(rec, i))
            yield r.stage, r.distribution

    state, actions = run_controller(results(), ccfg, first,
                                    choose_content=lambda cur: acr_select(post, rng, exclude=cur))
    _write(args.out, dumps_actions(actions))
    if args.poas_out:
        lines = [SCHEMA_LINE, "t,poas"] + [f"{t:.6f},{v!r}" for t, v in state.poas.history]
        _write(args.poas_out, "\n".join(lines) + "\n")
    if args.posteriors_out:
        for cid, reward in sorted(session_rewards(state, ccfg).items()):
            post[cid] = acr_update(post[cid], reward, cfg.sigma_obs2)
        save_posteriors(args.posteriors_out, post)


def cmd_bandit_sim(args):
    means = tuple(float(v) for v in args.means.split(",")) if args.means else \
        (2.0,) + (0.5,) * (args.contents - 1)
    bc = BanditConfig(args.contents, means, args.mu0, args.sigma0_2, args.sigma_obs2)
    choices, post = bandit_simulation(args.sessions, args.seed, bc)
    lines = [SCHEMA_LINE, "block_start,block_end,content_id,count,frequency"]
    for a in range(0, args.sessions, args.block):
        blk = choices[a:a + args.block]
        for c in range(args.contents):
            cnt = int(np.sum(blk == c))
            lines.append(f"{a + 1},{a + len(blk)},c{c},{cnt},{cnt / len(blk)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.posteriors_out:
        save_posteriors(args.posteriors_out, post)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sleeploop", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"sleeploop {__version__} schema={SCHEMA_VERSION}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic session with ground truth")
    s.add_argument("spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("stage", help="stage a recording epoch by epoch")
    s.add_argument("dir")
    s.add_argument("--config")
    s.add_argument("--ref-scheme", choices=["dynamic", "contralateral", "cms"])
    s.add_argument("--scorer", help="baseline or pml:<weights.npz>")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stage)

    s = sub.add_parser("smooth", help="fill and re-decode a hypnogram")
    s.add_argument("--params")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("fit-hmm", help="estimate smoothing parameters from hypnogram pairs")
    s.add_argument("--pair", nargs=2, action="append", metavar=("TRUTH", "OBSERVED"), required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_hmm)

    s = sub.add_parser("vitals", help="heart rate, breathing rate and posture")
    s.add_argument("dir")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_vitals)

    s = sub.add_parser("evaluate", help="compare a predicted hypnogram with a reference")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", action="append", required=True)
    s.add_argument("--truth2", dest="truth", action="append")
    s.add_argument("--truth3", dest="truth", action="append")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("closed-loop", help="simulate the sleep-onset controller on a recording")
    s.add_argument("dir")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--poas-out")
    s.add_argument("--posteriors")
    s.add_argument("--posteriors-out")
    s.set_defaults(func=cmd_closed_loop)

    s = sub.add_parser("bandit-sim", help="Monte-Carlo content recommendation study")
    s.add_argument("--contents", type=int, default=3)
    s.add_argument("--sessions", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--means")
    s.add_argument("--mu0", type=float, default=0.0)
    s.add_argument("--sigma0-2", dest="sigma0_2", type=float, default=100.0)
    s.add_argument("--sigma-obs2", dest="sigma_obs2", type=float, default=1.0)
    s.add_argument("--block", type=int, default=100)
    s.add_argument("--out")
    s.add_argument("--posteriors-out")
    s.set_defaults(func=cmd_bandit_sim)
    return p


def _report(err: Exception, code: int):
    payload = {"error": type(err).__name__, "exit_code": code, "message": str(err)}
    for key in ("line", "column"):
        if getattr(err, key, None) is not None:
            payload[key] = getattr(err, key)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SleepLoopError as e:
        _report(e, e.exit_code)
        return e.exit_code
    except (OSError, UnicodeDecodeError) as e:
        _report(e, 2)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
