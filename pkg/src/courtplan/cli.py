"""
courtplan command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .adversary import AdversarialConfig, DefensePolicy, adversarial_rollout
from .config import ConfigError, RunConfig, load_config, override
from .core import CourtSpec, RejectedInput, TrajectoryTensor
from .dataset import TrajectoryDataset, build_examples
from .diffusion import Denoiser, NumericAbort, TrainConfig, make_schedule, train_diffusion
from .evalkit import (
    SyntheticSpec,
    evaluate,
    generate_synthetic,
    random_walk,
    report_summary,
    run_alpha_sweep,
    write_report_csv,
)
from .ingest import (
    AlignmentError,
    MotionParseError,
    PbpParseError,
    frames_to_array,
    parse_motion,
    parse_pbp,
    possession_counts,
    segment_possessions,
    write_possession_index,
)
from .networks import ArchSpec
from .planner import GuidanceError, PlanConfig, plan
from .render import RenderStyle, render_svg
from .value import ValueModel, train_value

log = logging.getLogger("courtplan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "COURTPLAN_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_path(arg: Optional[str], default_name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUT_ENV, ".")) / default_name


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_possessions=args.n_possessions, offense_script=args.script,
                         score_prob_at_rim=args.score_prob,
                         frames_per_possession=(args.min_frames, args.max_frames))
    out = _out_path(args.out, "synthetic")
    paths = generate_synthetic(spec, out)
    print(json.dumps({"files": len(paths), "possessions": spec.n_possessions, "out": str(out)}))
    return EXIT_OK


def _pair_inputs(motion: Sequence[str], pbp: Sequence[str]):
    if len(motion) != len(pbp):
        raise UsageError("--motion and --pbp need the same number of files")
    games = []
    for mpath, ppath in zip(motion, pbp):
        m = parse_motion(_require(mpath).read_bytes())
        try:
            events = parse_pbp(_require(ppath).read_bytes())
        except PbpParseError as exc:
            raise PbpParseError([(ln, f"{ppath}: {msg}") for ln, msg in exc.row_errors]) from exc
        if m.skipped:
            log.warning("%s: skipped %d malformed moments", mpath, m.skipped)
        games.append((m, events))
    return games


def cmd_ingest(args) -> int:
    cfg = override(_config(args), "model", horizon=args.horizon)
    motion = args.motion or cfg.data.motion
    pbp = args.pbp or cfg.data.pbp
    if not motion:
        raise UsageError("ingest needs --motion and --pbp files")
    out = _out_path(args.out, "ingested")
    games = _pair_inputs(motion, pbp)
    (out / "possessions").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    pairs, all_records = [], []
    for m, events in sorted(games, key=lambda g: g[0].game_id):
        records = segment_possessions(m.frames, events, m.game_id)
        with open(out / "possessions" / f"{m.game_id}.csv", "w", newline="") as fh:
            write_possession_index(records, fh)
        np.save(out / "frames" / f"{m.game_id}.npy", frames_to_array(m.frames))
        pairs.append((records, m.frames))
        all_records += records
    if not all_records:
        raise RejectedInput("no possessions found in the input")
    examples, stats = build_examples(pairs, cfg.model.horizon)
    TrajectoryDataset(examples, stats).save(out / "dataset")
    summary = possession_counts(all_records)
    _write_json(out / "summary.json", {"summary": summary, "config": cfg.to_dict()})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _arch(cfg: RunConfig) -> ArchSpec:
    m = cfg.model
    return ArchSpec(horizon=m.horizon, base_width=m.base_width, dim_mults=tuple(m.dim_mults), kernel_size=m.kernel_size)


def _train_cfg(args) -> RunConfig:
    cfg = _config(args)
    override(cfg, "train", lr=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed)
    return cfg


def _train(args, kind: str) -> int:
    cfg = _train_cfg(args)
    data_dir = args.data or cfg.data.dataset
    if not data_dir:
        raise UsageError("--data is required")
    ds = TrajectoryDataset.load(_require(data_dir))
    if ds.horizon != cfg.model.horizon:
        cfg.model.horizon = ds.horizon
    schedule = make_schedule(cfg.model.n_steps, cfg.model.schedule)
    t = cfg.train
    tc = TrainConfig(lr=t.lr, batch_size=t.batch_size, steps=t.steps, seed=t.seed, log_every=t.log_every)
    out = _out_path(args.out, f"{kind}.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"config": cfg.to_dict(), "dataset": str(data_dir),
             "dataset_fingerprint": container.fingerprint_arrays(ds.values, ds.returns)}
    if kind == "denoiser":
        model = Denoiser(_arch(cfg), schedule, ds.stats, seed=t.seed)
        train = lambda: train_diffusion(model, ds.values, tc)  # noqa: E731
    else:
        model = ValueModel(_arch(cfg), schedule, ds.stats, seed=t.seed)
        train = lambda: train_value(model, ds.values, ds.returns, tc)  # noqa: E731
    try:
        result = train()
    except NumericAbort as exc:
        model.save(out, extra=dict(extra, aborted_at=exc.step))
        raise
    fp = model.save(out, extra=extra)
    loss_path = out.with_suffix(".loss.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for k, v in enumerate(result.losses):
            w.writerow([k, repr(v)])
    print(json.dumps({"checkpoint": str(out), "fingerprint": fp, "first_loss": result.first_loss,
                      "final_loss": result.losses[-1] if result.losses else None}))
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    return _train(args, "denoiser")


def cmd_train_value(args) -> int:
    return _train(args, "value")


def _models(args):
    den_path, val_path = _require(args.denoiser), _require(args.value)
    den = Denoiser.load(den_path)
    val = ValueModel.load(val_path)
    fps = {"denoiser": container.fingerprint_file(den_path), "value": container.fingerprint_file(val_path),
           "stats": den.stats_fingerprint}
    paths = {"denoiser": str(den_path), "value": str(val_path)}
    return den, val, den.schedule, fps, paths


def _initial_states(args, cfg: RunConfig, den: Denoiser, count: int, first: int = 0) -> np.ndarray:
    data_dir = args.data or cfg.data.dataset
    if not data_dir:
        raise UsageError("--data (dataset directory) is required to pick initial states")
    ds = TrajectoryDataset.load(_require(data_dir))
    if ds.stats.dim != den.stats.dim:
        raise RejectedInput("dataset does not match the checkpoints")
    idx = [(first + k) % len(ds) for k in range(count)]
    return ds.initial_states()[idx]


def cmd_plan(args) -> int:
    cfg = override(_config(args), "plan", alpha=args.alpha, seed=args.seed, batch=args.batch, example=args.example)
    den, val, schedule, fps, paths = _models(args)
    s0 = _initial_states(args, cfg, den, 1, cfg.plan.example)[0]
    pc = PlanConfig(alpha=cfg.plan.alpha, n_steps=schedule.n_steps, horizon=den.arch.horizon, seed=cfg.plan.seed,
                    initial_state=s0, batch=cfg.plan.batch, grad_clip=cfg.plan.grad_clip)
    result = plan(den, val, schedule, pc)
    out = _out_path(args.out, "plan.cpln")
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"role": "plan", "config": cfg.to_dict(), "plan": pc.echo(), "fingerprints": fps, "checkpoints": paths}
    fp = container.save(out, meta, {"trajectories": result.raw, "normalized": result.normalized,
                                    "predicted_returns": result.predicted_returns, "initial_state": s0})
    print(json.dumps({"plan": str(out), "fingerprint": fp,
                      "predicted_returns": [float(r) for r in result.predicted_returns]}))
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = override(_config(args), "adversary", policy=args.policy, m=args.m, total_len=args.total_len)
    override(cfg, "plan", alpha=args.alpha, seed=args.seed, batch=args.batch, example=args.example)
    den, val, schedule, fps, paths = _models(args)
    s0 = _initial_states(args, cfg, den, 1, cfg.plan.example)[0]
    a = cfg.adversary
    acfg = AdversarialConfig(a.m, a.total_len, DefensePolicy(a.policy, a.max_speed_ftps))
    pc = PlanConfig(alpha=cfg.plan.alpha, n_steps=schedule.n_steps, horizon=den.arch.horizon, seed=cfg.plan.seed,
                    batch=cfg.plan.batch, grad_clip=cfg.plan.grad_clip)
    res = adversarial_rollout(den, val, schedule, acfg, s0, pc)
    out = _out_path(args.out, "rollout.cpln")
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"role": "rollout", "config": cfg.to_dict(), "plan": pc.echo(), "fingerprints": fps, "checkpoints": paths,
            "policy": a.policy, "m": a.m, "n_segments": res.n_segments, "predicted_return": res.predicted_return}
    fp = container.save(out, meta, {"trajectories": res.trajectory.values[None],
                                    "predicted_returns": np.array([res.predicted_return])})
    print(json.dumps({"rollout": str(out), "fingerprint": fp, "policy": a.policy, "m": a.m,
                      "return": res.predicted_return}))
    return EXIT_OK


def _parse_alphas(text: Optional[str]) -> Optional[list[float]]:
    if text is None:
        return None
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --alphas value {text!r}") from exc


def cmd_evaluate(args) -> int:
    cfg = override(_config(args), "eval", alphas=_parse_alphas(args.alphas), n_runs=args.runs,
                   seed=args.seed, n_states=args.n_states)
    e = cfg.eval
    den, val, schedule, fps, paths = _models(args)
    states = _initial_states(args, cfg, den, e.n_states)
    reports = run_alpha_sweep(den, val, schedule, e.alphas, states, e.n_runs, e.seed)
    ds = TrajectoryDataset.load(args.data or cfg.data.dataset)
    gt = evaluate([ds.stats.denormalize_array(ds.values)], val)
    rw_runs = [np.stack([random_walk(s, den.arch.horizon, e.seed + r * 100003 + k, e.random_walk_std_ft).values
                         for k, s in enumerate(states)]) for r in range(e.n_runs)]
    rw = evaluate(rw_runs, val, e.n_runs)
    out = _out_path(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        write_report_csv(reports, fh)
    _write_json(out / "summary.json", {
        "sweep": report_summary(reports),
        "ground_truth": report_summary([gt])[0],
        "random_walk": report_summary([rw])[0],
        "config": cfg.to_dict(), "fingerprints": fps, "checkpoints": paths,
    })
    for r in reports:
        print(f"alpha={r.alpha:g} AVG={r.avg:.4f} MAX={r.max:.4f} oob={r.out_of_bounds_rate:.4f}")
    print(f"ground truth AVG={gt.avg:.4f}  random walk AVG={rw.avg:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    if args.plan:
        meta, arrays = container.load(_require(args.plan))
        raw = arrays["trajectories"][args.index]
        provenance = {"source": str(args.plan), "fingerprints": meta.get("fingerprints", {})}
    elif args.data:
        ds = TrajectoryDataset.load(_require(args.data))
        ex = ds.examples[args.index]
        raw = ds.stats.denormalize_array(ex.tensor.values)[: ex.tensor.valid_len]
        provenance = {"source": str(args.data), "possession_ref": ex.possession_ref}
    else:
        raise UsageError("render needs --plan or --data")
    traj = TrajectoryTensor(raw, valid_len=len(raw))
    style = RenderStyle(highlight_player_idx=args.highlight)
    svg = render_svg(traj, CourtSpec(), style, metadata={"config": cfg.to_dict(), **provenance})
    out = _out_path(args.out, "possession.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(json.dumps({"svg": str(out)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    meta, _ = container.load(_require(args.artifact))
    recorded = meta.get("fingerprints", {})
    paths = meta.get("checkpoints", {})
    overrides = {"denoiser": args.denoiser, "value": args.value}
    mismatches = []
    for role in ("denoiser", "value"):
        path = overrides[role] or paths.get(role)
        if role not in recorded or not path:
            continue
        actual = container.fingerprint_file(_require(path))
        if actual != recorded[role]:
            mismatches.append(f"{role}: artifact records {recorded[role]}, {path} has {actual}")
    if mismatches:
        print("provenance mismatch: " + "; ".join(mismatches), file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({"verified": True, "fingerprints": recorded}))
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="courtplan", description="Value-guided diffusion planning for basketball possessions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic motion/play-by-play corpus")
    s.add_argument("--out")
    s.add_argument("--n-possessions", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--script", choices=["drive", "perimeter_pass", "mixed"], default="mixed")
    s.add_argument("--score-prob", type=float, default=0.8)
    s.add_argument("--min-frames", type=int, default=48)
    s.add_argument("--max-frames", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="parse games into possessions and a trajectory dataset")
    s.add_argument("--motion", nargs="+")
    s.add_argument("--pbp", nargs="+")
    s.add_argument("--out")
    s.add_argument("--horizon", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_ingest)

    for name, func in (("train-diffusion", cmd_train_diffusion), ("train-value", cmd_train_value)):
        s = sub.add_parser(name)
        s.add_argument("--data")
        s.add_argument("--config")
        s.add_argument("--out")
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=func)

    def models(sp):
        sp.add_argument("--denoiser", required=True)
        sp.add_argument("--value", required=True)
        sp.add_argument("--data")
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("plan", help="sample guided trajectories from a dataset possession's initial state")
    models(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--example", type=int)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("rollout", help="plan against a heuristic defense, segment by segment")
    models(s)
    s.add_argument("--policy", choices=["man_to_man", "zone_2_3"])
    s.add_argument("--m", type=int)
    s.add_argument("--total-len", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--example", type=int)
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("evaluate", help="guidance-scale sweep with ground-truth and random-walk baselines")
    models(s)
    s.add_argument("--alphas")
    s.add_argument("--runs", type=int)
    s.add_argument("--n-states", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="draw a planned or recorded possession as SVG")
    s.add_argument("--plan")
    s.add_argument("--data")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--highlight", type=int)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("verify", help="recompute checkpoint fingerprints recorded in an artifact")
    s.add_argument("artifact")
    s.add_argument("--denoiser")
    s.add_argument("--value")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"courtplan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericAbort, GuidanceError) as exc:
        print(f"courtplan: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, RejectedInput, MotionParseError, PbpParseError, AlignmentError,
            container.ContainerError, OSError) as exc:
        print(f"courtplan: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
