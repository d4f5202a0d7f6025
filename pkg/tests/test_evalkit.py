from __future__ import annotations

import io
import math

import numpy as np
import pytest

from conftest import SMALL_ARCH
from courtplan.core import STATE_DIM, CourtSpec, RejectedInput
from courtplan.evalkit import (
    EvalReport,
    SyntheticSpec,
    evaluate,
    generate_games,
    generate_synthetic,
    make_probability,
    out_of_bounds_rate,
    random_walk,
    read_sidecar,
    run_alpha_sweep,
    trend_ok,
    write_report_csv,
)
from courtplan.ingest import EventType, parse_motion, parse_pbp, segment_possessions, serialize_motion, serialize_pbp
from courtplan.planner import PlanConfig, plan


def test_spec_validation():
    with pytest.raises(RejectedInput):
        SyntheticSpec(score_prob_at_rim=1.5)
    with pytest.raises(RejectedInput):
        SyntheticSpec(n_possessions=0)
    with pytest.raises(RejectedInput):
        SyntheticSpec(offense_script="fast_break")


def test_forced_drive_outcome():
    (g,) = generate_games(SyntheticSpec(n_possessions=1, offense_script="drive", score_prob_at_rim=1.0))
    scoring = [e for e in g.events if e.reward_bearing]
    assert [e.event_type for e in scoring] == [EventType.TWO_MADE]


def test_make_probability_shape():
    assert make_probability(0.0, 0.8) == 0.8 == make_probability(4.0, 0.8)
    assert make_probability(19.0, 0.8) == pytest.approx(0.8 / math.e)


def test_scoring_rate_binomial():
    p, n = 0.6, 1000
    games = generate_games(SyntheticSpec(seed=11, n_possessions=n, offense_script="drive", score_prob_at_rim=p,
                                         frames_per_possession=(8, 12)))
    made = sum(e.event_type == EventType.TWO_MADE for g in games for e in g.events)
    assert abs(made - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_files_roundtrip_and_deterministic(tmp_path):
    spec = SyntheticSpec(seed=2, n_possessions=12, frames_per_possession=(10, 14), possessions_per_game=5)
    paths = generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    motions = sorted(tmp_path.glob("a/*.json"))
    assert len(motions) == 3
    truth = read_sidecar(tmp_path / "a" / "sidecar.csv")
    assert len(truth) == 12
    for mp in motions:
        m = parse_motion(mp.read_bytes())
        text = (tmp_path / "a" / f"{m.game_id}_pbp.csv").read_text()
        events = parse_pbp(text)
        assert serialize_motion(m.game_id, m.frames) == mp.read_text()
        assert serialize_pbp(events) == text
        for r in segment_possessions(m.frames, events, m.game_id):
            assert truth[r.possession_ref] == r.reward_offense


def _s0():
    pos = np.zeros((11, 3))
    pos[:, 0] = np.linspace(50, 90, 11)
    pos[:, 1] = 25.0
    return pos.reshape(STATE_DIM)


def test_random_walk_contract():
    still = random_walk(_s0(), 30, seed=1, step_std_ft=0.0)
    assert np.all(still.values == still.values[0]) and not still.actions.any()
    a, b = random_walk(_s0(), 50, 3), random_walk(_s0(), 50, 3)
    assert np.array_equal(a.values, b.values)
    long = random_walk(_s0(), 10_000, 4, step_std_ft=3.0)
    assert out_of_bounds_rate(long.values) == 0.0
    assert np.all(long.positions()[:, 1:, 2] == 0)


def test_out_of_bounds_rate():
    v = np.zeros((2, 66))
    v[0, 0] = -1.0
    v[1, 1] = 60.0
    assert out_of_bounds_rate(v) == 2 / 66


def test_eval_report_arithmetic(small_models, monkeypatch):
    import courtplan.evalkit as ek

    _, val, _ = small_models
    returns = iter([1.0, 2.0, 3.0])
    monkeypatch.setattr(ek, "predicted_returns", lambda value, r: np.array([next(returns)]))
    runs = [np.zeros((1, 16, 66))] * 3
    rep = evaluate(runs, val, 3)
    assert (rep.avg, rep.max, rep.n_runs) == (2.0, 3.0, 3)
    with pytest.raises(RejectedInput):
        evaluate(runs, val, 4)


def test_single_run_avg_equals_max(small_models):
    _, val, _ = small_models
    rep = evaluate([np.random.default_rng(0).uniform(0, 40, (4, 16, 66))], val)
    assert rep.avg == rep.max == rep.returns[0]


def test_alpha_sweep_shares_seeds(small_models):
    den, val, sch = small_models
    states = np.stack([den.stats.denormalize_state(np.zeros(STATE_DIM))] * 2)
    reps = run_alpha_sweep(den, val, sch, [0.0, 1.0], states, n_runs=2, seed=4)
    assert [r.alpha for r in reps] == [0.0, 1.0] and all(r.n_runs == 2 for r in reps)
    direct = plan(den, val, sch, PlanConfig(alpha=0.0, n_steps=5, horizon=16, seed=5, initial_state=states, batch=2))
    assert reps[0].returns[1] == evaluate([direct.raw], val).avg
    buf = io.StringIO()
    write_report_csv(reps, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "alpha,run,return,oob_rate" and len(lines) == 5
    with pytest.raises(RejectedInput):
        run_alpha_sweep(den, val, sch, [], states)


def _rep(avg, se):
    # two runs at avg -/+ se have standard error exactly se
    r = [avg - se, avg + se]
    return EvalReport(r, avg, max(r), 2, 0.0)


def test_trend_rule():
    assert trend_ok([_rep(0, 0.1), _rep(1, 0.1), _rep(2, 0.1)]) == (True, [])
    ok, bad = trend_ok([_rep(0, 0.1), _rep(1.0, 0.1), _rep(0.95, 0.1), _rep(2, 0.1)])
    assert ok and bad == [1]
    assert not trend_ok([_rep(0, 0.01), _rep(1.0, 0.01), _rep(0.5, 0.01)])[0]
    assert not trend_ok([_rep(1, 1), _rep(0.9, 1), _rep(0.8, 1)])[0]
