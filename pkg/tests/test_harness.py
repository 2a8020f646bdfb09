import json
import math

import pytest

from whathow import harness as hz
from whathow import taskgen as tg

TINY = hz.make_config("tiny")


def test_presets_and_validation(tmp_path):
    assert hz.make_config().n_hidden == 128
    assert hz.make_config("full").n_hidden == 256
    assert TINY.preset == "tiny"
    for bad in ({"n_batches": 0}, {"task_order": ("Nope",)}, {"bogus": 1}, {"activation": "sigmoid"},
                {"gen": {"sigma": -1.0}}, {"taskmodel": {"z_slots": "many"}}):
        with pytest.raises(hz.ConfigError):
            hz.make_config(**bad)
    with pytest.raises(hz.ConfigError):
        hz.make_config("huge")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "tiny", "n_batches": 3}))
    cfg = hz.load_config(path)
    assert cfg.preset == "tiny" and cfg.n_batches == 3 and cfg.n_hidden == 32
    # the echoed config reloads to the same thing
    path.write_text(json.dumps(cfg.to_dict()))
    assert hz.load_config(path) == cfg
    path.write_text("[1, 2]")
    with pytest.raises(hz.ConfigError):
        hz.load_config(path)


def _row(run="r", step=0, task="DelayPro", perf=0.5):
    return hz.MetricsRow(run, 0, "continual", step, task, task, 0.25, perf, float("nan"))


def test_metrics_log_rejects_steps_going_back():
    log = hz.MetricsLog([_row(step=1), _row(step=1), _row("other", 0)])
    with pytest.raises(ValueError):
        log.append(_row(step=0))
    assert len(log) == 3 and len(log.select(run_id="r")) == 2


def test_metrics_schema_and_round_trip(tmp_path):
    log = hz.MetricsLog([_row(step=1, perf=0.1 + 0.2), _row(step=2)])
    text = log.to_text()
    assert text.splitlines()[:2] == ["# whathow-metrics v1",
                                     "run_id\tseed\tphase\tglobal_step\ttrained_task\teval_task\ttest_loss\t"
                                     "performance\ttask_model_ll"]
    assert text.splitlines()[2] == "r\t0\tcontinual\t1\tDelayPro\tDelayPro\t0.25\t0.30000000000000004\tnan"
    log.save(tmp_path / "m.tsv")
    back = hz.MetricsLog.load(tmp_path / "m.tsv")
    assert back.to_text() == text
    assert math.isnan(list(back)[0].task_model_ll)
    (tmp_path / "bad.tsv").write_text("run_id\n")
    with pytest.raises(ValueError):
        hz.MetricsLog.load(tmp_path / "bad.tsv")


@pytest.fixture(scope="module")
def tiny_runs():
    return {k: hz.run_sequence(TINY, k, 0, TINY.task_order, f"{k}-t") for k in ("context", "owp")}


def test_run_sequence_is_deterministic(tiny_runs):
    again = hz.run_sequence(TINY, "context", 0, TINY.task_order, "context-t")
    assert again.log.to_text() == tiny_runs["context"].log.to_text()
    assert again.agent.state_digest() == tiny_runs["context"].agent.state_digest()
    other = hz.run_sequence(TINY, "context", 1, TINY.task_order, "context-t")
    assert other.log.to_text() != again.log.to_text()


def test_run_sequence_rows(tiny_runs):
    r = tiny_runs["context"]
    steps = [row.global_step for row in r.log]
    assert steps == sorted(steps) and steps[-1] == TINY.n_batches * len(TINY.task_order)
    first, second = TINY.task_order
    # earlier tasks keep being evaluated once trained, later ones are not evaluated early
    assert {row.eval_task for row in r.log if row.trained_task == first} == {first}
    assert {row.eval_task for row in r.log if row.trained_task == second} == {first, second}
    assert set(r.final_perf) == {first, second}
    assert all(0 <= v <= 1 for v in r.final_perf.values())
    assert all(math.isfinite(row.task_model_ll) for row in r.log)
    assert all(math.isnan(row.task_model_ll) for row in tiny_runs["owp"].log)


def test_contexts_not_gated_by_a_task_are_left_unchanged(tiny_runs):
    iso = tiny_runs["context"].isolation
    assert len(iso) == len(TINY.task_order)
    assert all(rec["unchanged"] == rec["ungated"] for rec in iso)
    assert tiny_runs["owp"].isolation == []


def test_evaluation_does_not_change_state(tiny_runs):
    for r in tiny_runs.values():
        before = r.agent.state_digest()
        hz.evaluate_agent(r.agent, TINY, 0)
        assert r.agent.state_digest() == before


def test_checkpointed_agent_evaluates_identically(tiny_runs, tmp_path):
    for kind, r in tiny_runs.items():
        d = tmp_path / kind
        d.mkdir()
        hz.save_agent(r.agent, d)
        back = hz.load_agent(d, TINY, 0)
        assert back.state_digest() == r.agent.state_digest()
        a, b = hz.evaluate_agent(r.agent, TINY, 0), hz.evaluate_agent(back, TINY, 0)
        assert a.to_text() == b.to_text()
        assert [row.eval_task for row in a] == sorted(TINY.task_order, key=tg.TASK_ID.get)
    with pytest.raises(hz.ConfigError):
        hz.load_agent(tmp_path, TINY, 0)


def test_run_continual_ids_and_transfer():
    log, results = hz.run_continual(TINY, learners=("adam",))
    assert [r.run_id for r in results] == ["adam-o0-s0"]
    assert all(r.agent is None for r in results)
    fwd = hz.run_transfer_forward(TINY)
    assert {r.phase for r in fwd} == {"transfer_fwd", "transfer_scratch"}
    assert {r.eval_task for r in fwd} == {"DelayAnti"}
    bwd = hz.run_transfer_backward(TINY, learners=("owp",))
    assert max(r.global_step for r in bwd) == 2 * TINY.short_batches
    assert {r.eval_task for r in bwd} == {"DelayPro", "DelayAnti"}


def test_batches_to_half_loss():
    rows = [_row(step=s) for s in (10, 20)]
    assert hz.batches_to_half_loss(rows, 0.3, 5) == 5
    assert hz.batches_to_half_loss(rows, 0.1, 5) == math.inf


def test_compgen_adapts_only_the_task_model():
    res = hz.run_compgen(TINY, baselines=("adam",))
    assert res.bank_checksum_before == res.bank_checksum_after
    assert [n for n, _ in res.context_curve] == [4, 8]
    assert [n for n, _ in res.baseline_curves["adam"]] == [8, 16]
    assert hz.perf_at(res.context_curve, 3) == 0.0
    assert hz.perf_at(res.context_curve, 7) == res.context_curve[0][1]


def test_run_what_rows():
    cfg = hz.make_config("tiny", tm_trials_per_task=10)
    log, tm = hz.run_what(cfg, eval_every=5, n_eval=4)
    est, gt = log.select(phase="what"), log.select(phase="what_gt")
    assert len(est) == len(gt) == 2 + 4
    assert len({r.task_model_ll for r in gt if r.eval_task == "DelayPro"}) == 1
    assert tm.n_trials == 20


def test_emit_plots(tmp_path, tiny_runs):
    log = tiny_runs["context"].log
    paths = hz.emit_plots(log, tmp_path)
    assert sorted(p.name for p in paths) == ["continual.svg", "continual.tsv"]
    assert len((tmp_path / "continual.tsv").read_text().splitlines()) == len(log) + 1
    first = (tmp_path / "continual.svg").read_bytes()
    hz.emit_plots(log, tmp_path)
    assert (tmp_path / "continual.svg").read_bytes() == first
    with pytest.raises(hz.PlotError):
        hz.emit_plots(hz.MetricsLog(), tmp_path)
    with pytest.raises(hz.PlotError):
        hz.emit_plots(log, tmp_path, ["compgen"])
    with pytest.raises(hz.PlotError):
        hz.emit_plots(log, tmp_path, ["histogram"])


def test_gating_accuracy_is_a_fraction():
    cfg = hz.make_config("tiny")
    _, tm = hz.run_what(cfg, n_eval=2)
    acc = hz.gating_accuracy(tm, tg.full_suite(), 0, cfg.gen_config(), seed=0, n=10)
    assert 0 <= acc <= 1
