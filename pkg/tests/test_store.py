"""Tests for store.py using a temporary SQLite ledger."""

from types import SimpleNamespace

from store import ExperimentRun, RunStatus, SeedMetric


def _metrics(seeds, policy_offset=0.0):
    return [
        SimpleNamespace(seed=s, R=0.5, J=1.0 + policy_offset, Phi=1.5 + policy_offset, Psi=10.0, transmissions=3)
        for s in seeds
    ]


def test_create_tables(ledger_setup):
    ledger, _ = ledger_setup
    assert ExperimentRun.table_exists()
    assert SeedMetric.table_exists()


def test_create_is_idempotent(ledger_setup):
    ledger, _ = ledger_setup
    ledger.create()
    ledger.create()
    assert ExperimentRun.table_exists()


def test_start_run_defaults_to_running(ledger_setup):
    ledger, _ = ledger_setup
    run = ledger.start_run("compare", "abc123", "/tmp/out", base_seed=7, n_seeds=4)
    assert run.status_enum == RunStatus.RUNNING
    assert run.base_seed == 7


def test_record_and_read_metrics(ledger_setup):
    ledger, _ = ledger_setup
    run = ledger.start_run("compare", "abc123", "/tmp/out", base_seed=0, n_seeds=3)
    ledger.record_metrics(run, {"voi": _metrics([2, 0, 1]), "periodic-1": _metrics([0, 1, 2], 0.25)})

    rows = ledger.metrics(run, "voi")
    assert [row.seed for row in rows] == [0, 1, 2]
    assert ledger.metrics(run, "periodic-1")[0].Phi == 1.75
    assert ledger.metric_counts() == {run.id: 6}


def test_record_metrics_empty_is_noop(ledger_setup):
    ledger, _ = ledger_setup
    run = ledger.start_run("simulate", "abc123", "/tmp/out", base_seed=0, n_seeds=1)
    ledger.record_metrics(run, {})
    assert ledger.metric_counts() == {}


def test_finish_run_updates_status(ledger_setup):
    ledger, _ = ledger_setup
    run = ledger.start_run("sweep", "abc123", "/tmp/out", base_seed=0, n_seeds=10)
    ledger.finish_run(run, RunStatus.FAILED)
    assert ledger.runs()[0].status_enum == RunStatus.FAILED


def test_runs_most_recent_first(ledger_setup):
    ledger, _ = ledger_setup
    first = ledger.start_run("simulate", "a", "/tmp/a", base_seed=0, n_seeds=1)
    second = ledger.start_run("compare", "b", "/tmp/b", base_seed=0, n_seeds=2)
    assert [run.id for run in ledger.runs()] == [second.id, first.id]
    assert len(ledger.runs(limit=1)) == 1


def test_context_manager(tmp_path):
    from store import ExperimentLedger

    with ExperimentLedger(str(tmp_path / "ctx.db")) as ledger:
        ledger.create()
        assert not ledger.db.is_closed()
    assert ledger.db.is_closed()
