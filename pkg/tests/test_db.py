# tests/test_db.py
import json

import pytest

from adamw_ema.db import default_url, events_for, get_engine, get_run, init_db, list_runs, log_event, record_run


@pytest.fixture
def engine(tmp_path):
    eng = get_engine(f"sqlite:///{tmp_path / 'runs.db'}")
    init_db(eng)
    return eng


def _row(loss):
    return {"run_id": "r1", "eta0": 1e-3, "lam": 1e-2, "tau_iter": 1e5, "tau_epoch": 5e3,
            "final_train_loss": loss, "final_test_loss": loss, "final_test_accuracy": 0.5, "diverged": False}


def test_record_run_upserts(engine):
    record_run(engine, _row(1.0), {"name": "r"}, "out/runs")
    record_run(engine, _row(0.5), {"name": "r"}, "out/runs")
    runs = list_runs(engine)
    assert len(runs) == 1
    assert runs.loc[0, "final_test_loss"] == 0.5
    run = get_run(engine, "r1")
    assert json.loads(run["config_json"]) == {"name": "r"}
    assert get_run(engine, "missing") is None


def test_events(engine):
    log_event(engine, "r1", "started", 1e-3, {"lam": 0.01})
    log_event(engine, "r1", "finished", 0.25)
    log_event(engine, "r2", "finished", 0.5)
    ev = events_for(engine, "r1")
    assert list(ev["name"]) == ["started", "finished"]
    assert json.loads(ev.loc[0, "payload"]) == {"lam": 0.01}
    assert ev.loc[1, "value"] == 0.25


def test_default_url(monkeypatch):
    assert default_url("out").endswith("out/runs.db")
    monkeypatch.setenv("ADAMW_EMA_DB", "sqlite:///elsewhere.db")
    assert default_url("out") == "sqlite:///elsewhere.db"
