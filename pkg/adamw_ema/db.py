# adamw_ema/db.py
"""Run index and event log on SQLAlchemy core."""
import json
import os
import time
from typing import Any, Dict, Optional

import pandas as pd
from sqlalchemy import Engine, create_engine, text

_engines: Dict[str, Engine] = {}


def default_url(out_dir: str) -> str:
    return os.environ.get("ADAMW_EMA_DB") or f"sqlite:///{os.path.join(out_dir, 'runs.db')}"


def get_engine(url: str) -> Engine:
    if url not in _engines:
        _engines[url] = create_engine(url, future=True)
    return _engines[url]


# ---------- schema ----------
def init_db(engine: Engine):
    with engine.begin() as con:
        con.execute(text("""
        CREATE TABLE IF NOT EXISTS runs (
          run_id TEXT PRIMARY KEY,
          name TEXT,
          eta0 REAL,
          lam REAL,
          tau_iter REAL,
          tau_epoch REAL,
          final_train_loss REAL,
          final_test_loss REAL,
          final_test_accuracy REAL,
          diverged INTEGER,
          config_json TEXT,
          path TEXT,
          ts INTEGER
        );
        """))

        con.execute(text("""
        CREATE TABLE IF NOT EXISTS events (
          id INTEGER PRIMARY KEY AUTOINCREMENT,
          run_id TEXT,
          name TEXT,
          value REAL,
          payload TEXT,
          ts INTEGER
        );
        """))


# ---------- write ops ----------
def record_run(engine: Engine, row: Dict[str, Any], config: Dict[str, Any], path: str = ""):
    """Upsert one summary row keyed by run_id."""
    params = {
        "rid": row["run_id"],
        "nm": config.get("name", ""),
        "eta": row.get("eta0"),
        "lam": row.get("lam"),
        "ti": row.get("tau_iter"),
        "te": row.get("tau_epoch"),
        "trl": row.get("final_train_loss"),
        "tel": row.get("final_test_loss"),
        "acc": row.get("final_test_accuracy"),
        "dv": int(bool(row.get("diverged"))),
        "cj": json.dumps(config, sort_keys=True),
        "p": path,
        "ts": int(time.time()),
    }
    with engine.begin() as con:
        con.execute(text("""
        INSERT INTO runs(run_id,name,eta0,lam,tau_iter,tau_epoch,final_train_loss,final_test_loss,
                         final_test_accuracy,diverged,config_json,path,ts)
        VALUES (:rid,:nm,:eta,:lam,:ti,:te,:trl,:tel,:acc,:dv,:cj,:p,:ts)
        ON CONFLICT(run_id) DO UPDATE SET
          final_train_loss=excluded.final_train_loss,
          final_test_loss=excluded.final_test_loss,
          final_test_accuracy=excluded.final_test_accuracy,
          diverged=excluded.diverged,
          path=excluded.path,
          ts=excluded.ts;
        """), params)


def log_event(engine: Engine, run_id: str, name: str, value: float = 0.0, payload: Optional[Dict[str, Any]] = None):
    with engine.begin() as con:
        con.execute(text("""
        INSERT INTO events(run_id,name,value,payload,ts)
        VALUES (:rid,:n,:v,:p,:ts)
        """), {"rid": run_id, "n": name, "v": float(value),
               "p": json.dumps(payload or {}, default=str), "ts": int(time.time())})


# ---------- read ops ----------
def list_runs(engine: Engine) -> pd.DataFrame:
    with engine.begin() as con:
        return pd.read_sql(text("SELECT * FROM runs ORDER BY run_id"), con)


def get_run(engine: Engine, run_id: str) -> Optional[Dict[str, Any]]:
    with engine.begin() as con:
        row = con.execute(text("SELECT * FROM runs WHERE run_id=:rid"), {"rid": run_id}).mappings().first()
        return dict(row) if row else None


def events_for(engine: Engine, run_id: str) -> pd.DataFrame:
    with engine.begin() as con:
        return pd.read_sql(text("SELECT name,value,payload FROM events WHERE run_id=:rid ORDER BY id"),
                           con, params={"rid": run_id})
