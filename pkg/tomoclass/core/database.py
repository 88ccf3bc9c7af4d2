# tomoclass/core/database.py
import json
import logging
import os
from pathlib import Path

from sqlalchemy import (
    Column, Float, Integer, MetaData, Table, Text, create_engine, insert, select,
)

logger = logging.getLogger(__name__)

LEDGER_FILE = "runs.db"

# ============================================================
# RUN LEDGER (one SQLite file per output directory)
# ============================================================
metadata = MetaData()

runs = Table(
    "runs", metadata,
    Column("id",          Integer, primary_key=True, autoincrement=True),
    Column("command",     Text, nullable=False),
    Column("started_at",  Text, nullable=False),
    Column("wall_time_s", Float, nullable=False),
    Column("threads",     Integer, nullable=False),
    Column("manifest",    Text, nullable=False),   # full RunManifest JSON
)

_engines = {}


def get_engine(out_dir: str | Path):
    path = os.path.abspath(os.path.join(str(out_dir), LEDGER_FILE))
    eng = _engines.get(path)
    if eng is None:
        eng = create_engine(
            f"sqlite:///{path}",
            future=True,
            connect_args={"check_same_thread": False},
        )
        metadata.create_all(eng)
        _engines[path] = eng
    return eng


def record_run(manifest, out_dir: str | Path) -> int:
    """Append a RunManifest to the ledger; returns the row id."""
    eng = get_engine(out_dir)
    with eng.begin() as conn:
        res = conn.execute(insert(runs).values(
            command=manifest.command,
            started_at=manifest.started_at,
            wall_time_s=manifest.wall_time_s,
            threads=manifest.threads,
            manifest=manifest.model_dump_json(),
        ))
        run_id = int(res.inserted_primary_key[0])
    logger.debug("Ledger %s: run %d (%s)", out_dir, run_id, manifest.command)
    return run_id


def list_runs(out_dir: str | Path) -> list[dict]:
    if not os.path.exists(os.path.join(str(out_dir), LEDGER_FILE)):
        return []
    eng = get_engine(out_dir)
    with eng.connect() as conn:
        rows = conn.execute(select(runs).order_by(runs.c.id)).mappings().all()
    out = []
    for r in rows:
        m = json.loads(r["manifest"])
        out.append({
            "id": r["id"],
            "command": r["command"],
            "started_at": r["started_at"],
            "wall_time_s": r["wall_time_s"],
            "threads": r["threads"],
            "outputs": sorted(m.get("outputs", {})),
        })
    return out
