"""Line-delimited JSON file formats.

Every line is one JSON object carrying ``"version"`` and ``"kind"``.  Three
files exist:

* split manifest   -- ``kind="manifest"``: seed, partition, class map, labeled indices.
* prediction file  -- one ``kind="header"`` line (partition) followed by
  ``kind="prediction"`` lines: ``id``, ``label``, ``pred``, ``probs``, ``features``.
* run ledger       -- ``kind="epoch"`` lines followed by one ``kind="final"`` line per run.

Lines are written with sorted keys and compact separators so that a
read/write round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError
from .scenario import ClassPartition

FORMAT_VERSION = 1


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records: Iterable[dict], append: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps({"version": FORMAT_VERSION, **rec}) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("version") != FORMAT_VERSION:
                raise ConfigError(f"{path}:{lineno}: unsupported record version {rec.get('version')!r}")
            yield rec


# ---------------------------------------------------------------- manifests
def write_manifest(path, manifest: dict, scenario: dict | None = None):
    rec = {"kind": "manifest", **manifest}
    if scenario is not None:
        rec["scenario"] = scenario
    write_jsonl(path, [rec])


def read_manifest(path) -> dict:
    recs = [r for r in read_jsonl(path) if r["kind"] == "manifest"]
    if len(recs) != 1:
        raise ConfigError(f"{path}: expected exactly one manifest record")
    return recs[0]


# -------------------------------------------------------------- predictions
@dataclass
class PredictionDump:
    partition: ClassPartition
    ids: np.ndarray
    labels: np.ndarray
    preds: np.ndarray
    probs: np.ndarray
    features: np.ndarray
    meta: dict = field(default_factory=dict)


def write_predictions(path, dump: PredictionDump):
    header = {"kind": "header", "partition": dump.partition.to_dict(), **dump.meta}
    rows = ({"kind": "prediction", "id": int(i), "label": int(y), "pred": int(p),
             "probs": [float(v) for v in pr], "features": [float(v) for v in f]}
            for i, y, p, pr, f in zip(dump.ids, dump.labels, dump.preds, dump.probs, dump.features))
    write_jsonl(path, [header, *rows])


def read_predictions(path) -> PredictionDump:
    header, rows = None, []
    for rec in read_jsonl(path):
        if rec["kind"] == "header":
            header = rec
        elif rec["kind"] == "prediction":
            rows.append(rec)
    if header is None:
        raise ConfigError(f"{path}: missing header record")
    meta = {k: v for k, v in header.items() if k not in ("kind", "version", "partition")}
    return PredictionDump(
        partition=ClassPartition.from_dict(header["partition"]),
        ids=np.array([r["id"] for r in rows], dtype=np.int64),
        labels=np.array([r["label"] for r in rows], dtype=np.int64),
        preds=np.array([r["pred"] for r in rows], dtype=np.int64),
        probs=np.array([r["probs"] for r in rows], dtype=np.float64),
        features=np.array([r["features"] for r in rows], dtype=np.float64),
        meta=meta,
    )


# ------------------------------------------------------------------- ledger
@dataclass
class RunLedgerRecord:
    run_id: str
    config_hash: str
    method: str
    seed: int
    scenario_hash: str
    epochs: list = field(default_factory=list)  # dicts: epoch, losses, optional eval
    stop_report: dict | None = None
    final: dict | None = None  # EvalReport as dict
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_records(self) -> list[dict]:
        out = [{"kind": "epoch", "run_id": self.run_id, **e} for e in self.epochs]
        out.append({"kind": "final", "run_id": self.run_id, "config_hash": self.config_hash,
                    "method": self.method, "seed": self.seed, "scenario_hash": self.scenario_hash,
                    "stop_report": self.stop_report, "final": self.final, "extra": self.extra,
                    "wall_clock": self.wall_clock})
        return out


def write_ledger(path, records: Iterable[RunLedgerRecord], append: bool = False):
    write_jsonl(path, [r for rec in records for r in rec.to_records()], append=append)


def read_ledger(path) -> list[RunLedgerRecord]:
    epochs: dict[str, list] = {}
    out = []
    for rec in read_jsonl(path):
        run_id = rec["run_id"]
        if rec["kind"] == "epoch":
            epochs.setdefault(run_id, []).append(
                {k: v for k, v in rec.items() if k not in ("kind", "version", "run_id")})
        elif rec["kind"] == "final":
            if any(r.run_id == run_id for r in out):
                raise ConfigError(f"{path}: duplicate final record for run {run_id}")
            out.append(RunLedgerRecord(
                run_id=run_id, config_hash=rec["config_hash"], method=rec["method"],
                seed=rec["seed"], scenario_hash=rec["scenario_hash"],
                epochs=epochs.pop(run_id, []), stop_report=rec["stop_report"],
                final=rec["final"], extra=rec.get("extra", {}), wall_clock=rec["wall_clock"]))
    return out
