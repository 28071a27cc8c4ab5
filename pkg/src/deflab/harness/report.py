"""Versioned JSON reports with a CSV side-file."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..stats import EstimateCI

SCHEMA = "deflab/1"
LOCAL_MARTINGALE_NOTE = ("checkpoint z-tests detect drift only; they cannot certify the local "
                         "martingale property between checkpoints")


@dataclass
class Quantity:
    name: str
    mc: EstimateCI | None = None
    oracle: float | None = None
    z: float | None = None
    verdict: str = "info"        # "pass", "fail" or "info"
    checkpoint: float | None = None
    invariant: str = ""

    def to_dict(self) -> dict:
        out = {"name": self.name, "mc": self.mc.to_dict() if self.mc else None,
               "oracle": self.oracle, "z": self.z, "verdict": self.verdict}
        if self.checkpoint is not None:
            out["checkpoint"] = self.checkpoint
        if self.invariant:
            out["invariant"] = self.invariant
        return out


def check(name: str, passed: bool, invariant: str, mc=None, oracle=None, z=None,
          checkpoint=None) -> Quantity:
    return Quantity(name, mc, oracle, z, "pass" if passed else "fail", checkpoint, invariant)


@dataclass
class ExperimentReport:
    config: dict
    quantities: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    conclusion: str = ""
    runtime_seconds: float | None = None
    schema: str = SCHEMA

    def add(self, q: Quantity) -> Quantity:
        self.quantities.append(q)
        return q

    @property
    def failures(self) -> list:
        return [q.name for q in self.quantities if q.verdict == "fail"]

    @property
    def passed(self) -> bool:
        return not self.failures

    def quantity(self, name: str) -> Quantity:
        for q in self.quantities:
            if q.name == name:
                return q
        raise KeyError(name)

    def to_dict(self) -> dict:
        verdict = {"passed": self.passed, "failed": self.failures}
        if self.conclusion:
            verdict["conclusion"] = self.conclusion if self.passed else "not established"
        return {"schema": self.schema, "config": self.config,
                "quantities": [q.to_dict() for q in self.quantities],
                "diagnostics": self.diagnostics, "verdict": verdict,
                "runtime_seconds": self.runtime_seconds}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "checkpoint", "n", "mean", "stderr", "ci_low", "ci_high",
                    "oracle", "z", "verdict"])
        for q in self.quantities:
            mc = q.mc
            row = [q.name, _fmt(q.checkpoint)]
            row += [mc.n, _fmt(mc.mean), _fmt(mc.stderr), _fmt(mc.low), _fmt(mc.high)] if mc else [""] * 5
            row += [_fmt(q.oracle), _fmt(q.z), q.verdict]
            w.writerow(row)
        return buf.getvalue()

    def write(self, path: str, csv_path: str | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        if csv_path is None:
            csv_path = (path[:-5] if path.endswith(".json") else path) + ".csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        return csv_path


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def _clean(obj):
    """Make a report tree JSON-safe: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    return obj
