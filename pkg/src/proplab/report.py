"""Run reports: per-check records and deterministic JSON emission."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class CheckRecord:
    """One verdict: ``measured`` against ``budget`` plus optional sub-checks.

    ``details`` maps sub-check names to ``{"measured", "budget", "pass"}``
    dictionaries (or any JSON-ready values).
    """

    name: str
    budget: str
    measured: float
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "budget": self.budget, "measured": self.measured, "pass": bool(self.passed),
                "details": self.details}

    @classmethod
    def from_dict(cls, d: dict) -> "CheckRecord":
        return cls(d["name"], d["budget"], d["measured"], d["pass"], d.get("details", {}))


def sub_check(measured, budget: str, passed: bool) -> dict:
    return {"measured": measured, "budget": budget, "pass": bool(passed)}


@dataclass
class RunReport:
    tool_version: str
    config_hash: str
    seed: int
    records: list = field(default_factory=list)
    header: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)  # wall clock, written to a separate file

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def record(self, name: str) -> CheckRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"tool_version": self.tool_version, "config_hash": self.config_hash, "seed": self.seed,
                "header": self.header, "pass": self.passed, "records": [r.as_dict() for r in self.records]}


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()).hexdigest()


def _fmt_float(v: float) -> str:
    if math.isnan(v):
        return '"nan"'
    if math.isinf(v):
        return '"inf"' if v > 0 else '"-inf"'
    return "%.12e" % v


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):  # numpy scalars
        return _encode(obj.item(), indent, level)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(obj[k], indent, level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with sorted keys and every float written as ``%.12e``."""
    return _encode(obj, indent, 0) + "\n"


def emit_report(report: RunReport, path) -> Path:
    """Write ``report.json`` (deterministic) and ``timings.json`` into directory ``path``.

    Wall-clock times live in the separate file so that the report itself is
    byte-identical across runs with the same seed and configuration.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        target = out / "report.json"
        target.write_text(dumps(report.as_dict()), encoding="utf-8")
        (out / "timings.json").write_text(dumps(report.times), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return target


def _restore(obj):
    if isinstance(obj, str) and obj in ("nan", "inf", "-inf"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


def load_report(path) -> RunReport:
    """Read a report written by :func:`emit_report` (file or directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    d = _restore(json.loads(p.read_text(encoding="utf-8")))
    times = {}
    tp = p.with_name("timings.json")
    if tp.exists():
        times = _restore(json.loads(tp.read_text(encoding="utf-8")))
    return RunReport(d["tool_version"], d["config_hash"], d["seed"],
                     [CheckRecord.from_dict(r) for r in d["records"]], d.get("header", {}), times)
