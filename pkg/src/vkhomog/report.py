"""Run reports: per-operation records, flags, and provenance."""

from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager

from pydantic import BaseModel, ConfigDict, Field


class OperationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str
    values: dict
    flags: list[str] = Field(default_factory=list)
    wall_time: float = 0.0


class RunReport(BaseModel):
    model_config = ConfigDict(extra="forbid")
    command: str
    config_hash: str
    code_version: str
    passed: bool
    flags: list[str] = Field(default_factory=list)
    records: list[OperationRecord] = Field(default_factory=list)
    resolved_config: dict = Field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True,
                          ensure_ascii=False) + "\n"


def config_hash(config) -> str:
    blob = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ReportBuilder:
    """Accumulates records; every flagged entry also lands in the summary."""

    def __init__(self, command: str, config):
        from . import __version__
        self.command = command
        self.config = config
        self.records: list[OperationRecord] = []
        self.flags: list[str] = []
        self.failed = False
        self._version = __version__

    @contextmanager
    def timed(self, name: str):
        rec = {"values": {}, "flags": []}
        t0 = time.perf_counter()
        yield rec
        self.add(name, rec["values"], rec["flags"],
                 wall_time=time.perf_counter() - t0)

    def add(self, name, values, flags=(), wall_time=0.0):
        flags = list(flags)
        self.records.append(OperationRecord(
            name=name, values=values, flags=flags, wall_time=wall_time))
        for f in flags:
            self.flags.append(f"{name}: {f}")

    def fail(self, reason: str):
        self.failed = True
        self.flags.append(reason)

    def build(self, passed=None) -> RunReport:
        if passed is None:
            passed = not self.failed and not self.flags
        return RunReport(command=self.command,
                         config_hash=config_hash(self.config),
                         code_version=self._version,
                         passed=bool(passed), flags=self.flags,
                         records=self.records,
                         resolved_config=self.config.model_dump(mode="json"))
