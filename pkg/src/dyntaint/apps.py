"""Security monitors built as engine hooks.

Each monitor is a callable ``monitor(event, engine)``; it only reads the
shadow state, so attaching one never changes what the engine computes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .engine import (
    AddrEvent, CmpEvent, ControlEvent, EngineConfig, FreeEvent, MemEvent, execute,
)
from .isa import Program, key_location
from .policy import DANGLING, BitwisePolicy, BvPolicy, UafPolicy

HIJACK = "HIJACK"
UAF_DEREF = "UAF-DEREF"
UAF_FREE = "UAF-FREE-OF-DANGLING"


@dataclass(frozen=True)
class Alarm:
    kind: str
    pc: int
    locations: tuple
    site: Optional[int] = None
    target: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "pc": self.pc, "locations": [str(loc) for loc in self.locations]}
        if self.site is not None:
            d["site"] = self.site
        if self.target is not None:
            d["target"] = self.target
        return d

    def json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class HijackMonitor:
    """Alarms when an indirect jump, call or return uses a tainted target."""

    policy_name = "bitwise"

    def __init__(self):
        self.alarms: list = []

    def __call__(self, event, engine):
        if type(event) is not ControlEvent:
            return
        get = engine.shadow.get
        bad = tuple(key_location(k) for k in event.keys if get(k))
        if bad:
            self.alarms.append(Alarm(HIJACK, event.pc, bad, target=event.target))

    def report(self):
        return [a.to_dict() for a in self.alarms]


class UafMonitor:
    """Use of, or free through, a pointer whose allocation was freed."""

    policy_name = "uaf"

    def __init__(self):
        self.alarms: list = []

    def __call__(self, event, engine):
        t = type(event)
        if t is MemEvent:
            policy = engine.policy
            for b in range(4):
                k = -(event.base * 4 + b) - 1
                label = engine.shadow.get(k)
                if label and policy.status(label) == DANGLING:
                    self.alarms.append(Alarm(UAF_DEREF, event.pc, (key_location(k),),
                                             site=policy.site(label)))
                    return
        elif t is FreeEvent and event.prior is not None:
            status, site = event.prior
            if status == DANGLING:
                locs = tuple(key_location(-(event.reg * 4 + b) - 1) for b in range(4))
                self.alarms.append(Alarm(UAF_FREE, event.pc, locs, site=site))

    def report(self):
        return [a.to_dict() for a in self.alarms]


@dataclass
class OffsetReport:
    sites: dict = field(default_factory=dict)  # site -> set of input offsets

    def add(self, site: int, offsets):
        if offsets:
            self.sites.setdefault(site, set()).update(offsets)

    def to_dict(self) -> dict:
        return {str(s): sorted(self.sites[s]) for s in sorted(self.sites)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


class FuzzMonitor:
    """Input offsets reaching comparison operands and address bases."""

    policy_name = "bv"

    def __init__(self):
        self.offsets = OffsetReport()
        self.alarms: list = []  # never alarms; kept for a uniform interface

    def _decode(self, engine, keys) -> set:
        # decode in Python so the label store is not grown by reporting
        get, members = engine.shadow.get, engine.policy.store.members
        out = set()
        for k in keys:
            label = get(k)
            if label:
                out |= members(label)
        return out

    def __call__(self, event, engine):
        t = type(event)
        if t is CmpEvent:
            offsets = set()
            for keys in event.operands:
                offsets |= self._decode(engine, keys)
            self.offsets.add(event.pc, offsets)
        elif t is AddrEvent:
            self.offsets.add(event.pc, self._decode(engine, event.keys))

    def report(self):
        return self.offsets.to_dict()


APPS = {"hijack": HijackMonitor, "uaf": UafMonitor, "fuzz": FuzzMonitor}
APP_POLICY = {"hijack": "bitwise", "uaf": "uaf", "fuzz": "bv"}


def hijack_monitor(program: Program, input_data: bytes = b"", config: Optional[EngineConfig] = None):
    mon = HijackMonitor()
    execute(program, BitwisePolicy(), config, [mon], input_data)
    return mon.alarms


def uaf_monitor(program: Program, input_data: bytes = b"", config: Optional[EngineConfig] = None):
    mon = UafMonitor()
    execute(program, UafPolicy(), config, [mon], input_data)
    return mon.alarms


def fuzz_offsets(program: Program, input_data: bytes, config: Optional[EngineConfig] = None) -> OffsetReport:
    mon = FuzzMonitor()
    execute(program, BvPolicy(), config, [mon], input_data)
    return mon.offsets
