"""Forward taint analysis of one truncated block.

Memory bytes are named relative to block entry: ``SymByte(base, off)`` is
the byte at (entry value of register ``base``) + ``off``, or the absolute
address ``off`` when ``base`` is None.  Two names with the same base and
different offsets never alias; names with different bases may.  This keeps
the result valid for every execution that reaches the block with the same
taint case, whatever the concrete addresses are.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .isa import MASK32, RegByte, SMem, SReg

ALWAYS = frozenset({"copyn", "read", "alloc", "untaint"})


@dataclass(frozen=True)
class SymByte:
    base: Optional[int]
    off: int


class _AnyMemory:
    def __repr__(self):
        return "ANY_MEMORY"


# appears in an exit set when a bulk copy may have tainted arbitrary memory
ANY_MEMORY = _AnyMemory()
_WILD = None


class _Facts:
    def __init__(self, entry_tainted):
        self.regs = set()
        self.mem_entry = set()
        for loc in entry_tainted:
            if isinstance(loc, RegByte):
                self.regs.add(loc.reg * 4 + loc.byte)
            elif isinstance(loc, SymByte):
                self.mem_entry.add((loc.base, loc.off & MASK32))
            else:
                raise TypeError(f"not an entry-relative location: {loc!r}")
        self.log = []  # (base, off, tainted) or _WILD, in program order

    def mem(self, base, off) -> bool:
        for entry in reversed(self.log):
            if entry is _WILD:
                return True
            wb, wo, t = entry
            if wb == base:
                if wo == off:
                    return t
            elif t:
                return True
        return (base, off) in self.mem_entry

    def read(self, spec) -> list:
        if type(spec) is SReg:
            r = spec.reg * 4
            return [(r + b) in self.regs for b in range(spec.width)]
        if type(spec) is SMem:
            return [self.mem(spec.base, (spec.off + b) & MASK32) for b in range(spec.width)]
        return [False] * spec.width

    def write(self, spec, flags):
        if type(spec) is SReg:
            r = spec.reg * 4
            for b, t in enumerate(flags):
                if t:
                    self.regs.add(r + b)
                else:
                    self.regs.discard(r + b)
        else:
            for b, t in enumerate(flags):
                self.log.append((spec.base, (spec.off + b) & MASK32, t))

    def exit_set(self) -> frozenset:
        out = {RegByte(k >> 2, k & 3) for k in self.regs}
        named = set(self.mem_entry)
        named.update((e[0], e[1]) for e in self.log if e is not _WILD)
        out.update(SymByte(b, o) for b, o in named if self.mem(b, o))
        if _WILD in self.log:
            out.add(ANY_MEMORY)
        return frozenset(out)


def taint_flow(block, entry_tainted) -> tuple:
    """Decide which handlers a block needs for a given entry taint case.

    ``block`` is a sequence of taint ops (None where an instruction has no
    handler) or an object exposing one as ``.ops``.  Returns the set of
    positions that must be instrumented and the possibly-tainted
    locations at block exit.
    """
    ops = getattr(block, "ops", block)
    facts = _Facts(entry_tainted)
    instrument = set()
    for idx, top in enumerate(ops):
        if top is None:
            continue
        kind = top.kind
        if kind in ALWAYS:
            instrument.add(idx)
            if kind == "copyn":
                facts.log.append(_WILD)
            elif kind == "read":
                facts.write(top.dst, [True] * top.dst.width)
            elif kind == "alloc":
                facts.write(top.dst, [True] * 4)
            else:
                facts.write(top.dst, [False] * top.dst.width)
            continue
        width = top.dst.width
        srcs = [facts.read(s) for s in top.srcs]
        any_src = any(any(f) for f in srcs)
        if any_src or any(facts.read(top.dst)):
            instrument.add(idx)
        if top.coupled:
            out = [any_src] * width
        elif len(srcs) == 1:
            out = srcs[0]
        else:
            out = [a or b for a, b in zip(*srcs)]
        facts.write(top.dst, out)
    return frozenset(instrument), facts.exit_set()


def handler_positions(block) -> frozenset:
    """Positions of every instruction that carries a taint handler."""
    ops = getattr(block, "ops", block)
    return frozenset(i for i, top in enumerate(ops) if top is not None)


def entry_set(regs, mems, mask: int) -> set:
    """Expand a case mask over declared operands (registers first, then
    ``SMem`` operands) into entry-relative byte locations."""
    out = set()
    for i, r in enumerate(regs):
        if (mask >> i) & 1:
            out.update(RegByte(r, b) for b in range(4))
    n = len(regs)
    for i, m in enumerate(mems):
        if (mask >> (n + i)) & 1:
            out.update(SymByte(m.base, (m.off + b) & MASK32) for b in range(m.width))
    return out

