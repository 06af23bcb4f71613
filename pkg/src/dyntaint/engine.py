"""Execution core: truncated blocks, per-case variants, dispatch and stats.

Every block entry computes a case mask from the taint status of the
block's declared operands and selects a variant:

* NONE      the mask-0 copy (only always-instrumented intrinsics run)
* ADAPTIVE  a generated copy that runs the handlers a dataflow pass kept
* FULL      every handler runs

Concrete semantics always run, so taint never changes guest behaviour.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

from .dataflow import entry_set, handler_positions, taint_flow
from .isa import (
    CONTROL_CLASSES, MASK32, SP, Instruction, MachineState, Mem, OpClass, Program, Reg, SMem,
    SReg, SymRegs, UnresolvedAddress, leaders, resolve, spec_keys, step, taint_op,
)
from .policy import Policy, PolicyError, apply_binary, apply_unary, meet_fold
from .shadow import ShadowResourceError, ShadowState

MODES = ("full", "static-fp", "dynamic-fp")
HANDLER_MODES = ("call", "inline")
MAX_MASK_BITS = 32


@dataclass
class EngineConfig:
    mode: str = "dynamic-fp"
    handlers: str = "call"
    threshold: int = 16
    max_paths: int = 8
    revert_limit: int = 3
    max_steps: int = 1_000_000
    shadow_max_pages: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.handlers not in HANDLER_MODES:
            raise ValueError(f"unknown handler cost mode {self.handlers!r}")
        if self.threshold < 1:
            raise ValueError("threshold must be at least 1")
        if self.max_paths < 0 or self.revert_limit < 1:
            raise ValueError("max_paths must be >= 0 and revert_limit >= 1")


# -- truncation ------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncatedBlock:
    start: int
    instrs: tuple
    ops: tuple          # taint op per instruction (None: no handler)
    regs: tuple         # declared registers, first-appearance order
    mems: tuple         # declared SMem operands, instruction order
    handlers: frozenset

    def __len__(self):
        return len(self.instrs)

    @property
    def declared(self) -> int:
        return len(self.regs) + len(self.mems)

    @property
    def demoted(self) -> bool:
        return self.declared > MAX_MASK_BITS

    @property
    def full_mask(self) -> int:
        if self.demoted:
            return MASK32
        return (1 << self.declared) - 1


def _head_length(instrs: Sequence[Instruction], input_buffer) -> int:
    """Length of the longest prefix whose memory addresses are all
    computable from the registers at its first instruction."""
    sym = SymRegs()
    for i, instr in enumerate(instrs):
        if i:
            if any(a is None for a in sym.required(instr)):
                return i
            try:
                taint_op(instr, sym, input_buffer)
            except UnresolvedAddress:
                return i
        sym.apply(instr)
    return len(instrs)


def _declare(ops) -> tuple:
    regs, mems = [], []
    for top in ops:
        if top is None or top.kind not in ("unary", "binary"):
            continue
        for spec in (*top.srcs, top.dst):
            if type(spec) is SReg:
                if spec.reg not in regs:
                    regs.append(spec.reg)
            elif type(spec) is SMem and spec not in mems:
                mems.append(spec)
    return tuple(regs), tuple(mems)


def make_block(instrs: Sequence[Instruction], start: int = 0, input_buffer=None) -> TruncatedBlock:
    """Analyse an already truncated instruction run."""
    sym = SymRegs()
    ops = []
    for instr in instrs:
        ops.append(taint_op(instr, sym, input_buffer))
        sym.apply(instr)
    regs, mems = _declare(ops)
    return TruncatedBlock(start, tuple(instrs), tuple(ops), regs, mems, handler_positions(ops))


def truncate_block(instrs: Sequence[Instruction], start: int = 0, input_buffer=None) -> list:
    """Split a block wherever a memory address stops being expressible as
    an entry register plus a constant; returns the analysed sub-blocks."""
    out = []
    instrs = list(instrs)
    while instrs:
        n = _head_length(instrs, input_buffer)
        out.append(make_block(instrs[:n], start, input_buffer))
        start += n
        instrs = instrs[n:]
    return out


# -- variant tables ------------------------------------------------------------------------

NONE, ADAPTIVE, FULL = "NONE", "ADAPTIVE", "FULL"


class Variant(NamedTuple):
    kind: str
    instrument: Optional[frozenset]  # None: every handler


FULL_VARIANT = Variant(FULL, None)
MISS = None


class BlockVariantTable:
    def __init__(self, block: TruncatedBlock):
        self.block = block
        none_set, _ = taint_flow(block, ())
        self.cases: dict = {}
        self.order: list = []
        self._register(0, Variant(NONE, none_set))
        if block.full_mask:  # no declared operands: mask 0 is the only case
            self._register(block.full_mask, FULL_VARIANT)
        self.misses: dict = {}
        self.generated = 0
        self.reverts = 0
        self.flushes = 0
        self.monitoring = not block.demoted
        self.elided: list = []
        self.entries = 0
        self.exec_none = 0
        self.exec_fp = 0
        self.exec_full = 0

    def _register(self, mask: int, variant: Variant):
        if mask not in self.cases:
            self.order.append(mask)
        self.cases[mask] = variant

    def adaptive_masks(self) -> list:
        return [m for m in self.order if self.cases[m].kind == ADAPTIVE]


def encode_case_mask(table: BlockVariantTable, shadow: ShadowState, entry_regs) -> int:
    blk = table.block
    mask = shadow.reg_case_bits(blk.regs) if blk.regs else 0
    n = len(blk.regs)
    for i, m in enumerate(blk.mems):
        a = m.off if m.base is None else (entry_regs[m.base] + m.off) & MASK32
        if shadow.region_tainted(a, m.width):
            mask |= 1 << (n + i)
    if blk.demoted and mask:
        return blk.full_mask
    return mask


def dispatch(table: BlockVariantTable, mask: int):
    """Variant for ``mask``, or MISS.  Equivalent to comparing against
    mask 0 and then every registered mask in registration order."""
    if mask == 0:
        return table.cases[0]
    return table.cases.get(mask, MISS)


def on_miss(table: BlockVariantTable, mask: int, config: EngineConfig, stats=None) -> str:
    """Miss bookkeeping and just-in-time path generation.  Returns the
    action taken: ``count``, ``generate``, ``revert`` or ``pin``."""
    if stats is not None:
        stats.clean_calls += 1
    if table.generated >= config.max_paths:
        table._register(mask, FULL_VARIANT)
        table.monitoring = False
        return "pin"
    count = table.misses.get(mask, 0) + 1
    table.misses[mask] = count
    if count < config.threshold:
        return "count"
    blk = table.block
    instrument, _ = taint_flow(blk, entry_set(blk.regs, blk.mems, mask))
    elided = len(blk.handlers - instrument)
    if elided:
        table._register(mask, Variant(ADAPTIVE, instrument))
        table.generated += 1
        table.flushes += 1
        table.elided.append(elided)
        return "generate"
    table._register(mask, FULL_VARIANT)
    table.reverts += 1
    if table.reverts >= config.revert_limit:
        table.monitoring = False
    return "revert"


# -- statistics ------------------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "% BB Instrum.", "Avg. BB Size", "Avg. Instr Elided", "# FP Gen.", "# Revert",
    "# Exec. None", "# Exec. FP", "# Exec. Full", "% Exec. None", "% Exec. FP", "% Exec. Full",
]


@dataclass
class BlockStats:
    start: int
    size: int
    declared: int
    handlers: int
    instrumentable: bool
    entries: int = 0
    exec_none: int = 0
    exec_fp: int = 0
    exec_full: int = 0
    fp_generated: int = 0
    reverts: int = 0
    flushes: int = 0
    misses: int = 0
    elided: list = field(default_factory=list)


@dataclass
class ExecStats:
    block_entries: int = 0
    exec_none: int = 0
    exec_fp: int = 0
    exec_full: int = 0
    fp_generated: int = 0
    reverts: int = 0
    flushes: int = 0
    handler_invocations: int = 0
    context_switches: int = 0
    clean_calls: int = 0
    untaint_events: int = 0
    policy_slow_paths: int = 0
    steps: int = 0
    gc_runs: int = 0
    blocks: list = field(default_factory=list)

    def summary(self) -> dict:
        blocks = self.blocks
        nb = len(blocks)
        elided = [e for b in blocks for e in b.elided]
        total = self.block_entries or 1
        pct = lambda x: round(100.0 * x / total, 2) if self.block_entries else 0.0
        return {
            "% BB Instrum.": round(100.0 * sum(b.instrumentable for b in blocks) / nb, 2) if nb else 0.0,
            "Avg. BB Size": round(sum(b.size for b in blocks) / nb, 2) if nb else 0.0,
            "Avg. Instr Elided": round(sum(elided) / len(elided), 2) if elided else 0.0,
            "# FP Gen.": self.fp_generated,
            "# Revert": self.reverts,
            "# Exec. None": self.exec_none,
            "# Exec. FP": self.exec_fp,
            "# Exec. Full": self.exec_full,
            "% Exec. None": pct(self.exec_none),
            "% Exec. FP": pct(self.exec_fp),
            "% Exec. Full": pct(self.exec_full),
        }

    def to_json(self) -> dict:
        agg = {k: v for k, v in asdict(self).items() if k != "blocks"}
        agg["summary"] = self.summary()
        return {"blocks": [asdict(b) for b in self.blocks], "aggregate": agg}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> "ExecStats":
        if not isinstance(doc, dict) or "aggregate" not in doc or "blocks" not in doc:
            raise ValueError("stats document needs 'aggregate' and 'blocks'")
        agg = dict(doc["aggregate"])
        agg.pop("summary", None)
        names = {f for f in cls.__dataclass_fields__ if f != "blocks"}
        missing = names - agg.keys()
        if missing:
            raise ValueError(f"stats document lacks {sorted(missing)}")
        out = cls(**{k: agg[k] for k in names})
        out.blocks = [BlockStats(**b) for b in doc["blocks"]]
        return out


def summary_csv(rows: dict) -> str:
    """CSV text for ``{name: ExecStats}``, one row per run."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Run"] + SUMMARY_COLUMNS)
    for name, stats in rows.items():
        t = stats.summary()
        w.writerow([name] + [t[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()


# -- events ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlEvent:
    pc: int
    kind: str
    target: int
    keys: tuple  # shadow slots holding the target value


@dataclass(frozen=True)
class MemEvent:
    pc: int
    base: int  # address register
    addr: int
    width: int
    write: bool


@dataclass(frozen=True)
class AllocEvent:
    pc: int
    reg: int


@dataclass(frozen=True)
class FreeEvent:
    pc: int
    reg: int
    label: int
    prior: object  # (status, site) from the policy, or None
    addr: int


@dataclass(frozen=True)
class CmpEvent:
    pc: int
    operands: tuple  # per operand: tuple of shadow slots (empty for immediates)


@dataclass(frozen=True)
class AddrEvent:
    pc: int
    base: int
    keys: tuple


@dataclass(frozen=True)
class FaultEvent:
    pc: int
    reason: str
    addr: Optional[int]


def _reg_slots(r: int) -> tuple:
    return tuple(-(r * 4 + b) - 1 for b in range(4))


def _operand_slots(state: MachineState, o, width: int) -> tuple:
    if type(o) is Reg:
        return tuple(-(o.n * 4 + b) - 1 for b in range(width))
    if type(o) is Mem:
        a = state.ea(o)
        return tuple((a + b) & MASK32 for b in range(width))
    return ()


# -- execution -------------------------------------------------------------------------------


@dataclass
class ExecResult:
    state: MachineState
    shadow: ShadowState
    stats: ExecStats
    tables: dict
    error: Optional[BaseException] = None


class Engine:
    def __init__(self, program: Program, policy: Policy, config: Optional[EngineConfig] = None,
                 hooks: Sequence[Callable] = (), input_data: bytes = b""):
        self.program = program
        self.policy = policy
        self.config = config or EngineConfig()
        self.hooks = list(hooks)
        self.state = MachineState.for_program(program, input_data)
        self.shadow = ShadowState(self.config.shadow_max_pages, getattr(policy, "on_replace", None))
        self.stats = ExecStats()
        self.tables: dict = {}
        self._leaders = leaders(program)

    # blocks are discovered lazily from the pc control actually reaches
    def _table(self, pc: int) -> BlockVariantTable:
        table = self.tables.get(pc)
        if table is None:
            instrs = self.program.instructions
            end = pc
            while end < len(instrs):
                end += 1
                if instrs[end - 1].cls in CONTROL_CLASSES or end in self._leaders:
                    break
            head = truncate_block(instrs[pc:end], pc, self.program.input_buffer)[0]
            table = BlockVariantTable(head)
            self.tables[pc] = table
        return table

    def run(self) -> ExecResult:
        error = None
        state = self.state
        n = len(self.program.instructions)
        try:
            while not state.halted:
                if not 0 <= state.pc < n:
                    state.fault("bad-target", state.pc)
                    self._emit_fault(state.faults[-1])
                    state.halted = True
                    break
                self._run_block(self._table(state.pc))
        except (ShadowResourceError, PolicyError) as exc:
            error = exc  # the run aborts but keeps its partial stats
        self._finish()
        return ExecResult(state, self.shadow, self.stats, self.tables, error)

    def _select(self, table: BlockVariantTable, entry_regs) -> Variant:
        mode = self.config.mode
        if mode == "full":
            return FULL_VARIANT
        mask = encode_case_mask(table, self.shadow, entry_regs)
        variant = dispatch(table, mask)
        if variant is MISS:
            if mode == "dynamic-fp" and table.monitoring:
                on_miss(table, mask, self.config, self.stats)
            return FULL_VARIANT
        return variant

    def _run_block(self, table: BlockVariantTable):
        blk = table.block
        entry_regs = list(self.state.regs)
        variant = self._select(table, entry_regs)
        table.entries += 1
        if variant.kind == NONE:
            table.exec_none += 1
        elif variant.kind == ADAPTIVE:
            table.exec_fp += 1
        else:
            table.exec_full += 1
        self.exec_block(blk, variant.instrument, entry_regs)

    def exec_block(self, blk: TruncatedBlock, keep: Optional[frozenset], entry_regs=None):
        """Run ``blk`` from the current state, executing the handlers at
        positions in ``keep`` (all handlers when ``keep`` is None)."""
        state, stats = self.state, self.stats
        if entry_regs is None:
            entry_regs = list(state.regs)
        call_mode = self.config.handlers == "call"
        max_steps = self.config.max_steps
        hooks = self.hooks
        for i, instr in enumerate(blk.instrs):
            if state.steps >= max_steps:
                state.fault("step-limit")
                state.halted = True
                self._emit_fault(state.faults[-1])
                return
            pc = state.pc
            if hooks:
                self._pre_events(instr, pc)
            if instr.cls is OpClass.FREE:
                self._free(instr, pc)
            top = blk.ops[i]
            if top is not None and (keep is None or i in keep):
                self._handler(top, entry_regs, pc)
                stats.handler_invocations += 1
                if call_mode:
                    stats.context_switches += 1
            nfaults = len(state.faults)
            step(state, instr)
            if hooks and len(state.faults) > nfaults:
                for f in state.faults[nfaults:]:
                    self._emit_fault(f)
            if state.halted:
                return

    def _handler(self, top, er, pc: int):
        sh, pol = self.shadow, self.policy
        kind = top.kind
        if kind == "unary":
            dk = spec_keys(top.dst, er)
            sk = spec_keys(top.srcs[0], er)
            labels = [sh.get(k) for k in sk] if sk is not None else [0] * len(dk)
            apply_unary(sh, pol, dk, labels, top.coupled)
        elif kind == "binary":
            dk = spec_keys(top.dst, er)
            k1 = spec_keys(top.srcs[0], er)
            k2 = spec_keys(top.srcs[1], er)
            l1 = [sh.get(k) for k in k1] if k1 is not None else [0] * len(dk)
            l2 = [sh.get(k) for k in k2] if k2 is not None else [0] * len(dk)
            apply_binary(sh, pol, dk, l1, l2, top.coupled)
        elif kind == "copyn":
            d, s, c = (resolve(v, er) for v in top.srcs)
            for k in range(c & 0xFFFF):
                sh.set((d + k) & MASK32, pol.srcdst(sh.get((s + k) & MASK32)))
        elif kind == "read":
            addr, length = top.dst.off, top.dst.width
            for k in range(min(length, len(self.state.input))):
                sh.set((addr + k) & MASK32, pol.input_label(k))
        elif kind == "alloc":
            label = pol.alloc_label(pc)
            for k in spec_keys(top.dst, er):
                sh.set(k, label)
        elif kind == "untaint":
            untaint_unsupported(self, spec_keys(top.dst, er))

    def _free(self, instr: Instruction, pc: int):
        r = instr.srcs[0].n
        label = meet_fold(self.policy, [self.shadow.get(k) for k in _reg_slots(r)])
        prior = self.policy.on_free(label)
        if self.hooks:
            self._emit(FreeEvent(pc, r, label, prior, self.state.regs[r]))

    def _pre_events(self, instr: Instruction, pc: int):
        state = self.state
        cls = instr.cls
        if cls is OpClass.IJMP or cls is OpClass.ICALL:
            r = instr.srcs[0].n
            self._emit(ControlEvent(pc, cls.value, state.regs[r], _reg_slots(r)))
        elif cls is OpClass.RET:
            sp = state.regs[SP]
            keys = tuple((sp + b) & MASK32 for b in range(4))
            self._emit(ControlEvent(pc, "ret", state.peek_mem(sp, 4), keys))
        elif cls is OpClass.CMP:
            ops = tuple(_operand_slots(state, o, instr.width) for o in instr.srcs)
            self._emit(CmpEvent(pc, ops))
        elif cls is OpClass.ADDR:
            m = instr.srcs[0]
            self._emit(AddrEvent(pc, m.base, _reg_slots(m.base)))
        elif cls is OpClass.ALLOC:
            self._emit(AllocEvent(pc, instr.dst.n))
        elif cls is OpClass.COPYN:
            d, s, c = (state.regs[r.n] for r in instr.srcs)
            n = c & 0xFFFF
            if n:
                self._emit(MemEvent(pc, instr.srcs[1].n, s, n, False))
                self._emit(MemEvent(pc, instr.srcs[0].n, d, n, True))
        if cls is not OpClass.ADDR:
            for o, write in ((instr.dst, True), *((s, False) for s in instr.srcs)):
                if type(o) is Mem:
                    self._emit(MemEvent(pc, o.base, state.ea(o), instr.width, write))

    def _emit(self, event):
        for hook in self.hooks:
            hook(event, self)

    def _emit_fault(self, fault):
        if self.hooks:
            self._emit(FaultEvent(fault.pc, fault.reason, fault.addr))

    def _finish(self):
        stats = self.stats
        stats.blocks = []
        for start in sorted(self.tables):
            t = self.tables[start]
            blk = t.block
            b = BlockStats(
                start=start, size=len(blk), declared=blk.declared, handlers=len(blk.handlers),
                instrumentable=len(blk) > 1 and bool(blk.handlers),
                entries=t.entries, exec_none=t.exec_none, exec_fp=t.exec_fp, exec_full=t.exec_full,
                fp_generated=t.generated, reverts=t.reverts, flushes=t.flushes,
                misses=sum(t.misses.values()), elided=list(t.elided),
            )
            stats.blocks.append(b)
        blocks = stats.blocks
        stats.block_entries = sum(b.entries for b in blocks)
        stats.exec_none = sum(b.exec_none for b in blocks)
        stats.exec_fp = sum(b.exec_fp for b in blocks)
        stats.exec_full = sum(b.exec_full for b in blocks)
        stats.fp_generated = sum(b.fp_generated for b in blocks)
        stats.reverts = sum(b.reverts for b in blocks)
        stats.flushes = sum(b.flushes for b in blocks)
        stats.policy_slow_paths = self.policy.slow_paths()
        stats.steps = self.state.steps
        stats.gc_runs = self.shadow.gc_runs


def untaint_unsupported(engine: Engine, keys) -> None:
    """Fallback for instructions without a handler: clear every
    destination label through a (counted) clean call."""
    for k in keys:
        engine.shadow.set(k, 0)
    engine.stats.clean_calls += 1
    engine.stats.untaint_events += 1


def execute(program: Program, policy: Policy, config: Optional[EngineConfig] = None,
            hooks: Sequence[Callable] = (), input_data: bytes = b"") -> ExecResult:
    return Engine(program, policy, config, hooks, input_data).run()
