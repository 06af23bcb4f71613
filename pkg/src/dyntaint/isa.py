"""Mini register machine: instructions, parser, concrete semantics, blocks.

The machine has sixteen 32-bit registers (``r15`` is the stack pointer),
a sparse byte-addressed memory and a small heap allocator that never
recycles addresses.  Code addresses are instruction indices.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

MASK32 = 0xFFFFFFFF
NUM_REGS = 16
SP = 15
STACK_TOP = 0x7FFF0000
STACK_SIZE = 0x10000
HEAP_BASE = 0x40000000
HEAP_GAP = 16
COPYN_LIMIT = 0xFFFF


class OpClass(enum.Enum):
    TRANSFER = "transfer"
    INDEP_ALU = "indep-alu"
    COUPLED_ALU = "coupled-alu"
    ADDR = "addr"
    COPYN = "copyn"
    CMP = "cmp"
    BRANCH = "branch"
    IJMP = "ijmp"
    ICALL = "icall"
    RET = "ret"
    ALLOC = "alloc"
    FREE = "free"
    READ_INPUT = "read-input"
    HALT = "halt"
    # never produced by the parser; exercises the untainting hook
    UNSUPPORTED = "unsupported"


OPCODES = {
    "mov": OpClass.TRANSFER,
    "load": OpClass.TRANSFER,
    "store": OpClass.TRANSFER,
    "push": OpClass.TRANSFER,
    "pop": OpClass.TRANSFER,
    "or": OpClass.INDEP_ALU,
    "and": OpClass.INDEP_ALU,
    "xor": OpClass.INDEP_ALU,
    "not": OpClass.INDEP_ALU,
    "add": OpClass.COUPLED_ALU,
    "sub": OpClass.COUPLED_ALU,
    "mul": OpClass.COUPLED_ALU,
    "shl": OpClass.COUPLED_ALU,
    "shr": OpClass.COUPLED_ALU,
    "lea": OpClass.ADDR,
    "copyn": OpClass.COPYN,
    "cmp": OpClass.CMP,
    "jmp": OpClass.BRANCH,
    "je": OpClass.BRANCH,
    "jz": OpClass.BRANCH,
    "jne": OpClass.BRANCH,
    "jnz": OpClass.BRANCH,
    "jl": OpClass.BRANCH,
    "jge": OpClass.BRANCH,
    "jb": OpClass.BRANCH,
    "jae": OpClass.BRANCH,
    "call": OpClass.BRANCH,
    "ijmp": OpClass.IJMP,
    "icall": OpClass.ICALL,
    "ret": OpClass.RET,
    "alloc": OpClass.ALLOC,
    "free": OpClass.FREE,
    "read": OpClass.READ_INPUT,
    "halt": OpClass.HALT,
}

CONTROL_CLASSES = frozenset(
    {OpClass.BRANCH, OpClass.IJMP, OpClass.ICALL, OpClass.RET, OpClass.HALT}
)
WIDTH_SUFFIX = {"b": 1, "w": 2, "d": 4}


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# -- operands -----------------------------------------------------------------


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self):
        return f"r{self.n}"


@dataclass(frozen=True)
class Imm:
    value: int  # unsigned 32-bit

    def __str__(self):
        return hex(self.value)


@dataclass(frozen=True)
class Mem:
    base: int
    disp: int = 0  # signed

    def __str__(self):
        if not self.disp:
            return f"[r{self.base}]"
        sign = "+" if self.disp > 0 else "-"
        return f"[r{self.base}{sign}{abs(self.disp)}]"


Operand = Union[Reg, Imm, Mem]


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.

    ``srcs`` lists the operands read by the instruction in evaluation
    order; for the two-operand ALU form the destination appears as the
    first source.  ``target`` is the resolved index of a direct branch.
    """

    op: str
    cls: OpClass
    width: int = 4
    dst: Optional[Operand] = None
    srcs: tuple = ()
    target: Optional[int] = None
    line: int = 0

    def __str__(self):
        name = self.op if self.width == 4 else f"{self.op}.{'bw?d'[self.width - 1]}"
        parts = []
        if self.dst is not None:
            parts.append(str(self.dst))
        srcs = self.srcs
        if self.cls in (OpClass.INDEP_ALU, OpClass.COUPLED_ALU) and srcs and srcs[0] == self.dst:
            srcs = srcs[1:]
        parts.extend(str(s) for s in srcs)
        if self.target is not None:
            parts.append(str(self.target))
        return f"{name} {', '.join(parts)}".strip()


@dataclass(frozen=True)
class Program:
    instructions: tuple
    entry: int = 0
    labels: dict = field(default_factory=dict, compare=False)
    input_buffer: Optional[tuple] = None  # (address, length)

    def __len__(self):
        return len(self.instructions)


# -- locations -------------------------------------------------------------------


class RegByte(NamedTuple):
    reg: int
    byte: int

    @property
    def key(self) -> int:
        return -(self.reg * 4 + self.byte) - 1

    def __str__(self):
        return f"r{self.reg}.b{self.byte}"


class MemByte(NamedTuple):
    addr: int

    @property
    def key(self) -> int:
        return self.addr

    def __str__(self):
        return f"mem:{self.addr:#010x}"


Location = Union[RegByte, MemByte]


def reg_key(reg: int, byte: int) -> int:
    """Integer slot used internally for a register byte (always negative)."""
    return -(reg * 4 + byte) - 1


def key_location(key: int) -> Location:
    if key < 0:
        k = -key - 1
        return RegByte(k >> 2, k & 3)
    return MemByte(key)


# -- parsing -----------------------------------------------------------------------

_REG_RE = re.compile(r"^(?:r(\d+)|sp)$")
_MEM_RE = re.compile(r"^\[\s*(r\d+|sp)\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+)\s*)?\]$")
_LABEL_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_INT_RE = re.compile(r"^-?(0x[0-9a-fA-F]+|\d+)$")


def _parse_int(tok: str) -> int:
    return int(tok, 0)


def _fits(value: int, width: int) -> bool:
    bits = 8 * width
    return -(1 << (bits - 1)) <= value < (1 << bits)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.labels: dict[str, int] = {}
        self.rows: list[tuple[str, int, list[str], int]] = []
        self.entry_label: Optional[tuple[str, int]] = None
        self.input_buffer = None

    def parse(self) -> Program:
        for lineno, raw in enumerate(self.text.splitlines(), start=1):
            line = raw.split(";", 1)[0].strip()
            while line:
                m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$", line)
                if not m or m.group(1).startswith("."):
                    break
                name = m.group(1)
                if name in self.labels:
                    raise ParseError(f"duplicate label {name!r}", lineno)
                self.labels[name] = len(self.rows)
                line = m.group(2).strip()
            if not line:
                continue
            if line.startswith("."):
                self._directive(line, lineno)
                continue
            mnemonic, *rest = line.split(None, 1)
            rest = rest[0] if rest else ""
            args = [a.strip() for a in rest.split(",")] if rest.strip() else []
            if any(not a for a in args):
                raise ParseError("empty operand", lineno)
            self.rows.append((mnemonic.lower(), lineno, args, len(self.rows)))

        instrs = [self._instruction(*row) for row in self.rows]
        entry = 0
        if self.entry_label is not None:
            name, lineno = self.entry_label
            if name not in self.labels:
                raise ParseError(f"undefined label {name!r}", lineno)
            entry = self.labels[name]
        if self.input_buffer is None and any(i.cls is OpClass.READ_INPUT for i in instrs):
            line = next(i.line for i in instrs if i.cls is OpClass.READ_INPUT)
            raise ParseError("read without an .input directive", line)
        return Program(tuple(instrs), entry, dict(self.labels), self.input_buffer)

    def _directive(self, line: str, lineno: int):
        parts = line.split()
        if parts[0] == ".input":
            if len(parts) != 3:
                raise ParseError(".input expects an address and a length", lineno)
            try:
                addr, length = _parse_int(parts[1]), _parse_int(parts[2])
            except ValueError:
                raise ParseError("bad .input operands", lineno) from None
            if not (0 <= addr <= MASK32 and 0 <= length and addr + length <= MASK32 + 1):
                raise ParseError("input buffer out of range", lineno)
            lo, hi = STACK_TOP - STACK_SIZE, STACK_TOP
            if addr < hi and addr + length > lo:
                raise ParseError("input buffer overlaps the stack", lineno)
            self.input_buffer = (addr, length)
        elif parts[0] == ".entry":
            if len(parts) != 2:
                raise ParseError(".entry expects a label", lineno)
            self.entry_label = (parts[1], lineno)
        else:
            raise ParseError(f"unknown directive {parts[0]!r}", lineno)

    def _operand(self, tok: str, lineno: int, width: int) -> Operand:
        m = _REG_RE.match(tok)
        if m:
            n = SP if m.group(1) is None else int(m.group(1))
            if n >= NUM_REGS:
                raise ParseError(f"no such register {tok!r}", lineno)
            return Reg(n)
        m = _MEM_RE.match(tok)
        if m:
            base = self._operand(m.group(1), lineno, 4).n
            disp = _parse_int(m.group(3)) if m.group(3) else 0
            if m.group(2) == "-":
                disp = -disp
            if not -(1 << 31) <= disp <= MASK32:
                raise ParseError("displacement out of range", lineno)
            return Mem(base, disp)
        if _INT_RE.match(tok):
            value = _parse_int(tok)
            if not _fits(value, width):
                raise ParseError(f"width mismatch: {tok} does not fit in {width} bytes", lineno)
            return Imm(value & ((1 << (8 * width)) - 1))
        if _LABEL_RE.match(tok):
            if tok not in self.labels:
                raise ParseError(f"undefined label {tok!r}", lineno)
            return Imm(self.labels[tok])
        raise ParseError(f"bad operand {tok!r}", lineno)

    def _instruction(self, mnemonic: str, lineno: int, args: list, index: int) -> Instruction:
        op, _, suffix = mnemonic.partition(".")
        if op not in OPCODES:
            raise ParseError(f"unknown opcode {op!r}", lineno)
        cls = OPCODES[op]
        if suffix:
            if suffix not in WIDTH_SUFFIX:
                raise ParseError(f"bad width suffix {suffix!r}", lineno)
            width = WIDTH_SUFFIX[suffix]
        else:
            width = 4
        sized = op in ("mov", "load", "store", "or", "and", "xor", "not", "add", "sub",
                       "mul", "shl", "shr", "cmp")
        if width != 4 and not sized:
            raise ParseError(f"width mismatch: {op} only operates on 4 bytes", lineno)

        def need(n_min, n_max=None):
            n_max = n_min if n_max is None else n_max
            if not n_min <= len(args) <= n_max:
                raise ParseError(f"{op} expects {n_min}..{n_max} operands, got {len(args)}", lineno)

        if cls is OpClass.BRANCH:
            need(1)
            if args[0] not in self.labels:
                if _LABEL_RE.match(args[0]):
                    raise ParseError(f"undefined label {args[0]!r}", lineno)
                raise ParseError(f"bad branch target {args[0]!r}", lineno)
            if self.labels[args[0]] >= len(self.rows):
                raise ParseError(f"label {args[0]!r} points past the last instruction", lineno)
            return Instruction(op, cls, 4, target=self.labels[args[0]], line=lineno)

        ops = [self._operand(a, lineno, width) for a in args]
        mems = sum(isinstance(o, Mem) for o in ops)
        if mems > 1:
            raise ParseError("at most one memory operand per instruction", lineno)

        def reg_at(i):
            if not isinstance(ops[i], Reg):
                raise ParseError(f"{op} operand {i + 1} must be a register", lineno)
            return ops[i]

        def writable(o):
            if isinstance(o, Imm):
                raise ParseError(f"{op} destination cannot be an immediate", lineno)
            return o

        if op in ("mov", "load", "store"):
            need(2)
            dst, src = writable(ops[0]), ops[1]
            if op == "load" and not (isinstance(dst, Reg) and isinstance(src, Mem)):
                raise ParseError("load expects a register and a memory operand", lineno)
            if op == "store" and not isinstance(dst, Mem):
                raise ParseError("store expects a memory destination", lineno)
            return Instruction(op, cls, width, dst, (src,), line=lineno)
        if op == "push":
            need(1)
            if isinstance(ops[0], Mem):
                raise ParseError("push takes a register or an immediate", lineno)
            return Instruction(op, cls, 4, None, (ops[0],), line=lineno)
        if op == "pop":
            need(1)
            return Instruction(op, cls, 4, reg_at(0), (), line=lineno)
        if op == "not":
            need(1, 2)
            dst = writable(ops[0])
            return Instruction(op, cls, width, dst, (ops[-1],), line=lineno)
        if cls in (OpClass.INDEP_ALU, OpClass.COUPLED_ALU):
            need(2, 3)
            dst = writable(ops[0])
            srcs = (dst, ops[1]) if len(ops) == 2 else (ops[1], ops[2])
            if len(ops) == 3 and isinstance(dst, Mem) and any(isinstance(s, Mem) for s in srcs):
                raise ParseError("at most one memory operand per instruction", lineno)
            return Instruction(op, cls, width, dst, srcs, line=lineno)
        if op == "lea":
            need(2)
            if not isinstance(ops[1], Mem):
                raise ParseError("lea expects a memory operand", lineno)
            return Instruction(op, cls, 4, reg_at(0), (ops[1],), line=lineno)
        if op == "copyn":
            need(3)
            return Instruction(op, cls, 4, None, (reg_at(0), reg_at(1), reg_at(2)), line=lineno)
        if op == "cmp":
            need(2)
            return Instruction(op, cls, width, None, (ops[0], ops[1]), line=lineno)
        if op in ("ijmp", "icall", "free"):
            need(1)
            return Instruction(op, cls, 4, None, (reg_at(0),), line=lineno)
        if op == "alloc":
            need(2)
            if isinstance(ops[1], Mem):
                raise ParseError("alloc size must be a register or an immediate", lineno)
            return Instruction(op, cls, 4, reg_at(0), (ops[1],), line=lineno)
        need(0)
        return Instruction(op, cls, 4, line=lineno)


def parse_program(text: str) -> Program:
    """Parse assembly text into a :class:`Program` with resolved labels."""
    return _Parser(text).parse()


# -- machine state -------------------------------------------------------------------

WMASK = {1: 0xFF, 2: 0xFFFF, 4: MASK32}
LIVE, FREED = "LIVE", "FREED"


@dataclass
class HeapChunk:
    size: int
    status: str = LIVE


@dataclass(frozen=True)
class Fault:
    pc: int
    reason: str
    addr: Optional[int] = None


class MachineState:
    """Concrete guest state.

    Data reads and writes go through ``read_reg``/``write_reg``/``read_mem``/
    ``write_mem`` so a subclass can observe them; address computation, flag
    reads and control-target reads use the registers directly.
    """

    def __init__(self, input_data: bytes = b"", input_buffer=None, entry: int = 0):
        self.regs = [0] * NUM_REGS
        self.regs[SP] = STACK_TOP
        self.mem: dict[int, int] = {}
        self.pc = entry
        self.halted = False
        self.heap: dict[int, HeapChunk] = {}
        self.next_heap = HEAP_BASE
        self.flags = (0, 0, 4)
        self.input = bytes(input_data)
        self.input_buffer = input_buffer
        self.faults: list[Fault] = []
        self.steps = 0

    @classmethod
    def for_program(cls, program: Program, input_data: bytes = b"") -> "MachineState":
        return cls(input_data, program.input_buffer, program.entry)

    def read_reg(self, r: int, w: int) -> int:
        return self.regs[r] & WMASK[w]

    def write_reg(self, r: int, w: int, v: int):
        if w == 4:
            self.regs[r] = v & MASK32
        else:
            m = WMASK[w]
            self.regs[r] = (self.regs[r] & ~m & MASK32) | (v & m)

    def read_mem(self, a: int, w: int) -> int:
        return self.peek_mem(a, w)

    def peek_mem(self, a: int, w: int) -> int:
        mem = self.mem
        v = 0
        for i in range(w):
            v |= mem.get((a + i) & MASK32, 0) << (8 * i)
        return v

    def write_mem(self, a: int, w: int, v: int):
        mem = self.mem
        for i in range(w):
            b = (v >> (8 * i)) & 0xFF
            addr = (a + i) & MASK32
            if b:
                mem[addr] = b
            else:
                mem.pop(addr, None)

    def ea(self, m: Mem) -> int:
        return (self.regs[m.base] + m.disp) & MASK32

    def read(self, op: Operand, w: int) -> int:
        if type(op) is Reg:
            return self.read_reg(op.n, w)
        if type(op) is Imm:
            return op.value & WMASK[w]
        return self.read_mem(self.ea(op), w)

    def peek(self, op: Operand, w: int) -> int:
        if type(op) is Reg:
            return self.regs[op.n] & WMASK[w]
        if type(op) is Imm:
            return op.value & WMASK[w]
        return self.peek_mem(self.ea(op), w)

    def write(self, op: Operand, w: int, v: int):
        if type(op) is Reg:
            self.write_reg(op.n, w, v)
        else:
            self.write_mem(self.ea(op), w, v)

    def fault(self, reason: str, addr: Optional[int] = None):
        self.faults.append(Fault(self.pc, reason, addr))

    def snapshot(self) -> tuple:
        return (
            tuple(self.regs),
            tuple(sorted(self.mem.items())),
            self.pc,
            self.halted,
            tuple(sorted((a, c.size, c.status) for a, c in self.heap.items())),
            self.flags,
            tuple(self.faults),
            self.steps,
        )

    def copy(self) -> "MachineState":
        new = MachineState.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.regs = list(self.regs)
        new.mem = dict(self.mem)
        new.heap = {a: HeapChunk(c.size, c.status) for a, c in self.heap.items()}
        new.faults = list(self.faults)
        return new

    def __eq__(self, other):
        return isinstance(other, MachineState) and self.snapshot() == other.snapshot()

    __hash__ = None


def _signed(v: int, w: int) -> int:
    bits = 8 * w
    return v - (1 << bits) if v >> (bits - 1) else v


def _sem_move(s, i):
    s.write(i.dst, i.width, s.read(i.srcs[0], i.width))
    s.pc += 1


def _sem_push(s, i):
    v = s.read(i.srcs[0], 4)
    sp = (s.regs[SP] - 4) & MASK32
    s.write_mem(sp, 4, v)
    s.regs[SP] = sp
    s.pc += 1


def _sem_pop(s, i):
    sp = s.regs[SP]
    v = s.read_mem(sp, 4)
    s.regs[SP] = (sp + 4) & MASK32
    s.write_reg(i.dst.n, 4, v)
    s.pc += 1


_ALU = {
    "or": lambda a, b: a | b,
    "and": lambda a, b: a & b,
    "xor": lambda a, b: a ^ b,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "shl": lambda a, b: a << (b & 31),
    "shr": lambda a, b: a >> (b & 31),
}


def _sem_alu(s, i):
    w = i.width
    a = s.read(i.srcs[0], w)
    b = s.read(i.srcs[1], w)
    s.write(i.dst, w, _ALU[i.op](a, b) & WMASK[w])
    s.pc += 1


def _sem_not(s, i):
    s.write(i.dst, i.width, ~s.read(i.srcs[0], i.width) & WMASK[i.width])
    s.pc += 1


def _sem_lea(s, i):
    m = i.srcs[0]
    s.write_reg(i.dst.n, 4, s.read_reg(m.base, 4) + m.disp)
    s.pc += 1


def _sem_copyn(s, i):
    d, src, c = (s.regs[r.n] for r in i.srcs)
    for k in range(c & COPYN_LIMIT):
        s.write_mem(d + k, 1, s.read_mem(src + k, 1))
    s.pc += 1


def _sem_cmp(s, i):
    s.flags = (s.peek(i.srcs[0], i.width), s.peek(i.srcs[1], i.width), i.width)
    s.pc += 1


_CONDITIONS = {
    "jmp": lambda a, b, w: True,
    "je": lambda a, b, w: a == b,
    "jz": lambda a, b, w: a == b,
    "jne": lambda a, b, w: a != b,
    "jnz": lambda a, b, w: a != b,
    "jl": lambda a, b, w: _signed(a, w) < _signed(b, w),
    "jge": lambda a, b, w: _signed(a, w) >= _signed(b, w),
    "jb": lambda a, b, w: a < b,
    "jae": lambda a, b, w: a >= b,
}


def _sem_branch(s, i):
    s.pc = i.target if _CONDITIONS[i.op](*s.flags) else s.pc + 1


def _push_return(s):
    sp = (s.regs[SP] - 4) & MASK32
    s.write_mem(sp, 4, s.pc + 1)
    s.regs[SP] = sp


def _sem_call(s, i):
    _push_return(s)
    s.pc = i.target


def _sem_icall(s, i):
    target = s.regs[i.srcs[0].n]
    _push_return(s)
    s.pc = target


def _sem_ijmp(s, i):
    s.pc = s.regs[i.srcs[0].n]


def _sem_ret(s, i):
    sp = s.regs[SP]
    target = s.peek_mem(sp, 4)
    s.regs[SP] = (sp + 4) & MASK32
    s.pc = target


def _sem_alloc(s, i):
    size = s.peek(i.srcs[0], 4)
    addr = s.next_heap
    span = ((max(size, 1) + 15) & ~15) + HEAP_GAP
    if addr + span > STACK_TOP - STACK_SIZE:
        s.fault("out-of-memory")
        s.write_reg(i.dst.n, 4, 0)
    else:
        s.heap[addr] = HeapChunk(size)
        s.next_heap = addr + span
        s.write_reg(i.dst.n, 4, addr)
    s.pc += 1


def _sem_free(s, i):
    p = s.regs[i.srcs[0].n]
    chunk = s.heap.get(p)
    if chunk is None:
        s.fault("free-unknown", p)
    elif chunk.status == FREED:
        s.fault("double-free", p)
    else:
        chunk.status = FREED
    s.pc += 1


def _sem_read(s, i):
    addr, length = s.input_buffer
    for k in range(min(length, len(s.input))):
        s.write_mem(addr + k, 1, s.input[k])
    s.pc += 1


def _sem_halt(s, i):
    s.halted = True


def _sem_unsupported(s, i):
    s.pc += 1


_SEMANTICS = {
    "mov": _sem_move, "load": _sem_move, "store": _sem_move,
    "push": _sem_push, "pop": _sem_pop,
    "not": _sem_not, "lea": _sem_lea, "copyn": _sem_copyn, "cmp": _sem_cmp,
    "call": _sem_call, "icall": _sem_icall, "ijmp": _sem_ijmp, "ret": _sem_ret,
    "alloc": _sem_alloc, "free": _sem_free, "read": _sem_read, "halt": _sem_halt,
}
_SEMANTICS.update({op: _sem_alu for op in _ALU})
_SEMANTICS.update({op: _sem_branch for op in _CONDITIONS})


def step(state: MachineState, instr: Instruction) -> MachineState:
    """Apply the concrete semantics of ``instr`` to ``state`` (in place)."""
    if state.halted:
        raise RuntimeError("machine is halted")
    if instr.cls is OpClass.UNSUPPORTED:
        _sem_unsupported(state, instr)
    else:
        _SEMANTICS[instr.op](state, instr)
    state.steps += 1
    return state


def run_concrete(program: Program, input_data: bytes = b"", max_steps: int = 100_000,
                 state: Optional[MachineState] = None, on_step=None) -> MachineState:
    """Reference interpreter without any taint tracking."""
    s = state if state is not None else MachineState.for_program(program, input_data)
    instrs = program.instructions
    n = len(instrs)
    while not s.halted:
        if not 0 <= s.pc < n:
            s.fault("bad-target", s.pc)
            s.halted = True
            break
        if s.steps >= max_steps:
            s.fault("step-limit")
            s.halted = True
            break
        instr = instrs[s.pc]
        if on_step is not None:
            on_step(s, instr)
        step(s, instr)
    return s


# -- basic blocks --------------------------------------------------------------------


class Block(NamedTuple):
    start: int
    end: int  # exclusive


def leaders(program: Program) -> set:
    instrs = program.instructions
    out = {0, program.entry} if instrs else set()
    out.update(i for i in program.labels.values() if i < len(instrs))
    for idx, ins in enumerate(instrs):
        if ins.cls in CONTROL_CLASSES:
            if ins.target is not None:
                out.add(ins.target)
            if idx + 1 < len(instrs):
                out.add(idx + 1)
    return out


def split_blocks(program: Program) -> list:
    """Partition the program into single-entry, single-exit blocks."""
    starts = sorted(leaders(program))
    ends = starts[1:] + [len(program.instructions)]
    return [Block(s, e) for s, e in zip(starts, ends)]


# -- symbolic operands ----------------------------------------------------------------


class SReg(NamedTuple):
    reg: int
    width: int


class SMem(NamedTuple):
    base: Optional[int]  # entry register, or None for an absolute address
    off: int
    width: int


class SImm(NamedTuple):
    width: int


class TaintOp(NamedTuple):
    """Taint-relevant view of one instruction.

    ``kind`` is one of ``unary``, ``binary``, ``copyn``, ``read``, ``alloc``
    or ``untaint``.  For ``copyn`` the sources are the symbolic values of
    the destination, source and count registers.
    """

    kind: str
    coupled: bool
    dst: object
    srcs: tuple


class UnresolvedAddress(ValueError):
    pass


class SymRegs:
    """Register values relative to block entry: ``(reg, k)`` means
    entry value of ``reg`` plus ``k``, ``(None, k)`` a constant and
    ``None`` an unknown value."""

    def __init__(self):
        self.vals: list = [(r, 0) for r in range(NUM_REGS)]

    def value(self, op: Operand):
        if type(op) is Reg:
            return self.vals[op.n]
        if type(op) is Imm:
            return (None, op.value)
        return None

    def addr(self, base: int, disp: int):
        v = self.vals[base]
        if v is None:
            return None
        return (v[0], (v[1] + disp) & MASK32)

    def required(self, instr: Instruction) -> list:
        """Symbolic addresses the instruction dereferences (None if unknown)."""
        out = []
        for o in (instr.dst, *instr.srcs):
            if type(o) is Mem and instr.cls is not OpClass.ADDR:
                out.append(self.addr(o.base, o.disp))
        op = instr.op
        if op in ("push", "call", "icall"):
            out.append(self.addr(SP, -4))
        elif op in ("pop", "ret"):
            out.append(self.addr(SP, 0))
        elif op == "copyn":
            out.extend(self.vals[r.n] for r in instr.srcs)
        return out

    def apply(self, instr: Instruction):
        vals = self.vals
        op = instr.op
        if op in ("push", "call", "icall"):
            vals[SP] = self.addr(SP, -4)
            return
        if op == "ret":
            vals[SP] = self.addr(SP, 4)
            return
        if op == "pop":
            vals[SP] = self.addr(SP, 4)
            vals[instr.dst.n] = None
            return
        dst = instr.dst
        if type(dst) is not Reg:
            return
        new = None
        if instr.width == 4:
            if op in ("mov", "load"):
                new = self.value(instr.srcs[0])
            elif op == "lea":
                m = instr.srcs[0]
                new = self.addr(m.base, m.disp)
            elif op in ("add", "sub"):
                a, b = (self.value(s) for s in instr.srcs)
                if a is not None and b is not None:
                    if op == "sub" and b[0] is None:
                        new = (a[0], (a[1] - b[1]) & MASK32)
                    elif op == "add" and b[0] is None:
                        new = (a[0], (a[1] + b[1]) & MASK32)
                    elif op == "add" and a[0] is None:
                        new = (b[0], (a[1] + b[1]) & MASK32)
        vals[dst.n] = new


def _spec(o: Operand, width: int, sym: SymRegs):
    if type(o) is Reg:
        return SReg(o.n, width)
    if type(o) is Imm:
        return SImm(width)
    a = sym.addr(o.base, o.disp)
    if a is None:
        raise UnresolvedAddress(f"address of {o} is not computable from block entry")
    return SMem(a[0], a[1], width)


def _stack_slot(sym: SymRegs, disp: int) -> SMem:
    a = sym.addr(SP, disp)
    if a is None:
        raise UnresolvedAddress("stack pointer is not computable from block entry")
    return SMem(a[0], a[1], 4)


def taint_op(instr: Instruction, sym: SymRegs, input_buffer=None) -> Optional[TaintOp]:
    """Describe the label flow of ``instr`` given the symbolic register state
    before it executes; None for instructions without a taint handler."""
    op, cls, w = instr.op, instr.cls, instr.width
    if op in ("mov", "load", "store"):
        return TaintOp("unary", False, _spec(instr.dst, w, sym), (_spec(instr.srcs[0], w, sym),))
    if op == "push":
        return TaintOp("unary", False, _stack_slot(sym, -4), (_spec(instr.srcs[0], 4, sym),))
    if op == "pop":
        return TaintOp("unary", False, SReg(instr.dst.n, 4), (_stack_slot(sym, 0),))
    if op == "not":
        return TaintOp("unary", False, _spec(instr.dst, w, sym), (_spec(instr.srcs[0], w, sym),))
    if cls in (OpClass.INDEP_ALU, OpClass.COUPLED_ALU):
        srcs = tuple(_spec(s, w, sym) for s in instr.srcs)
        return TaintOp("binary", cls is OpClass.COUPLED_ALU, _spec(instr.dst, w, sym), srcs)
    if cls is OpClass.ADDR:
        return TaintOp("unary", True, SReg(instr.dst.n, 4), (SReg(instr.srcs[0].base, 4),))
    if cls is OpClass.COPYN:
        vals = tuple(sym.vals[r.n] for r in instr.srcs)
        if any(v is None for v in vals):
            raise UnresolvedAddress("copyn registers are not computable from block entry")
        return TaintOp("copyn", False, None, vals)
    if op in ("call", "icall"):
        return TaintOp("unary", False, _stack_slot(sym, -4), (SImm(4),))
    if cls is OpClass.READ_INPUT:
        if input_buffer is None:
            raise ValueError("read without a declared input buffer")
        return TaintOp("read", False, SMem(None, input_buffer[0], input_buffer[1]), ())
    if cls is OpClass.ALLOC:
        return TaintOp("alloc", False, SReg(instr.dst.n, 4), ())
    if cls is OpClass.UNSUPPORTED and instr.dst is not None:
        return TaintOp("untaint", False, _spec(instr.dst, w, sym), ())
    return None


def resolve(value, entry_regs) -> int:
    """Concrete value of a symbolic ``(base, k)`` pair under ``entry_regs``."""
    base, off = value
    return off if base is None else (entry_regs[base] + off) & MASK32


def spec_keys(spec, entry_regs) -> Optional[list]:
    """Byte slots covered by a symbolic operand (None for immediates)."""
    if type(spec) is SReg:
        r = spec.reg * 4
        return [-(r + b) - 1 for b in range(spec.width)]
    if type(spec) is SMem:
        a = spec.off if spec.base is None else (entry_regs[spec.base] + spec.off) & MASK32
        return [(a + b) & MASK32 for b in range(spec.width)]
    return None


def op_accesses(top: TaintOp, entry_regs, input_len: Optional[int] = None) -> list:
    """Ordered ``(is_write, key)`` data accesses of a taint op."""
    if top.kind == "copyn":
        d, s, c = (resolve(v, entry_regs) for v in top.srcs)
        out = []
        for k in range(c & COPYN_LIMIT):
            out.append((False, (s + k) & MASK32))
            out.append((True, (d + k) & MASK32))
        return out
    out = []
    for src in top.srcs:
        keys = spec_keys(src, entry_regs)
        if keys:
            out.extend((False, k) for k in keys)
    dst = top.dst
    if top.kind == "read" and input_len is not None:
        dst = dst._replace(width=min(dst.width, input_len))
    if dst is not None:
        out.extend((True, k) for k in spec_keys(dst, entry_regs))
    return out


def io_sets(block_prefix, entry_regs, input_buffer=None, input_len=None) -> tuple:
    """Input and output byte locations of a straight-line instruction prefix.

    Inputs are locations whose labels are read before the prefix writes
    them; outputs are all written locations.  Memory addresses are computed
    from ``entry_regs`` using the symbolic register tracking of truncation.
    """
    sym = SymRegs()
    written: set = set()
    inputs: set = set()
    for instr in block_prefix:
        top = taint_op(instr, sym, input_buffer)
        if top is not None:
            for is_write, key in op_accesses(top, entry_regs, input_len):
                if is_write:
                    written.add(key)
                elif key not in written:
                    inputs.add(key)
        sym.apply(instr)
    return {key_location(k) for k in inputs}, {key_location(k) for k in written}
