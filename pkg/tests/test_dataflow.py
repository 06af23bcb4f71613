import random

from hypothesis import given, settings, strategies as st

from dyntaint.dataflow import ANY_MEMORY, SymByte, entry_set, handler_positions, taint_flow
from dyntaint.engine import make_block, truncate_block
from dyntaint.isa import MachineState, RegByte, SymRegs, parse_program, spec_keys, step, taint_op
from dyntaint.policy import BitwisePolicy, apply_binary, apply_unary
from dyntaint.shadow import ShadowState
from randprog import random_block_source, random_entry_regs


def block(text):
    p = parse_program(text)
    return make_block(p.instructions, 0, p.input_buffer)


def rb(r):
    return {RegByte(r, b) for b in range(4)}


def sym(base, off, n=4):
    return {SymByte(base, off + i) for i in range(n)}


def touching_handlers(blk, tainted_keys, regs):
    """Brute force: run every handler and note the ones that read a
    nonzero label or overwrite one."""
    sh = ShadowState()
    for k in tainted_keys:
        sh.set(k, 1)
    pol = BitwisePolicy()
    state = MachineState(b"\x01" * 8, (0x1000, 8))
    state.regs = list(regs)
    out = set()
    for i, (instr, top) in enumerate(zip(blk.instrs, blk.ops)):
        kind = top.kind if top is not None else None
        if kind == "read":
            for k in range(8):
                sh.set(0x1000 + k, 1)
        elif kind == "alloc":
            for k in spec_keys(top.dst, regs):
                sh.set(k, 1)
        elif kind == "copyn":
            d, s, c = (state.regs[r.n] for r in instr.srcs)
            for k in range(c & 0xFFFF):
                sh.set((d + k) & 0xFFFFFFFF, sh.get((s + k) & 0xFFFFFFFF))
        if kind in ("unary", "binary"):
            dk = spec_keys(top.dst, regs)
            srcs = [spec_keys(s, regs) for s in top.srcs]
            labels = [[sh.get(k) for k in ks] if ks else [0] * len(dk) for ks in srcs]
            if any(any(ls) for ls in labels) or any(sh.get(k) for k in dk):
                out.add(i)
            if top.kind == "unary":
                apply_unary(sh, pol, dk, labels[0], top.coupled)
            else:
                apply_binary(sh, pol, dk, labels[0], labels[1], top.coupled)
        step(state, instr)
    return out


def test_spec_example_elides_first_instruction():
    blk = block("mov r1, [r2]\nor r3, r4\nmov [r5], r3")
    instrument, exit_set = taint_flow(blk, rb(4))
    assert instrument == {1, 2}
    regs = [0x100 * i for i in range(16)]
    assert touching_handlers(blk, [RegByte(4, b).key for b in range(4)], regs) == {1, 2}
    assert rb(3) <= exit_set and sym(5, 0) <= exit_set and not rb(1) & exit_set


def test_empty_entry_elides_everything():
    blk = block("mov r1, [r2]\nadd r3, r1, 4\npush r3\npop r4\nlea r5, [r6+2]\ncmp r1, r2")
    assert taint_flow(blk, set()) == (frozenset(), frozenset())


def test_full_entry_instruments_every_handler():
    blk = block("mov r1, [r2]\nadd r3, r1, 4\nstore [r7], r3\nlea r5, [r6+2]\ncmp r1, r2\nxor r6, r6")
    full = entry_set(blk.regs, blk.mems, blk.full_mask)
    instrument, _ = taint_flow(blk, full)
    assert instrument == handler_positions(blk) == {0, 1, 2, 3, 5}


def test_always_instrumented_intrinsics():
    blk = block(".input 0x1000 4\nread\nalloc r1, 8\ncopyn r2, r3, r4")
    instrument, exit_set = taint_flow(blk, set())
    assert instrument == {0, 1, 2}
    assert ANY_MEMORY in exit_set and rb(1) <= exit_set


def test_destination_clearing_register():
    blk = block("mov r1, 5\nadd r2, r2, r3")
    instrument, exit_set = taint_flow(blk, rb(1))
    assert instrument == {0}
    assert not rb(1) & exit_set


def test_destination_clearing_memory():
    blk = block("store [r2+4], 0")
    instrument, exit_set = taint_flow(blk, sym(2, 4))
    assert instrument == {0} and not exit_set


def test_different_bases_may_alias():
    blk = block("store [r2], r1\nload r3, [r4]")
    instrument, _ = taint_flow(blk, rb(1))
    assert instrument == {0, 1}


def test_same_base_distinct_offsets_do_not_alias():
    blk = block("store [r2], r1\nload r3, [r2+8]")
    instrument, _ = taint_flow(blk, rb(1))
    assert instrument == {0}


def test_stack_slots_tracked_through_push_pop():
    blk = block("push r1\npop r2\nmov r3, r4")
    instrument, exit_set = taint_flow(blk, rb(1))
    assert instrument == {0, 1}
    assert rb(2) <= exit_set and not rb(3) & exit_set


def test_coupled_operation_taints_all_bytes():
    p = parse_program("add.b r1, r2")
    blk = make_block(p.instructions)
    _, exit_set = taint_flow(blk, {RegByte(2, 0)})
    assert exit_set == {RegByte(1, 0), RegByte(2, 0)}


def _random_block(index):
    p = parse_program(random_block_source(index, corpus="dataflow"))
    return truncate_block(p.instructions, 0, p.input_buffer)[0]


@settings(max_examples=300, deadline=None, derandomize=True)
@given(st.integers(0, 10**6), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_instrument_set_is_monotone(index, m1, m2):
    blk = _random_block(index)
    if blk.demoted:
        return
    small = m1 & m2 & blk.full_mask
    large = (m1 | m2) & blk.full_mask
    i_small, e_small = taint_flow(blk, entry_set(blk.regs, blk.mems, small))
    i_large, e_large = taint_flow(blk, entry_set(blk.regs, blk.mems, large))
    assert i_small <= i_large and e_small <= e_large


@settings(max_examples=300, deadline=None, derandomize=True)
@given(st.integers(0, 10**6), st.integers(0, 2**32 - 1))
def test_instrument_covers_brute_force(index, mask):
    blk = _random_block(index)
    rng = random.Random(index)
    regs = random_entry_regs(rng)
    mask &= blk.full_mask
    entry = entry_set(blk.regs, blk.mems, mask)
    keys = []
    for loc in entry:
        if isinstance(loc, RegByte):
            keys.append(loc.key)
        else:
            keys.append(loc.off if loc.base is None else (regs[loc.base] + loc.off) & 0xFFFFFFFF)
    instrument, _ = taint_flow(blk, entry)
    assert touching_handlers(blk, keys, regs) <= instrument


def test_ops_without_block_object():
    p = parse_program("or r3, r4")
    ops = [taint_op(p.instructions[0], SymRegs())]
    assert taint_flow(ops, rb(4))[0] == {0}
