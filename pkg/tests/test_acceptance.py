"""Acceptance suite: one test per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import itertools
import sys
import time

import pytest

import conftest
from dyntaint import EngineConfig, execute, make_policy, parse_program
from dyntaint.apps import fuzz_offsets, hijack_monitor, uaf_monitor
from dyntaint.dataflow import entry_set, taint_flow
from dyntaint.engine import truncate_block
from dyntaint.isa import MASK32, SP, MachineState, Mem, MemByte, OpClass, SMem, step
from dyntaint.policy import BdtStore
from dyntaint.shadow import PAGE_SIZE, ShadowState
from oracles import (
    alarm_pairs, bdt_build, block_setup, flip_influence, label_function, load_corpus, run_with,
    zero_pages,
)
from randprog import (
    random_block_source, random_entry_regs, random_fuzz_program, random_program, rng_for,
)

POLICIES = ("bitwise", "id", "bv", "uaf")
MODES = ("full", "static-fp", "dynamic-fp")


def record(num, title, detail=""):
    conftest.ACCEPTANCE[num] = (title, detail)


def loop_corpus(prefix=""):
    return [c for c in load_corpus("loops") if c[0].startswith(prefix)]


def test_criterion_1_mode_equivalence():
    title = "mode equivalence, 1000 programs x 4 policies x 3 modes"
    start = time.perf_counter()
    mismatches = []
    for i in range(1000):
        src, data = random_program(i)
        program = parse_program(src)
        threshold = (1, 2, 16)[i % 3]
        for policy in POLICIES:
            seen = set()
            for mode in MODES:
                r = execute(program, make_policy(policy), EngineConfig(mode=mode, threshold=threshold),
                            (), data)
                assert r.error is None
                seen.add((r.shadow.dump(), r.state.snapshot()))
            if len(seen) != 1:
                mismatches.append((i, policy))
    elapsed = time.perf_counter() - start
    record(1, title, f"{len(mismatches)} mismatches, {elapsed:.1f}s (budget 120s)")
    assert not mismatches
    assert elapsed < 120


def test_criterion_2_elision_soundness():
    title = "elision soundness, 500 blocks x all entry masks"
    blocks, i = [], 0
    while len(blocks) < 500:
        p = parse_program(random_block_source(i))
        blk = truncate_block(p.instructions, 0, p.input_buffer)[0]
        if blk.declared <= 6:
            blocks.append((i, blk))
        i += 1
    runs, bad = 0, []
    for idx, blk in blocks:
        rng = rng_for("elide", idx)
        regs = random_entry_regs(rng)
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 9)))
        for mask in range(1 << blk.declared):
            policy = POLICIES[(idx + mask) % 4]
            seed = f"{idx}:{mask}"
            full_eng, actual = block_setup(blk, policy, mask, seed, regs, data)
            fast_eng, _ = block_setup(blk, policy, mask, seed, regs, data)
            # aliasing between operands can move the mask; key on what dispatch would see
            keep, _ = taint_flow(blk, entry_set(blk.regs, blk.mems, actual))
            if run_with(full_eng, blk, None) != run_with(fast_eng, blk, keep):
                bad.append((idx, mask, policy))
            runs += 1
    record(2, title, f"{runs} block runs, {len(bad)} differences")
    assert not bad


def test_criterion_3_fast_path_dominance():
    title = "sparse-taint loops take fast paths"
    entries = fast = generated = exec_fp = 0
    for name, program, data, _ in loop_corpus("sparse"):
        s = execute(program, make_policy("bitwise"), EngineConfig(), (), data).stats
        entries += s.block_entries
        fast += s.exec_none + s.exec_fp
        generated += s.fp_generated
        exec_fp += s.exec_fp
    share = fast / entries
    record(3, title, f"fast share {share:.4f} (>= 0.9), generated {generated} vs exec FP {exec_fp} "
           f"(limit {0.001 * exec_fp:.2f})")
    assert share >= 0.9
    assert generated <= 0.001 * exec_fp


def test_criterion_4_dynamic_beats_static():
    title = "dynamic-fp vs static-fp on stable partial taint"
    totals = {"static-fp": [0, 0], "dynamic-fp": [0, 0]}
    for name, program, data, _ in loop_corpus("partial"):
        for mode in totals:
            s = execute(program, make_policy("bitwise"), EngineConfig(mode=mode, handlers="call"),
                        (), data).stats
            totals[mode][0] += s.handler_invocations
            totals[mode][1] += s.context_switches
    h = totals["dynamic-fp"][0] / totals["static-fp"][0]
    c = totals["dynamic-fp"][1] / totals["static-fp"][1]
    record(4, title, f"handler ratio {h:.3f}, context-switch ratio {c:.3f} (<= 0.8)")
    assert h <= 0.8 and c <= 0.8


def test_criterion_5_max_paths_sweep():
    title = "max-paths sweep non-increasing, 0 equals static"
    sweep = (0, 1, 2, 4, 8)
    problems, series = [], {}
    for name, program, data, _ in loop_corpus():
        static = execute(program, make_policy("bitwise"), EngineConfig(mode="static-fp"), (), data)
        counts = []
        for mp in sweep:
            r = execute(program, make_policy("bitwise"), EngineConfig(max_paths=mp), (), data)
            counts.append(r.stats.handler_invocations)
            if mp == 0 and (r.stats.handler_invocations != static.stats.handler_invocations
                            or r.stats.context_switches != static.stats.context_switches
                            or r.shadow.dump() != static.shadow.dump()):
                problems.append((name, "mp0 != static"))
        if any(b > a for a, b in zip(counts, counts[1:])):
            problems.append((name, counts))
        series[name] = counts
    record(5, title, f"multimask {series.get('multimask')}; {len(problems)} problems")
    assert not problems


def test_criterion_6_call_vs_inline():
    title = "call vs inline handler cost model"
    problems = []
    switches = handlers = inline_switches = 0
    for name, program, data, _ in loop_corpus():
        call = execute(program, make_policy("bitwise"), EngineConfig(handlers="call"), (), data)
        inline = execute(program, make_policy("bitwise"), EngineConfig(handlers="inline"), (), data)
        c, n = call.stats, inline.stats
        if c.context_switches != c.handler_invocations or n.context_switches != 0:
            problems.append(name)
        if c.handler_invocations != n.handler_invocations or call.shadow.dump() != inline.shadow.dump():
            problems.append(name)
        switches += c.context_switches
        handlers += c.handler_invocations
        inline_switches += n.context_switches
    record(6, title, f"call {switches} switches for {handlers} handlers ({switches / handlers:.2f} per "
           f"handler), inline {inline_switches} switches; {len(problems)} problems")
    assert not problems


def test_criterion_7_uaf_corpus():
    title = "use-after-free corpus alarms and sites"
    corpus = load_corpus("uaf")
    wrong = [name for name, p, data, want in corpus if alarm_pairs(uaf_monitor(p, data)) != want]
    buggy = sum(bool(want) for *_, want in corpus)
    record(7, title, f"{len(corpus)} programs ({buggy} buggy), {len(wrong)} wrong {wrong}")
    assert len(corpus) == 10 and buggy == 8
    assert not wrong


def test_criterion_8_hijack_corpus():
    title = "control-flow hijack corpus"
    corpus = load_corpus("hijack")
    wrong = [name for name, p, data, want in corpus if alarm_pairs(hijack_monitor(p, data)) != want]
    alarming = sum(bool(want) for *_, want in corpus)
    record(8, title, f"{len(corpus)} programs ({alarming} tainted), {len(wrong)} wrong {wrong}")
    assert len(corpus) == 6 and alarming == 2
    assert not wrong


def test_criterion_9_fuzz_offsets():
    title = "fuzz offsets vs flip-byte oracle"
    reported = confirmed = 0
    omissions = []
    for i in range(200):
        src, data = random_fuzz_program(i)
        program = parse_program(src)
        assert len(program.instructions) <= 30 and len(data) <= 16
        got = fuzz_offsets(program, data).sites
        truth = flip_influence(program, data)
        for site, offsets in truth.items():
            if not offsets <= got.get(site, set()):
                omissions.append((i, site))
        for site, offsets in got.items():
            reported += len(offsets)
            confirmed += len(offsets & truth.get(site, set()))
    spurious = 1 - confirmed / reported if reported else 0.0
    record(9, title, f"{len(omissions)} omissions, {reported} reported, {confirmed} confirmed, "
           f"spurious {spurious:.1%} (<= 25%)")
    assert not omissions
    assert spurious <= 0.25


def test_criterion_10_bdt_canonicity():
    title = "BDT canonicity and memoized union"
    store = BdtStore(nbits=8)
    universe = range(8)
    subsets = [frozenset(c) for n in range(9) for c in itertools.combinations(universe, n)]
    rng = rng_for("bdt", 0)
    ids = {}
    for s in subsets:
        order = list(s)
        rng.shuffle(order)
        a, b = bdt_build(store, sorted(s)), bdt_build(store, order)
        assert a == b and store.members(a) == set(s)
        ids[s] = a
    injective = len(set(ids.values())) == len(subsets)
    for x, y in itertools.product(subsets, repeat=2):
        assert store.union(ids[x], ids[y]) == ids[x | y]
    before = store.allocations
    for x, y in itertools.product(subsets, repeat=2):
        store.union(ids[x], ids[y])
    fresh = store.allocations - before
    record(10, title, f"{len(subsets)} subsets, distinct ids {injective}, "
           f"{fresh} new nodes on repeated unions")
    assert injective and fresh == 0


def test_criterion_11_gc_transparency():
    title = "shadow garbage collection transparency"
    rng = rng_for("gc", 0)
    bad = 0
    for case in range(1000):
        sh = ShadowState()
        pages = [rng.randrange(0, 1 << 20) for _ in range(rng.randrange(1, 6))]
        touched = []
        for _ in range(rng.randrange(1, 80)):
            if rng.random() < 0.2 and touched:
                loc = rng.choice(touched)
            else:
                base = rng.choice(pages) * PAGE_SIZE
                loc = MemByte(base + rng.randrange(PAGE_SIZE))
            label = 0 if rng.random() < 0.45 else rng.randrange(1, 1 << 32)
            sh.set_label(loc, label)
            touched.append(loc)
        probe = set(touched) | {MemByte(rng.randrange(1 << 32)) for _ in range(20)}
        before = label_function(sh, probe)
        empty = zero_pages(sh)
        live = set(sh.pages) - empty
        freed = sh.collect_garbage()
        if freed != len(empty) or set(sh.pages) != live or label_function(sh, probe) != before:
            bad += 1
    record(11, title, f"1000 cases, {bad} failures")
    assert bad == 0


def _concrete_addresses(state, ins) -> set:
    out = set()
    if ins.cls is not OpClass.ADDR:
        out |= {state.ea(o) for o in (ins.dst, *ins.srcs) if type(o) is Mem}
    if ins.op in ("push", "call", "icall"):
        out.add((state.regs[SP] - 4) & MASK32)
    elif ins.op in ("pop", "ret"):
        out.add(state.regs[SP])
    return out


def test_criterion_12_truncation_addresses():
    title = "truncated-block addresses match concrete execution"
    checked, bad, cut = 0, [], 0
    for idx in range(500):
        p = parse_program(random_block_source(idx, max_len=16, corpus="trunc"))
        parts = truncate_block(p.instructions, 0, p.input_buffer)
        cut += len(parts) > 1
        rng = rng_for("trunc-regs", idx)
        state = MachineState(bytes(rng.randrange(256) for _ in range(8)), p.input_buffer)
        state.regs = random_entry_regs(rng)
        for blk in parts:
            entry = list(state.regs)
            for ins, top in zip(blk.instrs, blk.ops):
                if top is not None and top.kind in ("unary", "binary"):
                    symbolic = {(entry[o.base] + o.off) & MASK32 for o in (top.dst, *top.srcs)
                                if type(o) is SMem and o.base is not None}
                    checked += len(symbolic)
                    if symbolic != _concrete_addresses(state, ins):
                        bad.append((idx, ins.op))
                step(state, ins)
                if state.halted:
                    break
            if state.halted:
                break
    record(12, title, f"500 blocks ({cut} cut), {checked} operands, {len(bad)} mismatches")
    assert not bad


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
