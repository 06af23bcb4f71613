"""Taint policies and the propagation algorithms that drive them.

A policy supplies three primitives over 32-bit labels (0 = no taint):

* ``srcdst(l)``       label for a destination byte fed by one source
* ``srcsrcdst(a, b)`` label for a destination byte fed by two sources
* ``meet(a, b)``      summary of two labels found within one operand

The engine never interprets labels itself; it only calls these primitives
through :func:`apply_unary` and :func:`apply_binary`.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .isa import MASK32, Location

COUPLED = "coupled"
INDEPENDENT = "independent"


class PolicyError(RuntimeError):
    pass


class Policy:
    """Base class: every primitive maps "no taint" to "no taint"."""

    name = "base"
    on_replace = None  # optional (old, new) label-release notification

    def srcdst(self, label: int) -> int:
        return label

    def srcsrcdst(self, a: int, b: int) -> int:
        raise NotImplementedError

    def meet(self, a: int, b: int) -> int:
        raise NotImplementedError

    def input_label(self, offset: int) -> int:
        """Initial label of input byte ``offset``."""
        return 0

    def alloc_label(self, site: int) -> int:
        """Label of a pointer returned by the allocation at ``site``."""
        return 0

    def on_free(self, label: int):
        return None

    def slow_paths(self) -> int:
        return 0

    def state(self):
        """Hashable snapshot of the mutable policy state."""
        return ()


# -- propagation algorithms ------------------------------------------------------------


def meet_fold(policy: Policy, labels) -> int:
    m = 0
    for label in labels:
        m = policy.meet(m, label)
    return m


def apply_unary(shadow, policy: Policy, dst_keys, src_labels, coupled: bool):
    if coupled:
        m = meet_fold(policy, src_labels)
        for k in dst_keys:
            shadow.set(k, policy.srcdst(m))
    else:
        for k, label in zip(dst_keys, src_labels):
            shadow.set(k, policy.srcdst(label))


def apply_binary(shadow, policy: Policy, dst_keys, labels1, labels2, coupled: bool):
    if coupled:
        m1 = meet_fold(policy, labels1)
        m2 = meet_fold(policy, labels2)
        for k in dst_keys:
            # not hoisted: primitives may be stateful
            shadow.set(k, policy.srcsrcdst(m1, m2))
    else:
        for k, a, b in zip(dst_keys, labels1, labels2):
            shadow.set(k, policy.srcsrcdst(a, b))


def _check_mode(mode: str) -> bool:
    if mode not in (COUPLED, INDEPENDENT):
        raise ValueError(f"unknown propagation mode {mode!r}")
    return mode == COUPLED


def propagate_unary(shadow, policy: Policy, dst: Sequence[Location], src: Sequence[Location],
                    mode: str = INDEPENDENT):
    """One-source propagation: per-byte transfer, or a meet-fold of the
    source broadcast to every destination byte when bytes are coupled."""
    coupled = _check_mode(mode)
    if len(dst) != len(src):
        raise ValueError(f"width mismatch: {len(dst)} destination vs {len(src)} source bytes")
    labels = [shadow.get(loc.key) for loc in src]
    apply_unary(shadow, policy, [loc.key for loc in dst], labels, coupled)


def propagate_binary(shadow, policy: Policy, dst: Sequence[Location], src1: Sequence[Location],
                     src2: Sequence[Location], mode: str = INDEPENDENT):
    """Two-source propagation (byte-wise, or meet-folded per operand)."""
    coupled = _check_mode(mode)
    if not len(dst) == len(src1) == len(src2):
        raise ValueError("width mismatch between operands")
    l1 = [shadow.get(loc.key) for loc in src1]
    l2 = [shadow.get(loc.key) for loc in src2]
    apply_binary(shadow, policy, [loc.key for loc in dst], l1, l2, coupled)


# -- built-in policies ---------------------------------------------------------------------


class BitwisePolicy(Policy):
    name = "bitwise"

    def srcsrcdst(self, a, b):
        return a | b

    def meet(self, a, b):
        return a | b

    def input_label(self, offset):
        return 1


class IdPolicy(Policy):
    """Mints a fresh id for every destination byte that receives taint."""

    name = "id"

    def __init__(self, counter: int = 0):
        self.counter = counter

    def fresh_id_assign(self, *sources: int) -> int:
        if not any(sources):
            return 0
        if self.counter >= MASK32:
            raise PolicyError("id counter overflow")
        self.counter += 1
        return self.counter

    def srcdst(self, label):
        return self.fresh_id_assign(label)

    def srcsrcdst(self, a, b):
        return self.fresh_id_assign(a, b)

    def meet(self, a, b):
        if a and b:
            return a if a < b else b
        return a or b

    def input_label(self, offset):
        return self.fresh_id_assign(1)

    def state(self):
        return (self.counter,)


_MK = object()


class BdtStore:
    """Hash-consed reduced ordered decision diagram over offset bits.

    Node 0 is the empty set and node 1 the terminal "present" leaf; every
    other node tests one bit of the offset (most significant first).
    """

    def __init__(self, nbits: int = 32, max_nodes: Optional[int] = None):
        self.nbits = nbits
        self.max_nodes = max_nodes
        self.var = [nbits, nbits]
        self.lo = [0, 1]
        self.hi = [0, 1]
        self.unique: dict = {}
        self.union_memo: dict = {}
        self.allocations = 0
        self._members: dict = {0: frozenset()}

    def __len__(self):
        return len(self.var)

    def _mk(self, v: int, lo: int, hi: int) -> int:
        if lo == hi:
            return lo
        key = (v, lo, hi)
        node = self.unique.get(key)
        if node is None:
            if self.max_nodes is not None and len(self.var) >= self.max_nodes:
                raise PolicyError("decision-tree store exhausted")
            node = len(self.var)
            self.var.append(v)
            self.lo.append(lo)
            self.hi.append(hi)
            self.unique[key] = node
            self.allocations += 1
        return node

    def check(self, node: int):
        if not 0 <= node < len(self.var):
            raise PolicyError(f"unknown label handle {node}")

    def singleton(self, x: int) -> int:
        if not 0 <= x < (1 << self.nbits):
            raise ValueError(f"offset {x} out of range")
        node = 1
        for v in range(self.nbits - 1, -1, -1):
            if (x >> (self.nbits - 1 - v)) & 1:
                node = self._mk(v, 0, node)
            else:
                node = self._mk(v, node, 0)
        return node

    def from_set(self, offsets) -> int:
        node = 0
        for x in sorted(offsets):
            node = self.union(node, self.singleton(x))
        return node

    def union(self, a: int, b: int) -> int:
        memo, var, lo, hi = self.union_memo, self.var, self.lo, self.hi
        stack = [(a, b)]
        results = []
        while stack:
            item = stack.pop()
            if item[0] is _MK:
                _, v, key = item
                h = results.pop()
                low = results.pop()
                r = self._mk(v, low, h)
                memo[key] = r
                results.append(r)
                continue
            x, y = item
            if x == y or y == 0:
                results.append(x)
                continue
            if x == 0:
                results.append(y)
                continue
            if x == 1 or y == 1:
                results.append(1)
                continue
            key = (x, y) if x < y else (y, x)
            r = memo.get(key)
            if r is not None:
                results.append(r)
                continue
            vx, vy = var[x], var[y]
            v = vx if vx < vy else vy
            xl, xh = (lo[x], hi[x]) if vx == v else (x, x)
            yl, yh = (lo[y], hi[y]) if vy == v else (y, y)
            stack.append((_MK, v, key))
            stack.append((xh, yh))
            stack.append((xl, yl))
        return results[-1]

    def members(self, node: int, limit: int = 1 << 16) -> frozenset:
        cached = self._members.get(node)
        if cached is not None:
            return cached
        self.check(node)
        out = []
        stack = [(node, 0, 0)]
        while stack:
            n, level, prefix = stack.pop()
            if n == 0:
                continue
            v = self.var[n]
            if level < v:
                # skipped variable: both values lead to the same child
                stack.append((n, level + 1, prefix << 1))
                stack.append((n, level + 1, (prefix << 1) | 1))
                continue
            if n == 1:
                out.append(prefix)
                if len(out) > limit:
                    raise PolicyError("set too large to enumerate")
                continue
            stack.append((self.lo[n], level + 1, prefix << 1))
            stack.append((self.hi[n], level + 1, (prefix << 1) | 1))
        result = frozenset(out)
        self._members[node] = result
        return result


def bdt_union(store: BdtStore, a: int, b: int) -> int:
    return store.union(a, b)


class BvPolicy(Policy):
    """Labels are handles to sets of input offsets."""

    name = "bv"

    def __init__(self, store: Optional[BdtStore] = None):
        self.store = store if store is not None else BdtStore()

    def srcsrcdst(self, a, b):
        return self.store.union(a, b)

    def meet(self, a, b):
        if a and b:
            self.store.check(a)
            self.store.check(b)
        return self.store.union(a, b)

    def input_label(self, offset):
        return self.store.singleton(offset)

    def offsets(self, label: int) -> frozenset:
        return self.store.members(label)

    def slow_paths(self):
        return self.store.allocations

    def state(self):
        return (len(self.store), len(self.store.union_memo))


LIVE = 1
DANGLING = 2


def srcsrcdst_uaf(a: int, b: int) -> int:
    """Pointer arithmetic: pointer op int keeps the pointer, pointer op
    pointer (e.g. a distance) is no longer a pointer."""
    if a and b:
        return 0
    return a or b


class UafPolicy(Policy):
    """Pointer tracking with shared, reference-counted status records."""

    name = "uaf"

    def __init__(self):
        self.records: dict[int, list] = {}  # handle -> [status, site, refs]
        self.next_handle = 1

    def _record(self, label):
        rec = self.records.get(label)
        if rec is None:
            raise PolicyError(f"unknown label handle {label}")
        return rec

    def srcsrcdst(self, a, b):
        return srcsrcdst_uaf(a, b)

    def meet(self, a, b):
        if not a:
            return b
        if not b:
            return a
        if self._record(b)[0] == DANGLING and self._record(a)[0] != DANGLING:
            return b
        return a

    def alloc_label(self, site):
        if self.next_handle > MASK32:
            raise PolicyError("label handles exhausted")
        h = self.next_handle
        self.next_handle += 1
        self.records[h] = [LIVE, site, 0]
        return h

    def on_replace(self, old, new):
        if new:
            self.records[new][2] += 1
        if old:
            rec = self.records[old]
            rec[2] -= 1
            if rec[2] <= 0:
                del self.records[old]

    def on_free(self, label):
        """Mark the allocation behind ``label`` dangling; returns the
        status it had before and its creation site."""
        if not label:
            return None
        rec = self._record(label)
        prior = rec[0]
        rec[0] = DANGLING
        return prior, rec[1]

    def status(self, label: int) -> int:
        return self._record(label)[0] if label else 0

    def site(self, label: int) -> int:
        return self._record(label)[1]

    def state(self):
        return (self.next_handle, tuple(sorted((h, r[0], r[1], r[2]) for h, r in self.records.items())))


POLICIES = {
    "bitwise": BitwisePolicy,
    "id": IdPolicy,
    "bv": BvPolicy,
    "uaf": UafPolicy,
}


def make_policy(name: str) -> Policy:
    try:
        return POLICIES[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}") from None


def meet_builtin(policy: Policy, a: int, b: int) -> int:
    return policy.meet(a, b)
