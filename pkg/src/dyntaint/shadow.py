"""Byte-granular label storage for guest memory and registers.

Memory labels live in 4 KiB pages that are only materialised on the first
nonzero write.  Register labels are kept per byte, together with a 16-bit
status word holding one "possibly tainted" bit per register.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

from .isa import MASK32, NUM_REGS, Location, MemByte, RegByte

PAGE_BITS = 12
PAGE_SIZE = 1 << PAGE_BITS
PAGE_MASK = PAGE_SIZE - 1


class ShadowResourceError(MemoryError):
    """Raised when no shadow page can be allocated even after collection."""


def pext(value: int, positions: Iterable[int]) -> int:
    """Gather the bits of ``value`` at ``positions`` into the low bits of the
    result, in order (a software parallel-bit-extract)."""
    out = 0
    for i, p in enumerate(positions):
        out |= ((value >> p) & 1) << i
    return out


class ShadowState:
    def __init__(self, max_pages: Optional[int] = None,
                 on_replace: Optional[Callable[[int, int], None]] = None):
        self.pages: dict[int, list] = {}
        self.regs = [0] * (NUM_REGS * 4)
        self.status = 0
        self.max_pages = max_pages
        # reference-counting policies observe every label overwrite
        self.on_replace = on_replace
        self.gc_runs = 0

    # -- slot interface (register bytes are negative keys) -------------------------

    def get(self, key: int) -> int:
        if key < 0:
            return self.regs[-key - 1]
        page = self.pages.get(key >> PAGE_BITS)
        return page[key & PAGE_MASK] if page is not None else 0

    def set(self, key: int, label: int):
        if key < 0:
            idx = -key - 1
            old = self.regs[idx]
            if old == label:
                return
            self.regs[idx] = label
            r = idx >> 2
            if label:
                self.status |= 1 << r
            else:
                base = r << 2
                regs = self.regs
                if not (regs[base] or regs[base + 1] or regs[base + 2] or regs[base + 3]):
                    self.status &= ~(1 << r)
        else:
            pno = key >> PAGE_BITS
            page = self.pages.get(pno)
            if page is None:
                if not label:
                    return
                page = self._new_page(pno)
            old = page[key & PAGE_MASK]
            if old == label:
                return
            page[key & PAGE_MASK] = label
        if self.on_replace is not None:
            self.on_replace(old, label)

    def _new_page(self, pno: int) -> list:
        if self.max_pages is not None and len(self.pages) >= self.max_pages:
            self.collect_garbage()
            if len(self.pages) >= self.max_pages:
                raise ShadowResourceError(f"shadow page limit {self.max_pages} reached")
        page = [0] * PAGE_SIZE
        self.pages[pno] = page
        return page

    # -- public operations -----------------------------------------------------------

    def get_label(self, loc: Location) -> int:
        return self.get(loc.key)

    def set_label(self, loc: Location, label: int):
        if not 0 <= label <= MASK32:
            raise ValueError(f"label {label!r} is not a 32-bit value")
        if isinstance(loc, RegByte) and not (0 <= loc.reg < NUM_REGS and 0 <= loc.byte < 4):
            raise ValueError(f"invalid register location {loc!r}")
        if isinstance(loc, MemByte) and not 0 <= loc.addr <= MASK32:
            raise ValueError(f"invalid memory location {loc!r}")
        self.set(loc.key, label)

    def region_tainted(self, addr: int, length: int) -> bool:
        """True iff any label in ``[addr, addr + length)`` is nonzero."""
        pages = self.pages
        while length > 0:
            addr &= MASK32
            off = addr & PAGE_MASK
            chunk = min(length, PAGE_SIZE - off)
            page = pages.get(addr >> PAGE_BITS)
            if page is not None and any(page[off:off + chunk]):
                return True
            addr += chunk
            length -= chunk
        return False

    def reg_status(self, reg: int) -> bool:
        return bool((self.status >> reg) & 1)

    def reg_case_bits(self, regs) -> int:
        if len(regs) > NUM_REGS or len(set(regs)) != len(regs):
            raise ValueError("register list must hold at most 16 distinct registers")
        return pext(self.status, regs)

    def collect_garbage(self) -> int:
        """Drop every page that holds only zero labels; returns the count."""
        empty = [pno for pno, page in self.pages.items() if not any(page)]
        for pno in empty:
            del self.pages[pno]
        self.gc_runs += 1
        return len(empty)

    # -- inspection ----------------------------------------------------------------------

    def tainted_items(self):
        """Yield ``(location, label)`` for every nonzero label in dump order."""
        for pno in sorted(self.pages):
            page = self.pages[pno]
            base = pno << PAGE_BITS
            for off, label in enumerate(page):
                if label:
                    yield MemByte(base + off), label
        for idx, label in enumerate(self.regs):
            if label:
                yield RegByte(idx >> 2, idx & 3), label

    def dump(self) -> str:
        lines = []
        for loc, label in self.tainted_items():
            if isinstance(loc, MemByte):
                lines.append(f"mem 0x{loc.addr:08x} {label:08x}")
            else:
                lines.append(f"reg r{loc.reg} b{loc.byte} {label:08x}")
        return "\n".join(lines) + ("\n" if lines else "")

    def copy(self) -> "ShadowState":
        new = ShadowState(self.max_pages, self.on_replace)
        new.pages = {p: list(v) for p, v in self.pages.items()}
        new.regs = list(self.regs)
        new.status = self.status
        return new
