"""Atomic register storage for the symmetric and asymmetric memory models.

Registers are grouped into named regions. Region ``0`` is the base array
created by :func:`make_symmetric` / :func:`make_asymmetric` and is addressed
with 1-based local indices through :meth:`Memory.read` / :meth:`Memory.write`.
Protocol objects allocate further regions (flag rows, coin banks, winner
boards) and address them with 0-based local indices through
:meth:`Memory.load` / :meth:`Memory.store`.

In the asymmetric model a region is laid out as consecutive rows of ``n * k``
cells, ``k`` cells per owner. Each process sees a row through its own hidden
permutation whose first ``k`` local indices land in its owned block.
"""

from __future__ import annotations

import random

WORD_BITS = 64
WORD_LIMIT = 1 << WORD_BITS

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


class NotOwner(PermissionError):
    """A process tried to write a register it does not own."""


class _Region:
    __slots__ = ("name", "size", "per_owner", "multi_writer", "cells", "perms")

    def __init__(self, name, size, per_owner, multi_writer):
        self.name = name
        self.size = size  # None: unbounded (rows grow on demand)
        self.per_owner = per_owner
        self.multi_writer = multi_writer
        self.cells = {}  # physical offset -> value; absent means init value
        self.perms = None  # per-process views, filled by Memory.load


class Memory:
    def __init__(self, discipline, n, v0, perm_seed=None):
        check_value(v0)
        self.discipline = discipline
        self.n = n
        self.init_value = v0
        self.perm_seed = perm_seed
        self.regions: dict = {}
        self._views: dict = {}

    # -- layout ---------------------------------------------------------

    @property
    def m(self) -> int:
        return self.regions[0].size

    @property
    def symmetric(self) -> bool:
        return self.discipline == SYMMETRIC

    def ensure_region(self, name, size=None, per_owner=1, multi_writer=False) -> bool:
        """Create region ``name`` if missing; return True when it was created.

        ``size`` bounds the local index range (``None`` = unbounded rows).
        ``per_owner`` is the owned-block width in the asymmetric model and is
        ignored for symmetric memory. ``multi_writer`` makes an auxiliary
        region of plain multi-writer registers inside asymmetric memory (used
        only to realize black-box consensus objects).
        """
        if name in self.regions:
            return False
        if size is not None and size < 1:
            raise ValueError("region size must be positive")
        mw = multi_writer or self.discipline == SYMMETRIC
        self.regions[name] = _Region(name, size, per_owner, mw)
        return True

    def view(self, p: int, k: int) -> tuple:
        """Hidden permutation of process ``p`` over a row with ``k`` cells per owner."""
        key = (p, k)
        perm = self._views.get(key)
        if perm is None:
            rng = random.Random(f"{self.perm_seed}:{p}:{k}")
            own = list(range(p * k, p * k + k))
            rest = [i for i in range(self.n * k) if not p * k <= i < p * k + k]
            rng.shuffle(own)
            rng.shuffle(rest)
            perm = tuple(own + rest)
            self._views[key] = perm
        return perm

    def physical(self, p: int, region, i: int) -> int:
        """Resolve a local index to a physical offset. Harness-side only."""
        reg = self.regions[region]
        if i < 0 or (reg.size is not None and i >= reg.size):
            raise IndexError(f"local index {i} out of range for region {region!r}")
        if reg.multi_writer:
            return i
        width = self.n * reg.per_owner
        row, col = divmod(i, width)
        return row * width + self.view(p, reg.per_owner)[col]

    def owner(self, region, offset: int):
        """Owner of a physical offset (``None`` for symmetric memory)."""
        reg = self.regions[region]
        if reg.multi_writer:
            return None
        return (offset % (self.n * reg.per_owner)) // reg.per_owner

    # -- process-facing operations -------------------------------------

    def load(self, p: int, region, i: int) -> int:
        reg = self.regions[region]
        if i < 0 or (reg.size is not None and i >= reg.size):
            raise IndexError(f"local index {i} out of range for region {region!r}")
        if reg.multi_writer:
            return reg.cells.get(i, self.init_value)
        if reg.perms is None:
            reg.perms = [self.view(q, reg.per_owner) for q in range(self.n)]
        perm = reg.perms[p]
        col = i % len(perm)
        return reg.cells.get(i - col + perm[col], self.init_value)

    def store(self, p: int, region, i: int, v: int) -> None:
        reg = self.regions[region]
        if reg.multi_writer:
            if i < 0 or (reg.size is not None and i >= reg.size):
                raise IndexError(f"local index {i} out of range for region {region!r}")
            phys = i
        else:
            if i % (self.n * reg.per_owner) >= reg.per_owner:
                raise NotOwner(f"local index {i} of region {region!r} is not an owned register")
            phys = self.physical(p, region, i)
        check_value(v)
        reg.cells[phys] = v

    def read(self, p: int, j: int) -> int:
        """Read base register with 1-based local index ``j``."""
        self._check_base(j)
        return self.load(p, 0, j - 1)

    def write(self, p: int, j: int, v: int) -> None:
        """Write base register with 1-based local index ``j``."""
        self._check_base(j)
        self.store(p, 0, j - 1, v)

    def _check_base(self, j):
        if not 1 <= j <= self.m:
            raise IndexError(f"local index {j} outside 1..{self.m}")

    # -- harness-side inspection ----------------------------------------

    def peek(self, region, offset: int) -> int:
        return self.regions[region].cells.get(offset, self.init_value)

    def contents(self, region=0) -> list:
        """Physical contents of a bounded region."""
        reg = self.regions[region]
        if reg.size is None:
            raise ValueError("unbounded region has no finite contents")
        return [reg.cells.get(i, self.init_value) for i in range(reg.size)]

    def key(self) -> tuple:
        """Hashable snapshot of every written register."""
        return tuple(
            (repr(name), tuple(sorted((o, v) for o, v in reg.cells.items() if v != self.init_value)))
            for name, reg in sorted(self.regions.items(), key=lambda kv: repr(kv[0]))
        )

    def copy(self) -> "Memory":
        dup = Memory.__new__(Memory)
        dup.discipline = self.discipline
        dup.n = self.n
        dup.init_value = self.init_value
        dup.perm_seed = self.perm_seed
        dup._views = self._views  # permutations are immutable and seed-derived
        dup.regions = {}
        for name, reg in self.regions.items():
            r = _Region(name, reg.size, reg.per_owner, reg.multi_writer)
            r.cells = dict(reg.cells)
            r.perms = reg.perms
            dup.regions[name] = r
        return dup


def check_value(v) -> None:
    if not isinstance(v, int) or not 0 <= v < WORD_LIMIT:
        raise ValueError(f"register value {v!r} does not fit a {WORD_BITS}-bit word")


def make_symmetric(m: int, v0: int = 0) -> Memory:
    if m < 1:
        raise ValueError("memory needs at least one register")
    mem = Memory(SYMMETRIC, None, v0)
    mem.ensure_region(0, size=m)
    return mem


def make_asymmetric(n: int, k: int, perm_seed, v0: int = 0) -> Memory:
    """``n`` processes each owning ``k`` registers; local indices ``1..k`` are private."""
    if n < 1 or k < 1:
        raise ValueError("asymmetric memory needs n >= 1 and k >= 1")
    mem = Memory(ASYMMETRIC, n, v0, perm_seed)
    mem.ensure_region(0, size=n * k, per_owner=k)
    return mem
