"""Naming anonymous processes over asymmetric (single-writer) memory.

``select_winner(i)`` elects at most one owner of key ``i`` among the processes
that invoke it. Each attempt goes through a fresh consensus instance indexed by
``(i, attempt)``, followed by a scan of the attempt's row of the key's winner
board, a write to the caller's own column, and a rescan. Three naming drivers
sit on top:

* ``simple``: try keys ``1..n`` in order.
* ``squeeze``: random keys from geometrically shrinking segments, then the
  residual tail in order, then the simple protocol as a back-up.
* ``rename``: squeeze with every random choice replaced by bits of a
  distinct identifier, so no private coin is ever flipped.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .coin import CoinFamily
from .consensus import FlagRaceConsensus, IdealConsensus
from .engine import (CRASHED, DONE, FLIP_OP, HALT_OP, INVOKE, OUTPUT, READ, RETURN, WRITE,
                     build_system, derive_seed, make_adversary)
from .memory import make_asymmetric

LOSER, WINNER, FAILED = 0, 1, -1


# -- segment plan ----------------------------------------------------------------


@dataclass(frozen=True)
class SegmentPlan:
    n: int
    c: float
    log_base: float
    p: float
    threshold: float            # log^2 n
    sizes: tuple                # s_1 .. s_ell
    next_size: int              # s_{ell+1}, the first size below the threshold
    intervals: tuple = field(repr=False)  # (lo, hi) inclusive for I_1 .. I_{ell+1}

    @property
    def ell(self) -> int:
        return len(self.sizes)

    @property
    def tail(self) -> tuple:
        return self.intervals[-1]

    def keys(self) -> list:
        out = []
        for lo, hi in self.intervals:
            out.extend(range(lo, hi + 1))
        return out


def segment_plan(n: int, c: float = 4, log_base: float = 2) -> SegmentPlan:
    """Geometric partition of keys ``1..n``.

    ``s_k = max(1, floor(p (1-p)^(k-1) n))`` with ``p = 1 / (c log n)``;
    segments are kept while ``s_k >= log^2 n`` and they still fit in ``1..n``.
    """
    if n < 2:
        raise ValueError("a segment plan needs n >= 2")
    if c < 1:
        raise ValueError("confidence exponent c must be at least 1")
    log_n = math.log(n, log_base)
    p = 1.0 / (c * log_n)
    if not 0 < p <= 1:
        raise ValueError(f"p = {p} is not a probability; raise c")
    threshold = log_n ** 2

    def size(k):
        return max(1, math.floor(p * (1 - p) ** (k - 1) * n))

    sizes = []
    used = 0
    k = 1
    while True:
        s = size(k)
        if s < threshold or used + s > n:
            break
        sizes.append(s)
        used += s
        k += 1
    intervals = []
    lo = 1
    for s in sizes:
        intervals.append((lo, lo + s - 1))
        lo += s
    intervals.append((lo, n))
    return SegmentPlan(n, c, log_base, p, threshold, tuple(sizes), size(k), tuple(intervals))


# -- select_winner ----------------------------------------------------------------

_BIT, _GOTBIT, _CONS, _SCAN1, _WROTE, _SCAN2, _EXITED, _XW, _XX = range(9)

GUARDED, PLAIN = "guarded", "plain"


class SelectWinner:
    """One caller's frame of ``select_winner(key)``.

    Row ``a`` (attempt ``a``, 1-based) of the key's board occupies local
    indices ``(a-1)*n .. a*n-1``; local column 0 is always the caller's own
    register. Scans stop as soon as their verdict is fixed: the first 1 in the
    pre-write scan, or the second 1 in the post-write scan.

    ``plain`` moves every colliding caller on to the next attempt. That admits
    two winners: A and B both pre-scan an empty row, A writes and rescans
    alone (wins), B then writes, collides and wins the next attempt alone.
    ``guarded`` (the default) makes a colliding caller first set its exit mark
    in row ``a`` of a second board ``X`` and rescan: it moves on only if every
    1 in the ``W`` row has its exit mark, and loses otherwise. A caller that
    moves on read a would-be winner's ``W`` cell as 0, so its own ``W`` write
    preceded that winner's rescan, which then could not have been alone.
    """

    __slots__ = ("target", "n", "cons", "region", "xregion", "guarded", "bits", "attempt", "pc",
                 "b", "j", "ones", "flips")

    def __init__(self, key, n, cons="cons", bits=None, variant=GUARDED):
        if variant not in (GUARDED, PLAIN):
            raise ValueError(f"unknown select_winner variant {variant!r}")
        self.target = key
        self.n = n
        self.cons = cons
        self.region = ("W", key)
        self.xregion = ("X", key)
        self.guarded = variant == GUARDED
        self.bits = bits
        self.attempt = 0
        self.pc = _BIT
        self.b = None
        self.j = 0
        self.ones = 0
        self.flips = 0

    def _cell(self, j):
        return (self.attempt - 1) * self.n + j

    def _next_attempt(self):
        self.attempt += 1
        if self.bits is not None:
            if self.attempt > len(self.bits):
                return (RETURN, FAILED)
            self.b = self.bits[self.attempt - 1]
            self.pc = _CONS
            return (INVOKE, self.cons, (self.target, self.attempt, self.b))
        self.pc = _GOTBIT
        return FLIP_OP

    def step(self, r):
        pc = self.pc
        if pc == _SCAN2:
            if r:
                self.ones += 1
                if self.ones > 1:
                    return self._collided()
            j = self.j = self.j + 1
            if j < self.n:
                return (READ, self.region, (self.attempt - 1) * self.n + j)
            return (RETURN, WINNER) if self.ones == 1 else self._collided()
        if pc == _SCAN1:
            if r:
                return (RETURN, LOSER)
            j = self.j = self.j + 1
            if j < self.n:
                return (READ, self.region, (self.attempt - 1) * self.n + j)
            self.pc = _WROTE
            return (WRITE, self.region, self._cell(0), 1)
        if pc == _XW:
            if r:
                self.pc = _XX
                return (READ, self.xregion, self._cell(self.j))
            return self._exit_scan_next()
        if pc == _XX:
            if not r:
                return (RETURN, LOSER)
            return self._exit_scan_next()
        if pc == _BIT:
            return self._next_attempt()
        if pc == _GOTBIT:
            self.b = r
            self.flips += 1
            self.pc = _CONS
            return (INVOKE, self.cons, (self.target, self.attempt, r))
        if pc == _CONS:
            if r != self.b:
                return (RETURN, LOSER)
            self.pc = _SCAN1
            self.j = 0
            return (READ, self.region, self._cell(0))
        if pc == _WROTE:
            self.pc = _SCAN2
            self.j = 0
            self.ones = 0
            return (READ, self.region, self._cell(0))
        if pc == _EXITED:
            self.j = 0
            self.pc = _XW
            return (READ, self.region, self._cell(0))
        raise RuntimeError(f"bad program counter {pc}")

    def _collided(self):
        if not self.guarded:
            return self._next_attempt()
        self.pc = _EXITED
        return (WRITE, self.xregion, self._cell(0), 1)

    def _exit_scan_next(self):
        self.j += 1
        if self.j < self.n:
            self.pc = _XW
            return (READ, self.region, self._cell(self.j))
        return self._next_attempt()

    def key(self):
        return (self.target, self.attempt, self.pc, self.b, self.j, self.ones)

    def copy(self):
        dup = SelectWinner.__new__(SelectWinner)
        for name in SelectWinner.__slots__:
            setattr(dup, name, getattr(self, name))
        return dup


class SelectWinnerObject:
    """Step-machine object ``sw``: arguments ``(key,)`` or ``(key, id_bits)``."""

    atomic = False

    def __init__(self, n, cons="cons", variant=GUARDED):
        self.n = n
        self.cons = cons
        self.variant = variant

    def begin(self, args, sys_):
        key = args[0]
        sys_.memory.ensure_region(("W", key), per_owner=1)
        sys_.memory.ensure_region(("X", key), per_owner=1)
        return SelectWinner(key, self.n, self.cons, args[1] if len(args) > 1 else None, self.variant)

    def key(self):
        return ()

    def copy(self):
        return self


# -- naming drivers ---------------------------------------------------------------

SIMPLE, SQUEEZE, RENAME = "simple", "squeeze", "rename"
_SEG, _TAIL, _BACKUP = range(3)
_NEXT, _DRAW, _INV = range(3)


def id_bits(ident) -> tuple:
    """Normalize an identifier given as a bit string, a bit sequence or a non-negative int."""
    if isinstance(ident, int):
        if ident < 0:
            raise ValueError("identifiers must be non-negative")
        return tuple(int(c) for c in format(ident, "b"))
    bits = tuple(int(c) for c in ident)
    if not bits or any(b not in (0, 1) for b in bits):
        raise ValueError(f"identifier {ident!r} is not a non-empty bit string")
    return bits


class Namer:
    """Top-level naming automaton; outputs the key it won.

    ``claimed`` is set the moment select_winner reports a win, so a process
    that crashes before its output step still counts as that key's winner.
    """

    __slots__ = ("mode", "n", "plan", "ident", "stage", "k", "cursor", "pc", "target",
                 "draw", "nbits", "lo", "size", "invocations", "claimed", "won_phase",
                 "entered_backup", "failed", "uses")

    def __init__(self, n, mode=SQUEEZE, plan=None, ident=None):
        if mode not in (SIMPLE, SQUEEZE, RENAME):
            raise ValueError(f"unknown naming mode {mode!r}")
        if mode != SIMPLE and plan is None:
            plan = segment_plan(n) if n >= 2 else None
        if mode == RENAME and ident is None:
            raise ValueError("renaming needs an identifier per process")
        self.mode = mode
        self.n = n
        self.plan = plan
        self.ident = id_bits(ident) if ident is not None else None
        self.stage = _BACKUP if (mode == SIMPLE or plan is None) else _SEG
        self.k = 0
        self.cursor = 1 if self.stage == _BACKUP else None
        self.pc = _NEXT
        self.target = None
        self.draw = []
        self.nbits = 0
        self.lo = self.size = 0
        self.invocations = 0
        self.claimed = None
        self.won_phase = None
        self.entered_backup = False
        self.failed = False
        self.uses = ("sw",)

    def phase_label(self) -> str:
        if self.stage == _SEG:
            return f"segment:{self.k + 1}"
        if self.stage == _TAIL:
            return "tail"
        return SIMPLE if self.mode == SIMPLE or self.plan is None else "backup"

    def _invoke(self, key):
        self.target = key
        self.pc = _INV
        args = (key,) if self.ident is None else (key, self.ident)
        return (INVOKE, "sw", args)

    def _next_key(self):
        plan = self.plan
        while True:
            if self.stage == _SEG:
                if self.k < plan.ell:
                    lo, hi = plan.intervals[self.k]
                    size = hi - lo + 1
                    if self.ident is not None:
                        v = 0
                        for b in self.ident:
                            v = 2 * v + b
                        return self._invoke(lo + v % size)
                    if size == 1:
                        return self._invoke(lo)
                    self.lo, self.size = lo, size
                    self.nbits = (size - 1).bit_length()
                    self.draw = []
                    self.pc = _DRAW
                    return FLIP_OP
                self.stage = _TAIL
                self.cursor = plan.tail[0]
            if self.stage == _TAIL:
                if self.cursor <= plan.tail[1]:
                    return self._invoke(self.cursor)
                self.stage = _BACKUP
                self.entered_backup = True
                self.cursor = 1
            if self.cursor <= self.n:
                return self._invoke(self.cursor)
            # lost every key: impossible without a duplicate-winner bug
            self.failed = True
            return HALT_OP

    def step(self, r):
        if self.pc == _INV:
            self.invocations += 1
            if r == WINNER:
                self.claimed = self.target
                self.won_phase = self.phase_label()
                return (OUTPUT, self.target)
            if r == FAILED:
                self.failed = True
                return HALT_OP
            if self.stage == _SEG:
                self.k += 1
            else:
                self.cursor += 1
        elif self.pc == _DRAW:
            self.draw.append(r)
            if len(self.draw) < self.nbits:
                return FLIP_OP
            v = 0
            for b in self.draw:
                v = 2 * v + b
            self.draw = []
            if v < self.size:
                return self._invoke(self.lo + v)
            return FLIP_OP
        return self._next_key()

    def key(self):
        return (self.stage, self.k, self.cursor, self.pc, self.target, tuple(self.draw),
                self.claimed, self.failed)

    def copy(self):
        dup = Namer.__new__(Namer)
        for name in Namer.__slots__:
            setattr(dup, name, getattr(self, name))
        dup.draw = list(self.draw)
        return dup


class SelectWinnerCaller:
    """Top-level automaton invoking ``select_winner(key)`` once; outputs 1 (won) or 0 (lost)."""

    uses = ("sw",)

    def __init__(self, key=1, ident=None):
        self.target = key
        self.ident = id_bits(ident) if ident is not None else None
        self.invoked = False
        self.claimed = None
        self.failed = False

    def step(self, r):
        if not self.invoked:
            self.invoked = True
            return (INVOKE, "sw", (self.target,) if self.ident is None else (self.target, self.ident))
        if r == FAILED:
            self.failed = True
            return HALT_OP
        if r == WINNER:
            self.claimed = self.target
        return (OUTPUT, r)

    def key(self):
        return (self.invoked, self.claimed, self.failed)

    def copy(self):
        dup = SelectWinnerCaller.__new__(SelectWinnerCaller)
        dup.__dict__.update(self.__dict__)
        return dup


def _objects(n, consensus, delta, K, B, variant):
    objects = {"sw": SelectWinnerObject(n, variant=variant)}
    if consensus == "ideal":
        objects["cons"] = IdealConsensus()
    elif consensus == "flag-race":
        objects["cons"] = FlagRaceConsensus(coin="coin")
        objects["coin"] = CoinFamily(delta, n, K, B)
    else:
        raise ValueError(f"unknown consensus backend {consensus!r}")
    return objects


def _build(automata, n, adversary, crashes, seed, consensus, delta, K, B, tapes, record, variant):
    mem = make_asymmetric(n, 1, perm_seed=derive_seed(seed, "perm"))
    if isinstance(adversary, str):
        adversary = make_adversary(adversary, n, derive_seed(seed, "adversary"))
    sys_ = build_system(automata, mem, _objects(n, consensus, delta, K, B, variant), adversary, crashes,
                        seed, tapes=tapes, record=record)
    sys_.info["n"] = n
    return sys_


def naming_system(n, mode=SQUEEZE, c=4, log_base=2, adversary="round-robin", crashes=None,
                  seed=0, consensus="ideal", ids=None, delta=0.25, K=None, B=10, tapes=None,
                  record=False, variant=GUARDED):
    """``n`` naming automata over fresh asymmetric memory (one owned register per row)."""
    plan = segment_plan(n, c, log_base) if mode != SIMPLE and n >= 2 else None
    if mode == RENAME:
        if ids is None or len(ids) != n:
            raise ValueError("renaming needs one identifier per process")
        automata = [Namer(n, RENAME, plan, ident) for ident in ids]
    else:
        automata = [Namer(n, mode, plan) for _ in range(n)]
    sys_ = _build(automata, n, adversary, crashes, seed, consensus, delta, K, B, tapes, record,
                  variant)
    sys_.info["plan"] = plan
    return sys_


def select_winner_system(n, key=1, adversary="round-robin", crashes=None, seed=0,
                         consensus="ideal", ids=None, tapes=None, record=False, delta=0.25,
                         K=None, B=10, variant=GUARDED):
    """``n`` processes that each invoke ``select_winner(key)`` exactly once."""
    idents = ids if ids is not None else [None] * n
    automata = [SelectWinnerCaller(key, ident) for ident in idents]
    return _build(automata, n, adversary, crashes, seed, consensus, delta, K, B, tapes, record,
                  variant)


def winners(sys_) -> Counter:
    """Claimed keys across all processes, crashed ones included."""
    return Counter(p.automaton.claimed for p in sys_.procs if p.automaton.claimed is not None)


def check_at_most_one_winner(sys_) -> list:
    return ["at-most-one-winner"] if any(c > 1 for c in winners(sys_).values()) else []


def check_naming(sys_, finished=True) -> list:
    """Safety (and, for finished runs, liveness) violations of a naming run."""
    n = sys_.info["n"]
    out = check_at_most_one_winner(sys_)
    keys = [p.value for p in sys_.procs if p.status == DONE and p.value is not None]
    if len(set(keys)) != len(keys):
        out.append("name-uniqueness")
    if any(not 1 <= k <= n for k in keys):
        out.append("key-range")
    if any(p.automaton.failed for p in sys_.procs):
        out.append("failed")
    if finished and any(p.status not in (DONE, CRASHED) or (p.status == DONE and p.value is None)
                        for p in sys_.procs):
        out.append("unnamed")
    return out


def run_naming(n, mode=SQUEEZE, c=4, adversary="round-robin", crashes=None, seed=0,
               consensus="ideal", ids=None, max_steps=None, record=False, **kw):
    """Run one naming trial; return ``(outcomes, stats)``."""
    sys_ = naming_system(n, mode, c, adversary=adversary, crashes=crashes, seed=seed,
                         consensus=consensus, ids=ids, record=record, **kw)
    if max_steps is None:
        max_steps = 64 * n ** 4 + 10_000
    outcomes, _ = sys_.run(max_steps)
    autos = [p.automaton for p in sys_.procs]
    stats = {
        "outcomes": outcomes,
        "keys": [p.value if p.status == DONE else None for p in sys_.procs],
        "invocations": [a.invocations for a in autos],
        "phases": [a.won_phase for a in autos],
        "entered_backup": any(a.entered_backup for a in autos),
        "flips": sum(p.tape.consumed for p in sys_.procs),
        "steps": [p.steps for p in sys_.procs],
        "total_steps": sys_.steps,
        "violations": check_naming(sys_),
        "crashed": [p.status == CRASHED for p in sys_.procs],
        "system": sys_,
    }
    return outcomes, stats


__all__ = ["SegmentPlan", "segment_plan", "SelectWinner", "SelectWinnerObject", "Namer",
           "SelectWinnerCaller", "naming_system", "select_winner_system", "run_naming",
           "check_naming", "check_at_most_one_winner", "winners", "id_bits",
           "LOSER", "WINNER", "FAILED", "GUARDED", "PLAIN", "SIMPLE", "SQUEEZE", "RENAME"]
