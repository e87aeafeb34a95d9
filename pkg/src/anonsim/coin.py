"""Weak shared coin over a bank of n^2 multi-writer registers.

Every caller picks a slot of the bank uniformly at random and from then on
treats it as its own counter register: it flips a private bit, moves its
local contribution by +-1, and blindly writes ``(net, update count)`` into the
slot. The walk position is read by double collect over the whole bank. The
walk is absorbed at ``+-K*n``; a caller that exhausts ``B*n^5`` of its own
steps flips a private coin instead.
"""

from __future__ import annotations

import math

from .engine import (FLIP_OP, INVOKE, OUTPUT, READ, RETURN, WRITE, build_system, derive_seed,
                     make_adversary)
from .memory import make_symmetric

_COUNT_SHIFT = 32


def pack(net: int, count: int) -> int:
    """One register word holding a signed net contribution and an update count."""
    z = 2 * net if net >= 0 else -2 * net - 1
    return (count << _COUNT_SHIFT) | z


def unpack(word: int) -> tuple:
    z = word & ((1 << _COUNT_SHIFT) - 1)
    net = z >> 1 if not z & 1 else -((z + 1) >> 1)
    return net, word >> _COUNT_SHIFT


def net_of(word: int) -> int:
    z = word & 0xFFFFFFFF
    return z >> 1 if not z & 1 else -((z + 1) >> 1)


def default_k(delta: float) -> int:
    return max(1, math.ceil(4 / (2 * math.e * delta)))


class CoinInstance:
    __slots__ = ("region", "b", "i", "slots", "barrier", "cap")

    def __init__(self, region, b, i, slots, barrier, cap):
        self.region, self.b, self.i = region, b, i
        self.slots, self.barrier, self.cap = slots, barrier, cap


class CoinFamily:
    """Independent coin instances keyed by ``(b, i)``, created on demand.

    The family is a step-machine object for the engine: invoking it with
    arguments ``(b, i)`` runs one caller of instance ``(b, i)``. Longer
    argument tuples ``(*namespace, b, i)`` keep instances of different
    consensus objects apart.
    """

    atomic = False

    def __init__(self, delta, n, K=None, B=10, name="coin", fixed_slot=None):
        if not 0 < delta < 1:
            raise ValueError("agreement parameter delta must lie in (0, 1)")
        if n < 1 or (K is not None and K < 1) or B < 1:
            raise ValueError("need n, K, B >= 1")
        self.delta = delta
        self.internal_delta = 2 * math.e * delta
        self.n = n
        self.K = K if K is not None else default_k(delta)
        self.B = B
        self.name = name
        self.fixed_slot = fixed_slot  # test rigging: every caller uses this slot
        self._instances = {}

    @property
    def barrier(self) -> int:
        return self.K * self.n

    @property
    def cap(self) -> int:
        return self.B * self.n ** 5

    def instance(self, *key) -> CoinInstance:
        """Instance for ``key``; the last two components are ``(b, i)``."""
        inst = self._instances.get(key)
        if inst is None:
            region = (self.name,) + key
            inst = CoinInstance(region, key[-2], key[-1], self.n * self.n, self.barrier, self.cap)
            self._instances[key] = inst
        return inst

    def begin(self, args, sys_):
        inst = self.instance(*args)
        sys_.memory.ensure_region(inst.region, size=inst.slots, multi_writer=True)
        return CoinWalk(inst, self.fixed_slot)

    def key(self):
        return ()

    def copy(self):
        return self


_CHOOSE, _SCAN, _FLIP, _WRITE, _FALLBACK = range(5)


class CoinWalk:
    """One caller's frame inside a coin instance."""

    __slots__ = ("inst", "phase", "slot", "draw", "nbits", "net", "count",
                 "idx", "scan", "prev", "total", "used", "reads", "fallback", "result", "_dir")

    def __init__(self, inst: CoinInstance, fixed_slot=None):
        self.inst = inst
        self.slot = fixed_slot
        self.nbits = max(0, (inst.slots - 1).bit_length())
        self.draw = []
        if fixed_slot is None and self.nbits == 0:
            self.slot = 0
        self.phase = _CHOOSE if self.slot is None else _SCAN
        self.net = 0
        self.count = 0
        self.idx = 0
        self.scan = []
        self.prev = None
        self.total = 0
        self.used = 0
        self.reads = 0  # committed position reads
        self.fallback = False
        self.result = None
        self._dir = 0

    @property
    def region(self):
        return self.inst.region

    def walk_delta(self) -> int:
        """Direction of the pending slot write (0 if no write is pending)."""
        return self._dir if self.phase == _WRITE else 0

    def step(self, result):
        # bookkeeping for the op that just executed
        phase = self.phase
        if phase == _CHOOSE:
            if result is not None:
                self.draw.append(result)
                if len(self.draw) == self.nbits:
                    v = 0
                    for bit in self.draw:
                        v = 2 * v + bit
                    self.draw = []
                    if v < self.inst.slots:
                        self.slot = v
                        self.phase = phase = _SCAN
        elif phase == _SCAN:
            if result is not None:
                self.scan.append(result)
                self.total += net_of(result)
                self.idx += 1
                if self.idx == self.inst.slots:
                    if self.prev is not None:
                        if self.prev == self.scan:
                            self.reads += 1
                            pos = self.total
                            self.prev = None
                            self.scan = []
                            self.idx = 0
                            self.total = 0
                            barrier = self.inst.barrier
                            if pos >= barrier:
                                return (RETURN, 1)
                            if pos <= -barrier:
                                return (RETURN, 0)
                            self.phase = phase = _FLIP
                        else:
                            self.prev = None
                    else:
                        self.prev = self.scan
                    if phase == _SCAN:
                        self.scan = []
                        self.idx = 0
                        self.total = 0
        elif phase == _FLIP:
            self._dir = 1 if result else -1
            self.net += self._dir
            self.count += 1
            self.phase = phase = _WRITE
        elif phase == _WRITE:
            self.phase = phase = _SCAN
        elif phase == _FALLBACK:
            return (RETURN, result)

        if self.used + 1 >= self.inst.cap and phase != _FALLBACK:
            self.fallback = True
            self.phase = _FALLBACK
            self.used += 1
            return FLIP_OP
        self.used += 1
        if phase == _SCAN:
            return (READ, self.inst.region, self.idx)
        if phase == _WRITE:
            return (WRITE, self.inst.region, self.slot, pack(self.net, self.count))
        return FLIP_OP  # _CHOOSE or _FLIP

    def key(self):
        return (self.inst.region, self.phase, self.slot, tuple(self.draw), self.net, self.count,
                self.idx, tuple(self.scan), None if self.prev is None else tuple(self.prev),
                self.used, self.fallback)

    def copy(self):
        dup = CoinWalk.__new__(CoinWalk)
        for name in CoinWalk.__slots__:
            setattr(dup, name, getattr(self, name))
        dup.draw = list(self.draw)
        dup.scan = list(self.scan)
        return dup


def coin_position(sys_, region) -> int:
    """True walk position: sum of the net contributions in a coin bank."""
    reg = sys_.memory.regions.get(region)
    if reg is None:
        return 0
    return sum(net_of(w) for w in reg.cells.values())


class CoinCaller:
    """Top-level automaton: invoke one coin instance and output the returned bit."""

    uses = ("coin",)

    def __init__(self, b=0, i=1, obj="coin"):
        self.args = (b, i)
        self.obj = obj
        self.done = False

    def step(self, result):
        if not self.done:
            self.done = True
            return (INVOKE, self.obj, self.args)
        return (OUTPUT, result)

    def key(self):
        return (self.args, self.done)

    def copy(self):
        dup = CoinCaller(*self.args, obj=self.obj)
        dup.done = self.done
        return dup


def coin_system(n, delta=0.25, K=None, B=10, adversary=None, seed=0, callers=None,
                crashes=None, tapes=None, fixed_slot=None, record=False):
    """A system of ``callers`` (default ``n``) processes invoking instance (0, 1)."""
    family = CoinFamily(delta, n, K, B, fixed_slot=fixed_slot)
    callers = n if callers is None else callers
    if isinstance(adversary, str):
        adversary = make_adversary(adversary, callers, derive_seed(seed, "adversary"))
    mem = make_symmetric(1)
    sys_ = build_system([CoinCaller() for _ in range(callers)], mem, {"coin": family},
                        adversary, crashes, seed, tapes=tapes, record=record)
    sys_.info["coin_position"] = coin_position
    sys_.info["family"] = family
    return sys_


def run_coin(n, delta=0.25, K=None, B=10, adversary=None, seed=0, max_steps=None, **kw):
    """Run one coin instance to completion; return ``(outcomes, system)``."""
    sys_ = coin_system(n, delta, K, B, adversary, seed, **kw)
    family = sys_.info["family"]
    limit = max_steps if max_steps is not None else (kw.get("callers") or n) * family.cap + 10
    outcomes, _ = sys_.run(limit)
    return outcomes, sys_


__all__ = ["CoinFamily", "CoinWalk", "CoinCaller", "coin_system", "run_coin", "coin_position",
           "pack", "unpack", "default_k", "derive_seed"]
