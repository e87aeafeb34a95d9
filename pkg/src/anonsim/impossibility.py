"""Coupling harnesses behind the two naming impossibility arguments.

``mirror_symmetric`` runs two copies of a protocol over symmetric memory with
identical private tapes under the alternating schedule p, q, p, q, ... and
checks after every round that both copies are in the same state with the same
pending operation, and that memory equals the memory of a solo run after the
same number of steps. ``lockstep_asymmetric`` does the same for deterministic
automata over single-writer memory with hidden permutations, comparing the two
processes' local views.

The reports only say what was observed on the bounded horizon ("collision
witnessed under coupling"); they prove nothing about protocols outside the
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .consensus import IdealConsensus
from .engine import (DONE, FLIP, FLIP_OP, INVOKE, OUTPUT, READ, WRITE, Tape, build_system,
                     derive_seed, weak_schedule_from_seed)
from .memory import make_asymmetric, make_symmetric


class DeterminismError(ValueError):
    """A lock-step automaton asked for a random bit."""


@dataclass
class MirrorReport:
    model: str
    rounds: int = 0
    equal_rounds: int = 0
    first_divergence: int = None
    memory_matches: bool = True
    outputs: tuple = (None, None)
    collision: bool = False
    finished: bool = False
    notes: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.first_divergence is not None

    def summary(self) -> str:
        verdict = "collision witnessed under coupling" if self.collision else "no collision observed"
        eq = "equal at every round" if not self.diverged else f"DIVERGED at round {self.first_divergence}"
        return (f"{self.model}: {self.rounds} rounds, configurations {eq}; "
                f"outputs {self.outputs}; {verdict}")


# -- candidate protocols over symmetric memory ---------------------------------------
# Base region 0 has M registers, addressed with 0-based local indices.

M = 8


class RandomBitsName:
    """Name := ``bits`` private random bits (plus one)."""

    model = "symmetric"

    def __init__(self, bits=3):
        self.bits = bits
        self.acc = []

    def step(self, r):
        if r is not None:
            self.acc.append(r)
        if len(self.acc) < self.bits:
            return FLIP_OP
        v = 0
        for b in self.acc:
            v = 2 * v + b
        return (OUTPUT, v + 1)

    def key(self):
        return tuple(self.acc)

    def copy(self):
        dup = RandomBitsName(self.bits)
        dup.acc = list(self.acc)
        return dup


class RegisterClaim:
    """Pick a random register, claim it if it reads 0, otherwise pick again."""

    model = "symmetric"

    def __init__(self, m=M):
        self.m = m
        self.acc = []
        self.slot = None
        self.pc = 0

    def step(self, r):
        if self.pc == 0:
            if r is not None:
                self.acc.append(r)
            if len(self.acc) < 3:
                return FLIP_OP
            self.slot = (4 * self.acc[0] + 2 * self.acc[1] + self.acc[2]) % self.m
            self.acc = []
            self.pc = 1
            return (READ, 0, self.slot)
        if self.pc == 1:
            if r:
                self.pc = 0
                return FLIP_OP
            self.pc = 2
            return (WRITE, 0, self.slot, 1)
        return (OUTPUT, self.slot + 1)

    def key(self):
        return (tuple(self.acc), self.slot, self.pc)

    def copy(self):
        dup = RegisterClaim(self.m)
        dup.acc, dup.slot, dup.pc = list(self.acc), self.slot, self.pc
        return dup


class ConsensusLadder:
    """For k = 1, 2, ...: propose a random bit to consensus(k); on a match claim register k if free."""

    model = "symmetric"
    uses = ("cons",)

    def __init__(self, m=M):
        self.m = m
        self.k = 1
        self.b = None
        self.pc = 0

    def step(self, r):
        if self.pc == 0:
            self.pc = 1
            return FLIP_OP
        if self.pc == 1:
            self.b = r
            self.pc = 2
            return (INVOKE, "cons", (self.k, r))
        if self.pc == 2:
            if r != self.b:
                return self._next()
            self.pc = 3
            return (READ, 0, (self.k - 1) % self.m)
        if self.pc == 3:
            if r:
                return self._next()
            self.pc = 4
            return (WRITE, 0, (self.k - 1) % self.m, 1)
        return (OUTPUT, self.k)

    def _next(self):
        self.k += 1
        self.pc = 1
        return FLIP_OP

    def key(self):
        return (self.k, self.b, self.pc)

    def copy(self):
        dup = ConsensusLadder(self.m)
        dup.k, dup.b, dup.pc = self.k, self.b, self.pc
        return dup


class TokenEcho:
    """Write a random token, read it back; name yourself after ``patience`` undisturbed echoes."""

    model = "symmetric"

    def __init__(self, patience=6000, width=16):
        self.patience = patience
        self.width = width
        self.acc = []
        self.token = None
        self.streak = 0
        self.pc = 0

    def step(self, r):
        if self.pc == 0:
            if r is not None:
                self.acc.append(r)
            if len(self.acc) < self.width:
                return FLIP_OP
            v = 0
            for b in self.acc:
                v = 2 * v + b
            self.acc = []
            self.token = v + 1
            self.pc = 1
            return (WRITE, 0, 0, self.token)
        if self.pc == 1:
            self.pc = 2
            return (READ, 0, 0)
        if r == self.token:
            self.streak += 1
            if self.streak >= self.patience:
                return (OUTPUT, self.token)
        else:
            self.streak = 0
        self.pc = 1
        return (WRITE, 0, 0, self.token)

    def key(self):
        return (tuple(self.acc), self.token, self.streak, self.pc)

    def copy(self):
        dup = TokenEcho(self.patience, self.width)
        dup.acc, dup.token, dup.streak, dup.pc = list(self.acc), self.token, self.streak, self.pc
        return dup


class OwnedWrite:
    """Needs an owned register; not expressible over symmetric memory."""

    model = "asymmetric"

    def step(self, r):
        return (WRITE, 0, 0, 1)

    def key(self):
        return ()

    def copy(self):
        return OwnedWrite()


SYMMETRIC_SUITE = {
    "random-bits": RandomBitsName,
    "register-claim": RegisterClaim,
    "consensus-ladder": ConsensusLadder,
    "token-echo": TokenEcho,
}


def _check_equal(a, b):
    return a.automaton.key() == b.automaton.key() and a.pending == b.pending and a.status == b.status


def mirror_symmetric(factory, seed=0, max_steps=10_000, m=M) -> MirrorReport:
    """Run two tape-cloned copies of ``factory()`` in lock step over symmetric memory.

    ``max_steps`` bounds the number of paired steps (rounds).
    """
    probe = factory()
    if getattr(probe, "model", "symmetric") != "symmetric":
        raise ValueError(f"{type(probe).__name__} needs {probe.model} memory; "
                         "only symmetric protocols can be mirrored")
    tape_seed = derive_seed(seed, "mirror-tape")

    def objects():
        return {"cons": IdealConsensus()}

    solo = build_system([factory()], make_symmetric(m), objects(), None, None, seed,
                        tapes=[Tape(tape_seed)], record=False)
    pair = build_system([factory(), factory()], make_symmetric(m), objects(),
                        weak_schedule_from_seed(seed, 2, "alternating"), None, seed,
                        tapes=[Tape(tape_seed), Tape(tape_seed)], record=False)
    report = MirrorReport("symmetric")
    p, q = pair.procs
    for rnd in range(1, max_steps + 1):
        if not pair.live:
            break
        solo.step(0)
        pair.step(0)
        pair.step(1)
        report.rounds = rnd
        same = _check_equal(p, q)
        mem_same = pair.memory.key() == solo.memory.key()
        if not mem_same:
            report.memory_matches = False
        if same and mem_same:
            report.equal_rounds += 1
        elif report.first_divergence is None:
            report.first_divergence = rnd
    report.finished = not pair.live
    report.outputs = (p.value if p.status == DONE else None, q.value if q.status == DONE else None)
    report.collision = report.outputs[0] is not None and report.outputs[0] == report.outputs[1]
    return report


# -- deterministic automata over asymmetric memory -----------------------------------
# Base region 0 holds k owned registers per process; local indices 0..k-1 are one's own.


class WriteReadOutput:
    """Write 1 to my register 1, read the first shared cell, output what was read."""

    def __init__(self, k=1):
        self.k = k
        self.pc = 0

    def step(self, r):
        self.pc += 1
        if self.pc == 1:
            return (WRITE, 0, 0, 1)
        if self.pc == 2:
            return (READ, 0, self.k)
        return (OUTPUT, r)

    def key(self):
        return (self.pc,)

    def copy(self):
        dup = WriteReadOutput(self.k)
        dup.pc = self.pc
        return dup


class ConstantOutput:
    def __init__(self, value=7):
        self.value = value

    def step(self, r):
        return (OUTPUT, self.value)

    def key(self):
        return ()

    def copy(self):
        return ConstantOutput(self.value)


class MaxPlusOne:
    """Repeatedly collect all registers and publish max + 1 in my own; output after ``rounds``."""

    def __init__(self, n=2, k=1, rounds=2000):
        self.cells = n * k
        self.rounds = rounds
        self.done = 0
        self.i = 0
        self.best = 0
        self.pc = 0

    def step(self, r):
        if self.pc == 1:
            self.best = max(self.best, r)
            self.i += 1
        if self.pc == 2:
            self.done += 1
            if self.done >= self.rounds:
                return (OUTPUT, self.best)
            self.i = 0
        if self.i < self.cells:
            self.pc = 1
            return (READ, 0, self.i)
        self.pc = 2
        return (WRITE, 0, 0, min(self.best + 1, (1 << 63)))

    def key(self):
        return (self.done, self.i, self.best, self.pc)

    def copy(self):
        dup = MaxPlusOne.__new__(MaxPlusOne)
        dup.__dict__.update(self.__dict__)
        return dup


class ParityWalk:
    """A deterministic walk over local indices driven by the parity of what it reads."""

    def __init__(self, n=2, k=2, length=12000):
        self.cells = n * k
        self.k = k
        self.length = length
        self.t = 0
        self.pos = 0
        self.acc = 0
        self.pc = 0

    def step(self, r):
        if self.pc == 1:
            self.acc = (self.acc * 3 + r + 1) % 1000003
            self.pos = (self.pos + 1 + (r & 1)) % self.cells
        self.t += 1
        if self.t >= self.length:
            return (OUTPUT, self.acc)
        if self.t % 3 == 0:
            self.pc = 2
            return (WRITE, 0, self.t % self.k, self.acc)
        self.pc = 1
        return (READ, 0, self.pos)

    def key(self):
        return (self.t, self.pos, self.acc, self.pc)

    def copy(self):
        dup = ParityWalk.__new__(ParityWalk)
        dup.__dict__.update(self.__dict__)
        return dup


class CoinTosser:
    """Randomized; rejected by the lock-step harness."""

    def step(self, r):
        return FLIP_OP if r is None else (OUTPUT, r)

    def key(self):
        return ()

    def copy(self):
        return CoinTosser()


ASYMMETRIC_SUITE = {
    "write-read-output": (WriteReadOutput, 1),
    "constant-output": (ConstantOutput, 1),
    "max-plus-one": (MaxPlusOne, 1),
    "parity-walk": (ParityWalk, 2),
}


def coupled_memory(k=1, perm_seed=0):
    """Two-process asymmetric memory whose hidden views mirror each other.

    Process 0 gets a seed-derived permutation; process 1 sees the same layout
    with the two owned blocks swapped. The permutations are the adversary's to
    choose, and this choice is the one under which the alternating schedule
    keeps both local views equal.
    """
    mem = make_asymmetric(2, k, perm_seed)
    base = mem.view(0, k)
    mem._views[(1, k)] = tuple((x + k) % (2 * k) for x in base)
    return mem


def lockstep_asymmetric(factory, n=2, max_steps=10_000, k=1, perm_seed=0) -> MirrorReport:
    """Run two copies of a deterministic automaton under the alternating schedule.

    After every round compares the processes' local views of memory, their
    states and their pending operations. ``max_steps`` bounds the rounds.
    """
    if n != 2:
        raise ValueError("the lock-step coupling is defined for two processes")
    mem = coupled_memory(k, perm_seed)
    sys_ = build_system([factory(), factory()], mem, {}, weak_schedule_from_seed(0, 2, "alternating"),
                        None, 0, record=False)
    for proc in sys_.procs:
        if proc.pending[0] == FLIP:
            raise DeterminismError(f"{type(proc.automaton).__name__} requests a random bit")
    report = MirrorReport("asymmetric")
    p, q = sys_.procs
    cells = 2 * k
    for rnd in range(1, max_steps + 1):
        if not sys_.live:
            break
        for pid in (0, 1):
            if sys_.procs[pid].status == DONE:
                continue
            sys_.step(pid)
            proc = sys_.procs[pid]
            if proc.status != DONE and proc.pending[0] == FLIP:
                raise DeterminismError(f"{type(proc.automaton).__name__} requests a random bit")
        report.rounds = rnd
        view_p = [mem.load(0, 0, i) for i in range(cells)]
        view_q = [mem.load(1, 0, i) for i in range(cells)]
        if view_p == view_q and _check_equal(p, q):
            report.equal_rounds += 1
        elif report.first_divergence is None:
            report.first_divergence = rnd
            report.notes.append(f"round {rnd}: views {view_p} vs {view_q}")
    report.finished = not sys_.live
    report.outputs = (p.value if p.status == DONE else None, q.value if q.status == DONE else None)
    report.collision = report.outputs[0] is not None and report.outputs[0] == report.outputs[1]
    return report


__all__ = ["MirrorReport", "DeterminismError", "mirror_symmetric", "lockstep_asymmetric",
           "SYMMETRIC_SUITE", "ASYMMETRIC_SUITE", "coupled_memory", "RandomBitsName", "RegisterClaim",
           "ConsensusLadder", "TokenEcho", "OwnedWrite", "WriteReadOutput", "ConstantOutput",
           "MaxPlusOne", "ParityWalk", "CoinTosser"]
