"""Team-race binary consensus over multi-writer flag rows.

Two rows of monotone boolean flags, one per team, are raised left to right by
team members. A process compares its own team's position with the other
row, sticks, switches, tosses a weak shared coin on a tie, or decides when the
other team trails by two. Flags live in one register region, ``Mark[b][pos]``
at local index ``2 * pos + b``.
"""

from __future__ import annotations

from .coin import CoinFamily, coin_position
from .engine import (CRASHED, DONE, FLIP_OP, INVOKE, OUTPUT, READ, RETURN, WRITE,
                     build_system, derive_seed, make_adversary)
from .memory import make_symmetric


def mark_index(b: int, pos: int) -> int:
    return 2 * pos + b


class ConsensusBoard:
    """Flag rows in an unbounded memory region.

    Rows are stored sparsely, so growth never moves a flag; ``capacity``
    reports the doubling capacity a dense layout would have reached.
    """

    def __init__(self, memory, board_id=0, capacity=4):
        if capacity < 2:
            raise ValueError("board capacity must be at least 2")
        self.memory = memory
        self.region = ("mark", board_id)
        self.initial_capacity = capacity
        if memory.ensure_region(self.region, multi_writer=True):
            init(memory, self.region)

    @property
    def capacity(self) -> int:
        cap = self.initial_capacity
        top = max(self.heights())
        while top >= cap:
            cap *= 2
        return cap

    def flag(self, b, pos) -> bool:
        return bool(self.memory.peek(self.region, mark_index(b, pos)))

    def raised(self) -> list:
        """Positions of the true flags, per row."""
        cells = self.memory.regions[self.region].cells
        rows = [[], []]
        for idx, v in sorted(cells.items()):
            if v:
                rows[idx % 2].append(idx // 2)
        return rows

    def heights(self) -> tuple:
        rows = self.raised()
        return max(rows[0]), max(rows[1])


def init(memory, region) -> None:
    """Initialization: Mark[0][0] and Mark[1][0] are true, everything else false."""
    reg = memory.regions[region]
    reg.cells[mark_index(0, 0)] = 1
    reg.cells[mark_index(1, 0)] = 1


def consensus_board_new(memory=None, capacity=4, board_id=0) -> ConsensusBoard:
    return ConsensusBoard(memory if memory is not None else make_symmetric(1), board_id, capacity)


# program counters of the propose loop
_START, _RAISED, _AHEAD, _TIE, _COIN, _TRAIL, _RECHECK = range(7)


class Propose:
    """``propose(v)`` of the flag race, one atomic step per flag probe or write.

    As a top-level automaton it ends with ``OUTPUT``; as a frame inside a
    consensus object it ends with ``RETURN``.
    """

    __slots__ = ("region", "coin", "ns", "team", "position", "tentative", "pc",
                 "iterations", "coin_invocations", "finish", "input", "decided_at", "uses")

    def __init__(self, v, region, coin="coin", ns=(), finish=OUTPUT):
        if v not in (0, 1):
            raise ValueError("input must be a bit")
        self.input = v
        self.region = region
        self.coin = coin
        self.ns = ns
        self.team = v
        self.position = 1
        self.tentative = None
        self.pc = _START
        self.iterations = 0
        self.coin_invocations = 0
        self.finish = finish
        self.decided_at = None
        self.uses = (coin,)

    def _read_other(self, pos):
        return (READ, self.region, 2 * pos + 1 - self.team)

    def _recheck(self):
        return (READ, self.region, 2 * (self.position + 1) + self.team)

    def step(self, r):
        pc = self.pc
        if pc == _START or pc == _RECHECK:
            if pc == _RECHECK:
                if not r:
                    self.team = self.tentative
                self.position += 1
            self.iterations += 1
            self.pc = _RAISED
            return (WRITE, self.region, 2 * self.position + self.team, 1)
        if pc == _RAISED:
            self.pc = _AHEAD
            return self._read_other(self.position + 1)
        if pc == _AHEAD:
            if r:
                self.tentative = 1 - self.team
                self.pc = _RECHECK
                return self._recheck()
            self.pc = _TIE
            return self._read_other(self.position)
        if pc == _TIE:
            if r:
                self.coin_invocations += 1
                self.pc = _COIN
                return (INVOKE, self.coin, self.ns + (self.team, self.position))
            self.pc = _TRAIL
            return self._read_other(self.position - 1)
        if pc == _COIN:
            self.tentative = r
            self.pc = _RECHECK
            return self._recheck()
        if pc == _TRAIL:
            if r:
                self.tentative = self.team
                self.pc = _RECHECK
                return self._recheck()
            self.decided_at = self.position
            return (self.finish, self.team)
        raise RuntimeError(f"bad program counter {pc}")

    def key(self):
        return (self.team, self.position, self.tentative, self.pc)

    def copy(self):
        dup = Propose.__new__(Propose)
        for name in Propose.__slots__:
            setattr(dup, name, getattr(self, name))
        return dup


def propose_automaton(v, board: ConsensusBoard, coin_family=None, coin="coin") -> Propose:
    return Propose(v, board.region, coin)


class IdealConsensus:
    """Atomic consensus objects keyed by instance: the first invocation fixes the value.

    Invocation arguments are ``(*instance, bit)``. Which invoker goes first is
    up to the adversary, so a strong adversary fully controls the outcome
    among the proposed bits.
    """

    atomic = True
    ideal_consensus = True

    def __init__(self):
        self.values = {}

    def decided(self, inst):
        return self.values.get(inst)

    def invoke(self, args, sys_):
        inst, bit = tuple(args[:-1]), args[-1]
        return self.values.setdefault(inst, bit)

    def key(self):
        return tuple(sorted(self.values.items()))

    def copy(self):
        dup = IdealConsensus()
        dup.values = dict(self.values)
        return dup


class FlagRaceConsensus:
    """Consensus objects realized by the flag race, one board and coin family per instance.

    Invocation arguments are ``(*instance, bit)``; each instance gets its own
    flag region and coin namespace, created on first use.
    """

    atomic = False

    def __init__(self, coin="coin", name="fr"):
        self.coin = coin
        self.name = name

    def begin(self, args, sys_):
        inst, bit = tuple(args[:-1]), args[-1]
        region = ("mark", self.name) + inst
        if sys_.memory.ensure_region(region, multi_writer=True):
            init(sys_.memory, region)
        return Propose(bit, region, self.coin, ns=(self.name,) + inst, finish=RETURN)

    def key(self):
        return ()

    def copy(self):
        return self


# -- experiment driver ---------------------------------------------------------


def mark_heights(sys_):
    cells = sys_.memory.regions[("mark", 0)].cells
    h = [0, 0]
    for idx, v in cells.items():
        if v and idx // 2 > h[idx % 2]:
            h[idx % 2] = idx // 2
    return h


def consensus_system(n, inputs, adversary="round-robin", crashes=None, delta=0.25, seed=0,
                     K=None, B=10, record=False, coin_backend="walk", tapes=None):
    """Board + coin family + ``n`` propose automata, ready to run.

    ``coin_backend="local"`` replaces the shared coin by a single private
    flip per invocation, which exhibits every possible coin outcome and is
    used by the exhaustive safety check.
    """
    if len(inputs) != n:
        raise ValueError("need one input bit per process")
    mem = make_symmetric(1)
    board = ConsensusBoard(mem)
    if coin_backend == "walk":
        coin = CoinFamily(delta, n, K, B)
    elif coin_backend == "local":
        coin = LocalCoin()
    else:
        raise ValueError(f"unknown coin backend {coin_backend!r}")
    if isinstance(adversary, str):
        adversary = make_adversary(adversary, n, derive_seed(seed, "adversary"))
    automata = [propose_automaton(v, board) for v in inputs]
    sys_ = build_system(automata, mem, {"coin": coin}, adversary, crashes, seed,
                        tapes=tapes, record=record)
    sys_.info.update(mark_heights=mark_heights, coin_position=coin_position, board=board,
                     inputs=list(inputs), family=coin)
    return sys_


class LocalCoin:
    """Degenerate coin: every invocation returns one private flip."""

    atomic = False

    def begin(self, args, sys_):
        return _LocalFlip()

    def key(self):
        return ()

    def copy(self):
        return self


class _LocalFlip:
    __slots__ = ("flipped",)

    def __init__(self):
        self.flipped = False

    def step(self, r):
        if self.flipped:
            return (RETURN, r)
        self.flipped = True
        return FLIP_OP

    def key(self):
        return (self.flipped,)

    def copy(self):
        dup = _LocalFlip()
        dup.flipped = self.flipped
        return dup


def check_consensus(sys_) -> list:
    """Safety violations of a (finished or partial) consensus run."""
    inputs = sys_.info["inputs"]
    decided = [p.value for p in sys_.procs if p.status == DONE]
    out = []
    if len(set(decided)) > 1:
        out.append("agreement")
    if any(v not in inputs for v in decided):
        out.append("validity")
    return out


def check_flag_gap(trace, region=("mark", 0)) -> bool:
    """A decision on ``b`` at position ``pos`` saw Mark[1-b][pos-1] false, and it was false then."""
    flags = {mark_index(0, 0): 1, mark_index(1, 0): 1}
    last_read = {}
    for _, pid, op, result in trace:
        if op[0] == WRITE and op[1] == region:
            flags[op[2]] = op[3]
        elif op[0] == READ and op[1] == region:
            last_read[pid] = (op[2], result, flags.get(op[2], 0))
        elif op[0] == OUTPUT and pid in last_read:
            idx, seen, actual = last_read[pid]
            b = op[1]
            if idx % 2 != 1 - b or seen or actual:
                return False
    return True


def run_consensus(n, inputs, adversary="round-robin", crashes=None, delta=0.25, seed=0,
                  max_steps=None, K=None, B=10, record=False, coin_backend="walk"):
    """Run one trial; return ``(outcomes, stats)``."""
    sys_ = consensus_system(n, inputs, adversary, crashes, delta, seed, K, B, record, coin_backend)
    if max_steps is None:
        max_steps = 50 * B * n ** 5
    outcomes, trace = sys_.run(max_steps)
    stats = {
        "outcomes": outcomes,
        "iterations": [p.automaton.iterations for p in sys_.procs],
        "coin_invocations": [p.automaton.coin_invocations for p in sys_.procs],
        "steps": [p.steps for p in sys_.procs],
        "total_steps": sys_.steps,
        "violations": check_consensus(sys_),
        "crashed": [p.status == CRASHED for p in sys_.procs],
        "system": sys_,
    }
    return outcomes, stats


__all__ = ["ConsensusBoard", "consensus_board_new", "Propose", "propose_automaton",
           "IdealConsensus", "FlagRaceConsensus", "LocalCoin", "consensus_system",
           "run_consensus", "check_consensus", "check_flag_gap"]
