"""Bounded exhaustive exploration of tiny systems.

Every node branches on the process that moves next and, when that process
flips, on the bit it gets. Safety properties are checked at every node.
Probabilities are exact rationals: worst case over schedules (the adversary
minimizes), expectation over tape bits (each branch weighs 1/2).

A witness path is a list of ``(pid, bit)`` moves, ``bit`` being ``None`` for
non-flip steps; :func:`replay` rebuilds the run from a fresh system.
"""

from __future__ import annotations

import sys
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .engine import CRASHED, DONE, FLIP, trace_records

# -- properties ---------------------------------------------------------------------


def _agreement(sys_):
    decided = {p.value for p in sys_.procs if p.status == DONE}
    return len(decided) > 1


def _validity(sys_):
    inputs = sys_.info["inputs"]
    return any(p.value not in inputs for p in sys_.procs if p.status == DONE)


def _claims(sys_):
    return [p.automaton.claimed for p in sys_.procs if getattr(p.automaton, "claimed", None) is not None]


def _at_most_one_winner(sys_):
    claims = _claims(sys_)
    return len(claims) != len(set(claims))


def _name_uniqueness(sys_):
    n = sys_.n
    keys = [p.value for p in sys_.procs if p.status == DONE and p.value is not None]
    return len(keys) != len(set(keys)) or any(not 1 <= k <= n for k in keys)


def _winner_exists(sys_):
    # evaluated at terminal nodes only: a crash-free finished run has a winner
    if any(p.status == CRASHED for p in sys_.procs):
        return False
    return len(_claims(sys_)) != 1


# name -> (violated(system), checked at terminal nodes only)
PROPERTIES = {
    "agreement": (_agreement, False),
    "validity": (_validity, False),
    "at-most-one-winner": (_at_most_one_winner, False),
    "name-uniqueness": (_name_uniqueness, False),
    "exactly-one-winner": (_winner_exists, True),
}


@dataclass
class Violation:
    prop: str
    path: list

    def trace(self, builder):
        """Engine-format records of the witness run."""
        return trace_records(replay(builder, self.path, record=True).trace)


@dataclass
class ExplorationReport:
    nodes: int = 0
    states: int = 0
    depth: int = 0
    complete: bool = True
    truncated: int = 0
    violations: list = field(default_factory=list)
    violation_counts: Counter = field(default_factory=Counter)
    terminal_values: Counter = field(default_factory=Counter)
    termination: dict = field(default_factory=dict)   # depth -> Fraction

    @property
    def ok(self) -> bool:
        return not self.violations


def moves(sys_):
    """``(move, child)`` for every adversary choice and every tape bit."""
    for pid in list(sys_.live):
        if sys_.procs[pid].pending[0] == FLIP:
            for bit in (0, 1):
                child = sys_.clone()
                child.step(pid, bit)
                yield (pid, bit), child
        else:
            child = sys_.clone()
            child.step(pid)
            yield (pid, None), child


def replay(builder: Callable, path, record=True):
    sys_ = builder(record) if _takes_record(builder) else builder()
    for pid, bit in path:
        sys_.step(pid, bit)
    return sys_


def _takes_record(builder):
    try:
        import inspect
        return len(inspect.signature(builder).parameters) >= 1
    except (TypeError, ValueError):
        return False


def _fresh(builder):
    return builder(False) if _takes_record(builder) else builder()


def exhaustive_explore(builder: Callable, depth: int, properties=("agreement", "validity"),
                       n=None, max_states=2_000_000, termination_depths=()) -> ExplorationReport:
    """Enumerate every run of ``builder()`` up to ``depth`` steps.

    ``builder`` returns a fresh system (optionally taking a ``record`` flag).
    Nodes reached again with no more remaining depth than before are pruned.
    ``termination_depths`` asks for the exact worst-case probability that all
    processes have finished within each given number of steps.
    """
    props = []
    for name in properties:
        if name not in PROPERTIES:
            raise ValueError(f"unknown property {name!r}")
        props.append((name,) + PROPERTIES[name])
    root = _fresh(builder)
    if n is not None and root.n != n:
        raise ValueError(f"builder made {root.n} processes, expected {n}")
    if root.n > 3:
        raise ValueError("exhaustive exploration is limited to n <= 3")
    report = ExplorationReport(depth=depth)
    seen = {}
    found = set()
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20 * depth + 1000))

    def visit(node, remaining, path):
        report.nodes += 1
        key = node.key()
        if seen.get(key, -1) >= remaining:
            return
        if key not in seen:
            if len(seen) >= max_states:
                report.complete = False
                return
            report.states += 1
        seen[key] = remaining
        terminal = not node.live
        for name, violated, at_end in props:
            if (terminal or not at_end) and violated(node):
                report.violation_counts[name] += 1
                if name not in found:
                    found.add(name)
                    report.violations.append(Violation(name, list(path)))
        if terminal:
            report.terminal_values[tuple(p.value for p in node.procs)] += 1
            return
        if remaining == 0:
            report.truncated += 1
            return
        for move, child in moves(node):
            path.append(move)
            visit(child, remaining - 1, path)
            path.pop()

    try:
        visit(root, depth, [])
        for d in termination_depths:
            report.termination[d] = worst_case_probability(
                builder, d, goal=lambda s: not s.live)[0]
    finally:
        sys.setrecursionlimit(limit)
    return report


def worst_case_probability(builder: Callable, depth: int, goal: Callable, fail=None,
                           max_states=2_000_000):
    """``min`` over schedules of ``P(goal is reached within depth steps, before fail)``.

    Returns ``(probability, complete)``; ``complete`` is False when some
    branch ran out of depth undecided (it then counts as not reaching the goal).
    """
    memo = {}
    complete = [True]
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20 * depth + 1000))

    def value(node, d):
        if goal(node):
            return Fraction(1)
        if (fail is not None and fail(node)) or not node.live:
            return Fraction(0)
        if d == 0:
            complete[0] = False
            return Fraction(0)
        key = (node.key(), d)
        if key in memo:
            return memo[key]
        if len(memo) >= max_states:
            raise MemoryError("state budget exceeded")
        best = None
        per_pid = {}
        for (pid, bit), child in moves(node):
            per_pid.setdefault(pid, []).append(value(child, d - 1))
        for vals in per_pid.values():
            v = vals[0] if len(vals) == 1 else (vals[0] + vals[1]) / 2
            if best is None or v < best:
                best = v
        memo[key] = best
        return best

    try:
        return value(_fresh(builder), depth), complete[0]
    finally:
        sys.setrecursionlimit(limit)


# -- exact coin walk --------------------------------------------------------------------


def coin_walk_exact(barrier: int, moves_cap: int) -> dict:
    """Exact outcome of a lone fair +-1 walk from 0 absorbed at ``+-barrier``.

    Returns ``{1: P(hit +barrier), 0: P(hit -barrier), None: P(neither within
    moves_cap moves)}`` as fractions, by iterating the transition matrix.
    """
    if barrier < 1 or moves_cap < 0:
        raise ValueError("need barrier >= 1 and a non-negative move cap")
    half = Fraction(1, 2)
    dist = {0: Fraction(1)}
    up = down = Fraction(0)
    for _ in range(moves_cap):
        nxt = {}
        for pos, pr in dist.items():
            for step in (1, -1):
                q = pos + step
                if q >= barrier:
                    up += pr * half
                elif q <= -barrier:
                    down += pr * half
                else:
                    nxt[q] = nxt.get(q, 0) + pr * half
        dist = nxt
    return {1: up, 0: down, None: sum(dist.values(), Fraction(0))}


def walker_move_cap(n: int, cap: int) -> int:
    """Walk moves a lone caller completes before its step cap forces the fallback flip.

    A lone caller on a bank of ``n*n`` slots spends ``log2(n*n)`` flips picking
    a slot (``n`` a power of two, so no rejections), ``2*n*n`` reads per
    double collect and one flip plus one write per move. Position ``m`` is
    checked after ``bits + 2S + m(2S + 2)`` steps and the fallback fires at
    step ``cap``.
    """
    slots = n * n
    if slots & (slots - 1):
        raise ValueError("slot choice cost is only deterministic for n a power of two")
    bits = (slots - 1).bit_length()
    budget = cap - 1 - bits - 2 * slots
    return max(-1, budget // (2 * slots + 2))


def coin_single_walker_exact(n: int, K: int, B: int) -> dict:
    """Exact output distribution of one caller alone on a coin of ``n`` (fallback included)."""
    m = walker_move_cap(n, B * n ** 5)
    if m < 0:
        return {1: Fraction(1, 2), 0: Fraction(1, 2), "fallback": Fraction(1)}
    d = coin_walk_exact(K * n, m)
    return {1: d[1] + d[None] / 2, 0: d[0] + d[None] / 2, "fallback": d[None]}


__all__ = ["PROPERTIES", "Violation", "ExplorationReport", "exhaustive_explore",
           "worst_case_probability", "replay", "moves", "coin_walk_exact", "walker_move_cap",
           "coin_single_walker_exact"]
