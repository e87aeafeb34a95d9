"""Deterministic step-driven execution of anonymous automata over shared memory.

A process automaton is an object with ``step(result) -> op``; it is called
once with ``None`` to obtain its first pending operation and thereafter with
the result of each executed operation. Operations are plain tuples whose first
element is one of the opcode constants below. Automata never learn their
process index.

Invoked objects come in two flavours. *Atomic* objects (``atomic = True``)
execute an ``INVOKE`` in a single step via ``invoke(args, system)``.
Step-machine objects return a frame from ``begin(args, system)``; the frame is
pushed on the invoking process's stack and its memory operations are executed
one per scheduled step of that process, so the adversary controls the
interleaving inside the object. A frame finishes by emitting ``(RETURN, v)``,
which is handed to the caller without costing a step.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import random
from typing import Callable, Iterable, Optional, Sequence

READ, WRITE, FLIP, INVOKE, OUTPUT, HALT, RETURN = range(7)
OP_NAMES = ("read", "write", "flip", "invoke", "output", "halt", "return")

FLIP_OP = (FLIP,)
HALT_OP = (HALT,)

LIVE, DONE, CRASHED, STEP_LIMIT, STARVED = "live", "done", "crashed", "step-limit", "starved"


def derive_seed(*parts) -> int:
    """Split a seed into an independent child seed (blake2b of the joined parts)."""
    text = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "big")


class Tape:
    """A private source of unbiased bits."""

    def __init__(self, seed=None, bits: Optional[Sequence[int]] = None):
        self._rng = random.Random(seed) if bits is None else None
        self._bits = list(bits) if bits is not None else None
        self._pos = 0
        self.consumed = 0

    def bit(self) -> int:
        self.consumed += 1
        if self._bits is None:
            return self._rng.getrandbits(1)
        if self._pos >= len(self._bits):
            raise RuntimeError("rigged tape exhausted")
        b = self._bits[self._pos]
        self._pos += 1
        return b

    def copy(self) -> "Tape":
        dup = Tape.__new__(Tape)
        dup._rng = None
        if self._rng is not None:
            dup._rng = random.Random()
            dup._rng.setstate(self._rng.getstate())
        dup._bits = self._bits
        dup._pos = self._pos
        dup.consumed = self.consumed
        return dup


class Proc:
    __slots__ = ("pid", "automaton", "frames", "pending", "status", "value", "steps", "tape", "end_step")

    def __init__(self, pid, automaton, tape):
        self.pid = pid
        self.automaton = automaton
        self.frames = []
        self.pending = None
        self.status = LIVE
        self.value = None
        self.steps = 0
        self.tape = tape
        self.end_step = None

    def innermost(self, attr):
        """Innermost automaton or frame carrying ``attr`` (protocol introspection)."""
        for f in reversed(self.frames):
            if hasattr(f, attr):
                return f
        return self.automaton if hasattr(self.automaton, attr) else None

    def key(self):
        return (
            self.status,
            self.value,
            self.automaton.key(),
            tuple(f.key() for f in self.frames),
            self.pending,
        )


class CrashPlan:
    """Static crash steps per process plus an optional adaptive crash rule.

    ``static`` maps a process index to the global step number at which it
    halts forever (0 = before taking any step). ``adaptive(system, live)``
    returns process indices to crash right now. At most ``n - 1`` crashes are
    ever applied.
    """

    def __init__(self, static: Optional[dict] = None, adaptive: Optional[Callable] = None):
        self.static = dict(static or {})
        self.adaptive = adaptive

    def __len__(self):
        return len(self.static)


class AdversaryError(RuntimeError):
    """The scheduling policy chose a process that cannot move."""


class System:
    def __init__(self, procs, memory, objects, adversary, crashes, record=True):
        self.procs = procs
        self.n = len(procs)
        self.memory = memory
        self.objects = objects
        self.adversary = adversary
        self.crashes = crashes
        self.steps = 0
        self.trace = [] if record else None
        self.record = record
        self.live = [p.pid for p in procs]
        self.crash_count = 0
        self._due = sorted((at, pid) for pid, at in crashes.static.items())
        self._next_crash = 0
        self.starved = False
        self.last_op = None
        self.info = {}

    # -- execution --------------------------------------------------------

    def _advance(self, proc, result):
        frames = proc.frames
        op = frames[-1].step(result) if frames else proc.automaton.step(result)
        return self._resume(proc, op)

    def _resume(self, proc, op):
        frames = proc.frames
        while True:
            kind = op[0]
            if kind == RETURN:
                if not frames:
                    raise RuntimeError("top-level automaton emitted RETURN")
                frames.pop()
                result = op[1]
            elif kind == INVOKE and not self.objects[op[1]].atomic:
                frames.append(self.objects[op[1]].begin(op[2], self))
                result = None
            else:
                return op
            op = frames[-1].step(result) if frames else proc.automaton.step(result)

    def _finish(self, proc, status, value=None):
        proc.status = status
        proc.value = value
        proc.end_step = self.steps
        self.live.remove(proc.pid)

    def crash(self, pid) -> bool:
        proc = self.procs[pid]
        if proc.status != LIVE or self.crash_count >= self.n - 1:
            return False
        self.crash_count += 1
        self._finish(proc, CRASHED)
        return True

    def _apply_crashes(self):
        plan = self.crashes
        due = self._due
        while self._next_crash < len(due) and due[self._next_crash][0] <= self.steps:
            self.crash(due[self._next_crash][1])
            self._next_crash += 1
        if plan.adaptive is not None and self.live:
            for pid in plan.adaptive(self, list(self.live)) or ():
                self.crash(pid)

    @property
    def done(self) -> bool:
        return not self.live

    def enabled(self):
        """Live processes after applying crashes due at the current step."""
        self._apply_crashes()
        return self.live

    def step(self, pid=None, bit=None):
        """Execute one atomic step; return ``(pid, op, result)`` or ``None`` when done.

        ``pid``/``bit`` override the adversary and the tape (used by the
        exhaustive checker). Returns ``None`` also when a weak schedule
        starves every remaining process.
        """
        if self._next_crash < len(self._due) or self.crashes.adaptive is not None:
            self._apply_crashes()
        live = self.live
        if not live:
            return None
        if pid is None:
            pid = self.adversary.choose(self, live)
            if pid is None:
                self.starved = True
                return None
        proc = self.procs[pid]
        if proc.status != LIVE:
            raise AdversaryError(f"adversary chose process {pid} which is {proc.status}")
        op = proc.pending
        kind = op[0]
        result = None
        if kind == READ:
            mem = self.memory
            reg = mem.regions[op[1]]
            if reg.multi_writer:
                i = op[2]
                if i < 0 or (reg.size is not None and i >= reg.size):
                    raise IndexError(f"local index {i} out of range for region {op[1]!r}")
                result = reg.cells.get(i, mem.init_value)
            else:
                result = mem.load(pid, op[1], op[2])
        elif kind == WRITE:
            self.memory.store(pid, op[1], op[2], op[3])
        elif kind == FLIP:
            result = proc.tape.bit() if bit is None else bit
        elif kind == INVOKE:
            result = self.objects[op[1]].invoke(op[2], self)
        self.steps += 1
        proc.steps += 1
        self.last_op = op
        if self.record:
            self.trace.append((self.steps, pid, op, result))
        if kind == OUTPUT:
            self._finish(proc, DONE, op[1])
        elif kind == HALT:
            self._finish(proc, DONE)
        else:
            frames = proc.frames
            nxt = frames[-1].step(result) if frames else proc.automaton.step(result)
            if nxt[0] == RETURN or nxt[0] == INVOKE:
                nxt = self._resume(proc, nxt)
            proc.pending = nxt
        return pid, op, result

    def run(self, max_steps: int):
        """Run until every process has finished or ``max_steps`` steps executed."""
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.crashes.adaptive is not None:
            step = self.step
            while self.steps < max_steps:
                if step() is None:
                    break
        else:
            self._run_fast(max_steps)
        return self.outcomes(), self.trace

    def _run_fast(self, max_steps):
        """``step()`` in a loop, inlined; static crash plans only."""
        procs, live, objects = self.procs, self.live, self.objects
        mem = self.memory
        regions, init, load = mem.regions, mem.init_value, mem.load
        adv = self.adversary
        choose = adv.choose
        # plain strong round-robin is inlined (same choices as StrongPolicy.choose)
        inline_rr = (isinstance(adv, StrongPolicy) and type(adv).choose is StrongPolicy.choose
                     and adv.trivial(self))
        bisect_right = bisect.bisect_right
        trace = self.trace if self.record else None
        due = self._due
        steps = self.steps
        try:
            while steps < max_steps:
                if self._next_crash < len(due):
                    self.steps = steps
                    self._apply_crashes()
                if not live:
                    break
                if inline_rr:
                    i = bisect_right(live, adv.last)
                    pid = adv.last = live[i] if i < len(live) else live[0]
                else:
                    pid = choose(self, live)
                    if pid is None:
                        self.starved = True
                        break
                proc = procs[pid]
                if proc.status != LIVE:
                    raise AdversaryError(f"adversary chose process {pid} which is {proc.status}")
                op = proc.pending
                kind = op[0]
                result = None
                if kind == READ:
                    reg = regions[op[1]]
                    i = op[2]
                    if reg.multi_writer:
                        if i < 0 or (reg.size is not None and i >= reg.size):
                            raise IndexError(f"local index {i} out of range for region {op[1]!r}")
                        result = reg.cells.get(i, init)
                    elif reg.perms is None or i < 0 or reg.size is not None:
                        result = load(pid, op[1], i)
                    else:
                        perm = reg.perms[pid]
                        col = i % len(perm)
                        result = reg.cells.get(i - col + perm[col], init)
                elif kind == WRITE:
                    mem.store(pid, op[1], op[2], op[3])
                elif kind == FLIP:
                    result = proc.tape.bit()
                elif kind == INVOKE:
                    result = objects[op[1]].invoke(op[2], self)
                steps += 1
                self.steps = steps
                proc.steps += 1
                self.last_op = op
                if trace is not None:
                    trace.append((steps, pid, op, result))
                if kind == OUTPUT:
                    self._finish(proc, DONE, op[1])
                elif kind == HALT:
                    self._finish(proc, DONE)
                else:
                    frames = proc.frames
                    nxt = frames[-1].step(result) if frames else proc.automaton.step(result)
                    if nxt[0] == RETURN or nxt[0] == INVOKE:
                        nxt = self._resume(proc, nxt)
                    proc.pending = nxt
        finally:
            self.steps = steps

    def outcomes(self) -> list:
        out = []
        for p in self.procs:
            if p.status == DONE:
                out.append(p.value)
            elif p.status == CRASHED:
                out.append(CRASHED)
            else:
                out.append(STARVED if self.starved else STEP_LIMIT)
        return out

    # -- snapshots for the exhaustive checker --------------------------

    def key(self):
        return (
            self.memory.key(),
            tuple(p.key() for p in self.procs),
            tuple(sorted((k, o.key()) for k, o in self.objects.items())),
        )

    def clone(self) -> "System":
        dup = System.__new__(System)
        dup.__dict__.update(self.__dict__)
        dup.memory = self.memory.copy()
        dup.objects = {k: o.copy() for k, o in self.objects.items()}
        dup.procs = []
        for p in self.procs:
            q = Proc(p.pid, p.automaton.copy(), p.tape.copy())
            q.frames = [f.copy() for f in p.frames]
            q.pending, q.status, q.value, q.steps, q.end_step = p.pending, p.status, p.value, p.steps, p.end_step
            dup.procs.append(q)
        dup.live = list(self.live)
        dup.trace = list(self.trace) if self.trace is not None else None
        dup.info = dict(self.info)
        if hasattr(self.adversary, "copy"):
            dup.adversary = self.adversary.copy()
        return dup


def build_system(automata, mem, objects=None, adversary=None, crashes=None, rng_seed=0,
                 tapes=None, record=True) -> System:
    """Assemble a replayable system.

    Each process gets a private tape seeded from ``rng_seed`` and its index,
    unless ``tapes`` supplies them explicitly.
    """
    automata = list(automata)
    if not automata:
        raise ValueError("at least one automaton is required")
    n = len(automata)
    objects = dict(objects or {})
    crashes = crashes if crashes is not None else CrashPlan()
    if isinstance(crashes, dict):
        crashes = CrashPlan(crashes)
    if len(crashes.static) > n - 1:
        raise ValueError(f"{len(crashes.static)} crashes for {n} processes; at most n-1 allowed")
    if any(not 0 <= pid < n for pid in crashes.static):
        raise ValueError("crash plan names an unknown process")
    for a in automata:
        for obj_id in getattr(a, "uses", ()):
            if obj_id not in objects:
                raise KeyError(f"unknown object id {obj_id!r}")
    if adversary is None:
        adversary = weak_schedule_from_seed(rng_seed, n, "round-robin")
    if tapes is None:
        tapes = [Tape(derive_seed(rng_seed, "tape", i)) for i in range(n)]
    procs = [Proc(i, a, t) for i, (a, t) in enumerate(zip(automata, tapes))]
    sys_ = System(procs, mem, objects, adversary, crashes, record)
    for p in procs:
        p.pending = sys_._advance(p, None)
    return sys_


def run_to_completion(sys_: System, max_steps: int):
    return sys_.run(max_steps)


# -- adversaries ------------------------------------------------------------


class WeakPolicy:
    """Oblivious adversary: a schedule drawn entirely before execution.

    Entries naming a finished process are skipped. ``solo`` schedules never
    name anyone else, so once the soloist is done the rest starve.
    """

    strong = False

    def __init__(self, kind, n, seed=0, solo=None):
        self.kind = kind
        self.n = n
        self.seed = seed
        self.solo = solo
        self.index = 0
        self._rng = random.Random(derive_seed(seed, "schedule"))

    def _entry(self):
        i = self.index
        self.index += 1
        if self.kind == "seeded-random":
            return self._rng.randrange(self.n)
        if self.kind == "solo":
            return self.solo
        return i % self.n

    def prefix(self, length) -> list:
        """The first ``length`` schedule entries (does not disturb this policy)."""
        dup = self.copy()
        return [dup._entry() for _ in range(length)]

    def choose(self, sys_, live):
        if self.kind == "solo" and self.solo not in live:
            return None
        while True:
            pid = self._entry()
            if sys_.procs[pid].status == LIVE:
                return pid

    def copy(self):
        dup = WeakPolicy(self.kind, self.n, self.seed, self.solo)
        dup.index = self.index
        dup._rng.setstate(self._rng.getstate())
        return dup


def weak_schedule_from_seed(seed, n, kind) -> WeakPolicy:
    """``kind``: ``round-robin``, ``alternating`` (n = 2), ``seeded-random`` or ``solo(p)``."""
    if kind.startswith("solo"):
        try:
            p = int(kind[kind.index("(") + 1:kind.index(")")])
        except ValueError:
            raise ValueError(f"bad solo schedule {kind!r}") from None
        if not 0 <= p < n:
            raise ValueError("solo process out of range")
        return WeakPolicy("solo", n, seed, solo=p)
    if kind == "alternating":
        if n != 2:
            raise ValueError("the alternating schedule needs exactly two processes")
        return WeakPolicy("round-robin", n, seed)
    if kind in ("round-robin", "seeded-random"):
        return WeakPolicy(kind, n, seed)
    raise ValueError(f"unknown weak schedule kind {kind!r}")


class StrongPolicy:
    """Adaptive adversary; subclasses refine ``candidates`` and fall back to round-robin."""

    strong = True
    name = "round-robin"

    def __init__(self, seed=0):
        self.seed = seed
        self.last = -1
        self._cache = {}
        self._seen = -1
        self._trivial = None

    def candidates(self, sys_, live):
        return live

    def region_fact(self, sys_, region, compute):
        """``compute(sys_, region)``, cached until the region is next written."""
        cache = self._cache
        if region not in cache:
            cache[region] = compute(sys_, region)
        return cache[region]

    def _sync(self, sys_):
        if sys_.steps != self._seen + 1:
            self._cache.clear()
        else:
            op = sys_.last_op
            if op is not None and op[0] == WRITE:
                self._cache.pop(op[1], None)
        self._seen = sys_.steps

    def trivial(self, sys_) -> bool:
        """True when ``candidates`` can only ever return ``live`` for this system."""
        return type(self).candidates is StrongPolicy.candidates

    def choose(self, sys_, live):
        if self._trivial is None:
            self._trivial = self.trivial(sys_)
        if self._trivial:
            cands = live
        else:
            self._sync(sys_)
            cands = self.candidates(sys_, live) or live
        # round-robin among the (sorted) candidates, starting after the last choice
        i = bisect.bisect_right(cands, self.last)
        best = cands[i] if i < len(cands) else cands[0]
        self.last = best
        return best

    def copy(self):
        dup = type(self).__new__(type(self))
        dup.__dict__.update(self.__dict__)
        dup._cache = dict(self._cache)
        if hasattr(self, "rng"):
            dup.rng = random.Random()
            dup.rng.setstate(self.rng.getstate())
        return dup


class SeededRandom(StrongPolicy):
    name = "seeded-random"

    def __init__(self, seed=0):
        super().__init__(seed)
        self.rng = random.Random(derive_seed(seed, "strong-random"))

    def choose(self, sys_, live):
        return live[self.rng.randrange(len(live))]


class TeamBalancer(StrongPolicy):
    """Keep the two flag rows level: schedule members of the trailing team first."""

    name = "team-balancer"

    def trivial(self, sys_):
        return sys_.info.get("mark_heights") is None

    def candidates(self, sys_, live):
        heights = sys_.info.get("mark_heights")
        if heights is None:
            return live
        h = self.region_fact(sys_, sys_.info["board"].region, lambda s, r: heights(s))
        if h[0] == h[1]:
            return live
        trailing = 0 if h[0] < h[1] else 1
        procs = sys_.procs
        return [pid for pid in live if getattr(procs[pid].automaton, "team", None) == trailing] or live


class CoinStaller(StrongPolicy):
    """Delay pending coin writes that would move the walk toward the leading barrier."""

    name = "coin-staller"

    def trivial(self, sys_):
        return sys_.info.get("coin_position") is None

    def candidates(self, sys_, live):
        position = sys_.info.get("coin_position")
        if position is None:
            return live
        procs = sys_.procs
        keep = []
        for pid in live:
            proc = procs[pid]
            if proc.pending[0] == WRITE and proc.frames:
                f = proc.frames[-1]
                delta = f.walk_delta() if hasattr(f, "walk_delta") else 0
                if delta:
                    pos = self.region_fact(sys_, f.inst.region, position)
                    if pos != 0 and (pos > 0) == (delta > 0):
                        continue
            keep.append(pid)
        return keep


class MajorityKeeper(StrongPolicy):
    """Steer consensus toward the majority bit.

    Pending invocations of an undecided atomic consensus instance are held
    back while other processes can still move; then an invoker holding the
    majority bit among that instance's invokers goes first. Inside the
    flag-race consensus the members of the larger team are preferred.

    Held invokers are tracked incrementally (only the process that just moved
    can change), so a choice costs O(log n) outside of releases.
    """

    name = "majority-keeper"

    def __init__(self, seed=0):
        super().__init__(seed)
        self._held = {}     # pid -> (object id, instance, bit)
        self._by_inst = {}  # (object id, instance) -> set of held pids
        self._free = []     # sorted pids not held (finished ones removed lazily)
        self._synced = None

    @staticmethod
    def _entry(sys_, pid):
        proc = sys_.procs[pid]
        op = proc.pending
        if proc.status != LIVE or op is None or op[0] != INVOKE:
            return None
        obj = sys_.objects[op[1]]
        if not getattr(obj, "ideal_consensus", False):
            return None
        inst = tuple(op[2][:-1])
        if obj.decided(inst) is not None:
            return None
        return op[1], inst, op[2][-1]

    def _hold(self, pid, e):
        self._held[pid] = e
        self._by_inst.setdefault(e[:2], set()).add(pid)

    def _unhold(self, pid):
        e = self._held.pop(pid)
        group = self._by_inst[e[:2]]
        group.discard(pid)
        if not group:
            del self._by_inst[e[:2]]

    def _rebuild(self, sys_, live):
        self._held, self._by_inst, self._free = {}, {}, []
        for pid in live:
            e = self._entry(sys_, pid)
            if e is None:
                self._free.append(pid)
            else:
                self._hold(pid, e)

    def _refresh(self, sys_, live):
        if self._synced is None or sys_.steps != self._synced + 1 or self.last < 0:
            self._rebuild(sys_, live)
            return
        q = self.last
        if q in self._held:
            self._unhold(q)
        else:
            i = bisect.bisect_left(self._free, q)
            if i < len(self._free) and self._free[i] == q:
                del self._free[i]
        e = self._entry(sys_, q)
        if e is not None:
            self._hold(q, e)
        elif sys_.procs[q].status == LIVE:
            bisect.insort(self._free, q)
        op = sys_.last_op
        if op is not None and op[0] == INVOKE:
            released = self._by_inst.pop((op[1], tuple(op[2][:-1])), ())
            for pid in released:
                del self._held[pid]
                bisect.insort(self._free, pid)

    def choose(self, sys_, live):
        self._refresh(sys_, live)
        self._synced = sys_.steps
        procs = sys_.procs
        free = self._free
        while free:
            i = bisect.bisect_right(free, self.last)
            if i == len(free):
                i = 0
            pid = free[i]
            if procs[pid].status != LIVE:
                del free[i]
                continue
            if not self._held and sys_.info.get("mark_heights") is not None:
                pid = self._team_choice(sys_, live)
            self.last = pid
            return pid
        groups = {}
        for pid, (obj, inst, bit) in self._held.items():
            if procs[pid].status == LIVE:
                groups.setdefault((obj, inst), []).append((pid, bit))
        if not groups:
            return None
        key = min(groups)
        bits = [b for _, b in groups[key]]
        major = 1 if 2 * sum(bits) > len(bits) else 0
        cands = sorted(pid for pid, b in groups[key] if b == major)
        i = bisect.bisect_right(cands, self.last)
        pid = cands[i] if i < len(cands) else cands[0]
        self.last = pid
        return pid

    def _team_choice(self, sys_, live):
        teams = {0: [], 1: []}
        for pid in live:
            f = sys_.procs[pid].innermost("team")
            if f is not None:
                teams[f.team].append(pid)
        major = 1 if len(teams[1]) > len(teams[0]) else 0
        cands = teams[major] or live
        i = bisect.bisect_right(cands, self.last)
        return cands[i] if i < len(cands) else cands[0]

    def copy(self):
        dup = super().copy()
        dup._held = dict(self._held)
        dup._by_inst = {k: set(v) for k, v in self._by_inst.items()}
        dup._free = list(self._free)
        return dup


STRATEGIES = {
    "round-robin": StrongPolicy,
    "seeded-random": SeededRandom,
    "team-balancer": TeamBalancer,
    "coin-staller": CoinStaller,
    "majority-keeper": MajorityKeeper,
}


def strong_policy(name, seed=0) -> StrongPolicy:
    try:
        return STRATEGIES[name](seed)
    except KeyError:
        raise ValueError(f"unknown adversary strategy {name!r}") from None


def make_adversary(name, n, seed=0):
    """Resolve a CLI-style adversary name: ``weak:<kind>`` or a strong strategy name."""
    if name.startswith("weak:"):
        return weak_schedule_from_seed(seed, n, name[5:])
    return strong_policy(name, seed)


# -- trace serialization ------------------------------------------------------


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    return x


def trace_records(trace: Iterable) -> list:
    out = []
    for step, pid, op, result in trace:
        kind = op[0]
        if kind in (READ,):
            arg = [op[1], op[2]]
        elif kind == WRITE:
            arg = [op[1], op[2], op[3]]
        elif kind == INVOKE:
            arg = [op[1], op[2]]
        elif kind == OUTPUT:
            arg = op[1]
        else:
            arg = None
        out.append({"step": step, "pid": pid, "op": OP_NAMES[kind], "arg": _jsonable(arg), "result": result})
    return out


def dump_trace(trace, fh) -> None:
    """Line-delimited JSON, fields in the fixed order step, pid, op, arg, result."""
    for rec in trace_records(trace):
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_trace(fh) -> list:
    return [json.loads(line) for line in fh if line.strip()]
