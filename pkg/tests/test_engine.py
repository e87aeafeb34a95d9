import io

import pytest

from anonsim.engine import (CRASHED, DONE, FLIP_OP, OUTPUT, READ, STEP_LIMIT, WRITE, AdversaryError,
                            CrashPlan, StrongPolicy, Tape, build_system, dump_trace, load_trace,
                            make_adversary, strong_policy, trace_records, weak_schedule_from_seed)
from anonsim.impossibility import RegisterClaim
from anonsim.memory import make_asymmetric, make_symmetric


class OutputZero:
    def step(self, r):
        return (OUTPUT, 0)

    def key(self):
        return ()

    def copy(self):
        return self


class Spin:
    def step(self, r):
        return (READ, 0, 0)

    def key(self):
        return ()

    def copy(self):
        return self


class WriteThenSpin:
    """Writes once, then reads forever."""

    def __init__(self):
        self.wrote = False

    def step(self, r):
        if not self.wrote:
            self.wrote = True
            return (WRITE, 0, 0, 1)
        return (READ, 0, 0)

    def key(self):
        return (self.wrote,)

    def copy(self):
        dup = WriteThenSpin()
        dup.wrote = self.wrote
        return dup


class Listed:
    """A fixed schedule given as a list, skipping finished processes."""

    strong = False

    def __init__(self, order):
        self.order = list(order)
        self.i = 0

    def choose(self, sys_, live):
        while self.i < len(self.order):
            pid = self.order[self.i]
            self.i += 1
            if pid in live:
                return pid
        return None


def claimers(n, seed, adversary=None):
    return build_system([RegisterClaim(4) for _ in range(n)], make_symmetric(4), {},
                        adversary, None, seed)


def test_same_arguments_give_identical_traces():
    a = claimers(3, 42, make_adversary("seeded-random", 3, 1))
    b = claimers(3, 42, make_adversary("seeded-random", 3, 1))
    a.run(500)
    b.run(500)
    assert trace_records(a.trace) == trace_records(b.trace)
    assert a.outcomes() == b.outcomes()


def test_build_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_system([], make_symmetric(1))
    with pytest.raises(ValueError):
        build_system([Spin(), Spin()], make_symmetric(1), crashes={0: 0, 1: 0})

    class Needs:
        uses = ("nope",)

        def step(self, r):
            return (OUTPUT, 0)

    with pytest.raises(KeyError):
        build_system([Needs()], make_symmetric(1))


def test_trivial_automaton_outputs_in_n_steps():
    sys_ = build_system([OutputZero() for _ in range(3)], make_symmetric(1))
    outcomes, trace = sys_.run(100)
    assert outcomes == [0, 0, 0]
    assert sys_.steps == 3


def test_spin_hits_step_limit():
    sys_ = build_system([Spin(), Spin()], make_symmetric(1))
    outcomes, _ = sys_.run(10)
    assert outcomes == [STEP_LIMIT, STEP_LIMIT]
    assert sys_.steps == 10


def test_single_live_process_is_chosen():
    sys_ = build_system([Spin(), Spin()], make_symmetric(1), adversary=strong_policy("seeded-random", 3),
                        crashes={0: 0})
    for _ in range(20):
        pid, _, _ = sys_.step()
        assert pid == 1


def test_weak_schedules():
    assert weak_schedule_from_seed(0, 2, "alternating").prefix(6) == [0, 1, 0, 1, 0, 1]
    assert weak_schedule_from_seed(0, 3, "round-robin").prefix(4) == [0, 1, 2, 0]
    assert weak_schedule_from_seed(0, 2, "solo(1)").prefix(5) == [1] * 5
    with pytest.raises(ValueError):
        weak_schedule_from_seed(0, 3, "alternating")
    with pytest.raises(ValueError):
        weak_schedule_from_seed(0, 2, "zigzag")


def test_seeded_random_schedule_is_reproducible():
    a = weak_schedule_from_seed(5, 4, "seeded-random").prefix(50)
    assert a == weak_schedule_from_seed(5, 4, "seeded-random").prefix(50)
    assert set(a) == {0, 1, 2, 3}


def test_schedule_obedience():
    sys_ = build_system([Spin(), Spin()], make_symmetric(1), adversary=weak_schedule_from_seed(0, 2, "alternating"))
    assert [sys_.step()[0] for _ in range(3)] == [0, 1, 0]


def test_solo_schedule_starves_the_rest():
    sys_ = build_system([OutputZero(), OutputZero()], make_symmetric(1),
                        adversary=weak_schedule_from_seed(0, 2, "solo(1)"))
    outcomes, _ = sys_.run(50)
    assert outcomes[1] == 0
    assert outcomes[0] == "starved"


def test_strong_policy_sees_pending_ops():
    class PreferWriters(StrongPolicy):
        def candidates(self, sys_, live):
            return [p for p in live if sys_.procs[p].pending[0] == WRITE]

    sys_ = build_system([Spin(), WriteThenSpin(), Spin()], make_symmetric(1), adversary=PreferWriters())
    pid, op, _ = sys_.step()
    assert pid == 1 and op[0] == WRITE


def test_adversary_choosing_a_dead_process_is_rejected():
    class Bad:
        def choose(self, sys_, live):
            return 0

    sys_ = build_system([Spin(), Spin()], make_symmetric(1), adversary=Bad(), crashes={0: 0})
    with pytest.raises(AdversaryError):
        sys_.step()


def test_crash_permanence_and_resiliency_cap():
    plan = CrashPlan({0: 3, 2: 5})
    sys_ = build_system([Spin(), Spin(), Spin()], make_symmetric(1), crashes=plan)
    outcomes, trace = sys_.run(40)
    assert outcomes == [CRASHED, STEP_LIMIT, CRASHED]
    assert all(pid != 0 for step, pid, _, _ in trace if step > 3)
    assert all(pid != 2 for step, pid, _, _ in trace if step > 5)

    # an adaptive rule asking for everyone is capped at n-1 crashes
    sys_ = build_system([Spin(), Spin(), Spin()], make_symmetric(1),
                        crashes=CrashPlan(adaptive=lambda s, live: live))
    outcomes, _ = sys_.run(5)
    assert outcomes.count(CRASHED) == 2 and sys_.live


def test_step_numbers_increase_and_only_live_processes_move():
    sys_ = claimers(3, 7, make_adversary("seeded-random", 3, 2))
    _, trace = sys_.run(300)
    steps = [t[0] for t in trace]
    assert steps == list(range(1, len(steps) + 1))
    finished = {}
    for step, pid, op, _ in trace:
        assert pid not in finished
        if op[0] == OUTPUT:
            finished[pid] = step


def test_anonymity_permuted_processes_give_permuted_trace():
    n = 3
    order = [0, 1, 2, 2, 1, 0, 1, 1, 2, 0] * 20
    sigma = [2, 0, 1]  # process i of the first run is process sigma[i] of the second
    tapes = [Tape(100 + i) for i in range(n)]
    a = build_system([RegisterClaim(4) for _ in range(n)], make_symmetric(4), {},
                     Listed(order), None, 0, tapes=[t.copy() for t in tapes])
    inv = [sigma.index(j) for j in range(n)]
    b = build_system([RegisterClaim(4) for _ in range(n)], make_symmetric(4), {},
                     Listed([sigma[p] for p in order]), None, 0,
                     tapes=[tapes[inv[j]].copy() for j in range(n)])
    _, ta = a.run(1000)
    _, tb = b.run(1000)
    assert len(ta) == len(tb) > 0
    for (s1, p1, op1, r1), (s2, p2, op2, r2) in zip(ta, tb):
        assert (s1, sigma[p1], op1, r1) == (s2, p2, op2, r2)


def test_rigged_tape():
    t = Tape(bits=[1, 0])
    assert [t.bit(), t.bit()] == [1, 0]
    with pytest.raises(RuntimeError):
        t.bit()


def test_trace_roundtrip_field_order():
    sys_ = claimers(2, 3)
    _, trace = sys_.run(200)
    buf = io.StringIO()
    dump_trace(trace, buf)
    first = buf.getvalue().splitlines()[0]
    assert first.startswith('{"step":1,"pid":')
    assert list(load_trace(io.StringIO(buf.getvalue()))[0]) == ["step", "pid", "op", "arg", "result"]
    assert load_trace(io.StringIO(buf.getvalue())) == trace_records(trace)


def test_flip_consumes_private_tape():
    class Flipper:
        def __init__(self):
            self.got = None

        def step(self, r):
            if self.got is None and r is None:
                self.got = "asked"
                return FLIP_OP
            return (OUTPUT, r)

        def key(self):
            return ()

    sys_ = build_system([Flipper(), Flipper()], make_symmetric(1), tapes=[Tape(bits=[1]), Tape(bits=[0])])
    outcomes, _ = sys_.run(10)
    assert outcomes == [1, 0]


def test_unknown_strategy():
    with pytest.raises(ValueError):
        strong_policy("sneaky")


def test_reads_resolve_through_hidden_views():
    mem = make_asymmetric(2, 1, perm_seed=4)
    sys_ = build_system([WriteThenSpin(), Spin()], mem, adversary=weak_schedule_from_seed(0, 2, "alternating"))
    sys_.step()
    _, _, r = sys_.step()  # process 1 reads its local cell 0: its own register, still 0
    assert r == 0
    assert mem.load(1, 0, 1) == 1  # process 0's register seen through process 1's view
    assert sys_.procs[0].status != DONE
