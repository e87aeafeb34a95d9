import math

import pytest
from hypothesis import given, settings, strategies as st

from anonsim.accel_consensus import run_coin_fast
from anonsim.checker import coin_single_walker_exact, coin_walk_exact
from anonsim.coin import CoinFamily, coin_system, default_k, net_of, pack, run_coin, unpack
from anonsim.engine import READ, WRITE, Tape


def test_family_validation_and_memoization():
    with pytest.raises(ValueError):
        CoinFamily(1.5, 2)
    with pytest.raises(ValueError):
        CoinFamily(0.25, 2, K=0)
    fam = CoinFamily(0.25, 2)
    assert fam.instance(0, 1) is fam.instance(0, 1)
    assert fam.instance(0, 1) is not fam.instance(1, 1)
    assert fam.internal_delta == pytest.approx(2 * math.e * 0.25)
    assert fam.K == default_k(0.25) == 3
    assert fam.barrier == 6 and fam.cap == 10 * 2 ** 5


@given(st.integers(-(2 ** 31) + 1, 2 ** 31 - 1), st.integers(0, 2 ** 31))
def test_pack_roundtrip(net, count):
    assert unpack(pack(net, count)) == (net, count)
    assert net_of(pack(net, count)) == net


@pytest.mark.parametrize("n,K", [(2, 3), (2, 1), (4, 1)])
def test_all_heads_caller_hits_upper_barrier(n, K):
    bits = (n * n - 1).bit_length()
    outcomes, sys_ = run_coin(n, K=K, callers=1, tapes=[Tape(bits=[0] * bits + [1] * 200)])
    assert outcomes == [1]
    # slot choice + first double collect + K*n moves of (flip, write, double collect) + output
    assert sys_.steps == bits + 2 * n * n + K * n * (2 + 2 * n * n) + 1


def test_instances_evolve_independently():
    from anonsim.coin import CoinCaller
    from anonsim.engine import build_system
    from anonsim.memory import make_symmetric

    fam = CoinFamily(0.25, 2, K=1)
    sys_ = build_system([CoinCaller(0, 1), CoinCaller(1, 1)], make_symmetric(1), {"coin": fam},
                        None, None, 3, record=True)
    sys_.run(10_000)
    regions = {op[1] for _, pid, op, _ in sys_.trace if op[0] in (READ, WRITE)}
    assert regions == {("coin", 0, 1), ("coin", 1, 1)}
    by_pid = {}
    for _, pid, op, _ in sys_.trace:
        if op[0] in (READ, WRITE):
            by_pid.setdefault(pid, set()).add(op[1])
    assert by_pid == {0: {("coin", 0, 1)}, 1: {("coin", 1, 1)}}


def test_forced_slot_collision_stays_safe():
    for seed in range(20):
        outcomes, _ = run_coin(2, K=1, fixed_slot=0, seed=seed, adversary="coin-staller")
        assert all(o in (0, 1) for o in outcomes)


def test_step_cap_forces_fallback_within_budget():
    # B=1, n=2: cap is 32 caller steps, far below what a barrier of 6 needs
    for seed in range(10):
        outcomes, sys_ = run_coin(2, K=3, B=1, seed=seed)
        assert all(o in (0, 1) for o in outcomes)
        assert all(p.steps <= 32 + 1 for p in sys_.procs)


def test_single_walker_matches_exact_absorption():
    # K=3 at n=2 leaves the lone walker only 30 moves, so the fallback fires often
    n, K, B, trials = 2, 3, 10, 10_000
    exact = coin_single_walker_exact(n, K, B)
    runs = [run_coin_fast(n, K=K, B=B, callers=1, seed=s) for s in range(trials)]
    ones = sum(out[0] for out, _ in runs) / trials
    fallback = sum(st["fallbacks"][0] for _, st in runs) / trials
    for got, want in ((ones, float(exact[1])), (fallback, float(exact["fallback"]))):
        assert abs(got - want) <= 3 * math.sqrt(want * (1 - want) / trials)


def test_exact_walk_oracle_small_cases():
    d = coin_walk_exact(1, 1)
    assert d == {1: 0.5, 0: 0.5, None: 0}
    d = coin_walk_exact(2, 2)
    assert d[1] == d[0] == pytest.approx(0.25) and d[None] == 0.5
    d = coin_walk_exact(3, 200)
    assert d[1] == d[0] and float(d[None]) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["round-robin", "seeded-random", "coin-staller",
                                                 "weak:seeded-random"]))
def test_double_collect_commits_a_real_memory_state(seed, adversary):
    # with distinct slots, a committed position equals the bank contents right after the first scan
    n = 3
    sys_ = coin_system(n, K=1, adversary=adversary, seed=seed, record=True)
    sys_.run(200_000)
    slots = {}
    for _, pid, op, _ in sys_.trace:
        if op[0] == WRITE:
            slots.setdefault(pid, set()).add(op[2])
    chosen = [s for v in slots.values() for s in v]
    if len(chosen) != len(set(chosen)):
        return
    S = n * n
    bank = [0] * S
    scans = {p: [] for p in range(n)}   # values of the scan in progress
    first = {p: None for p in range(n)}  # (values, bank right after) of the pending first scan
    for _, pid, op, result in sys_.trace:
        if op[0] == WRITE:
            bank[op[2]] = op[3]
            first[pid] = None
            scans[pid] = []
        elif op[0] == READ:
            scans[pid].append(result)
            if len(scans[pid]) == S:
                vals = scans[pid]
                scans[pid] = []
                if first[pid] is None:
                    first[pid] = (vals, list(bank))
                else:
                    prev, snapshot = first[pid]
                    first[pid] = None
                    if prev == vals:
                        assert vals == snapshot
