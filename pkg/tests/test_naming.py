import math

import pytest
from hypothesis import given, settings, strategies as st

from anonsim.checker import exhaustive_explore
from anonsim.engine import CRASHED, DONE, CrashPlan, Tape
from anonsim.naming import (FAILED, LOSER, PLAIN, RENAME, SIMPLE, SQUEEZE, WINNER, check_naming,
                            id_bits, naming_system, run_naming, segment_plan, select_winner_system,
                            winners)


def test_segment_plan_at_256():
    plan = segment_plan(256)
    assert plan.p == pytest.approx(1 / 32)
    assert plan.threshold == pytest.approx(64)
    assert plan.next_size == 8
    assert plan.ell == 0
    assert plan.tail == (1, 256)


def test_segment_plan_with_real_segments():
    plan = segment_plan(2 ** 16, c=1)
    assert plan.ell > 0
    assert plan.sizes[0] == math.floor(plan.p * plan.n)
    assert all(s >= plan.threshold for s in plan.sizes)
    assert plan.next_size < plan.threshold or sum(plan.sizes) + plan.next_size > plan.n


@given(st.integers(2, 5000), st.sampled_from([1, 1.5, 2, 4]))
def test_segment_plan_partitions_keys(n, c):
    plan = segment_plan(n, c)
    assert plan.keys() == list(range(1, n + 1))
    for (lo, hi), s in zip(plan.intervals, plan.sizes):
        assert hi - lo + 1 == s
    assert list(plan.sizes) == sorted(plan.sizes, reverse=True)


def test_segment_plan_rejects_bad_parameters():
    with pytest.raises(ValueError):
        segment_plan(1)
    with pytest.raises(ValueError):
        segment_plan(16, c=0.5)


def test_id_bits():
    assert id_bits("0110") == (0, 1, 1, 0)
    assert id_bits(5) == (1, 0, 1)
    with pytest.raises(ValueError):
        id_bits("01x")
    with pytest.raises(ValueError):
        id_bits(-1)


def test_single_caller_wins_first_attempt():
    sys_ = select_winner_system(1, key=3)
    outcomes, _ = sys_.run(1000)
    assert outcomes == [WINNER]
    assert list(sys_.objects["cons"].values) == [(3, 1)]


def test_rigged_bits_first_proposal_wins_under_round_robin():
    sys_ = select_winner_system(2, tapes=[Tape(bits=[0] * 8), Tape(bits=[1] * 8)])
    outcomes, _ = sys_.run(10_000)
    assert outcomes == [WINNER, LOSER]
    assert sys_.objects["cons"].values[(1, 1)] == 0


def test_majority_keeper_fixes_the_majority_bit():
    sys_ = select_winner_system(3, adversary="majority-keeper",
                                tapes=[Tape(bits=[0] * 64), Tape(bits=[0] + [1] * 63),
                                       Tape(bits=[1] * 64)])
    outcomes, _ = sys_.run(10_000)
    assert sys_.objects["cons"].values[(1, 1)] == 0
    assert outcomes[2] == LOSER
    assert sorted(outcomes) == [LOSER, LOSER, WINNER]


@pytest.mark.parametrize("adversary", ["round-robin", "seeded-random", "majority-keeper",
                                       "weak:seeded-random"])
def test_simple_naming_is_a_bijection(adversary):
    for seed in range(5):
        outcomes, st_ = run_naming(6, SIMPLE, adversary=adversary, seed=seed)
        assert sorted(outcomes) == list(range(1, 7))
        assert st_["violations"] == []


def test_single_process_takes_key_one():
    outcomes, _ = run_naming(1, SQUEEZE)
    assert outcomes == [1]


def test_names_survive_a_winner_crashing_after_its_claim():
    # crash whoever claims a key first, right after the claim
    crashes = CrashPlan(adaptive=lambda sys_, live: [p.pid for p in sys_.procs
                                               if p.automaton.claimed is not None
                                               and p.status not in (DONE, CRASHED)][:1])
    sys_ = naming_system(4, SIMPLE, crashes=crashes, seed=2)
    outcomes, _ = sys_.run(100_000)
    assert check_naming(sys_) == []
    crashed = [p for p in sys_.procs if p.status == CRASHED]
    assert crashed and all(p.automaton.claimed is not None for p in crashed)
    keys = [o for o in outcomes if o != CRASHED]
    claimed = [p.automaton.claimed for p in crashed]
    assert sorted(keys + claimed) == list(range(1, 5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["round-robin", "seeded-random", "team-balancer",
                                                 "majority-keeper", "weak:round-robin"]),
       st.integers(2, 9))
def test_squeeze_names_every_process(seed, adversary, n):
    outcomes, st_ = run_naming(n, SQUEEZE, adversary=adversary, seed=seed)
    assert st_["violations"] == []
    assert sorted(outcomes) == sorted(set(outcomes))
    assert all(1 <= k <= n for k in outcomes)
    assert all(c == 1 for c in winners(st_["system"]).values())


def test_rename_two_ids_resolve_quickly():
    outcomes, st_ = run_naming(2, RENAME, ids=["01", "10"], adversary="majority-keeper")
    assert sorted(outcomes) == [1, 2]
    assert st_["flips"] == 0
    sys_ = select_winner_system(2, ids=["01", "10"], adversary="majority-keeper")
    res, _ = sys_.run(10_000)
    assert sorted(res) == [LOSER, WINNER]
    assert max(a for (_, a) in sys_.objects["cons"].values) <= 2


def test_rename_identical_ids_fail():
    sys_ = select_winner_system(2, ids=["01", "01"])
    sys_.run(10_000)
    assert any(p.automaton.failed for p in sys_.procs)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6))
def test_rename_with_distinct_ids_never_flips(seed, n):
    ids = [format(i, "04b") for i in range(n)]
    outcomes, st_ = run_naming(n, RENAME, ids=ids, adversary="seeded-random", seed=seed)
    assert st_["flips"] == 0
    assert sorted(outcomes) == list(range(1, n + 1))


def test_plain_variant_admits_two_winners_and_guarded_does_not():
    def builder(variant):
        return lambda record=False: select_winner_system(2, variant=variant, record=record)

    plain = exhaustive_explore(builder(PLAIN), 40, properties=("at-most-one-winner",))
    assert not plain.ok
    witness = plain.violations[0]
    assert witness.prop == "at-most-one-winner"
    records = witness.trace(builder(PLAIN))
    assert records
    guarded = exhaustive_explore(builder("guarded"), 40,
                                 properties=("at-most-one-winner", "exactly-one-winner"))
    assert guarded.ok


def test_failed_constant_is_distinct():
    assert len({LOSER, WINNER, FAILED}) == 3
