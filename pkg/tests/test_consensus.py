import pytest
from hypothesis import given, settings, strategies as st

from anonsim.accel_consensus import run_consensus_fast
from anonsim.cli import ADVERSARIES
from anonsim.consensus import (ConsensusBoard, Propose, check_consensus, check_flag_gap,
                               consensus_board_new, consensus_system, mark_index, run_consensus)
from anonsim.engine import CRASHED
from anonsim.memory import make_symmetric


def test_board_initialization():
    board = consensus_board_new(capacity=4)
    assert board.raised() == [[0], [0]]
    with pytest.raises(ValueError):
        consensus_board_new(capacity=1)


def test_board_growth_preserves_flags():
    board = consensus_board_new(capacity=2)
    mem = board.memory
    for pos in (1, 2, 3, 7):
        mem.store(0, board.region, mark_index(1, pos), 1)
    assert board.capacity == 8
    assert board.raised() == [[0], [0, 1, 2, 3, 7]]
    assert board.flag(1, 7) and not board.flag(0, 7)


def test_boards_are_disjoint():
    mem = make_symmetric(1)
    a, b = ConsensusBoard(mem, 0), ConsensusBoard(mem, 1)
    mem.store(0, a.region, mark_index(0, 1), 1)
    assert a.flag(0, 1) and not b.flag(0, 1)


def test_input_must_be_a_bit():
    with pytest.raises(ValueError):
        Propose(2, ("mark", 0))


def test_solo_process_decides_at_second_iteration():
    outcomes, st_ = run_consensus(1, [1], seed=0)
    assert outcomes == [1]
    assert st_["iterations"] == [2]
    assert st_["coin_invocations"] == [0]
    assert st_["system"].procs[0].automaton.decided_at == 2


@pytest.mark.parametrize("adversary", ADVERSARIES)
@pytest.mark.parametrize("v", [0, 1])
def test_unanimous_inputs_decide_that_input(adversary, v):
    for seed in range(3):
        outcomes, st_ = run_consensus_fast(4, [v] * 4, adversary=adversary, seed=seed)
        assert outcomes == [v] * 4 and not st_["violations"]


def test_survivor_decides_after_crash_at_step_zero():
    outcomes, _ = run_consensus(2, [0, 1], crashes={0: 0}, seed=1)
    assert outcomes[0] == CRASHED and outcomes[1] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(ADVERSARIES), st.integers(2, 3))
def test_reference_runs_are_safe_and_keep_the_flag_gap(seed, adversary, n):
    inputs = [(seed >> i) & 1 for i in range(n)]
    sys_ = consensus_system(n, inputs, adversary, seed=seed, K=1, record=True)
    sys_.run(200_000)
    assert check_consensus(sys_) == []
    assert check_flag_gap(sys_.trace)


def test_mean_coin_invocations_within_geometric_bound():
    delta = 0.25
    inv = []
    for seed in range(200):
        _, st_ = run_consensus_fast(4, [seed & 1, 1, 0, (seed >> 1) & 1], adversary="team-balancer",
                                    seed=seed, delta=delta)
        inv.extend(st_["coin_invocations"])
    assert sum(inv) / len(inv) <= 2 / (delta ** 2 / 4) + 2


def test_flag_gap_checker_flags_a_bad_decision():
    from anonsim.engine import OUTPUT, READ, WRITE
    region = ("mark", 0)
    trace = [(1, 0, (WRITE, region, mark_index(1, 1), 1), None),
             (2, 1, (READ, region, mark_index(1, 1)), 0),
             (3, 1, (OUTPUT, 0), None)]
    assert not check_flag_gap(trace)


def test_team_balancer_schedules_the_trailing_team():
    sys_ = consensus_system(3, [1, 1, 0], "team-balancer", seed=0)
    board = sys_.info["board"]
    sys_.memory.store(0, board.region, mark_index(1, 1), 1)
    assert sys_.adversary.choose(sys_, list(sys_.live)) == 2
    # level rows: plain round-robin order
    fresh = consensus_system(3, [1, 1, 0], "team-balancer", seed=0)
    fresh.memory.store(0, board.region, mark_index(1, 1), 1)
    fresh.memory.store(0, board.region, mark_index(0, 1), 1)
    assert fresh.adversary.choose(fresh, list(fresh.live)) == 0


def test_team_balancer_ten_thousand_trials_are_safe():
    from anonsim.cli import ExperimentConfig, run_experiment
    stats = run_experiment(ExperimentConfig(command="consensus", n=4, trials=10_000,
                                            adversary="team-balancer", seed=7))
    assert stats.violations == 0 and stats.incomplete == 0
