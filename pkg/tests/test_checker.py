from fractions import Fraction

import pytest

from anonsim.checker import (coin_single_walker_exact, exhaustive_explore, replay,
                             walker_move_cap, worst_case_probability)
from anonsim.coin import coin_system
from anonsim.consensus import consensus_system
from anonsim.naming import select_winner_system


def _sw(record=False):
    return select_winner_system(2, record=record)


def claimed(sys_):
    return any(getattr(p.automaton, "claimed", None) is not None for p in sys_.procs)


def past_attempt(r):
    return lambda sys_: any(f.attempt > r for p in sys_.procs for f in p.frames
                            if hasattr(f, "attempt"))


@pytest.mark.parametrize("r", [1, 2, 3])
def test_select_winner_resolution_probability_is_exact(r):
    prob, complete = worst_case_probability(_sw, 40 * r, claimed, fail=past_attempt(r))
    assert complete
    assert prob == 1 - Fraction(1, 2 ** r)


def test_local_coin_consensus_is_safe_and_terminates_with_probability_growth():
    def build(record=False):
        return consensus_system(2, [0, 1], coin_backend="local", record=record)

    rep = exhaustive_explore(build, 60, properties=("agreement", "validity"),
                             termination_depths=(20, 30, 40))
    assert rep.ok
    assert rep.states > 100
    assert rep.termination[20] == 0
    assert rep.termination[30] == Fraction(1, 2)
    assert rep.termination[40] == Fraction(3, 4)
    assert set(rep.terminal_values) <= {(0, 0), (1, 1)}


def test_walk_coin_consensus_small_depth_is_safe():
    def build(record=False):
        return consensus_system(2, [0, 1], K=1, record=record)

    rep = exhaustive_explore(build, 30)
    assert rep.ok
    assert rep.truncated > 0


def test_state_budget_marks_the_report_incomplete():
    rep = exhaustive_explore(_sw, 60, properties=("at-most-one-winner",), max_states=50)
    assert not rep.complete


def test_exploration_limits_and_property_names():
    with pytest.raises(ValueError):
        exhaustive_explore(lambda: select_winner_system(4), 5)
    with pytest.raises(ValueError):
        exhaustive_explore(_sw, 5, properties=("liveness",))
    with pytest.raises(ValueError):
        exhaustive_explore(_sw, 5, n=3)


def test_replay_rebuilds_a_run():
    sys_ = replay(_sw, [(0, 1), (1, 0), (0, None), (1, None)])
    assert sys_.steps == 4
    assert sys_.objects["cons"].values == {(1, 1): 1}


def test_walker_cap_against_step_formula():
    # 4 slots: 2 flips, 8 reads, then 10 steps per move, output after the last check
    assert walker_move_cap(2, 2 + 8 + 3 * 10 + 1) == 3
    assert walker_move_cap(2, 2 + 8 + 3 * 10) == 2
    with pytest.raises(ValueError):
        walker_move_cap(3, 1000)
    d = coin_single_walker_exact(2, 1, 10)
    assert d[1] == d[0] and sum(d[v] for v in (0, 1)) == 1


def test_lone_coin_caller_exploration_matches_outputs():
    rep = exhaustive_explore(lambda record=False: coin_system(1, K=1, callers=1, record=record), 40,
                             properties=())
    assert rep.complete
    assert set(rep.terminal_values) == {(0,), (1,)}
    assert all(v for v in rep.terminal_values.values())
