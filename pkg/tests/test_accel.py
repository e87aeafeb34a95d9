"""Compiled kernels must reproduce the reference engine bit for bit."""

import random

import pytest

from anonsim.accel import Unsupported, run_naming_fast
from anonsim.accel_consensus import run_coin_fast, run_consensus_fast
from anonsim.coin import run_coin
from anonsim.consensus import run_consensus
from anonsim.engine import CrashPlan
from anonsim.naming import run_naming

ADVS = ["round-robin", "seeded-random", "team-balancer", "coin-staller", "majority-keeper",
        "weak:round-robin", "weak:seeded-random"]


def _crashes(rng, n, window):
    if n == 1:
        return None
    k = rng.randrange(1, n)
    return {p: rng.randrange(window) for p in rng.sample(range(n), k)}


@pytest.mark.parametrize("adversary", ADVS)
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_consensus_kernel_matches_reference(n, adversary):
    for seed in range(3):
        rng = random.Random(seed * 31 + n)
        inputs = [rng.randrange(2) for _ in range(n)]
        crashes = _crashes(rng, n, 3000) if seed % 2 else None
        kw = dict(adversary=adversary, crashes=crashes, seed=seed, K=1, B=10)
        o1, s1 = run_consensus(n, inputs, **kw)
        o2, s2 = run_consensus_fast(n, inputs, **kw)
        assert o1 == o2
        for field in ("iterations", "coin_invocations", "steps", "total_steps", "violations"):
            assert s1[field] == s2[field], field


@pytest.mark.parametrize("adversary", ADVS)
@pytest.mark.parametrize("K,B", [(1, 10), (3, 10), (1, 1)])
def test_coin_kernel_matches_reference(adversary, K, B):
    for n in (2, 3):
        for seed in range(3):
            crashes = _crashes(random.Random(seed), n, 2000) if seed == 2 else None
            c1, sys_ = run_coin(n, K=K, B=B, adversary=adversary, seed=seed, crashes=crashes)
            c2, st_ = run_coin_fast(n, K=K, B=B, adversary=adversary, seed=seed, crashes=crashes)
            assert c1 == c2
            assert st_["total_steps"] == sys_.steps


@pytest.mark.parametrize("variant", ["guarded", "plain"])
@pytest.mark.parametrize("mode", ["squeeze", "simple"])
@pytest.mark.parametrize("n", [1, 2, 5, 16, 33])
def test_naming_kernel_matches_reference(n, mode, variant):
    for adversary in ADVS:
        for seed in range(2):
            rng = random.Random(seed * 1000 + n)
            crashes = _crashes(rng, n, 8 * n * n) if seed == 1 else None
            kw = dict(n=n, mode=mode, c=1 if n < 8 else 2, adversary=adversary, seed=seed,
                      crashes=crashes, variant=variant)
            o1, s1 = run_naming(**kw)
            o2, s2 = run_naming_fast(**kw)
            for field in ("outcomes", "invocations", "phases", "entered_backup", "flips", "steps",
                          "total_steps", "violations"):
                assert s1[field] == s2[field], (field, adversary, seed)


def test_adaptive_crashes_fall_outside_the_kernel():
    plan = CrashPlan(adaptive=lambda sys_, live: [])
    with pytest.raises(Unsupported):
        run_consensus_fast(2, [0, 1], crashes=plan)
