"""Compiled replay of flag-race consensus runs and stand-alone coin runs.

Same contract as :mod:`accel`: ``run_consensus_fast`` and ``run_coin_fast``
execute exactly the run :func:`consensus.run_consensus` and
:func:`coin.run_coin` would execute for the same arguments, using the
Mersenne-Twister states of the engine's own tapes and adversary. Runs the
kernel does not cover raise ``Unsupported``; so does a run whose flag rows or
coin instances outgrow the preallocated tables.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .accel import Unsupported, _getrandbits, _randbelow, _rng_state
from .coin import CoinFamily, coin_system
from .consensus import check_consensus, consensus_system
from .engine import (CRASHED, DONE, STEP_LIMIT, CoinStaller, MajorityKeeper, SeededRandom,
                     StrongPolicy, TeamBalancer, WeakPolicy)

ADV_RR, ADV_RANDOM, ADV_WEAK_RR, ADV_WEAK_RANDOM, ADV_TEAM, ADV_STALL, ADV_MAJ_TEAM = range(7)

# pending ops
_RM, _WM, _RC, _WC, _FLIP, _OUT = range(6)
# coin frame phases (same order as coin.CoinWalk)
_CHOOSE, _SCAN, _CFLIP, _CWRITE, _FALLBACK = range(5)
# propose program counters (same order as consensus.Propose)
_START, _RAISED, _AHEAD, _TIE, _COIN, _TRAIL, _RECHECK = range(7)
_LIVE, _DONE, _CRASHED = 0, 1, 2


@njit(cache=True)
def _net_of(w):
    z = w & 0xFFFFFFFF
    if z & 1:
        return -((z + 1) >> 1)
    return z >> 1


@njit(cache=True)
def _pack(net, count):
    z = 2 * net if net >= 0 else -2 * net - 1
    return (count << 32) | z


# per-process fields of the state matrix
(F_TEAM, F_POS, F_TENT, F_PPC, F_ITERS, F_CINV, F_DEC, F_ACTIVE, F_CINST, F_CPHASE, F_SLOT,
 F_DACC, F_DCNT, F_CNET, F_CCOUNT, F_CIDX, F_CTOTAL, F_HASPREV, F_USED, F_CDIR, F_FALLBACKS,
 F_PK, F_PA, NFIELDS) = range(24)
# shared counters
G_NINST, G_OVERFLOW = range(2)


@njit(cache=True)
def _coin_step(p, r, st, scan, prev, S, nbits, barrier, cap):
    """One step of a coin frame; returns the returned bit or -1 after setting the pending op."""
    phase = st[F_CPHASE, p]
    if phase == _CHOOSE:
        if r >= 0:
            st[F_DACC, p] = 2 * st[F_DACC, p] + r
            st[F_DCNT, p] += 1
            if st[F_DCNT, p] == nbits:
                v = st[F_DACC, p]
                st[F_DACC, p] = 0
                st[F_DCNT, p] = 0
                if v < S:
                    st[F_SLOT, p] = v
                    phase = _SCAN
    elif phase == _SCAN:
        if r >= 0:
            i = st[F_CIDX, p]
            scan[p, i] = r
            st[F_CTOTAL, p] += _net_of(r)
            st[F_CIDX, p] = i + 1
            if i + 1 == S:
                if st[F_HASPREV, p] == 1:
                    same = True
                    for t in range(S):
                        if prev[p, t] != scan[p, t]:
                            same = False
                            break
                    st[F_HASPREV, p] = 0
                    if same:
                        pos = st[F_CTOTAL, p]
                        if pos >= barrier:
                            return 1
                        if pos <= -barrier:
                            return 0
                        phase = _CFLIP
                else:
                    for t in range(S):
                        prev[p, t] = scan[p, t]
                    st[F_HASPREV, p] = 1
                st[F_CIDX, p] = 0
                st[F_CTOTAL, p] = 0
    elif phase == _CFLIP:
        d = 1 if r else -1
        st[F_CDIR, p] = d
        st[F_CNET, p] += d
        st[F_CCOUNT, p] += 1
        phase = _CWRITE
    elif phase == _CWRITE:
        phase = _SCAN
    else:
        return r
    st[F_USED, p] += 1
    if st[F_USED, p] >= cap:
        st[F_FALLBACKS, p] += 1
        st[F_CPHASE, p] = _FALLBACK
        st[F_PK, p] = _FLIP
        return -1
    st[F_CPHASE, p] = phase
    if phase == _SCAN:
        st[F_PK, p] = _RC
        st[F_PA, p] = st[F_CIDX, p]
    elif phase == _CWRITE:
        st[F_PK, p] = _WC
        st[F_PA, p] = st[F_SLOT, p]
    else:
        st[F_PK, p] = _FLIP
    return -1


@njit(cache=True)
def _propose_step(p, r, st):
    """One step of the propose loop; returns the coin position to invoke or -1."""
    pc = st[F_PPC, p]
    team = st[F_TEAM, p]
    pos = st[F_POS, p]
    if pc == _START or pc == _RECHECK:
        if pc == _RECHECK:
            if not r:
                team = st[F_TEAM, p] = st[F_TENT, p]
            pos = st[F_POS, p] = pos + 1
        st[F_ITERS, p] += 1
        st[F_PPC, p] = _RAISED
        st[F_PK, p] = _WM
        st[F_PA, p] = 2 * pos + team
    elif pc == _RAISED:
        st[F_PPC, p] = _AHEAD
        st[F_PK, p] = _RM
        st[F_PA, p] = 2 * (pos + 1) + 1 - team
    elif pc == _AHEAD:
        if r:
            st[F_TENT, p] = 1 - team
            st[F_PPC, p] = _RECHECK
            st[F_PK, p] = _RM
            st[F_PA, p] = 2 * (pos + 1) + team
        else:
            st[F_PPC, p] = _TIE
            st[F_PK, p] = _RM
            st[F_PA, p] = 2 * pos + 1 - team
    elif pc == _TIE:
        if r:
            st[F_CINV, p] += 1
            st[F_PPC, p] = _COIN
            return pos
        st[F_PPC, p] = _TRAIL
        st[F_PK, p] = _RM
        st[F_PA, p] = 2 * (pos - 1) + 1 - team
    elif pc == _COIN:
        st[F_TENT, p] = r
        st[F_PPC, p] = _RECHECK
        st[F_PK, p] = _RM
        st[F_PA, p] = 2 * (pos + 1) + team
    else:  # _TRAIL
        if r:
            st[F_TENT, p] = team
            st[F_PPC, p] = _RECHECK
            st[F_PK, p] = _RM
            st[F_PA, p] = 2 * (pos + 1) + team
        else:
            st[F_DEC, p] = pos
            st[F_PK, p] = _OUT
            st[F_PA, p] = team
    return -1


@njit(cache=True)
def _advance(p, r, coin_mode, st, scan, prev, S, nbits, barrier, cap, inst_of, g, pcap, icap):
    """Feed result ``r`` (-1 for none) to process ``p`` until it has a pending op."""
    while True:
        if st[F_ACTIVE, p] == 1:
            ret = _coin_step(p, r, st, scan, prev, S, nbits, barrier, cap)
            if ret < 0:
                return
            st[F_ACTIVE, p] = 0
            r = ret
            continue
        if coin_mode:
            if st[F_PPC, p] == 1:
                st[F_PK, p] = _OUT
                st[F_PA, p] = r
                return
            st[F_PPC, p] = 1
            b = 0
            i = 1
        else:
            i = _propose_step(p, r, st)
            if st[F_POS, p] + 2 >= pcap:
                g[G_OVERFLOW] = 1
                return
            if i < 0:
                return
            b = st[F_TEAM, p]
        c = inst_of[b, i]
        if c < 0:
            if g[G_NINST] >= icap:
                g[G_OVERFLOW] = 1
                return
            c = g[G_NINST]
            g[G_NINST] += 1
            inst_of[b, i] = c
        st[F_ACTIVE, p] = 1
        st[F_CINST, p] = c
        st[F_SLOT, p] = 0 if nbits == 0 else -1
        st[F_CPHASE, p] = _SCAN if nbits == 0 else _CHOOSE
        for f in (F_DACC, F_DCNT, F_CNET, F_CCOUNT, F_CIDX, F_CTOTAL, F_HASPREV, F_USED, F_CDIR):
            st[f, p] = 0
        r = -1


@njit(cache=True)
def _ckernel(np_, coin_mode, inputs, S, barrier, cap, tmt, tpos, amt, apos, adv,
             due_at, due_pid, max_steps, pcap, icap):
    nbits = 0
    while ((S - 1) >> nbits) > 0:
        nbits += 1
    st = np.zeros((NFIELDS, np_), np.int64)
    st[F_TEAM] = inputs
    st[F_POS] = 1
    scan = np.zeros((np_, S), np.int64)
    prev = np.zeros((np_, S), np.int64)
    g = np.zeros(2, np.int64)
    status = np.zeros(np_, np.int64)
    value = np.full(np_, -1, np.int64)
    steps = np.zeros(np_, np.int64)
    mark = np.zeros(2 * pcap, np.int8)
    mark[0] = 1
    mark[1] = 1
    h0 = 0
    h1 = 0
    inst_of = np.full((2, pcap), -1, np.int64)
    bank = np.zeros((icap, S), np.int64)
    pos_sum = np.zeros(icap, np.int64)
    live = np.arange(np_)
    nlive = np_
    crash_count = 0
    next_crash = 0
    total = 0
    widx = 0
    last = -1

    for p in range(np_):
        _advance(p, -1, coin_mode, st, scan, prev, S, nbits, barrier, cap, inst_of, g, pcap, icap)

    while total < max_steps and g[G_OVERFLOW] == 0:
        while next_crash < due_at.shape[0] and due_at[next_crash] <= total:
            c = due_pid[next_crash]
            next_crash += 1
            if status[c] == _LIVE and crash_count < np_ - 1:
                crash_count += 1
                status[c] = _CRASHED
                for t in range(nlive):
                    if live[t] == c:
                        for u in range(t, nlive - 1):
                            live[u] = live[u + 1]
                        nlive -= 1
                        break
        if nlive == 0:
            break

        # ---- adversary choice
        pid = -1
        if adv == ADV_RANDOM:
            pid = live[_randbelow(amt, apos, 0, nlive)]
        elif adv == ADV_WEAK_RR:
            while True:
                cand = widx % np_
                widx += 1
                if status[cand] == _LIVE:
                    pid = cand
                    break
        elif adv == ADV_WEAK_RANDOM:
            while True:
                cand = _randbelow(amt, apos, 0, np_)
                if status[cand] == _LIVE:
                    pid = cand
                    break
        else:
            # round-robin among a candidate subset (or everyone if it is empty)
            want = -1
            if adv == ADV_TEAM and h0 != h1:
                want = 0 if h0 < h1 else 1
            elif adv == ADV_MAJ_TEAM:
                c1 = 0
                for t in range(nlive):
                    c1 += st[F_TEAM, live[t]]
                want = 1 if c1 > nlive - c1 else 0
            first = -1
            after = -1
            for t in range(nlive):
                q = live[t]
                if want >= 0 and st[F_TEAM, q] != want:
                    continue
                if adv == ADV_STALL and st[F_PK, q] == _WC and st[F_ACTIVE, q] == 1:
                    d = st[F_CDIR, q]
                    ps = pos_sum[st[F_CINST, q]]
                    if d != 0 and ps != 0 and (ps > 0) == (d > 0):
                        continue
                if first < 0:
                    first = q
                if q > last:
                    after = q
                    break
            if first < 0:
                first = live[0]
                for t in range(nlive):
                    if live[t] > last:
                        after = live[t]
                        break
            pid = after if after >= 0 else first
            last = pid

        # ---- execute
        op = st[F_PK, pid]
        arg = st[F_PA, pid]
        r = 0
        if op == _RM:
            r = mark[arg]
        elif op == _WM:
            mark[arg] = 1
            if arg % 2 == 0:
                if arg // 2 > h0:
                    h0 = arg // 2
            elif arg // 2 > h1:
                h1 = arg // 2
        elif op == _RC:
            r = bank[st[F_CINST, pid], arg]
        elif op == _WC:
            c = st[F_CINST, pid]
            w = _pack(st[F_CNET, pid], st[F_CCOUNT, pid])
            pos_sum[c] += _net_of(w) - _net_of(bank[c, arg])
            bank[c, arg] = w
        elif op == _FLIP:
            r = _getrandbits(tmt, tpos, pid, 1)
        total += 1
        steps[pid] += 1
        if op == _OUT:
            status[pid] = _DONE
            value[pid] = arg
            for t in range(nlive):
                if live[t] == pid:
                    for u in range(t, nlive - 1):
                        live[u] = live[u + 1]
                    nlive -= 1
                    break
            continue
        _advance(pid, r, coin_mode, st, scan, prev, S, nbits, barrier, cap, inst_of, g, pcap, icap)

    return (status, value, steps, st[F_ITERS].copy(), st[F_CINV].copy(), st[F_DEC].copy(),
            st[F_FALLBACKS].copy(), total, g[G_OVERFLOW] == 1)


def _adversary_code(adv, sys_):
    if isinstance(adv, WeakPolicy):
        if adv.index != 0:
            raise Unsupported("weak schedule has already been used")
        if adv.kind == "round-robin":
            return ADV_WEAK_RR
        if adv.kind == "seeded-random":
            return ADV_WEAK_RANDOM
        raise Unsupported(f"weak schedule {adv.kind!r} is not compiled")
    if not isinstance(adv, StrongPolicy) or adv.last >= 0:
        raise Unsupported("adversary is not a fresh library strategy")
    if isinstance(adv, SeededRandom):
        return ADV_RANDOM
    if isinstance(adv, MajorityKeeper):
        # no ideal consensus objects here: only its team preference can act
        return ADV_MAJ_TEAM if sys_.info.get("mark_heights") is not None else ADV_RR
    if type(adv).choose is not StrongPolicy.choose:
        raise Unsupported(f"adversary {type(adv).__name__} is not compiled")
    if adv.trivial(sys_):
        return ADV_RR
    if type(adv) is TeamBalancer:
        return ADV_TEAM
    if type(adv) is CoinStaller:
        return ADV_STALL
    raise Unsupported(f"adversary {type(adv).__name__} is not compiled")


def _execute(sys_, coin_mode, inputs, family, max_steps, pcap, icap):
    if sys_.crashes.adaptive is not None:
        raise Unsupported("adaptive crash plans are not compiled")
    if sys_.record:
        raise Unsupported("recording is not compiled")
    if not isinstance(family, CoinFamily) or family.fixed_slot is not None:
        raise Unsupported("only the shared-walk coin is compiled")
    code = _adversary_code(sys_.adversary, sys_)
    n = len(sys_.procs)
    tmt = np.zeros((n, 624), dtype=np.uint64)
    tpos = np.zeros(n, dtype=np.int64)
    for p in range(n):
        tape = sys_.procs[p].tape
        if tape._rng is None or tape.consumed:
            raise Unsupported("rigged or used tapes are not compiled")
        tmt[p], tpos[p] = _rng_state(tape._rng)
    amt = np.zeros((1, 624), dtype=np.uint64)
    apos = np.zeros(1, dtype=np.int64)
    adv = sys_.adversary
    rng = getattr(adv, "rng", None) or (adv._rng if isinstance(adv, WeakPolicy) else None)
    if rng is not None:
        amt[0], apos[0] = _rng_state(rng)
    due_at = np.array([at for at, _ in sys_._due], dtype=np.int64)
    due_pid = np.array([pid for _, pid in sys_._due], dtype=np.int64)
    out = _ckernel(n, coin_mode, np.asarray(inputs, dtype=np.int64), family.n * family.n,
                   family.barrier, family.cap, tmt, tpos, amt, apos, code, due_at, due_pid,
                   max_steps, pcap, icap)
    status, value, steps, iters, cinv, dec, fallbacks, total, overflow = out
    if overflow:
        raise Unsupported("run outgrew the preallocated flag rows or coin instances")
    outcomes = []
    for p, proc in enumerate(sys_.procs):
        s = int(status[p])
        proc.status = {0: "live", 1: DONE, 2: CRASHED}[s]
        proc.value = int(value[p]) if s == 1 else None
        proc.steps = int(steps[p])
        outcomes.append(proc.value if s == 1 else CRASHED if s == 2 else STEP_LIMIT)
    sys_.steps = int(total)
    return outcomes, steps, iters, cinv, dec, fallbacks


def run_consensus_fast(n, inputs, adversary="round-robin", crashes=None, delta=0.25, seed=0,
                       max_steps=None, K=None, B=10, pcap=1024, icap=256):
    """Compiled equivalent of :func:`consensus.run_consensus` (walk coin only)."""
    sys_ = consensus_system(n, inputs, adversary, crashes, delta, seed, K, B, record=False)
    if max_steps is None:
        max_steps = 50 * B * n ** 5
    outcomes, steps, iters, cinv, dec, fallbacks, = _execute(
        sys_, False, inputs, sys_.info["family"], max_steps, pcap, icap)
    for p, proc in enumerate(sys_.procs):
        a = proc.automaton
        a.iterations = int(iters[p])
        a.coin_invocations = int(cinv[p])
        a.decided_at = int(dec[p]) if proc.status == DONE else None
    stats = {
        "outcomes": outcomes,
        "iterations": [int(x) for x in iters],
        "coin_invocations": [int(x) for x in cinv],
        "coin_fallbacks": [int(x) for x in fallbacks],
        "steps": [int(x) for x in steps],
        "total_steps": sys_.steps,
        "violations": check_consensus(sys_),
        "crashed": [p.status == CRASHED for p in sys_.procs],
        "system": sys_,
    }
    return outcomes, stats


def run_coin_fast(n, delta=0.25, K=None, B=10, adversary=None, seed=0, max_steps=None,
                  callers=None, crashes=None, icap=1):
    """Compiled equivalent of :func:`coin.run_coin`; returns ``(outcomes, stats)``."""
    sys_ = coin_system(n, delta, K, B, adversary, seed, callers=callers, crashes=crashes)
    family = sys_.info["family"]
    m = len(sys_.procs)
    if max_steps is None:
        max_steps = m * family.cap + 10
    outcomes, steps, _, _, _, fallbacks = _execute(
        sys_, True, [0] * m, family, max_steps, 4, icap)
    stats = {
        "outcomes": outcomes,
        "fallbacks": [int(x) for x in fallbacks],
        "steps": [int(x) for x in steps],
        "total_steps": sys_.steps,
        "system": sys_,
    }
    return outcomes, stats


__all__ = ["run_consensus_fast", "run_coin_fast"]
