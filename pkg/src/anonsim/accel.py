"""Compiled replay of naming runs with ideal consensus objects.

``run_naming_fast`` executes exactly the run that :func:`naming.run_naming`
would execute for the same arguments: the same hidden permutations, the same
Mersenne-Twister streams for private tapes and adversaries (their states are
exported from the ``random.Random`` objects the engine would use), the same
adversary decisions and the same crash plan. Only the interpretation is
compiled. Differential tests compare both step for step on outcomes and
per-process counters; configurations the kernel does not cover (renaming,
flag-race consensus, solo or adaptive schedules, recording) raise
``Unsupported``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .engine import (CRASHED, DONE, STEP_LIMIT, MajorityKeeper, SeededRandom, StrongPolicy,
                     WeakPolicy)
from .naming import GUARDED, RENAME, SIMPLE, check_naming, naming_system


class Unsupported(ValueError):
    """The requested run is outside what the compiled kernel replays."""


# adversary codes
ADV_RR, ADV_RANDOM, ADV_MAJORITY, ADV_WEAK_RR, ADV_WEAK_RANDOM = range(5)

# pending op codes
_RW, _RX, _WW, _WX, _FLIP, _CONS, _OUT, _HALT = range(8)
_INVOKE_SW = 8

# select_winner program counters (same order as naming)
_BIT, _GOTBIT, _PCONS, _SCAN1, _WROTE, _SCAN2, _EXITED, _XW, _XX = range(9)
# namer
_SEG, _TAIL, _BACKUP = range(3)
_NEXT, _DRAW, _INV = range(3)

_LIVE, _DONE, _CRASHED = 0, 1, 2

M32 = 0xFFFFFFFF


@njit(cache=True)
def _mt_next(mt, pos, r):
    i = pos[r]
    if i >= 624:
        for kk in range(624):
            y = (mt[r, kk] & 0x80000000) | (mt[r, (kk + 1) % 624] & 0x7FFFFFFF)
            v = mt[r, (kk + 397) % 624] ^ (y >> 1)
            if y & 1:
                v ^= 0x9908B0DF
            mt[r, kk] = v
        i = 0
    y = mt[r, i]
    pos[r] = i + 1
    y ^= y >> 11
    y ^= (y << 7) & 0x9D2C5680
    y ^= (y << 15) & 0xEFC60000
    y ^= y >> 18
    return y & 0xFFFFFFFF


@njit(cache=True)
def _getrandbits(mt, pos, r, k):
    return _mt_next(mt, pos, r) >> (32 - k)


@njit(cache=True)
def _randbelow(mt, pos, r, m):
    k = 0
    while (m >> k) > 0:
        k += 1
    v = _getrandbits(mt, pos, r, k)
    while v >= m:
        v = _getrandbits(mt, pos, r, k)
    return v


@njit(cache=True)
def _bitlen(x):
    k = 0
    while (x >> k) > 0:
        k += 1
    return k


@njit(cache=True)
def _next_key(p, n, ell, lo_arr, hi_arr, stage, k, cursor, npc, target, draw, drawn, nbits,
              dlo, dsize, backup, failed):
    """Namer: choose the next key to try; returns _INVOKE_SW, _FLIP or _HALT."""
    while True:
        if stage[p] == _SEG:
            if k[p] < ell:
                lo = lo_arr[k[p]]
                size = hi_arr[k[p]] - lo + 1
                if size == 1:
                    target[p] = lo
                    npc[p] = _INV
                    return _INVOKE_SW
                dlo[p] = lo
                dsize[p] = size
                nbits[p] = _bitlen(size - 1)
                draw[p] = 0
                drawn[p] = 0
                npc[p] = _DRAW
                return _FLIP
            stage[p] = _TAIL
            cursor[p] = lo_arr[ell]
        if stage[p] == _TAIL:
            if cursor[p] <= hi_arr[ell]:
                target[p] = cursor[p]
                npc[p] = _INV
                return _INVOKE_SW
            stage[p] = _BACKUP
            backup[p] = 1
            cursor[p] = 1
        if cursor[p] <= n:
            target[p] = cursor[p]
            npc[p] = _INV
            return _INVOKE_SW
        failed[p] = 1
        return _HALT


@njit(cache=True)
def _kernel(n, guarded, ell, lo_arr, hi_arr, simple, perms, tmt, tpos, amt, apos, adv,
            due_at, due_pid, max_steps, max_attempts):
    # per-process namer state
    stage = np.full(n, _SEG if not simple else _BACKUP, np.int64)
    k = np.zeros(n, np.int64)
    cursor = np.ones(n, np.int64)
    npc = np.full(n, _NEXT, np.int64)
    target = np.zeros(n, np.int64)
    draw = np.zeros(n, np.int64)
    drawn = np.zeros(n, np.int64)
    nbits = np.zeros(n, np.int64)
    dlo = np.zeros(n, np.int64)
    dsize = np.zeros(n, np.int64)
    inv = np.zeros(n, np.int64)
    claimed = np.zeros(n, np.int64)
    phase = np.zeros(n, np.int64)
    backup = np.zeros(n, np.int64)
    failed = np.zeros(n, np.int64)
    # frame state
    attempt = np.zeros(n, np.int64)
    fpc = np.zeros(n, np.int64)
    fb = np.zeros(n, np.int64)
    fj = np.zeros(n, np.int64)
    ones = np.zeros(n, np.int64)
    flips = np.zeros(n, np.int64)
    active = np.zeros(n, np.int64)
    # engine state
    pend = np.zeros(n, np.int64)
    parg = np.zeros(n, np.int64)
    status = np.zeros(n, np.int64)
    value = np.full(n, -1, np.int64)
    steps = np.zeros(n, np.int64)
    W = np.zeros((n + 1, max_attempts, n), np.int8)
    X = np.zeros((n + 1, max_attempts, n), np.int8)
    cons = np.full((n + 1, max_attempts + 1), -1, np.int8)
    live = np.arange(n)
    nlive = n
    crash_count = 0
    next_crash = 0
    total = 0
    overflow = False
    # majority-keeper state
    held = np.zeros(n, np.int64)
    free = np.zeros(n, np.int64)
    nfree = 0
    synced = -1
    last = -1
    widx = 0
    last_kind = -1
    last_key = 0
    last_att = 0

    for p in range(n):
        op = _next_key(p, n, ell, lo_arr, hi_arr, stage, k, cursor, npc, target, draw, drawn,
                       nbits, dlo, dsize, backup, failed)
        if op == _INVOKE_SW:
            active[p] = 1
            attempt[p] = 1
            fpc[p] = _GOTBIT
            op = _FLIP
        pend[p] = op

    while total < max_steps:
        # crashes due at this step
        while next_crash < due_at.shape[0] and due_at[next_crash] <= total:
            c = due_pid[next_crash]
            next_crash += 1
            if status[c] == _LIVE and crash_count < n - 1:
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
        if adv == ADV_RR:
            i = np.searchsorted(live[:nlive], last, side="right")
            pid = live[i] if i < nlive else live[0]
            last = pid
        elif adv == ADV_RANDOM:
            pid = live[_randbelow(amt, apos, 0, nlive)]
        elif adv == ADV_WEAK_RR:
            while True:
                cand = widx % n
                widx += 1
                if status[cand] == _LIVE:
                    pid = cand
                    break
        elif adv == ADV_WEAK_RANDOM:
            while True:
                cand = _randbelow(amt, apos, 0, n)
                if status[cand] == _LIVE:
                    pid = cand
                    break
        else:
            # majority keeper
            if synced < 0 or total != synced + 1 or last < 0:
                nfree = 0
                held[:] = 0
                for t in range(nlive):
                    q = live[t]
                    if pend[q] == _CONS and cons[target[q], attempt[q]] < 0:
                        held[q] = 1
                    else:
                        held[q] = 0
                        free[nfree] = q
                        nfree += 1
            else:
                q = last
                if held[q] == 1:
                    held[q] = 0
                else:
                    for t in range(nfree):
                        if free[t] == q:
                            for u in range(t, nfree - 1):
                                free[u] = free[u + 1]
                            nfree -= 1
                            break
                if status[q] == _LIVE and pend[q] == _CONS and cons[target[q], attempt[q]] < 0:
                    held[q] = 1
                elif status[q] == _LIVE:
                    i = np.searchsorted(free[:nfree], q)
                    for u in range(nfree, i, -1):
                        free[u] = free[u - 1]
                    free[i] = q
                    nfree += 1
                if last_kind == _CONS:
                    for r in range(n):
                        if held[r] == 1 and pend[r] == _CONS and target[r] == last_key \
                                and attempt[r] == last_att:
                            held[r] = 0
                            i = np.searchsorted(free[:nfree], r)
                            for u in range(nfree, i, -1):
                                free[u] = free[u - 1]
                            free[i] = r
                            nfree += 1
            synced = total
            while nfree > 0:
                i = np.searchsorted(free[:nfree], last, side="right")
                if i == nfree:
                    i = 0
                cand = free[i]
                if status[cand] != _LIVE:
                    for u in range(i, nfree - 1):
                        free[u] = free[u + 1]
                    nfree -= 1
                    continue
                pid = cand
                break
            if pid < 0:
                bk = -1
                ba = -1
                for r in range(n):
                    if held[r] == 1 and status[r] == _LIVE:
                        if bk < 0 or target[r] < bk or (target[r] == bk and attempt[r] < ba):
                            bk = target[r]
                            ba = attempt[r]
                if bk < 0:
                    break
                cnt = 0
                s1 = 0
                for r in range(n):
                    if held[r] == 1 and status[r] == _LIVE and target[r] == bk and attempt[r] == ba:
                        cnt += 1
                        s1 += fb[r]
                major = 1 if 2 * s1 > cnt else 0
                first = -1
                for r in range(n):
                    if held[r] == 1 and status[r] == _LIVE and target[r] == bk \
                            and attempt[r] == ba and fb[r] == major:
                        if first < 0:
                            first = r
                        if r > last and pid < 0:
                            pid = r
                if pid < 0:
                    pid = first
            last = pid

        # ---- execute the pending op of pid
        op = pend[pid]
        result = 0
        a = attempt[pid]
        key = target[pid]
        if op == _RW:
            result = W[key, a - 1, perms[pid, parg[pid]]]
        elif op == _RX:
            result = X[key, a - 1, perms[pid, parg[pid]]]
        elif op == _WW:
            W[key, a - 1, perms[pid, 0]] = 1
        elif op == _WX:
            X[key, a - 1, perms[pid, 0]] = 1
        elif op == _FLIP:
            result = _getrandbits(tmt, tpos, pid, 1)
            flips[pid] += 1
        elif op == _CONS:
            if cons[key, a] < 0:
                cons[key, a] = fb[pid]
            result = cons[key, a]
        total += 1
        steps[pid] += 1
        last_kind = op
        last_key = key
        last_att = a
        if op == _OUT or op == _HALT:
            status[pid] = _DONE
            value[pid] = target[pid] if op == _OUT else -1
            for t in range(nlive):
                if live[t] == pid:
                    for u in range(t, nlive - 1):
                        live[u] = live[u + 1]
                    nlive -= 1
                    break
            continue

        # ---- advance pid with result
        p = pid
        r = result
        in_frame = active[p] == 1
        while True:
            if in_frame:
                pc = fpc[p]
                nop = -1
                ret = -1
                if pc == _SCAN2:
                    go_collide = False
                    if r:
                        ones[p] += 1
                        if ones[p] > 1:
                            go_collide = True
                    if not go_collide:
                        fj[p] += 1
                        if fj[p] < n:
                            nop = _RW
                            parg[p] = fj[p]
                        elif ones[p] == 1:
                            ret = 1
                        else:
                            go_collide = True
                    if go_collide:
                        if guarded:
                            fpc[p] = _EXITED
                            nop = _WX
                        else:
                            nop = _CONS + 100  # marker: next attempt
                elif pc == _SCAN1:
                    if r:
                        ret = 0
                    else:
                        fj[p] += 1
                        if fj[p] < n:
                            nop = _RW
                            parg[p] = fj[p]
                        else:
                            fpc[p] = _WROTE
                            nop = _WW
                elif pc == _XW:
                    if r:
                        fpc[p] = _XX
                        nop = _RX
                        parg[p] = fj[p]
                    else:
                        nop = _XX + 200  # marker: exit scan next
                elif pc == _XX:
                    if not r:
                        ret = 0
                    else:
                        nop = _XX + 200
                elif pc == _GOTBIT:
                    fb[p] = r
                    fpc[p] = _PCONS
                    nop = _CONS
                elif pc == _PCONS:
                    if r != fb[p]:
                        ret = 0
                    else:
                        fpc[p] = _SCAN1
                        fj[p] = 0
                        nop = _RW
                        parg[p] = 0
                elif pc == _WROTE:
                    fpc[p] = _SCAN2
                    fj[p] = 0
                    ones[p] = 0
                    nop = _RW
                    parg[p] = 0
                elif pc == _EXITED:
                    fj[p] = 0
                    fpc[p] = _XW
                    nop = _RW
                    parg[p] = 0
                if nop == _XX + 200:
                    fj[p] += 1
                    if fj[p] < n:
                        fpc[p] = _XW
                        nop = _RW
                        parg[p] = fj[p]
                    else:
                        nop = _CONS + 100
                if nop == _CONS + 100:
                    attempt[p] += 1
                    if attempt[p] >= max_attempts:
                        overflow = True
                    fpc[p] = _GOTBIT
                    nop = _FLIP
                if ret < 0:
                    pend[p] = nop
                    break
                # RETURN: pop frame, feed the namer
                active[p] = 0
                in_frame = False
                r = ret
                continue
            # namer step
            op2 = -1
            if npc[p] == _INV:
                inv[p] += 1
                if r == 1:
                    claimed[p] = target[p]
                    if stage[p] == _SEG:
                        phase[p] = k[p] + 1
                    elif stage[p] == _TAIL:
                        phase[p] = -1
                    else:
                        phase[p] = -3 if simple else -2
                    op2 = _OUT
                elif stage[p] == _SEG:
                    k[p] += 1
                else:
                    cursor[p] += 1
            elif npc[p] == _DRAW:
                draw[p] = 2 * draw[p] + r
                drawn[p] += 1
                if drawn[p] < nbits[p]:
                    op2 = _FLIP
                else:
                    v = draw[p]
                    draw[p] = 0
                    drawn[p] = 0
                    if v < dsize[p]:
                        target[p] = dlo[p] + v
                        npc[p] = _INV
                        op2 = _INVOKE_SW
                    else:
                        op2 = _FLIP
            if op2 < 0:
                op2 = _next_key(p, n, ell, lo_arr, hi_arr, stage, k, cursor, npc, target, draw,
                                drawn, nbits, dlo, dsize, backup, failed)
            if op2 == _INVOKE_SW:
                active[p] = 1
                attempt[p] = 1
                fpc[p] = _GOTBIT
                op2 = _FLIP
            pend[p] = op2
            break
        if overflow:
            break

    return (status, value, steps, inv, claimed, phase, backup, failed, flips, total, overflow)


_PHASES = {-1: "tail", -2: "backup", -3: SIMPLE, 0: None}


def _rng_state(rng):
    state = rng.getstate()[1]
    return np.array(state[:624], dtype=np.uint64), state[624]


def _adversary_code(adv, sys_):
    if isinstance(adv, MajorityKeeper):
        return ADV_MAJORITY, adv.last < 0
    if isinstance(adv, SeededRandom):
        return ADV_RANDOM, True
    if isinstance(adv, WeakPolicy):
        if adv.kind == "round-robin":
            return ADV_WEAK_RR, adv.index == 0
        if adv.kind == "seeded-random":
            return ADV_WEAK_RANDOM, True
        raise Unsupported(f"weak schedule {adv.kind!r} is not compiled")
    if isinstance(adv, StrongPolicy) and type(adv).choose is StrongPolicy.choose:
        if adv.trivial(sys_):
            return ADV_RR, adv.last < 0
    raise Unsupported(f"adversary {type(adv).__name__} is not compiled")


def run_naming_fast(n, mode="squeeze", c=4, adversary="round-robin", crashes=None, seed=0,
                    consensus="ideal", ids=None, max_steps=None, variant=GUARDED,
                    max_attempts=256, **kw):
    """Compiled equivalent of :func:`naming.run_naming`; same ``(outcomes, stats)`` shape.

    ``stats["system"]`` is the unexecuted system the run was derived from.
    """
    if mode == RENAME or consensus != "ideal":
        raise Unsupported("only random naming with ideal consensus is compiled")
    if kw.get("record"):
        raise Unsupported("recording is not compiled")
    sys_ = naming_system(n, mode, c, adversary=adversary, crashes=crashes, seed=seed,
                         consensus=consensus, variant=variant, **kw)
    if sys_.crashes.adaptive is not None:
        raise Unsupported("adaptive crash plans are not compiled")
    code, fresh = _adversary_code(sys_.adversary, sys_)
    if not fresh:
        raise Unsupported("adversary has already been used")
    if max_steps is None:
        max_steps = 64 * n ** 4 + 10_000
    plan = sys_.info["plan"]
    simple = plan is None or mode == SIMPLE
    if simple:
        ell, lo_arr, hi_arr = 0, np.array([1]), np.array([n])
    else:
        ell = plan.ell
        lo_arr = np.array([lo for lo, _ in plan.intervals], dtype=np.int64)
        hi_arr = np.array([hi for _, hi in plan.intervals], dtype=np.int64)
    perms = np.array([sys_.memory.view(p, 1) for p in range(n)], dtype=np.int64).reshape(n, n)
    tmt = np.zeros((n, 624), dtype=np.uint64)
    tpos = np.zeros(n, dtype=np.int64)
    for p in range(n):
        tmt[p], tpos[p] = _rng_state(sys_.procs[p].tape._rng)
    amt = np.zeros((1, 624), dtype=np.uint64)
    apos = np.zeros(1, dtype=np.int64)
    adv = sys_.adversary
    rng = getattr(adv, "rng", None) or (adv._rng if isinstance(adv, WeakPolicy) else None)
    if rng is not None:
        amt[0], apos[0] = _rng_state(rng)
    due = sys_._due
    due_at = np.array([at for at, _ in due], dtype=np.int64)
    due_pid = np.array([pid for _, pid in due], dtype=np.int64)
    out = _kernel(n, variant == GUARDED, ell, lo_arr, hi_arr, simple, perms, tmt, tpos, amt,
                  apos, code, due_at, due_pid, max_steps, max_attempts)
    status, value, steps, inv, claimed, phase, backup, failed, flips, total, overflow = out
    if overflow:
        raise Unsupported(f"a key needed more than {max_attempts} attempts")
    outcomes, keys = [], []
    for p in range(n):
        if status[p] == 1:
            v = int(value[p]) if value[p] >= 0 else None
            outcomes.append(v)
            keys.append(v)
        elif status[p] == 2:
            outcomes.append(CRASHED)
            keys.append(None)
        else:
            outcomes.append(STEP_LIMIT)
            keys.append(None)
    # mirror the final state onto the system so the shared checks apply
    for p, proc in enumerate(sys_.procs):
        a = proc.automaton
        a.claimed = int(claimed[p]) or None
        a.failed = bool(failed[p])
        a.invocations = int(inv[p])
        a.entered_backup = bool(backup[p])
        a.won_phase = f"segment:{phase[p]}" if phase[p] > 0 else _PHASES[int(phase[p])]
        proc.status = {0: "live", 1: DONE, 2: CRASHED}[int(status[p])]
        proc.value = keys[p]
        proc.steps = int(steps[p])
    sys_.steps = int(total)
    stats = {
        "outcomes": outcomes,
        "keys": keys,
        "invocations": [int(x) for x in inv],
        "phases": [p.automaton.won_phase for p in sys_.procs],
        "entered_backup": bool(backup.any()),
        "flips": int(flips.sum()),
        "steps": [int(x) for x in steps],
        "total_steps": int(total),
        "violations": check_naming(sys_),
        "crashed": [s == 2 for s in status],
        "system": sys_,
    }
    return outcomes, stats


__all__ = ["run_naming_fast", "Unsupported"]
