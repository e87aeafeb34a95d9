"""Batch experiment runner and report writer.

Every trial ``t`` of an experiment runs with its own seed
``derive_seed(seed, "trial", t)`` (likewise its inputs and crash plan), so
adding trials never changes earlier ones. Reports are json-lines (one record
per trial plus a trailing aggregate record carrying the full config) or csv
(same columns, header row, aggregate row last).

Exit status: 0 clean, 1 property violation or incomplete run, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import random
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .accel import Unsupported, run_naming_fast
from .accel_consensus import run_coin_fast, run_consensus_fast
from .checker import exhaustive_explore
from .coin import run_coin
from .consensus import consensus_system, run_consensus
from .engine import CRASHED, STRATEGIES, derive_seed
from .impossibility import (ASYMMETRIC_SUITE, SYMMETRIC_SUITE, lockstep_asymmetric,
                            mirror_symmetric)
from .naming import GUARDED, PLAIN, RENAME, SIMPLE, SQUEEZE, naming_system, run_naming, \
    select_winner_system

COMMANDS = ("consensus", "naming", "coin", "check", "impossibility")
COLUMNS = ("trial", "outcome", "iterations", "invocations", "steps", "violations")
ADVERSARIES = tuple(STRATEGIES) + ("weak:round-robin", "weak:seeded-random")
OUTPUT_DIR_ENV = "ANONSIM_REPORT_DIR"

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    n: int = 2
    trials: int = 1
    seed: int = 0
    adversary: str = "round-robin"
    crashes: str = "none"
    delta: float = 0.25
    c: int = 4
    K: int = None
    B: int = 10
    max_steps: int = None
    format: str = "jsonl"
    output: str = None
    inputs: str = "random"
    mode: str = SQUEEZE
    variant: str = GUARDED
    engine: str = "auto"
    callers: int = None
    depth: int = 200
    target: str = "consensus"
    coin: str = "local"
    max_states: int = 2_000_000

    def validate(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.n < 1:
            raise UsageError("n must be at least 1")
        if self.trials < 1:
            raise UsageError("trials must be at least 1")
        if self.adversary != "all" and self.adversary not in ADVERSARIES:
            if not self.adversary.startswith("weak:solo("):
                raise UsageError(f"unknown adversary {self.adversary!r}")
        if not 0 < self.delta < 1:
            raise UsageError("delta must lie in (0, 1)")
        if self.c < 1 or self.B < 1 or (self.K is not None and self.K < 1):
            raise UsageError("c, K and B must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise UsageError("max_steps must be positive")
        if self.format not in ("jsonl", "csv"):
            raise UsageError("format must be jsonl or csv")
        if self.engine not in ("auto", "reference", "compiled"):
            raise UsageError("engine must be auto, reference or compiled")
        if self.variant not in (GUARDED, PLAIN):
            raise UsageError(f"variant must be {GUARDED} or {PLAIN}")
        if self.mode not in (SQUEEZE, SIMPLE, RENAME):
            raise UsageError(f"mode must be {SQUEEZE}, {SIMPLE} or {RENAME}")
        if self.command == "consensus" and self.inputs != "random":
            if len(self.inputs) != self.n or set(self.inputs) - {"0", "1"}:
                raise UsageError("inputs must be 'random' or one bit per process")
        if self.command == "check":
            if self.n > 3:
                raise UsageError("exhaustive checks are limited to n <= 3")
            if self.target not in ("consensus", "select-winner", "naming"):
                raise UsageError("check target must be consensus, select-winner or naming")
            if self.coin not in ("local", "walk"):
                raise UsageError("check coin must be local or walk")
            if self.depth < 1:
                raise UsageError("depth must be positive")
        if self.callers is not None and self.callers < 1:
            raise UsageError("callers must be positive")
        crash_counts(self.crashes, self.n, 0)  # syntax check


@dataclass
class TrialStats:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return self.aggregate.get("violation_count", 0)

    @property
    def incomplete(self) -> int:
        return self.aggregate.get("incomplete", 0)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if not self.violations and not self.incomplete else EXIT_VIOLATION


# -- per-trial plans ---------------------------------------------------------------


def trial_seed(seed, t):
    return derive_seed(seed, "trial", t)


def trial_adversary(cfg, t):
    return ADVERSARIES[t % len(ADVERSARIES)] if cfg.adversary == "all" else cfg.adversary


def crash_counts(spec, n, t):
    """Number of crashes in trial ``t`` (or an explicit ``{pid: step}`` plan)."""
    if spec == "none":
        return 0
    if spec == "cycle":
        return t % n
    if spec == "alternate":
        return 0 if t % 2 == 0 or n == 1 else 1 + (t // 2) % (n - 1)
    if spec.startswith("k:"):
        try:
            k = int(spec[2:])
        except ValueError:
            raise UsageError(f"bad crash spec {spec!r}") from None
        if not 0 <= k <= max(0, n - 1):
            raise UsageError("a crash plan may crash at most n-1 processes")
        return k
    plan = {}
    try:
        for part in spec.split(","):
            pid, at = part.split("@")
            plan[int(pid)] = int(at)
    except ValueError:
        raise UsageError(f"bad crash spec {spec!r}") from None
    if len(plan) > n - 1 or any(not 0 <= p < n for p in plan) or any(a < 0 for a in plan.values()):
        raise UsageError("explicit crash plan must name at most n-1 valid processes")
    return plan


def crash_window(command, n):
    """Crash steps are drawn log-uniformly below this bound."""
    if command == "naming":
        return max(16, n ** 3)
    return max(16, 50 * n ** 4)


def trial_crashes(cfg, t, procs=None):
    n = procs or cfg.n
    k = crash_counts(cfg.crashes, n, t)
    if isinstance(k, dict):
        return dict(k)
    if k == 0:
        return None
    rng = random.Random(derive_seed(cfg.seed, "crash", t))
    window = crash_window(cfg.command, cfg.n)
    pids = sorted(rng.sample(range(n), k))
    return {p: int(window ** rng.random()) - 1 for p in pids}


def trial_inputs(cfg, t):
    if cfg.inputs != "random":
        return [int(ch) for ch in cfg.inputs]
    rng = random.Random(derive_seed(cfg.seed, "inputs", t))
    return [rng.randrange(2) for _ in range(cfg.n)]


def _run(fast, reference, engine, *args, **kw):
    if engine == "reference":
        return reference(*args, **kw)
    try:
        return fast(*args, **kw)
    except Unsupported:
        if engine == "compiled":
            raise
        return reference(*args, **kw)


# -- trials --------------------------------------------------------------------------


def _consensus_trial(cfg, t):
    inputs = trial_inputs(cfg, t)
    max_steps = cfg.max_steps or 50 * cfg.B * cfg.n ** 5
    outcomes, st = _run(run_consensus_fast, run_consensus, cfg.engine, cfg.n, inputs,
                        adversary=trial_adversary(cfg, t), crashes=trial_crashes(cfg, t),
                        delta=cfg.delta, seed=trial_seed(cfg.seed, t), max_steps=max_steps,
                        K=cfg.K, B=cfg.B)
    crashed = st["crashed"]
    decided = [o for o, c in zip(outcomes, crashed) if not c]
    complete = all(isinstance(o, int) for o in decided)
    if st["violations"]:
        outcome = "violation"
    elif not complete:
        outcome = "incomplete"
    else:
        outcome = f"decided:{decided[0]}"
    rec = _record(t, outcome, st["iterations"], st["coin_invocations"], st["steps"], st["violations"])
    raw = {"inputs": inputs, "crashed": crashed, "complete": complete, "outcomes": outcomes}
    return rec, raw


def _coin_trial(cfg, t):
    outcomes, st = _run(run_coin_fast, _reference_coin, cfg.engine, cfg.n, delta=cfg.delta,
                        K=cfg.K, B=cfg.B, adversary=trial_adversary(cfg, t),
                        seed=trial_seed(cfg.seed, t), max_steps=cfg.max_steps,
                        callers=cfg.callers, crashes=trial_crashes(cfg, t, cfg.callers))
    alive = [o for o in outcomes if o != CRASHED]
    complete = all(isinstance(o, int) for o in alive)
    if not complete:
        outcome = "incomplete"
    elif len(set(alive)) == 1:
        outcome = f"unanimous:{alive[0]}"
    else:
        outcome = "split"
    rec = _record(t, outcome, [], [1] * len(outcomes), st["steps"], [])
    raw = {"outcomes": outcomes, "fallbacks": st.get("fallbacks"), "complete": complete}
    return rec, raw


def _reference_coin(n, **kw):
    outcomes, sys_ = run_coin(n, **kw)
    return outcomes, {"steps": [p.steps for p in sys_.procs], "fallbacks": None, "system": sys_}


def _naming_trial(cfg, t):
    kw = dict(adversary=trial_adversary(cfg, t), crashes=trial_crashes(cfg, t),
              seed=trial_seed(cfg.seed, t), max_steps=cfg.max_steps, variant=cfg.variant)
    if cfg.mode == RENAME:
        rng = random.Random(derive_seed(cfg.seed, "ids", t))
        kw["ids"] = rng.sample(range(1, 1 << 20), cfg.n)
    outcomes, st = _run(run_naming_fast, run_naming, cfg.engine, cfg.n, cfg.mode, cfg.c, **kw)
    crashed = st["crashed"]
    named = [k for k, c in zip(st["keys"], crashed) if not c]
    complete = all(k is not None for k in named)
    viol = st["violations"]
    if viol:
        outcome = "violation"
    elif not complete:
        outcome = "incomplete"
    else:
        outcome = "named+backup" if st["entered_backup"] else "named"
    rec = _record(t, outcome, [], st["invocations"], st["steps"], viol)
    raw = {"crashed": crashed, "complete": complete, "backup": st["entered_backup"],
           "phases": st["phases"], "keys": st["keys"]}
    return rec, raw


def _check_builder(cfg):
    if cfg.target == "consensus":
        inputs = [i % 2 for i in range(cfg.n)] if cfg.inputs == "random" else trial_inputs(cfg, 0)
        props = ("agreement", "validity")

        def build(record=False):
            return consensus_system(cfg.n, inputs, K=cfg.K, B=cfg.B, delta=cfg.delta,
                                    coin_backend=cfg.coin, record=record)
    elif cfg.target == "select-winner":
        props = ("at-most-one-winner", "exactly-one-winner")

        def build(record=False):
            return select_winner_system(cfg.n, variant=cfg.variant, record=record)
    else:
        props = ("name-uniqueness", "at-most-one-winner")

        def build(record=False):
            return naming_system(cfg.n, cfg.mode, cfg.c, variant=cfg.variant, record=record)
    return build, props


def _check_trial(cfg, t):
    build, props = _check_builder(cfg)
    rep = exhaustive_explore(build, cfg.depth, props, max_states=cfg.max_states)
    viol = [v.prop for v in rep.violations]
    if viol:
        outcome = "violation"
    else:
        outcome = "complete" if rep.complete else "truncated"
    rec = _record(t, outcome, [], [], [rep.nodes, rep.states], viol)
    raw = {"complete": rep.complete, "nodes": rep.nodes, "states": rep.states,
           "truncated": rep.truncated, "violation_counts": dict(rep.violation_counts),
           "witnesses": [{"property": v.prop, "path": v.path} for v in rep.violations]}
    return rec, raw


def _impossibility_records(cfg):
    max_steps = cfg.max_steps or 10_000
    out = []
    t = 0
    for name, factory in SYMMETRIC_SUITE.items():
        rep = mirror_symmetric(factory, seed=trial_seed(cfg.seed, t), max_steps=max_steps)
        out.append(_impossibility_record(t, "mirror:" + name, rep))
        t += 1
    for name, (factory, k) in ASYMMETRIC_SUITE.items():
        rep = lockstep_asymmetric(factory, max_steps=max_steps, k=k,
                                  perm_seed=trial_seed(cfg.seed, t))
        out.append(_impossibility_record(t, "lockstep:" + name, rep))
        t += 1
    return out


def _impossibility_record(t, label, rep):
    viol = ["divergence"] if rep.diverged or not rep.memory_matches else []
    if viol:
        outcome = f"{label}:diverged"
    elif rep.collision:
        outcome = f"{label}:collision"
    else:
        outcome = f"{label}:no-output"
    rec = _record(t, outcome, [rep.rounds], [], [rep.equal_rounds], viol)
    raw = {"summary": rep.summary(), "complete": True, "outputs": list(rep.outputs),
           "rounds": rep.rounds, "equal_rounds": rep.equal_rounds}
    return rec, raw


TRIALS = {"consensus": _consensus_trial, "coin": _coin_trial, "naming": _naming_trial,
          "check": _check_trial}


def _record(t, outcome, iterations, invocations, steps, violations):
    return {"trial": t, "outcome": outcome, "iterations": [int(x) for x in iterations],
            "invocations": [int(x) for x in invocations], "steps": [int(x) for x in steps],
            "violations": list(violations)}


# -- aggregation and reports -------------------------------------------------------------


def _mean(values):
    return float(np.mean(values)) if values else None


def _pct(values, q):
    return int(np.percentile(values, q, method="inverted_cdf")) if values else None


def aggregate(cfg, records, raw):
    cols = {c: [x for r in records for x in r[c]] for c in ("iterations", "invocations", "steps")}
    outcome_counts = {}
    for r in records:
        outcome_counts[r["outcome"]] = outcome_counts.get(r["outcome"], 0) + 1
    agg = {
        "aggregate": True,
        "version": __version__,
        "config": asdict(cfg),
        "trials": len(records),
        "violation_count": sum(1 for r in records if r["violations"]),
        "incomplete": sum(1 for x in raw if not x.get("complete", True)),
        "outcomes": dict(sorted(outcome_counts.items())),
        "mean_iterations": _mean(cols["iterations"]),
        "mean_invocations": _mean(cols["invocations"]),
        "mean_steps": _mean(cols["steps"]),
        "p50_invocations": _pct(cols["invocations"], 50),
        "p99_invocations": _pct(cols["invocations"], 99),
        "p99_iterations": _pct(cols["iterations"], 99),
    }
    if cfg.command == "naming":
        agg["backup_rate"] = sum(1 for x in raw if x["backup"]) / len(raw)
    if cfg.command == "coin":
        agg["unanimous_1"] = outcome_counts.get("unanimous:1", 0) / len(records)
        agg["unanimous_0"] = outcome_counts.get("unanimous:0", 0) / len(records)
        agg["split"] = outcome_counts.get("split", 0) / len(records)
    if cfg.command == "check":
        agg["explored"] = {k: raw[0][k] for k in ("nodes", "states", "truncated", "violation_counts")}
    return agg


def run_experiment(cfg: ExperimentConfig) -> TrialStats:
    cfg.validate()
    if cfg.command == "impossibility":
        pairs = _impossibility_records(cfg)
    else:
        trials = 1 if cfg.command == "check" else cfg.trials
        pairs = [TRIALS[cfg.command](cfg, t) for t in range(trials)]
    records = [p[0] for p in pairs]
    raw = [p[1] for p in pairs]
    return TrialStats(cfg, records, raw, aggregate(cfg, records, raw))


def _csv_cell(v):
    if isinstance(v, list):
        return " ".join(str(x) for x in v)
    return "" if v is None else str(v)


def render_report(stats: TrialStats, fmt: str) -> str:
    if fmt == "jsonl":
        lines = [json.dumps(r, sort_keys=False) for r in stats.records]
        lines.append(json.dumps(stats.aggregate, sort_keys=True))
        return "\n".join(lines) + "\n"
    if fmt != "csv":
        raise UsageError("format must be jsonl or csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in stats.records:
        w.writerow([_csv_cell(r[c]) for c in COLUMNS])
    a = stats.aggregate
    w.writerow(["aggregate", json.dumps(a["outcomes"], sort_keys=True), _csv_cell(a["mean_iterations"]),
                _csv_cell(a["mean_invocations"]), _csv_cell(a["mean_steps"]), a["violation_count"]])
    return buf.getvalue()


def default_output(cfg: ExperimentConfig) -> str:
    directory = os.environ.get(OUTPUT_DIR_ENV, "reports")
    adv = cfg.adversary.replace(":", "-").replace("(", "").replace(")", "")
    name = f"{cfg.command}-n{cfg.n}-{adv}-seed{cfg.seed}.{cfg.format}"
    return os.path.join(directory, name)


def emit_report(stats: TrialStats, fmt: str, path: str) -> str:
    text = render_report(stats, fmt)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


# -- command line ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anonsim", description="Anonymous shared-memory protocol experiments.")
    parser.add_argument("--version", action="version", version=f"anonsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, trials=True):
        p.add_argument("--n", type=int, default=2, help="number of processes")
        if trials:
            p.add_argument("--trials", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-steps", type=int, default=None)
        p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
        p.add_argument("--output", default=None,
                       help=f"report path (default: ${OUTPUT_DIR_ENV} or ./reports, auto-named)")

    def sched(p):
        p.add_argument("--adversary", default="round-robin",
                       help="strategy name, weak:<kind>, or 'all' to rotate per trial")
        p.add_argument("--crashes", default="none",
                       help="none | cycle | alternate | k:<count> | pid@step,...")
        p.add_argument("--engine", choices=("auto", "reference", "compiled"), default="auto")

    def coin_params(p):
        p.add_argument("--delta", type=float, default=0.25)
        p.add_argument("--K", type=int, default=None)
        p.add_argument("--B", type=int, default=10)

    p = sub.add_parser("consensus", help="randomized binary consensus trials")
    common(p), sched(p), coin_params(p)
    p.add_argument("--inputs", default="random", help="'random' or a bit string")

    p = sub.add_parser("coin", help="weak shared coin trials")
    common(p), sched(p), coin_params(p)
    p.add_argument("--callers", type=int, default=None, help="callers (default n)")

    p = sub.add_parser("naming", help="anonymous naming trials")
    common(p), sched(p), coin_params(p)
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--mode", choices=(SQUEEZE, SIMPLE, RENAME), default=SQUEEZE)
    p.add_argument("--variant", choices=(GUARDED, PLAIN), default=GUARDED)

    p = sub.add_parser("check", help="bounded exhaustive exploration (n <= 3)")
    common(p, trials=False), coin_params(p)
    p.add_argument("--target", choices=("consensus", "select-winner", "naming"), default="consensus")
    p.add_argument("--depth", type=int, default=200)
    p.add_argument("--coin", choices=("local", "walk"), default="local")
    p.add_argument("--inputs", default="random")
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--mode", choices=(SQUEEZE, SIMPLE), default=SQUEEZE)
    p.add_argument("--variant", choices=(GUARDED, PLAIN), default=GUARDED)
    p.add_argument("--max-states", type=int, default=2_000_000)

    p = sub.add_parser("impossibility", help="mirror and lock-step coupling demonstrations")
    common(p, trials=False)
    return parser


def config_from_args(args) -> ExperimentConfig:
    fields = {k: v for k, v in vars(args).items() if k in ExperimentConfig.__dataclass_fields__}
    return ExperimentConfig(**fields)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        stats = run_experiment(cfg)
        path = emit_report(stats, cfg.format, cfg.output or default_output(cfg))
    except UsageError as e:
        print(f"anonsim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"anonsim: error: cannot write report: {e}", file=sys.stderr)
        return EXIT_USAGE
    a = stats.aggregate
    print(f"{cfg.command} n={cfg.n} trials={a['trials']} violations={a['violation_count']} "
          f"incomplete={a['incomplete']} outcomes={a['outcomes']} -> {path}")
    for r in stats.raw:
        if "summary" in r:
            print("  " + r["summary"])
    return stats.exit_code


if __name__ == "__main__":
    sys.exit(main())
