"""Experiment harness: ``cfl <subcommand> --config cfg.json``.

Each run writes ``results.jsonl`` (one record per trial, appended and
flushed line by line) and ``summary.csv`` (fixed columns) into the
output directory. Exit status: 0 when every summary row passes or is
inconclusive, 1 when some row fails, 2 for configuration errors and 3
for I/O failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import martingale as mg
from . import oblivious_sampling as obs
from .attacks import (AttackConfigError, check_nugget_structure, main_attack, nugget_finder,
                      verify_top_gap)
from .prob_core import SeedStream, random_bernoulli_pair, verify_bernoulli_lemmas
from .protocol_core import run_honest
from .protocols import make_protocol
from .stats import Proportion, mean_se

SCHEMA_VERSION = 1
SUBCOMMANDS = ("simulate", "attack", "nugget", "lapexp", "martingale-check", "verify-lemmas", "report")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
SUMMARY_COLUMNS = ("estimator", "estimate", "se", "ci_low", "ci_high", "ci_method", "trials", "bound",
                   "status", "note")

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "route": {"enum": ["auto", "mart", "dp", "sing", "ci93", "lapexp", "martingale-check",
                           "verify-lemmas"]},
        "trials": {"type": "integer", "minimum": 0},
        "pilot_trials": {"type": "integer", "minimum": 1},
        "sample_budget": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_honest": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "parallelism": {"type": "integer", "minimum": 1},
        "record_wall_time": {"type": "boolean"},
        "pass_z": {"type": "number", "minimum": 0},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
        "lapexp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r": {"type": "integer", "minimum": 2},
                "tsh": {"type": "number"},
                "sigma": {"type": "number"},
                "gamma": {"type": "number", "exclusiveMinimum": 0},
                "lam": {"type": "number", "exclusiveMinimum": 0},
                "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "martingale": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": sorted(mg.GENERATORS)},
                "r": {"type": "integer", "minimum": 1},
            },
        },
        "lemmas": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"r_max": {"type": "integer", "minimum": 1}, "spread": {"type": "number", "minimum": 0}},
        },
    },
}

DEFAULT_CONFIG = {
    "route": "auto",
    "trials": 1000,
    "pilot_trials": 2000,
    "sample_budget": 20000,
    "epsilon": 0.01,
    "max_honest": 2,
    "seed": 0,
    "parallelism": 1,
    "record_wall_time": False,
    "pass_z": 3.0,
    "output": {"dir": "cfl-out"},
    "lapexp": {"r": 100, "tsh": 0.15, "sigma": 0.1, "gamma": 0.2},
    "martingale": {"generator": "majority-doob", "r": 11},
    "lemmas": {"r_max": 10, "spread": 0.3},
}


class ConfigError(Exception):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (set, frozenset, tuple)):
        return sorted(o) if isinstance(o, (set, frozenset)) else list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dump_json(obj, **kw) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default, **kw)


@dataclass
class TrialRecord:
    trial: int
    seed_path: list
    honest: int | None
    kind: str
    z: int | None
    abort_round: int | None
    out: int | float | None
    placement: str | None = None
    target: int | None = None
    extra: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_json(self, with_time: bool) -> str:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        if not d["extra"]:
            d.pop("extra")
        return dump_json(d, separators=(",", ":"))


@dataclass
class SummaryRow:
    estimator: str
    estimate: float | None
    se: float | None
    ci_low: float | None
    ci_high: float | None
    ci_method: str
    trials: int
    bound: float | None = None
    status: str = "pass"  # pass | fail | inconclusive
    note: str = ""

    def as_row(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(round(v, 12))
            return str(v)

        return [fmt(getattr(self, c)) for c in SUMMARY_COLUMNS]


def estimate_bias(records, target: int = 1, name: str = "bias", bound: float | None = None,
                  pass_z: float | None = None) -> SummaryRow:
    """p-hat of ``target`` with a Wilson interval; bias = p-hat - 1/2.

    With ``pass_z`` set the row passes iff bias > pass_z * SE (strict).
    """
    outs = [rec.out if isinstance(rec, TrialRecord) else rec for rec in records]
    n = len(outs)
    if n == 0:
        return SummaryRow(name, None, None, None, None, "wilson", 0, bound, "inconclusive", "no trials")
    pr = Proportion(sum(1 for o in outs if o == target), n)
    lo, hi = pr.ci()
    status = "pass"
    if pass_z is not None:
        status = "pass" if pr.p - 0.5 > pass_z * pr.se else "fail"
    return SummaryRow(name, pr.p - 0.5, pr.se, lo - 0.5, hi - 0.5, "wilson", n, bound, status,
                      f"target={target}")


# configuration

def load_config(path: str | None, overrides: dict) -> dict:
    raw: dict = {"version": SCHEMA_VERSION}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message}") from exc
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in raw.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    for key, val in overrides.items():
        if val is None:
            continue
        if key == "out":
            cfg["output"]["dir"] = val
        else:
            cfg[key] = val
    env = os.environ.get("CFL_THREADS")
    if env:
        try:
            cfg["parallelism"] = max(1, int(env))
        except ValueError as exc:
            raise ConfigError("CFL_THREADS must be a positive integer") from exc
    return cfg


def _protocol(cfg: dict):
    spec = cfg.get("protocol")
    if spec is None:
        raise ConfigError("this subcommand needs a protocol section")
    try:
        return make_protocol(spec["name"], **spec.get("params", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad protocol: {exc}") from exc


# outputs

class RecordWriter:
    """Single appender; each record is one flushed JSON line."""

    def __init__(self, path: Path, with_time: bool):
        self.path = path
        self.with_time = with_time
        self.fh = open(path, "w", encoding="utf-8")
        self.count = 0

    def write(self, rec: TrialRecord):
        self.fh.write(rec.to_json(self.with_time) + "\n")
        self.fh.flush()
        self.count += 1

    def close(self):
        self.fh.close()


def write_summary(path: Path, rows: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow(row.as_row())


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# subcommands

def _timed(fn):
    t = time.perf_counter()
    res = fn()
    return res, time.perf_counter() - t


def cmd_simulate(cfg, writer):
    proto = _protocol(cfg)
    base = SeedStream(cfg["seed"], (0,))

    def one(j):
        s = base.derive(j)
        (_, out), dt = _timed(lambda: run_honest(proto, proto.sample_coins(s.derive(0))))
        return TrialRecord(j, list(s.path), None, "honest", None, None, int(out), wall_time=dt)

    recs = _parallel_map(one, range(cfg["trials"]), cfg["parallelism"])
    for rec in recs:
        writer.write(rec)
    row = estimate_bias(recs, 1, "honest_bias")
    if row.trials:
        row.status = "pass" if abs(row.estimate) <= cfg["pass_z"] * row.se + 1e-12 else "fail"
        row.note = "honest output should be unbiased"
    return [row]


def cmd_attack(cfg, writer):
    proto = _protocol(cfg)
    route = cfg["route"]
    if route not in ("auto", "mart", "dp", "sing", "ci93"):
        raise ConfigError(f"route {route!r} is not an attack route")
    if cfg["trials"] == 0:
        return [estimate_bias([], 1, "attack_bias")]
    acfg = {k: cfg[k] for k in ("sample_budget", "epsilon", "trials", "pilot_trials", "max_honest")}
    if route != "auto":
        acfg["routes"] = [route]
    try:
        res = main_attack(proto, acfg, SeedStream(cfg["seed"], (1,)))
    except AttackConfigError as exc:
        raise ConfigError(str(exc)) from exc
    for o in res.outcomes:
        extra = {} if o.x_at_decision is None else {"x_at_decision": o.x_at_decision}
        writer.write(TrialRecord(o.trial, o.seed_path, o.honest, o.kind, o.z, o.abort_round, o.out,
                                 o.placement, res.target, extra))
    row = estimate_bias([o.out for o in res.outcomes], res.target, "attack_bias",
                        res.bound, cfg["pass_z"])
    row.note = (f"kind={res.kind} z={res.z} h={res.h} target={res.target} "
                f"selection_multiplicity={res.selection_multiplicity}")
    if res.kind == "null":
        row.status = "inconclusive"
        row.note += " " + "; ".join(res.notes)
    aborted = sum(1 for o in res.outcomes if o.abort_round is not None)
    ab = Proportion(aborted, len(res.outcomes))
    lo, hi = ab.ci()
    rows = [row, SummaryRow("abort_rate", ab.p, ab.se, lo, hi, "wilson", ab.trials, None, "pass",
                            json.dumps(res.abort_rounds, sort_keys=True))]
    (Path(cfg["output"]["dir"]) / "attack.json").write_text(dump_json(res.to_json(), indent=1))
    return rows


def cmd_nugget(cfg, writer):
    proto = _protocol(cfg)
    try:
        res = nugget_finder(proto, cfg["sample_budget"], cfg["epsilon"], SeedStream(cfg["seed"], (2,)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res.posthoc = verify_top_gap(proto, res, cfg["sample_budget"], SeedStream(cfg["seed"], (3,)))
    (Path(cfg["output"]["dir"]) / "nugget.json").write_text(dump_json(res.to_json(), indent=1))
    checks = check_nugget_structure(res, proto.n)
    rows = [SummaryRow(f"structure:{name}", float(ok), None, None, None, "exact", 0, None,
                       "pass" if ok else "fail") for name, ok in checks.items()]
    ph = res.posthoc
    rows.append(SummaryRow("posthoc_gap", ph.get("freq", ph.get("worst_excess")), None, None, None, "none",
                           ph["N"], ph.get("bound"), "pass" if ph["holds"] else "fail", ph["condition"]))
    rows.append(SummaryRow("k_star", float(res.k_star), None, None, None, "none", 0, None, "pass",
                           f"k={res.k} rho*={res.rho_star}"))
    return rows


def cmd_lapexp(cfg, writer):
    lc = cfg["lapexp"]
    try:
        inst = obs.adversarial_instance(lc["r"], lc["tsh"], lc["sigma"], lc["gamma"], lc.get("lam"), lc.get("p"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    trials = cfg["trials"]
    base = SeedStream(cfg["seed"], (4,))
    thr = obs.threshold_reward(inst, lc["tsh"])
    bound = obs.halting_bound(inst, obs.exact_halt_probs(inst)).lower_bound
    rows = [SummaryRow("threshold_reward", thr, 0.0, thr, thr, "exact", inst.n, None, "pass",
                       f"deterministic rule, tsh={lc['tsh']}")]
    if trials == 0:
        rows.append(SummaryRow("lapexp_reward", None, None, None, None, "normal", 0, bound, "inconclusive"))
        return rows
    hs, J, reward = obs.run_lapexp_batch(inst, trials, base)
    for j in range(trials):
        writer.write(TrialRecord(j, list(base.path) + [j], int(hs[j]), "lapexp", None,
                                 None if J[j] == inst.r else int(J[j]), float(reward[j])))
    mu, se = mean_se(reward.tolist())
    z = cfg["pass_z"]
    ok = mu >= bound - z * se and mu - thr > z * se
    rows.append(SummaryRow("lapexp_reward", mu, se, mu - 1.96 * se, mu + 1.96 * se, "normal", trials, bound,
                           "pass" if ok else "fail", "passes if >= bound and above threshold reward"))
    return rows


def cmd_martingale(cfg, writer):
    mc = cfg["martingale"]
    r = mc["r"]
    trials = cfg["trials"]
    if trials == 0:
        return [SummaryRow("p_sos", None, None, None, None, "wilson", 0, 1 / 20, "inconclusive")]
    gen = mg.GENERATORS[mc["generator"]]
    ens = gen(r, trials, SeedStream(cfg["seed"], (5,)))
    gs = mg.gap_stats(ens)
    sos = mg.sum_of_squares(ens)
    for j in range(trials):
        writer.write(TrialRecord(j, [5, j], None, mc["generator"], None, None, float(ens[j, -1]),
                                 extra={"sos": float(sos[j])}))
    z = cfg["pass_z"]
    rows = []
    for name, p, ci, which in (("p_sos", gs.p_sos, gs.p_sos_ci, "sos"), ("p_jump", gs.p_jump, gs.p_jump_ci, "jump")):
        se = math.sqrt(max(p * (1 - p), 0.0) / trials)
        rows.append(SummaryRow(name, p, se, ci[0], ci[1], "wilson", trials, mg.GAP_PROB,
                               "pass" if gs.margin_se(which) > z else "fail"))
    ex = mg.check_ex_machina(ens, 0.0, z)
    rows.append(SummaryRow("ex_machina_gap", ex.lhs - ex.rhs, ex.se, None, None, "normal", trials, ex.slack,
                           "pass" if ex.holds else "fail", "E[X_r^2 - X_0^2] - E[sum Y^2]"))
    return rows


def cmd_lemmas(cfg, writer):
    lc = cfg["lemmas"]
    trials = cfg["trials"]
    base = SeedStream(cfg["seed"], (6,))
    bad = 0
    for j in range(trials):
        p, pp = random_bernoulli_pair(base.derive(j), lc["r_max"], lc["spread"])
        rep = verify_bernoulli_lemmas(p, pp)
        bad += not rep.holds
        writer.write(TrialRecord(j, list(base.path) + [j], None, "bernoulli-pair", None, None, int(bool(rep.holds)),
                                 extra={"r": len(p), "eps": rep.eps, "a1": rep.a1, "total": rep.total}))
    status = "inconclusive" if trials == 0 else ("pass" if bad == 0 else "fail")
    return [SummaryRow("lemma_violations", float(bad), None, None, None, "exact", trials, 0.0, status)]


def cmd_report(cfg, writer_unused):
    out = Path(cfg["output"]["dir"])
    path = out / "results.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    recs = []
    for line in lines:
        try:
            recs.append(json.loads(line))
        except json.JSONDecodeError:
            break  # truncated tail from an interrupted run
    groups: dict = {}
    for d in recs:
        groups.setdefault(d.get("kind", "?"), []).append(d)
    rows = []
    for kind, ds in sorted(groups.items()):
        outs = [d["out"] for d in ds]
        if all(o in (0, 1) for o in outs):
            target = ds[0].get("target")
            rows.append(estimate_bias(outs, 1 if target is None else target, f"{kind}:bias"))
        else:
            mu, se = mean_se(outs)
            rows.append(SummaryRow(f"{kind}:mean", mu, se, mu - 1.96 * se, mu + 1.96 * se, "normal", len(outs)))
    if not rows:
        rows.append(SummaryRow("records", None, None, None, None, "none", 0, None, "inconclusive"))
    return rows


COMMANDS = {
    "simulate": cmd_simulate,
    "attack": cmd_attack,
    "nugget": cmd_nugget,
    "lapexp": cmd_lapexp,
    "martingale-check": cmd_martingale,
    "verify-lemmas": cmd_lemmas,
    "report": cmd_report,
}


def run_experiment(subcommand: str, cfg: dict) -> tuple[list, int]:
    """Run one subcommand; returns (summary rows, exit code)."""
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    if subcommand == "report":
        rows = cmd_report(cfg, None)
        write_summary(out / "summary.csv", rows)
        return rows, EXIT_OK
    writer = RecordWriter(out / "results.jsonl", cfg["record_wall_time"])
    try:
        rows = COMMANDS[subcommand](cfg, writer)
    finally:
        writer.close()
    write_summary(out / "summary.csv", rows)
    failed = any(r.status == "fail" for r in rows)
    return rows, EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfl", description="Coin-flipping attack experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--out", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.trials is not None and args.trials < 0:
            raise ConfigError("--trials must be non-negative")
        cfg = load_config(args.config, {"seed": args.seed, "trials": args.trials, "out": args.out})
        if args.command == "simulate" or args.command == "attack" or args.command == "nugget":
            _protocol(cfg)
        rows, code = run_experiment(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for r in rows:
        est = "" if r.estimate is None else f"{r.estimate:.6g}"
        se = "" if r.se is None else f" +- {r.se:.3g}"
        print(f"{r.status:>12}  {r.estimator}: {est}{se}  {r.note}")
    return code


if __name__ == "__main__":
    sys.exit(main())
