"""Command-line front end.

Every command writes its outputs into ``--out-dir`` together with a
``<command>.manifest.json`` run manifest, and every report names the
manifest that produced it.

Global flags can also come from the environment: ``PLATELETMC_CONFIG``,
``PLATELETMC_SEED``, ``PLATELETMC_OUT_DIR``, ``PLATELETMC_THREADS`` and
``PLATELETMC_TOLERANCE``. An explicit flag wins over the environment.

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 query parse
error, 4 invalid input (config, policy, model files, labels), 5 solver or
training failed to converge, 6 memory budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import resource
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import MemoryBudgetExceeded, PlateletMCError, TrainingDiverged
from .mdp import FEATURES, ModelConfig, load_config
from .model import SparseModel
from .pctl import ParseError, bind, evaluate, parse, pretty
from .policy import IMP_NONE, MlpPolicy, PolicyTransform, load_policy, prune_feature, save_policy

log = logging.getLogger("plateletmc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_INVALID = 4
EXIT_NOT_CONVERGED = 5
EXIT_MEMORY = 6

ENV_PREFIX = "PLATELETMC_"
DEFAULT_QUERIES = ('P=? [ F<=200 "empty" ]', 'P=? [ F<=200 "full" ]')


class NotConverged(PlateletMCError):
    pass


# -- run manifest -----------------------------------------------------------------


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.start = time.time()
        self.outputs: list[Path] = []
        self.manifest_name = f"{args.command}.manifest.json"

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def write_json(self, name: str, data: dict) -> Path:
        p = self.path(name)
        data = {"manifest": self.manifest_name, **data}
        p.write_text(json.dumps(_jsonable(data), indent=2) + "\n")
        return p

    def write_csv(self, name: str, rows: Sequence[dict], header: Optional[Sequence[str]] = None) -> Path:
        p = self.path(name)
        keys = list(header or [])
        for r in rows:
            keys += [k for k in r if k not in keys]
        with open(p, "w", newline="") as fh:
            fh.write(f"# manifest: {self.manifest_name}\n")
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: _csv_value(v) for k, v in r.items()})
        return p

    def finish(self, status: str = "ok") -> Path:
        peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        digests = {}
        for p in dict.fromkeys(self.outputs):
            if p.exists():
                digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config_paths": [self.args.config] if self.args.config else [],
            "seeds": {"seed": self.args.seed},
            "tool_version": __version__,
            "status": status,
            "wall_time_s": round(time.time() - self.start, 3),
            "peak_memory_mb": round(peak_kb / 1024, 1),
            "threads": self.args.threads,
            "tolerance": self.args.tolerance,
            "outputs": digests,
        }
        p = self.out / self.manifest_name
        p.write_text(json.dumps(manifest, indent=2) + "\n")
        return p


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
        return x
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _csv_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float):
        return repr(v)
    return v


# -- loading helpers ----------------------------------------------------------------


def _config(args) -> ModelConfig:
    return load_config(args.config) if args.config else ModelConfig()


def _load_policy_any(path: str):
    """MLP policies are JSON; tabular policies are ``.npz``."""
    if str(path).endswith(".npz"):
        from .solve import TabularPolicy

        return TabularPolicy.load(path)
    return load_policy(path)


def _transform(args, n_orders: int) -> Optional[PolicyTransform]:
    prune = getattr(args, "prune", None) or []
    cf = getattr(args, "counterfactual", None) or []
    if not prune and not cf:
        return None
    t = PolicyTransform.parse(prune, cf)
    t.check_levels(n_orders)
    return t


def _reduction(dtmc_states: int, mdp_states: int) -> float:
    return 100.0 * (1.0 - dtmc_states / mdp_states)


def _full_mdp_counts(config: ModelConfig, mdp_path: Optional[str]) -> dict:
    if mdp_path:
        return SparseModel.load(mdp_path).counts()
    from .solve import explore_full

    return explore_full(config).counts()


def _check_converged(result, what: str) -> None:
    if not result.converged:
        raise NotConverged(f"{what} did not converge (residual {result.residual:.3e})")


# -- commands -------------------------------------------------------------------------


def cmd_solve(args) -> int:
    from .mdp import steps_for_horizon
    from .solve import explore_full, min_bounded_reach

    run = Run(args)
    config = _config(args)
    bound = steps_for_horizon(args.horizon, args.horizon_unit)
    t0 = time.time()
    mdp = explore_full(config, max_states=args.max_states)
    t_explore = time.time() - t0
    if args.save_mdp:
        mdp.save(run.path("mdp.npz"))
    results = []
    for target in args.target:
        t1 = time.time()
        res = min_bounded_reach(mdp, target, bound)
        name = f"policy_min_{target}_{bound}.npz"
        res.policy.save(run.path(name))
        results.append({
            "target": target,
            "query": f'Pmin=? [ F<={bound} "{target}" ]',
            "value": res.value,
            "iterations": res.iterations,
            "residual": 0.0,
            "method": "bounded value iteration",
            "policy_file": name,
            "seconds": round(time.time() - t1, 3),
        })
        print(f"min P[F<={bound} {target}] = {res.value:.6e}")
    counts = mdp.counts()
    print(f"full MDP: {counts['states']} states, {counts['transitions']} transitions (initial {config.initial})")
    run.write_json("solve_report.json", {
        "initial_state": config.to_dict()["initial"],
        "horizon": args.horizon,
        "horizon_unit": args.horizon_unit,
        "horizon_steps": bound,
        "counts": counts,
        "explore_seconds": round(t_explore, 3),
        "results": results,
    })
    run.finish()
    return EXIT_OK


def _load_train_config(args, mode: str):
    from .train import TrainConfig

    values: dict = {}
    if args.train_config:
        path = Path(args.train_config)
        raw = path.read_bytes()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            values = tomllib.loads(raw.decode())
        else:
            values = json.loads(raw)
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            from .errors import ConfigError

            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
    overrides = {
        "hidden": args.hidden,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "episodes": args.episodes,
        "max_episode_length": args.max_episode_length,
        "discount": args.discount,
        "epochs": args.epochs,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    values["seed"] = args.seed
    values["mode"] = mode
    return TrainConfig(**values)


def cmd_distill(args) -> int:
    from .induce import build_induced
    from .solve import TabularPolicy, explore_full, optimal_cost_policy
    from .train import distill_policy, evaluate_policy

    run = Run(args)
    config = _config(args)
    tc = _load_train_config(args, "distill")
    mdp_counts = None
    if args.tabular:
        tabular = TabularPolicy.load(args.tabular)
        dp_info = {"tabular_file": args.tabular}
    else:
        mdp = explore_full(config)
        mdp_counts = mdp.counts()
        cost = optimal_cost_policy(mdp, discount=tc.discount, tol=args.dp_tolerance, order_step=args.order_step)
        _check_converged(cost, "cost value iteration")
        del mdp
        tabular = cost.policy
        tabular.save(run.path("tabular_policy.npz"))
        dp_info = {"discounted_cost": cost.value, "iterations": cost.iterations, "residual": cost.residual,
                   "order_step": args.order_step}
    res = distill_policy(config, tabular, tc)
    save_policy(res.policy, run.path("policy.json"))
    run.write_csv("train_log.csv", res.log)
    dtmc = build_induced(config, res.policy)
    ev = evaluate_policy(config, res.policy, episodes=args.eval_episodes, seed=args.seed)
    report = {
        "dp": dp_info,
        "agreement": res.fit.agreement,
        "reached_target": res.fit.reached_target,
        "rounds": res.rounds,
        "dataset_size": res.dataset_size,
        "disagreements_on_own_dtmc": res.disagreements,
        "dtmc": dtmc.counts(),
        "mean_return": ev.mean,
        "return_stderr": ev.stderr,
        "eval_episodes": ev.episodes,
    }
    if mdp_counts:
        report["mdp"] = mdp_counts
        report["reduction_percent"] = _reduction(dtmc.n_states, mdp_counts["states"])
    run.write_json("distill_report.json", report)
    print(f"agreement {res.fit.agreement:.4f}, DTMC {dtmc.n_states} states, return {ev.mean:.2f} +- {ev.stderr:.2f}")
    if not res.fit.reached_target:
        log.warning("distillation stopped below the agreement target")
    run.finish()
    return EXIT_OK


def cmd_train(args) -> int:
    if args.mode == "distill":
        return cmd_distill(args)
    from .train import evaluate_policy, policy_gradient_train

    run = Run(args)
    config = _config(args)
    tc = _load_train_config(args, "policy-gradient")
    res = policy_gradient_train(config, tc)
    save_policy(res.policy, run.path("policy.json"))
    run.write_csv("train_log.csv", res.log)
    ev = evaluate_policy(config, res.policy, episodes=args.eval_episodes, seed=args.seed)
    run.write_json("train_report.json", {"mode": tc.mode, "best_eval_return": res.best_return,
                                          "mean_return": ev.mean, "return_stderr": ev.stderr})
    print(f"return {ev.mean:.2f} +- {ev.stderr:.2f}")
    run.finish()
    return EXIT_OK


def cmd_build(args) -> int:
    from .induce import LabelerSet, build_induced

    run = Run(args)
    config = _config(args)
    policy = _load_policy_any(args.policy)
    transform = _transform(args, config.n_orders)
    labelers = LabelerSet.parse(args.labels, rounds=args.rounds, seed=args.seed)
    t0 = time.time()
    dtmc = build_induced(config, policy, transform, labelers, relevance_stop=args.absorb)
    seconds = time.time() - t0
    dtmc.validate()
    dtmc.save(run.path(args.output))
    dtmc.write_state_table(run.path(Path(args.output).stem + ".states.csv"))
    counts = dtmc.counts()
    report = {"dtmc": counts, "absorb": args.absorb, "build_seconds": round(seconds, 3),
              "absorbed_states": dtmc.meta.get("absorbed_states", 0),
              "transform": dtmc.meta.get("transform"), "labels": sorted(dtmc.labels)}
    line = f"DTMC: {counts['states']} states, {counts['transitions']} transitions"
    if args.absorb:
        # the same chain without the absorbing cut, so both conventions are on record
        open_counts = build_induced(config, policy, transform, LabelerSet(action=False)).counts()
        report["dtmc_without_absorb"] = open_counts
        line += f" ({open_counts['states']} states without absorbing {args.absorb!r})"
    if not args.no_reduction:
        mdp_counts = _full_mdp_counts(config, args.mdp)
        report["mdp"] = mdp_counts
        report["reduction_percent"] = _reduction(counts["states"], mdp_counts["states"])
        line += f", {report['reduction_percent']:.2f}% fewer states than the full MDP"
    run.write_json(Path(args.output).stem + ".report.json", report)
    print(line)
    run.finish()
    return EXIT_OK


def _read_queries(args) -> list[tuple[int, str]]:
    items = [(0, q) for q in (args.query or [])]
    if args.batch:
        for lineno, line in enumerate(Path(args.batch).read_text().splitlines(), 1):
            text = line.strip()
            if text and not text.startswith("#"):
                items.append((lineno, text))
    return items


def _bindings(args) -> dict[str, int]:
    out = {}
    for item in args.bind or []:
        name, _, value = item.partition("=")
        out[name.strip()] = int(value)
    return out


def cmd_check(args) -> int:
    run = Run(args)
    dtmc = SparseModel.load(args.model)
    queries = _read_queries(args)
    if not queries:
        raise PlateletMCError("no queries: pass --query or --batch")
    binds = _bindings(args)
    records = []
    parse_failures = 0
    invalid = 0
    not_converged = 0
    for lineno, text in queries:
        rec = {"line": lineno, "input": text}
        try:
            q = parse(text)
            if binds:
                q = bind(q, **binds)
        except ParseError as exc:
            parse_failures += 1
            rec.update({"error": exc.message, "offset": exc.offset, "expected": sorted(exc.expected)})
            where = f"line {lineno}: " if lineno else ""
            print(f"{where}parse error at byte {exc.offset}: {exc.message}\n{exc.caret()}", file=sys.stderr)
            records.append(rec)
            continue
        try:
            res = evaluate(dtmc, q, tol=args.tolerance)
        except PlateletMCError as exc:
            invalid += 1
            rec["error"] = str(exc)
            print(f"error: {text}: {exc}", file=sys.stderr)
            records.append(rec)
            continue
        if not res.converged:
            not_converged += 1
        rec.update(res.to_record())
        records.append(rec)
        print(f"{res.query}  =  {rec['value']}" + ("" if res.verdict is None else f"  ({res.verdict})"))
    if args.format == "csv":
        run.write_csv("check_results.csv", records, ["line", "input", "query", "value", "verdict"])
    else:
        run.write_json("check_results.json", {"model": args.model, "results": records})
    run.finish("parse_error" if parse_failures else "invalid_query" if invalid else "ok")
    if parse_failures:
        return EXIT_PARSE
    if invalid:
        return EXIT_INVALID
    if not_converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def parse_bounds(text: str) -> list[int]:
    """``"150:400:25"`` (inclusive range) or ``"150,175,200"``."""
    text = text.strip()
    if ":" in text:
        parts = [int(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise PlateletMCError(f"bad bound range {text!r}")
        lo, hi = parts[0], parts[1]
        step = parts[2] if len(parts) == 3 else 1
        if step <= 0:
            raise PlateletMCError("bound step must be positive")
        return list(range(lo, hi + 1, step))
    return [int(p) for p in text.split(",") if p.strip()]


def cmd_sweep(args) -> int:
    run = Run(args)
    dtmc = SparseModel.load(args.model)
    template = parse(args.query_template)
    rows = []
    for b in parse_bounds(args.bounds):
        q = bind(template, **{args.parameter: b})
        res = evaluate(dtmc, q, tol=args.tolerance)
        rows.append({"bound": b, "value": res.value})
    vals = [r["value"] for r in rows]
    monotone = all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    run.write_csv("sweep.csv", rows, ["bound", "value"])
    for r in rows:
        print(f"{r['bound']}\t{r['value']:.10g}")
    if not monotone:
        log.warning("sweep values are not nondecreasing in the bound")
    run.finish()
    return EXIT_OK


def _evaluate_all(dtmc: SparseModel, queries: Sequence[str], tol: float) -> dict[str, float]:
    return {pretty(parse(q)): evaluate(dtmc, q, tol=tol).value for q in queries}


def _rel_change(new: float, base: float) -> float:
    if base == 0:
        return 0.0 if new == 0 else math.inf
    return 100.0 * (new - base) / base


def cmd_explain(args) -> int:
    from .induce import LabelerSet, build_induced

    run = Run(args)
    config = _config(args)
    policy = _load_policy_any(args.policy)
    queries = args.query or list(DEFAULT_QUERIES)
    tol = args.tolerance
    if args.mode == "prune":
        if not isinstance(policy, MlpPolicy):
            raise PlateletMCError("prune mode needs a network policy")
        base = build_induced(config, policy)
        base_vals = _evaluate_all(base, queries, tol)
        feats = args.features or list(FEATURES)

        def one(name):
            pruned = prune_feature(policy, FEATURES.index(name))
            d = build_induced(config, pruned)
            return name, d.n_states, _evaluate_all(d, queries, tol)

        with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
            results = list(pool.map(one, feats))
        rows = []
        for name, n_states, vals in results:
            for q, v in vals.items():
                rows.append({"feature": name, "query": q, "baseline": base_vals[q], "pruned": v,
                             "relative_change_percent": _rel_change(v, base_vals[q]), "dtmc_states": n_states})
        run.write_csv("explain_prune.csv", rows)
        run.write_json("explain_prune.json", {"baseline": base_vals, "baseline_states": base.n_states, "rows": rows})
        for r in rows:
            print(f"{r['feature']:>5}  {r['query']}  {r['relative_change_percent']:+.2f}%")
    elif args.mode == "actions":
        transform = _transform(args, config.n_orders)
        d = build_induced(config, policy, transform, LabelerSet(action=True))
        rows = []
        for k in range(config.n_orders):
            label = f"pr_{k}"
            t = evaluate(d, f'T=? [ F "{label}" ]', tol=tol).value
            p = evaluate(d, f'P=? [ F "{label}" ]', tol=tol).value
            rows.append({"action": label, "expected_steps": t, "probability": p,
                         "states": int(d.label_mask(label).sum()), "never_selected": math.isinf(t)})
        never = [r["action"] for r in rows if r["never_selected"]]
        run.write_csv("explain_actions.csv", rows)
        run.write_json("explain_actions.json", {"rows": rows, "never_selected": never, "dtmc_states": d.n_states})
        for r in rows:
            t = "inf" if math.isinf(r["expected_steps"]) else f"{r['expected_steps']:.2f}"
            print(f"{r['action']:>6}  T={t:>10}  P={r['probability']:.6f}")
        print(f"{len(never)} order levels never selected")
    elif args.mode == "permute":
        d = build_induced(config, policy, None, LabelerSet(importance=True, rounds=args.rounds, seed=args.seed))
        dec = d.label_mask("decision")
        names = [f"imp_{f}" for f in FEATURES] + [IMP_NONE]
        rows = []
        for name in names:
            count = int((d.label_mask(name) & dec).sum())
            row = {"label": name, "decision_states": count, "frequency": count / max(1, int(dec.sum()))}
            if count:
                row["expected_steps"] = evaluate(d, f'T=? [ F "{name}" ]', tol=tol).value
                row["probability_200"] = evaluate(d, f'P=? [ F<=200 "{name}" ]', tol=tol).value
            rows.append(row)
        run.write_csv("explain_permute.csv", rows, ["label", "decision_states", "frequency",
                                                   "expected_steps", "probability_200"])
        run.write_json("explain_permute.json", {"rounds": args.rounds, "seed": args.seed, "rows": rows})
        for r in rows:
            print(f"{r['label']:>9}  {r['decision_states']:>7}  {r['frequency']:.4f}")
    elif args.mode == "counterfactual":
        if not args.counterfactual:
            raise PlateletMCError("counterfactual mode needs --counterfactual FROM:TO")
        transform = _transform(args, config.n_orders)
        base = build_induced(config, policy)
        cf = build_induced(config, policy, transform)
        bv = _evaluate_all(base, queries, tol)
        cv = _evaluate_all(cf, queries, tol)
        rows = [{"query": q, "baseline": bv[q], "counterfactual": cv[q],
                 "relative_change_percent": _rel_change(cv[q], bv[q])} for q in bv]
        run.write_csv("explain_counterfactual.csv", rows)
        run.write_json("explain_counterfactual.json", {
            "replacement": {f"pr_{a}": f"pr_{b}" for a, b in sorted(transform.replacement.items())},
            "baseline_states": base.n_states, "counterfactual_states": cf.n_states, "rows": rows})
        for r in rows:
            print(f"{r['query']}  {r['baseline']:.6g} -> {r['counterfactual']:.6g}")
    run.finish()
    return EXIT_OK


def cmd_export(args) -> int:
    run = Run(args)
    model = SparseModel.load(args.model)
    prefix = Path(args.out_dir) / (args.prefix or Path(args.model).stem)
    paths = model.export_explicit(prefix)
    for p in paths.values():
        run.outputs.append(Path(p))
    run.write_json(f"{prefix.name}.export.json", {"format": args.format, "files": {k: Path(v).name for k, v in paths.items()},
                                                  "counts": model.counts()})
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    run.finish()
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------


def _env(name: str, default=None, cast=str):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"error: bad value {raw!r} for {ENV_PREFIX}{name}")


def _hidden(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=_env("CONFIG"), help="model config file (.json or .toml)")
    g.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    g.add_argument("--out-dir", default=_env("OUT_DIR", "."), help="directory for reports and artifacts")
    g.add_argument("--threads", type=int, default=_env("THREADS", 1, int), help="workers for independent rebuilds")
    g.add_argument("--tolerance", type=float, default=_env("TOLERANCE", 1e-12, float),
                   help="absolute residual for iterative solvers")
    g.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="plateletmc", description=__doc__.split("\n\n")[0], parents=[common])
    p.add_argument("--version", action="version", version=f"plateletmc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="optimal bounded reachability on the full MDP")
    s.add_argument("--target", action="append", choices=["empty", "full"], help="repeatable; default both")
    s.add_argument("--horizon", type=int, default=200, help="bound, in --horizon-unit")
    s.add_argument("--horizon-unit", choices=["steps", "days"], default="steps",
                   help="steps are single transitions, a day is two steps (default steps)")
    s.add_argument("--max-states", type=int, default=None, help="memory budget in states")
    s.add_argument("--save-mdp", action="store_true", help="also write mdp.npz")
    s.set_defaults(func=cmd_solve)

    def train_flags(sp):
        sp.add_argument("--train-config", help="training config file (.json or .toml)")
        sp.add_argument("--hidden", type=_hidden, help="hidden widths, e.g. 256,256,256")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--max-episode-length", type=int)
        sp.add_argument("--discount", type=float)
        sp.add_argument("--epochs", type=int, help="epoch cap per distillation round")
        sp.add_argument("--eval-episodes", type=int, default=1000)
        sp.add_argument("--tabular", help="tabular policy to distill instead of solving the cost DP")
        sp.add_argument("--order-step", type=int, default=3,
                        help="cost DP orders only multiples of this many units (1 = unrestricted)")
        sp.add_argument("--dp-tolerance", type=float, default=1e-8)

    t = sub.add_parser("train", parents=[common], help="train a network policy")
    t.add_argument("--mode", choices=["distill", "policy-gradient"], default="distill")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", parents=[common], help="distill the cost-optimal tabular policy")
    train_flags(d)
    d.set_defaults(func=cmd_distill)

    def transform_flags(sp):
        sp.add_argument("--counterfactual", action="append", metavar="FROM:TO", help="order replacement, repeatable")
        sp.add_argument("--prune", action="append", metavar="FEATURE", help="feature to prune, repeatable")

    b = sub.add_parser("build", parents=[common], help="build the policy-induced DTMC")
    b.add_argument("--policy", required=True, help="policy file (.json network or .npz tabular)")
    transform_flags(b)
    b.add_argument("--labels", default="base,action", help="comma list of base, action, importance")
    b.add_argument("--rounds", type=int, default=50, help="permutation rounds for importance labels")
    b.add_argument("--absorb", help="make states with this label absorbing")
    b.add_argument("--output", default="dtmc.npz")
    b.add_argument("--mdp", help="saved full MDP, used only for the reduction percentage")
    b.add_argument("--no-reduction", action="store_true", help="skip exploring the full MDP for the reduction")
    b.set_defaults(func=cmd_build)

    c = sub.add_parser("check", parents=[common], help="evaluate PCTL queries on a DTMC")
    c.add_argument("model", help="DTMC artifact (.npz)")
    c.add_argument("--query", action="append", help="query string, repeatable")
    c.add_argument("--batch", help="file with one query per line")
    c.add_argument("--bind", action="append", metavar="NAME=INT", help="value for a bound parameter")
    c.add_argument("--format", choices=["json", "csv"], default="json")
    c.set_defaults(func=cmd_check)

    w = sub.add_parser("sweep", parents=[common], help="evaluate a query template over several bounds")
    w.add_argument("model")
    w.add_argument("--query-template", required=True, help='e.g. \'P=? [ F<=B "empty" ]\'')
    w.add_argument("--bounds", default="150:400:25", help="LO:HI[:STEP] inclusive, or a comma list")
    w.add_argument("--parameter", default="B")
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("explain", parents=[common], help="explanation reports")
    e.add_argument("--policy", required=True)
    e.add_argument("--mode", choices=["prune", "permute", "actions", "counterfactual"], required=True)
    e.add_argument("--query", action="append", help="queries to compare (default: empty and full at 200)")
    e.add_argument("--features", action="append", choices=list(FEATURES), help="prune mode: features (default all)")
    e.add_argument("--rounds", type=int, default=50)
    transform_flags(e)
    e.set_defaults(func=cmd_explain)

    x = sub.add_parser("export", parents=[common], help="write explicit-format transition and label files")
    x.add_argument("model")
    x.add_argument("--format", choices=["explicit"], default="explicit")
    x.add_argument("--prefix")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "solve" and not args.target:
        args.target = ["empty", "full"]
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: parse error at byte {exc.offset}: {exc.message}\n{exc.caret()}", file=sys.stderr)
        return EXIT_PARSE
    except (NotConverged, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except MemoryBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except (PlateletMCError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
