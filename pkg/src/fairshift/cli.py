"""Command-line entry point: ``fairshift <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 failed theory check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import METHODS, RunConfig, _parse_value, load_config_file
from .errors import ConfigError, FairShiftError
from .factorworld import DOMAIN_TAGS, Dataset
from .metrics import evaluate
from .neuralcore import load_snapshot

EXIT_OK, EXIT_CONFIG, EXIT_THEORY = 0, 2, 3
COMPARE_METHODS = ("base", "laftr", "laftr+dann", "laftr+fixmatch", "ours-laftr")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="key = value run configuration file")
    parser.add_argument("--seed", type=int, default=default, help="run / generator seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS if suppress else [],
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairshift", description="Fairness transfer under distribution shift on synthetic factor worlds.")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    add("generate", "sample every (domain, split) dataset to CSV")
    add("train", "train one method for one seed")
    sp = add("compare", "method x seed matrix with a mean/std summary table")
    sp.add_argument("--methods", default=",".join(COMPARE_METHODS), help="comma-separated methods")
    sp.add_argument("--seeds", default=None, help="comma-separated seeds (default: run.seeds)")
    sp.add_argument("--workers", type=int, default=1)
    sp = add("sweep", "grid over (w_fair, w_cons) with a Pareto frontier")
    sp.add_argument("--w-fair", default="0,0.5,1", help="comma-separated fairness weights")
    sp.add_argument("--w-cons", default="0,0.5,1", help="comma-separated consistency weights")
    sp.add_argument("--seeds", default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp = add("theory", "certify the self-training bounds on random finite worlds")
    sp.add_argument("--worlds", type=int, default=200)
    sp.add_argument("--alpha", type=float, default=None, help="fixed alpha-bar (default: random per world)")
    sp.add_argument("--cbar", type=float, default=None, help="fixed c-bar (default: largest certified)")
    sp.add_argument("--mu-mode", default="min-teacher-error", help="min-teacher-error or fixed:<value>")
    sp.add_argument("--report", metavar="PATH", default=None, help="write a JSON report here")
    sp = add("eval", "evaluate a saved snapshot on a dataset CSV")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--data", required=True)
    return p


def _parse_list(text: Optional[str], cast=str) -> Optional[List]:
    if text is None:
        return None
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def load_run_config(args) -> RunConfig:
    mapping = load_config_file(args.config) if args.config else {}
    for item in args.overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        mapping[k.strip()] = _parse_value(v)
    return RunConfig.from_mapping(mapping)


def _seeds(args, cfg: RunConfig) -> List[int]:
    if getattr(args, "seeds", None):
        return _parse_list(args.seeds, int)
    if args.seed is not None:
        return [args.seed]
    return list(cfg.run_seeds)


def cmd_generate(args) -> int:
    from .harness import SPLITS, build_world

    cfg = load_run_config(args)
    if args.seed is not None:
        cfg = cfg.replace(sample_seed=args.seed)
    world = build_world(cfg)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    for (domain, split), data in world.data.items():
        data.to_csv(out / f"{DOMAIN_TAGS[domain]}_{split}.csv")
    (out / "config").write_text(cfg.to_text())
    print(f"wrote {2 * len(SPLITS)} datasets to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import run

    cfg = load_run_config(args)
    seed = args.seed if args.seed is not None else cfg.run_seeds[0]
    rec = run(cfg, seed, out_dir=args.out or ".")
    for name, rep in rec.final.items():
        print(f"{name:7s} acc {100 * rep.accuracy:6.2f}  dodds {100 * rep.dodds:6.2f}  vacc {rep.vacc:7.2f}")
    print(f"selected epoch {rec.selected_epoch} ({rec.selection_split} validation); outputs in {rec.out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .harness import compare, summary_csv

    cfg = load_run_config(args)
    methods = _parse_list(args.methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}", key="methods")
    rows, _ = compare(cfg, methods, _seeds(args, cfg), out_dir=args.out, workers=args.workers)
    sys.stdout.write(summary_csv(rows))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import sweep

    cfg = load_run_config(args)
    grid = [(wf, wc) for wf in _parse_list(args.w_fair, float) for wc in _parse_list(args.w_cons, float)]
    rows, frontier = sweep(cfg, grid, _seeds(args, cfg), out_dir=args.out, workers=args.workers)
    print(f"{len(rows)} points, {len(frontier)} on the frontier")
    for acc, dodds in frontier:
        print(f"  acc {100 * acc:6.2f}  dodds {100 * dodds:6.2f}")
    return EXIT_OK


def cmd_theory(args) -> int:
    from .theorylab import certify_instance, random_instance

    if args.worlds < 1:
        raise ConfigError("need at least one world", key="--worlds")
    if not (args.mu_mode == "min-teacher-error" or args.mu_mode.startswith("fixed:")):
        raise ConfigError(f"unknown mu mode {args.mu_mode!r}", key="--mu-mode")
    if args.alpha is not None and not 0 < args.alpha < 1 / 3:
        raise ConfigError("alpha-bar must lie in (0, 1/3)", key="--alpha")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    worlds, total_viol, min_err_slack, min_dodds_slack = [], 0, np.inf, np.inf
    for i in range(args.worlds):
        inst = random_instance(rng, alpha=args.alpha, cbar=args.cbar, mu_mode=args.mu_mode)
        cert = certify_instance(inst)
        total_viol += cert.feasible_violations
        min_err_slack = min(min_err_slack, cert.worst["error_slack"])
        min_dodds_slack = min(min_dodds_slack, cert.worst["dodds_slack"])
        worlds.append(
            {
                "world": i,
                "points": cert.n_points,
                "alpha_bar": inst.params.alpha_bar,
                "c_bar": inst.params.c_bar,
                "mu": inst.params.mu,
                "gamma": inst.params.gamma,
                "feasible_labelings": cert.feasible_checked,
                "violations": cert.feasible_violations,
                "optimum_violations": cert.optimum.violations if cert.optimum else None,
            }
        )
    summary = {
        "worlds": args.worlds,
        "violations": total_viol,
        "min_error_slack": float(min_err_slack),
        "min_dodds_slack": float(min_dodds_slack),
    }
    print(json.dumps(summary))
    if args.report:
        Path(args.report).write_text(json.dumps({"summary": summary, "worlds": worlds}, indent=2))
    return EXIT_OK if total_viol == 0 else EXIT_THEORY


def cmd_eval(args) -> int:
    net = load_snapshot(args.snapshot)
    data = Dataset.from_csv(args.data)
    domains = set(data.domain.tolist())
    name = DOMAIN_TAGS[domains.pop()] if len(domains) == 1 else "mixed"
    rep = evaluate(net.predict(data.x), data.y, data.a, name)
    text = rep.to_json()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "theory": cmd_theory,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FairShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
