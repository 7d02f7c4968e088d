"""Experiment runner: one training run, the method comparison table, weight sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .config import METHODS, RunConfig
from .errors import FairShiftError
from .factorworld import (
    SOURCE,
    TARGET,
    Dataset,
    Emitter,
    FeatureCorruption,
    NuisanceResample,
    ShiftScenario,
    build_scenario,
    sample_dataset,
)
from .fairlosses import CFAIR_HEADS, DOMAIN_HEAD, LAFTR_HEAD
from .metrics import GROUP_NAMES, EvalReport, collect_pareto, evaluate, group_consistency, model_selection_score
from .neuralcore import Network, OptimizerState, save_snapshot
from .selftrain import LOG_COLUMNS, TrainingState, begin_epoch, train_epoch

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class World:
    scenario: ShiftScenario
    emitter: Emitter
    data: Dict[Tuple[int, str], Dataset]

    def get(self, domain: int, split: str) -> Dataset:
        return self.data[(domain, split)]


def _split_seed(base: int, domain: int, split: str) -> int:
    return int(np.random.SeedSequence([base, domain, SPLITS.index(split)]).generate_state(1)[0])


def build_world(cfg: RunConfig) -> World:
    scenario = build_scenario(cfg.scenario_kind, cfg.scenario_num_nuisance_values, cfg.scenario_extra_nuisance)
    emitter = Emitter.create(
        scenario.factors,
        feature_dim=cfg.emitter_feature_dim,
        seed=cfg.emitter_seed,
        noise_scale=cfg.emitter_noise_scale,
        separability=cfg.emitter_separability,
        nuisance_scale=cfg.emitter_nuisance_scale,
    )
    sizes = {"train": cfg.sample_n_train, "val": cfg.sample_n_val, "test": cfg.sample_n_test}
    data = {}
    for domain in (SOURCE, TARGET):
        for split in SPLITS:
            data[(domain, split)] = sample_dataset(
                scenario.config(domain), emitter, sizes[split], _split_seed(cfg.sample_seed, domain, split), domain
            )
    return World(scenario, emitter, data)


def build_transform(cfg: RunConfig, world: World) -> Callable[[Dataset, np.random.Generator], np.ndarray]:
    if cfg.transform_kind == "nuisance":
        return NuisanceResample.for_scenario(world.scenario, world.emitter, cfg.transform_factors)
    return FeatureCorruption.fit(world.get(SOURCE, "train").x, cfg.transform_protected, cfg.transform_fraction)


def build_network(cfg: RunConfig, seed: int) -> Network:
    fairness, _, dann = METHODS[cfg.method]
    hidden = list(cfg.net_adversary_hidden)
    heads = {}
    if fairness == "laftr":
        heads[LAFTR_HEAD] = (hidden, 1)
    elif fairness == "cfair":
        for name in CFAIR_HEADS:
            heads[name] = (hidden, 2)
    if dann:
        heads[DOMAIN_HEAD] = (hidden, 2)
    return Network.build(cfg.emitter_feature_dim, cfg.net_encoder, 2, seed=seed, adversaries=heads, reversal=cfg.net_reversal)


@dataclass
class RunRecord:
    config_hash: str
    method: str
    seed: int
    selection_split: str
    epochs: List[Dict[str, EvalReport]]
    selected_epoch: int
    source_selected_epoch: int
    final: Dict[str, EvalReport]
    source_selection_final: Dict[str, EvalReport]
    train_log: List[Dict[str, float]] = field(repr=False, default_factory=list)
    parameters: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    out_dir: Optional[str] = None
    diverged_epoch: Optional[int] = None

    def summary(self) -> Dict:
        return {
            "config_hash": self.config_hash,
            "method": self.method,
            "seed": self.seed,
            "selection_split": self.selection_split,
            "selected_epoch": self.selected_epoch,
            "source_selected_epoch": self.source_selected_epoch,
            "diverged_epoch": self.diverged_epoch,
            "final": {k: _report_dict(v) for k, v in self.final.items()},
            "source_selection_final": {k: _report_dict(v) for k, v in self.source_selection_final.items()},
        }


def _report_dict(r: EvalReport) -> Dict:
    return json.loads(r.to_json())


def _eval(net: Network, data: Dataset, name: str, transform=None, trials: int = 0, rng=None) -> EvalReport:
    cons = None
    if transform is not None and trials > 0:
        cons = group_consistency(net.predict, data, transform, trials, rng)
    return evaluate(net.predict(data.x), data.y, data.a, name, cons)


def run(cfg: RunConfig, seed: int, out_dir: Optional[str | os.PathLike] = None, world: Optional[World] = None) -> RunRecord:
    """Train one (config, seed) cell and evaluate the selected checkpoint on both test splits."""
    world = world or build_world(cfg)
    tcfg = cfg.train_config()
    transform = build_transform(cfg, world) if tcfg.consistency_active else None
    net = build_network(cfg, seed)
    state = TrainingState(net, OptimizerState(cfg.optim_lr, cfg.optim_momentum), seed)
    source = world.get(SOURCE, "train")
    target = None if cfg.source_only else world.get(TARGET, "train")
    val = {"source": world.get(SOURCE, "val"), "target": world.get(TARGET, "val")}
    test = {"source": world.get(SOURCE, "test"), "target": world.get(TARGET, "test")}

    split = cfg.selection_split
    best = {"source": (-np.inf, -1, None), "target": (-np.inf, -1, None)}
    epochs: List[Dict[str, EvalReport]] = []
    train_log: List[Dict[str, float]] = []
    diverged = None
    for _ in range(cfg.train_epochs):
        begin_epoch(state, tcfg)
        with np.errstate(over="ignore", invalid="ignore"):
            train_log.extend(train_epoch(state, source, target, transform, tcfg))
        if not all(np.isfinite(p).all() for p in net.parameters().values()):
            # adversarial games can blow up; keep the checkpoints selected so far
            diverged = state.epoch - 1
            log.warning("%s seed %d diverged in epoch %d; training stopped", cfg.method, seed, diverged)
            break
        reports = {f"{k}_test": _eval(net, d, k) for k, d in test.items()}
        for k, d in val.items():
            r = _eval(net, d, k)
            reports[f"{k}_val"] = r
            score = model_selection_score(r.accuracy, r.dodds)
            if score > best[k][0]:
                snap = {n: p.copy() for n, p in net.parameters().items()}
                best[k] = (score, state.epoch - 1, snap)
        epochs.append(reports)

    trials = cfg.eval_consistency_trials
    cons_transform = build_transform(cfg, world)

    def final_reports(params) -> Dict[str, EvalReport]:
        model = net.copy()
        model.load_parameters(params)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        return {k: _eval(model, d, k, cons_transform, trials, rng) for k, d in test.items()}

    if best[split][2] is None:
        raise FairShiftError(f"{cfg.method} seed {seed} diverged before any checkpoint was selected")
    final = final_reports(best[split][2])
    source_final = final if split == "source" else final_reports(best["source"][2])
    record = RunRecord(
        config_hash=cfg.hash(seed),
        method=cfg.method,
        seed=seed,
        selection_split=split,
        epochs=epochs,
        selected_epoch=best[split][1],
        source_selected_epoch=best["source"][1],
        final=final,
        source_selection_final=source_final,
        train_log=train_log,
        parameters=best[split][2],
        diverged_epoch=diverged,
    )
    if out_dir is not None:
        persist(record, cfg, net, Path(out_dir))
    return record


def _write_csv(path: Path, rows: Sequence[Dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _fmt_log_row(row: Dict[str, float]) -> Dict[str, str]:
    return {k: (str(int(v)) if k in ("epoch", "step") else f"{v:.9g}") for k, v in row.items()}


def persist(record: RunRecord, cfg: RunConfig, net: Network, root: Path) -> Path:
    """Write runs/<hash>/{config, train_log.csv, eval_*.csv, model.snapshot, report.json}."""
    d = root / "runs" / record.config_hash
    d.mkdir(parents=True, exist_ok=True)
    (d / "config").write_text(cfg.to_text() + f"# seed = {record.seed}\n# config_hash = {record.config_hash}\n")
    _write_csv(d / "train_log.csv", [_fmt_log_row(r) for r in record.train_log], LOG_COLUMNS)
    for dom in ("source", "target"):
        rows = []
        for epoch, reports in enumerate(record.epochs):
            row = {"config_hash": record.config_hash, "epoch": str(epoch)}
            row.update(reports[f"{dom}_test"].csv_row())
            rows.append(row)
        _write_csv(d / f"eval_{dom}.csv", rows, list(rows[0]) if rows else ["epoch"])
    model = net.copy()
    model.load_parameters(record.parameters)
    save_snapshot(model, d / "model.snapshot")
    (d / "report.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    record.out_dir = str(d)
    return d


def _run_cell(args) -> RunRecord:
    cfg, seed, out_dir = args
    rec = run(cfg, seed, out_dir)
    rec.train_log = []  # keep inter-process payloads small
    return rec


def world_key(cfg: RunConfig) -> Tuple:
    """Config fields that determine the generated datasets."""
    return tuple(sorted((k, str(v)) for k, v in cfg.to_mapping().items() if k.split(".")[0] in ("scenario", "emitter", "sample")))


def run_cells(cells: Sequence[Tuple[RunConfig, int]], out_dir=None, workers: int = 1) -> List[RunRecord]:
    """Run independent cells, optionally in worker processes; results keep input order."""
    jobs = [(cfg, seed, out_dir) for cfg, seed in cells]
    if workers <= 1:
        worlds: Dict[str, World] = {}
        out = []
        for cfg, seed, od in jobs:
            key = world_key(cfg)
            if key not in worlds:
                worlds[key] = build_world(cfg)
            rec = run(cfg, seed, od, world=worlds[key])
            rec.train_log = []
            out.append(rec)
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


METRIC_FIELDS = ("acc", "dodds", "vacc")


def _mean_std(values: Iterable[float]) -> Tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(records: Sequence[RunRecord]) -> List[Dict[str, str]]:
    """Per method x domain mean +- std (population) over seeds; percent units, 2 decimals."""
    by_method: Dict[str, List[RunRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, recs in by_method.items():
        for dom in ("source", "target"):
            reps = [r.final[dom] for r in recs]
            row = {"method": method, "domain": dom, "n_seeds": str(len(recs))}
            for name, vals in (
                ("acc", [100 * x.accuracy for x in reps]),
                ("dodds", [100 * x.dodds for x in reps]),
                ("vacc", [x.vacc for x in reps]),
            ):
                m, s = _mean_std(vals)
                row[f"{name}_mean"] = f"{m:.2f}"
                row[f"{name}_std"] = f"{s:.2f}"
            rows.append(row)
    return rows


SUMMARY_COLUMNS = ["method", "domain", "n_seeds"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")]


def summary_csv(rows: Sequence[Dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def compare(
    cfg: RunConfig,
    methods: Sequence[str],
    seeds: Optional[Sequence[int]] = None,
    out_dir=None,
    workers: int = 1,
) -> Tuple[List[Dict[str, str]], List[RunRecord]]:
    """Method x seed matrix on one scenario; returns the summary table and all records."""
    seeds = list(cfg.run_seeds if seeds is None else seeds)
    cells = [(cfg.replace(method=m), s) for m in methods for s in seeds]
    records = run_cells(cells, out_dir, workers)
    rows = summarize(records)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.csv").write_text(summary_csv(rows))
    return rows, records


def consistency_accuracy_spearman(report: EvalReport) -> float:
    """Rank correlation across groups between agreement rate and group accuracy (nan if undefined)."""
    acc = [report.group_accuracy[g // 2][g % 2] for g in range(4)]
    cons = [report.consistency.get(name) for name in GROUP_NAMES]
    if any(c is None for c in cons) or len(set(cons)) < 2 or len(set(acc)) < 2:
        return float("nan")
    return float(spearmanr(cons, acc).statistic)


PARETO_COLUMNS = ["w_fair", "w_cons", "seed", "target_acc", "target_dodds", "frontier"]


def sweep(
    cfg: RunConfig,
    grid: Sequence[Tuple[float, float]],
    seeds: Optional[Sequence[int]] = None,
    out_dir=None,
    workers: int = 1,
) -> Tuple[List[Dict[str, str]], List[Tuple[float, float]]]:
    """Run every (w_fair, w_cons) grid point x seed; emit target (acc, dodds) points and the frontier."""
    if not grid:
        raise ValueError("sweep needs a nonempty weight grid")
    seeds = list(cfg.run_seeds if seeds is None else seeds)
    cells = []
    for wf, wc in grid:
        c = cfg.replace(train_w_fair=float(wf), train_w_cons=float(wc))
        cells.extend((c, s) for s in seeds)
    records = run_cells(cells, out_dir, workers)
    points = [(r.final["target"].accuracy, r.final["target"].dodds) for r in records]
    frontier = collect_pareto(points)
    front = set(frontier)
    rows = []
    for (c, s), (acc, dodds) in zip(cells, points):
        rows.append(
            {
                "w_fair": f"{c.train_w_fair:g}",
                "w_cons": f"{c.train_w_cons:g}",
                "seed": str(s),
                "target_acc": f"{acc:.6f}",
                "target_dodds": f"{dodds:.6f}",
                "frontier": "1" if (acc, dodds) in front else "0",
            }
        )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(out_dir) / "pareto.csv", rows, PARETO_COLUMNS)
    return rows, frontier
