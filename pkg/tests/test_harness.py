import csv
import json

import numpy as np
import pytest

from fairshift.factorworld import SOURCE, TARGET
from fairshift.harness import (
    SPLITS,
    build_world,
    compare,
    consistency_accuracy_spearman,
    run,
    summarize,
    sweep,
    world_key,
)
from fairshift.metrics import GROUP_NAMES, evaluate
from fairshift.neuralcore import load_snapshot

from oracles import dominates


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_world_is_deterministic_and_complete(tiny_cfg):
    w1, w2 = build_world(tiny_cfg), build_world(tiny_cfg)
    assert set(w1.data) == {(d, s) for d in (SOURCE, TARGET) for s in SPLITS}
    for key in w1.data:
        np.testing.assert_array_equal(w1.data[key].x, w2.data[key].x)
    assert not np.array_equal(w1.get(SOURCE, "train").x[:10], w1.get(SOURCE, "val").x[:10])


def test_world_key_ignores_training_fields(tiny_cfg):
    assert world_key(tiny_cfg) == world_key(tiny_cfg.replace(method="laftr", train_tau=0.5))
    assert world_key(tiny_cfg) != world_key(tiny_cfg.replace(sample_seed=9))


def test_persisted_layout_and_snapshot(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(method="ours-laftr")
    rec = run(cfg, 0, out_dir=tmp_path)
    d = tmp_path / "runs" / rec.config_hash
    assert {p.name for p in d.iterdir()} == {"config", "train_log.csv", "eval_source.csv", "eval_target.csv", "model.snapshot", "report.json"}
    log = _read(d / "train_log.csv")
    assert log and {r["epoch"] for r in log} == {"0", "1", "2"}
    assert len(_read(d / "eval_target.csv")) == cfg.train_epochs
    report = json.loads((d / "report.json").read_text())
    assert report["selection_split"] == "target"
    # the snapshot reproduces the selected model's test metrics
    net = load_snapshot(d / "model.snapshot")
    test = build_world(cfg).get(TARGET, "test")
    again = evaluate(net.predict(test.x), test.y, test.a, "target")
    assert again.accuracy == rec.final["target"].accuracy and again.dodds == rec.final["target"].dodds


def test_summary_recomputable_from_persisted_files(tiny_cfg, tmp_path):
    rows, records = compare(tiny_cfg, ["laftr", "laftr+fixmatch"], [0, 1], out_dir=tmp_path)
    assert len(records) == 4
    from_disk = {}
    for rec in records:
        d = tmp_path / "runs" / rec.config_hash
        rep = json.loads((d / "report.json").read_text())
        for dom in ("source", "target"):
            row = _read(d / f"eval_{dom}.csv")[rep["selected_epoch"]]
            assert row["acc"] == f"{100 * rep['final'][dom]['accuracy']:.2f}"
            from_disk.setdefault((rep["method"], dom), []).append(rep["final"][dom])
    written = _read(tmp_path / "summary.csv")
    assert written == rows
    for row in written:
        reps = from_disk[(row["method"], row["domain"])]
        acc = [100 * r["accuracy"] for r in reps]
        vacc = [r["vacc"] for r in reps]
        assert row["acc_mean"] == f"{np.mean(acc):.2f}" and row["acc_std"] == f"{np.std(acc):.2f}"
        assert row["vacc_mean"] == f"{np.mean(vacc):.2f}"
        assert row["n_seeds"] == "2"


def test_source_only_methods_select_on_source(tiny_cfg):
    rec = run(tiny_cfg.replace(method="laftr"), 0)
    assert rec.selection_split == "source"
    assert rec.selected_epoch == rec.source_selected_epoch
    assert rec.final is rec.source_selection_final


def test_compare_is_deterministic(tiny_cfg, tmp_path):
    a, _ = compare(tiny_cfg, ["ours-laftr"], [0], out_dir=tmp_path / "a")
    b, _ = compare(tiny_cfg, ["ours-laftr"], [0], out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    assert a == b


def test_sweep_frontier_matches_dominance_oracle(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(method="ours-laftr", train_epochs=2)
    grid = [(wf, wc) for wf in (0.0, 0.5, 1.0) for wc in (0.0, 0.5, 1.0)]
    rows, frontier = sweep(cfg, grid, [0, 1], out_dir=tmp_path)
    assert len(rows) == 18
    assert _read(tmp_path / "pareto.csv") == rows
    pts = [(float(r["target_acc"]), float(r["target_dodds"])) for r in rows]
    for r, p in zip(rows, pts):
        expected = not any(dominates(q, p) for q in pts)
        assert (r["frontier"] == "1") == expected
    for i, p in enumerate(frontier):
        for q in frontier[i + 1:]:
            assert not dominates(p, q) and not dominates(q, p)


def test_single_point_sweep(tiny_cfg):
    rows, frontier = sweep(tiny_cfg.replace(train_epochs=1), [(1.0, 1.0)], [0])
    assert len(rows) == 1 and rows[0]["frontier"] == "1" and len(frontier) == 1
    with pytest.raises(ValueError):
        sweep(tiny_cfg, [], [0])


def test_spearman_of_group_consistency(tiny_cfg):
    data = build_world(tiny_cfg).get(TARGET, "test")
    # constant accuracy across groups: rank correlation undefined
    rep = evaluate(data.y, data.y, data.a, "target", dict(zip(GROUP_NAMES, (0.1, 0.2, 0.3, 0.4))))
    assert np.isnan(consistency_accuracy_spearman(rep))
    pred = data.y.copy()
    for g in range(4):
        idx = np.flatnonzero((data.y == g // 2) & (data.a == g % 2))
        idx = idx[: int(np.ceil(0.2 * g * len(idx)))]
        pred[idx] ^= 1
    rep = evaluate(pred, data.y, data.a, "target", dict(zip(GROUP_NAMES, (0.4, 0.3, 0.2, 0.1))))
    assert consistency_accuracy_spearman(rep) == pytest.approx(1.0)
    rep = evaluate(data.y, data.y, data.a, "target")
    assert np.isnan(consistency_accuracy_spearman(rep))


def test_summarize_std_is_population(tiny_cfg):
    recs = [run(tiny_cfg.replace(method="base", train_epochs=1), s) for s in (0, 1)]
    rows = summarize(recs)
    accs = [100 * r.final["target"].accuracy for r in recs]
    tgt = next(r for r in rows if r["domain"] == "target")
    assert tgt["acc_std"] == f"{abs(accs[0] - accs[1]) / 2:.2f}"


def _poison_at(monkeypatch, epoch):
    import fairshift.harness as h

    real = h.train_epoch

    def poisoned(state, *args):
        rows = real(state, *args)
        if state.epoch - 1 == epoch:
            next(iter(state.net.parameters().values()))[0, 0] = np.nan
        return rows

    monkeypatch.setattr(h, "train_epoch", poisoned)


def test_divergence_stops_training_and_keeps_checkpoint(tiny_cfg, monkeypatch, tmp_path):
    _poison_at(monkeypatch, 1)
    rec = run(tiny_cfg.replace(method="laftr"), 0, out_dir=tmp_path)
    assert rec.diverged_epoch == 1
    assert len(rec.epochs) == 1 and rec.selected_epoch == 0
    assert np.isfinite(rec.final["target"].accuracy)
    assert json.loads((tmp_path / "runs" / rec.config_hash / "report.json").read_text())["diverged_epoch"] == 1


def test_divergence_before_any_checkpoint_is_an_error(tiny_cfg, monkeypatch):
    from fairshift.errors import FairShiftError

    _poison_at(monkeypatch, 0)
    with pytest.raises(FairShiftError, match="diverged"):
        run(tiny_cfg.replace(method="laftr"), 0)
