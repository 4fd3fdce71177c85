import csv
import math
from pathlib import Path

import numpy as np
import pytest

from moelab.corpus import synthetic_corpus
from moelab.model import Variant
from moelab.moe import GateStyle
from moelab.rules import Scheme
from moelab.sweep import (
    Cell,
    GroupOptimum,
    SweepRecord,
    SweepSpec,
    emit_report,
    load_records,
    optimal_lr,
    records_path,
    run_cell,
    run_sweep,
    transfer_gap,
)


def tiny_spec(out_dir, **kw):
    defaults = dict(
        out_dir=str(out_dir),
        variant=Variant.MOE,
        schemes=(Scheme.MU_P,),
        widths=(8, 16),
        lr_log2=(-7.0, -6.0, -5.0),
        seeds=(0,),
        tokens_per_run=8_000,
        depth=1,
        seq_len=16,
        batch_size=4,
        n_experts_list=(2,),
        vocab_size=257,
        trace_every=25,
    )
    defaults.update(kw)
    return SweepSpec(**defaults)


def fake_record(scheme="mup", width=64, lr=-7.0, seed=0, loss=3.0, diverged=False,
                variant="moe", n_experts=8, granularity=1, d_expert=None, top_k=1):
    return SweepRecord(
        cell_id=f"{scheme}-{width}-{n_experts}-{granularity}-{lr}-{seed}",
        variant=variant, scheme=scheme, width=width, depth=2,
        n_experts=n_experts, top_k=top_k,
        d_expert=(4 * width // granularity) if d_expert is None else d_expert,
        granularity=granularity, gate_style="topk_then_softmax",
        base_lr_log2=lr, seed=seed, tokens=1000, batch_size=4, seq_len=16, dtype="float64",
        final_loss=None if diverged else loss, diverged=diverged, steps_run=10,
        wall_time=0.1, config_hash="h", trace_digest="d", trace_path="t.csv",
    )


# ---------------------------------------------------------------------------
# spec / cells
# ---------------------------------------------------------------------------


def test_cell_count_is_grid_product(tmp_path):
    spec = tiny_spec(tmp_path, widths=(8, 16, 24), lr_log2=tuple(range(-9, -2)), seeds=(0, 1))
    assert len(spec.cells()) == 3 * 7 * 2


def test_lr_grid_must_be_uniform(tmp_path):
    with pytest.raises(ValueError):
        tiny_spec(tmp_path, lr_log2=(-8.0, -7.0, -5.0))
    with pytest.raises(ValueError):
        tiny_spec(tmp_path, lr_log2=(-5.0, -6.0))


def test_cell_ids_unique_and_stable(tmp_path):
    spec = tiny_spec(tmp_path)
    ids = [c.cell_id for c in spec.cells()]
    assert len(set(ids)) == len(ids)
    assert ids == [c.cell_id for c in tiny_spec(tmp_path).cells()]


def test_granularity_axis_builds_configs(tmp_path):
    spec = tiny_spec(tmp_path, widths=(16,), granularities=(1, 2), n_experts_list=(2,))
    cells = spec.cells()
    by_g = {c.cfg.moe.granularity: c.cfg.moe for c in cells}
    assert by_g[1].n_experts == 2 and by_g[1].d_expert == 64 and by_g[1].top_k == 1
    assert by_g[2].n_experts == 4 and by_g[2].d_expert == 32 and by_g[2].top_k == 2


# ---------------------------------------------------------------------------
# execution + persistence
# ---------------------------------------------------------------------------


def test_run_sweep_persists_and_is_idempotent(tmp_path):
    spec = tiny_spec(tmp_path)
    corpus = synthetic_corpus(0, 40_000)
    records = run_sweep(spec, corpus)
    assert len(records) == len(spec.cells())
    assert records_path(tmp_path).exists()
    on_disk = load_records(tmp_path)
    assert len(on_disk) == len(records)
    assert all(not r.diverged and r.final_loss is not None for r in records)
    # trace files exist and are referenced relatively
    for r in records:
        assert (tmp_path / r.trace_path).exists()

    again = run_sweep(spec, corpus)  # nothing new to run
    assert [r.cell_id for r in again] == [r.cell_id for r in records]
    assert len(load_records(tmp_path)) == len(records)


def test_run_sweep_rerun_is_bit_identical(tmp_path):
    corpus = synthetic_corpus(0, 40_000)
    r1 = run_sweep(tiny_spec(tmp_path / "a"), corpus)
    r2 = run_sweep(tiny_spec(tmp_path / "b"), corpus)
    for a, b in zip(r1, r2):
        assert a.cell_id == b.cell_id
        assert a.final_loss == b.final_loss
        assert a.trace_digest == b.trace_digest


def test_run_cell_records_divergence(tmp_path):
    spec = tiny_spec(tmp_path, dtype="float32")
    cell = spec.cell(Scheme.MU_P, 8, 2, 1, 40.0, 0)
    corpus = synthetic_corpus(0, 40_000)
    rec = run_cell(cell, corpus, spec)
    assert rec.diverged
    assert rec.final_loss is None
    # round-trip through the CSV layer
    from moelab.sweep import RECORD_FIELDS
    trip = SweepRecord.from_row(dict(zip(RECORD_FIELDS, [str(x) for x in rec.to_row()])))
    assert trip.diverged and trip.final_loss is None and trip.cell_id == rec.cell_id


def test_records_csv_roundtrip(tmp_path):
    from moelab.sweep import append_record

    rec = fake_record(loss=2.5)
    append_record(tmp_path, rec)
    rec2 = fake_record(lr=-6.0, diverged=True)
    append_record(tmp_path, rec2)
    back = load_records(tmp_path)
    assert back[0] == rec
    assert back[1] == rec2


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def test_optimal_lr_argmin_and_seed_mean():
    records = [
        fake_record(lr=-9.0, loss=3.0), fake_record(lr=-7.0, loss=2.5), fake_record(lr=-5.0, loss=2.7),
    ]
    opt = optimal_lr(records, "width")
    assert opt[64].best_lr_log2 == -7.0
    assert opt[64].best_loss == 2.5


def test_optimal_lr_tie_breaks_to_lower_lr():
    records = [fake_record(lr=-8.0, loss=2.0), fake_record(lr=-6.0, loss=2.0)]
    opt = optimal_lr(records, "width")
    assert opt[64].best_lr_log2 == -8.0


def test_optimal_lr_excludes_diverged_and_counts_them():
    records = [
        fake_record(lr=-8.0, loss=3.0),
        fake_record(lr=-6.0, loss=2.0),
        fake_record(lr=-4.0, diverged=True),
    ]
    opt = optimal_lr(records, "width")
    assert opt[64].best_lr_log2 == -6.0
    assert opt[64].n_diverged == 1


def test_optimal_lr_all_diverged_is_inconclusive():
    records = [fake_record(lr=-8.0, diverged=True), fake_record(lr=-6.0, diverged=True)]
    opt = optimal_lr(records, "width")
    assert opt[64].inconclusive


def test_transfer_gap_values():
    mk = lambda lr: GroupOptimum("g", lr, 2.0, 0, False)
    assert transfer_gap({64: mk(-7.0), 128: mk(-7.0)}, 1.0) == 0.0
    assert transfer_gap({64: mk(-7.0), 128: mk(-5.0)}, 1.0) == 2.0
    assert transfer_gap({64: mk(-7.0), 128: mk(-6.0)}, 0.5) == 2.0
    with pytest.raises(ValueError):
        transfer_gap({64: mk(-7.0)}, 1.0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def width_grid_records(scheme, optima_by_width, lrs=(-9.0, -8.0, -7.0, -6.0, -5.0)):
    records = []
    for width, best in optima_by_width.items():
        for lr in lrs:
            for seed in (0, 1):
                loss = 2.0 + (lr - best) ** 2 * 0.1 + 0.001 * seed
                records.append(fake_record(scheme=scheme, width=width, lr=lr, seed=seed, loss=loss))
    return records


def test_emit_width_transfer_report(tmp_path):
    records = width_grid_records("mup", {64: -7.0, 128: -7.0, 256: -7.0})
    records += width_grid_records("sp", {64: -6.0, 128: -7.0, 256: -9.0})
    summary = emit_report(records, "width_transfer", tmp_path, grid_spacing_log2=1.0)
    assert summary["schemes"]["mup"]["transfer_gap_steps"] == 0.0
    assert summary["schemes"]["sp"]["transfer_gap_steps"] == 3.0
    plot = (tmp_path / "plotdata_width_transfer.csv").read_text().splitlines()
    assert plot[0] == "group_key,base_lr_log2,seed,final_loss,diverged"
    agg = list(csv.DictReader((tmp_path / "report_width_transfer.csv").open()))
    assert {"group", "base_lr_log2", "mean_loss", "sem", "n_diverged"} == set(agg[0].keys())
    assert (tmp_path / "summary_width_transfer.json").exists()


def test_emit_experts_report_trend(tmp_path):
    records = []
    for n_experts, best_loss in ((4, 2.4), (8, 2.2), (16, 2.1)):
        for lr in (-8.0, -7.0, -6.0):
            for seed in (0, 1):
                loss = best_loss + 0.1 * (lr != -7.0) + 0.001 * seed
                records.append(fake_record(n_experts=n_experts, lr=lr, seed=seed, loss=loss))
    summary = emit_report(records, "experts_transfer", tmp_path, 1.0)
    assert summary["transfer_gap_steps"] == 0.0
    assert summary["more_experts_not_worse_within_sem"] is True


def test_emit_granularity_report_param_invariance(tmp_path):
    records = []
    for g in (1, 2, 4):
        for lr in (-8.0, -7.0, -6.0):
            records.append(fake_record(width=128, granularity=g, n_experts=8 * g,
                                       top_k=g, lr=lr, loss=2.0 + 0.1 * abs(lr + 7)))
    summary = emit_report(records, "granularity_transfer", tmp_path, 1.0)
    assert summary["param_count_invariant"] is True
    assert "observed_gap_steps" in summary


def test_emit_report_missing_axis_names_cells(tmp_path):
    records = width_grid_records("mup", {64: -7.0})
    records += [fake_record(scheme="sp", width=128, lr=-7.0, loss=2.0),
                fake_record(scheme="sp", width=128, lr=-6.0, loss=2.1)]
    with pytest.raises(ValueError, match="missing width cells"):
        emit_report(records, "width_transfer", tmp_path, 1.0)


def test_emit_report_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        emit_report([fake_record()], "nope", tmp_path)


def test_analysis_pure_from_persisted_records(tmp_path):
    spec = tiny_spec(tmp_path)
    corpus = synthetic_corpus(0, 40_000)
    in_memory = run_sweep(spec, corpus)
    reloaded = load_records(tmp_path)
    assert optimal_lr(in_memory, "width").keys() == optimal_lr(reloaded, "width").keys()
    for k in optimal_lr(in_memory, "width"):
        a = optimal_lr(in_memory, "width")[k]
        b = optimal_lr(reloaded, "width")[k]
        assert a.best_lr_log2 == b.best_lr_log2 and a.best_loss == b.best_loss
