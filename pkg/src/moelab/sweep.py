"""Learning-rate sweep grids with append-only persistence and analysis.

A sweep is a full grid over (scheme x width x n_experts x granularity x
base LR x seed). Every run becomes one record row; diverged runs are
first-class records with a null loss. Completed cells are skipped on
rerun, so interrupted sweeps resume for free.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .model import ModelConfig, Variant, config_digest
from .moe import GateStyle, MoEConfig, apply_granularity, expert_param_count
from .rules import Scheme
from .train import train


@dataclass(frozen=True)
class SweepSpec:
    out_dir: str
    variant: Variant = Variant.MOE
    schemes: tuple = (Scheme.MU_P,)
    widths: tuple = (64, 128, 256)
    lr_log2: tuple = tuple(range(-12, -3))
    seeds: tuple = (0, 1)
    tokens_per_run: int = 2_000_000
    depth: int = 2
    seq_len: int = 128
    batch_size: int = 32
    n_experts_list: tuple = (8,)
    granularities: tuple = (1,)
    top_k: int = 1
    gate_style: GateStyle = GateStyle.TOPK_THEN_SOFTMAX
    dtype: str = "float64"
    vocab_size: int = 257
    moe_every: int = 1
    head_dim: int = 64
    trace_every: int = 20

    def __post_init__(self):
        diffs = np.diff(self.lr_log2)
        if len(self.lr_log2) < 2 or np.any(diffs <= 0) or not np.allclose(diffs, diffs[0]):
            raise ValueError("lr_log2 grid must be strictly increasing with uniform spacing")
        if self.variant is Variant.DENSE and (self.n_experts_list != (8,) or self.granularities != (1,)):
            if len(self.n_experts_list) > 1 or len(self.granularities) > 1:
                raise ValueError("dense sweeps cannot vary n_experts or granularity")

    @property
    def grid_spacing_log2(self) -> float:
        return float(self.lr_log2[1] - self.lr_log2[0])

    def cells(self) -> list:
        out = []
        moe_axes = (
            [(e, g) for e in self.n_experts_list for g in self.granularities]
            if self.variant is Variant.MOE
            else [(0, 1)]
        )
        for scheme in self.schemes:
            for width in self.widths:
                for n_experts, gran in moe_axes:
                    for lr_log2 in self.lr_log2:
                        for seed in self.seeds:
                            out.append(self.cell(scheme, width, n_experts, gran, lr_log2, seed))
        return out


    def cell(self, scheme, width, n_experts, gran, lr_log2, seed) -> "Cell":
        moe = None
        if self.variant is Variant.MOE:
            moe = MoEConfig.baseline(
                n=width, n_experts=n_experts, top_k=self.top_k, gate_style=self.gate_style
            )
            moe = apply_granularity(moe, gran) if gran > 1 else moe
        cfg = ModelConfig(
            n=width,
            depth=self.depth,
            vocab_size=self.vocab_size,
            seq_len=self.seq_len,
            scheme=scheme,
            base_lr=2.0**lr_log2,
            seed=seed,
            variant=self.variant,
            head_dim=self.head_dim,
            moe=moe,
            moe_every=self.moe_every,
            dtype=self.dtype,
        )
        return Cell(cfg=cfg, base_lr_log2=float(lr_log2), seed=seed)


@dataclass(frozen=True)
class Cell:
    cfg: ModelConfig
    base_lr_log2: float
    seed: int

    @property
    def cell_id(self) -> str:
        payload = json.dumps(
            {"cfg": self.cfg.to_dict(), "lr_log2": self.base_lr_log2}, sort_keys=True
        ).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


RECORD_FIELDS = [
    "cell_id", "variant", "scheme", "width", "depth", "n_experts", "top_k", "d_expert",
    "granularity", "gate_style", "base_lr_log2", "seed", "tokens", "batch_size", "seq_len",
    "dtype", "final_loss", "diverged", "steps_run", "wall_time", "config_hash",
    "trace_digest", "trace_path",
]


@dataclass
class SweepRecord:
    cell_id: str
    variant: str
    scheme: str
    width: int
    depth: int
    n_experts: int
    top_k: int
    d_expert: int
    granularity: int
    gate_style: str
    base_lr_log2: float
    seed: int
    tokens: int
    batch_size: int
    seq_len: int
    dtype: str
    final_loss: float | None
    diverged: bool
    steps_run: int
    wall_time: float
    config_hash: str
    trace_digest: str
    trace_path: str

    def to_row(self) -> list:
        return [
            self.cell_id, self.variant, self.scheme, self.width, self.depth, self.n_experts,
            self.top_k, self.d_expert, self.granularity, self.gate_style, self.base_lr_log2,
            self.seed, self.tokens, self.batch_size, self.seq_len, self.dtype,
            "" if self.final_loss is None else repr(self.final_loss),
            "true" if self.diverged else "false",
            self.steps_run, f"{self.wall_time:.2f}", self.config_hash, self.trace_digest,
            self.trace_path,
        ]

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        return cls(
            cell_id=row["cell_id"],
            variant=row["variant"],
            scheme=row["scheme"],
            width=int(row["width"]),
            depth=int(row["depth"]),
            n_experts=int(row["n_experts"]),
            top_k=int(row["top_k"]),
            d_expert=int(row["d_expert"]),
            granularity=int(row["granularity"]),
            gate_style=row["gate_style"],
            base_lr_log2=float(row["base_lr_log2"]),
            seed=int(row["seed"]),
            tokens=int(row["tokens"]),
            batch_size=int(row["batch_size"]),
            seq_len=int(row["seq_len"]),
            dtype=row["dtype"],
            final_loss=None if row["final_loss"] == "" else float(row["final_loss"]),
            diverged=row["diverged"] == "true",
            steps_run=int(row["steps_run"]),
            wall_time=float(row["wall_time"]),
            config_hash=row["config_hash"],
            trace_digest=row["trace_digest"],
            trace_path=row["trace_path"],
        )


def records_path(out_dir) -> Path:
    return Path(out_dir) / "records.csv"


def load_records(out_dir) -> list:
    path = records_path(out_dir)
    if not path.exists():
        return []
    with path.open() as f:
        return [SweepRecord.from_row(row) for row in csv.DictReader(f)]


def append_record(out_dir, record: SweepRecord):
    path = records_path(out_dir)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(RECORD_FIELDS)
        w.writerow(record.to_row())


def run_cell(cell: Cell, corpus: Corpus, spec: SweepSpec) -> SweepRecord:
    cfg = cell.cfg
    result = train(
        cfg, corpus, spec.tokens_per_run, batch_size=spec.batch_size, trace_every=spec.trace_every
    )
    trace_dir = Path(spec.out_dir) / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    trace_path = trace_dir / f"{cell.cell_id}.csv"
    with trace_path.open("w", newline="") as f:
        csv.writer(f).writerows(result.trace_rows())
    digest = hashlib.sha256(trace_path.read_bytes()).hexdigest()[:16]
    moe = cfg.moe
    return SweepRecord(
        cell_id=cell.cell_id,
        variant=cfg.variant.value,
        scheme=cfg.scheme.value,
        width=cfg.n,
        depth=cfg.depth,
        n_experts=moe.n_experts if moe else 0,
        top_k=moe.top_k if moe else 0,
        d_expert=moe.d_expert if moe else 0,
        granularity=moe.granularity if moe else 1,
        gate_style=moe.gate_style.value if moe else "",
        base_lr_log2=cell.base_lr_log2,
        seed=cell.seed,
        tokens=spec.tokens_per_run,
        batch_size=spec.batch_size,
        seq_len=cfg.seq_len,
        dtype=cfg.dtype,
        final_loss=result.final_loss,
        diverged=result.diverged,
        steps_run=result.steps_run,
        wall_time=result.wall_time,
        config_hash=result.config_hash,
        trace_digest=digest,
        trace_path=str(trace_path.relative_to(spec.out_dir)),
    )


_WORKER_STATE: dict = {}


def _worker_init(corpus_tokens, corpus_source, spec):
    _WORKER_STATE["corpus"] = Corpus(corpus_tokens, corpus_source)
    _WORKER_STATE["spec"] = spec


def _worker_run(cell: Cell) -> SweepRecord:
    return run_cell(cell, _WORKER_STATE["corpus"], _WORKER_STATE["spec"])


def run_sweep(spec: SweepSpec, corpus: Corpus, jobs: int = 1, force: bool = False, log=None) -> list:
    """Execute all missing cells of a sweep; returns the full record set.

    Records append to out_dir/records.csv as cells finish (single writer);
    completed cells are skipped unless `force`, which starts the record
    file over.
    """
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if force and records_path(out_dir).exists():
        records_path(out_dir).unlink()
    existing = {r.cell_id: r for r in load_records(out_dir)}
    planned = spec.cells()
    todo = [c for c in planned if c.cell_id not in existing]
    if log:
        log(f"sweep: {len(planned)} cells planned, {len(existing)} done, {len(todo)} to run")
    t0 = time.time()
    if jobs > 1 and todo:
        import multiprocessing as mp

        with mp.Pool(jobs, initializer=_worker_init, initargs=(corpus.tokens, corpus.source, spec)) as pool:
            for i, rec in enumerate(pool.imap(_worker_run, todo)):
                append_record(out_dir, rec)
                existing[rec.cell_id] = rec
                if log:
                    log(_progress_line(i, len(todo), rec, t0))
    else:
        for i, cell in enumerate(todo):
            rec = run_cell(cell, corpus, spec)
            append_record(out_dir, rec)
            existing[rec.cell_id] = rec
            if log:
                log(_progress_line(i, len(todo), rec, t0))
    return [existing[c.cell_id] for c in planned]


def _progress_line(i, total, rec, t0):
    loss = "diverged" if rec.diverged else f"{rec.final_loss:.4f}"
    return (
        f"[{i + 1}/{total} {time.time() - t0:.0f}s] {rec.scheme} w={rec.width} "
        f"E={rec.n_experts} G={rec.granularity} lr=2^{rec.base_lr_log2:g} seed={rec.seed}: {loss}"
    )


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


GROUP_KEYS = {
    "width": lambda r: r.width,
    "scheme_width": lambda r: (r.scheme, r.width),
    "n_experts": lambda r: r.n_experts,
    "granularity": lambda r: r.granularity,
}


@dataclass
class GroupOptimum:
    group: object
    best_lr_log2: float | None
    best_loss: float | None
    n_diverged: int
    inconclusive: bool


def optimal_lr(records, group_key: str) -> dict:
    """Per group: the LR with the lowest seed-mean loss (ties go to the
    lower LR); diverged runs are excluded from means and counted."""
    key_fn = GROUP_KEYS[group_key]
    groups: dict = {}
    for r in records:
        groups.setdefault(key_fn(r), []).append(r)
    out = {}
    for group, recs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        by_lr: dict = {}
        n_diverged = 0
        for r in recs:
            if r.diverged:
                n_diverged += 1
            else:
                by_lr.setdefault(r.base_lr_log2, []).append(r.final_loss)
        means = {lr: float(np.mean(v)) for lr, v in by_lr.items()}
        if len(means) < 2:
            out[group] = GroupOptimum(group, None, None, n_diverged, True)
            continue
        best_lr = min(sorted(means), key=lambda lr: (means[lr], lr))
        out[group] = GroupOptimum(group, best_lr, means[best_lr], n_diverged, False)
    return out


def transfer_gap(optima: dict, grid_spacing_log2: float) -> float:
    """Largest pairwise shift of the optimum LR, in grid steps."""
    lrs = [o.best_lr_log2 for o in optima.values() if not o.inconclusive]
    if len(lrs) < 2:
        raise ValueError("transfer_gap needs >= 2 group optima")
    return (max(lrs) - min(lrs)) / grid_spacing_log2


REPORT_KINDS = ("width_transfer", "experts_transfer", "granularity_transfer", "dense_baseline")


def _require_coverage(records, axis_name, key_fn, expected):
    present = {key_fn(r) for r in records}
    missing = [v for v in expected if v not in present]
    if missing:
        raise ValueError(f"report missing {axis_name} cells: {missing}")


def emit_report(records, kind: str, out_dir, grid_spacing_log2: float | None = None) -> dict:
    """Write plot-ready CSV + JSON summary for one report kind; returns the summary."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        raise ValueError("no records to report on")
    if grid_spacing_log2 is None:
        lrs = sorted({r.base_lr_log2 for r in records})
        grid_spacing_log2 = lrs[1] - lrs[0] if len(lrs) > 1 else 1.0

    if kind in ("width_transfer", "dense_baseline"):
        want_variant = Variant.MOE.value if kind == "width_transfer" else Variant.DENSE.value
        recs = [r for r in records if r.variant == want_variant]
        if not recs:
            raise ValueError(f"report {kind}: no {want_variant} records present")
        summary = {"kind": kind, "grid_spacing_log2": grid_spacing_log2, "schemes": {}}
        group_fn = lambda r: f"{r.scheme}/w{r.width}"
        for scheme in sorted({r.scheme for r in recs}):
            sub = [r for r in recs if r.scheme == scheme]
            _require_coverage(sub, "width", lambda r: r.width, sorted({r.width for r in recs}))
            optima = optimal_lr(sub, "width")
            gap = transfer_gap(optima, grid_spacing_log2)
            summary["schemes"][scheme] = {
                "optima": {
                    str(g): {
                        "best_lr_log2": o.best_lr_log2,
                        "best_loss": o.best_loss,
                        "n_diverged": o.n_diverged,
                        "inconclusive": o.inconclusive,
                    }
                    for g, o in optima.items()
                },
                "transfer_gap_steps": gap,
            }
    elif kind == "experts_transfer":
        recs = [r for r in records if r.variant == Variant.MOE.value]
        expected = sorted({r.n_experts for r in recs})
        _require_coverage(recs, "n_experts", lambda r: r.n_experts, expected)
        optima = optimal_lr(recs, "n_experts")
        gap = transfer_gap(optima, grid_spacing_log2)
        counts = sorted(optima)
        best = [optima[c].best_loss for c in counts]
        sems = []
        for c in counts:
            losses = [
                r.final_loss
                for r in recs
                if r.n_experts == c and not r.diverged and r.base_lr_log2 == optima[c].best_lr_log2
            ]
            sems.append(float(np.std(losses, ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else 0.0)
        trend_ok = all(
            best[i + 1] <= best[i] + sems[i + 1] + sems[i] for i in range(len(best) - 1)
        )
        summary = {
            "kind": kind,
            "grid_spacing_log2": grid_spacing_log2,
            "optima": {str(c): optima[c].best_lr_log2 for c in counts},
            "best_losses": {str(c): optima[c].best_loss for c in counts},
            "best_loss_sems": {str(c): s for c, s in zip(counts, sems)},
            "transfer_gap_steps": gap,
            "more_experts_not_worse_within_sem": bool(trend_ok),
        }
        group_fn = lambda r: f"experts{r.n_experts}"
    else:  # granularity_transfer
        recs = [r for r in records if r.variant == Variant.MOE.value]
        expected = sorted({r.granularity for r in recs})
        _require_coverage(recs, "granularity", lambda r: r.granularity, expected)
        optima = optimal_lr(recs, "granularity")
        gap = transfer_gap(optima, grid_spacing_log2)
        param_counts = {}
        for r in recs:
            moe = MoEConfig(
                n=r.width, n_experts=r.n_experts, top_k=r.top_k, d_expert=r.d_expert,
                granularity=r.granularity,
            )
            param_counts.setdefault(r.granularity, set()).add(expert_param_count(moe))
        flat = {g: sorted(v) for g, v in param_counts.items()}
        invariant = len({v[0] for v in flat.values()}) == 1 and all(len(v) == 1 for v in flat.values())
        summary = {
            "kind": kind,
            "grid_spacing_log2": grid_spacing_log2,
            "optima": {str(g): optima[g].best_lr_log2 for g in sorted(optima)},
            "observed_gap_steps": gap,  # observational: no pass/fail on granularity
            "expert_param_counts": {str(g): v for g, v in flat.items()},
            "param_count_invariant": bool(invariant),
        }
        group_fn = lambda r: f"G{r.granularity}"

    rows_src = recs
    with (out_dir / f"plotdata_{kind}.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group_key", "base_lr_log2", "seed", "final_loss", "diverged"])
        for r in sorted(rows_src, key=lambda r: (group_fn(r), r.base_lr_log2, r.seed)):
            w.writerow(
                [
                    group_fn(r), r.base_lr_log2, r.seed,
                    "" if r.final_loss is None else repr(r.final_loss),
                    "true" if r.diverged else "false",
                ]
            )
    agg_rows = []
    for key in sorted({group_fn(r) for r in rows_src}):
        sub = [r for r in rows_src if group_fn(r) == key]
        for lr in sorted({r.base_lr_log2 for r in sub}):
            cell = [r for r in sub if r.base_lr_log2 == lr]
            alive = [r.final_loss for r in cell if not r.diverged]
            mean = float(np.mean(alive)) if alive else ""
            sem = (
                float(np.std(alive, ddof=1) / math.sqrt(len(alive)))
                if len(alive) > 1
                else (0.0 if alive else "")
            )
            agg_rows.append([key, lr, mean, sem, sum(r.diverged for r in cell)])
    with (out_dir / f"report_{kind}.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "base_lr_log2", "mean_loss", "sem", "n_diverged"])
        w.writerows(agg_rows)
    (out_dir / f"summary_{kind}.json").write_text(json.dumps(summary, indent=2))
    return summary
