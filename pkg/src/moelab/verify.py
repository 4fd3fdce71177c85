"""Empirical width-scaling verification.

Measures "typical entry size" exponents: a vector v is treated as
Theta(n^a) when ||v||^2 / len(v) = Theta(n^{2a}), so the exponent a is the
least-squares slope of 0.5*log(value) against log(width). Three checks:

- coord_check: activation scales at init and activation/logit changes
  after one optimizer step, across a width ladder (the three feature-
  learning desiderata).
- gradient_scale_check: gradient scales at the expert outputs, the expert
  hidden pre-activations, and the router logits.
- covariance_lemma_check: per-expert activation/output-gradient inner
  products c_e, their per-coordinate covariance, and the gate-coefficient
  gradient norm, at t=0 and after one optimizer step (t=1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Variant, build_model, total_loss
from .tensor import DiffTensor, RngStream, backward
from .train import OptState, adamw_step


def scale_of(v) -> float:
    """Sum of squares over length: the squared typical entry size."""
    vals = v.values if isinstance(v, DiffTensor) else np.asarray(v)
    if vals.size == 0:
        raise ValueError("scale_of needs a nonempty vector")
    return float(np.sum(vals.astype(np.float64, copy=False) ** 2) / vals.size)


@dataclass(frozen=True)
class ScaleSample:
    width: int
    quantity_key: str
    value: float
    seed: int
    t: int  # 0 = at init, 1 = after one optimizer step


@dataclass
class ExponentFit:
    quantity_key: str
    slope: float
    stderr: float
    n_points: int
    per_seed_slopes: list
    n_degenerate: int = 0
    inconclusive: bool = False


def fit_exponent(samples) -> ExponentFit:
    """Per-seed least-squares slope of 0.5*log(value) on log(width), averaged.

    Zero/non-finite values are excluded and counted as degenerate; a seed
    fit needs >= 3 surviving widths or the whole fit is inconclusive.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("fit_exponent needs samples")
    key = samples[0].quantity_key
    widths = sorted({s.width for s in samples})
    if len(widths) < 3:
        raise ValueError(f"fit_exponent needs >= 3 distinct widths, got {len(widths)}")
    by_seed = {}
    n_degenerate = 0
    for s in samples:
        if s.value > 0 and math.isfinite(s.value):
            by_seed.setdefault(s.seed, []).append(s)
        else:
            n_degenerate += 1
    slopes = []
    n_points = 0
    inconclusive = False
    for seed in sorted(by_seed):
        pts = by_seed[seed]
        if len({p.width for p in pts}) < 3:
            inconclusive = True
            continue
        x = np.log([p.width for p in pts])
        y = 0.5 * np.log([p.value for p in pts])
        slopes.append(float(np.polyfit(x, y, 1)[0]))
        n_points += len(pts)
    if not slopes:
        return ExponentFit(key, math.nan, math.nan, 0, [], n_degenerate, True)
    stderr = float(np.std(slopes, ddof=1) / math.sqrt(len(slopes))) if len(slopes) > 1 else 0.0
    return ExponentFit(
        key, float(np.mean(slopes)), stderr, n_points, slopes, n_degenerate, inconclusive
    )


@dataclass
class CheckReport:
    kind: str
    scheme: str
    widths: list
    seeds: list
    tolerances: dict  # verdict name -> tolerance used
    fits: dict = field(default_factory=dict)  # quantity_key -> ExponentFit
    verdicts: dict = field(default_factory=dict)  # name -> {"passed": bool, "detail": str}
    samples: list = field(default_factory=list)
    degenerate_notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())


# ---------------------------------------------------------------------------
# probe execution
# ---------------------------------------------------------------------------


def probe_batch(cfg: ModelConfig, seed: int, batch: int, seq: int):
    tokens = RngStream(seed, "probe/tokens").integers(0, cfg.vocab_size, (batch, seq))
    targets = RngStream(seed, "probe/targets").integers(0, cfg.vocab_size, (batch, seq))
    return tokens, targets


def _probe_scales(out) -> dict:
    return {k: scale_of(v.values) for k, v in out.probes.items()}


def coord_check(make_cfg, widths, seeds, tol: float, batch: int = 4, seq: int = 64) -> CheckReport:
    """Desiderata check over a width ladder.

    make_cfg(width, seed) -> ModelConfig. Records activation scales at
    init (t=0) and the change of every probe after one optimizer step at
    base_lr (t=1), fits exponents, and issues the three verdicts.
    """
    widths = list(widths)
    seeds = list(seeds)
    if len(widths) < 3:
        raise ValueError(f"coord_check needs >= 3 widths, got {len(widths)}")
    if len(seeds) < 3:
        raise ValueError(f"coord_check needs >= 3 seeds, got {len(seeds)}")
    samples = []
    notes = []
    scheme = None
    for width in widths:
        for seed in seeds:
            cfg = make_cfg(width, seed)
            scheme = cfg.scheme.value
            model, groups = build_model(cfg)
            tokens, targets = probe_batch(cfg, seed, batch, seq)
            out = model.forward(tokens)
            for k, v in _probe_scales(out).items():
                samples.append(ScaleSample(width, k, v, seed, 0))
            t0_values = {k: v.values.copy() for k, v in out.probes.items()}
            loss, _, _, _ = total_loss(out, targets, cfg.moe)
            backward(loss)
            del out, loss  # free the graph (and activation grads) before stepping
            adamw_step(groups, OptState(), cfg.base_lr)
            out = model.forward(tokens)
            for k, before in t0_values.items():
                v = scale_of(out.probes[k].values - before)
                if not math.isfinite(v):
                    notes.append(f"width={width} seed={seed} delta.{k} non-finite")
                samples.append(ScaleSample(width, f"delta.{k}", v, seed, 1))
            del out, model, groups, t0_values
    report = CheckReport(
        kind="coord_check",
        scheme=scheme,
        widths=widths,
        seeds=seeds,
        tolerances={"hidden_at_init": tol, "logits_at_init": tol, "feature_learning": tol},
        samples=samples,
        degenerate_notes=notes,
    )
    keys = sorted({s.quantity_key for s in samples})
    for k in keys:
        report.fits[k] = fit_exponent([s for s in samples if s.quantity_key == k])
    hidden_keys = [k for k in keys if not k.startswith("delta.") and k != "logits"]
    delta_keys = [k for k in keys if k.startswith("delta.")]
    report.verdicts["hidden_at_init"] = _verdict_all(report.fits, hidden_keys, 0.0, tol)
    report.verdicts["logits_at_init"] = _verdict_one_sided(report.fits["logits"], tol)
    report.verdicts["feature_learning"] = _verdict_all(report.fits, delta_keys, 0.0, tol)
    return report


def _verdict_all(fits, keys, expected: float, tol: float) -> dict:
    worst = None
    ok = True
    for k in keys:
        f = fits[k]
        if f.inconclusive:
            return {"passed": False, "detail": f"{k} inconclusive"}
        dev = abs(f.slope - expected)
        if worst is None or dev > worst[1]:
            worst = (k, dev)
        ok &= dev <= tol
    return {
        "passed": bool(ok),
        "detail": f"worst {worst[0]}: |a - {expected:g}| = {worst[1]:.3f} (tol {tol:g})",
    }


def _verdict_one_sided(fit: ExponentFit, tol: float) -> dict:
    if fit.inconclusive:
        return {"passed": False, "detail": "inconclusive"}
    return {
        "passed": bool(fit.slope <= tol),
        "detail": f"a = {fit.slope:.3f} (must be <= {tol:g})",
    }


def gradient_scale_check(make_cfg, widths, seeds, tol: float = 0.25, batch: int = 4, seq: int = 64) -> CheckReport:
    """Gradient-scale exponents of the MoE internals at init.

    Expected: expert outputs and expert hidden pre-activations carry
    1/width gradients (slope -1); the router logits carry width-
    independent gradients (slope 0).
    """
    widths = list(widths)
    seeds = list(seeds)
    if len(widths) < 3 or len(seeds) < 3:
        raise ValueError("gradient_scale_check needs >= 3 widths and >= 3 seeds")
    samples = []
    notes = []
    scheme = None
    for width in widths:
        for seed in seeds:
            cfg = make_cfg(width, seed)
            if cfg.variant is not Variant.MOE:
                raise ValueError("gradient_scale_check requires the moe variant")
            scheme = cfg.scheme.value
            model, groups = build_model(cfg)
            tokens, targets = probe_batch(cfg, seed, batch, seq)
            out = model.forward(tokens, capture_moe=True)
            loss, _, _, _ = total_loss(out, targets, cfg.moe)
            backward(loss)
            samples.extend(_moe_gradient_samples(out.moe_captures, width, seed, 0, notes))
            del out, loss, model, groups
    report = CheckReport(
        kind="gradient_scale",
        scheme=scheme,
        widths=widths,
        seeds=seeds,
        tolerances={"grad_expert_out": tol, "grad_expert_hidden": tol, "grad_router_logits": tol},
        samples=samples,
        degenerate_notes=notes,
    )
    for k in sorted({s.quantity_key for s in samples}):
        report.fits[k] = fit_exponent([s for s in samples if s.quantity_key == k])
    report.verdicts["grad_expert_out"] = _verdict_all(report.fits, ["grad_expert_out"], -1.0, tol)
    report.verdicts["grad_expert_hidden"] = _verdict_all(
        report.fits, ["grad_expert_hidden"], -1.0, tol
    )
    report.verdicts["grad_router_logits"] = _verdict_all(
        report.fits, ["grad_router_logits"], 0.0, tol
    )
    return report


def _moe_gradient_samples(captures, width, seed, t, notes):
    out_scales = []
    hidden_scales = []
    router_scales = []
    for cap in captures:
        for ec in cap.per_expert:
            if ec.out.grad is None:
                notes.append(f"width={width} seed={seed} expert {ec.expert} unreached")
                continue
            out_scales.append(np.mean(np.sum(ec.out.grad.astype(np.float64, copy=False) ** 2, axis=1)) / ec.out.grad.shape[1])
            hidden_scales.append(
                np.mean(np.sum(ec.hidden_pre.grad.astype(np.float64, copy=False) ** 2, axis=1))
                / ec.hidden_pre.grad.shape[1]
            )
        g = cap.gate.logits.grad
        router_scales.append(np.mean(np.sum(g.astype(np.float64, copy=False) ** 2, axis=1)) / g.shape[1])
    return [
        ScaleSample(width, "grad_expert_out", float(np.mean(out_scales)), seed, t),
        ScaleSample(width, "grad_expert_hidden", float(np.mean(hidden_scales)), seed, t),
        ScaleSample(width, "grad_router_logits", float(np.mean(router_scales)), seed, t),
    ]


def covariance_lemma_check(
    make_cfg, widths, seeds, corr_tol: float = 0.25, cov_tol: float = 0.3, batch: int = 4, seq: int = 64
) -> CheckReport:
    """Expert-activation/output-gradient coupling across widths, t=0 and t=1.

    Per active expert and token: c = e^T delta (expected width-independent),
    the per-coordinate covariance mean_j(e_j*delta_j) - mean(e)*mean(delta)
    (expected 1/width), and the norm over selected experts of c (expected
    width-independent).
    """
    widths = list(widths)
    seeds = list(seeds)
    if len(widths) < 3 or len(seeds) < 3:
        raise ValueError("covariance_lemma_check needs >= 3 widths and >= 3 seeds")
    samples = []
    notes = []
    scheme = None
    for width in widths:
        for seed in seeds:
            cfg = make_cfg(width, seed)
            if cfg.variant is not Variant.MOE:
                raise ValueError("covariance_lemma_check requires the moe variant")
            scheme = cfg.scheme.value
            model, groups = build_model(cfg)
            tokens, targets = probe_batch(cfg, seed, batch, seq)
            for t in (0, 1):
                out = model.forward(tokens, capture_moe=True)
                loss, _, _, _ = total_loss(out, targets, cfg.moe)
                backward(loss)
                samples.extend(_covariance_samples(out.moe_captures, width, seed, t, notes))
                del out, loss  # free the graph before the step / next pass
                if t == 0:
                    adamw_step(groups, OptState(), cfg.base_lr)
            del model, groups
    report = CheckReport(
        kind="covariance_lemma",
        scheme=scheme,
        widths=widths,
        seeds=seeds,
        tolerances={
            "expert_grad_corr": corr_tol,
            "router_grad_norm": corr_tol,
            "cov_per_coord": cov_tol,
        },
        samples=samples,
        degenerate_notes=notes,
    )
    for k in sorted({s.quantity_key for s in samples}):
        for t in (0, 1):
            sub = [s for s in samples if s.quantity_key == k and s.t == t]
            report.fits[f"{k}@t{t}"] = fit_exponent(sub)
    for name, expected in (
        ("expert_grad_corr", 0.0),
        ("router_grad_norm", 0.0),
        ("cov_per_coord", -1.0),
    ):
        tol = report.tolerances[name]
        report.verdicts[name] = _verdict_all(
            report.fits, [f"{name}@t0", f"{name}@t1"], expected, tol
        )
    return report


def _covariance_samples(captures, width, seed, t, notes):
    c_sq = []
    cov_sq = []
    norm_sq_by_token = []
    for cap in captures:
        delta = cap.output.grad.astype(np.float64, copy=False)  # (N, n) grad wrt MoE layer output
        n = delta.shape[1]
        token_norm_sq = np.zeros(delta.shape[0])
        for ec in cap.per_expert:
            e_vals = ec.out.values.astype(np.float64, copy=False)
            d_rows = delta[ec.token_rows]
            c = np.sum(e_vals * d_rows, axis=1)
            cov = c / n - e_vals.mean(axis=1) * d_rows.mean(axis=1)
            c_sq.extend(c**2)
            cov_sq.extend(cov**2)
            token_norm_sq[ec.token_rows] += c**2
        norm_sq_by_token.append(token_norm_sq)
    if not c_sq:
        notes.append(f"width={width} seed={seed} t={t}: no active experts")
        return []
    return [
        ScaleSample(width, "expert_grad_corr", float(np.mean(c_sq)), seed, t),
        ScaleSample(width, "cov_per_coord", float(np.mean(cov_sq)), seed, t),
        ScaleSample(width, "router_grad_norm", float(np.mean(np.concatenate(norm_sq_by_token))), seed, t),
    ]


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def report_to_dict(r: CheckReport) -> dict:
    return {
        "kind": r.kind,
        "scheme": r.scheme,
        "widths": list(r.widths),
        "seeds": list(r.seeds),
        "tolerances": dict(r.tolerances),
        "fits": {
            k: {
                "quantity_key": f.quantity_key,
                "slope": f.slope,
                "stderr": f.stderr,
                "n_points": f.n_points,
                "per_seed_slopes": list(f.per_seed_slopes),
                "n_degenerate": f.n_degenerate,
                "inconclusive": f.inconclusive,
            }
            for k, f in r.fits.items()
        },
        "verdicts": r.verdicts,
        "samples": [
            {"width": s.width, "quantity_key": s.quantity_key, "value": s.value, "seed": s.seed, "t": s.t}
            for s in r.samples
        ],
        "degenerate_notes": list(r.degenerate_notes),
    }


def report_from_dict(d: dict) -> CheckReport:
    r = CheckReport(
        kind=d["kind"],
        scheme=d["scheme"],
        widths=list(d["widths"]),
        seeds=list(d["seeds"]),
        tolerances=dict(d["tolerances"]),
        verdicts={k: dict(v) for k, v in d["verdicts"].items()},
        degenerate_notes=list(d["degenerate_notes"]),
    )
    r.fits = {k: ExponentFit(**f) for k, f in d["fits"].items()}
    r.samples = [ScaleSample(**s) for s in d["samples"]]
    return r


def write_report(r: CheckReport, out_dir, name: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(report_to_dict(r), indent=2))
    lines = ["width,seed,t,quantity_key,value"]
    for s in r.samples:
        lines.append(f"{s.width},{s.seed},{s.t},{s.quantity_key},{s.value!r}")
    (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
    return out / f"{name}.json"
