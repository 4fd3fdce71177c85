"""Switch-style mixture-of-experts layer.

Router -> top-k gate -> per-expert two-layer ReLU MLPs, plus the two
auxiliary router losses and the granularity transformation. Only selected
experts are computed; unselected experts receive exactly zero gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rules import ParamRule, Scheme, WeightCategory, rule_for
from .tensor import DiffTensor, RngStream


class GateStyle(str, enum.Enum):
    # softmax over the k selected logits (the layer's defining formula)
    TOPK_THEN_SOFTMAX = "topk_then_softmax"
    # full softmax first, gate with the selected probabilities, no renorm
    SOFTMAX_THEN_TOPK = "softmax_then_topk"

    @classmethod
    def parse(cls, text: str) -> "GateStyle":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown gate_style {text!r}") from None


@dataclass(frozen=True)
class MoEConfig:
    n: int
    n_experts: int
    top_k: int
    d_expert: int
    granularity: int = 1
    gate_style: GateStyle = GateStyle.TOPK_THEN_SOFTMAX
    z_loss_weight: float = 0.001
    load_balance_weight: float = 0.01

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} out of range for {self.n_experts} experts")
        if self.d_expert < 1:
            raise ValueError(f"d_expert must be >= 1, got {self.d_expert}")
        if self.granularity < 1:
            raise ValueError(f"granularity must be >= 1, got {self.granularity}")

    @classmethod
    def baseline(cls, n: int, n_experts: int = 8, top_k: int = 1, **kw) -> "MoEConfig":
        """Standard layer at granularity 1: per-expert hidden size 4n."""
        return cls(n=n, n_experts=n_experts, top_k=top_k, d_expert=4 * n, **kw)


def apply_granularity(base: MoEConfig, granularity: int) -> MoEConfig:
    """Split experts by a factor G: count and top-k scale up, width scales down."""
    if granularity < 1:
        raise ValueError(f"granularity must be >= 1, got {granularity}")
    if base.granularity != 1:
        raise ValueError("apply_granularity expects a granularity-1 base config")
    if base.d_expert % granularity != 0:
        raise ValueError(
            f"d_expert={base.d_expert} not divisible by granularity {granularity}"
        )
    return replace(
        base,
        n_experts=base.n_experts * granularity,
        d_expert=base.d_expert // granularity,
        top_k=base.top_k * granularity,
        granularity=granularity,
    )


def expert_param_count(cfg: MoEConfig) -> int:
    """Total E1 + E2 parameters; exactly invariant under apply_granularity."""
    return cfg.n_experts * 2 * cfg.d_expert * cfg.n


@dataclass
class MoEWeights:
    """Router and stacked expert weights, with the rules they were built under.

    Values are stored raw; forward multipliers are applied at use-site.
    """

    router: DiffTensor  # (n_experts, n)
    expert_in: DiffTensor  # (n_experts, d_expert, n)
    expert_out: DiffTensor  # (n_experts, n, d_expert)
    router_rule: ParamRule
    expert_in_rule: ParamRule
    expert_out_rule: ParamRule

    @property
    def router_multiplier(self) -> float:
        return self.router_rule.forward_multiplier


def init_moe_weights(
    cfg: MoEConfig, scheme: Scheme, rng: RngStream, dtype=np.float64, init_scale: float = 1.0
) -> MoEWeights:
    r_rule = rule_for(WeightCategory.ROUTER, scheme, cfg.n)
    e1_rule = rule_for(WeightCategory.EXPERT_IN, scheme, cfg.n)
    e2_rule = rule_for(WeightCategory.EXPERT_OUT, scheme, cfg.d_expert)
    s2 = init_scale**2
    return MoEWeights(
        router=T.init_normal(
            (cfg.n_experts, cfg.n), s2 * r_rule.init_variance, rng.child("router"), dtype
        ),
        expert_in=T.init_normal(
            (cfg.n_experts, cfg.d_expert, cfg.n),
            s2 * e1_rule.init_variance,
            rng.child("expert_in"),
            dtype,
        ),
        expert_out=T.init_normal(
            (cfg.n_experts, cfg.n, cfg.d_expert),
            s2 * e2_rule.init_variance,
            rng.child("expert_out"),
            dtype,
        ),
        router_rule=r_rule,
        expert_in_rule=e1_rule,
        expert_out_rule=e2_rule,
    )


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


@dataclass
class GateDecision:
    """One token's routing outcome (values only, no graph)."""

    indices: tuple  # top_k expert ids, by descending logit
    weights: np.ndarray  # gate weight per selected expert
    full_probs: np.ndarray  # softmax over all experts


def _softmax_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gate(router_logits, k: int, style: GateStyle) -> GateDecision:
    """Route one token given its router logits."""
    vals = router_logits.values if isinstance(router_logits, DiffTensor) else np.asarray(router_logits)
    vals = vals.reshape(-1)
    if not 1 <= k <= vals.shape[0]:
        raise ValueError(f"k={k} out of range for {vals.shape[0]} experts")
    picks = T.top_k(vals, k)
    idx = tuple(i for i, _ in picks)
    full = _softmax_np(vals)
    if style is GateStyle.TOPK_THEN_SOFTMAX:
        w = _softmax_np(np.array([v for _, v in picks]))
    else:
        w = full[list(idx)]
    return GateDecision(indices=idx, weights=w, full_probs=full)


@dataclass
class BatchGate:
    """Routing for a flat batch of tokens, kept inside the graph."""

    indices: np.ndarray  # (N, k) selected expert ids
    weights: DiffTensor  # (N, k) gate weights
    full_probs: DiffTensor  # (N, n_experts)
    logits: DiffTensor  # (N, n_experts) multiplier-applied router logits


def batch_gate(logits: DiffTensor, k: int, style: GateStyle) -> BatchGate:
    n_experts = logits.values.shape[-1]
    if not 1 <= k <= n_experts:
        raise ValueError(f"k={k} out of range for {n_experts} experts")
    idx = T.top_k_rows(logits.values, k)
    full = T.softmax(logits, axis=-1)
    if style is GateStyle.TOPK_THEN_SOFTMAX:
        weights = T.softmax(T.take_along(logits, idx), axis=-1)
    else:
        weights = T.take_along(full, idx)
    return BatchGate(indices=idx, weights=weights, full_probs=full, logits=logits)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ExpertCapture:
    expert: int
    token_rows: np.ndarray
    hidden_pre: DiffTensor  # (rows, d_expert) pre-ReLU expert hidden
    out: DiffTensor  # (rows, n) expert output before gating


@dataclass
class MoECapture:
    gate: BatchGate
    per_expert: list
    output: DiffTensor  # (N, n) combined layer output


def moe_forward_batch(weights: MoEWeights, x: DiffTensor, cfg: MoEConfig):
    """MoE layer over a flat (N, n) token batch -> ((N, n) output, capture)."""
    if x.values.ndim != 2 or x.values.shape[1] != cfg.n:
        raise ValueError(f"expected (N, {cfg.n}) input, got {x.values.shape}")
    n_tokens = x.values.shape[0]
    raw = T.matmul(x, T.transpose(weights.router, (1, 0)))
    logits = T.scale(raw, weights.router_multiplier)
    g = batch_gate(logits, cfg.top_k, cfg.gate_style)

    contributions = []
    captures = []
    for e in range(cfg.n_experts):
        rows, slots = np.nonzero(g.indices == e)
        if rows.size == 0:
            continue
        xe = T.gather_rows(x, rows, unique=True)
        w1 = T.select_index(weights.expert_in, e)  # (d_expert, n)
        w2 = T.select_index(weights.expert_out, e)  # (n, d_expert)
        hidden_pre = T.matmul(xe, T.transpose(w1, (1, 0)))
        out = T.matmul(T.relu(hidden_pre), T.transpose(w2, (1, 0)))
        we = T.reshape(T.gather_pairs(g.weights, rows, slots), (rows.size, 1))
        contributions.append((rows, T.mul(out, we)))
        captures.append(ExpertCapture(e, rows, hidden_pre, out))
    y = T.combine_rows(n_tokens, contributions)
    return y, MoECapture(gate=g, per_expert=captures, output=y)


def moe_forward(weights: MoEWeights, x: DiffTensor, cfg: MoEConfig):
    """Single-token MoE forward: (n,) vector in, ((n,) vector, GateDecision) out."""
    if x.values.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.values.shape}")
    y2d, cap = moe_forward_batch(weights, T.reshape(x, (1, -1)), cfg)
    decision = GateDecision(
        indices=tuple(int(i) for i in cap.gate.indices[0]),
        weights=cap.gate.weights.values[0].copy(),
        full_probs=cap.gate.full_probs.values[0].copy(),
    )
    return T.reshape(y2d, (-1,)), decision


# ---------------------------------------------------------------------------
# auxiliary losses
# ---------------------------------------------------------------------------


def load_balance_loss(gate_batch: BatchGate, n_experts: int) -> DiffTensor:
    """Switch-style dispatch balance: n_experts * sum_e f_e * P_e.

    f_e is the fraction of tokens whose top-1 expert is e (a constant);
    the loss is differentiable through the mean routing probabilities P_e.
    """
    n_tokens = gate_batch.indices.shape[0]
    if n_tokens == 0:
        raise ValueError("load_balance_loss needs a nonempty batch")
    top1 = gate_batch.indices[:, 0]
    f = np.bincount(top1, minlength=n_experts).astype(
        gate_batch.full_probs.values.dtype
    ) / n_tokens
    p_mean = T.tmean(gate_batch.full_probs, axis=0)  # (n_experts,)
    return T.scale(T.tsum(T.mul(p_mean, T.leaf(f))), float(n_experts))


def z_loss(router_logits: DiffTensor) -> DiffTensor:
    """Mean squared log-sum-exp of the router logits over a (N, E) batch."""
    if router_logits.values.ndim != 2 or router_logits.values.shape[0] == 0:
        raise ValueError("z_loss expects a nonempty (N, n_experts) batch")
    return T.tmean(T.square(T.logsumexp(router_logits, axis=-1)))
