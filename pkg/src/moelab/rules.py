"""Width-scaling rules engine.

Maps (weight category, parameterization scheme, fan_in) to the triple
(init variance, forward multiplier, Adam LR scale). Asymptotic constants
are fixed to 1; absolute tuning lives in base_lr and the init-scale knob.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Scheme(str, enum.Enum):
    SP = "sp"
    SIMPLE_P = "simplep"
    MU_P = "mup"

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown scheme {text!r}; expected one of {[s.value for s in cls]}"
            ) from None


class WeightCategory(enum.Enum):
    EMBEDDING = "embedding"
    UNEMBEDDING = "unembedding"
    ATTENTION_QKVO = "attention_qkvo"
    FEEDFORWARD_DENSE = "feedforward_dense"
    EXPERT_IN = "expert_in"
    EXPERT_OUT = "expert_out"
    ROUTER = "router"


@dataclass(frozen=True)
class ParamRule:
    """Scaling rule already evaluated at a concrete fan_in."""

    init_variance: float
    forward_multiplier: float
    lr_scale: float

    def __post_init__(self):
        for name in ("init_variance", "forward_multiplier", "lr_scale"):
            v = getattr(self, name)
            if not (v > 0 and v < float("inf")):
                raise ValueError(f"ParamRule.{name} must be positive and finite, got {v}")


# Hidden-style categories: 1/fan_in init in every scheme; LR shrinks with
# fan_in once reparameterized.
_HIDDEN = (
    WeightCategory.ATTENTION_QKVO,
    WeightCategory.FEEDFORWARD_DENSE,
    WeightCategory.EXPERT_IN,
    WeightCategory.EXPERT_OUT,
)


def rule_for(category: WeightCategory, scheme: Scheme, fan_in: int) -> ParamRule:
    """The scaling-rule table entry for one weight category."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    inv = 1.0 / fan_in
    if category is WeightCategory.EMBEDDING:
        return ParamRule(1.0, 1.0, 1.0)
    if category is WeightCategory.UNEMBEDDING:
        if scheme is Scheme.SP:
            return ParamRule(1.0, 1.0, 1.0)
        return ParamRule(1.0, inv, 1.0)
    if category in _HIDDEN:
        if scheme is Scheme.SP:
            return ParamRule(inv, 1.0, 1.0)
        return ParamRule(inv, 1.0, inv)
    if category is WeightCategory.ROUTER:
        if scheme is Scheme.MU_P:
            return ParamRule(1.0, inv, 1.0)
        return ParamRule(inv, 1.0, 1.0)
    raise ValueError(f"unknown category {category!r}")


def effective_lr(base_lr: float, rule: ParamRule) -> float:
    if base_lr <= 0:
        raise ValueError(f"base_lr must be > 0, got {base_lr}")
    return base_lr * rule.lr_scale


def fan_in_of(category: WeightCategory, model_config, layer: int = 1) -> int:
    """Input extent of a weight as applied in the forward pass.

    Embedding rows are width-independent lookups, so their fan_in is 1.
    `layer` selects the first (width -> hidden) or second (hidden -> width)
    matrix for the two-layer feed-forward / expert stacks.
    """
    n = model_config.n
    if category is WeightCategory.EMBEDDING:
        return 1
    if category in (
        WeightCategory.UNEMBEDDING,
        WeightCategory.ATTENTION_QKVO,
        WeightCategory.ROUTER,
        WeightCategory.EXPERT_IN,
    ):
        return n
    if category is WeightCategory.FEEDFORWARD_DENSE:
        return n if layer == 1 else model_config.d_ff
    if category is WeightCategory.EXPERT_OUT:
        return model_config.moe.d_expert
    raise ValueError(f"unknown category {category!r}")


def attention_logit_scale(scheme: Scheme, head_dim: int) -> float:
    """1/d_head once reparameterized, the conventional 1/sqrt(d_head) under SP."""
    if scheme is Scheme.SP:
        return 1.0 / float(head_dim) ** 0.5
    return 1.0 / float(head_dim)


def rules_table(scheme: Scheme, fan_in: int) -> dict:
    """All category rules at one fan_in, as a plain dict for reports."""
    out = {}
    for cat in WeightCategory:
        r = rule_for(cat, scheme, fan_in)
        out[cat.value] = {
            "init_variance": r.init_variance,
            "forward_multiplier": r.forward_multiplier,
            "lr_scale": r.lr_scale,
        }
    return out
