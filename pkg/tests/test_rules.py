import pytest

from moelab.moe import MoEConfig
from moelab.model import ModelConfig, Variant
from moelab.rules import (
    ParamRule,
    Scheme,
    WeightCategory,
    attention_logit_scale,
    effective_lr,
    fan_in_of,
    rule_for,
    rules_table,
)

C = WeightCategory

# (init_variance, forward_multiplier, lr_scale) per category and scheme,
# written out in full; `inv` stands for 1/fan_in.
def expected_rule(cat, scheme, fan_in):
    inv = 1.0 / fan_in
    table = {
        C.EMBEDDING: {"sp": (1, 1, 1), "simplep": (1, 1, 1), "mup": (1, 1, 1)},
        C.UNEMBEDDING: {"sp": (1, 1, 1), "simplep": (1, inv, 1), "mup": (1, inv, 1)},
        C.ATTENTION_QKVO: {"sp": (inv, 1, 1), "simplep": (inv, 1, inv), "mup": (inv, 1, inv)},
        C.FEEDFORWARD_DENSE: {"sp": (inv, 1, 1), "simplep": (inv, 1, inv), "mup": (inv, 1, inv)},
        C.EXPERT_IN: {"sp": (inv, 1, 1), "simplep": (inv, 1, inv), "mup": (inv, 1, inv)},
        C.EXPERT_OUT: {"sp": (inv, 1, 1), "simplep": (inv, 1, inv), "mup": (inv, 1, inv)},
        C.ROUTER: {"sp": (inv, 1, 1), "simplep": (inv, 1, 1), "mup": (1, inv, 1)},
    }
    return table[cat][scheme.value]


@pytest.mark.parametrize("fan_in", [64, 256, 1024])
@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("cat", list(C))
def test_exhaustive_table(cat, scheme, fan_in):
    r = rule_for(cat, scheme, fan_in)
    iv, fm, lr = expected_rule(cat, scheme, fan_in)
    assert r.init_variance == iv
    assert r.forward_multiplier == fm
    assert r.lr_scale == lr


def test_spot_values():
    r = rule_for(C.ROUTER, Scheme.MU_P, 256)
    assert (r.init_variance, r.forward_multiplier, r.lr_scale) == (1.0, 1 / 256, 1.0)
    r = rule_for(C.EXPERT_IN, Scheme.SIMPLE_P, 256)
    assert (r.init_variance, r.forward_multiplier, r.lr_scale) == (1 / 256, 1.0, 1 / 256)
    r = rule_for(C.EMBEDDING, Scheme.SP, 1024)
    assert (r.init_variance, r.forward_multiplier, r.lr_scale) == (1.0, 1.0, 1.0)
    r = rule_for(C.UNEMBEDDING, Scheme.MU_P, 512)
    assert (r.init_variance, r.forward_multiplier, r.lr_scale) == (1.0, 1 / 512, 1.0)


def test_sp_is_trivial_scaling():
    for cat in C:
        for fan_in in (64, 256, 1024):
            r = rule_for(cat, Scheme.SP, fan_in)
            assert r.lr_scale == 1.0
            assert r.forward_multiplier == 1.0


def test_simplep_and_mup_differ_only_on_router():
    for cat in C:
        for fan_in in (64, 256, 1024):
            a = rule_for(cat, Scheme.SIMPLE_P, fan_in)
            b = rule_for(cat, Scheme.MU_P, fan_in)
            if cat is C.ROUTER:
                assert a != b
            else:
                assert a == b


def test_lr_scale_halves_when_fan_in_doubles():
    for cat in (C.ATTENTION_QKVO, C.FEEDFORWARD_DENSE, C.EXPERT_IN, C.EXPERT_OUT):
        for fan_in in (64, 128, 256, 512):
            a = rule_for(cat, Scheme.MU_P, fan_in)
            b = rule_for(cat, Scheme.MU_P, 2 * fan_in)
            assert b.lr_scale == a.lr_scale / 2


def test_fan_in_precondition():
    with pytest.raises(ValueError):
        rule_for(C.EMBEDDING, Scheme.SP, 0)


def test_effective_lr():
    assert effective_lr(1e-3, ParamRule(1.0, 1.0, 1.0)) == 1e-3
    assert effective_lr(1e-3, ParamRule(1.0, 1.0, 1 / 256)) == 3.90625e-06
    attn = rule_for(C.ATTENTION_QKVO, Scheme.MU_P, 128)
    assert effective_lr(2e-2, attn) == 1.5625e-4
    with pytest.raises(ValueError):
        effective_lr(0.0, ParamRule(1.0, 1.0, 1.0))


def _cfg(n, granularity=1):
    moe = MoEConfig.baseline(n=n, n_experts=8, top_k=1)
    if granularity > 1:
        from moelab.moe import apply_granularity

        moe = apply_granularity(moe, granularity)
    return ModelConfig(
        n=n,
        depth=1,
        vocab_size=257,
        seq_len=8,
        scheme=Scheme.MU_P,
        base_lr=0.01,
        seed=0,
        variant=Variant.MOE,
        moe=moe,
    )


def test_fan_in_of():
    cfg = _cfg(256)
    assert fan_in_of(C.EMBEDDING, cfg) == 1
    assert fan_in_of(C.UNEMBEDDING, cfg) == 256
    assert fan_in_of(C.ATTENTION_QKVO, cfg) == 256
    assert fan_in_of(C.ROUTER, cfg) == 256
    assert fan_in_of(C.FEEDFORWARD_DENSE, cfg, layer=1) == 256
    assert fan_in_of(C.FEEDFORWARD_DENSE, cfg, layer=2) == 1024
    assert fan_in_of(C.EXPERT_IN, cfg) == 256
    cfg = _cfg(128)
    assert fan_in_of(C.EXPERT_OUT, cfg) == 512  # 4n at granularity 1
    cfg = _cfg(128, granularity=4)
    assert fan_in_of(C.EXPERT_OUT, cfg) == 128  # 4n/G


def test_attention_logit_scale():
    assert attention_logit_scale(Scheme.SP, 64) == 1 / 8
    assert attention_logit_scale(Scheme.MU_P, 64) == 1 / 64
    assert attention_logit_scale(Scheme.SIMPLE_P, 64) == 1 / 64


def test_scheme_parse():
    assert Scheme.parse("MUP") is Scheme.MU_P
    assert Scheme.parse(" sp ") is Scheme.SP
    with pytest.raises(ValueError):
        Scheme.parse("mu-p")


def test_rules_table_shape():
    t = rules_table(Scheme.MU_P, 256)
    assert set(t.keys()) == {c.value for c in C}
    assert t["router"]["forward_multiplier"] == 1 / 256


def test_param_rule_rejects_nonpositive():
    with pytest.raises(ValueError):
        ParamRule(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ParamRule(1.0, 1.0, float("inf"))
