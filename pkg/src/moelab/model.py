"""Decoder-only transformer with scheme-driven initialization.

Pre-norm blocks (causal multi-head attention + feed-forward or MoE),
learned absolute positions, untied unembedding. Every trainable weight
belongs to exactly one param group carrying its scaling rule; forward
multipliers are applied at use-site.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe import MoEConfig, init_moe_weights, load_balance_loss, moe_forward_batch, z_loss
from .rules import ParamRule, Scheme, WeightCategory, attention_logit_scale, rule_for
from .tensor import DiffTensor, RngStream


class Variant(str, enum.Enum):
    DENSE = "dense"
    MOE = "moe"


@dataclass(frozen=True)
class ModelConfig:
    n: int
    depth: int
    vocab_size: int
    seq_len: int
    scheme: Scheme
    base_lr: float
    seed: int
    variant: Variant
    head_dim: int = 64
    moe: MoEConfig | None = None
    moe_every: int = 1
    dtype: str = "float64"
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("n", "depth", "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("ModelConfig.base_lr must be > 0")
        if self.variant is Variant.MOE:
            if self.moe is None:
                raise ValueError("ModelConfig.moe required for the moe variant")
            if self.moe.n != self.n:
                raise ValueError("ModelConfig.moe.n must equal model width n")
        elif self.moe is not None:
            raise ValueError("ModelConfig.moe must be None for the dense variant")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"ModelConfig.dtype must be float64 or float32, got {self.dtype}")
        if self.moe_every < 1:
            raise ValueError("ModelConfig.moe_every must be >= 1")

    @property
    def d_ff(self) -> int:
        return 4 * self.n

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "depth": self.depth,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "scheme": self.scheme.value,
            "base_lr": self.base_lr,
            "seed": self.seed,
            "variant": self.variant.value,
            "head_dim": self.head_dim,
            "moe_every": self.moe_every,
            "dtype": self.dtype,
            "init_scale": self.init_scale,
        }
        if self.moe is not None:
            d["moe"] = {
                "n_experts": self.moe.n_experts,
                "top_k": self.moe.top_k,
                "d_expert": self.moe.d_expert,
                "granularity": self.moe.granularity,
                "gate_style": self.moe.gate_style.value,
                "z_loss_weight": self.moe.z_loss_weight,
                "load_balance_weight": self.moe.load_balance_weight,
            }
        return d


def config_digest(cfg: ModelConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class ParamGroup:
    name: str
    category: WeightCategory
    rule: ParamRule
    fan_in: int
    tensors: list = field(default_factory=list)
    tensor_names: list = field(default_factory=list)

    def add(self, name: str, t: DiffTensor):
        self.tensors.append(t)
        self.tensor_names.append(name)


@dataclass
class ForwardOutput:
    logits: DiffTensor  # (B, T, vocab)
    probes: dict  # stable key -> DiffTensor
    aux_z: DiffTensor | None  # summed over MoE layers, unweighted
    aux_lb: DiffTensor | None
    moe_captures: list | None  # per MoE block, only when capture_moe=True


class _Attention:
    def __init__(self, model: "TransformerModel", i: int):
        cfg = model.cfg
        rng = model.rng.child(f"blk{i}/attn")
        var = model.init_scale2 * model.attn_rule.init_variance
        dt = cfg.np_dtype
        self.wq = T.init_normal((cfg.n, cfg.n), var, rng.child("wq"), dt)
        self.wk = T.init_normal((cfg.n, cfg.n), var, rng.child("wk"), dt)
        self.wv = T.init_normal((cfg.n, cfg.n), var, rng.child("wv"), dt)
        self.wo = T.init_normal((cfg.n, cfg.n), var, rng.child("wo"), dt)
        self.n_heads = model.n_heads
        self.head_dim = model.head_dim_used
        self.logit_scale = attention_logit_scale(cfg.scheme, self.head_dim)

    def __call__(self, x: DiffTensor, mask: np.ndarray) -> DiffTensor:
        b, t, n = x.values.shape
        h, dh = self.n_heads, self.head_dim

        def heads(w):
            return T.transpose(T.reshape(T.matmul(x, w), (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.logit_scale)
        probs = T.softmax(T.add_const(scores, mask), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, n))
        return T.matmul(ctx, self.wo)


class _DenseFF:
    def __init__(self, model: "TransformerModel", i: int):
        cfg = model.cfg
        rng = model.rng.child(f"blk{i}/ff")
        dt = cfg.np_dtype
        self.w1 = T.init_normal(
            (cfg.n, cfg.d_ff), model.init_scale2 * model.ff_in_rule.init_variance, rng.child("w1"), dt
        )
        self.w2 = T.init_normal(
            (cfg.d_ff, cfg.n), model.init_scale2 * model.ff_out_rule.init_variance, rng.child("w2"), dt
        )

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return T.matmul(T.relu(T.matmul(x, self.w1)), self.w2)


class _Norm:
    def __init__(self, n: int, dtype):
        self.gain = T.leaf(np.ones(n, dtype=dtype))
        self.bias = T.leaf(np.zeros(n, dtype=dtype))

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return T.layer_norm(x, self.gain, self.bias)


class TransformerModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        # Width not divisible by head_dim collapses to a single full-width head.
        if cfg.n % cfg.head_dim == 0:
            self.head_dim_used = cfg.head_dim
            self.head_dim_clamped = False
        else:
            self.head_dim_used = cfg.n
            self.head_dim_clamped = True
        self.n_heads = cfg.n // self.head_dim_used
        self.rng = RngStream(cfg.seed, "init")
        self.init_scale2 = cfg.init_scale**2
        dt = cfg.np_dtype

        self.embed_rule = rule_for(WeightCategory.EMBEDDING, cfg.scheme, 1)
        self.unembed_rule = rule_for(WeightCategory.UNEMBEDDING, cfg.scheme, cfg.n)
        self.attn_rule = rule_for(WeightCategory.ATTENTION_QKVO, cfg.scheme, cfg.n)
        self.ff_in_rule = rule_for(WeightCategory.FEEDFORWARD_DENSE, cfg.scheme, cfg.n)
        self.ff_out_rule = rule_for(WeightCategory.FEEDFORWARD_DENSE, cfg.scheme, cfg.d_ff)

        ev = self.init_scale2 * self.embed_rule.init_variance
        self.tok_embed = T.init_normal((cfg.vocab_size, cfg.n), ev, self.rng.child("embed/tok"), dt)
        self.pos_embed = T.init_normal((cfg.seq_len, cfg.n), ev, self.rng.child("embed/pos"), dt)

        self.blocks = []
        for i in range(cfg.depth):
            blk = {
                "ln1": _Norm(cfg.n, dt),
                "attn": _Attention(self, i),
                "ln2": _Norm(cfg.n, dt),
            }
            if cfg.variant is Variant.MOE and i % cfg.moe_every == 0:
                blk["moe"] = init_moe_weights(
                    cfg.moe, cfg.scheme, self.rng.child(f"blk{i}/moe"), dt, cfg.init_scale
                )
            else:
                blk["ff"] = _DenseFF(self, i)
            self.blocks.append(blk)

        self.final_norm = _Norm(cfg.n, dt)
        self.unembed = T.init_normal(
            (cfg.n, cfg.vocab_size),
            self.init_scale2 * self.unembed_rule.init_variance,
            self.rng.child("unembed"),
            dt,
        )
        self._mask = _causal_mask(cfg.seq_len, dt)
        self.param_groups = self._build_groups()

    def _build_groups(self):
        cfg = self.cfg
        groups = {
            "embedding": ParamGroup("embedding", WeightCategory.EMBEDDING, self.embed_rule, 1),
            "norm": ParamGroup("norm", WeightCategory.EMBEDDING, self.embed_rule, 1),
            "attention": ParamGroup("attention", WeightCategory.ATTENTION_QKVO, self.attn_rule, cfg.n),
            "unembedding": ParamGroup("unembedding", WeightCategory.UNEMBEDDING, self.unembed_rule, cfg.n),
        }
        groups["embedding"].add("embed.tok", self.tok_embed)
        groups["embedding"].add("embed.pos", self.pos_embed)
        groups["unembedding"].add("unembed", self.unembed)
        dense_blocks = [i for i, b in enumerate(self.blocks) if "ff" in b]
        moe_blocks = [i for i, b in enumerate(self.blocks) if "moe" in b]
        if dense_blocks:
            groups["ff_in"] = ParamGroup(
                "ff_in", WeightCategory.FEEDFORWARD_DENSE, self.ff_in_rule, cfg.n
            )
            groups["ff_out"] = ParamGroup(
                "ff_out", WeightCategory.FEEDFORWARD_DENSE, self.ff_out_rule, cfg.d_ff
            )
        if moe_blocks:
            moe = self.blocks[moe_blocks[0]]["moe"]
            groups["router"] = ParamGroup("router", WeightCategory.ROUTER, moe.router_rule, cfg.n)
            groups["expert_in"] = ParamGroup(
                "expert_in", WeightCategory.EXPERT_IN, moe.expert_in_rule, cfg.n
            )
            groups["expert_out"] = ParamGroup(
                "expert_out", WeightCategory.EXPERT_OUT, moe.expert_out_rule, cfg.moe.d_expert
            )
        for i, blk in enumerate(self.blocks):
            for ln_name in ("ln1", "ln2"):
                groups["norm"].add(f"blk{i}.{ln_name}.gain", blk[ln_name].gain)
                groups["norm"].add(f"blk{i}.{ln_name}.bias", blk[ln_name].bias)
            attn = blk["attn"]
            for wname in ("wq", "wk", "wv", "wo"):
                groups["attention"].add(f"blk{i}.attn.{wname}", getattr(attn, wname))
            if "ff" in blk:
                groups["ff_in"].add(f"blk{i}.ff.w1", blk["ff"].w1)
                groups["ff_out"].add(f"blk{i}.ff.w2", blk["ff"].w2)
            else:
                moe = blk["moe"]
                groups["router"].add(f"blk{i}.moe.router", moe.router)
                groups["expert_in"].add(f"blk{i}.moe.expert_in", moe.expert_in)
                groups["expert_out"].add(f"blk{i}.moe.expert_out", moe.expert_out)
        groups["norm"].add("final_norm.gain", self.final_norm.gain)
        groups["norm"].add("final_norm.bias", self.final_norm.bias)
        return list(groups.values())

    def parameters(self):
        for g in self.param_groups:
            yield from zip(g.tensor_names, g.tensors)

    def param_count(self) -> int:
        return sum(t.values.size for _, t in self.parameters())

    def forward(self, tokens: np.ndarray, capture_moe: bool = False) -> ForwardOutput:
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
        b, t = tokens.shape
        if t > cfg.seq_len:
            raise ValueError(f"sequence length {t} exceeds configured seq_len {cfg.seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")

        probes = {}
        x = T.add(T.embedding(self.tok_embed, tokens), T.embedding(self.pos_embed, np.arange(t)))
        probes["embed"] = x
        mask = self._mask[:t, :t]
        aux_z = None
        aux_lb = None
        captures = [] if capture_moe else None
        for i, blk in enumerate(self.blocks):
            attn_out = blk["attn"](blk["ln1"](x), mask)
            probes[f"blk{i}.attn"] = attn_out
            x = T.add(x, attn_out)
            h = blk["ln2"](x)
            if "ff" in blk:
                ff_out = blk["ff"](h)
            else:
                flat = T.reshape(h, (b * t, cfg.n))
                y, cap = moe_forward_batch(blk["moe"], flat, cfg.moe)
                ff_out = T.reshape(y, (b, t, cfg.n))
                z = z_loss(cap.gate.logits)
                lb = load_balance_loss(cap.gate, cfg.moe.n_experts)
                aux_z = z if aux_z is None else T.add(aux_z, z)
                aux_lb = lb if aux_lb is None else T.add(aux_lb, lb)
                if capture_moe:
                    captures.append(cap)
            probes[f"blk{i}.ff"] = ff_out
            x = T.add(x, ff_out)
        x = self.final_norm(x)
        probes["final"] = x
        logits = T.matmul(x, self.unembed)
        if self.unembed_rule.forward_multiplier != 1.0:
            logits = T.scale(logits, self.unembed_rule.forward_multiplier)
        probes["logits"] = logits
        return ForwardOutput(
            logits=logits, probes=probes, aux_z=aux_z, aux_lb=aux_lb, moe_captures=captures
        )


def _causal_mask(t: int, dtype) -> np.ndarray:
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def build_model(cfg: ModelConfig):
    """Construct a model and its param groups from a config."""
    model = TransformerModel(cfg)
    return model, model.param_groups


def total_loss(out: ForwardOutput, targets: np.ndarray, moe_cfg: MoEConfig | None) -> tuple:
    """Cross-entropy plus weighted auxiliary losses -> (loss, ce, z, lb)."""
    b, t, v = out.logits.values.shape
    ce = T.cross_entropy_logits(T.reshape(out.logits, (b * t, v)), targets.reshape(-1))
    loss = ce
    z_val = 0.0
    lb_val = 0.0
    if out.aux_z is not None:
        loss = T.add(loss, T.scale(out.aux_z, moe_cfg.z_loss_weight))
        z_val = float(out.aux_z.values)
    if out.aux_lb is not None:
        loss = T.add(loss, T.scale(out.aux_lb, moe_cfg.load_balance_weight))
        lb_val = float(out.aux_lb.values)
    return loss, float(ce.values), z_val, lb_val
