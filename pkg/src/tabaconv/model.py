"""Encoder network: summed input embeddings, attention-augmented 1-D
convolution blocks, and output heads.

Every forward function is pure: it takes a named-parameter dict plus a
ModelConfig and builds a fresh autodiff graph. Channel layout follows the
additive design: categorical lookups, continuous projections, the timestamp
embedding block and a fixed sinusoidal positional encoding are all summed
into one [B, T, d_model] stream, so d_model is independent of column count.

Each encoder block computes

    y = pointwise_mix(concat[conv(x), multi_head_attention(x)])

followed by residual + layer norm and a position-wise feed-forward sublayer
(residual + layer norm again, BERT-style post-norm).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .schema import TS_COMPONENT_NAMES, FeatureSchema
from .tensor import Tensor

FROZEN_PREFIXES = ("embed.", "time.")  # excluded from finetune updates


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    kernel_size: int = 3
    n_blocks: int = 1
    attn_channels: int | None = None  # defaults to d_model // 2
    conv_channels: int | None = None  # defaults to d_model - attn_channels
    ffn_mult: int = 4
    dropout: float = 0.1
    activity_reg_lambda: float = 1e-4
    conv_padding: str = "zero"

    def __post_init__(self):
        if self.attn_channels is None:
            self.attn_channels = self.d_model // 2
        if self.conv_channels is None:
            self.conv_channels = self.d_model - self.attn_channels
        if self.attn_channels + self.conv_channels != self.d_model:
            raise ConfigError(
                f"attn_channels {self.attn_channels} + conv_channels {self.conv_channels} "
                f"must equal d_model {self.d_model}"
            )
        if self.attn_channels % self.n_heads != 0:
            raise ConfigError(
                f"attn_channels {self.attn_channels} not divisible by n_heads {self.n_heads}"
            )
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for sinusoidal encoding, got {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")

    @property
    def d_head(self) -> int:
        return self.attn_channels // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    """Stacked window samples ready for a forward pass.

    For pretraining, cat/cont hold the masked inputs while *_targets hold
    the original values and *_mask say which cells the loss covers. For
    classification, masks/targets are None and labels is a float (B,) array.
    """

    cat: np.ndarray            # [B, T, C_cat] int32
    cont: np.ndarray           # [B, T, C_cont] float
    ts_components: np.ndarray  # [B, T, 8] int32
    ts_floats: np.ndarray      # [B, T, 4] float
    cat_mask: np.ndarray | None = None     # [B, T, C_cat] bool
    cont_mask: np.ndarray | None = None    # [B, T, C_cont] bool
    cat_targets: np.ndarray | None = None  # [B, T, C_cat] int32 (originals)
    cont_targets: np.ndarray | None = None
    labels: np.ndarray | None = None       # [B] float

    @property
    def size(self) -> int:
        return self.cat.shape[0]

    @property
    def window(self) -> int:
        return self.cat.shape[1]


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def init_params(schema: FeatureSchema, cfg: ModelConfig, seed: int = 0,
                head: str = "pretrain") -> dict[str, Tensor]:
    """Seeded parameter dict; uniform(+-1/sqrt(fan_in)) weights, zero biases.

    head: "pretrain" adds per-field reconstruction heads, "classify" adds the
    binary classifier, "none" adds neither.
    """
    if head not in ("pretrain", "classify", "none"):
        raise ConfigError(f"unknown head kind {head!r}")
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    params: dict[str, Tensor] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    for f in schema.categorical_fields:
        params[f"embed.cat.{f.name}"] = uniform((f.vocab_size(), d), d)
    for f in schema.continuous_fields:
        params[f"embed.cont.{f.name}.w"] = uniform((d,), 1)
        params[f"embed.cont.{f.name}.b"] = zeros((d,))

    sizes = schema.component_sizes()
    for name in TS_COMPONENT_NAMES:
        params[f"time.comp.{name}"] = uniform((sizes[name], d), d)
    params["time.net.w1"] = uniform((4, d), 4)
    params["time.net.b1"] = zeros((d,))
    params["time.net.w2"] = uniform((d, d), d)
    params["time.net.b2"] = zeros((d,))

    for i in range(cfg.n_blocks):
        p = f"block{i}"
        params[f"{p}.conv.w"] = uniform((cfg.kernel_size, d, cfg.conv_channels), cfg.kernel_size * d)
        params[f"{p}.conv.b"] = zeros((cfg.conv_channels,))
        params[f"{p}.attn.wq"] = uniform((d, cfg.attn_channels), d)
        params[f"{p}.attn.wk"] = uniform((d, cfg.attn_channels), d)
        params[f"{p}.attn.wv"] = uniform((d, cfg.attn_channels), d)
        params[f"{p}.attn.wmix"] = uniform((cfg.attn_channels, cfg.attn_channels), cfg.attn_channels)
        params[f"{p}.mix.w"] = uniform((1, d, d), d)
        params[f"{p}.mix.b"] = zeros((d,))
        params[f"{p}.ln1.g"] = ones((d,))
        params[f"{p}.ln1.b"] = zeros((d,))
        hidden = cfg.ffn_mult * d
        params[f"{p}.ffn.w1"] = uniform((d, hidden), d)
        params[f"{p}.ffn.b1"] = zeros((hidden,))
        params[f"{p}.ffn.w2"] = uniform((hidden, d), hidden)
        params[f"{p}.ffn.b2"] = zeros((d,))
        params[f"{p}.ln2.g"] = ones((d,))
        params[f"{p}.ln2.b"] = zeros((d,))

    if head == "pretrain":
        for f in schema.categorical_fields:
            params[f"head.cat.{f.name}.w"] = uniform((d, f.vocab_size()), d)
            params[f"head.cat.{f.name}.b"] = zeros((f.vocab_size(),))
        for f in schema.continuous_fields:
            params[f"head.cont.{f.name}.w"] = uniform((d, 1), d)
            params[f"head.cont.{f.name}.b"] = zeros((1,))
    elif head == "classify":
        params["clf.w"] = uniform((d, 1), d)
        params["clf.b"] = zeros((1,))
    return params


def expected_param_count(schema: FeatureSchema, cfg: ModelConfig, head: str = "pretrain") -> int:
    """Closed-form parameter count; must match sum(p.size) of init_params."""
    d = cfg.d_model
    total = sum(f.vocab_size() * d for f in schema.categorical_fields)
    total += len(schema.continuous_fields) * 2 * d
    total += sum(schema.component_sizes()[n] for n in TS_COMPONENT_NAMES) * d
    total += 4 * d + d + d * d + d  # shallow time net
    per_block = (
        cfg.kernel_size * d * cfg.conv_channels + cfg.conv_channels  # conv
        + 3 * d * cfg.attn_channels + cfg.attn_channels ** 2          # q,k,v,mix
        + d * d + d                                                   # pointwise mix
        + 2 * d                                                       # ln1
        + d * (cfg.ffn_mult * d) + cfg.ffn_mult * d
        + (cfg.ffn_mult * d) * d + d                                  # ffn
        + 2 * d                                                       # ln2
    )
    total += cfg.n_blocks * per_block
    if head == "pretrain":
        total += sum(d * f.vocab_size() + f.vocab_size() for f in schema.categorical_fields)
        total += len(schema.continuous_fields) * (d + 1)
    elif head == "classify":
        total += d + 1
    return total


def trainable_names(params: dict[str, Tensor], mode: str) -> list[str]:
    """Which parameters the optimizer updates; finetune freezes embeddings."""
    if mode == "finetune":
        return [n for n in params if not n.startswith(FROZEN_PREFIXES)]
    return list(params)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def positional_encoding(t_len: int, d_model: int) -> Tensor:
    """Fixed sinusoidal encoding [T, d_model]; not learned."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    idx = np.arange(d_model // 2, dtype=np.float64)
    angles = pos / np.power(10000.0, 2.0 * idx / d_model)
    pe = np.zeros((t_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = tt.matmul(x, w)
    return tt.add(out, b) if b is not None else out


def timestamp_embedding(components: np.ndarray, floats: np.ndarray,
                        params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Sum of calendar-component lookups plus a shallow net over time floats.

    components: [..., 8] ints (year-offset first), floats: [..., 4].
    Returns (embedding [..., d_model], activity penalty scalar) where the
    penalty is lambda * mean(shallow_output**2) and belongs in the training
    loss.
    """
    emb: Tensor | None = None
    for i, name in enumerate(TS_COMPONENT_NAMES):
        looked = tt.embedding(params[f"time.comp.{name}"], components[..., i])
        emb = looked if emb is None else tt.add(emb, looked)
    x = Tensor(floats)
    hidden = tt.relu(linear(x, params["time.net.w1"], params["time.net.b1"]))
    out = linear(hidden, params["time.net.w2"], params["time.net.b2"])
    reg = tt.scale(tt.mean_all(tt.mul(out, out)), cfg.activity_reg_lambda)
    return tt.add(emb, out), reg


def embed_inputs(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                 schema: FeatureSchema) -> tuple[Tensor, Tensor]:
    """Sum all input streams into [B, T, d_model]; also returns the activity penalty."""
    t_emb, reg = timestamp_embedding(batch.ts_components, batch.ts_floats, params, cfg)
    h = t_emb
    for c, f in enumerate(schema.categorical_fields):
        h = tt.add(h, tt.embedding(params[f"embed.cat.{f.name}"], batch.cat[..., c]))
    for c, f in enumerate(schema.continuous_fields):
        value = Tensor(batch.cont[..., c : c + 1])  # [B, T, 1]
        proj = tt.add(tt.mul(value, params[f"embed.cont.{f.name}.w"]),
                      params[f"embed.cont.{f.name}.b"])
        h = tt.add(h, proj)
    return tt.add(h, positional_encoding(batch.window, cfg.d_model)), reg


def mha(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig, prefix: str = "block0") -> Tensor:
    """Bidirectional multi-head self-attention, [B,T,d] -> [B,T,attn_channels]."""
    b, t_len, _ = x.shape
    heads, dk = cfg.n_heads, cfg.d_head

    def split_heads(z: Tensor) -> Tensor:
        return tt.transpose(tt.reshape(z, (b, t_len, heads, dk)), (0, 2, 1, 3))

    q = split_heads(linear(x, params[f"{prefix}.attn.wq"]))
    k = split_heads(linear(x, params[f"{prefix}.attn.wk"]))
    v = split_heads(linear(x, params[f"{prefix}.attn.wv"]))
    scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = tt.softmax_lastdim(scores)            # [B, H, T, T]
    context = tt.matmul(weights, v)                 # [B, H, T, dk]
    merged = tt.reshape(tt.transpose(context, (0, 2, 1, 3)), (b, t_len, heads * dk))
    return linear(merged, params[f"{prefix}.attn.wmix"])


def aaconv_layer(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                 prefix: str = "block0") -> Tensor:
    """Concat of conv and attention channels, mixed by a pointwise convolution."""
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"aaconv_layer: input width {x.shape[-1]} != d_model {cfg.d_model}")
    conv_out = tt.conv1d(x, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"],
                         padding=cfg.conv_padding)
    attn_out = mha(x, params, cfg, prefix)
    stacked = tt.concat_lastdim([conv_out, attn_out])
    return tt.conv1d(stacked, params[f"{prefix}.mix.w"], params[f"{prefix}.mix.b"], padding="zero")


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = tt.relu(linear(x, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    return linear(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])


def encoder_forward(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                    dropout_rng: np.random.Generator | None = None) -> Tensor:
    """n_blocks repetitions of {aaconv sublayer, FFN sublayer}, post-norm residuals."""
    h = x
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        y = tt.dropout(aaconv_layer(h, params, cfg, p), cfg.dropout, dropout_rng)
        h = tt.layer_norm(tt.add(h, y), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        y = tt.dropout(_ffn(h, params, p), cfg.dropout, dropout_rng)
        h = tt.layer_norm(tt.add(h, y), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    return h


def pretrain_heads(h: Tensor, params: dict[str, Tensor], schema: FeatureSchema) -> dict[str, Tensor]:
    """Per-field reconstruction predictions at every position."""
    preds: dict[str, Tensor] = {}
    for f in schema.categorical_fields:
        preds[f.name] = linear(h, params[f"head.cat.{f.name}.w"], params[f"head.cat.{f.name}.b"])
    for f in schema.continuous_fields:
        preds[f.name] = linear(h, params[f"head.cont.{f.name}.w"], params[f"head.cont.{f.name}.b"])
    return preds


def classify_logits(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Mean-pool over time then a single dense unit; returns [B] logits."""
    pooled = tt.mean_axis(h, axis=1)
    z = linear(pooled, params["clf.w"], params["clf.b"])
    return tt.reshape(z, (h.shape[0],))


def classify_head(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Fraud probability in (0,1); detached (training uses classify_logits)."""
    z = classify_logits(h, params)
    return Tensor(tt.sigmoid(z.data))


# ---------------------------------------------------------------------------
# whole-model forwards
# ---------------------------------------------------------------------------


def forward_mdm(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                schema: FeatureSchema, dropout_rng=None) -> tuple[dict[str, Tensor], Tensor]:
    h, reg = embed_inputs(batch, params, cfg, schema)
    h = encoder_forward(h, params, cfg, dropout_rng)
    return pretrain_heads(h, params, schema), reg


def forward_classify(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                     schema: FeatureSchema, dropout_rng=None) -> Tensor:
    h, _ = embed_inputs(batch, params, cfg, schema)
    h = encoder_forward(h, params, cfg, dropout_rng)
    return classify_logits(h, params)
