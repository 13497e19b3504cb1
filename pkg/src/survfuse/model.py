"""The fused risk model.

Two encoders build token matrices (one row per prototype, one per pathway);
four attention streams contextualize them — two self-attention streams keep
modality-specific signal, two cross-attention streams carry the shared
signal — and a learned softmax pooling collapses each stream to a vector.
A linear head over the four concatenated vectors yields the log-relative
hazard. Everything runs through the autodiff tape so the training loop can
differentiate end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .numerics import Rng, Tensor, concatenate, constant, selu, softmax, stack
from .serialize import dump_json, load_json

# (query source, key/value source) per stream; "h" = prototype tokens,
# "g" = pathway tokens. Pooled vectors concatenate in STREAM_ORDER.
STREAM_SOURCES = {"hh": ("h", "h"), "gg": ("g", "g"),
                  "gh": ("h", "g"), "hg": ("g", "h")}
STREAM_ORDER = ("gg", "hh", "hg", "gh")


@dataclass(frozen=True)
class ModelConfig:
    n_prototypes: int
    d_patch: int
    pathway_sizes: tuple
    token_dim: int = 64          # width of encoder token rows
    fused_dim: int = 64          # width after attention
    snn_hidden: int = 128
    pathway_token_width: int = 32
    n_heads: int = 1
    attention_residual: bool = False

    def validate(self):
        if self.n_prototypes < 1 or self.d_patch < 1:
            raise ConfigError("n_prototypes and d_patch must be positive")
        if not self.pathway_sizes:
            raise ConfigError("pathway_sizes must be non-empty")
        if self.token_dim < 2:
            raise ConfigError("token_dim must be at least 2")
        if not (0 < self.pathway_token_width < self.token_dim):
            raise ConfigError("pathway_token_width must lie in (0, token_dim)")
        if self.fused_dim % self.n_heads != 0:
            raise ConfigError("n_heads must divide fused_dim")
        if self.attention_residual and self.token_dim != self.fused_dim:
            raise ConfigError("attention_residual requires token_dim == fused_dim")
        return self

    @property
    def n_pathways(self):
        return len(self.pathway_sizes)

    @property
    def snn_out(self):
        return self.token_dim - self.pathway_token_width


@dataclass
class ModelParams:
    config: ModelConfig
    init_seed: int
    params: dict = field(default_factory=dict)   # name -> Tensor(requires_grad)

    def tensor(self, name):
        return self.params[name]

    def arrays(self):
        return {name: t.data for name, t in self.params.items()}


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, seed):
    """Uniform(+-1/sqrt(fan_in)) for linear maps, zeros for learnable tokens."""
    config.validate()
    rng = Rng(seed).child("init")
    p = {}

    def linear(name, fan_in, w_shape, b_shape):
        p[f"{name}.w"] = Tensor(_uniform(rng, fan_in, w_shape), requires_grad=True)
        p[f"{name}.b"] = Tensor(_uniform(rng, fan_in, b_shape), requires_grad=True)

    d, dz = config.token_dim, config.fused_dim
    linear("wsi_reduce", config.d_patch, (config.d_patch, d - 1), (d - 1,))
    p["wsi_tokens"] = Tensor(np.zeros((config.n_prototypes, d)), requires_grad=True)

    for i, size in enumerate(config.pathway_sizes):
        linear(f"pathway.{i}.l1", size, (size, config.snn_hidden), (config.snn_hidden,))
        linear(f"pathway.{i}.l2", config.snn_hidden,
               (config.snn_hidden, config.snn_out), (config.snn_out,))
        p[f"pathway.{i}.token"] = Tensor(np.zeros(config.pathway_token_width),
                                         requires_grad=True)

    for stream in STREAM_ORDER:
        for proj in ("wq", "wk", "wv"):
            linear(f"attn.{stream}.{proj}", d, (d, dz), (dz,))
        linear(f"attn.{stream}.wo", dz, (dz, dz), (dz,))
        p[f"agg.{stream}.v"] = Tensor(_uniform(rng, dz, (dz,)), requires_grad=True)

    linear("risk", 4 * dz, (4 * dz,), ())
    return ModelParams(config=config, init_seed=int(seed), params=p)


# -- encoders ----------------------------------------------------------------

def _encode_wsi_core(means, cards, params):
    """means (..., N_h, d_patch), cards (..., N_h) -> (..., N_h, D)."""
    cfg = params.config
    if means.shape[-2:] != (cfg.n_prototypes, cfg.d_patch):
        raise DataError(f"expected {cfg.n_prototypes} prototype means of length "
                        f"{cfg.d_patch}, got shape {means.shape}")
    reduced = means @ params.tensor("wsi_reduce.w") + params.tensor("wsi_reduce.b")
    rows = concatenate([reduced, cards.reshape(cards.shape + (1,))], axis=-1)
    return rows + params.tensor("wsi_tokens")


def encode_wsi(summary, params):
    """Token matrix from (mean, cardinality) pairs: row k is
    [reduce(mean_k) || cardinality_k] plus the k-th learnable token."""
    means = constant(np.stack([np.asarray(m, dtype=np.float64) for m, _ in summary]))
    cards = constant(np.array([c for _, c in summary], dtype=np.float64))
    return _encode_wsi_core(means, cards, params)


def _encode_pathways_core(inputs, params, batch_shape):
    """inputs: list of (..., len_i) tensors -> (..., N_g, D)."""
    cfg = params.config
    if len(inputs) != cfg.n_pathways:
        raise DataError(f"expected {cfg.n_pathways} pathway inputs, got {len(inputs)}")
    rows = []
    for i, x in enumerate(inputs):
        if x.shape[-1] != cfg.pathway_sizes[i]:
            raise DataError(f"pathway {i}: input length {x.shape[-1]} does not "
                            f"match catalog length {cfg.pathway_sizes[i]}")
        h = selu(x @ params.tensor(f"pathway.{i}.l1.w")
                 + params.tensor(f"pathway.{i}.l1.b"))
        y = h @ params.tensor(f"pathway.{i}.l2.w") + params.tensor(f"pathway.{i}.l2.b")
        token = params.tensor(f"pathway.{i}.token").broadcast_to(
            batch_shape + (cfg.pathway_token_width,))
        rows.append(concatenate([y, token], axis=-1))
    return stack(rows, axis=-2)


def encode_pathways(pathway_inputs, params):
    """Token matrix from per-pathway gene vectors: row i is
    [two-layer-SELU-net_i(genes_i) || token_i]."""
    inputs = [constant(np.asarray(v, dtype=np.float64).reshape(1, -1))
              for v in pathway_inputs]
    out = _encode_pathways_core(inputs, params, batch_shape=(1,))
    return out.reshape(out.shape[1:])


# -- attention and pooling ---------------------------------------------------

def attention(q_tokens, kv_tokens, params, stream):
    """Scaled dot-product attention for one stream.

    Returns (contextualized tokens, attention matrix). Self-attention when
    both inputs are the same tokens, cross-attention otherwise. With more
    than one head the exposed matrix is the mean over heads.
    """
    cfg = params.config
    q = q_tokens @ params.tensor(f"attn.{stream}.wq.w") + params.tensor(f"attn.{stream}.wq.b")
    k = kv_tokens @ params.tensor(f"attn.{stream}.wk.w") + params.tensor(f"attn.{stream}.wk.b")
    v = kv_tokens @ params.tensor(f"attn.{stream}.wv.w") + params.tensor(f"attn.{stream}.wv.b")

    heads, dz = cfg.n_heads, cfg.fused_dim
    dh = dz // heads
    lead = q.shape[:-2]
    n, m = q.shape[-2], k.shape[-2]

    def split(t, rows):
        return t.reshape(lead + (rows, heads, dh)).swapaxes(-2, -3)

    qh, kh, vh = split(q, n), split(k, m), split(v, m)     # (..., heads, rows, dh)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)                        # (..., heads, n, m)
    ctx = (attn @ vh).swapaxes(-2, -3).reshape(lead + (n, dz))
    out = ctx @ params.tensor(f"attn.{stream}.wo.w") + params.tensor(f"attn.{stream}.wo.b")
    if cfg.attention_residual:
        out = out + q_tokens
    return out, attn.mean(axis=-3)


def aggregate(tokens, params, stream):
    """Softmax-weighted mean over token rows; returns (pooled, weights)."""
    v = params.tensor(f"agg.{stream}.v")
    scores = (tokens @ v.reshape(-1, 1)).reshape(tokens.shape[:-1])
    weights = softmax(scores, axis=-1)
    pooled = (weights.reshape(weights.shape[:-1] + (1,) + weights.shape[-1:])
              @ tokens)
    pooled = pooled.reshape(pooled.shape[:-2] + (tokens.shape[-1],))
    return pooled, weights


def risk_from_pooled(pooled, params):
    """Linear head over [z_gg || z_hh || z_hg || z_gh]."""
    z = concatenate([pooled[s] for s in STREAM_ORDER], axis=-1)
    w = params.tensor("risk.w")
    out = z @ w.reshape(-1, 1) + params.tensor("risk.b")
    return out.reshape(out.shape[:-1])


# -- forward pass ------------------------------------------------------------

@dataclass(frozen=True)
class SampleFeatures:
    """Model-ready view of one sample: prototype summary plus pathway inputs."""

    sample_id: str
    proto_means: np.ndarray      # (N_h, d_patch)
    proto_weights: np.ndarray    # (N_h,)
    pathway_inputs: tuple
    time: float
    event: bool


def features_from(sample, model_for_sample):
    """Build SampleFeatures from a cohort sample and its fitted mixture."""
    return SampleFeatures(
        sample_id=sample.sample_id,
        proto_means=model_for_sample.means.copy(),
        proto_weights=model_for_sample.weights.copy(),
        pathway_inputs=sample.pathway_inputs,
        time=sample.time, event=sample.event)


def stack_features(features):
    """Constant batched tensors (means, cards, per-pathway inputs)."""
    means = constant(np.stack([f.proto_means for f in features]))
    cards = constant(np.stack([f.proto_weights for f in features]))
    n_pathways = len(features[0].pathway_inputs)
    inputs = [constant(np.stack([np.asarray(f.pathway_inputs[i], dtype=np.float64)
                                 for f in features]))
              for i in range(n_pathways)]
    return means, cards, inputs


@dataclass
class ForwardTensors:
    """All intermediate tensors of a (batched) forward pass."""

    z_h: Tensor
    z_g: Tensor
    contextual: dict     # stream -> (..., rows, D_z)
    attn: dict           # stream -> (..., n, m)
    pooled: dict         # stream -> (..., D_z)
    agg_weights: dict    # stream -> (..., rows)
    risks: Tensor        # (...,)


def fuse(z_h, z_g, params):
    """Run the four attention streams over encoder outputs."""
    source = {"h": z_h, "g": z_g}
    contextual, attn = {}, {}
    for stream, (q_src, kv_src) in STREAM_SOURCES.items():
        contextual[stream], attn[stream] = attention(
            source[q_src], source[kv_src], params, stream)
    return contextual, attn


def pool_streams(contextual, params):
    pooled, weights = {}, {}
    for stream in STREAM_ORDER:
        pooled[stream], weights[stream] = aggregate(contextual[stream], params, stream)
    return pooled, weights


def forward_batch(features, params):
    """Batched forward pass over a list of SampleFeatures."""
    means, cards, inputs = stack_features(features)
    z_h = _encode_wsi_core(means, cards, params)
    z_g = _encode_pathways_core(inputs, params, batch_shape=(len(features),))
    contextual, attn = fuse(z_h, z_g, params)
    pooled, agg_weights = pool_streams(contextual, params)
    risks = risk_from_pooled(pooled, params)
    if not np.all(np.isfinite(risks.data)):
        raise NumericalError("non-finite risk in forward pass")
    return ForwardTensors(z_h=z_h, z_g=z_g, contextual=contextual, attn=attn,
                          pooled=pooled, agg_weights=agg_weights, risks=risks)


@dataclass(frozen=True)
class DisentangledBundle:
    """Numpy view of one sample's representations and attention maps."""

    contextual: dict     # stream -> (rows, D_z)
    pooled: dict         # stream -> (D_z,)
    attn: dict           # stream -> (n, m)
    agg_weights: dict    # stream -> (rows,)


@dataclass(frozen=True)
class RiskOutput:
    risk: float
    bundle: DisentangledBundle


def forward(sample_features, params):
    """Single-sample forward pass returning the risk and the full bundle."""
    out = forward_batch([sample_features], params)
    bundle = DisentangledBundle(
        contextual={s: out.contextual[s].data[0].copy() for s in STREAM_ORDER},
        pooled={s: out.pooled[s].data[0].copy() for s in STREAM_ORDER},
        attn={s: out.attn[s].data[0].copy() for s in STREAM_ORDER},
        agg_weights={s: out.agg_weights[s].data[0].copy() for s in STREAM_ORDER})
    return RiskOutput(risk=float(out.risks.data[0]), bundle=bundle)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params, path):
    dump_json({
        "format_version": 1,
        "init_seed": params.init_seed,
        "config": {
            "n_prototypes": params.config.n_prototypes,
            "d_patch": params.config.d_patch,
            "pathway_sizes": list(params.config.pathway_sizes),
            "token_dim": params.config.token_dim,
            "fused_dim": params.config.fused_dim,
            "snn_hidden": params.config.snn_hidden,
            "pathway_token_width": params.config.pathway_token_width,
            "n_heads": params.config.n_heads,
            "attention_residual": params.config.attention_residual,
        },
        "params": {name: {"shape": list(t.data.shape), "data": t.data.reshape(-1)}
                   for name, t in params.params.items()},
    }, path)


def load_checkpoint(path):
    raw = load_json(path)
    if raw.get("format_version") != 1:
        raise DataError(f"unsupported checkpoint version in {path}")
    cfg_raw = raw["config"]
    config = ModelConfig(
        n_prototypes=cfg_raw["n_prototypes"],
        d_patch=cfg_raw["d_patch"],
        pathway_sizes=tuple(cfg_raw["pathway_sizes"]),
        token_dim=cfg_raw["token_dim"],
        fused_dim=cfg_raw["fused_dim"],
        snn_hidden=cfg_raw["snn_hidden"],
        pathway_token_width=cfg_raw["pathway_token_width"],
        n_heads=cfg_raw["n_heads"],
        attention_residual=cfg_raw["attention_residual"]).validate()
    params = {}
    for name, rec in raw["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        params[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config=config, init_seed=int(raw["init_seed"]), params=params)
