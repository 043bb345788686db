"""The two-branch fusion network.

Each modality runs through its own patch embedding and transformer encoder.
Fusion alternates cross-attention twice per round: the satellite sequence
attends over the street-view sequence, then the street-view sequence attends
over that result; the second output feeds the fitting head via its CLS token.

All forward functions operate on batched token tensors ``[B, T, D]`` and are
pure given the parameter tensors; dropout only fires when ``training`` is
set and draws from the caller's RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from geoscore import numerics as nm
from geoscore.model.config import ModelConfig
from geoscore.numerics import GradTape, ShapeError, Tensor

INIT_STD = 0.02


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams


@dataclass
class EncoderLayerParams:
    attn_norm: LayerNormParams
    attn: AttentionParams
    mlp_norm: LayerNormParams
    mlp_in: LinearParams
    mlp_out: LinearParams


@dataclass
class BranchParams:
    patch_norm: LayerNormParams
    patch_proj: LinearParams
    cls: Tensor  # [1, 1, D]
    pos: Tensor  # [1, T, D]
    layers: list[EncoderLayerParams]


@dataclass
class FusionRoundParams:
    first: AttentionParams  # queries from branch 1 (satellite side)
    second: AttentionParams  # queries from branch 2 (street-view side)


@dataclass
class FusionModel:
    config: ModelConfig
    satellite: BranchParams
    streetview: BranchParams
    fusion: list[FusionRoundParams]
    head_in: LinearParams
    head_out: LinearParams

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}

        def put(prefix: str, obj) -> None:
            if isinstance(obj, Tensor):
                named[prefix] = obj
            elif isinstance(obj, LinearParams):
                named[f"{prefix}.w"] = obj.w
                named[f"{prefix}.b"] = obj.b
            elif isinstance(obj, LayerNormParams):
                named[f"{prefix}.gamma"] = obj.gamma
                named[f"{prefix}.beta"] = obj.beta
            elif isinstance(obj, AttentionParams):
                for part in ("query", "key", "value", "out"):
                    put(f"{prefix}.{part}", getattr(obj, part))
            else:
                raise TypeError(f"unexpected parameter container {type(obj)}")

        for branch_name, branch in (("sat", self.satellite), ("sv", self.streetview)):
            put(f"{branch_name}.patch_norm", branch.patch_norm)
            put(f"{branch_name}.patch_proj", branch.patch_proj)
            put(f"{branch_name}.cls", branch.cls)
            put(f"{branch_name}.pos", branch.pos)
            for i, layer in enumerate(branch.layers):
                put(f"{branch_name}.enc{i}.attn_norm", layer.attn_norm)
                put(f"{branch_name}.enc{i}.attn", layer.attn)
                put(f"{branch_name}.enc{i}.mlp_norm", layer.mlp_norm)
                put(f"{branch_name}.enc{i}.mlp_in", layer.mlp_in)
                put(f"{branch_name}.enc{i}.mlp_out", layer.mlp_out)
        for r, rnd in enumerate(self.fusion):
            put(f"fuse.round{r}.first", rnd.first)
            put(f"fuse.round{r}.second", rnd.second)
        put("head.fc1", self.head_in)
        put("head.fc2", self.head_out)
        return named

    def parameters(self) -> list[Tensor]:
        named = self.named_parameters()
        return [named[k] for k in sorted(named)]


# ------------------------------------------------------------------- init

def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    vals = rng.normal(0.0, std, size=shape)
    return np.clip(vals, -2.0 * std, 2.0 * std)


def _init_linear(rng, fan_in: int, fan_out: int) -> LinearParams:
    return LinearParams(
        w=Tensor(_trunc_normal(rng, (fan_in, fan_out)), requires_grad=True),
        b=Tensor(np.zeros(fan_out), requires_grad=True),
    )


def _init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(dim), requires_grad=True),
        beta=Tensor(np.zeros(dim), requires_grad=True),
    )


def _init_attention(rng, dim: int) -> AttentionParams:
    return AttentionParams(
        query=_init_linear(rng, dim, dim),
        key=_init_linear(rng, dim, dim),
        value=_init_linear(rng, dim, dim),
        out=_init_linear(rng, dim, dim),
    )


def _init_branch(rng, cfg: ModelConfig) -> BranchParams:
    layers = []
    for _ in range(cfg.num_encoder_layers):
        layers.append(
            EncoderLayerParams(
                attn_norm=_init_layer_norm(cfg.hidden_dim),
                attn=_init_attention(rng, cfg.hidden_dim),
                mlp_norm=_init_layer_norm(cfg.hidden_dim),
                mlp_in=_init_linear(rng, cfg.hidden_dim, cfg.mlp_ratio * cfg.hidden_dim),
                mlp_out=_init_linear(rng, cfg.mlp_ratio * cfg.hidden_dim, cfg.hidden_dim),
            )
        )
    return BranchParams(
        patch_norm=_init_layer_norm(cfg.patch_dim),
        patch_proj=_init_linear(rng, cfg.patch_dim, cfg.hidden_dim),
        cls=Tensor(np.zeros((1, 1, cfg.hidden_dim)), requires_grad=True),
        pos=Tensor(np.zeros((1, cfg.num_tokens, cfg.hidden_dim)), requires_grad=True),
        layers=layers,
    )


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> FusionModel:
    """Fresh model: truncated-normal projections, zero biases/CLS/positional."""
    fusion = [
        FusionRoundParams(
            first=_init_attention(rng, cfg.hidden_dim),
            second=_init_attention(rng, cfg.hidden_dim),
        )
        for _ in range(cfg.fusion_rounds)
    ]
    return FusionModel(
        config=cfg,
        satellite=_init_branch(rng, cfg),
        streetview=_init_branch(rng, cfg),
        fusion=fusion,
        head_in=_init_linear(rng, cfg.hidden_dim, cfg.head_hidden),
        head_out=_init_linear(rng, cfg.head_hidden, 1),
    )


# ---------------------------------------------------------------- forward

@dataclass
class ForwardContext:
    """Per-call forward options: dropout state and optional attention probe."""

    training: bool = False
    rng: np.random.Generator | None = None
    dropout_rate: float = 0.0
    attn_sink: list[np.ndarray] | None = field(default=None)

    def dropout(self, t: Tensor) -> Tensor:
        if not self.training or self.dropout_rate == 0.0:
            return t
        mask = nm.dropout_mask(t.shape, self.dropout_rate, self.rng)
        return nm.mul(t, mask)


def _linear(x: Tensor, p: LinearParams) -> Tensor:
    return nm.add(nm.matmul(x, p.w), p.b)


def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """[B, 3, S, S] -> [B, P, 3*patch_side^2], grid row-major from the top-left."""
    b, c, h, w = images.shape
    if h % patch_side or w % patch_side:
        raise ShapeError(f"image {h}x{w} not divisible into {patch_side}px patches")
    gh, gw = h // patch_side, w // patch_side
    x = images.reshape(b, c, gh, patch_side, gw, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch_side * patch_side))


def patch_embed(images: np.ndarray, branch: BranchParams, cfg: ModelConfig) -> Tensor:
    """Patchify, layer-norm, project to hidden width, prepend CLS, add positions."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if c != 3 or h != cfg.image_side or w != cfg.image_side:
        raise ShapeError(f"expected [B, 3, {cfg.image_side}, {cfg.image_side}], got {images.shape}")
    patches = Tensor(patchify(images, cfg.patch_side))
    x = nm.layer_norm(patches, branch.patch_norm.gamma, branch.patch_norm.beta)
    x = _linear(x, branch.patch_proj)
    cls = nm.broadcast_to(branch.cls, (b, 1, cfg.hidden_dim))
    seq = nm.concat([cls, x], axis=1)
    return nm.add(seq, branch.pos)


def multi_head_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    p: AttentionParams,
    cfg: ModelConfig,
    ctx: ForwardContext,
) -> Tensor:
    """Scaled dot-product attention; queries from one sequence, keys/values
    from the other. Returns the projected context (no residual)."""
    if query_seq.shape[-1] != cfg.hidden_dim or kv_seq.shape[-1] != cfg.hidden_dim:
        raise ShapeError(
            f"sequence width must be {cfg.hidden_dim}, got {query_seq.shape} / {kv_seq.shape}"
        )
    b, tq, d = query_seq.shape
    tk = kv_seq.shape[1]
    heads, head_dim = cfg.num_heads, cfg.head_dim

    def split_heads(t: Tensor, tokens: int) -> Tensor:
        t = nm.reshape(t, (b, tokens, heads, head_dim))
        return nm.transpose(t, (0, 2, 1, 3))

    q = split_heads(_linear(query_seq, p.query), tq)
    k = split_heads(_linear(kv_seq, p.key), tk)
    v = split_heads(_linear(kv_seq, p.value), tk)

    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    attn = nm.softmax(scores, axis=-1)
    if ctx.attn_sink is not None:
        ctx.attn_sink.append(attn.data.copy())
    attn = ctx.dropout(attn)
    context = nm.matmul(attn, v)
    context = nm.reshape(nm.transpose(context, (0, 2, 1, 3)), (b, tq, d))
    return _linear(context, p.out)


def encoder_layer(seq: Tensor, p: EncoderLayerParams, cfg: ModelConfig, ctx: ForwardContext) -> Tensor:
    """Pre-norm transformer block: attention then GELU MLP, both residual."""
    h = nm.layer_norm(seq, p.attn_norm.gamma, p.attn_norm.beta)
    seq = nm.add(seq, multi_head_attention(h, h, p.attn, cfg, ctx))
    h = nm.layer_norm(seq, p.mlp_norm.gamma, p.mlp_norm.beta)
    m = _linear(nm.gelu(_linear(h, p.mlp_in)), p.mlp_out)
    return nm.add(seq, ctx.dropout(m))


def vit_encode(images: np.ndarray, branch: BranchParams, cfg: ModelConfig, ctx: ForwardContext) -> Tensor:
    seq = patch_embed(images, branch, cfg)
    for layer in branch.layers:
        seq = encoder_layer(seq, layer, cfg, ctx)
    return seq


def cross_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    p: AttentionParams,
    cfg: ModelConfig,
    ctx: ForwardContext,
) -> Tensor:
    """Cross-attention with residual: query_seq + MHA(query_seq, kv_seq).

    With kv_seq == query_seq this is exactly self-attention under the same
    parameters.
    """
    if query_seq.shape != kv_seq.shape:
        raise ShapeError(f"sequence shapes disagree: {query_seq.shape} vs {kv_seq.shape}")
    return nm.add(query_seq, multi_head_attention(query_seq, kv_seq, p, cfg, ctx))


def fuse(rep_sat: Tensor, rep_sv: Tensor, model: FusionModel, ctx: ForwardContext) -> Tensor:
    """Alternating fusion: satellite attends over street view, then street
    view attends over that result; the second output is the fused sequence."""
    state_sat, state_sv = rep_sat, rep_sv
    for rnd in model.fusion:
        state_sat = cross_attention(state_sat, state_sv, rnd.first, model.config, ctx)
        state_sv = cross_attention(state_sv, state_sat, rnd.second, model.config, ctx)
    return state_sv


def fitting_head(fused: Tensor, model: FusionModel) -> Tensor:
    """CLS token -> linear -> ReLU -> linear -> per-example scalar [B]."""
    cls = fused[:, 0, :]
    h = nm.relu(_linear(cls, model.head_in))
    out = _linear(h, model.head_out)
    return nm.reshape(out, (out.shape[0],))


def forward_scores(
    model: FusionModel,
    sat_images: np.ndarray,
    sv_images: np.ndarray | None,
    ctx: ForwardContext | None = None,
) -> Tensor:
    """Batched scores [B]; honors the configured modality."""
    ctx = ctx or ForwardContext()
    cfg = model.config
    if cfg.modality == "satellite":
        fused = vit_encode(sat_images, model.satellite, cfg, ctx)
    elif cfg.modality == "streetview":
        fused = vit_encode(sv_images, model.streetview, cfg, ctx)
    else:
        rep_sat = vit_encode(sat_images, model.satellite, cfg, ctx)
        rep_sv = vit_encode(sv_images, model.streetview, cfg, ctx)
        fused = fuse(rep_sat, rep_sv, model, ctx)
    return fitting_head(fused, model)


def predict(model: FusionModel, sat_image: np.ndarray, sv_image: np.ndarray | None) -> float:
    """Deterministic single-pair score in inference mode (no dropout)."""
    sat = np.asarray(sat_image)[None] if np.asarray(sat_image).ndim == 3 else np.asarray(sat_image)
    sv = None
    if sv_image is not None:
        sv = np.asarray(sv_image)[None] if np.asarray(sv_image).ndim == 3 else np.asarray(sv_image)
    scores = forward_scores(model, sat, sv, ForwardContext(training=False))
    return float(scores.data[0])
