"""The hybrid network: patch tokens through a transformer encoder in
parallel with a small CNN, fused by cross-attention, refined by graph
attention over the token grid, then pooled into classification and
rotation-prediction heads.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer and
checkpoint code can treat them uniformly.  Attention probability maps can
be captured through an optional ``capture`` dict for invariant checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rng import RngStream
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 128
    num_heads: int = 4
    num_encoder_layers: int = 4
    mlp_ratio: float = 4.0
    cnn_channels: tuple[int, ...] = (16, 32, 64)
    dropout_p: float = 0.1
    graph_connectivity: str = "grid8"
    gat_leaky_slope: float = 0.2
    num_classes: int = 5
    num_rotations: int = 4
    rotation_loss_weight: float = 0.1

    def __post_init__(self):
        self.cnn_channels = tuple(self.cnn_channels)
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.graph_connectivity != "grid8":
            raise ConfigError(f"unknown graph connectivity {self.graph_connectivity!r}")
        if self.num_encoder_layers < 1:
            raise ConfigError("num_encoder_layers must be >= 1")
        if not self.cnn_channels:
            raise ConfigError("cnn_channels must be non-empty")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_rotations != 4:
            raise ConfigError("num_rotations is fixed at 4 (quarter turns)")
        if self.rotation_loss_weight < 0:
            raise ConfigError("rotation_loss_weight must be >= 0")
        # the pooling chain halves the spatial extent per CNN block
        extent = self.image_size
        for _ in self.cnn_channels:
            if extent < 2 or extent % 2:
                raise ConfigError(
                    f"image_size {self.image_size} cannot be halved "
                    f"{len(self.cnn_channels)} times by the CNN pooling chain")
            extent //= 2

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class TokenGrid:
    tokens: Tensor  # B x N x d
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"token count {self.tokens.shape[1]} != grid {self.grid_h}x{self.grid_w}")


@dataclass
class FeatureGraph:
    nodes: Tensor  # B x N x d
    adjacency: np.ndarray = field(repr=False)  # N x N bool, symmetric, self-loops


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform_init(rng: RngStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return (rng.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * bound


def init_params(cfg: ModelConfig, rng: RngStream) -> dict[str, Tensor]:
    """Seeded parameter dictionary: uniform +-1/sqrt(fan_in) weights, zero
    biases, zero positional embedding, unit layer-norm gains."""
    d = cfg.embed_dim
    spec: dict[str, tuple[tuple[int, ...], int | None]] = {}

    spec["patch_embed.weight"] = ((d, 3, cfg.patch_size, cfg.patch_size),
                                  3 * cfg.patch_size ** 2)
    spec["patch_embed.bias"] = ((d,), None)
    spec["pos_embed"] = ((1, cfg.num_tokens, d), None)

    for i in range(cfg.num_encoder_layers):
        p = f"enc{i}."
        spec[p + "ln1.gamma"] = ((d,), "ones")
        spec[p + "ln1.beta"] = ((d,), None)
        for name in ("wq", "wk", "wv", "wo"):
            spec[p + "attn." + name] = ((d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            spec[p + "attn." + name] = ((d,), None)
        spec[p + "ln2.gamma"] = ((d,), "ones")
        spec[p + "ln2.beta"] = ((d,), None)
        spec[p + "mlp.w1"] = ((d, cfg.mlp_hidden), d)
        spec[p + "mlp.b1"] = ((cfg.mlp_hidden,), None)
        spec[p + "mlp.w2"] = ((cfg.mlp_hidden, d), cfg.mlp_hidden)
        spec[p + "mlp.b2"] = ((d,), None)

    in_ch = 3
    for j, out_ch in enumerate(cfg.cnn_channels):
        spec[f"cnn{j}.weight"] = ((out_ch, in_ch, 3, 3), in_ch * 9)
        spec[f"cnn{j}.bias"] = ((out_ch,), None)
        in_ch = out_ch

    spec["cross.proj.w"] = ((cfg.cnn_channels[-1], d), cfg.cnn_channels[-1])
    spec["cross.proj.b"] = ((d,), None)
    for name in ("wq", "wk", "wv", "wo"):
        spec["cross.attn." + name] = ((d, d), d)
    for name in ("bq", "bk", "bv", "bo"):
        spec["cross.attn." + name] = ((d,), None)
    spec["cross.fuse.w"] = ((2 * d, d), 2 * d)
    spec["cross.fuse.b"] = ((d,), None)

    spec["gat.w"] = ((d, d), d)
    spec["gat.a_src"] = ((d, 1), d)
    spec["gat.a_dst"] = ((d, 1), d)

    spec["head.ln.gamma"] = ((d,), "ones")
    spec["head.ln.beta"] = ((d,), None)
    spec["head.w"] = ((d, cfg.num_classes), d)
    spec["head.b"] = ((cfg.num_classes,), None)
    spec["rot.w"] = ((d, cfg.num_rotations), d)
    spec["rot.b"] = ((cfg.num_rotations,), None)

    params: dict[str, Tensor] = {}
    for name, (shape, fan_in) in spec.items():
        if fan_in == "ones":
            data = np.ones(shape)
        elif fan_in is None:
            data = np.zeros(shape)
        else:
            data = _uniform_init(rng.derive("init", name), shape, fan_in)
            if name in ("head.w", "rot.w"):
                # small readout: layer-normed features have unit second
                # moment, so 1/sqrt(fan_in) output weights would start the
                # classifier at CE well above ln K; shrinking only the two
                # output heads keeps the initial loss near the uninformed
                # baseline while gradients still flow end to end
                data = data * 0.1
        params[name] = Tensor(data, requires_grad=True)
    return params


def _affine(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def patch_embed(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor]) -> TokenGrid:
    """Non-overlapping patches via a strided convolution, flattened row-major
    into tokens, plus the learned positional embedding."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W input, got {x.shape}")
    B, _, H, W = x.shape
    if H != cfg.image_size or W != cfg.image_size:
        raise ShapeError(f"input {H}x{W} does not match configured image size {cfg.image_size}")
    g = cfg.grid_size
    out = T.conv2d(x, params["patch_embed.weight"], params["patch_embed.bias"],
                   stride=cfg.patch_size, padding=0)       # B x d x g x g
    tokens = T.transpose(T.reshape(out, (B, cfg.embed_dim, g * g)), (0, 2, 1))
    tokens = tokens + params["pos_embed"]
    return TokenGrid(tokens=tokens, grid_h=g, grid_w=g)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, N, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, h * hd))


def _attention(q_tokens: Tensor, kv_tokens: Tensor, heads: int,
               params: dict[str, Tensor], prefix: str,
               capture: dict | None = None, capture_key: str = "") -> Tensor:
    """Scaled dot-product attention with separate query and key/value token
    sets; ``q_tokens is kv_tokens`` gives self-attention."""
    d = q_tokens.shape[-1]
    if d % heads:
        raise ConfigError(f"token width {d} not divisible by {heads} heads")
    q = _split_heads(T.matmul(q_tokens, params[prefix + "wq"]) + params[prefix + "bq"], heads)
    k = _split_heads(T.matmul(kv_tokens, params[prefix + "wk"]) + params[prefix + "bk"], heads)
    v = _split_heads(T.matmul(kv_tokens, params[prefix + "wv"]) + params[prefix + "bv"], heads)
    scale = 1.0 / math.sqrt(d // heads)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    attn = T.softmax(scores)                                # B x h x Nq x Nk
    if capture is not None:
        capture[capture_key] = attn.data.copy()
    ctx = _merge_heads(T.matmul(attn, v))
    return T.matmul(ctx, params[prefix + "wo"]) + params[prefix + "bo"]


def multi_head_self_attention(tokens: Tensor, heads: int, params: dict[str, Tensor],
                              prefix: str = "attn.", capture: dict | None = None,
                              capture_key: str = "attn") -> Tensor:
    return _attention(tokens, tokens, heads, params, prefix, capture, capture_key)


def transformer_encoder(tokens: Tensor, cfg: ModelConfig, params: dict[str, Tensor],
                        training: bool = False, rng: RngStream | None = None,
                        capture: dict | None = None) -> Tensor:
    """Stack of pre-norm blocks: x += drop(attn(ln(x))); x += drop(mlp(ln(x)))."""
    x = tokens
    for i in range(cfg.num_encoder_layers):
        p = f"enc{i}."
        h = T.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
        a = _attention(h, h, cfg.num_heads, params, p + "attn.",
                       capture, f"enc{i}.attn")
        x = x + T.dropout(a, cfg.dropout_p, training, rng)
        h = T.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
        m = T.gelu(T.matmul(h, params[p + "mlp.w1"]) + params[p + "mlp.b1"])
        m = T.matmul(m, params[p + "mlp.w2"]) + params[p + "mlp.b2"]
        x = x + T.dropout(m, cfg.dropout_p, training, rng)
    return x


def cnn_branch(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor],
               training: bool = False, rng: RngStream | None = None) -> Tensor:
    """conv(3x3, pad 1) -> relu -> max_pool(2,2) -> dropout per channel stage."""
    if x.shape[-1] != cfg.image_size or x.shape[-2] != cfg.image_size:
        raise ShapeError(f"input {x.shape} does not match image size {cfg.image_size}")
    out = x
    for j in range(len(cfg.cnn_channels)):
        extent = out.shape[-1]
        if extent < 2 or extent % 2:
            raise ShapeError(f"spatial extent {extent} cannot be pooled in half at stage {j}")
        out = T.conv2d(out, params[f"cnn{j}.weight"], params[f"cnn{j}.bias"], padding=1)
        out = T.relu(out)
        out = T.max_pool2d(out, 2, 2)
        out = T.dropout(out, cfg.dropout_p, training, rng)
    return out


def cross_attention_fuse(cnn_feat: Tensor, enc_tokens: Tensor, cfg: ModelConfig,
                         params: dict[str, Tensor], capture: dict | None = None) -> Tensor:
    """Flatten the CNN map into tokens, project to the embed width, attend
    with encoder tokens as queries, then fuse the attended context with the
    encoder tokens through the concatenation + linear layer."""
    B, C, h, w = cnn_feat.shape
    cnn_tokens = T.transpose(T.reshape(cnn_feat, (B, C, h * w)), (0, 2, 1))
    cnn_tokens = T.matmul(cnn_tokens, params["cross.proj.w"]) + params["cross.proj.b"]
    ctx = _attention(enc_tokens, cnn_tokens, cfg.num_heads, params, "cross.attn.",
                     capture, "cross.attn")
    both = T.concat([enc_tokens, ctx], axis=2)
    return T.matmul(both, params["cross.fuse.w"]) + params["cross.fuse.b"]


def grid8_adjacency(grid_h: int, grid_w: int) -> np.ndarray:
    """8-neighborhood of a grid_h x grid_w lattice, plus self-loops."""
    n = grid_h * grid_w
    adj = np.zeros((n, n), dtype=bool)
    for r in range(grid_h):
        for c in range(grid_w):
            i = r * grid_w + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < grid_h and 0 <= cc < grid_w:
                        adj[i, rr * grid_w + cc] = True
    return adj


def build_graph(fused: TokenGrid) -> FeatureGraph:
    return FeatureGraph(nodes=fused.tokens,
                        adjacency=grid8_adjacency(fused.grid_h, fused.grid_w))


def graph_attention(graph: FeatureGraph, cfg: ModelConfig, params: dict[str, Tensor],
                    capture: dict | None = None) -> Tensor:
    """Additive-score attention over the neighborhood structure:
    score(i,j) = leaky_relu(a_src . Wh_i + a_dst . Wh_j) for adjacent pairs,
    normalized per neighborhood; non-edges get weight exactly zero."""
    adj = graph.adjacency
    n = graph.nodes.shape[1]
    if adj.shape != (n, n):
        raise ContractError(f"adjacency {adj.shape} does not match {n} nodes")
    if not np.array_equal(adj, adj.T):
        raise ContractError("graph adjacency must be symmetric")
    if not adj.diagonal().all():
        raise ContractError("graph adjacency must include every self-loop")
    h = T.matmul(graph.nodes, params["gat.w"])                       # B x N x d
    src = T.matmul(h, params["gat.a_src"])                           # B x N x 1
    dst = T.transpose(T.matmul(h, params["gat.a_dst"]), (0, 2, 1))   # B x 1 x N
    scores = T.leaky_relu(src + dst, cfg.gat_leaky_slope)            # B x N x N
    alpha = T.softmax(scores, mask=adj[None, :, :])
    if capture is not None:
        capture["gat.attn"] = alpha.data.copy()
    out = T.matmul(alpha, h)
    return T.leaky_relu(out, cfg.gat_leaky_slope)


def global_average_pool(nodes: Tensor) -> Tensor:
    if nodes.shape[1] < 1:
        raise ShapeError("cannot pool over zero tokens")
    return T.tmean(nodes, axis=1)


def classify_head(pooled: Tensor, cfg: ModelConfig, params: dict[str, Tensor],
                  training: bool = False, rng: RngStream | None = None) -> Tensor:
    h = T.layer_norm(pooled, params["head.ln.gamma"], params["head.ln.beta"])
    h = T.dropout(h, cfg.dropout_p, training, rng)
    return _affine(h, params, "head")


def rotation_head(pooled: Tensor, params: dict[str, Tensor]) -> Tensor:
    return _affine(pooled, params, "rot")


def model_forward(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor],
                  training: bool = False, rng: RngStream | None = None,
                  capture: dict | None = None) -> tuple[Tensor, Tensor]:
    """Full pass: returns (class logits B x K, rotation logits B x 4).

    Eval mode (training=False) is a pure function of (x, params).
    """
    if training and cfg.dropout_p > 0 and rng is None:
        raise ContractError("training-mode forward with dropout needs an rng")
    grid = patch_embed(x, cfg, params)
    enc = transformer_encoder(grid.tokens, cfg, params, training, rng, capture)
    feat = cnn_branch(x, cfg, params, training, rng)
    fused = cross_attention_fuse(feat, enc, cfg, params, capture)
    graph = build_graph(TokenGrid(fused, grid.grid_h, grid.grid_w))
    nodes = graph_attention(graph, cfg, params, capture)
    pooled = global_average_pool(nodes)
    return (classify_head(pooled, cfg, params, training, rng),
            rotation_head(pooled, params))


def tiny_config(image_size: int = 32, **overrides) -> ModelConfig:
    """Small configuration for gradient checks and fast tests."""
    base = dict(image_size=image_size, patch_size=16, embed_dim=8, num_heads=2,
                num_encoder_layers=1, mlp_ratio=2.0, cnn_channels=(4,),
                dropout_p=0.0, num_classes=5)
    base.update(overrides)
    return ModelConfig(**base)
