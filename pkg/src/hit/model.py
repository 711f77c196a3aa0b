"""Hindered Transformer: a ViT variant whose CLS token is an exact sum of patch terms.

Patch tokens are only ever updated by token-wise MLPs, so each stays a function
of its own patch (or its own pooled block). The CLS token is only updated by
attention reading the patch tokens, which lets the final CLS be unrolled into
per-layer, per-token contribution vectors.

Two forward routes exist on purpose:

* :meth:`HiT.forward` runs on :class:`~hit.tensor.Tensor` with the usual
  concatenate-then-project attention. It is what training differentiates.
* :func:`forward_with_ledger` runs on plain arrays and decomposes every
  attention read into per-token terms. Its grand sum must match the first
  route, which is how the decomposition is checked.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor, avg_pool2_array, gelu_array, layer_norm_array, softmax_array


class ConfigError(ValueError):
    """Model configuration or input does not fit together."""


FINAL_LN_MODES = ("fold", "disable")
POS_INITS = ("sincos", "random")


@dataclass(frozen=True)
class HiTConfig:
    depth: int = 4
    d_model: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    image_size: int = 64
    patch_size: int = 8
    pool_layers: tuple[int, ...] = (2,)
    num_classes: int = 4
    attn_dropout: float = 0.2
    final_ln_mode: str = "fold"
    last_mlp_removed: bool = True
    ln_eps: float = 1e-6
    pos_init: str = "sincos"

    def __post_init__(self):
        object.__setattr__(self, "pool_layers", tuple(sorted(int(p) for p in self.pool_layers)))
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("attn_dropout must be in [0, 1)")
        if self.final_ln_mode not in FINAL_LN_MODES:
            raise ConfigError(f"final_ln_mode must be one of {FINAL_LN_MODES}")
        if self.pos_init not in POS_INITS:
            raise ConfigError(f"pos_init must be one of {POS_INITS}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if len(set(self.pool_layers)) != len(self.pool_layers):
            raise ConfigError("pool_layers has duplicates")
        side = self.grid_side
        for p in self.pool_layers:
            if not 0 < p < self.depth:
                raise ConfigError(f"pool layer {p} outside 1..{self.depth - 1}")
            if side % 2:
                raise ConfigError(f"grid side {side} is odd at pool layer {p}")
            side //= 2

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def hidden(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def layer_sides(self) -> list[int]:
        """Grid side seen by each block (after any pooling in front of it)."""
        sides, side = [], self.grid_side
        for layer in range(self.depth):
            if layer in self.pool_layers:
                side //= 2
            sides.append(side)
        return sides

    def pools_before(self, layer: int) -> int:
        return sum(1 for p in self.pool_layers if p <= layer)

    def has_mlp(self, layer: int) -> bool:
        return not (self.last_mlp_removed and layer == self.depth - 1)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_shapes(cfg: HiTConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, n = cfg.d_model, cfg.grid_side
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["cls_token"] = (d,)
    shapes["patch_embed.weight"] = (cfg.patch_dim, d)
    shapes["patch_embed.bias"] = (d,)
    shapes["pos_embed"] = (n, n, d)
    for layer in range(cfg.depth):
        b = f"blocks.{layer}."
        shapes[b + "norm1.weight"] = (d,)
        shapes[b + "norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "proj"):
            shapes[b + f"attn.{proj}.weight"] = (d, d)
            shapes[b + f"attn.{proj}.bias"] = (d,)
        if cfg.has_mlp(layer):
            shapes[b + "norm2.weight"] = (d,)
            shapes[b + "norm2.bias"] = (d,)
            shapes[b + "mlp.fc1.weight"] = (d, cfg.hidden)
            shapes[b + "mlp.fc1.bias"] = (cfg.hidden,)
            shapes[b + "mlp.fc2.weight"] = (cfg.hidden, d)
            shapes[b + "mlp.fc2.bias"] = (d,)
    if cfg.final_ln_mode == "fold":
        shapes["norm.weight"] = (d,)
        shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def count_parameters(cfg: HiTConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return trunc_normal(rng, shape)


def sincos_pos_embed(side: int, d: int) -> np.ndarray:
    """2-D sine/cosine table ``(side, side, d)``: a quarter of the channels per (axis, sin/cos).

    Channels left over when ``d`` is not a multiple of 4 are zero.
    """
    q = d // 4
    out = np.zeros((side, side, d))
    if q == 0:
        return out
    omega = 1.0 / 10000.0 ** (np.arange(q) / q)
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    r = rows[..., None] * omega
    c = cols[..., None] * omega
    out[..., : 4 * q] = np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=-1)
    return out


def init_params(cfg: HiTConfig, seed: int = 0, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Fresh parameters. The random stream does not depend on ``pos_init``."""
    rng = np.random.default_rng(seed)
    params = OrderedDict(
        (name, init_param(name, shape, rng).astype(dtype)) for name, shape in param_shapes(cfg).items()
    )
    if cfg.pos_init == "sincos":
        params["pos_embed"] = sincos_pos_embed(cfg.grid_side, cfg.d_model).astype(dtype)
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., H, W, 3)`` images to ``(..., H/p, W/p, p*p*3)`` flattened patches."""
    *lead, h, w, c = images.shape
    p = patch_size
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 1)  # (..., H/p, W/p, p, p, c)
    return x.reshape(*lead, h // p, w // p, p * p * c)


def check_images(images: np.ndarray, cfg: HiTConfig) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim < 3 or images.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(
            f"expected images of shape (..., {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}"
        )
    return images


# ---------------------------------------------------------------------------
# Tensor route
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Intermediates captured by :meth:`HiT.forward`, indexed by block."""

    attention: list[np.ndarray] = field(default_factory=list)  # (B, h, M) per block
    grids: list[Tensor] = field(default_factory=list)  # block input grid, after pooling
    cls: list[Tensor] = field(default_factory=list)  # block input CLS
    final_cls: Tensor | None = None


class HiT:
    """Parameters plus the differentiable forward pass."""

    def __init__(self, cfg: HiTConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, seed)
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params: OrderedDict[str, Tensor] = OrderedDict(
            (name, Tensor(np.array(params[name]), requires_grad=True, name=name)) for name in expected
        )

    @property
    def dtype(self):
        return self.params["cls_token"].dtype

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def astype(self, dtype) -> HiT:
        return HiT(self.cfg, {k: v.data.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> HiT:
        return HiT(self.cfg, {k: v.data.copy() for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def forward(
        self,
        images,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: ForwardTrace | None = None,
        drop_layers=(),
    ) -> Tensor:
        """Logits for a batch ``(B, H, W, 3)`` of images.

        ``drop_layers`` removes the attention read of those blocks from the
        CLS update; their output bias is still added.
        """
        cfg = self.cfg
        images = check_images(images, cfg)
        if images.ndim == 3:
            images = images[None]
        B = images.shape[0]
        d, h, dk = cfg.d_model, cfg.heads, cfg.d_k
        eps = cfg.ln_eps
        p = self._p

        patches = Tensor(patchify(images, cfg.patch_size).astype(self.dtype, copy=False))
        grid = patches @ p("patch_embed.weight") + p("patch_embed.bias") + p("pos_embed")
        cls = Tensor(np.zeros((B, d), dtype=self.dtype)) + p("cls_token")
        scale = 1.0 / math.sqrt(dk)

        for layer in range(cfg.depth):
            b = f"blocks.{layer}."
            if layer in cfg.pool_layers:
                grid = T.avg_pool2(grid)
            n = grid.shape[1]
            m = n * n
            if trace is not None:
                trace.grids.append(grid)
                trace.cls.append(cls)

            g1, b1 = p(b + "norm1.weight"), p(b + "norm1.bias")
            kv = T.layer_norm(grid, g1, b1, eps).reshape(B, m, d)
            qn = T.layer_norm(cls, g1, b1, eps)
            q = (qn @ p(b + "attn.q.weight") + p(b + "attn.q.bias")).reshape(B, h, 1, dk)
            k = (kv @ p(b + "attn.k.weight") + p(b + "attn.k.bias")).reshape(B, m, h, dk)
            v = (kv @ p(b + "attn.v.weight") + p(b + "attn.v.bias")).reshape(B, m, h, dk)
            scores = (q @ k.transpose(0, 2, 3, 1)) * scale  # (B, h, 1, m)
            attn = T.softmax(scores, axis=-1)
            attn = T.dropout(attn, cfg.attn_dropout, training, rng)
            if trace is not None:
                trace.attention.append(attn.data[:, :, 0, :].copy())
            if layer in drop_layers:
                cls = cls + p(b + "attn.proj.bias")
            else:
                heads = (attn @ v.transpose(0, 2, 1, 3)).reshape(B, d)  # head-major concat
                cls = cls + (heads @ p(b + "attn.proj.weight") + p(b + "attn.proj.bias"))

            if cfg.has_mlp(layer):
                u = T.layer_norm(grid, p(b + "norm2.weight"), p(b + "norm2.bias"), eps)
                u = T.gelu(u @ p(b + "mlp.fc1.weight") + p(b + "mlp.fc1.bias"))
                grid = grid + (u @ p(b + "mlp.fc2.weight") + p(b + "mlp.fc2.bias"))

        if trace is not None:
            trace.final_cls = cls
        if cfg.final_ln_mode == "fold":
            cls = T.layer_norm(cls, p("norm.weight"), p("norm.bias"), eps)
        return cls @ p("head.weight") + p("head.bias")

    __call__ = forward

    def predict_logits(self, images, batch_size: int = 256, drop_layers=()) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size], drop_layers=drop_layers).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.num_classes))


# ---------------------------------------------------------------------------
# Array route: per-token decomposition
# ---------------------------------------------------------------------------

@dataclass
class TokenState:
    layer: int
    cls: np.ndarray  # (..., d)
    grid: np.ndarray  # (..., n, n, d)


@dataclass
class ContributionLedger:
    """Per-layer contribution vectors whose grand sum is the final CLS.

    ``layers[l]`` has shape ``(..., n_l, n_l, d)`` and already includes the
    layer's share of the output bias and of the initial CLS vector.
    """

    layers: list[np.ndarray]
    bias_shares: list[np.ndarray]
    cls_shares: list[np.ndarray]
    per_token: list[np.ndarray]

    def layer_totals(self) -> list[np.ndarray]:
        return [c.sum(axis=(-3, -2)) for c in self.layers]

    def total(self) -> np.ndarray:
        return sum(self.layer_totals())

    @property
    def num_entries(self) -> int:
        return sum(c.shape[-3] * c.shape[-2] for c in self.layers)


def _params(params) -> dict[str, np.ndarray]:
    if isinstance(params, HiT):
        return params.arrays()
    return {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}


def patch_embed(images, params, cfg: HiTConfig) -> TokenState:
    images = check_images(images, cfg)
    P = _params(params)
    dtype = P["cls_token"].dtype
    patches = patchify(images, cfg.patch_size).astype(dtype, copy=False)
    grid = patches @ P["patch_embed.weight"] + P["patch_embed.bias"] + P["pos_embed"]
    cls = np.broadcast_to(P["cls_token"], grid.shape[:-3] + (cfg.d_model,)).copy()
    return TokenState(0, cls, grid)


def single_query_attention(query, keys_values, wq, bq, wk, bk, wv, bv, weights=None):
    """One attention head read by a single query.

    Returns ``(output, weights, per_token_terms)`` where ``per_token_terms[v]``
    is ``s(v) * (v @ wv + bv)`` and sums to ``output``.
    Shapes: query ``(..., d)``, keys_values ``(..., M, d)``.
    """
    q = query @ wq + bq
    k = keys_values @ wk + bk
    v = keys_values @ wv + bv
    if weights is None:
        scores = np.einsum("...k,...mk->...m", q, k) / np.sqrt(np.asarray(q.shape[-1], q.dtype))
        weights = softmax_array(scores, axis=-1)
    terms = weights[..., None] * v
    return terms.sum(axis=-2), weights, terms


def mha_cls(query, keys_values, P: dict, prefix: str, heads: int, weights=None, keep: bool = True):
    """Multi-head attention of one query over ``M`` tokens, split per token.

    ``per_token[v] = sum_i s_i(v) (v W_v^i + b_v^i) W_o^i``. Returns
    ``(output, per_token, bias, weights)`` with ``output = bias + per_token.sum(-2)``.
    ``weights`` optionally supplies attention probabilities ``(..., h, M)``.
    """
    d = query.shape[-1]
    dk = d // heads
    wo = P[prefix + "proj.weight"]
    bo = P[prefix + "proj.bias"]
    per_token = np.zeros(keys_values.shape[:-1] + (d,), dtype=keys_values.dtype)
    all_w = []
    for i in range(heads):
        sl = slice(i * dk, (i + 1) * dk)
        _, w, terms = single_query_attention(
            query,
            keys_values,
            P[prefix + "q.weight"][:, sl],
            P[prefix + "q.bias"][sl],
            P[prefix + "k.weight"][:, sl],
            P[prefix + "k.bias"][sl],
            P[prefix + "v.weight"][:, sl],
            P[prefix + "v.bias"][sl],
            weights=None if weights is None else weights[..., i, :],
        )
        all_w.append(w)
        per_token = per_token + terms @ wo[sl, :]
    if not keep:
        per_token = np.zeros_like(per_token)
    output = bo + per_token.sum(axis=-2)
    return output, per_token, bo, np.stack(all_w, axis=-2)


def attention_weights(query, keys_values, P: dict, prefix: str, heads: int) -> np.ndarray:
    """Softmax probabilities ``(..., h, M)`` of a single query over ``M`` tokens."""
    dk = query.shape[-1] // heads
    out = []
    for i in range(heads):
        sl = slice(i * dk, (i + 1) * dk)
        q = query @ P[prefix + "q.weight"][:, sl] + P[prefix + "q.bias"][sl]
        k = keys_values @ P[prefix + "k.weight"][:, sl] + P[prefix + "k.bias"][sl]
        scores = np.einsum("...k,...mk->...m", q, k) / np.sqrt(np.asarray(dk, q.dtype))
        out.append(softmax_array(scores, axis=-1))
    return np.stack(out, axis=-2)


def hit_block(
    state: TokenState,
    params,
    cfg: HiTConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    keep: bool = True,
):
    """Advance one HiT block.

    The CLS token reads the layer-normalized grid through attention; grid
    tokens only go through their own MLP. Returns ``(next_state,
    per_token, bias, weights)``, ``per_token`` shaped like the grid.
    """
    P = _params(params)
    layer = state.layer
    b = f"blocks.{layer}."
    eps = cfg.ln_eps
    grid = state.grid
    n = grid.shape[-2]
    g1, b1 = P[b + "norm1.weight"], P[b + "norm1.bias"]
    kv = layer_norm_array(grid, g1, b1, eps).reshape(grid.shape[:-3] + (n * n, cfg.d_model))
    qn = layer_norm_array(state.cls, g1, b1, eps)
    weights = None
    if training and cfg.attn_dropout > 0:
        if rng is None:
            raise ValueError("attention dropout in training mode needs a generator")
        w = attention_weights(qn, kv, P, b + "attn.", cfg.heads)
        mask = (rng.random(w.shape) >= cfg.attn_dropout).astype(w.dtype)
        weights = w * mask / np.asarray(1.0 - cfg.attn_dropout, w.dtype)
    out, per_token, bias, w = mha_cls(qn, kv, P, b + "attn.", cfg.heads, weights=weights, keep=keep)
    cls = state.cls + out
    if cfg.has_mlp(layer):
        u = layer_norm_array(grid, P[b + "norm2.weight"], P[b + "norm2.bias"], eps)
        u = gelu_array(u @ P[b + "mlp.fc1.weight"] + P[b + "mlp.fc1.bias"])
        grid = grid + (u @ P[b + "mlp.fc2.weight"] + P[b + "mlp.fc2.bias"])
    per_token = per_token.reshape(state.grid.shape)
    return TokenState(layer + 1, cls, grid), per_token, bias, w


def pool_tokens(state: TokenState) -> TokenState:
    n = state.grid.shape[-2]
    if n % 2:
        raise ConfigError(f"cannot pool an odd grid side {n}")
    return TokenState(state.layer, state.cls, avg_pool2_array(state.grid))


@dataclass
class FoldedLogits:
    """Per-entry class logits ``(..., n_l, n_l, C)`` per layer; they sum to ``logits``."""

    layers: list[np.ndarray]
    logits: np.ndarray
    scale: np.ndarray  # (..., d) multiplicative part of the frozen final norm
    shift: np.ndarray  # (..., C) additive part after the head, spread over entries

    def layer_logits(self) -> list[np.ndarray]:
        return [z.sum(axis=(-3, -2)) for z in self.layers]


def fold_final_layernorm(final_cls, ledger: ContributionLedger, params, cfg: HiTConfig) -> FoldedLogits:
    """Push the final LayerNorm and linear head through every ledger entry.

    The norm is frozen at the statistics of ``final_cls`` so it becomes an
    affine map; its linear part acts on each entry and the constant part
    (plus the head bias) is spread evenly over all entries.
    """
    P = _params(params)
    W, bias = P["head.weight"], P["head.bias"]
    if cfg.final_ln_mode == "fold":
        gamma, beta = P["norm.weight"], P["norm.bias"]
        mu = final_cls.mean(axis=-1, keepdims=True)
        xc = final_cls - mu
        sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + np.asarray(cfg.ln_eps, xc.dtype))
        scale = gamma / sigma
        shift = (beta - mu * scale) @ W + bias
        logits = layer_norm_array(final_cls, gamma, beta, cfg.ln_eps) @ W + bias
    else:
        scale = np.ones_like(final_cls)
        shift = np.broadcast_to(bias, final_cls.shape[:-1] + bias.shape).copy()
        logits = final_cls @ W + bias
    share = shift / np.asarray(ledger.num_entries, shift.dtype)
    layers = [(entries * scale[..., None, None, :]) @ W + share[..., None, None, :] for entries in ledger.layers]
    return FoldedLogits(layers, logits, scale, shift)


@dataclass
class LedgerResult:
    logits: np.ndarray
    ledger: ContributionLedger
    folded: FoldedLogits
    final_cls: np.ndarray
    attention: list[np.ndarray]  # (..., h, M_l) per block
    states: list[TokenState]  # block inputs after pooling, then the final state


def forward_with_ledger(
    images,
    params,
    cfg: HiTConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    drop_layers=(),
) -> LedgerResult:
    """Run the model and return logits together with the exact contribution ledger.

    Entry ``n`` of layer ``l`` is ``v'_l(n) + b_o^l / M_l + x0 / (L * M_l)``
    with ``M_l`` the token count of that layer, so every layer carries
    exactly ``x0 / L`` of the initial CLS even when pooling changes ``M_l``.
    """
    P = _params(params)
    state = patch_embed(images, P, cfg)
    x0 = state.cls
    L = cfg.depth
    layers, bias_shares, cls_shares, per_tokens, attention, states = [], [], [], [], [], []
    for layer in range(L):
        if layer in cfg.pool_layers:
            state = pool_tokens(state)
        states.append(state)
        nxt, per_token, bias, w = hit_block(
            state, P, cfg, training=training, rng=rng, keep=layer not in drop_layers
        )
        m = per_token.shape[-3] * per_token.shape[-2]
        b_share = bias / np.asarray(m, bias.dtype)
        c_share = x0 / np.asarray(L * m, x0.dtype)
        layers.append(per_token + b_share + c_share[..., None, None, :])
        bias_shares.append(b_share)
        cls_shares.append(c_share)
        per_tokens.append(per_token)
        attention.append(w)
        state = nxt
    states.append(state)
    ledger = ContributionLedger(layers, bias_shares, cls_shares, per_tokens)
    folded = fold_final_layernorm(state.cls, ledger, P, cfg)
    return LedgerResult(folded.logits, ledger, folded, state.cls, attention, states)


def with_config(cfg: HiTConfig, **changes) -> HiTConfig:
    return replace(cfg, **changes)
