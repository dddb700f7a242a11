"""Hierarchical ViT building blocks: patch embedding, mask unit / global
attention with query pooling, MLP, and the pre-norm transformer block.

Token grids are laid out as (B, H, W, d). Attention itself runs on token
sequences (N, T, d) where a sequence is either a whole image (global
attention) or one mask unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, DimensionError

GLOBAL = "ga"
MASK_UNIT = "mua"
LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionConfig:
    """Width, head count, attention kind and query pooling of one block.

    ``dim_in`` differs from ``dim`` only in the first block of a group that
    changes width; the QKV projection and the residual shortcut then map
    ``dim_in -> dim``.
    """

    dim: int
    heads: int
    kind: str = GLOBAL
    unit: tuple[int, int] | None = None
    q_pool: tuple[int, int] | None = None
    dim_in: int | None = None
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"heads={self.heads} does not divide dim={self.dim}")
        if self.kind not in (GLOBAL, MASK_UNIT):
            raise ConfigurationError(f"unknown attention kind {self.kind!r}")
        if self.kind == MASK_UNIT:
            if self.unit is None or min(self.unit) < 1:
                raise ConfigurationError(f"mask unit attention needs a positive unit size, got {self.unit}")
            if self.q_pool is not None and (self.unit[0] % self.q_pool[0] or self.unit[1] % self.q_pool[1]):
                raise ConfigurationError(f"q_pool {self.q_pool} does not divide mask unit {self.unit}")
        if self.q_pool is not None and min(self.q_pool) < 1:
            raise ConfigurationError(f"invalid q_pool {self.q_pool}")
        if self.hidden_dim < 1 or self.hidden_dim != self.dim * self.mlp_ratio:
            raise ConfigurationError(f"mlp_ratio={self.mlp_ratio} gives a non-integral hidden width for dim={self.dim}")

    @property
    def in_dim(self) -> int:
        return self.dim if self.dim_in is None else self.dim_in

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def pool_factor(self) -> tuple[int, int]:
        return self.q_pool or (1, 1)

    @property
    def has_projection(self) -> bool:
        return self.in_dim != self.dim


@dataclass
class BlockParams:
    """Weights of one ViT block. Linear weights are stored (in, out)."""

    norm1_g: np.ndarray
    norm1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    shortcut_w: np.ndarray | None = None
    shortcut_b: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out

    def astype(self, dtype) -> "BlockParams":
        return BlockParams(**{k: (None if v is None else v.astype(dtype)) for k, v in vars(self).items()})


@dataclass
class ConvParams:
    w: np.ndarray
    b: np.ndarray
    stride: int = 1
    padding: int = 0


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=tc.DTYPE) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_block_params(cfg: AttentionConfig, rng: np.random.Generator, dtype=tc.DTYPE) -> BlockParams:
    d, di, hd = cfg.dim, cfg.in_dim, cfg.hidden_dim
    zeros = lambda n: np.zeros(n, dtype=dtype)
    ones = lambda n: np.ones(n, dtype=dtype)
    p = BlockParams(
        norm1_g=ones(di), norm1_b=zeros(di),
        qkv_w=trunc_normal(rng, (di, 3 * d), dtype=dtype), qkv_b=zeros(3 * d),
        proj_w=trunc_normal(rng, (d, d), dtype=dtype), proj_b=zeros(d),
        norm2_g=ones(d), norm2_b=zeros(d),
        fc1_w=trunc_normal(rng, (d, hd), dtype=dtype), fc1_b=zeros(hd),
        fc2_w=trunc_normal(rng, (hd, d), dtype=dtype), fc2_b=zeros(d),
    )
    if cfg.has_projection:
        p.shortcut_w = trunc_normal(rng, (di, d), dtype=dtype)
        p.shortcut_b = zeros(d)
    return p


# mask units --------------------------------------------------------------------

def mask_unit_partition(x: np.ndarray, unit_h: int, unit_w: int) -> np.ndarray:
    """(B, H, W, d) -> (B * nUnits, unit_h * unit_w, d).

    Units are ordered row-major within each image; tokens row-major within
    each unit.
    """
    B, H, W, d = x.shape
    if unit_h < 1 or unit_w < 1 or H % unit_h or W % unit_w:
        raise ConfigurationError(f"mask unit {unit_h}x{unit_w} does not divide token grid {H}x{W}")
    nh, nw = H // unit_h, W // unit_w
    return np.ascontiguousarray(
        x.reshape(B, nh, unit_h, nw, unit_w, d).transpose(0, 1, 3, 2, 4, 5).reshape(B * nh * nw, unit_h * unit_w, d)
    )


def mask_unit_unpartition(x: np.ndarray, batch: int, H: int, W: int, unit_h: int, unit_w: int) -> np.ndarray:
    """Inverse of :func:`mask_unit_partition`."""
    nh, nw = H // unit_h, W // unit_w
    d = x.shape[-1]
    if x.shape != (batch * nh * nw, unit_h * unit_w, d):
        raise DimensionError(f"cannot unpartition {tuple(x.shape)} into {batch}x{H}x{W} with unit {unit_h}x{unit_w}")
    return np.ascontiguousarray(
        x.reshape(batch, nh, nw, unit_h, unit_w, d).transpose(0, 1, 3, 2, 4, 5).reshape(batch, H, W, d)
    )


# attention -----------------------------------------------------------------------

def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    N, T, d = t.shape
    return np.ascontiguousarray(t.reshape(N, T, heads, d // heads).transpose(0, 2, 1, 3))


def _merge_heads(t: np.ndarray) -> np.ndarray:
    N, h, T, dh = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3).reshape(N, T, h * dh))


def attention_forward(x: np.ndarray, cfg: AttentionConfig, params: BlockParams, grid: tuple[int, int] | None = None):
    """Multi-head attention over sequences ``x`` of shape (N, T, dim_in).

    With ``cfg.q_pool`` set, queries are max-pooled over the (gh, gw) layout
    ``grid`` of each sequence; keys and values stay at full length.
    Returns ``(out, cache)`` with ``out`` of shape (N, T', dim).
    """
    N, T, di = x.shape
    if di != cfg.in_dim:
        raise DimensionError(f"attention: token width {di} != configured input width {cfg.in_dim}")
    d, h = cfg.dim, cfg.heads
    qkv = tc.linear(x, params.qkv_w, params.qkv_b)
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    if cfg.q_pool is not None:
        if grid is None or grid[0] * grid[1] != T:
            raise ConfigurationError(f"attention: q_pool needs a token layout matching T={T}, got grid={grid}")
        ph, pw = cfg.q_pool
        q_grid = np.ascontiguousarray(q).reshape(N, grid[0], grid[1], d)
        q = tc.max_pool_tokens(q_grid, ph, pw).reshape(N, T // (ph * pw), d)
    Tq = q.shape[1]
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    qs = qh * scale
    kt = np.ascontiguousarray(kh.transpose(0, 1, 3, 2))
    probs = tc.softmax_lastdim(tc.matmul(qs, kt))
    oh = tc.matmul(probs, vh)
    o = _merge_heads(oh)
    out = tc.linear(o, params.proj_w, params.proj_b)
    cache = dict(x=x, grid=grid, qkv=qkv, Tq=Tq, qs=qs, kt=kt, vh=vh, probs=probs, o=o, scale=scale)
    return out, cache


def attention_backward(grad: np.ndarray, cfg: AttentionConfig, params: BlockParams, cache: dict):
    """Returns ``(grad_x, grads)`` where ``grads`` is keyed like BlockParams."""
    x, qkv, scale = cache["x"], cache["qkv"], cache["scale"]
    N, T, _ = x.shape
    d, h = cfg.dim, cfg.heads
    go, g_proj_w, g_proj_b = tc.linear_backward(grad, cache["o"], params.proj_w)
    goh = _split_heads(go, h)
    gprobs, gvh = tc.matmul_backward(goh, cache["probs"], cache["vh"])
    gscores = tc.softmax_backward(gprobs, cache["probs"])
    gqs, gkt = tc.matmul_backward(gscores, cache["qs"], cache["kt"])
    gq = _merge_heads(gqs * scale)
    gk = _merge_heads(gkt.transpose(0, 1, 3, 2))
    gv = _merge_heads(gvh)
    if cfg.q_pool is not None:
        ph, pw = cfg.q_pool
        gh, gw = cache["grid"]
        q_full = np.ascontiguousarray(qkv[..., :d]).reshape(N, gh, gw, d)
        gq = tc.max_pool_tokens_backward(gq.reshape(N, gh // ph, gw // pw, d), q_full, ph, pw).reshape(N, T, d)
    gqkv = np.concatenate([gq, gk, gv], axis=-1)
    gx, g_qkv_w, g_qkv_b = tc.linear_backward(gqkv, x, params.qkv_w)
    grads = dict(qkv_w=g_qkv_w, qkv_b=g_qkv_b, proj_w=g_proj_w, proj_b=g_proj_b)
    return gx, grads


def attention(x, cfg: AttentionConfig, params: BlockParams, grid=None) -> np.ndarray:
    return attention_forward(x, cfg, params, grid)[0]


# ViT block ---------------------------------------------------------------------

def block_output_grid(cfg: AttentionConfig, H: int, W: int) -> tuple[int, int]:
    """Validate the block against an (H, W) grid and return its output grid."""
    ph, pw = cfg.pool_factor
    if cfg.kind == MASK_UNIT:
        uh, uw = cfg.unit
        if H % uh or W % uw:
            raise ConfigurationError(f"mask unit {uh}x{uw} does not divide token grid {H}x{W}")
    if H % ph or W % pw:
        raise ConfigurationError(f"q_pool {ph}x{pw} does not divide token grid {H}x{W}")
    return H // ph, W // pw


def vit_block_forward(x: np.ndarray, cfg: AttentionConfig, params: BlockParams):
    """Pre-norm block on a (B, H, W, dim_in) grid; returns ``(y, cache)``."""
    B, H, W, di = x.shape
    if di != cfg.in_dim:
        raise DimensionError(f"vit_block: grid width {di} != configured input width {cfg.in_dim}")
    Ho, Wo = block_output_grid(cfg, H, W)
    ph, pw = cfg.pool_factor
    xn = tc.layer_norm(x, params.norm1_g, params.norm1_b, LN_EPS)
    if cfg.kind == MASK_UNIT:
        uh, uw = cfg.unit
        seq, grid = mask_unit_partition(xn, uh, uw), (uh, uw)
    else:
        seq, grid = xn.reshape(B, H * W, di), (H, W)
    a, acache = attention_forward(seq, cfg, params, grid)
    if cfg.kind == MASK_UNIT:
        a_grid = mask_unit_unpartition(a, B, Ho, Wo, uh // ph, uw // pw)
    else:
        a_grid = a.reshape(B, Ho, Wo, cfg.dim)
    # a width-changing shortcut projects the normalized input, as in Hiera
    s_full = tc.linear(xn, params.shortcut_w, params.shortcut_b) if cfg.has_projection else x
    s = tc.max_pool_tokens(s_full, ph, pw) if cfg.q_pool is not None else s_full
    x1 = s + a_grid
    xn2 = tc.layer_norm(x1, params.norm2_g, params.norm2_b, LN_EPS)
    hpre = tc.linear(xn2, params.fc1_w, params.fc1_b)
    hact = tc.gelu(hpre)
    y = x1 + tc.linear(hact, params.fc2_w, params.fc2_b)
    cache = dict(x=x, xn=xn, acache=acache, s_full=s_full, x1=x1, xn2=xn2, hpre=hpre, hact=hact)
    return y, cache


def vit_block_backward(grad: np.ndarray, cfg: AttentionConfig, params: BlockParams, cache: dict):
    x = cache["x"]
    B, H, W, di = x.shape
    ph, pw = cfg.pool_factor
    Ho, Wo = H // ph, W // pw
    ghact, g_fc2_w, g_fc2_b = tc.linear_backward(grad, cache["hact"], params.fc2_w)
    ghpre = tc.gelu_backward(ghact, cache["hpre"])
    gxn2, g_fc1_w, g_fc1_b = tc.linear_backward(ghpre, cache["xn2"], params.fc1_w)
    gx1, g_n2g, g_n2b = tc.layer_norm_backward(gxn2, cache["x1"], params.norm2_g, LN_EPS)
    gx1 = gx1 + grad
    # attention branch
    if cfg.kind == MASK_UNIT:
        uh, uw = cfg.unit
        ga = mask_unit_partition(gx1, uh // ph, uw // pw)
    else:
        ga = gx1.reshape(B, Ho * Wo, cfg.dim)
    gseq, grads = attention_backward(ga, cfg, params, cache["acache"])
    if cfg.kind == MASK_UNIT:
        gxn = mask_unit_unpartition(gseq, B, H, W, uh, uw)
    else:
        gxn = gseq.reshape(B, H, W, di)
    gs = tc.max_pool_tokens_backward(gx1, cache["s_full"], ph, pw) if cfg.q_pool is not None else gx1
    if cfg.has_projection:
        gsxn, grads["shortcut_w"], grads["shortcut_b"] = tc.linear_backward(gs, cache["xn"], params.shortcut_w)
        gxn = gxn + gsxn
    gx, g_n1g, g_n1b = tc.layer_norm_backward(gxn, x, params.norm1_g, LN_EPS)
    if not cfg.has_projection:
        gx = gx + gs
    grads.update(
        norm1_g=g_n1g, norm1_b=g_n1b, norm2_g=g_n2g, norm2_b=g_n2b,
        fc1_w=g_fc1_w, fc1_b=g_fc1_b, fc2_w=g_fc2_w, fc2_b=g_fc2_b,
    )
    return gx, grads


def vit_block(x, cfg: AttentionConfig, params: BlockParams) -> np.ndarray:
    return vit_block_forward(x, cfg, params)[0]


# patch embedding -----------------------------------------------------------------

def patch_embed_forward(image: np.ndarray, stem: list[ConvParams], pos_embed: np.ndarray):
    """Strided conv stem (GELU between convs) -> (B, H0, W0, d0) grid + pos_embed."""
    if image.ndim != 4:
        raise DimensionError(f"patch_embed: expected (B, C, H, W) image, got {tuple(image.shape)}")
    acts = []
    h = image
    for i, layer in enumerate(stem):
        if i > 0:
            acts.append(h)
            h = tc.gelu(h)
        h = tc.conv2d(h, layer.w, layer.b, layer.stride, layer.padding)
    tokens = h.transpose(0, 2, 3, 1)
    if tokens.shape[1:] != pos_embed.shape:
        raise ConfigurationError(
            f"patch_embed: stem produced grid {tuple(tokens.shape[1:])} but positional embedding is "
            f"{tuple(pos_embed.shape)}"
        )
    return np.ascontiguousarray(tokens + pos_embed), dict(image=image, acts=acts)


def patch_embed_backward(grad: np.ndarray, stem: list[ConvParams], cache: dict):
    """Returns ``(grad_image, conv_grads, grad_pos_embed)``."""
    g_pos = grad.sum(axis=0)
    g = np.ascontiguousarray(grad.transpose(0, 3, 1, 2))
    conv_grads = [None] * len(stem)
    inputs = [cache["image"]] + [tc.gelu(a) for a in cache["acts"]]
    for i in range(len(stem) - 1, -1, -1):
        layer = stem[i]
        g, gw, gb = tc.conv2d_backward(g, inputs[i], layer.w, layer.stride, layer.padding)
        conv_grads[i] = (gw, gb)
        if i > 0:
            g = tc.gelu_backward(g, cache["acts"][i - 1])
    return g, conv_grads, g_pos


def patch_embed(image, stem: list[ConvParams], pos_embed) -> np.ndarray:
    return patch_embed_forward(image, stem, pos_embed)[0]
