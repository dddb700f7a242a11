"""Architecture specs: schema, file I/O, structural validation, model
construction and the end-to-end forward/backward pass.

Spec file schema (YAML)::

    name: str                       # optional
    input_resolution: int           # square input side, default 224
    in_channels: int                # default 3
    stem:                           # conv layers, applied in order (GELU between)
      - {in_dim, out_dim, kernel, stride, padding}
    groups:                         # ordered block groups
      - count: int                  # identical sequential blocks
        dim: int                    # hidden width D
        heads: int                  # head count H, must divide dim
        kind: mua | ga              # mask unit or global attention
        unit: [h, w] | null         # mask unit size at the group's input grid (mua only)
        q_pool: [ph, pw] | null     # query pooling at the group's first block
        mlp_ratio: number           # default 4
    head: {in_dim, num_classes}

A mask unit is stated at the grid entering its group; after the entry
Q-pool the unit shrinks by the pool factor so it keeps covering the same
image region.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import tensor_core as tc
from . import vit_ops as vo
from .errors import BuildError, ConfigurationError, SpecError

KINDS = (vo.MASK_UNIT, vo.GLOBAL)


@dataclass
class StemConv:
    in_dim: int
    out_dim: int
    kernel: int
    stride: int
    padding: int = 0


@dataclass
class BlockGroup:
    count: int
    dim: int
    heads: int
    kind: str = vo.GLOBAL
    unit: tuple[int, int] | None = None
    q_pool: tuple[int, int] | None = None
    mlp_ratio: float = 4


@dataclass
class HeadConfig:
    in_dim: int
    num_classes: int = 1000


@dataclass
class ArchitectureSpec:
    stem: list[StemConv]
    groups: list[BlockGroup]
    head: HeadConfig
    input_resolution: int = 224
    in_channels: int = 3
    name: str = ""

    def copy(self) -> "ArchitectureSpec":
        # field-wise copy; every leaf is immutable, and this is on the search hot path
        return ArchitectureSpec(
            stem=[StemConv(s.in_dim, s.out_dim, s.kernel, s.stride, s.padding) for s in self.stem],
            groups=[BlockGroup(g.count, g.dim, g.heads, g.kind, g.unit, g.q_pool, g.mlp_ratio) for g in self.groups],
            head=HeadConfig(self.head.in_dim, self.head.num_classes),
            input_resolution=self.input_resolution, in_channels=self.in_channels, name=self.name,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_resolution": self.input_resolution,
            "in_channels": self.in_channels,
            "stem": [
                {"in_dim": c.in_dim, "out_dim": c.out_dim, "kernel": c.kernel, "stride": c.stride, "padding": c.padding}
                for c in self.stem
            ],
            "groups": [
                {
                    "count": g.count, "dim": g.dim, "heads": g.heads, "kind": g.kind,
                    "unit": list(g.unit) if g.unit is not None else None,
                    "q_pool": list(g.q_pool) if g.q_pool is not None else None,
                    "mlp_ratio": g.mlp_ratio,
                }
                for g in self.groups
            ],
            "head": {"in_dim": self.head.in_dim, "num_classes": self.head.num_classes},
        }

    def hash(self) -> str:
        """Content hash ignoring ``name``; stable across runs and platforms."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def q_pool_sites(self) -> int:
        return sum(1 for g in self.groups if g.q_pool is not None)


# parsing -----------------------------------------------------------------------

def _int(d: dict, key: str, where: str, default=None, minimum: int = 1) -> int:
    v = d.get(key, default)
    if v is None or isinstance(v, bool) or not isinstance(v, int):
        raise SpecError(f"{where}.{key} must be an integer, got {v!r}", f"{where}.{key}")
    if v < minimum:
        raise SpecError(f"{where}.{key} must be >= {minimum}, got {v}", f"{where}.{key}")
    return v


def _pair(d: dict, key: str, where: str):
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, int) and not isinstance(v, bool):
        v = [v, v]
    if not isinstance(v, (list, tuple)) or len(v) != 2 or not all(isinstance(t, int) and t >= 1 for t in v):
        raise SpecError(f"{where}.{key} must be a pair of positive integers, got {v!r}", f"{where}.{key}")
    return (int(v[0]), int(v[1]))


def spec_from_dict(d: dict) -> ArchitectureSpec:
    """Build a spec from plain data, raising :class:`SpecError` naming the bad field."""
    if not isinstance(d, dict):
        raise SpecError("spec must be a mapping", "")
    for key in ("stem", "groups", "head"):
        if key not in d:
            raise SpecError(f"missing required key {key!r}", key)
    if not isinstance(d["stem"], list) or not d["stem"]:
        raise SpecError("stem must be a non-empty list", "stem")
    if not isinstance(d["groups"], list) or not d["groups"]:
        raise SpecError("groups must be a non-empty list", "groups")
    stem = []
    for i, s in enumerate(d["stem"]):
        w = f"stem[{i}]"
        if not isinstance(s, dict):
            raise SpecError(f"{w} must be a mapping", w)
        stem.append(StemConv(
            in_dim=_int(s, "in_dim", w), out_dim=_int(s, "out_dim", w), kernel=_int(s, "kernel", w),
            stride=_int(s, "stride", w), padding=_int(s, "padding", w, default=0, minimum=0),
        ))
    groups = []
    for i, g in enumerate(d["groups"]):
        w = f"groups[{i}]"
        if not isinstance(g, dict):
            raise SpecError(f"{w} must be a mapping", w)
        kind = g.get("kind", vo.GLOBAL)
        if kind not in KINDS:
            raise SpecError(f"{w}.kind must be one of {KINDS}, got {kind!r}", f"{w}.kind")
        ratio = g.get("mlp_ratio", 4)
        if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or ratio <= 0:
            raise SpecError(f"{w}.mlp_ratio must be a positive number, got {ratio!r}", f"{w}.mlp_ratio")
        groups.append(BlockGroup(
            count=_int(g, "count", w), dim=_int(g, "dim", w), heads=_int(g, "heads", w), kind=kind,
            unit=_pair(g, "unit", w), q_pool=_pair(g, "q_pool", w), mlp_ratio=ratio,
        ))
    h = d["head"]
    if not isinstance(h, dict):
        raise SpecError("head must be a mapping", "head")
    head = HeadConfig(in_dim=_int(h, "in_dim", "head"), num_classes=_int(h, "num_classes", "head", default=1000))
    name = d.get("name") or ""
    return ArchitectureSpec(
        stem=stem, groups=groups, head=head,
        input_resolution=_int(d, "input_resolution", "spec", default=224),
        in_channels=_int(d, "in_channels", "spec", default=3), name=str(name),
    )


def loads_spec(text: str) -> ArchitectureSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SpecError(f"spec is not valid YAML: {e}") from e
    return spec_from_dict(data)


def load_spec(path) -> ArchitectureSpec:
    """Load a spec file. ``canonical`` and ``toy`` name the packaged specs."""
    if str(path) in PACKAGED:
        return PACKAGED[str(path)]()
    return loads_spec(Path(path).read_text())


def dumps_spec(spec: ArchitectureSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False, default_flow_style=None)


def save_spec(spec: ArchitectureSpec, path) -> None:
    Path(path).write_text(dumps_spec(spec))


def canonical_spec() -> ArchitectureSpec:
    return loads_spec(resources.files("gasvit.data").joinpath("canonical.yaml").read_text())


def toy_spec() -> ArchitectureSpec:
    return loads_spec(resources.files("gasvit.data").joinpath("toy.yaml").read_text())


PACKAGED = {"canonical": canonical_spec, "toy": toy_spec}


# planning & validation -------------------------------------------------------------

@dataclass
class BlockPlan:
    name: str
    cfg: vo.AttentionConfig
    grid_in: tuple[int, int]
    grid_out: tuple[int, int]


@dataclass
class Plan:
    stem_grids: list[tuple[int, int]]
    blocks: list[BlockPlan]
    group_grids: list[tuple[int, int]]  # grid after each group
    final_dim: int

    @property
    def final_grid(self) -> tuple[int, int]:
        return self.blocks[-1].grid_out if self.blocks else self.stem_grids[-1]


def plan(spec: ArchitectureSpec, resolution: int | None = None) -> Plan:
    """Expand a spec into per-block configs and grids.

    Raises :class:`SpecError` at the first infeasibility.
    """
    res = spec.input_resolution if resolution is None else resolution
    H = W = res
    c = spec.in_channels
    grids = []
    for i, s in enumerate(spec.stem):
        if s.in_dim != c:
            raise SpecError(f"stem[{i}].in_dim={s.in_dim} does not match incoming channels {c}", f"stem[{i}].in_dim")
        H, W = (tc.conv_output_size(H, s.kernel, s.stride, s.padding), tc.conv_output_size(W, s.kernel, s.stride, s.padding))
        if H < 1 or W < 1:
            raise SpecError(f"stem[{i}] yields non-positive grid {H}x{W} at resolution {res}", f"stem[{i}]")
        grids.append((H, W))
        c = s.out_dim
    blocks = []
    group_grids = []
    dim = c
    for gi, g in enumerate(spec.groups):
        w = f"groups[{gi}]"
        if g.dim % g.heads:
            raise SpecError(f"{w}.heads does not divide dim ({g.heads} vs {g.dim})", f"{w}.heads")
        if g.kind == vo.MASK_UNIT and g.unit is None:
            raise SpecError(f"{w}.unit is required for mask unit attention", f"{w}.unit")
        if g.kind == vo.GLOBAL and g.unit is not None:
            raise SpecError(f"{w}.unit must be null for global attention", f"{w}.unit")
        hidden = g.dim * g.mlp_ratio
        if hidden != int(round(hidden)):
            raise SpecError(f"{w}.mlp_ratio gives a non-integral MLP width", f"{w}.mlp_ratio")
        unit = g.unit
        if g.kind == vo.MASK_UNIT and (H % unit[0] or W % unit[1]):
            raise SpecError(f"{w}.unit {unit[0]}x{unit[1]} does not divide token grid {H}x{W}", f"{w}.unit")
        for bi in range(g.count):
            pool = g.q_pool if bi == 0 else None
            if pool is not None:
                if g.kind == vo.MASK_UNIT and (unit[0] % pool[0] or unit[1] % pool[1]):
                    raise SpecError(f"{w}.q_pool {pool[0]}x{pool[1]} does not divide unit {unit[0]}x{unit[1]}", f"{w}.q_pool")
                if H % pool[0] or W % pool[1]:
                    raise SpecError(f"{w}.q_pool {pool[0]}x{pool[1]} does not divide token grid {H}x{W}", f"{w}.q_pool")
            cfg = vo.AttentionConfig(
                dim=g.dim, heads=g.heads, kind=g.kind, unit=unit, q_pool=pool,
                dim_in=dim if dim != g.dim else None, mlp_ratio=g.mlp_ratio,
            )
            Ho, Wo = vo.block_output_grid(cfg, H, W)
            blocks.append(BlockPlan(f"{w}.blocks[{bi}]", cfg, (H, W), (Ho, Wo)))
            if pool is not None and unit is not None:
                unit = (unit[0] // pool[0], unit[1] // pool[1])
            H, W, dim = Ho, Wo, g.dim
        group_grids.append((H, W))
    if spec.head.in_dim != dim:
        raise SpecError(f"head.in_dim={spec.head.in_dim} does not match final width {dim}", "head.in_dim")
    return Plan(grids, blocks, group_grids, dim)


@dataclass
class ValidationReport:
    feasible: bool
    errors: list[str] = field(default_factory=list)
    q_pool_sites: int = 0
    has_mua: bool = False
    has_global: bool = False
    mua_before_ga: bool = False
    has_condensation: bool = False
    transitions: list[str] = field(default_factory=list)
    grids: list[tuple[int, int]] = field(default_factory=list)
    block_dims: list[int] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"feasible: {self.feasible}"]
        lines += [f"  error: {e}" for e in self.errors]
        lines += [
            f"q_pool_sites: {self.q_pool_sites}",
            f"has_mua: {self.has_mua}",
            f"has_global: {self.has_global}",
            f"mua_before_ga: {self.mua_before_ga}",
            f"has_condensation: {self.has_condensation}",
        ]
        if self.grids:
            lines.append("group grids: " + ", ".join(f"{h}x{w}" for h, w in self.grids))
        lines += [f"transition: {t}" for t in self.transitions]
        return "\n".join(lines)


def validate(spec: ArchitectureSpec, resolution: int | None = None) -> ValidationReport:
    """Check feasibility and report structural facts. Never raises on content."""
    kinds = [g.kind for g in spec.groups]
    rep = ValidationReport(
        feasible=True,
        q_pool_sites=spec.q_pool_sites,
        has_mua=vo.MASK_UNIT in kinds,
        has_global=vo.GLOBAL in kinds,
    )
    if rep.has_mua and rep.has_global:
        last_mua = max(i for i, k in enumerate(kinds) if k == vo.MASK_UNIT)
        first_ga = min(i for i, k in enumerate(kinds) if k == vo.GLOBAL)
        rep.mua_before_ga = last_mua < first_ga
    # static per-group checks are all reported, the grid walk stops at the first failure
    for gi, g in enumerate(spec.groups):
        if g.heads < 1 or g.dim % g.heads:
            rep.errors.append(f"groups[{gi}].heads does not divide dim ({g.heads} vs {g.dim})")
    try:
        p = plan(spec, resolution)
    except (SpecError, ConfigurationError) as e:
        msg = str(e)
        if msg not in rep.errors:
            rep.errors.append(msg)
    else:
        rep.grids = p.group_grids
        dims = [b.cfg.dim for b in p.blocks]
        rep.block_dims = dims
        prev = spec.stem[-1].out_dim
        for g_i, g in enumerate(spec.groups):
            how = "identity" if g.dim == prev else "projection"
            rep.transitions.append(f"groups[{g_i}]: {prev} -> {g.dim} ({how})")
            prev = g.dim
        rep.has_condensation = len(dims) >= 3 and dims[1] < dims[0] and all(
            b >= a for a, b in zip(dims[1:], dims[2:])
        ) and dims[-1] > dims[1]
    rep.feasible = not rep.errors
    return rep


# model -----------------------------------------------------------------------------

@dataclass
class Model:
    spec: ArchitectureSpec
    plan: Plan
    stem: list[vo.ConvParams]
    pos_embed: np.ndarray
    blocks: list[vo.BlockParams]
    head_norm_g: np.ndarray
    head_norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameter arrays keyed by dotted name (views, not copies)."""
        out = {}
        for i, s in enumerate(self.stem):
            out[f"stem[{i}].w"] = s.w
            out[f"stem[{i}].b"] = s.b
        out["pos_embed"] = self.pos_embed
        for bp, p in zip(self.plan.blocks, self.blocks):
            for k, v in p.arrays().items():
                out[f"{bp.name}.{k}"] = v
        out["head.norm_g"] = self.head_norm_g
        out["head.norm_b"] = self.head_norm_b
        out["head.fc_w"] = self.head_w
        out["head.fc_b"] = self.head_b
        return out

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def astype(self, dtype) -> "Model":
        return Model(
            spec=self.spec, plan=self.plan,
            stem=[vo.ConvParams(s.w.astype(dtype), s.b.astype(dtype), s.stride, s.padding) for s in self.stem],
            pos_embed=self.pos_embed.astype(dtype), blocks=[b.astype(dtype) for b in self.blocks],
            head_norm_g=self.head_norm_g.astype(dtype), head_norm_b=self.head_norm_b.astype(dtype),
            head_w=self.head_w.astype(dtype), head_b=self.head_b.astype(dtype),
        )


def build(spec: ArchitectureSpec, seed: int = 0, dtype=tc.DTYPE) -> Model:
    """Allocate and initialize all parameters, deterministically per seed."""
    rep = validate(spec)
    if not rep.feasible:
        raise BuildError("cannot build infeasible spec: " + "; ".join(rep.errors))
    p = plan(spec)
    rng = np.random.default_rng(seed)
    stem = []
    for s in spec.stem:
        w = vo.trunc_normal(rng, (s.out_dim, s.in_dim, s.kernel, s.kernel), dtype=dtype)
        stem.append(vo.ConvParams(w, np.zeros(s.out_dim, dtype=dtype), s.stride, s.padding))
    h0, w0 = p.stem_grids[-1]
    pos_embed = vo.trunc_normal(rng, (h0, w0, spec.stem[-1].out_dim), dtype=dtype)
    blocks = [vo.init_block_params(bp.cfg, rng, dtype) for bp in p.blocks]
    d = p.final_dim
    return Model(
        spec=spec, plan=p, stem=stem, pos_embed=pos_embed, blocks=blocks,
        head_norm_g=np.ones(d, dtype=dtype), head_norm_b=np.zeros(d, dtype=dtype),
        head_w=vo.trunc_normal(rng, (d, spec.head.num_classes), dtype=dtype),
        head_b=np.zeros(spec.head.num_classes, dtype=dtype),
    )


def _check_images(model: Model, images: np.ndarray) -> None:
    r, c = model.spec.input_resolution, model.spec.in_channels
    if images.ndim != 4 or images.shape[1:] != (c, r, r):
        raise ConfigurationError(f"expected images of shape (B, {c}, {r}, {r}), got {tuple(images.shape)}")


def forward_train(model: Model, images: np.ndarray):
    """Forward pass that keeps everything needed by :func:`backward`."""
    _check_images(model, images)
    x = tc.as_tensor(images, dtype=model.pos_embed.dtype)
    h, stem_cache = vo.patch_embed_forward(x, model.stem, model.pos_embed)
    block_caches = []
    for bp, params in zip(model.plan.blocks, model.blocks):
        h, c = vo.vit_block_forward(h, bp.cfg, params)
        block_caches.append(c)
    B, H, W, d = h.shape
    pooled = h.reshape(B, H * W, d).mean(axis=1)
    normed = tc.layer_norm(pooled, model.head_norm_g, model.head_norm_b, vo.LN_EPS)
    logits = tc.linear(normed, model.head_w, model.head_b)
    cache = dict(stem=stem_cache, blocks=block_caches, grid=h.shape, pooled=pooled, normed=normed)
    return logits, cache


def forward(model: Model, images: np.ndarray) -> np.ndarray:
    """Logits of shape (B, num_classes)."""
    return forward_train(model, images)[0]


def backward(model: Model, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all parameters, keyed like :meth:`Model.parameters`."""
    grads: dict[str, np.ndarray] = {}
    gnormed, grads["head.fc_w"], grads["head.fc_b"] = tc.linear_backward(grad_logits, cache["normed"], model.head_w)
    gpooled, grads["head.norm_g"], grads["head.norm_b"] = tc.layer_norm_backward(
        gnormed, cache["pooled"], model.head_norm_g, vo.LN_EPS
    )
    B, H, W, d = cache["grid"]
    g = np.broadcast_to(gpooled[:, None, None, :] / (H * W), (B, H, W, d)).copy()
    for bp, params, c in reversed(list(zip(model.plan.blocks, model.blocks, cache["blocks"]))):
        g, bgrads = vo.vit_block_backward(g, bp.cfg, params, c)
        for k, v in bgrads.items():
            grads[f"{bp.name}.{k}"] = v
    _, conv_grads, grads["pos_embed"] = vo.patch_embed_backward(g, model.stem, cache["stem"])
    for i, (gw, gb) in enumerate(conv_grads):
        grads[f"stem[{i}].w"] = gw
        grads[f"stem[{i}].b"] = gb
    return grads

