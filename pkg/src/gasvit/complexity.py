"""Closed-form parameter and FLOP counts for architecture specs.

FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP) for a single
image. Normalization, softmax, GELU, residual adds and pooling are
excluded unless ``include_nonlinear`` is set, in which case each of them
is charged one op per element it produces.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from . import vit_ops as vo
from .arch import ArchitectureSpec, plan

MAC = "MAC"
DOUBLE = "2xMAC"


@dataclass
class LayerRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    rows: list[LayerRow]
    resolution: int
    convention: str = MAC
    include_nonlinear: bool = False
    total_params: int = field(init=False)
    total_flops: int = field(init=False)

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        self.total_flops = sum(r.flops for r in self.rows)

    def to_text(self) -> str:
        w = max([len(r.name) for r in self.rows] + [len("TOTAL")])
        kw = max([len(r.kind) for r in self.rows] + [4])
        head = f"{'layer':<{w}}  {'kind':<{kw}}  {'params':>12}  {'flops':>15}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.name:<{w}}  {r.kind:<{kw}}  {r.params:>12,d}  {r.flops:>15,d}")
        lines.append("-" * len(head))
        lines.append(f"{'TOTAL':<{w}}  {'':<{kw}}  {self.total_params:>12,d}  {self.total_flops:>15,d}")
        lines.append(
            f"params: {self.total_params / 1e6:.2f} M   flops: {self.total_flops / 1e9:.3f} G "
            f"({self.convention}, {self.resolution}x{self.resolution}"
            f"{', incl. nonlinear' if self.include_nonlinear else ''})"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "kind", "params", "flops"])
        for r in self.rows:
            wr.writerow([r.name, r.kind, r.params, r.flops])
        wr.writerow(["TOTAL", "", self.total_params, self.total_flops])
        return buf.getvalue()


def block_params(cfg: vo.AttentionConfig) -> int:
    d, di, hd = cfg.dim, cfg.in_dim, cfg.hidden_dim
    n = 2 * di + (di * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hd + hd) + (hd * d + d)
    if cfg.has_projection:
        n += di * d + d
    return n


def block_flops(cfg: vo.AttentionConfig, grid: tuple[int, int], include_nonlinear: bool = False) -> int:
    """MACs of one block on an (H, W) input grid."""
    H, W = grid
    d, di, hd = cfg.dim, cfg.in_dim, cfg.hidden_dim
    ph, pw = cfg.pool_factor
    T = H * W
    Tq = T // (ph * pw)
    t_unit = cfg.unit[0] * cfg.unit[1] if cfg.kind == vo.MASK_UNIT else T
    f = T * di * 3 * d           # qkv
    f += 2 * Tq * t_unit * d     # scores + weighted sum, all heads, all units
    f += Tq * d * d              # output projection
    f += 2 * Tq * d * hd         # mlp
    if cfg.has_projection:
        f += T * di * d          # shortcut projection (before pooling)
    if include_nonlinear:
        f += T * di + Tq * d     # two layer norms
        f += Tq * t_unit * cfg.heads  # softmax
        f += Tq * hd             # gelu
    return f


def _rows(spec: ArchitectureSpec, resolution: int | None, include_nonlinear: bool) -> tuple[list[LayerRow], int]:
    res = spec.input_resolution if resolution is None else resolution
    p = plan(spec, res)
    rows = []
    H = W = res
    for i, (s, (Ho, Wo)) in enumerate(zip(spec.stem, p.stem_grids)):
        k = s.out_dim * s.in_dim * s.kernel * s.kernel
        flops = k * Ho * Wo
        if include_nonlinear and i > 0:
            flops += s.in_dim * H * W
        rows.append(LayerRow(f"stem[{i}]", "conv", k + s.out_dim, flops))
        H, W = Ho, Wo
    # pos_embed is sized for the spec's own resolution
    h0, w0 = plan(spec).stem_grids[-1]
    rows.append(LayerRow("pos_embed", "embed", h0 * w0 * spec.stem[-1].out_dim, 0))
    for bp in p.blocks:
        kind = f"{bp.cfg.kind}-block"
        if bp.cfg.q_pool is not None:
            kind += "+pool"
        if bp.cfg.has_projection:
            kind += "+proj"
        rows.append(LayerRow(bp.name, kind, block_params(bp.cfg), block_flops(bp.cfg, bp.grid_in, include_nonlinear)))
    d, nc = p.final_dim, spec.head.num_classes
    rows.append(LayerRow("head.norm", "layernorm", 2 * d, d if include_nonlinear else 0))
    rows.append(LayerRow("head.fc", "linear", d * nc + nc, d * nc))
    return rows, res


def analyze(
    spec: ArchitectureSpec,
    resolution: int | None = None,
    include_nonlinear: bool = False,
    double_count: bool = False,
) -> ComplexityReport:
    """Per-layer parameters and FLOPs; raises SpecError if the spec is infeasible."""
    rows, res = _rows(spec, resolution, include_nonlinear)
    if double_count:
        rows = [LayerRow(r.name, r.kind, r.params, 2 * r.flops) for r in rows]
    return ComplexityReport(rows, res, DOUBLE if double_count else MAC, include_nonlinear)


def count_params(spec: ArchitectureSpec) -> ComplexityReport:
    return analyze(spec)


def count_flops(spec: ArchitectureSpec, resolution: int | None = None, **kwargs) -> ComplexityReport:
    return analyze(spec, resolution, **kwargs)


def total_params(spec: ArchitectureSpec) -> int:
    return count_params(spec).total_params


def total_flops(spec: ArchitectureSpec, resolution: int | None = None) -> int:
    return count_flops(spec, resolution).total_flops
