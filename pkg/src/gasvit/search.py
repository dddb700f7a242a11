"""Constrained architecture search.

Finds specs maximizing a performance score U subject to hard design
constraints (FLOP budget, number of Q-pool sites, presence of both mask
unit and global attention). The generator is a seeded evolutionary loop:
sample a population from the grammar, drop candidates failing the
constraints, rank the rest by U, and breed the next population by mutating
elites (plus a share of fresh samples).

The default U is NetScore-shaped::

    U = scale * 20 * log10(a**kappa / (p**beta * f**gamma))

with ``p`` parameters in millions, ``f`` MACs in billions and ``a`` an
accuracy figure in percent. Since nothing here trains networks, ``a`` is
either looked up in a user-supplied table or produced by a *synthetic*
surrogate::

    a = 100 * (1 - 0.5 * exp(-(p * f) ** 0.25 / surrogate_scale))

The surrogate only exists to exercise the machinery; it does not predict
real accuracy.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import vit_ops as vo
from .arch import ArchitectureSpec, BlockGroup, HeadConfig, StemConv, plan, validate
from .complexity import analyze
from .errors import ConfigurationError, SpecError

FEASIBLE = "feasible"
INFEASIBLE = "infeasible within budget"
MOVES = ("count", "dim", "heads", "q_pool", "attention")


@dataclass
class SearchConstraints:
    flop_budget: float = 2.5e9
    required_q_pool_sites: int = 3
    require_mua_and_ga: bool = True
    resolution: int = 224

    def __post_init__(self):
        if not self.flop_budget > 0:
            raise ConfigurationError(f"flop_budget must be > 0, got {self.flop_budget}")
        if self.required_q_pool_sites < 0:
            raise ConfigurationError("required_q_pool_sites must be >= 0")


@dataclass
class DesignSpace:
    """Grammar bounds for generated specs."""

    stem: list[StemConv]
    num_groups: tuple[int, int] = (4, 5)
    count_range: tuple[int, int] = (1, 4)
    dim_choices: list[int] = field(default_factory=lambda: [32, 48, 64, 96, 128, 192, 256, 384, 512])
    head_choices: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    unit_choices: list[tuple[int, int]] = field(default_factory=lambda: [(8, 8), (4, 4)])
    allow_global: bool = True
    pool_choices: list[tuple[int, int]] = field(default_factory=lambda: [(2, 2)])
    mlp_ratio: float = 4
    num_classes: int = 1000
    in_channels: int = 3

    def __post_init__(self):
        self.dim_choices = sorted(int(d) for d in self.dim_choices)
        self.head_choices = sorted(int(h) for h in self.head_choices)
        self.unit_choices = [tuple(u) for u in self.unit_choices]
        self.pool_choices = [tuple(p) for p in self.pool_choices]
        self.num_groups = tuple(self.num_groups)
        self.count_range = tuple(self.count_range)
        if not self.dim_choices or not self.head_choices or not self.stem:
            raise ConfigurationError("design space needs non-empty stem, dim_choices and head_choices")
        if not self.unit_choices and not self.allow_global:
            raise ConfigurationError("design space allows no attention kind")
        if self.num_groups[0] < 1 or self.num_groups[0] > self.num_groups[1]:
            raise ConfigurationError(f"invalid num_groups range {self.num_groups}")
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise ConfigurationError(f"invalid count_range {self.count_range}")

    def attention_options(self, grid: tuple[int, int]) -> list[tuple[str, tuple[int, int] | None]]:
        opts = [(vo.GLOBAL, None)] if self.allow_global else []
        opts += [(vo.MASK_UNIT, u) for u in self.unit_choices if grid[0] % u[0] == 0 and grid[1] % u[1] == 0]
        return opts

    def pool_options(self, grid, unit) -> list[tuple[int, int] | None]:
        opts: list = [None]
        for p in self.pool_choices:
            if grid[0] % p[0] or grid[1] % p[1]:
                continue
            if unit is not None and (unit[0] % p[0] or unit[1] % p[1]):
                continue
            opts.append(p)
        return opts

    def contains(self, spec: ArchitectureSpec) -> bool:
        """Grammar membership (values drawn from the allowed choices)."""
        if not (self.num_groups[0] <= len(spec.groups) <= self.num_groups[1]):
            return False
        for g in spec.groups:
            if not (self.count_range[0] <= g.count <= self.count_range[1]):
                return False
            if g.dim not in self.dim_choices or g.heads not in self.head_choices:
                return False
            if g.kind == vo.GLOBAL and not self.allow_global:
                return False
            if g.kind == vo.MASK_UNIT and g.unit not in self.unit_choices:
                return False
            if g.q_pool is not None and g.q_pool not in self.pool_choices:
                return False
        return True


@dataclass
class PerformanceFn:
    kind: str = "netscore"  # "netscore" | "table"
    kappa: float = 2.0
    beta: float = 0.5
    gamma: float = 0.5
    proxy: str = "synthetic"  # "synthetic" | "supplied"
    proxy_table: dict[str, float] = field(default_factory=dict)
    table: dict[str, float] = field(default_factory=dict)
    surrogate_scale: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("netscore", "table"):
            raise ConfigurationError(f"unknown performance kind {self.kind!r}")
        if self.proxy not in ("synthetic", "supplied"):
            raise ConfigurationError(f"unknown accuracy proxy {self.proxy!r}")
        if min(self.kappa, self.beta, self.gamma) <= 0:
            raise ConfigurationError("performance exponents must be > 0")
        if not self.scale > 0 or not self.surrogate_scale > 0:
            raise ConfigurationError("scale and surrogate_scale must be > 0")

    def accuracy(self, spec_hash: str, params: int, flops: int) -> float:
        if self.proxy == "supplied":
            try:
                return float(self.proxy_table[spec_hash])
            except KeyError:
                raise ConfigurationError(f"no supplied accuracy for spec {spec_hash}") from None
        p, f = params / 1e6, flops / 1e9
        return 100.0 * (1.0 - 0.5 * math.exp(-((p * f) ** 0.25) / self.surrogate_scale))

    def __call__(self, spec_hash: str, params: int, flops: int) -> float:
        if self.kind == "table":
            try:
                return self.scale * float(self.table[spec_hash])
            except KeyError:
                raise ConfigurationError(f"no tabulated U for spec {spec_hash}") from None
        a = self.accuracy(spec_hash, params, flops)
        p, f = params / 1e6, flops / 1e9
        return self.scale * 20.0 * (
            self.kappa * math.log10(a) - self.beta * math.log10(p) - self.gamma * math.log10(f)
        )


@dataclass
class SearchProblem:
    design_space: DesignSpace
    constraints: SearchConstraints = field(default_factory=SearchConstraints)
    performance_fn: PerformanceFn = field(default_factory=PerformanceFn)
    seed: int = 0
    budget: int = 512
    population: int = 32
    elite_fraction: float = 0.25
    immigrant_fraction: float = 0.25
    workers: int = 1

    def __post_init__(self):
        if self.budget < 1 or self.population < 1:
            raise ConfigurationError("budget and population must be >= 1")
        if not 0 < self.elite_fraction <= 1 or not 0 <= self.immigrant_fraction <= 1:
            raise ConfigurationError("elite_fraction must be in (0, 1], immigrant_fraction in [0, 1]")


@dataclass
class Evaluation:
    iteration: int
    spec_hash: str
    params: int
    flops: int
    feasible: bool
    reasons: list[str]
    U: float


@dataclass
class SearchResult:
    status: str
    best_spec: ArchitectureSpec | None
    best_U: float | None
    trace: list[Evaluation]

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: list[Evaluation]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iteration", "spec_hash", "params", "flops", "feasible", "U"])
    for e in trace:
        wr.writerow([e.iteration, e.spec_hash, e.params, e.flops, int(e.feasible), repr(e.U)])
    return buf.getvalue()


def sci(x: float) -> str:
    """Compact scientific notation, e.g. ``3.30e9``."""
    mant, exp = f"{float(x):.2e}".split("e")
    return f"{mant}e{int(exp)}"


# constraints -------------------------------------------------------------------------

def indicator(spec: ArchitectureSpec, constraints: SearchConstraints, flops: int | None = None) -> tuple[bool, list[str]]:
    """Hard-constraint check; returns ``(ok, reasons)`` listing every violated clause."""
    reasons = []
    rep = validate(spec, constraints.resolution)
    if not rep.feasible:
        return False, ["infeasible: " + "; ".join(rep.errors)]
    if flops is None:
        flops = analyze(spec, constraints.resolution).total_flops
    if flops > constraints.flop_budget:
        reasons.append(f"budget: flops {sci(flops)} > {sci(constraints.flop_budget)}")
    if rep.q_pool_sites != constraints.required_q_pool_sites:
        reasons.append(f"q_pool_sites: {rep.q_pool_sites} != {constraints.required_q_pool_sites}")
    if constraints.require_mua_and_ga:
        if not rep.has_mua:
            reasons.append("attention: no mask unit attention group")
        if not rep.has_global:
            reasons.append("attention: no global attention group")
    return not reasons, reasons


# generator ------------------------------------------------------------------------------

def _pick(rng: np.random.Generator, options: list):
    return options[int(rng.integers(len(options)))]


def _stem_grid(space: DesignSpace, resolution: int) -> tuple[int, int]:
    probe = ArchitectureSpec(
        stem=list(space.stem), groups=[BlockGroup(1, space.stem[-1].out_dim, 1)],
        head=HeadConfig(space.stem[-1].out_dim, space.num_classes),
        input_resolution=resolution, in_channels=space.in_channels,
    )
    try:
        return plan(probe).stem_grids[-1]
    except SpecError as e:
        raise ConfigurationError(f"design space stem is infeasible at resolution {resolution}: {e}") from e


def sample_candidate(problem: SearchProblem, rng: np.random.Generator) -> ArchitectureSpec:
    """Draw a grammar-legal, shape-feasible spec (not necessarily constraint-satisfying)."""
    space = problem.design_space
    res = problem.constraints.resolution
    grid = _stem_grid(space, res)
    n = int(rng.integers(space.num_groups[0], space.num_groups[1] + 1))
    groups = []
    for gi in range(n):
        count = int(rng.integers(space.count_range[0], space.count_range[1] + 1))
        dim = _pick(rng, space.dim_choices)
        heads_opts = [h for h in space.head_choices if dim % h == 0]
        if not heads_opts:
            raise ConfigurationError(f"no head choice divides dim {dim}")
        heads = _pick(rng, heads_opts)
        attn_opts = space.attention_options(grid)
        if not attn_opts:
            raise ConfigurationError(f"no attention option fits grid {grid[0]}x{grid[1]} at group {gi}")
        kind, unit = _pick(rng, attn_opts)
        pool = _pick(rng, space.pool_options(grid, unit))
        groups.append(BlockGroup(count, dim, heads, kind, unit, pool, space.mlp_ratio))
        if pool is not None:
            grid = (grid[0] // pool[0], grid[1] // pool[1])
    return ArchitectureSpec(
        stem=[StemConv(**vars(s)) for s in space.stem], groups=groups,
        head=HeadConfig(groups[-1].dim, space.num_classes),
        input_resolution=res, in_channels=space.in_channels,
    )


def _legal(spec: ArchitectureSpec, problem: SearchProblem) -> bool:
    return problem.design_space.contains(spec) and validate(spec, problem.constraints.resolution).feasible


def _apply_move(spec: ArchitectureSpec, gi: int, move: str, space: DesignSpace, rng: np.random.Generator):
    new = spec.copy()
    g = new.groups[gi]
    if move == "count":
        g.count += 1 if rng.random() < 0.5 else -1
    elif move == "dim":
        i = space.dim_choices.index(g.dim) if g.dim in space.dim_choices else 0
        i += 1 if rng.random() < 0.5 else -1
        if not 0 <= i < len(space.dim_choices):
            return None
        g.dim = space.dim_choices[i]
    elif move == "heads":
        i = space.head_choices.index(g.heads) if g.heads in space.head_choices else 0
        i += 1 if rng.random() < 0.5 else -1
        if not 0 <= i < len(space.head_choices):
            return None
        g.heads = space.head_choices[i]
    elif move == "q_pool":
        g.q_pool = None if g.q_pool is not None else _pick(rng, space.pool_choices) if space.pool_choices else None
    elif move == "attention":
        opts = ([(vo.GLOBAL, None)] if space.allow_global else []) + [(vo.MASK_UNIT, u) for u in space.unit_choices]
        opts = [o for o in opts if o != (g.kind, g.unit)]
        if not opts:
            return None
        g.kind, g.unit = _pick(rng, opts)
    new.head.in_dim = new.groups[-1].dim
    return new


def mutate(spec: ArchitectureSpec, rng: np.random.Generator, problem: SearchProblem, max_tries: int = 100) -> ArchitectureSpec:
    """Apply one move from :data:`MOVES` to one group; illegal moves are resampled.

    ``attention`` treats (kind, unit) as a single field. Returns a copy of
    ``spec`` unchanged only if no legal move was found in ``max_tries``.
    """
    space = problem.design_space
    for _ in range(max_tries):
        gi = int(rng.integers(len(spec.groups)))
        move = _pick(rng, MOVES)
        new = _apply_move(spec, gi, move, space, rng)
        if new is not None and new.hash() != spec.hash() and _legal(new, problem):
            return new
    return spec.copy()


# search loop ----------------------------------------------------------------------------

def evaluate(spec: ArchitectureSpec, problem: SearchProblem, iteration: int = 0) -> Evaluation:
    rep = analyze(spec, problem.constraints.resolution)
    h = spec.hash()
    ok, reasons = indicator(spec, problem.constraints, rep.total_flops)
    U = problem.performance_fn(h, rep.total_params, rep.total_flops)
    return Evaluation(iteration, h, rep.total_params, rep.total_flops, ok, reasons, U)


def _rank_key(e: Evaluation):
    # higher U first, then lexicographically smaller hash
    return (-e.U, e.spec_hash)


def search(problem: SearchProblem) -> SearchResult:
    """Run the evolutionary loop for ``problem.budget`` evaluations."""
    rng = np.random.default_rng(problem.seed)
    n_elite = max(1, int(math.ceil(problem.population * problem.elite_fraction)))
    seen: set[str] = set()
    specs: dict[str, ArchitectureSpec] = {}
    trace: list[Evaluation] = []
    feasible: list[Evaluation] = []
    feasible_hashes: set[str] = set()
    best: Evaluation | None = None
    iteration = 0

    def fresh_or_child(elites: list[Evaluation]) -> ArchitectureSpec:
        cand = None
        for _ in range(64):
            if elites and rng.random() >= problem.immigrant_fraction:
                cand = mutate(specs[_pick(rng, elites).spec_hash], rng, problem)
            else:
                cand = sample_candidate(problem, rng)
            if cand.hash() not in seen:
                break
        return cand

    executor = ThreadPoolExecutor(problem.workers) if problem.workers > 1 else None
    try:
        while len(trace) < problem.budget:
            elites = sorted(feasible, key=_rank_key)[:n_elite]
            batch = []
            for _ in range(min(problem.population, problem.budget - len(trace))):
                cand = fresh_or_child(elites)
                seen.add(cand.hash())
                batch.append(cand)
            if executor is not None:
                evals = list(executor.map(lambda s: evaluate(s, problem, iteration), batch))
            else:
                evals = [evaluate(s, problem, iteration) for s in batch]
            for spec, e in zip(batch, evals):
                trace.append(e)
                specs.setdefault(e.spec_hash, spec)
                if e.feasible:
                    if e.spec_hash not in feasible_hashes:
                        feasible_hashes.add(e.spec_hash)
                        feasible.append(e)
                    if best is None or _rank_key(e) < _rank_key(best):
                        best = e
            iteration += 1
    finally:
        if executor is not None:
            executor.shutdown()
    if best is None:
        return SearchResult(INFEASIBLE, None, None, trace)
    return SearchResult(FEASIBLE, specs[best.spec_hash], best.U, trace)


# config files ------------------------------------------------------------------------------

def _float(v, where: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise SpecError(f"{where} must be a number, got {v!r}", where) from None


def problem_from_dict(d: dict) -> SearchProblem:
    if not isinstance(d, dict) or "design_space" not in d:
        raise SpecError("search config needs a design_space mapping", "design_space")
    ds = dict(d["design_space"])
    try:
        stem = [StemConv(**s) for s in ds.pop("stem")]
    except (KeyError, TypeError) as e:
        raise SpecError(f"design_space.stem is malformed: {e}", "design_space.stem") from None
    try:
        space = DesignSpace(stem=stem, **ds)
        c = dict(d.get("constraints") or {})
        if "flop_budget" in c:
            c["flop_budget"] = _float(c["flop_budget"], "constraints.flop_budget")
        constraints = SearchConstraints(**c)
        perf = dict(d.get("performance") or {})
        perf_fn = PerformanceFn(**perf)
        kw = {k: d[k] for k in ("seed", "budget", "population", "elite_fraction", "immigrant_fraction", "workers") if k in d}
        return SearchProblem(space, constraints, perf_fn, **kw)
    except TypeError as e:
        raise SpecError(f"unknown or missing search config field: {e}") from None


def load_problem(path) -> SearchProblem:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise SpecError(f"search config is not valid YAML: {e}") from e
    return problem_from_dict(data)
