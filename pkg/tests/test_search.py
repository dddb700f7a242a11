import csv
import io
from importlib import resources

import numpy as np
import pytest
import yaml

from gasvit import arch, complexity as cx, search, vit_ops as vo
from gasvit.errors import ConfigurationError, SpecError

import oracles
from oracles import brute_force_structure_ok, enumerate_tiny_grammar, netscore, tiny_grammar_dict


def default_problem() -> search.SearchProblem:
    text = resources.files("gasvit.data").joinpath("search.yaml").read_text()
    return search.problem_from_dict(yaml.safe_load(text))


@pytest.fixture(scope="module")
def tiny_grammar():
    """(spec, params, flops) for every grammar point, measured by building and counting."""
    out = []
    for spec in enumerate_tiny_grammar():
        out.append((spec, oracles.allocated_scalars(arch.build(spec)), oracles.instrumented_macs(spec)))
    return out


@pytest.fixture(scope="module")
def tiny_result():
    return search.search(search.problem_from_dict(tiny_grammar_dict()))


# indicator -----------------------------------------------------------------------------

def test_canonical_satisfies_indicator():
    ok, reasons = search.indicator(arch.canonical_spec(), search.SearchConstraints())
    assert ok and reasons == []


def test_doubled_counts_break_budget():
    spec = arch.canonical_spec()
    for g in spec.groups:
        g.count *= 2
    flops = oracles.instrumented_macs(spec)
    assert flops > 2.5e9
    ok, reasons = search.indicator(spec, search.SearchConstraints())
    assert not ok
    assert reasons == [f"budget: flops {search.sci(flops)} > 2.50e9"]


def test_two_pool_sites_rejected():
    spec = arch.canonical_spec()
    spec.groups[1].q_pool = None
    spec.groups[1].unit = (4, 4)
    spec.groups[2].unit = (8, 8)
    assert arch.validate(spec).feasible
    # a generous budget isolates the pool-count clause
    ok, reasons = search.indicator(spec, search.SearchConstraints(flop_budget=1e12))
    assert not ok and len(reasons) == 1 and reasons[0].startswith("q_pool_sites")


def test_missing_attention_kinds_listed_separately():
    spec = arch.canonical_spec()
    for g in spec.groups:
        g.kind, g.unit = vo.GLOBAL, None
    ok, reasons = search.indicator(spec, search.SearchConstraints(flop_budget=1e12))
    assert not ok and reasons == ["attention: no mask unit attention group"]
    ok, _ = search.indicator(spec, search.SearchConstraints(flop_budget=1e12, require_mua_and_ga=False))
    assert ok


def test_every_violation_reported():
    spec = arch.canonical_spec()
    for g in spec.groups:
        g.count *= 3
        g.kind, g.unit = vo.GLOBAL, None
    spec.groups[1].q_pool = None
    ok, reasons = search.indicator(spec, search.SearchConstraints())
    assert [r.split(":")[0] for r in reasons] == ["budget", "q_pool_sites", "attention"]


def test_sci_format():
    assert search.sci(3.3e9) == "3.30e9"
    assert search.sci(2.5e9) == "2.50e9"


def test_constraint_validation():
    with pytest.raises(ConfigurationError):
        search.SearchConstraints(flop_budget=0)
    with pytest.raises(ConfigurationError):
        search.SearchConstraints(required_q_pool_sites=-1)


# generator -------------------------------------------------------------------------------

def test_sampling_is_deterministic():
    p = default_problem()
    a = search.sample_candidate(p, np.random.default_rng(42))
    b = search.sample_candidate(p, np.random.default_rng(42))
    assert a == b


def test_thousand_samples_are_legal():
    p = default_problem()
    rng = np.random.default_rng(0)
    space = p.design_space
    for _ in range(1000):
        s = search.sample_candidate(p, rng)
        assert arch.validate(s, p.constraints.resolution).feasible
        assert space.contains(s)
        assert all(g.dim in space.dim_choices for g in s.groups)


def test_unsatisfiable_grammar_raises():
    p = default_problem()
    p.design_space.unit_choices = [(5, 5)]
    p.design_space.allow_global = False
    with pytest.raises(ConfigurationError):
        search.sample_candidate(p, np.random.default_rng(0))


def group_fields(g):
    return {"count": g.count, "dim": g.dim, "heads": g.heads, "q_pool": g.q_pool,
            "attention": (g.kind, g.unit)}


def test_mutations_change_one_field_and_stay_legal():
    p = default_problem()
    rng = np.random.default_rng(1)
    spec = search.sample_candidate(p, rng)
    for _ in range(1000):
        child = search.mutate(spec, rng, p)
        assert arch.validate(child, p.constraints.resolution).feasible
        assert p.design_space.contains(child)
        changed = [
            (gi, k) for gi, (a, b) in enumerate(zip(spec.groups, child.groups))
            for k in group_fields(a) if group_fields(a)[k] != group_fields(b)[k]
        ]
        assert len(changed) == 1, changed
        spec = child


def test_count_plus_one_adds_one_block_of_flops():
    p = default_problem()
    rng = np.random.default_rng(2)
    for _ in range(20):
        spec = search.sample_candidate(p, rng)
        gi = int(rng.integers(len(spec.groups)))
        bigger = spec.copy()
        bigger.groups[gi].count += 1
        pl = arch.plan(bigger, p.constraints.resolution)
        # the added block is a plain (non-entry) block of group gi
        last = [b for b in pl.blocks if b.name.startswith(f"groups[{gi}].")][-1]
        delta = cx.total_flops(bigger, p.constraints.resolution) - cx.total_flops(spec, p.constraints.resolution)
        assert delta == cx.block_flops(last.cfg, last.grid_in)
        assert last.cfg.q_pool is None and last.cfg.dim_in in (None, last.cfg.dim)


# performance function ----------------------------------------------------------------------

def test_netscore_matches_independent_formula():
    fn = search.PerformanceFn()
    assert fn("x", 12_714_216, 2_201_984_000) == pytest.approx(netscore(12_714_216, 2_201_984_000), rel=1e-12)


def test_supplied_proxy_and_table():
    fn = search.PerformanceFn(proxy="supplied", proxy_table={"abc": 80.0})
    assert fn("abc", 1_000_000, 1_000_000_000) == pytest.approx(20 * 2 * np.log10(80.0))
    with pytest.raises(ConfigurationError):
        fn("zzz", 1, 1)
    assert search.PerformanceFn(kind="table", table={"abc": 3.0}, scale=2.0)("abc", 1, 1) == 6.0


# search loop ---------------------------------------------------------------------------------

def test_tiny_grammar_size(tiny_grammar):
    assert len(tiny_grammar) <= 5000


def test_search_finds_exhaustive_argmax(tiny_grammar, tiny_result):
    problem = search.problem_from_dict(tiny_grammar_dict())
    feasible = [
        (spec, p, f) for spec, p, f in tiny_grammar
        if brute_force_structure_ok(spec, 1) and f <= problem.constraints.flop_budget
    ]
    best = min(feasible, key=lambda t: (-netscore(t[1], t[2]), t[0].hash()))
    assert tiny_result.feasible
    assert tiny_result.best_spec.hash() == best[0].hash()
    assert tiny_result.best_U == pytest.approx(netscore(best[1], best[2]), rel=1e-12)


def test_trace_soundness_and_elitism(tiny_result):
    problem = search.problem_from_dict(tiny_grammar_dict())
    assert len(tiny_result.trace) == problem.budget
    feasible = [e for e in tiny_result.trace if e.feasible]
    top = min(feasible, key=lambda e: (-e.U, e.spec_hash))
    # the returned best is the best feasible entry ever evaluated, never lost later
    assert tiny_result.best_U == top.U
    assert tiny_result.best_spec.hash() == top.spec_hash
    ok, _ = search.indicator(tiny_result.best_spec, problem.constraints)
    assert ok


def test_feasible_trace_entries_recheck():
    problem = search.problem_from_dict(tiny_grammar_dict(budget=200))
    result = search.search(problem)
    specs = {s.hash(): s for s in enumerate_tiny_grammar()}
    for e in result.trace:
        ok, _ = search.indicator(specs[e.spec_hash], problem.constraints)
        assert ok == e.feasible


def test_budget_below_grammar_minimum_is_infeasible(tiny_grammar):
    cheapest = min(f for _, _, f in tiny_grammar)
    problem = search.problem_from_dict(tiny_grammar_dict(**{"constraints.flop_budget": cheapest - 1, "budget": 300}))
    result = search.search(problem)
    assert result.status == search.INFEASIBLE
    assert result.best_spec is None and len(result.trace) == 300


def test_fixed_seed_reproduces_trace_bytes():
    problem = search.problem_from_dict(tiny_grammar_dict(budget=400))
    assert search.search(problem).trace_csv() == search.search(problem).trace_csv()


def test_parallel_evaluation_does_not_change_trace():
    problem = search.problem_from_dict(tiny_grammar_dict(budget=300))
    serial = search.search(problem).trace_csv()
    problem.workers = 4
    assert search.search(problem).trace_csv() == serial


def test_positive_scaling_keeps_best_spec():
    base = search.problem_from_dict(tiny_grammar_dict(budget=500))
    scaled = search.problem_from_dict(tiny_grammar_dict(budget=500, **{"performance.scale": 7.5}))
    a, b = search.search(base), search.search(scaled)
    assert a.best_spec == b.best_spec
    assert b.best_U == pytest.approx(7.5 * a.best_U)


def test_trace_csv_columns():
    result = search.search(search.problem_from_dict(tiny_grammar_dict(budget=40)))
    rows = list(csv.reader(io.StringIO(result.trace_csv())))
    assert rows[0] == ["iteration", "spec_hash", "params", "flops", "feasible", "U"]
    assert len(rows) == 41


def test_config_errors_name_fields(tmp_path):
    d = tiny_grammar_dict(**{"constraints.flop_budget": "lots"})
    with pytest.raises(SpecError, match="constraints.flop_budget"):
        search.problem_from_dict(d)
    with pytest.raises(SpecError, match="design_space"):
        search.problem_from_dict({"seed": 1})
    bad = tmp_path / "bad.yaml"
    bad.write_text("design_space: [")
    with pytest.raises(SpecError):
        search.load_problem(bad)


def test_default_config_runs_feasible():
    p = default_problem()
    p.budget = 64
    result = search.search(p)
    assert result.feasible
    assert search.indicator(result.best_spec, p.constraints)[0]
