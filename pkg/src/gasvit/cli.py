"""Command-line entry point: ``gasvit {analyze,validate,search,bench,infer,sanity-train}``.

Exit codes: 0 success, 1 constraint/validation failure, 2 input/parse
error, 3 search found nothing feasible within budget.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import arch, bench, complexity, search, tensor_core, train
from .errors import ConfigurationError, SpecError
from .rawtensor import read_raw_tensor

log = logging.getLogger("gasvit")

EXIT_OK, EXIT_CONSTRAINT, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class InputError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _spec_arg(args) -> str:
    path = args.spec_pos or args.spec
    if path is None:
        raise InputError("no spec given (positional SPEC or --spec)")
    return path


def _load_spec(args) -> arch.ArchitectureSpec:
    path = _spec_arg(args)
    if path not in arch.PACKAGED and not Path(path).exists():
        raise InputError(f"spec file not found: {path}")
    return arch.load_spec(path)


def _load_feasible(args) -> arch.ArchitectureSpec:
    spec = _load_spec(args)
    rep = arch.validate(spec)
    if not rep.feasible:
        raise SpecError("; ".join(rep.errors))
    return spec


def _figure(fn, *a, **kw):
    from . import plotting
    path = getattr(plotting, fn)(*a, **kw)
    log.info("figure written to %s", path)
    return path


# subcommands -------------------------------------------------------------------

def cmd_analyze(args) -> int:
    spec = _load_feasible(args)
    rep = complexity.analyze(spec, args.resolution, args.include_nonlinear, args.double_count)
    _emit(rep.to_csv() if args.format == "csv" else rep.to_text(), args.out)
    if args.figure:
        _figure("plot_complexity", rep, args.figure)
    return EXIT_OK


def cmd_validate(args) -> int:
    spec = _load_spec(args)
    constraints = search.SearchConstraints(
        flop_budget=args.flop_budget, required_q_pool_sites=args.q_pool_sites,
        require_mua_and_ga=not args.no_require_mua_ga,
        resolution=args.resolution or spec.input_resolution,
    )
    rep = arch.validate(spec, constraints.resolution)
    lines = [rep.summary()]
    ok = rep.feasible
    if rep.feasible:
        ok, reasons = search.indicator(spec, constraints)
        flops = complexity.total_flops(spec, constraints.resolution)
        lines.append(f"flops: {search.sci(flops)} (budget {search.sci(constraints.flop_budget)})")
        lines.append(f"constraints satisfied: {ok}")
        lines += [f"  violated: {r}" for r in reasons]
    _emit("\n".join(lines), args.out)
    return EXIT_OK if ok else EXIT_CONSTRAINT


def cmd_search(args) -> int:
    if not Path(args.config).exists() and args.config != "default":
        raise InputError(f"search config not found: {args.config}")
    if args.config == "default":
        problem = search.problem_from_dict(
            yaml.safe_load(resources.files("gasvit.data").joinpath("search.yaml").read_text())
        )
    else:
        problem = search.load_problem(args.config)
    if args.seed is not None:
        problem.seed = args.seed
    if args.budget is not None:
        problem.budget = args.budget
    with tensor_core.threads(args.threads):
        result = search.search(problem)
    trace_path = args.trace or (str(Path(args.out).with_suffix("")) + "_trace.csv" if args.out else None)
    if trace_path:
        Path(trace_path).write_text(result.trace_csv())
        log.info("trace written to %s", trace_path)
    if args.figure:
        _figure("plot_trace", result.trace, args.figure)
    n_ok = sum(e.feasible for e in result.trace)
    if not result.feasible:
        print(f"infeasible within budget: 0 of {len(result.trace)} candidates satisfied the constraints")
        return EXIT_INFEASIBLE
    best = result.best_spec
    best.name = best.name or f"search-{problem.seed}-{best.hash()}"
    text = arch.dumps_spec(best)
    if args.out:
        Path(args.out).write_text(text)
    rep = complexity.analyze(best, problem.constraints.resolution)
    print(f"evaluated {len(result.trace)} candidates, {n_ok} feasible")
    print(f"best U = {result.best_U!r}  spec {best.hash()}  "
          f"params {rep.total_params / 1e6:.2f} M  flops {rep.total_flops / 1e9:.3f} G")
    if not args.out:
        print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = _load_feasible(args)
    model = arch.build(spec, args.seed)
    reports = []
    for b in args.batch:
        reports.append(bench.run_bench(model, b, args.runs, args.warmup, args.seed, args.threads))
    text = bench.format_csv(reports) if args.format == "csv" else bench.format_table(reports, args.stat)
    _emit(text, args.out)
    if args.samples_out:
        Path(args.samples_out).write_text("".join(r.samples_text() for r in reports))
    if args.figure:
        _figure("plot_latency", reports, args.figure)
    return EXIT_OK


def cmd_infer(args) -> int:
    spec = _load_feasible(args)
    model = arch.build(spec, args.seed)
    r, c = spec.input_resolution, spec.in_channels
    if args.input:
        if not Path(args.input).exists():
            raise InputError(f"input file not found: {args.input}")
        x = read_raw_tensor(args.input, (None, c, r, r))
    else:
        x = np.random.default_rng(args.seed).standard_normal((1, c, r, r)).astype(np.float32)
    with tensor_core.threads(args.threads):
        logits = arch.forward(model, x)
    k = min(args.topk, logits.shape[1])
    lines = [f"logits: shape {list(logits.shape)}, all finite: {bool(np.isfinite(logits).all())}"]
    for i, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:k]
        lines.append(f"sample {i}: top-{k} " + " ".join(f"{j}:{row[j]:.6f}" for j in top))
    if args.format == "csv":
        lines = ["sample,rank,class,logit"] + [
            f"{i},{rank},{j},{float(row[j])!r}" for i, row in enumerate(logits)
            for rank, j in enumerate(np.argsort(-row, kind="stable")[:k])
        ]
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_sanity_train(args) -> int:
    spec = _load_feasible(args)
    task = train.ToyTask(num_classes=spec.head.num_classes, resolution=spec.input_resolution, seed=args.seed)
    with tensor_core.threads(args.threads):
        res = train.fit(spec, task, steps=args.steps, lr=args.lr, seed=args.seed)
    _emit(res.to_csv(), args.out)
    if args.figure:
        _figure("plot_loss", res.losses, args.figure, spec.head.num_classes)
    if res.diverged_at is not None:
        print(f"diverged: loss became non-finite at step {res.diverged_at}", file=sys.stderr)
        return EXIT_CONSTRAINT
    print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} over {args.steps} steps; "
          f"eval accuracy {res.eval_accuracy:.3f}", file=sys.stderr)
    return EXIT_OK


# parser ----------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    # a fresh parent per subcommand: parents share Action objects, so one
    # subcommand's set_defaults would otherwise leak into all the others
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="architecture spec file ('canonical' / 'toy' for the packaged ones)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    common.add_argument("--figure", help="also render a figure to this path (png/pdf/svg)")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gasvit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[_common()], help="per-layer parameter/FLOP report")
    a.add_argument("spec_pos", nargs="?", metavar="SPEC")
    a.add_argument("--resolution", type=int)
    a.add_argument("--include-nonlinear", action="store_true")
    a.add_argument("--double-count", action="store_true", help="report 2 FLOPs per MAC")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate", parents=[_common()], help="feasibility + design constraints")
    v.add_argument("spec_pos", nargs="?", metavar="SPEC")
    v.add_argument("--resolution", type=int)
    v.add_argument("--flop-budget", type=float, default=2.5e9)
    v.add_argument("--q-pool-sites", type=int, default=3)
    v.add_argument("--no-require-mua-ga", action="store_true")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("search", parents=[_common()], help="constrained architecture search")
    s.add_argument("config", help="search config file, or 'default'")
    s.add_argument("--trace", help="trace CSV path (default: <out>_trace.csv)")
    s.add_argument("--budget", type=int)
    s.set_defaults(func=cmd_search, seed=None)

    b = sub.add_parser("bench", parents=[_common()], help="latency/throughput benchmark")
    b.add_argument("spec_pos", nargs="?", metavar="SPEC")
    b.add_argument("--batch", type=int, action="append", help="batch size (repeatable; default 1 and 32)")
    b.add_argument("--runs", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--stat", choices=("mean", "median"), default="mean", help="latency column statistic")
    b.add_argument("--samples-out", help="dump raw per-run latencies (ms), one per line")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("infer", parents=[_common()], help="one forward pass, print top-k logits")
    i.add_argument("spec_pos", nargs="?", metavar="SPEC")
    i.add_argument("--input", help="raw tensor file ('shape: B 3 H W' header + LE float32)")
    i.add_argument("--topk", type=int, default=5)
    i.set_defaults(func=cmd_infer)

    t = sub.add_parser("sanity-train", parents=[_common()], help="SGD fit on the planted-pattern toy task")
    t.add_argument("spec_pos", nargs="?", metavar="SPEC")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.03)
    t.set_defaults(func=cmd_sanity_train, spec="toy")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "batch", None) is None and args.command == "bench":
        args.batch = [1, 32]
    try:
        return args.func(args)
    except (SpecError, InputError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
