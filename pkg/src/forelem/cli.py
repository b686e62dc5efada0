"""Batch command-line interface.

Subcommands: parse | optimize | run | bench | explain | generate.
Exit codes: 0 ok, 2 frontend error, 3 I/O error, 4 runtime error,
5 verification failure.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

from . import analysis, engine, ingest, ir, sql, strategy
from . import transforms as T
from .parser import ParseError

EXIT_FRONTEND = 2
EXIT_IO = 3
EXIT_RUNTIME = 4
EXIT_VERIFY = 5


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _read(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e}")


def _load_schema(path: str) -> ingest.Schema:
    try:
        return ingest.parse_schema(_read(path))
    except ingest.IngestError as e:
        raise CliError(EXIT_IO, str(e))


def _load_db(data_dir: str | None, schema: ingest.Schema) -> ingest.Database:
    if data_dir is None:
        raise CliError(EXIT_IO, "--data is required for this command")
    try:
        return ingest.load_database(data_dir, schema)
    except ingest.IngestError as e:
        raise CliError(EXIT_IO, str(e))


def initial_program(sql_text: str, schema: ingest.Schema) -> ir.Program:
    """Lower and canonicalize (equality guards folded into index sets)."""
    try:
        q = sql.parse_sql(sql_text, schema)
        lowered = sql.lower_to_forelem(q, schema)
    except (sql.SqlError, ir.IRError) as e:
        raise CliError(EXIT_FRONTEND, str(e))
    return T.fold_conditions(lowered)


def _config(args) -> strategy.PipelineConfig:
    if getattr(args, "config", None):
        try:
            return strategy.PipelineConfig.from_file(args.config)
        except (OSError, ValueError) as e:
            raise CliError(EXIT_IO, f"bad config: {e}")
    return strategy.PipelineConfig()


def _result_rows(results: dict[str, engine.ResultBag]) -> engine.ResultBag:
    if not results:
        raise CliError(EXIT_RUNTIME, "query produced no result set")
    name = sorted(results)[0]
    return results[name]


def _print_rows(bag: engine.ResultBag, out) -> None:
    rows = bag.rows if bag.sort_keys else sorted(bag.rows, key=engine._sort_key)
    for row in rows:
        out.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_parse(args) -> int:
    schema = _load_schema(args.schema)
    prog = initial_program(_read(args.sql_file), schema)
    sys.stdout.write(ir.emit_text(prog))
    return 0


def cmd_optimize(args) -> int:
    schema = _load_schema(args.schema)
    prog = initial_program(_read(args.sql_file), schema)
    db = _load_db(args.data, schema)
    stats = ingest.compute_stats(db)
    plan, trace = strategy.optimize(prog, schema, stats, _config(args))
    if args.trace:
        for entry, line in zip(trace.entries, trace.lines()):
            sys.stdout.write(line + "\n")
        for index_id, kind in sorted(plan.decisions.items()):
            sys.stdout.write(f"CONCRETIZE {index_id} {kind}\n")
        for array_id, kind in sorted(plan.array_kinds.items()):
            sys.stdout.write(f"CONCRETIZE {array_id} {kind.upper()}\n")
    sys.stdout.write(ir.emit_text(plan.program))
    return 0


def cmd_run(args) -> int:
    schema = _load_schema(args.schema)
    prog = initial_program(_read(args.sql_file), schema)
    db = _load_db(args.data, schema)
    try:
        if args.oracle:
            results = engine.oracle_eval(prog, db)
        else:
            stats = ingest.compute_stats(db)
            plan, _ = strategy.optimize(prog, schema, stats, _config(args))
            results = engine.execute(plan, db)
    except engine.EngineError as e:
        sys.stderr.write(str(e) + "\n")
        return EXIT_RUNTIME
    _print_rows(_result_rows(results), sys.stdout)
    return 0


def cmd_explain(args) -> int:
    schema = _load_schema(args.schema)
    prog = initial_program(_read(args.sql_file), schema)
    db = _load_db(args.data, schema)
    stats = ingest.compute_stats(db)
    plan, trace = strategy.optimize(prog, schema, stats, _config(args))
    for line in trace.lines():
        sys.stdout.write(line + "\n")
    for index_id, kind in sorted(plan.decisions.items()):
        sys.stdout.write(f"INDEX {index_id} {kind}\n")
    for desc, why in sorted(plan.index_none.items()):
        sys.stdout.write(f"INDEX {desc} NONE ({why})\n")
    for array_id, kind in sorted(plan.array_kinds.items()):
        sys.stdout.write(f"ARRAY {array_id} {kind}\n")
    if args.analysis:
        info = analysis.def_use(plan.program)
        for (kind, name), paths in sorted(info.defs.items(),
                                          key=lambda kv: repr(kv[0])):
            uses = info.uses.get((kind, name), [])
            sys.stdout.write(
                f"DEFUSE {kind} {name} defs={len(paths)} uses={len(uses)}"
                + (" dead" if kind == "set" and name in info.dead_sets else "")
                + "\n"
            )
    return 0


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    import glob
    import math
    import os

    schema = _load_schema(args.schema)
    db = _load_db(args.data, schema)
    stats = ingest.compute_stats(db)
    cfg = _config(args)
    files = sorted(glob.glob(os.path.join(args.corpus, "*.sql")))
    if not files:
        raise CliError(EXIT_IO, f"no .sql files in {args.corpus}")
    speedups = []
    failed = False
    for path in files:
        name = os.path.splitext(os.path.basename(path))[0]
        prog = initial_program(_read(path), schema)
        plan, _ = strategy.optimize(prog, schema, stats, cfg)

        naive_res = engine.oracle_eval(prog, db)
        opt_res = engine.execute(plan, db)
        naive_bag = _result_rows(naive_res)
        opt_bag = _result_rows(opt_res)
        c_naive = engine.bag_checksum(naive_bag)
        c_opt = engine.bag_checksum(opt_bag)
        if c_naive != c_opt or not engine.bag_equal(
            naive_bag, opt_bag, cfg.float_sum_tolerance
        ):
            sys.stderr.write(f"BENCH {name} checksum mismatch "
                             f"naive={c_naive} opt={c_opt}\n")
            failed = True
            continue

        t_naive = _median_time(lambda: engine.oracle_eval(prog, db), args.reps)
        t_opt = _median_time(lambda: engine.execute(plan, db), args.reps)
        speedup = t_naive / t_opt if t_opt > 0 else float("inf")
        speedups.append(speedup)
        sys.stdout.write(
            f"BENCH {name} naive_ms={t_naive * 1000:.1f} "
            f"opt_ms={t_opt * 1000:.1f} speedup={speedup:.2f} "
            f"checksum={c_opt}\n"
        )
    if speedups:
        geo = math.exp(sum(math.log(s) for s in speedups) / len(speedups))
        sys.stdout.write(f"BENCH-SUMMARY queries={len(speedups)} "
                         f"geomean={geo:.2f}\n")
    return EXIT_VERIFY if failed else 0


def cmd_generate(args) -> int:
    schema = _load_schema(args.schema)
    try:
        spec = ingest.parse_genspec(_read(args.spec))
        if args.seed is not None:
            spec = ingest.GeneratorSpec(args.seed, spec.tables)
        ingest.generate(spec, args.out, schema)
    except ingest.IngestError as e:
        raise CliError(EXIT_IO, str(e))
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="forelem",
        description="Lower a SQL subset to order-free loop nests, optimize "
                    "with compiler transformations, and execute.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, data=False):
        p.add_argument("--schema", required=True, help="schema file")
        p.add_argument("--config", help="pipeline config file (key=value)")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", help="directory of .tbl/.csv files")

    p = sub.add_parser("parse", help="print the lowered canonical program")
    p.add_argument("sql_file")
    common(p)
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("optimize", help="run the pipeline and print the plan")
    p.add_argument("sql_file")
    p.add_argument("--trace", action="store_true")
    common(p, data=True)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("run", help="execute a query and print rows")
    p.add_argument("sql_file")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--oracle", action="store_true")
    mode.add_argument("--optimized", action="store_true")
    common(p, data=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="time naive vs optimized over a corpus")
    p.add_argument("corpus")
    p.add_argument("--reps", type=int, default=5)
    common(p, data=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("explain", help="print trace, decisions, analysis")
    p.add_argument("sql_file")
    p.add_argument("--analysis", action="store_true")
    common(p, data=True)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("generate", help="write deterministic .tbl files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_generate)
    return ap


def main(argv=None) -> int:
    ap = build_arg_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        sys.stderr.write(str(e) + "\n")
        return e.code
    except (sql.SqlError, ParseError, ir.IRError) as e:
        sys.stderr.write(str(e) + "\n")
        return EXIT_FRONTEND
    except engine.EngineError as e:
        sys.stderr.write(str(e) + "\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
