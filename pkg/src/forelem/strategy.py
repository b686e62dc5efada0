"""Pass ordering, materialization strategy, and named derivation recipes.

`optimize` runs the fixed pipeline: inline; interchange + invariant code
motion (constant-valued conditions get outermost priority); iteration
space expansion on aggregate bodies followed by invariant code motion
(retried after table propagation frees aggregate loops from temporaries);
table propagation; dead code elimination; index set materialization with
pruning and combination; концretization.  The result is a ConcretePlan:
the rewritten program plus one storage decision per runtime structure.

`derive_named_algorithm` replays the classic-operator recipes (nested
loops, block nested loops, index nested loops, hash join, sorted and hash
aggregation, multi-block flattening) as scripted pass sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import ir
from . import transforms as T
from .engine import (
    BALANCED_TREE,
    FLAT_ARRAY,
    HASH,
    NONE,
    SORTED_SCAN,
    ConcretePlan,
)
from .ingest import Stats
from .ir import (
    AggFinish,
    AggInit,
    AggStep,
    Append,
    ArrayAssign,
    Compare,
    Cond,
    FieldRef,
    Filtered,
    Full,
    If,
    IndexBuild,
    Lit,
    Loop,
    MaterializedRef,
    Param,
    PartLoop,
    Partitioned,
    Program,
    RangeSet,
    SortBy,
    Stmt,
)
from .transforms import TransformError, TransformTrace, _walk_paths

ALGORITHMS = (
    "NestedLoops",
    "BlockNestedLoops",
    "IndexNestedLoops",
    "HashJoin",
    "SortedAggregation",
    "HashAggregation",
    "MultiBlockFlatten",
)


@dataclass
class PipelineConfig:
    tiny_table_threshold: int = 1000
    block_rows: int = 65536
    float_sum_tolerance: float = 1e-9
    prefer_sorted_aggregation: bool = False
    bench_reps: int = 5
    disabled: frozenset[str] = frozenset()

    def enabled(self, op: str) -> bool:
        return op not in self.disabled

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        cfg = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                value = value.strip()
                if key in ("tiny_table_threshold", "block_rows", "bench_reps"):
                    setattr(cfg, key, int(value))
                elif key == "float_sum_tolerance":
                    cfg.float_sum_tolerance = float(value)
                elif key == "prefer_sorted_aggregation":
                    cfg.prefer_sorted_aggregation = value.lower() in ("1", "true", "yes")
                elif key == "disable":
                    cfg.disabled = frozenset(
                        x.strip() for x in value.split(",") if x.strip()
                    )
                else:
                    raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if cfg.tiny_table_threshold <= 0 or cfg.block_rows <= 0:
            raise ValueError("thresholds must be positive")
        return cfg


# ---------------------------------------------------------------------------
# interchange heuristic


def _nest_order(nest: T._Nest) -> tuple[int, ...]:
    """Loops sorted by descending (constant-valued conditions, total
    conditions), stable on the original order."""
    scores = []
    for pos, lp in enumerate(nest.loops):
        const_n = 0
        total_n = 0
        for a in nest.atoms:
            vars_here = set()
            has_lit = False
            for e in ir.child_exprs(a):
                vars_here |= ir.expr_vars(e)
                has_lit = has_lit or not ir.expr_vars(e)
            if lp.var in vars_here:
                total_n += 1
                if vars_here == {lp.var} and has_lit:
                    const_n += 1
        scores.append((-const_n, -total_n, pos))
    order = sorted(range(len(nest.loops)), key=lambda i: scores[i])
    return tuple(order)


def _auto_interchange(p: Program, trace: TransformTrace) -> Program:
    prog = p
    applied_any = False
    for path, s in list(_walk_paths(prog.body, ())):
        if not isinstance(s, Loop):
            continue
        try:
            cur = T.stmt_at(prog, path)
        except (TransformError, IndexError):
            continue
        if not isinstance(cur, Loop):
            continue
        nest = T._collect_nest(cur)
        if nest is None or len(nest.loops) < 2 or nest.part_vars:
            continue
        perm = _nest_order(nest)
        if perm == tuple(range(len(perm))):
            continue
        new = T.loop_interchange(prog, path, perm)
        if new is not prog:
            trace.add("Loop Interchange", True, "", "interchange", (path, perm))
            prog = new
            applied_any = True
    if not applied_any:
        trace.add("Loop Interchange", False, "no profitable reordering",
                  "interchange", ())
    return prog


# ---------------------------------------------------------------------------
# automatic iteration space expansion


def _ise_candidates(p: Program) -> list[tuple]:
    """Filtered loops over stored tables whose body is a pure nest of loops
    and guards computing aggregates at the leaves."""
    set_cols = ir.infer_set_columns(p)
    out = []
    for path, s in _walk_paths(p.body, ()):
        if not (isinstance(s, Loop) and isinstance(s.index, Filtered)
                and s.index.table not in set_cols):
            continue
        has_step = False
        pure = True
        for x in ir.walk_stmts(s.body):
            if isinstance(x, AggStep):
                has_step = True
            elif not isinstance(x, (Loop, If)):
                pure = False
                break
        if pure and has_step:
            out.append(path)
    return out


def _auto_ise(p: Program, trace: TransformTrace, note_skip: bool) -> Program:
    prog = p
    applied = False
    for _ in range(8):
        cands = _ise_candidates(prog)
        progressed = False
        for path in cands:
            new = T.iteration_space_expansion(prog, path)
            if new is not prog:
                trace.add("Iteration Space Expansion", True, "", "ise", (path,))
                prog = new
                progressed = True
                applied = True
                break
        if not progressed:
            break
    if applied:
        new = T.licm(prog)
        trace.add("LICM", new is not prog, "nothing invariant", "licm", ())
        prog = new
    elif note_skip:
        trace.add("Iteration Space Expansion", False,
                  "no expandable aggregate loop", "ise", ())
    return prog


# ---------------------------------------------------------------------------
# sorted aggregation rewrite (the composite recipe)


def _find_grouped_pattern(p: Program):
    """Locate the lowered group-by shape: group loop over a distinct temp
    whose body aggregates a filtered temp scan keyed by the group row."""
    set_cols = ir.infer_set_columns(p)
    for gpath, g in _walk_paths(p.body, ()):
        if not (isinstance(g, Loop) and isinstance(g.index, Full)
                and g.index.table in set_cols):
            continue
        g_set = g.index.table
        inner_loops = [
            (i, s) for i, s in enumerate(g.body)
            if isinstance(s, Loop) and isinstance(s.index, Filtered)
        ]
        if len(inner_loops) != 1:
            continue
        j, inner = inner_loops[0]
        t_set = inner.index.table
        if t_set not in set_cols:
            continue
        if not all(isinstance(x, AggStep) for x in inner.body):
            continue
        keys = inner.index.values
        if not all(
            isinstance(v, FieldRef) and v.var == g.var and v.set_id == g_set
            for v in keys
        ):
            continue
        return gpath, g, j, inner, g_set, t_set
    return None


def sorted_aggregation(p: Program) -> tuple[Program, dict[str, str]]:
    """Evaluate the grouped pattern with a single pass over the temp sorted
    by the group key: sort marker, sorted index-set build, group iteration
    over distinct keys, group-set elimination.

    Returns (program, decisions); unchanged program when not applicable.
    """
    hit = _find_grouped_pattern(p)
    if hit is None:
        return p, {}
    gpath, g, j, inner, g_set, t_set = hit
    fields = inner.index.fields
    index_id = ir.make_index_id(t_set, fields)
    g_cols = ir.infer_set_columns(p)[g_set]
    # the group set must be exactly the distinct group keys of the temp
    if len(g_cols) != len(fields):
        return p, {}

    used_vars = ir.all_vars(p)
    bvar = ir.fresh_name("i", used_vars)
    builder = Loop(bvar, RangeSet(t_set),
                   (IndexBuild(index_id, t_set, fields, bvar, None),))
    sort_marker = SortBy(t_set, tuple((f, True) for f in fields))

    # group loop: iterate one representative subscript per distinct key and
    # read group columns off the sorted temp
    fieldref_map = {
        (g_set, g.var, gc): FieldRef(t_set, g.var, f)
        for gc, f in zip(g_cols, fields)
    }
    new_inner = Loop(inner.var, MaterializedRef(
        index_id, tuple(FieldRef(t_set, g.var, f) for f in fields)
    ), inner.body)
    new_body = T.substitute(g.body[:j], fieldref_map=fieldref_map) \
        + (T.substitute(new_inner, fieldref_map=fieldref_map),) \
        + T.substitute(g.body[j + 1:], fieldref_map=fieldref_map)
    new_g = Loop(g.var, MaterializedRef(index_id, None), new_body)

    prog = T.replace_at(p, gpath, [new_g])
    # insert sort + builder right before the group loop's top-level root
    top = gpath[0]
    body = list(prog.body)
    body[top:top] = [sort_marker, builder]
    prog = Program(prog.functions, tuple(body))
    prog = T.dead_code_elimination(prog)
    return prog, {index_id: SORTED_SCAN}


# ---------------------------------------------------------------------------
# materialization strategy


def _loop_depth(p: Program, path: tuple) -> int:
    depth = 0
    stmts = p.body
    for i in path[:-1]:
        s = stmts[i]
        if isinstance(s, (Loop, PartLoop)):
            depth += 1
        stmts = s.body if isinstance(s, (Loop, PartLoop, If)) else ()
    return depth


def materialization_targets(p: Program, stats: Stats, cfg: PipelineConfig):
    """(targets, skipped) per the never-materialize rules: no conditions,
    outermost position, tiny table."""
    set_cols = ir.infer_set_columns(p)
    targets = []
    skipped = []
    for path, s in _walk_paths(p.body, ()):
        if not isinstance(s, Loop):
            continue
        desc = ir.emit_index(s.index)
        if isinstance(s.index, (Full, RangeSet)):
            skipped.append((desc, "plain loop over the full table"))
            continue
        if not isinstance(s.index, Filtered):
            continue
        if s.index.table in set_cols:
            skipped.append((desc, "temporary table scan"))
            continue
        if _loop_depth(p, path) == 0:
            skipped.append((desc, "iterated by an outermost loop"))
            continue
        if stats.nrows(s.index.table) <= cfg.tiny_table_threshold:
            skipped.append((desc, f"table under {cfg.tiny_table_threshold} rows"))
            continue
        targets.append((path, None))
    return targets, skipped


def concretize_index(stats: Stats, index_id: str) -> str:
    table, _, fields = ir.index_id_parts(index_id)
    if table not in stats.tables:
        return HASH  # temporary table: no statistics
    nrows = stats.nrows(table)
    cols = [stats.column(table, f) for f in fields]
    if len(cols) == 1:
        c = cols[0]
        if c.unique and c.min_int is not None \
                and (c.max_int - c.min_int + 1) <= 4 * max(nrows, 1):
            return FLAT_ARRAY
        if c.unique:
            return HASH
        return BALANCED_TREE
    if any(c.unique for c in cols):
        return HASH
    return BALANCED_TREE


def _array_kind(stats: Stats, keys: tuple) -> str:
    if len(keys) == 1 and isinstance(keys[0], FieldRef):
        fr = keys[0]
        if fr.set_id in stats.tables:
            try:
                c = stats.column(fr.set_id, fr.field)
            except KeyError:
                return "hash"
            if c.min_int is not None and \
                    (c.max_int - c.min_int + 1) <= 4 * max(c.distinct, 1):
                return "array"
    return "hash"


def concretize(p: Program, stats: Stats, cfg: PipelineConfig,
               pre_decisions: dict[str, str] | None = None,
               skipped: list | None = None) -> ConcretePlan:
    """Attach one storage decision to every runtime structure."""
    decisions = dict(pre_decisions or {})
    for s in ir.walk_program(p):
        if isinstance(s, IndexBuild) and s.index_id not in decisions:
            decisions[s.index_id] = concretize_index(stats, s.index_id)
    array_kinds: dict[str, str] = {}
    for s in ir.walk_program(p):
        if isinstance(s, ArrayAssign) and s.array_id not in array_kinds:
            array_kinds[s.array_id] = _array_kind(stats, s.keys)
    index_none = {desc: why for desc, why in (skipped or [])}
    return ConcretePlan(p, decisions, array_kinds, index_none)


# ---------------------------------------------------------------------------
# hash-join shaped blocking (both sides partitioned on the join attribute)


def _hash_join_sites(p: Program, stats: Stats, cfg: PipelineConfig):
    """Unfiltered big outer loop probing a big materialized index keyed by
    one of the outer row's fields."""
    set_cols = ir.infer_set_columns(p)
    for path, s in _walk_paths(p.body, ()):
        if not (isinstance(s, Loop) and isinstance(s.index, (Full, RangeSet))):
            continue
        t_out = s.index.table
        if t_out in set_cols or stats.nrows(t_out) <= cfg.tiny_table_threshold:
            continue
        for cpath, c in _walk_paths(s.body, path):
            if not (isinstance(c, Loop) and isinstance(c.index, MaterializedRef)
                    and c.index.key is not None and len(c.index.key) == 1):
                continue
            key = c.index.key[0]
            if not (isinstance(key, FieldRef) and key.var == s.var
                    and key.set_id == t_out):
                continue
            t_in, part, fields = ir.index_id_parts(c.index.index_id)
            if part is not None or len(fields) != 1 or t_in in set_cols:
                continue
            if stats.nrows(t_in) <= cfg.tiny_table_threshold:
                continue
            n_parts = max(stats.nrows(t_out), stats.nrows(t_in))
            n_parts = math.ceil(n_parts / cfg.block_rows)
            if n_parts < 2:
                continue
            return (path, cpath, c.index.index_id, key.field, fields[0],
                    t_out, t_in, n_parts)
    return None


def apply_hash_join_blocking(p: Program, site) -> Program:
    (path, cpath, index_id, f_out, f_in, t_out, t_in, n_parts) = site
    # drop the global builder for this index
    body = []
    builder_idx = None
    builder_guard = None
    for i, s in enumerate(p.body):
        is_builder = (
            isinstance(s, Loop) and len(s.body) == 1
            and isinstance(s.body[0], IndexBuild)
            and s.body[0].index_id == index_id
        )
        if is_builder:
            builder_guard = s.body[0].guard
            builder_idx = i
            continue
        body.append(s)
    if builder_idx is None:
        return p
    prog = Program(p.functions, tuple(body))
    top = path[0] - (1 if builder_idx < path[0] else 0)

    prog = T.loop_blocking(prog, (top,), n_parts,
                           key_fields=((t_out, f_out), (t_in, f_in)))
    wrapped = T.stmt_at(prog, (top,))
    assert isinstance(wrapped, PartLoop)
    pv = wrapped.var
    part_id = ir.make_index_id(t_in, (f_in,), pv)

    used = ir.all_vars(prog)
    bvar = ir.fresh_name("i", used)
    builder = Loop(bvar, Partitioned(RangeSet(t_in), pv),
                   (IndexBuild(part_id, t_in, (f_in,), bvar,
                               _retarget_guard(builder_guard, bvar)),))

    def retarget(stmts: tuple) -> tuple:
        out = []
        for s in stmts:
            if isinstance(s, Loop):
                iset = s.index
                if isinstance(iset, MaterializedRef) and iset.index_id == index_id:
                    iset = MaterializedRef(part_id, iset.key)
                out.append(Loop(s.var, iset, retarget(s.body)))
            elif isinstance(s, (PartLoop, If)):
                out.append(replace(s, body=retarget(s.body)))
            else:
                out.append(s)
        return tuple(out)

    new_part = PartLoop(pv, wrapped.num_parts, wrapped.key_fields,
                        (builder,) + retarget(wrapped.body))
    return T.replace_at(prog, (top,), [new_part])


def _retarget_guard(guard, bvar):
    if guard is None:
        return None
    # builder guards reference the old builder var; rebind it
    old_vars = {
        e.var for a in guard.atoms for x in ir.child_exprs(a)
        for e in ir.walk_exprs(x) if isinstance(e, FieldRef)
    }
    if len(old_vars) != 1:
        return guard
    return T.substitute(If(guard, (ir.Append("R", ()),)),
                        var_map={next(iter(old_vars)): bvar}).cond


# ---------------------------------------------------------------------------
# the pipeline


def optimize(p: Program, schema, stats: Stats,
             cfg: PipelineConfig | None = None) -> tuple[ConcretePlan, TransformTrace]:
    cfg = cfg or PipelineConfig()
    trace = TransformTrace()
    prog = p

    def run(name: str, op: str, fn) -> bool:
        nonlocal prog
        if not cfg.enabled(op):
            trace.add(name, False, "disabled", op, ())
            return False
        new = fn(prog)
        applied = new is not prog
        trace.add(name, applied, "" if applied else "no applicable target", op, ())
        prog = new
        return applied

    run("Condition Folding", "fold", T.fold_conditions)
    run("Inline", "inline", T.inline_functions)

    if cfg.enabled("interchange"):
        prog = _auto_interchange(prog, trace)
    run("LICM", "licm", T.licm)

    sorted_decisions: dict[str, str] = {}
    if cfg.prefer_sorted_aggregation and cfg.enabled("sortedagg"):
        new, sorted_decisions = sorted_aggregation(prog)
        trace.add("Sorted Aggregation", new is not prog,
                  "" if new is not prog else "no grouped pattern",
                  "sortedagg", ())
        prog = new

    if cfg.enabled("ise"):
        prog = _auto_ise(prog, trace, note_skip=True)

    tp_applied = run("Table Propagation", "tp", T.table_propagation)
    if tp_applied and cfg.enabled("ise"):
        prog = _auto_ise(prog, trace, note_skip=False)

    run("Dead Code Elimination", "dce", T.dead_code_elimination)
    run("Loop Fusion", "fusion", T.loop_fusion)

    skipped: list = []
    if cfg.enabled("materialize"):
        targets, skipped = materialization_targets(prog, stats, cfg)
        if targets:
            new = T.index_set_materialization(prog, targets)
            trace.add("Index Set Materialization", new is not prog, "",
                      "materialize", (tuple(targets),))
            prog = new
        else:
            trace.add("Index Set Materialization", False,
                      "no qualifying index set", "materialize", ())
    run("Index Set Pruning", "prune", T.index_set_pruning)
    run("Index Set Combination", "combine",
        lambda q: T.index_set_combination(q, stats))

    if cfg.enabled("block"):
        site = _hash_join_sites(prog, stats, cfg)
        if site is not None:
            new = apply_hash_join_blocking(prog, site)
            if new is not prog:
                trace.add("Loop Blocking", True, "", "hashjoin_block", (site,))
                prog = new

    plan = concretize(prog, stats, cfg, sorted_decisions, skipped)
    return plan, trace


def replay(p0: Program, trace: TransformTrace, stats: Stats | None = None,
           cfg: PipelineConfig | None = None) -> Program:
    """Re-run the applied trace entries on the original program; the result
    is byte-identical to the traced run's output program."""
    prog = p0
    for e in trace.entries:
        if not e.applied:
            continue
        if e.op == "fold":
            prog = T.fold_conditions(prog)
        elif e.op == "inline":
            prog = T.inline_functions(prog)
        elif e.op == "interchange":
            prog = T.loop_interchange(prog, e.params[0], e.params[1])
        elif e.op == "licm":
            prog = T.licm(prog)
        elif e.op == "sortedagg":
            prog, _ = sorted_aggregation(prog)
        elif e.op == "ise":
            prog = T.iteration_space_expansion(prog, e.params[0])
        elif e.op == "tp":
            prog = T.table_propagation(prog)
        elif e.op == "dce":
            prog = T.dead_code_elimination(prog)
        elif e.op == "fusion":
            prog = T.loop_fusion(prog)
        elif e.op == "materialize":
            prog = T.index_set_materialization(prog, list(e.params[0]))
        elif e.op == "prune":
            prog = T.index_set_pruning(prog)
        elif e.op == "combine":
            prog = T.index_set_combination(prog, stats)
        elif e.op == "hashjoin_block":
            prog = apply_hash_join_blocking(prog, e.params[0])
        elif e.op:
            raise TransformError("BAD_TRACE", e.op)
    return prog


# ---------------------------------------------------------------------------
# named derivation recipes


def _rangeify(p: Program) -> Program:
    set_cols = ir.infer_set_columns(p)

    def fix_index(iset):
        if isinstance(iset, Full) and iset.table not in set_cols:
            return RangeSet(iset.table)
        if isinstance(iset, Partitioned):
            return Partitioned(fix_index(iset.base), iset.part_var)
        return iset

    def walk(stmts):
        out = []
        for s in stmts:
            if isinstance(s, Loop):
                out.append(Loop(s.var, fix_index(s.index), walk(s.body)))
            elif isinstance(s, (PartLoop, If)):
                out.append(replace(s, body=walk(s.body)))
            else:
                out.append(s)
        return tuple(out)

    return Program(p.functions, walk(p.body))


def _join_start(p: Program) -> tuple:
    """The two-loop equi-join shape: outer full scan, inner filtered by a
    field of the outer row."""
    if len(p.body) != 1 or not isinstance(p.body[0], Loop):
        raise TransformError("BAD_SHAPE", "expected a single two-loop nest")
    outer = p.body[0]
    if not (isinstance(outer.index, Full) and len(outer.body) == 1
            and isinstance(outer.body[0], Loop)):
        raise TransformError("BAD_SHAPE", "expected a single two-loop nest")
    inner = outer.body[0]
    if not (isinstance(inner.index, Filtered) and len(inner.index.fields) == 1):
        raise TransformError("BAD_SHAPE", "inner loop must be field-filtered")
    v = inner.index.values[0]
    if not (isinstance(v, FieldRef) and v.var == outer.var):
        raise TransformError("BAD_SHAPE", "inner filter must probe the outer row")
    return outer, inner


def derive_named_algorithm(name: str, p: Program, num_parts: int = 4,
                           ) -> tuple[ConcretePlan, TransformTrace]:
    """Replay the recipe for a classic operator; the output program
    structurally matches the operator's canonical final form."""
    trace = TransformTrace()
    if name == "NestedLoops":
        outer, inner = _join_start(p)
        guard = Cond(tuple(
            Compare(v, "==", FieldRef(inner.index.table, inner.var, f))
            for f, v in zip(inner.index.fields, inner.index.values)
        ))
        prog = Program(p.functions, (Loop(
            outer.var, RangeSet(outer.index.table),
            (Loop(inner.var, RangeSet(inner.index.table),
                  (If(guard, inner.body),)),),
        ),))
        trace.add("Move conditions into the inner guard", True)
        trace.add("Loop-Independent Materialization", True)
        return ConcretePlan(prog), trace

    if name == "BlockNestedLoops":
        outer, inner = _join_start(p)
        prog = T.loop_blocking(p, (0,), num_parts)
        trace.add("Index Set Partitioning", True)
        trace.add("Loop Blocking", True, "", "block", ((0,), num_parts, ()))
        prog = T.loop_interchange(prog, (0, 0), (1, 0))
        trace.add("Loop Interchange", True, "", "interchange", ((0, 0), (1, 0)))
        prog = _materialize_in_partition(prog)
        trace.add("Index Set Materialization", True)
        prog = _rangeify(prog)
        trace.add("Loop-Independent Materialization", True)
        return ConcretePlan(prog, _partition_decisions(prog)), trace

    if name == "HashJoin":
        outer, inner = _join_start(p)
        f_out = inner.index.values[0].field
        f_in = inner.index.fields[0]
        prog = T.loop_blocking(p, (0,), num_parts, key_fields=(
            (outer.index.table, f_out), (inner.index.table, f_in)))
        trace.add("Partition both tables", True)
        trace.add("Loop Blocking", True, "", "block",
                  ((0,), num_parts,
                   ((outer.index.table, f_out), (inner.index.table, f_in))))
        prog = T.loop_interchange(prog, (0, 0), (1, 0))
        trace.add("Loop Interchange", True, "", "interchange", ((0, 0), (1, 0)))
        prog = _materialize_in_partition(prog)
        trace.add("Index Set Materialization", True)
        prog = _rangeify(prog)
        trace.add("Loop-Independent Materialization", True)
        return ConcretePlan(prog, _partition_decisions(prog)), trace

    if name == "IndexNestedLoops":
        outer, inner = _join_start(p)
        prog = T.loop_interchange(p, (0,), (1, 0))
        trace.add("Loop Interchange", True, "", "interchange", ((0,), (1, 0)))
        new_inner_path = (0, 0)
        target = T.stmt_at(prog, new_inner_path)
        prog = T.index_set_materialization(
            prog, [(new_inner_path, target.index.fields)])
        trace.add("Index Set Materialization", True)
        prog = _rangeify(prog)
        trace.add("Materialization", True)
        return ConcretePlan(prog, _partition_decisions(prog)), trace

    if name == "HashAggregation":
        hit = _find_grouped_pattern(p)
        if hit is None:
            raise TransformError("BAD_SHAPE", "no grouped aggregation pattern")
        gpath, g, j, inner, _, _ = hit
        prog = T.iteration_space_expansion(p, gpath + (j,))
        if prog is p:
            raise TransformError("BAD_SHAPE", "expansion not applicable")
        trace.add("Inline aggregate functions", True)
        trace.add("Iteration Space Expansion", True, "", "ise", (gpath + (j,),))
        new = T.licm(prog)
        trace.add("LICM", new is not prog, "", "licm", ())
        return ConcretePlan(new), trace

    if name == "SortedAggregation":
        prog, decisions = sorted_aggregation(p)
        if prog is p:
            raise TransformError("BAD_SHAPE", "no grouped aggregation pattern")
        for step in ("Materialize temporary table to sorted array",
                     "Materialize index set over the sorted array",
                     "Eliminate redundant iteration",
                     "Table Propagation",
                     "Dead Code Elimination"):
            trace.add(step, True)
        return ConcretePlan(prog, decisions), trace

    if name == "MultiBlockFlatten":
        prog = T.inline_functions(p)
        trace.add("Inline", prog is not p, "", "inline", ())
        new = T.licm(prog)
        trace.add("LICM", new is not prog, "", "licm", ())
        return ConcretePlan(new), trace

    raise TransformError("BAD_ALGORITHM", name)


def _materialize_in_partition(p: Program) -> Program:
    """Inside a partition loop, build the partition-local index probed by
    the (already interchanged) nest and retarget the probe."""
    if not (len(p.body) == 1 and isinstance(p.body[0], PartLoop)):
        raise TransformError("BAD_SHAPE", "expected a partition loop")
    part = p.body[0]
    pv = part.var
    # find the probing loop: innermost Filtered (possibly partitioned)
    probe_path = None
    probe = None
    for path, s in _walk_paths(part.body, ()):
        iset = s.index if isinstance(s, Loop) else None
        if isinstance(iset, Partitioned):
            iset = iset.base
        if isinstance(iset, Filtered):
            probe_path = path
            probe = s
    if probe is None:
        raise TransformError("BAD_SHAPE", "no probe loop to materialize")
    base = probe.index.base if isinstance(probe.index, Partitioned) else probe.index
    table, fields = base.table, base.fields
    index_id = ir.make_index_id(table, fields, pv)
    used = ir.all_vars(p)
    bvar = ir.fresh_name("j", used)
    builder = Loop(bvar, Partitioned(RangeSet(table), pv),
                   (IndexBuild(index_id, table, fields, bvar, None),))
    new_probe = Loop(probe.var, MaterializedRef(index_id, base.values),
                     probe.body)
    inner = T.replace_at(Program((), part.body), probe_path, [new_probe])
    return Program(p.functions, (PartLoop(
        pv, part.num_parts, part.key_fields, (builder,) + inner.body),))


def _partition_decisions(p: Program) -> dict[str, str]:
    out = {}
    for s in ir.walk_program(p):
        if isinstance(s, IndexBuild):
            out[s.index_id] = HASH
    return out
