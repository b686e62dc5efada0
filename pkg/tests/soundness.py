"""Random applicable instances per rewrite pass, for the soundness suites.

Each maker returns (program, transformed_program, db) for one seeded case;
the caller asserts oracle bags match.  Instances are built to satisfy each
pass's preconditions so the transformation genuinely fires most of the
time (the suites also count actual applications to guard against a maker
silently producing nothing but declines).
"""

from __future__ import annotations

import random

from genutil import COLS, TABLES, random_db, random_pure_program, unique_column_db
from forelem import ir
from forelem import transforms as T
from forelem.ingest import compute_stats
from forelem.ir import (
    AggFinish,
    AggInit,
    AggResult,
    AggStep,
    Append,
    Compare,
    Cond,
    FieldRef,
    Filtered,
    Full,
    If,
    Lit,
    Loop,
    Program,
)


def _nest_len(p: Program) -> int:
    n = 0
    s = p.body[0]
    while isinstance(s, Loop):
        n += 1
        if len(s.body) == 1 and isinstance(s.body[0], Loop):
            s = s.body[0]
        else:
            break
    return n


def make_interchange(rng: random.Random):
    p = random_pure_program(rng)
    db = random_db(rng)
    depth = _nest_len(p)
    perm = list(range(depth))
    rng.shuffle(perm)
    try:
        q = T.loop_interchange(p, (0,), tuple(perm))
    except T.TransformError:
        q = p
    return p, q, db


def _guarded_nest(rng: random.Random, ops=("<", "<=", "==", "!=", ">", ">=")):
    """2-3 deep nest of full scans with an innermost guard whose atoms mix
    outer-var, inner-var, and join conditions."""
    depth = rng.randint(2, 3)
    tables = rng.sample(TABLES, depth)
    vars_ = [f"v{d}" for d in range(depth)]
    atoms = []
    for _ in range(rng.randint(1, 3)):
        d = rng.randrange(depth)
        lhs = FieldRef(tables[d], vars_[d], rng.choice(COLS))
        if rng.random() < 0.4:
            d2 = rng.randrange(depth)
            rhs = FieldRef(tables[d2], vars_[d2], rng.choice(COLS))
        else:
            rhs = Lit(rng.randint(0, 4))
        atoms.append(Compare(lhs, rng.choice(ops), rhs))
    body: tuple = (Append("R", (FieldRef(tables[0], vars_[0], "f1"),)),)
    body = (If(Cond(tuple(atoms)), body),)
    for v, t in reversed(list(zip(vars_, tables))):
        body = (Loop(v, Full(t), body),)
    return Program((), body)


def make_licm(rng: random.Random):
    p = (_guarded_nest(rng) if rng.random() < 0.7
         else random_pure_program(rng))
    db = random_db(rng)
    return p, T.licm(p), db


def make_fold(rng: random.Random):
    p = (_guarded_nest(rng, ops=("==", "==", "<"))
         if rng.random() < 0.7 else random_pure_program(rng))
    db = random_db(rng)
    return p, T.fold_conditions(p), db


def make_inline(rng: random.Random):
    db = random_db(rng)
    correlated = rng.random() < 0.5
    params = ("p1",) if correlated else ()
    fval = ir.Param("p1") if correlated else Lit(rng.randint(0, 4))
    fbody = (
        ir.SetClear("T1"),
        Loop("i", Filtered("B", (rng.choice(COLS),), (fval,)),
             (Append("T1", (FieldRef("B", "i", rng.choice(COLS)),)),)),
    )
    fn = ir.FunctionDef("subquery", params, fbody, "T1")
    args = (FieldRef("A", "k", rng.choice(COLS)),) if correlated else ()
    p = Program((fn,), (
        Loop("k", Full("A"), (
            If(Cond((ir.Membership(FieldRef("A", "k", rng.choice(COLS)),
                                   ir.Call("subquery", args)),)),
               (Append("R", (FieldRef("A", "k", "f1"),)),)),
        )),
    ))
    return p, T.inline_functions(p), db


def make_dce(rng: random.Random):
    base = random_pure_program(rng)
    db = random_db(rng)
    # bolt on a chain of dead temp producers
    dead = (
        Loop("d1", Full("B"), (Append("T8", (FieldRef("B", "d1", "f1"),)),)),
        Loop("d2", Full("T8"), (Append("T9", (FieldRef("T8", "d2", "f1"),)),)),
    )
    p = Program((), dead + base.body)
    return p, T.dead_code_elimination(p), db


def make_table_propagation(rng: random.Random):
    db = random_db(rng)
    src = rng.choice(TABLES)
    guarded = rng.random() < 0.5
    inner: tuple = (Append("T1", (FieldRef(src, "i", "f1"),
                                  FieldRef(src, "i", "f2"))),)
    if guarded:
        inner = (If(Cond((Compare(FieldRef(src, "i", "f3"), "<", Lit(3)),)),
                    inner),)
    producer = Loop("i", Full(src) if rng.random() < 0.5 else
                    Filtered(src, ("f1",), (Lit(rng.randint(0, 4)),)), inner)
    if rng.random() < 0.5:
        consumer = Loop("j", Full("T1"),
                        (Append("R", (FieldRef("T1", "j", "f2"),)),))
    else:
        consumer = Loop("j", Filtered("T1", ("f2",), (Lit(rng.randint(0, 4)),)),
                        (Append("R", (FieldRef("T1", "j", "f1"),)),))
    p = Program((), (producer, consumer))
    return p, T.table_propagation(p), db


def grouped_program(rng: random.Random, kind: str | None = None) -> Program:
    """The lowered group-by shape over table A: temp, groups, distinct,
    per-group filtered aggregation."""
    kind = kind or rng.choice(ir.AGG_KINDS)
    gcol, acol = rng.sample(COLS, 2)
    step = Lit(1) if kind == "COUNT" else FieldRef("T1", "j", acol)
    return Program((), (
        Loop("i", Full("A"), (
            Append("T1", (FieldRef("A", "i", gcol), FieldRef("A", "i", acol))),
        )),
        Loop("i", Full("T1"), (Append("G1", (FieldRef("T1", "i", gcol),)),)),
        ir.Distinct("G1"),
        Loop("i", Full("G1"), (
            AggInit(0, kind),
            Loop("j", Filtered("T1", (gcol,), (FieldRef("G1", "i", gcol),)),
                 (AggStep(0, step),)),
            AggFinish(0),
            Append("R", (FieldRef("G1", "i", gcol), AggResult(0))),
        )),
    ))


def make_ise(rng: random.Random):
    db = random_db(rng)
    p = grouped_program(rng)
    q = T.iteration_space_expansion(p, (3, 1))
    if rng.random() < 0.5:
        q = T.licm(q)
    return p, q, db


def make_materialization(rng: random.Random):
    p = random_pure_program(rng)
    db = random_db(rng)
    return p, T.index_set_materialization(p), db


def make_pruning(rng: random.Random):
    db = random_db(rng)
    t = rng.choice(TABLES)
    kf, gf = rng.sample(COLS, 2)
    index_id = ir.make_index_id(t, (kf,))
    builder = Loop("b", ir.RangeSet(t), (ir.IndexBuild(index_id, t, (kf,), "b"),))
    guard = Cond((Compare(FieldRef(t, "c", gf),
                          rng.choice(("<", "==", ">=")), Lit(rng.randint(0, 4))),))
    consumers = [
        Loop("c", ir.MaterializedRef(index_id, (Lit(rng.randint(0, 4)),)),
             (If(guard, (Append("R", (FieldRef(t, "c", "f1"),)),)),))
        for _ in range(rng.randint(1, 2))
    ]
    p = Program((), (builder, *consumers))
    return p, T.index_set_pruning(p), db


def make_combination(rng: random.Random):
    # outer index over A keyed from a literal probe; inner existence-only
    # loop over B keyed by A's column; B's key column unique
    db = unique_column_db(rng, "B", "f1")
    stats = compute_stats(db)
    idx_a = ir.make_index_id("A", ("f1",))
    idx_b = ir.make_index_id("B", ("f1",))
    build_a = Loop("b1", ir.RangeSet("A"), (ir.IndexBuild(idx_a, "A", ("f1",), "b1"),))
    guard = None
    if rng.random() < 0.5:
        guard = Cond((Compare(FieldRef("B", "b2", "f2"), "<", Lit(3)),))
    build_b = Loop("b2", ir.RangeSet("B"),
                   (ir.IndexBuild(idx_b, "B", ("f1",), "b2", guard),))
    nest = Loop("i", ir.MaterializedRef(idx_a, (Lit(rng.randint(0, 4)),)), (
        Loop("j", ir.MaterializedRef(idx_b, (FieldRef("A", "i", "f2"),)),
             (Append("R", (FieldRef("A", "i", "f1"),)),)),
    ))
    p = Program((), (build_a, build_b, nest))
    return p, T.index_set_combination(p, stats), db


def make_blocking(rng: random.Random):
    p = random_pure_program(rng)
    db = random_db(rng)
    n = rng.randint(1, 4)
    if rng.random() < 0.4:
        outer = p.body[0]
        if isinstance(outer, Loop) and isinstance(outer.index, Full) \
                and len(outer.body) == 1 and isinstance(outer.body[0], Loop):
            inner = outer.body[0]
            if isinstance(inner.index, Filtered) and len(inner.index.fields) == 1 \
                    and isinstance(inner.index.values[0], FieldRef):
                f_in = inner.index.fields[0]
                f_out = inner.index.values[0].field
                q = T.loop_blocking(p, (0,), n, key_fields=(
                    (outer.index.table, f_out), (inner.index.table, f_in)))
                return p, q, db
    q = T.loop_blocking(p, (0,), n)
    return p, q, db


def make_fusion(rng: random.Random):
    db = random_db(rng)
    t = rng.choice(TABLES)
    iset = (Filtered(t, ("f1",), (Lit(rng.randint(0, 4)),))
            if rng.random() < 0.5 else Full(t))
    conflict = rng.random() < 0.3
    first = Loop("i", iset, (Append("T1", (FieldRef(t, "i", "f2"),)),))
    if conflict:
        # second loop reads the set the first builds: fusion must refuse
        second = Loop("j", iset, (
            If(Cond((ir.Membership(FieldRef(t, "j", "f2"), ir.SetRef("T1")),)),
               (Append("R", (FieldRef(t, "j", "f1"),)),)),
        ))
    else:
        second = Loop("j", iset, (Append("R", (FieldRef(t, "j", "f3"),)),))
    tail = Loop("k", Full("T1"), (Append("R2", (FieldRef("T1", "k", "f2"),)),))
    p = Program((), (first, second, tail))
    q = T.loop_fusion(p)
    if conflict:
        assert q is p, "fusion must decline a producer-consumer conflict"
    return p, q, db


PASS_MAKERS = {
    "loop_interchange": make_interchange,
    "licm": make_licm,
    "condition_folding": make_fold,
    "inline_functions": make_inline,
    "dead_code_elimination": make_dce,
    "table_propagation": make_table_propagation,
    "iteration_space_expansion": make_ise,
    "index_set_materialization": make_materialization,
    "index_set_pruning": make_pruning,
    "index_set_combination": make_combination,
    "loop_blocking": make_blocking,
    "loop_fusion": make_fusion,
}


def run_soundness(name: str, cases: int, seed0: int = 0):
    """Returns (cases checked, applications) after asserting oracle
    equality on every instance."""
    from forelem.engine import bag_equal, oracle_eval

    maker = PASS_MAKERS[name]
    applied = 0
    for k in range(cases):
        rng = random.Random(seed0 * 1_000_003 + k)
        p, q, db = maker(rng)
        ir.validate(p, db.schema)
        if q is not p:
            applied += 1
            ir.validate(q, db.schema)
        ra = oracle_eval(p, db)
        rb = oracle_eval(q, db)
        assert set(ra) == set(rb)
        for key in ra:
            assert bag_equal(ra[key], rb[key]), (
                name, k, ir.emit_text(p), ir.emit_text(q),
                sorted(ra[key].rows), sorted(rb[key].rows),
            )
    return cases, applied
