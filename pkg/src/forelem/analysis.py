"""Def-use chains, invariance checks, and the product access signature.

The signature is the legality currency of the rewrite pipeline: loop order
and partitioning are erased, index-set filters normalize to guard atoms,
and consumption of temporary sets is expanded through their producers, so
two programs touching the same part of the Cartesian product with the
same guards and emitting the same tuples compare equal.  Programs using
constructs outside that pure fragment (aggregates, arrays, membership,
distinct) fall back to alpha-canonical comparison, which is sound but
strict.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import ir
from .ir import (
    AggFinish,
    AggInit,
    AggResult,
    AggStep,
    Append,
    ArrayAssign,
    ArrayInitAll,
    ArrayRef,
    BinOp,
    Call,
    CallBind,
    Compare,
    Cond,
    Distinct,
    FieldRef,
    Filtered,
    Full,
    If,
    IndexBuild,
    Lit,
    Loop,
    MaterializedRef,
    Membership,
    NotEmpty,
    Param,
    PartLoop,
    Partitioned,
    Program,
    RangeSet,
    SetClear,
    SetRef,
    SortBy,
    Stmt,
)

# ---------------------------------------------------------------------------
# reads / writes


def stmt_writes(s: Stmt, deep: bool = True) -> set[tuple[str, object]]:
    """Namespaced ids written by a statement (and its body when deep)."""
    out: set[tuple[str, object]] = set()
    stmts = ir.walk_stmts((s,)) if deep else (s,)
    for x in stmts:
        if isinstance(x, Append):
            out.add(("set", x.target))
        elif isinstance(x, (Distinct, SetClear, SortBy)):
            out.add(("set", x.set_id))
        elif isinstance(x, CallBind):
            out.add(("set", x.target))
        elif isinstance(x, (ArrayInitAll, ArrayAssign)):
            out.add(("array", x.array_id))
        elif isinstance(x, IndexBuild):
            out.add(("index", x.index_id))
        elif isinstance(x, (AggInit, AggStep, AggFinish)):
            out.add(("agg", x.handle))
    return out


def stmt_reads(s: Stmt, funcs: dict[str, ir.FunctionDef] | None = None,
               deep: bool = True) -> set[tuple[str, object]]:
    """Namespaced ids read by a statement, following function calls."""
    out: set[tuple[str, object]] = set()
    funcs = funcs or {}

    def add_expr(e):
        for x in ir.walk_exprs(e):
            if isinstance(x, FieldRef):
                out.add(("set", x.set_id))
            elif isinstance(x, ArrayRef):
                out.add(("array", x.array_id))
            elif isinstance(x, AggResult):
                out.add(("agg", x.handle))

    def add_call(name: str):
        f = funcs.get(name)
        out.add(("func", name))
        if f is not None:
            for inner in f.body:
                out |= stmt_reads(inner, funcs)

    def add_index_set(iset):
        t = ir.index_table(iset)
        if t is not None:
            out.add(("set", t))
        if isinstance(iset, MaterializedRef):
            out.add(("index", iset.index_id))
        for e in ir.index_exprs(iset):
            add_expr(e)

    stmts = ir.walk_stmts((s,)) if deep else (s,)
    for x in stmts:
        if isinstance(x, Loop):
            add_index_set(x.index)
        elif isinstance(x, If):
            for a in x.cond.atoms:
                _atom_reads(a, add_expr, add_call, out)
        elif isinstance(x, IndexBuild):
            out.add(("set", x.table))
            if x.guard is not None:
                for a in x.guard.atoms:
                    _atom_reads(a, add_expr, add_call, out)
        elif isinstance(x, CallBind):
            add_call(x.func)
            for e in x.args:
                add_expr(e)
        else:
            for e in ir.child_exprs(x):
                add_expr(e)
    return out


def _atom_reads(a, add_expr, add_call, out):
    if isinstance(a, Compare):
        add_expr(a.lhs)
        add_expr(a.rhs)
    elif isinstance(a, Membership):
        add_expr(a.expr)
        if isinstance(a.target, SetRef):
            out.add(("set", a.target.set_id))
        else:
            add_call(a.target.func)
            for e in a.target.args:
                add_expr(e)
    elif isinstance(a, NotEmpty):
        out.add(("index", a.index_id))
        for e in a.keys:
            add_expr(e)


def stmt_vars(s: Stmt) -> set[str]:
    """Iteration variables referenced anywhere under a statement, minus the
    ones the statement itself binds."""
    bound: set[str] = set()
    used: set[str] = set()
    for x in ir.walk_stmts((s,)):
        if isinstance(x, (Loop, PartLoop)):
            bound.add(x.var)
        if isinstance(x, Loop):
            iset = x.index
            while isinstance(iset, Partitioned):
                used.add(iset.part_var)
                iset = iset.base
        if isinstance(x, IndexBuild):
            used.add(x.var)
        for e in ir.stmt_exprs(x):
            if isinstance(e, FieldRef):
                used.add(e.var)
    return used - bound


# ---------------------------------------------------------------------------
# def-use


@dataclass
class DefUseInfo:
    defs: dict[tuple[str, object], list[tuple]] = field(default_factory=dict)
    uses: dict[tuple[str, object], list[tuple]] = field(default_factory=dict)
    dead_sets: set[str] = field(default_factory=set)
    func_sets: dict[str, set[str]] = field(default_factory=dict)

    def chain(self, kind: str, name) -> list[tuple]:
        key = (kind, name)
        merged = [(p, "def") for p in self.defs.get(key, [])]
        merged += [(p, "use") for p in self.uses.get(key, [])]
        return sorted(merged)


def def_use(p: Program) -> DefUseInfo:
    """Defining and using statement paths per set, array, and index id."""
    info = DefUseInfo()
    funcs = {f.name: f for f in p.functions}

    def visit(stmts, prefix):
        for i, s in enumerate(stmts):
            path = prefix + (i,)
            for key in stmt_writes(s, deep=False):
                info.defs.setdefault(key, []).append(path)
            for key in stmt_reads(s, funcs, deep=False):
                info.uses.setdefault(key, []).append(path)
            if isinstance(s, (Loop, PartLoop, If)):
                visit(s.body, path)

    for f in p.functions:
        visit(f.body, ("F", f.name))
        info.func_sets[f.name] = {
            name for kind, name in
            set().union(*[stmt_reads(s, funcs) for s in f.body] or [set()])
            if kind == "set"
        }
    visit(p.body, ())

    for (kind, name), _ in info.defs.items():
        if kind != "set" or ir.is_result_set(name):
            continue
        if ("set", name) not in info.uses and not any(
            name == f.returns for f in p.functions
        ):
            info.dead_sets.add(name)
    return info


# ---------------------------------------------------------------------------
# invariance


def is_invariant(p: Program, loop_path: tuple, stmt: Stmt) -> bool:
    """True iff `stmt` (nested under the loop at `loop_path`) references
    neither the loop's iteration variable nor state defined by sibling
    statements inside the loop.

    For a guard statement only its condition counts: moving a guard out
    takes its body along, so body references stay inside the loop.
    """
    loop = resolve_path(p, loop_path)
    if not isinstance(loop, Loop):
        raise ir.IRError("BAD_PATH", "path does not name a loop")
    funcs = {f.name: f for f in p.functions}
    if isinstance(stmt, If):
        probe: Stmt = If(stmt.cond, (ir.SetClear("R"),))
        used_vars = stmt_vars(probe)
        reads = stmt_reads(probe, funcs) - {("set", "R")}
    else:
        used_vars = stmt_vars(stmt)
        reads = stmt_reads(stmt, funcs)
    if loop.var in used_vars:
        return False
    inner_writes = set()
    for s in loop.body:
        if s is stmt:
            continue
        inner_writes |= stmt_writes(s)
    return not (reads & inner_writes)


def resolve_path(p: Program, path: tuple) -> Stmt:
    if path and path[0] == "F":
        stmts = next(f.body for f in p.functions if f.name == path[1])
        rest = path[2:]
    else:
        stmts = p.body
        rest = path
    node = None
    for i in rest:
        node = stmts[i]
        stmts = node.body if isinstance(node, (Loop, PartLoop, If)) else ()
    if node is None:
        raise ir.IRError("BAD_PATH", repr(path))
    return node


# ---------------------------------------------------------------------------
# product signature

_PURE_STMTS = (Loop, If, Append)


def _strip_partitions(stmts: tuple[Stmt, ...]) -> tuple[Stmt, ...]:
    out = []
    for s in stmts:
        if isinstance(s, PartLoop):
            out.extend(_strip_partitions(s.body))
        elif isinstance(s, (Loop, If)):
            body = _strip_partitions(s.body)
            if isinstance(s, Loop):
                iset = s.index
                while isinstance(iset, Partitioned):
                    iset = iset.base
                out.append(Loop(s.var, iset, body))
            else:
                out.append(If(s.cond, body))
        else:
            out.append(s)
    return tuple(out)


def _is_pure_fragment(p: Program) -> bool:
    if p.functions:
        return False
    for s in ir.walk_program(p):
        if not isinstance(s, _PURE_STMTS):
            return False
        if isinstance(s, Loop) and isinstance(s.index, MaterializedRef):
            return False
        if isinstance(s, If):
            for a in s.cond.atoms:
                if not isinstance(a, Compare):
                    return False
    return True


@dataclass(frozen=True)
class ProductSignature:
    """Canonical description of the part of the product each result append
    touches; `opaque` carries the alpha-canonical form for programs outside
    the pure loop/guard/append fragment."""

    per_result: tuple = ()
    opaque: object = None

    def __eq__(self, other):
        if not isinstance(other, ProductSignature):
            return NotImplemented
        return (self.per_result, self.opaque) == (other.per_result, other.opaque)


def product_signature(p: Program) -> ProductSignature:
    stripped = Program((), _strip_partitions(p.body))
    if p.functions or not _is_pure_fragment(stripped):
        return ProductSignature(opaque=ir.canonical_form(stripped))

    # producer contexts per temp set; each context:
    #   (bindings: tuple[(var, table)], guards: tuple[Compare], exprs: tuple)
    temp_contexts: dict[str, list] = {}
    result_contexts: dict[str, list] = {}
    fresh = itertools.count()

    def sub_expr(e, mapping: dict[str, object]):
        """Replace FieldRefs over consumed temps by producer expressions."""
        if isinstance(e, FieldRef) and (e.var, "!") in mapping:
            cols, exprs = mapping[(e.var, "!")]
            return exprs[cols.index(e.field)]
        if isinstance(e, BinOp):
            return BinOp(e.op, sub_expr(e.lhs, mapping), sub_expr(e.rhs, mapping))
        return e

    set_cols = ir.infer_set_columns(p)

    def visit(stmts, bindings, guards, mapping):
        # bindings: list[(var, table)]; guards: list[Compare]; mapping holds
        # temp-loop substitutions.
        for s in stmts:
            if isinstance(s, Append):
                ctx = (tuple(bindings), tuple(guards),
                       tuple(sub_expr(e, mapping) for e in s.exprs))
                bucket = (result_contexts if ir.is_result_set(s.target)
                          else temp_contexts)
                bucket.setdefault(s.target, []).append(ctx)
            elif isinstance(s, If):
                atoms = [
                    Compare(sub_expr(a.lhs, mapping), a.op, sub_expr(a.rhs, mapping))
                    for a in s.cond.atoms
                ]
                visit(s.body, bindings, guards + atoms, mapping)
            elif isinstance(s, Loop):
                iset = s.index
                table = ir.index_table(iset)
                raw_guards = []
                if isinstance(iset, Filtered):
                    raw_guards = [
                        Compare(FieldRef(table, s.var, f), "==", v)
                        for f, v in zip(iset.fields, iset.values)
                    ]
                is_temp = table in set_cols and not ir.is_result_set(table)
                if is_temp:
                    # consuming a temp: one expansion per producer context
                    for ctx in temp_contexts.get(table, []):
                        cbind, cguards, cexprs = ctx
                        ren = {v: f"@{next(fresh)}" for v, _ in cbind}
                        rbind = [(ren[v], t) for v, t in cbind]
                        rguards = [_rename_cmp(g, ren) for g in cguards]
                        rexprs = tuple(_rename_expr(e, ren) for e in cexprs)
                        m2 = dict(mapping)
                        m2[(s.var, "!")] = (set_cols[table], rexprs)
                        gsub = [
                            Compare(sub_expr(g.lhs, m2), g.op, sub_expr(g.rhs, m2))
                            for g in raw_guards
                        ]
                        visit(s.body, bindings + rbind,
                              guards + rguards + gsub, m2)
                else:
                    gsub = [
                        Compare(sub_expr(g.lhs, mapping), g.op,
                                sub_expr(g.rhs, mapping))
                        for g in raw_guards
                    ]
                    visit(s.body, bindings + [(s.var, table)],
                          guards + gsub, mapping)
            else:  # pragma: no cover - pure fragment guarantees
                raise ir.IRError("BAD_STMT", repr(s))

    visit(stripped.body, [], [], {})

    per_result = tuple(
        sorted(
            (name, _canon_contexts(ctxs))
            for name, ctxs in result_contexts.items()
        )
    )
    return ProductSignature(per_result=per_result)


def _rename_expr(e, ren: dict[str, str]):
    if isinstance(e, FieldRef) and e.var in ren:
        return FieldRef(e.set_id, ren[e.var], e.field)
    if isinstance(e, BinOp):
        return BinOp(e.op, _rename_expr(e.lhs, ren), _rename_expr(e.rhs, ren))
    return e


def _rename_cmp(g: Compare, ren: dict[str, str]) -> Compare:
    return Compare(_rename_expr(g.lhs, ren), g.op, _rename_expr(g.rhs, ren))


def _canon_contexts(ctxs: list) -> tuple:
    return tuple(sorted(_canon_context(c) for c in ctxs))


def _canon_context(ctx) -> str:
    """Render one context canonically: loop order erased by trying every
    var assignment consistent with table grouping and keeping the least."""
    bindings, guards, exprs = ctx
    by_table: dict[str, list[str]] = {}
    for v, t in bindings:
        by_table.setdefault(t, []).append(v)
    tables = sorted(by_table)
    choices = []
    for perm_set in itertools.product(
        *[itertools.permutations(by_table[t]) for t in tables]
    ):
        ren = {}
        n = 0
        for t, perm in zip(tables, perm_set):
            for v in perm:
                ren[v] = f"${n}"
                n += 1
        gs = sorted(_render_guard(g, ren) for g in guards)
        es = [_render_expr(e, ren) for e in exprs]
        binds = sorted(f"{ren[v]}:{t}" for v, t in bindings)
        choices.append("|".join(binds) + "//" + ";".join(gs) + "//" + ",".join(es))
    return min(choices)


def _render_expr(e, ren) -> str:
    if isinstance(e, Lit):
        return ir.emit_expr(e)
    if isinstance(e, FieldRef):
        v = ren.get(e.var, e.var)
        return f"{e.set_id}[{v}].{e.field}"
    if isinstance(e, Param):
        return e.name
    if isinstance(e, BinOp):
        return f"({_render_expr(e.lhs, ren)} {e.op} {_render_expr(e.rhs, ren)})"
    raise ir.IRError("BAD_EXPR", repr(e))


_FLIP = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "==": "==", "!=": "!="}


def _render_guard(g: Compare, ren) -> str:
    a, b, op = _render_expr(g.lhs, ren), _render_expr(g.rhs, ren), g.op
    if op in ("==", "!=") and b < a:
        a, b = b, a
    elif op in (">", ">="):
        a, b, op = b, a, _FLIP[op]
    return f"{a} {op} {b}"
