"""Core data model for the order-free loop IR.

Programs are trees of frozen dataclasses: a Program owns function
definitions and a top-level statement list; statements own loops, guards,
appends, aggregate calls and index-set builders; loops iterate index-set
expressions.  Everything downstream (analysis, rewriting, execution)
consumes and produces these types.  Programs are immutable values: passes
build new trees, they never mutate.

The canonical textual form (see `emit_text`) is line oriented with 2-space
indentation; `parser.parse_text` is its inverse.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Union

INT_MAX = (1 << 63) - 1
INT_MIN = -(1 << 63)

AGG_KINDS = ("MIN", "MAX", "SUM", "COUNT", "AVG")


class IRError(Exception):
    """Structural validation failure; `code` is a stable machine tag."""

    def __init__(self, code: str, msg: str):
        super().__init__(f"{code}: {msg}")
        self.code = code
        self.msg = msg


# ---------------------------------------------------------------------------
# scalar expressions


@dataclass(frozen=True)
class Lit:
    value: Union[int, float, str]


@dataclass(frozen=True)
class FieldRef:
    """`T[v].f` - field f of the tuple of set T bound to iteration var v."""

    set_id: str
    var: str
    field: str


@dataclass(frozen=True)
class Param:
    """Reference to a function parameter (inside FunctionDef bodies only)."""

    name: str


@dataclass(frozen=True)
class AggResult:
    handle: int


@dataclass(frozen=True)
class ArrayRef:
    array_id: str
    keys: tuple["Expr", ...]


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    lhs: "Expr"
    rhs: "Expr"


Expr = Union[Lit, FieldRef, Param, AggResult, ArrayRef, BinOp]


# ---------------------------------------------------------------------------
# conditions (pure conjunctions of atoms)


@dataclass(frozen=True)
class Compare:
    lhs: Expr
    op: str  # == != < <= > >=
    rhs: Expr


@dataclass(frozen=True)
class SetRef:
    set_id: str


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Membership:
    """`expr in T` or `expr in f(args)` - bag membership test."""

    expr: Expr
    target: Union[SetRef, Call]


@dataclass(frozen=True)
class NotEmpty:
    """`is_not_empty(pPX.f[k])` - existence probe on a materialized index."""

    index_id: str
    keys: tuple[Expr, ...]


Atom = Union[Compare, Membership, NotEmpty]


@dataclass(frozen=True)
class Cond:
    atoms: tuple[Atom, ...]

    def __post_init__(self):
        if not self.atoms:
            raise IRError("EMPTY_COND", "condition must have at least one atom")


# ---------------------------------------------------------------------------
# index-set expressions


@dataclass(frozen=True)
class Full:
    """`pT` - every subscript of T, order undefined."""

    table: str


@dataclass(frozen=True)
class Filtered:
    """`pT.(f1,..)[ (v1,..) ]` - subscripts whose fields equal the values."""

    table: str
    fields: tuple[str, ...]
    values: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.fields) != len(self.values) or not self.fields:
            raise IRError("FILTER_ARITY", f"fields/values mismatch on {self.table}")


@dataclass(frozen=True)
class RangeSet:
    """`N_T` - subscripts 0..rowcount-1 of the stored table."""

    table: str


@dataclass(frozen=True)
class MaterializedRef:
    """Reference to a built index set.

    With `key` it yields the bag of subscripts stored under that key; with
    `key=None` it yields one representative subscript per distinct key (in
    key order for ordered concretizations), which is what a single pass
    over a sorted array iterates.
    """

    index_id: str
    key: Optional[tuple[Expr, ...]]


@dataclass(frozen=True)
class Partitioned:
    """`p_lT` / `N_lT` - the slice of the base index set owned by partition
    `part_var` of the enclosing partition loop."""

    base: Union[Full, RangeSet, Filtered]
    part_var: str


IndexSet = Union[Full, Filtered, RangeSet, MaterializedRef, Partitioned]


# ---------------------------------------------------------------------------
# statements


@dataclass(frozen=True)
class Loop:
    var: str
    index: IndexSet
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class PartLoop:
    """`for (l; l in N)` - iterate partition numbers 0..N-1.

    `key_fields` empty means contiguous row blocks; non-empty means the
    listed (table, field) pairs are hash-partitioned on that field so that
    matching keys land in the same partition number.
    """

    var: str
    num_parts: int
    key_fields: tuple[tuple[str, str], ...]
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class If:
    cond: Cond
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class Append:
    target: str
    exprs: tuple[Expr, ...]


@dataclass(frozen=True)
class AggInit:
    handle: int
    kind: str

    def __post_init__(self):
        if self.kind not in AGG_KINDS:
            raise IRError("BAD_AGG_KIND", self.kind)


@dataclass(frozen=True)
class AggStep:
    handle: int
    expr: Expr


@dataclass(frozen=True)
class AggFinish:
    handle: int


@dataclass(frozen=True)
class Distinct:
    set_id: str


@dataclass(frozen=True)
class SetClear:
    set_id: str


@dataclass(frozen=True)
class SortBy:
    """Order marker applied to a finished set; outside the rewrite pipeline."""

    set_id: str
    keys: tuple[tuple[str, bool], ...]  # (field, ascending)


@dataclass(frozen=True)
class ArrayInitAll:
    """`a[] = v` - (re)create array `a` with default value v for every key."""

    array_id: str
    init: Lit


@dataclass(frozen=True)
class ArrayAssign:
    array_id: str
    keys: tuple[Expr, ...]
    value: Expr

    def __post_init__(self):
        if not self.keys:
            raise IRError("ARRAY_ARITY", "array assignment needs at least one key")


@dataclass(frozen=True)
class IndexBuild:
    """`pPT.f[T[v].f] <-+ (v)` - insert subscript v under its key, optionally
    guarded (the guard is emitted as a preceding if line)."""

    index_id: str
    table: str
    fields: tuple[str, ...]
    var: str
    guard: Optional[Cond] = None


@dataclass(frozen=True)
class CallBind:
    target: str
    func: str
    args: tuple[Expr, ...]


Stmt = Union[
    Loop,
    PartLoop,
    If,
    Append,
    AggInit,
    AggStep,
    AggFinish,
    Distinct,
    SetClear,
    SortBy,
    ArrayInitAll,
    ArrayAssign,
    IndexBuild,
    CallBind,
]


@dataclass(frozen=True)
class FunctionDef:
    name: str
    params: tuple[str, ...]
    body: tuple[Stmt, ...]
    returns: str


@dataclass(frozen=True)
class Program:
    functions: tuple[FunctionDef, ...] = ()
    body: tuple[Stmt, ...] = ()


def is_result_set(set_id: str) -> bool:
    """Result sets keep their identity under alpha-renaming; temps do not."""
    return set_id == "R" or (set_id.startswith("R") and set_id[1:].isdigit())


# ---------------------------------------------------------------------------
# tree walking helpers


def walk_stmts(stmts: tuple[Stmt, ...]) -> Iterator[Stmt]:
    for s in stmts:
        yield s
        if isinstance(s, (Loop, PartLoop, If)):
            yield from walk_stmts(s.body)


def walk_program(p: Program) -> Iterator[Stmt]:
    for f in p.functions:
        yield from walk_stmts(f.body)
    yield from walk_stmts(p.body)


def child_exprs(obj) -> Iterator[Expr]:
    """Immediate scalar expressions of a statement, index set, or atom."""
    if isinstance(obj, Loop):
        yield from index_exprs(obj.index)
    elif isinstance(obj, If):
        for a in obj.cond.atoms:
            yield from child_exprs(a)
    elif isinstance(obj, Append):
        yield from obj.exprs
    elif isinstance(obj, AggStep):
        yield obj.expr
    elif isinstance(obj, ArrayInitAll):
        yield obj.init
    elif isinstance(obj, ArrayAssign):
        yield from obj.keys
        yield obj.value
    elif isinstance(obj, IndexBuild):
        if obj.guard is not None:
            for a in obj.guard.atoms:
                yield from child_exprs(a)
    elif isinstance(obj, CallBind):
        yield from obj.args
    elif isinstance(obj, Compare):
        yield obj.lhs
        yield obj.rhs
    elif isinstance(obj, Membership):
        yield obj.expr
        if isinstance(obj.target, Call):
            yield from obj.target.args
    elif isinstance(obj, NotEmpty):
        yield from obj.keys


def index_exprs(iset: IndexSet) -> Iterator[Expr]:
    if isinstance(iset, Filtered):
        yield from iset.values
    elif isinstance(iset, MaterializedRef) and iset.key is not None:
        yield from iset.key
    elif isinstance(iset, Partitioned):
        yield from index_exprs(iset.base)


def walk_exprs(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, BinOp):
        yield from walk_exprs(e.lhs)
        yield from walk_exprs(e.rhs)
    elif isinstance(e, ArrayRef):
        for k in e.keys:
            yield from walk_exprs(k)


def stmt_exprs(s: Stmt) -> Iterator[Expr]:
    """All scalar expressions under a statement, not descending into bodies."""
    for e in child_exprs(s):
        yield from walk_exprs(e)


def expr_vars(e: Expr) -> set[str]:
    return {x.var for x in walk_exprs(e) if isinstance(x, FieldRef)}


def index_table(iset: IndexSet) -> Optional[str]:
    """Base table or set iterated, if the index set names one directly."""
    if isinstance(iset, (Full, Filtered, RangeSet)):
        return iset.table
    if isinstance(iset, Partitioned):
        return index_table(iset.base)
    return None


# ---------------------------------------------------------------------------
# set signatures

POSITIONAL_PREFIX = "f"


def infer_set_columns(p: Program) -> dict[str, tuple[str, ...]]:
    """Column names of every appended set, derived from its append sites.

    A column appended as `T[v].f` keeps the name `f`; computed columns get
    positional names f0, f1, ...  All append sites of a set must agree on
    arity (IRError ARITY_MISMATCH otherwise); the first site wins on names.
    """
    cols: dict[str, tuple[str, ...]] = {}

    def name_of(e: Expr, pos: int) -> str:
        if isinstance(e, FieldRef):
            return e.field
        return f"{POSITIONAL_PREFIX}{pos}"

    for s in walk_program(p):
        if isinstance(s, Append):
            names = tuple(name_of(e, i) for i, e in enumerate(s.exprs))
            prev = cols.get(s.target)
            if prev is None:
                cols[s.target] = names
            elif len(prev) != len(names):
                raise IRError(
                    "ARITY_MISMATCH",
                    f"set {s.target} appended with arity {len(names)} and {len(prev)}",
                )
        elif isinstance(s, CallBind):
            cols.setdefault(s.target, ())
    return cols


# ---------------------------------------------------------------------------
# canonical text emission


def _emit_lit(v: Union[int, float, str]) -> str:
    if isinstance(v, bool):
        raise IRError("BAD_LIT", "boolean literals are not part of the IR")
    if isinstance(v, int):
        if v == INT_MAX:
            return "INT_MAX"
        if v == INT_MIN:
            return "INT_MIN"
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_expr(e: Expr) -> str:
    if isinstance(e, Lit):
        return _emit_lit(e.value)
    if isinstance(e, FieldRef):
        return f"{e.set_id}[{e.var}].{e.field}"
    if isinstance(e, Param):
        return e.name
    if isinstance(e, AggResult):
        return f"agg_result({e.handle})"
    if isinstance(e, ArrayRef):
        return f"{e.array_id}[{_emit_key(e.keys)}]"
    if isinstance(e, BinOp):
        lhs = emit_expr(e.lhs)
        rhs = emit_expr(e.rhs)
        if isinstance(e.lhs, BinOp):
            lhs = f"({lhs})"
        if isinstance(e.rhs, BinOp):
            rhs = f"({rhs})"
        return f"{lhs} {e.op} {rhs}"
    raise IRError("BAD_EXPR", repr(e))


def _emit_key(keys: tuple[Expr, ...]) -> str:
    if len(keys) == 1:
        return emit_expr(keys[0])
    return "(" + ", ".join(emit_expr(k) for k in keys) + ")"


def emit_index(iset: IndexSet, part: str = "") -> str:
    p_head = f"p_{part}" if part else "p"
    n_head = f"N_{part}" if part else "N_"
    if isinstance(iset, Full):
        return f"{p_head}{iset.table}"
    if isinstance(iset, RangeSet):
        return f"{n_head}{iset.table}"
    if isinstance(iset, Filtered):
        if len(iset.fields) == 1:
            fld = iset.fields[0]
        else:
            fld = "(" + ",".join(iset.fields) + ")"
        return f"{p_head}{iset.table}.{fld}[{_emit_key(iset.values)}]"
    if isinstance(iset, MaterializedRef):
        if iset.key is None:
            return iset.index_id
        return f"{iset.index_id}[{_emit_key(iset.key)}]"
    if isinstance(iset, Partitioned):
        return emit_index(iset.base, part=iset.part_var)
    raise IRError("BAD_INDEX", repr(iset))


def emit_atom(a: Atom) -> str:
    if isinstance(a, Compare):
        return f"{emit_expr(a.lhs)} {a.op} {emit_expr(a.rhs)}"
    if isinstance(a, Membership):
        if isinstance(a.target, SetRef):
            tgt = a.target.set_id
        else:
            tgt = f"{a.target.func}({', '.join(emit_expr(x) for x in a.target.args)})"
        return f"{emit_expr(a.expr)} in {tgt}"
    if isinstance(a, NotEmpty):
        return f"is_not_empty({a.index_id}[{_emit_key(a.keys)}])"
    raise IRError("BAD_ATOM", repr(a))


def emit_cond(c: Cond) -> str:
    return " && ".join(emit_atom(a) for a in c.atoms)


def _emit_stmt(out: io.StringIO, s: Stmt, depth: int) -> None:
    pad = "  " * depth
    if isinstance(s, Loop):
        out.write(f"{pad}forelem ({s.var}; {s.var} in {emit_index(s.index)})\n")
        for c in s.body:
            _emit_stmt(out, c, depth + 1)
    elif isinstance(s, PartLoop):
        keys = ""
        if s.key_fields:
            keys = " : " + ", ".join(f"{t}.{f}" for t, f in s.key_fields)
        out.write(f"{pad}for ({s.var}; {s.var} in {s.num_parts}{keys})\n")
        for c in s.body:
            _emit_stmt(out, c, depth + 1)
    elif isinstance(s, If):
        out.write(f"{pad}if ({emit_cond(s.cond)})\n")
        for c in s.body:
            _emit_stmt(out, c, depth + 1)
    elif isinstance(s, Append):
        out.write(f"{pad}{s.target} <- ({', '.join(emit_expr(e) for e in s.exprs)})\n")
    elif isinstance(s, AggInit):
        out.write(f"{pad}agg_init({s.handle}, {s.kind})\n")
    elif isinstance(s, AggStep):
        out.write(f"{pad}agg_step({s.handle}, {emit_expr(s.expr)})\n")
    elif isinstance(s, AggFinish):
        out.write(f"{pad}agg_finish({s.handle})\n")
    elif isinstance(s, Distinct):
        out.write(f"{pad}distinct({s.set_id})\n")
    elif isinstance(s, SetClear):
        out.write(f"{pad}clear({s.set_id})\n")
    elif isinstance(s, SortBy):
        keys = ", ".join(f"{f} {'asc' if asc else 'desc'}" for f, asc in s.keys)
        out.write(f"{pad}sort({s.set_id}, {keys})\n")
    elif isinstance(s, ArrayInitAll):
        out.write(f"{pad}{s.array_id}[] = {emit_expr(s.init)}\n")
    elif isinstance(s, ArrayAssign):
        out.write(f"{pad}{s.array_id}[{_emit_key(s.keys)}] = {emit_expr(s.value)}\n")
    elif isinstance(s, IndexBuild):
        key = _emit_key(tuple(FieldRef(s.table, s.var, f) for f in s.fields))
        line = f"{s.index_id}[{key}] <-+ ({s.var})"
        if s.guard is not None:
            out.write(f"{pad}if ({emit_cond(s.guard)})\n")
            out.write(f"{pad}  {line}\n")
        else:
            out.write(f"{pad}{line}\n")
    elif isinstance(s, CallBind):
        args = ", ".join(emit_expr(a) for a in s.args)
        out.write(f"{pad}{s.target} = {s.func}({args})\n")
    else:
        raise IRError("BAD_STMT", repr(s))


def emit_text(p: Program) -> str:
    """Serialize a Program to its canonical text; deterministic byte-for-byte."""
    out = io.StringIO()
    for f in p.functions:
        out.write(f"function {f.name}({', '.join(f.params)})\n")
        for s in f.body:
            _emit_stmt(out, s, 1)
        out.write(f"  return {f.returns}\n")
    for s in p.body:
        _emit_stmt(out, s, 0)
    return out.getvalue()


# ---------------------------------------------------------------------------
# validation


def validate(p: Program, schema=None) -> None:
    """Structural checks; with a schema also name/field resolution.

    Raises IRError with a distinct code per violation class:
    VAR_SHADOWED, AGG_UNMATCHED, UNKNOWN_SET, UNKNOWN_FIELD, FUNC_DUP,
    FUNC_RECURSION, BAD_FILTER_VALUE.
    """
    names = [f.name for f in p.functions]
    if len(set(names)) != len(names):
        raise IRError("FUNC_DUP", "duplicate function names")
    funcs = {f.name: f for f in p.functions}
    for f in p.functions:
        for s in walk_stmts(f.body):
            called = None
            if isinstance(s, CallBind):
                called = s.func
            elif isinstance(s, If):
                for a in s.cond.atoms:
                    if isinstance(a, Membership) and isinstance(a.target, Call):
                        called = a.target.func
            if called == f.name:
                raise IRError("FUNC_RECURSION", f.name)

    set_cols = infer_set_columns(p)

    def table_fields(name: str) -> Optional[tuple[str, ...]]:
        if name in set_cols:
            return set_cols[name]
        if schema is not None and name in schema.tables:
            return tuple(c.name for c in schema.tables[name].columns)
        return None

    def check_expr(e: Expr, live: dict[str, str], params: set[str]) -> None:
        for x in walk_exprs(e):
            if isinstance(x, FieldRef):
                if x.var not in live:
                    raise IRError("UNKNOWN_SET", f"unbound iteration var {x.var}")
                if live[x.var] != x.set_id:
                    raise IRError(
                        "UNKNOWN_SET", f"{x.var} iterates {live[x.var]}, not {x.set_id}"
                    )
                fields = table_fields(x.set_id)
                if fields is not None and x.field not in fields:
                    raise IRError(
                        "UNKNOWN_FIELD", f"{x.set_id} has no column {x.field}"
                    )
            elif isinstance(x, Param) and x.name not in params:
                raise IRError("UNKNOWN_SET", f"unbound parameter {x.name}")

    def check_index(iset: IndexSet, live: dict[str, str], params: set[str],
                    part_vars: set[str]) -> None:
        if isinstance(iset, (Full, Filtered, RangeSet)):
            if schema is not None and iset.table not in set_cols \
                    and iset.table not in schema.tables:
                raise IRError("UNKNOWN_SET", iset.table)
        if isinstance(iset, Filtered):
            fields = table_fields(iset.table)
            if fields is not None:
                for f in iset.fields:
                    if f not in fields:
                        raise IRError("UNKNOWN_FIELD", f"{iset.table} has no column {f}")
            for v in iset.values:
                if not isinstance(v, (Lit, FieldRef, Param)):
                    raise IRError(
                        "BAD_FILTER_VALUE",
                        "index-set values must be literals or field references",
                    )
                check_expr(v, live, params)
        elif isinstance(iset, MaterializedRef) and iset.key is not None:
            for v in iset.key:
                check_expr(v, live, params)
        elif isinstance(iset, Partitioned):
            if iset.part_var not in part_vars:
                raise IRError("UNKNOWN_SET", f"unbound partition var {iset.part_var}")
            check_index(iset.base, live, params, part_vars)

    def check_block(stmts: tuple[Stmt, ...], live: dict[str, str],
                    params: set[str], part_vars: set[str],
                    open_aggs: set[int]) -> None:
        for s in stmts:
            if isinstance(s, Loop):
                if s.var in live or s.var in part_vars:
                    raise IRError("VAR_SHADOWED", s.var)
                check_index(s.index, live, params, part_vars)
                tbl = index_table(s.index)
                if tbl is None and isinstance(s.index, MaterializedRef):
                    tbl = _index_id_table(s.index.index_id)
                inner = dict(live)
                inner[s.var] = tbl if tbl is not None else s.var
                check_block(s.body, inner, params, part_vars, open_aggs)
            elif isinstance(s, PartLoop):
                if s.var in live or s.var in part_vars:
                    raise IRError("VAR_SHADOWED", s.var)
                check_block(s.body, live, params, part_vars | {s.var}, open_aggs)
            elif isinstance(s, If):
                for a in s.cond.atoms:
                    for e in child_exprs(a):
                        check_expr(e, live, params)
                check_block(s.body, live, params, part_vars, open_aggs)
            elif isinstance(s, Append):
                for e in s.exprs:
                    check_expr(e, live, params)
            elif isinstance(s, AggInit):
                open_aggs.add(s.handle)
            elif isinstance(s, AggStep):
                if s.handle not in open_aggs:
                    raise IRError("AGG_UNMATCHED", f"agg_step({s.handle}) before init")
                check_expr(s.expr, live, params)
            elif isinstance(s, AggFinish):
                if s.handle not in open_aggs:
                    raise IRError("AGG_UNMATCHED", f"agg_finish({s.handle}) before init")
            elif isinstance(s, (ArrayAssign,)):
                for e in s.keys:
                    check_expr(e, live, params)
                check_expr(s.value, live, params)
            elif isinstance(s, IndexBuild):
                if s.var not in live:
                    raise IRError("UNKNOWN_SET", f"builder var {s.var} unbound")
                if s.guard is not None:
                    for a in s.guard.atoms:
                        for e in child_exprs(a):
                            check_expr(e, live, params)
            elif isinstance(s, CallBind):
                if s.func not in funcs:
                    raise IRError("UNKNOWN_SET", f"unknown function {s.func}")
                for e in s.args:
                    check_expr(e, live, params)

    for f in p.functions:
        check_block(f.body, {}, set(f.params), set(), set())
    check_block(p.body, {}, set(), set(), set())


def _index_id_table(index_id: str) -> Optional[str]:
    """Source table encoded in a materialized index id `pPTable[_l].fields`."""
    if not index_id.startswith("pP"):
        return None
    return index_id_parts(index_id)[0]


def index_id_parts(index_id: str) -> tuple[str, Optional[str], tuple[str, ...]]:
    """Split `pPTable.f` / `pPTable_l.(f1,f2)` into (table, part_var, fields)."""
    if not index_id.startswith("pP"):
        raise IRError("BAD_INDEX", index_id)
    head, _, tail = index_id[2:].partition(".")
    part = None
    if "_" in head:
        head, _, part = head.rpartition("_")
    if tail.startswith("(") and tail.endswith(")"):
        fields = tuple(x.strip() for x in tail[1:-1].split(","))
    else:
        fields = (tail,)
    return head, part, fields


def make_index_id(table: str, fields: tuple[str, ...], part_var: str | None = None) -> str:
    suffix = f"_{part_var}" if part_var else ""
    if len(fields) == 1:
        return f"pP{table}{suffix}.{fields[0]}"
    return f"pP{table}{suffix}.({','.join(fields)})"


# ---------------------------------------------------------------------------
# alpha-equivalence

_RENAMED_KINDS = ("set", "array", "index")


class _Renamer:
    """Global ids renamed on first occurrence; iteration variables are
    scoped at their binders (sibling loops may reuse a name)."""

    def __init__(self):
        self.maps: dict[str, dict[str, str]] = {k: {} for k in _RENAMED_KINDS}
        self.var_n = 0

    def get(self, kind: str, name: str) -> str:
        m = self.maps[kind]
        if name not in m:
            m[name] = f"%{kind[0]}{len(m)}"
        return m[name]

    def bind_var(self, scope: dict[str, str], name: str) -> dict[str, str]:
        new = dict(scope)
        new[name] = f"%v{self.var_n}"
        self.var_n += 1
        return new


def _canon_set(r: _Renamer, set_id: str, appended: set[str]) -> str:
    if set_id in appended and not is_result_set(set_id):
        return r.get("set", set_id)
    return set_id


def _canon(obj, r: _Renamer, appended: set[str], scope: dict[str, str]):
    def c(x):
        return _canon(x, r, appended, scope)

    if isinstance(obj, tuple):
        return tuple(c(x) for x in obj)
    if isinstance(obj, Lit):
        return ("lit", obj.value, type(obj.value).__name__)
    if isinstance(obj, FieldRef):
        return ("fr", _canon_set(r, obj.set_id, appended),
                scope.get(obj.var, obj.var), obj.field)
    if isinstance(obj, Param):
        return ("param", scope.get(obj.name, obj.name))
    if isinstance(obj, AggResult):
        return ("aggres", obj.handle)
    if isinstance(obj, ArrayRef):
        return ("aref", r.get("array", obj.array_id), c(obj.keys))
    if isinstance(obj, BinOp):
        return ("bin", obj.op, c(obj.lhs), c(obj.rhs))
    if isinstance(obj, Compare):
        return ("cmp", obj.op, c(obj.lhs), c(obj.rhs))
    if isinstance(obj, Membership):
        if isinstance(obj.target, SetRef):
            tgt = ("sref", _canon_set(r, obj.target.set_id, appended))
        else:
            tgt = ("call", obj.target.func, c(obj.target.args))
        return ("in", c(obj.expr), tgt)
    if isinstance(obj, NotEmpty):
        return ("nonempty", r.get("index", obj.index_id), c(obj.keys))
    if isinstance(obj, Cond):
        return ("cond", c(obj.atoms))
    if isinstance(obj, Full):
        return ("full", _canon_set(r, obj.table, appended))
    if isinstance(obj, RangeSet):
        return ("range", _canon_set(r, obj.table, appended))
    if isinstance(obj, Filtered):
        return ("filt", _canon_set(r, obj.table, appended), obj.fields,
                c(obj.values))
    if isinstance(obj, MaterializedRef):
        key = None if obj.key is None else c(obj.key)
        return ("mref", r.get("index", obj.index_id), key)
    if isinstance(obj, Partitioned):
        return ("part", c(obj.base), scope.get(obj.part_var, obj.part_var))
    if isinstance(obj, Loop):
        inner = r.bind_var(scope, obj.var)
        return ("loop", inner[obj.var], c(obj.index),
                _canon(obj.body, r, appended, inner))
    if isinstance(obj, PartLoop):
        inner = r.bind_var(scope, obj.var)
        return ("ploop", inner[obj.var], obj.num_parts,
                tuple((_canon_set(r, t, appended), f) for t, f in obj.key_fields),
                _canon(obj.body, r, appended, inner))
    if isinstance(obj, If):
        return ("if", c(obj.cond), c(obj.body))
    if isinstance(obj, Append):
        return ("app", _canon_set(r, obj.target, appended), c(obj.exprs))
    if isinstance(obj, AggInit):
        return ("agginit", obj.handle, obj.kind)
    if isinstance(obj, AggStep):
        return ("aggstep", obj.handle, c(obj.expr))
    if isinstance(obj, AggFinish):
        return ("aggfin", obj.handle)
    if isinstance(obj, Distinct):
        return ("distinct", _canon_set(r, obj.set_id, appended))
    if isinstance(obj, SetClear):
        return ("clear", _canon_set(r, obj.set_id, appended))
    if isinstance(obj, SortBy):
        return ("sort", _canon_set(r, obj.set_id, appended), obj.keys)
    if isinstance(obj, ArrayInitAll):
        return ("ainit", r.get("array", obj.array_id), c(obj.init))
    if isinstance(obj, ArrayAssign):
        return ("aset", r.get("array", obj.array_id), c(obj.keys), c(obj.value))
    if isinstance(obj, IndexBuild):
        guard = None if obj.guard is None else c(obj.guard)
        return ("ibuild", r.get("index", obj.index_id),
                _canon_set(r, obj.table, appended), obj.fields,
                scope.get(obj.var, obj.var), guard)
    if isinstance(obj, CallBind):
        return ("cbind", _canon_set(r, obj.target, appended), obj.func,
                c(obj.args))
    if isinstance(obj, FunctionDef):
        inner: dict[str, str] = {}
        for x in obj.params:
            inner = r.bind_var(inner, x)
        return ("func", obj.name, tuple(inner[x] for x in obj.params),
                _canon(obj.body, r, appended, inner),
                _canon_set(r, obj.returns, appended))
    raise IRError("BAD_STMT", repr(obj))


def _defined_sets(p: Program) -> set[str]:
    out: set[str] = set()
    for s in walk_program(p):
        if isinstance(s, Append):
            out.add(s.target)
        elif isinstance(s, (Distinct, SetClear)):
            out.add(s.set_id)
        elif isinstance(s, CallBind):
            out.add(s.target)
    for f in p.functions:
        out.add(f.returns)
    return out


def canonical_form(p: Program):
    r = _Renamer()
    appended = _defined_sets(p)
    return _canon((p.functions, p.body), r, appended, {})


def structural_eq(a: Program, b: Program) -> bool:
    """Tree equality up to consistent renaming of iteration/partition vars,
    temp-set ids, array ids and materialized-index ids."""
    return canonical_form(a) == canonical_form(b)


# ---------------------------------------------------------------------------
# small construction helpers used across passes and tests


def lit(v) -> Lit:
    return Lit(v)


def conj(*atoms: Atom) -> Cond:
    return Cond(tuple(atoms))


def single(stmt: Stmt) -> tuple[Stmt, ...]:
    return (stmt,)


def replace_body(s: Stmt, body: tuple[Stmt, ...]) -> Stmt:
    return replace(s, body=body)


def all_vars(p: Program) -> set[str]:
    out: set[str] = set()
    for s in walk_program(p):
        if isinstance(s, (Loop, PartLoop)):
            out.add(s.var)
        for e in stmt_exprs(s):
            if isinstance(e, FieldRef):
                out.add(e.var)
    for f in p.functions:
        out.update(f.params)
    return out


def fresh_name(base: str, used: set[str]) -> str:
    if base not in used:
        used.add(base)
        return base
    i = 2
    while f"{base}{i}" in used:
        i += 1
    used.add(f"{base}{i}")
    return f"{base}{i}"
