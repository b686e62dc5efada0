"""SQL subset frontend: parse and lower to the initial loop-nest form.

Supported: SELECT (columns, MIN/MAX/SUM/COUNT/AVG aggregates, + - * /
arithmetic), FROM with aliases, WHERE as a pure conjunction of
{=, <>, <, <=, >, >=} comparisons plus IN (subquery), GROUP BY, DISTINCT,
ORDER BY.  No OR, LIKE, EXISTS, NULL, HAVING, or outer joins; anything
else raises UNSUPPORTED_SQL naming the construct.

Lowering is deterministic and dumb on purpose: joins become a perfect
loop nest in FROM order with every WHERE conjunct in one innermost guard
(folding equalities into index sets is a separate rewrite), group-by
lowers to the temp/groups/distinct three-loop pattern, IN subqueries
become function definitions called from a membership guard.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import ir
from .ingest import Schema, parse_date, parse_decimal


class SqlError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(f"{code}: {msg}")
        self.code = code
        self.msg = msg


# ---------------------------------------------------------------------------
# query model (fully name-resolved)


@dataclass(frozen=True)
class SqlCol:
    alias: str
    table: str
    column: str
    type: str


@dataclass(frozen=True)
class SqlLit:
    value: object


@dataclass(frozen=True)
class SqlArith:
    op: str
    lhs: "SqlExpr"
    rhs: "SqlExpr"


@dataclass(frozen=True)
class SqlAgg:
    kind: str
    arg: "SqlExpr | None"  # None only for COUNT(*)


SqlExpr = object


@dataclass(frozen=True)
class SelectItem:
    expr: SqlExpr
    output: str


@dataclass(frozen=True)
class SqlComp:
    lhs: SqlExpr
    op: str  # == != < <= > >=
    rhs: SqlExpr


@dataclass(frozen=True)
class SqlIn:
    expr: SqlExpr
    sub: "SqlQuery"


@dataclass(frozen=True)
class SqlQuery:
    select: tuple[SelectItem, ...]
    distinct: bool
    froms: tuple[tuple[str, str], ...]  # (table, alias)
    conjuncts: tuple
    group_by: tuple[SqlCol, ...]
    order_by: tuple[tuple[str, bool], ...]  # (output column, ascending)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d+|\d+)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<str>'(?:[^']|'')*')|(?P<op><>|<=|>=|[(),.*+\-/<>=]))"
)

_UNSUPPORTED_KEYWORDS = {
    "LIKE", "OR", "EXISTS", "NULL", "NOT", "BETWEEN", "HAVING", "CASE",
    "UNION", "OUTER", "JOIN", "LEFT", "RIGHT", "IS",
}

_AGG_NAMES = {"MIN", "MAX", "SUM", "COUNT", "AVG"}


class _Tokens:
    def __init__(self, text: str):
        self.toks: list[tuple[str, str]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].isspace() or pos >= len(text):
                break
            m = _TOKEN_RE.match(text, pos)
            if not m or m.end() == pos:
                raise SqlError("SYNTAX", f"cannot tokenize at {text[pos:pos+20]!r}")
            pos = m.end()
            if m.group("num"):
                self.toks.append(("num", m.group("num")))
            elif m.group("name"):
                self.toks.append(("name", m.group("name")))
            elif m.group("str"):
                self.toks.append(("str", m.group("str")[1:-1].replace("''", "'")))
            else:
                self.toks.append(("op", m.group("op")))
        self.pos = 0

    def peek(self) -> tuple[str, str]:
        if self.pos >= len(self.toks):
            return ("eof", "")
        return self.toks[self.pos]

    def next(self) -> tuple[str, str]:
        t = self.peek()
        self.pos += 1
        return t

    def kw(self, word: str) -> bool:
        k, v = self.peek()
        if k == "name" and v.upper() == word:
            self.pos += 1
            return True
        return False

    def expect_kw(self, word: str):
        if not self.kw(word):
            raise SqlError("SYNTAX", f"expected {word}, got {self.peek()[1]!r}")

    def op(self, sym: str) -> bool:
        k, v = self.peek()
        if k == "op" and v == sym:
            self.pos += 1
            return True
        return False

    def expect_op(self, sym: str):
        if not self.op(sym):
            raise SqlError("SYNTAX", f"expected {sym!r}, got {self.peek()[1]!r}")


# ---------------------------------------------------------------------------
# parsing + name resolution


class _Binder:
    def __init__(self, schema: Schema, froms: list[tuple[str, str]],
                 outer: "_Binder | None" = None):
        self.schema = schema
        self.outer = outer
        self.aliases: dict[str, str] = {}
        for table, alias in froms:
            if alias in self.aliases:
                raise SqlError("SYNTAX", f"duplicate alias {alias}")
            self.aliases[alias] = table

    def resolve(self, alias: str | None, column: str) -> SqlCol:
        if alias is not None:
            table = self.aliases.get(alias)
            if table is None:
                if self.outer is not None:
                    return self.outer.resolve(alias, column)
                raise SqlError("UNKNOWN_TABLE", alias)
            t = self.schema.tables.get(table)
            if t is None or not t.has_column(column):
                raise SqlError("UNKNOWN_COLUMN", f"{alias}.{column}")
            return SqlCol(alias, table, column, t.column(column).type)
        hits = [
            (a, t) for a, t in self.aliases.items()
            if self.schema.tables[t].has_column(column)
        ]
        if len(hits) > 1:
            raise SqlError("AMBIGUOUS", column)
        if not hits:
            if self.outer is not None:
                return self.outer.resolve(None, column)
            raise SqlError("UNKNOWN_COLUMN", column)
        a, t = hits[0]
        return SqlCol(a, t, column, self.schema.tables[t].column(column).type)

    def is_local(self, col: SqlCol) -> bool:
        return col.alias in self.aliases and self.aliases[col.alias] == col.table


def _parse_from(tk: _Tokens, schema: Schema) -> list[tuple[str, str]]:
    froms = []
    while True:
        k, v = tk.next()
        if k != "name":
            raise SqlError("SYNTAX", "expected a table name in FROM")
        if v not in schema.tables:
            raise SqlError("UNKNOWN_TABLE", v)
        alias = v
        k2, v2 = tk.peek()
        if k2 == "name" and v2.upper() not in (
            "WHERE", "GROUP", "ORDER", "AS",
        ) and v2.upper() not in _UNSUPPORTED_KEYWORDS:
            alias = v2
            tk.pos += 1
        elif tk.kw("AS"):
            k3, alias = tk.next()
            if k3 != "name":
                raise SqlError("SYNTAX", "expected alias after AS")
        froms.append((v, alias))
        if not tk.op(","):
            return froms


def _parse_expr(tk: _Tokens, binder: _Binder, allow_agg: bool):
    def factor():
        k, v = tk.peek()
        if tk.op("("):
            e = addsub()
            tk.expect_op(")")
            return e
        if k == "num":
            tk.pos += 1
            return SqlLit(float(v) if "." in v else int(v))
        if k == "str":
            tk.pos += 1
            return SqlLit(v)
        if k == "name":
            upper = v.upper()
            if upper in _UNSUPPORTED_KEYWORDS:
                raise SqlError("UNSUPPORTED_SQL", v)
            if upper == "DATE":
                tk.pos += 1
                k2, v2 = tk.next()
                if k2 != "str":
                    raise SqlError("SYNTAX", "expected a date string after DATE")
                return SqlLit(("date", parse_date(v2)))
            if upper in _AGG_NAMES:
                tk.pos += 1
                if not allow_agg:
                    raise SqlError("UNSUPPORTED_SQL",
                                   f"{upper} aggregate not allowed here")
                tk.expect_op("(")
                if upper == "COUNT" and tk.op("*"):
                    tk.expect_op(")")
                    return SqlAgg("COUNT", None)
                arg = _parse_expr(tk, binder, allow_agg=False)
                tk.expect_op(")")
                _check_agg_arg(upper, arg)
                return SqlAgg(upper, arg)
            tk.pos += 1
            if tk.op("."):
                k2, col = tk.next()
                if k2 != "name":
                    raise SqlError("SYNTAX", "expected a column name")
                return binder.resolve(v, col)
            return binder.resolve(None, v)
        raise SqlError("SYNTAX", f"unexpected token {v!r}")

    def muldiv():
        e = factor()
        while True:
            if tk.op("*"):
                e = SqlArith("*", e, factor())
            elif tk.op("/"):
                e = SqlArith("/", e, factor())
            else:
                return e

    def addsub():
        e = muldiv()
        while True:
            if tk.op("+"):
                e = SqlArith("+", e, muldiv())
            elif tk.op("-"):
                e = SqlArith("-", e, muldiv())
            else:
                return e

    return addsub()


def _check_agg_arg(kind: str, arg) -> None:
    for c in _walk_sql(arg):
        if isinstance(c, SqlAgg):
            raise SqlError("UNSUPPORTED_SQL", "nested aggregate")
        if isinstance(c, SqlCol) and c.type == "string" and kind != "COUNT":
            raise SqlError("UNSUPPORTED_SQL", f"{kind} over a string column")


def _walk_sql(e):
    yield e
    if isinstance(e, SqlArith):
        yield from _walk_sql(e.lhs)
        yield from _walk_sql(e.rhs)
    elif isinstance(e, SqlAgg) and e.arg is not None:
        yield from _walk_sql(e.arg)


_OP_MAP = {"=": "==", "<>": "!=", "<": "<", "<=": "<=", ">": ">", ">=": ">="}


def _parse_where(tk: _Tokens, binder: _Binder, schema: Schema, depth: int):
    conjuncts = []
    while True:
        lhs = _parse_expr(tk, binder, allow_agg=False)
        k, v = tk.peek()
        if k == "name" and v.upper() == "IN":
            tk.pos += 1
            if depth > 0:
                raise SqlError("UNSUPPORTED_SQL", "nested IN subquery")
            tk.expect_op("(")
            sub = _parse_query(tk, schema, binder, depth + 1)
            tk.expect_op(")")
            if len(sub.select) != 1:
                raise SqlError("UNSUPPORTED_SQL", "IN subquery must select one column")
            conjuncts.append(SqlIn(lhs, sub))
        elif k == "op" and v in _OP_MAP:
            tk.pos += 1
            rhs = _parse_expr(tk, binder, allow_agg=False)
            conjuncts.append(_typed_compare(lhs, _OP_MAP[v], rhs))
        elif k == "name" and v.upper() in _UNSUPPORTED_KEYWORDS:
            raise SqlError("UNSUPPORTED_SQL", v)
        else:
            raise SqlError("SYNTAX", f"expected a comparison, got {v!r}")
        if not tk.kw("AND"):
            k, v = tk.peek()
            if k == "name" and v.upper() in _UNSUPPORTED_KEYWORDS:
                raise SqlError("UNSUPPORTED_SQL", v)
            return conjuncts


def _expr_type(e) -> str | None:
    if isinstance(e, SqlCol):
        return e.type
    if isinstance(e, SqlLit):
        if isinstance(e.value, tuple):
            return "date"
        if isinstance(e.value, str):
            return "string"
        return None  # bare numeric adapts to the other side
    return None


def _adapt_literal(l: SqlLit, target: str | None) -> SqlLit:
    v = l.value
    if isinstance(v, tuple) and v[0] == "date":
        return SqlLit(v[1])
    if target == "decimal" and isinstance(v, (int, float)):
        return SqlLit(int(round(v * 100)))
    if target == "date" and isinstance(v, str):
        return SqlLit(parse_date(v))
    if isinstance(v, float) and target == "int":
        raise SqlError("SYNTAX", f"fractional literal {v} compared to int column")
    return SqlLit(v)


def _typed_compare(lhs, op: str, rhs) -> SqlComp:
    lt, rt = _expr_type(lhs), _expr_type(rhs)
    if isinstance(lhs, SqlLit):
        lhs = _adapt_literal(lhs, rt)
        lt = _expr_type(lhs)
    if isinstance(rhs, SqlLit):
        rhs = _adapt_literal(rhs, lt)
        rt = _expr_type(rhs)
    if lt is not None and rt is not None:
        numeric = {"int", "float", "date", "decimal"}
        if (lt in numeric) != (rt in numeric):
            raise SqlError("SYNTAX", f"type mismatch in comparison ({lt} vs {rt})")
    return SqlComp(lhs, op, rhs)


def _parse_query(tk: _Tokens, schema: Schema, outer: _Binder | None,
                 depth: int) -> SqlQuery:
    tk.expect_kw("SELECT")
    distinct = tk.kw("DISTINCT")
    # FROM comes later in the text but is needed for resolution: scan ahead.
    save = tk.pos
    depth_parens = 0
    from_pos = None
    while tk.pos < len(tk.toks):
        k, v = tk.next()
        if k == "op" and v == "(":
            depth_parens += 1
        elif k == "op" and v == ")":
            depth_parens -= 1
        elif k == "name" and v.upper() == "FROM" and depth_parens == 0:
            from_pos = tk.pos
            break
    if from_pos is None:
        raise SqlError("SYNTAX", "missing FROM")
    froms = _parse_from(tk, schema)
    after_from = tk.pos
    binder = _Binder(schema, froms, outer)

    # select list
    tk.pos = save
    select: list[SelectItem] = []
    if tk.op("*"):
        for table, alias in froms:
            for c in schema.tables[table].columns:
                select.append(SelectItem(
                    SqlCol(alias, table, c.name, c.type), c.name))
        if not tk.kw("FROM"):
            raise SqlError("SYNTAX", "expected FROM after *")
    else:
        while True:
            e = _parse_expr(tk, binder, allow_agg=True)
            name = None
            if tk.kw("AS"):
                k, name = tk.next()
                if k != "name":
                    raise SqlError("SYNTAX", "expected a name after AS")
            if name is None:
                if isinstance(e, SqlCol):
                    name = e.column
                else:
                    name = f"{ir.POSITIONAL_PREFIX}{len(select)}"
            select.append(SelectItem(e, name))
            if not tk.op(","):
                break
        tk.expect_kw("FROM")
    tk.pos = after_from

    conjuncts: list = []
    if tk.kw("WHERE"):
        conjuncts = _parse_where(tk, binder, schema, depth)

    group_by: list[SqlCol] = []
    if tk.kw("GROUP"):
        tk.expect_kw("BY")
        while True:
            e = _parse_expr(tk, binder, allow_agg=False)
            if not isinstance(e, SqlCol):
                raise SqlError("UNSUPPORTED_SQL", "GROUP BY over an expression")
            group_by.append(e)
            if not tk.op(","):
                break

    order_by: list[tuple[str, bool]] = []
    if tk.kw("ORDER"):
        tk.expect_kw("BY")
        while True:
            e = _parse_expr(tk, binder, allow_agg=False)
            out_name = _output_name_of(e, select)
            asc = True
            if tk.kw("DESC"):
                asc = False
            else:
                tk.kw("ASC")
            order_by.append((out_name, asc))
            if not tk.op(","):
                break

    k, v = tk.peek()
    if depth == 0 and k != "eof":
        if k == "name" and v.upper() in _UNSUPPORTED_KEYWORDS:
            raise SqlError("UNSUPPORTED_SQL", v)
        raise SqlError("SYNTAX", f"trailing input at {v!r}")

    aggs = [e for item in select for e in _walk_sql(item.expr) if isinstance(e, SqlAgg)]
    if aggs and not group_by:
        for item in select:
            if not any(isinstance(e, SqlAgg) for e in _walk_sql(item.expr)):
                raise SqlError("UNSUPPORTED_SQL",
                               "bare column next to an aggregate without GROUP BY")
    if group_by:
        keys = {(c.alias, c.column) for c in group_by}
        for item in select:
            for e in _walk_sql(item.expr):
                if isinstance(e, SqlAgg):
                    break
            else:
                if not (isinstance(item.expr, SqlCol)
                        and (item.expr.alias, item.expr.column) in keys):
                    raise SqlError(
                        "UNSUPPORTED_SQL",
                        f"column {item.output} not in GROUP BY",
                    )
        for c in group_by:
            if not any(isinstance(item.expr, SqlCol)
                       and (item.expr.alias, item.expr.column) == (c.alias, c.column)
                       for item in select):
                raise SqlError("UNSUPPORTED_SQL",
                               f"GROUP BY column {c.column} not selected")

    return SqlQuery(tuple(select), distinct, tuple(froms), tuple(conjuncts),
                    tuple(group_by), tuple(order_by))


def _output_name_of(e, select: list[SelectItem]) -> str:
    if isinstance(e, SqlCol):
        for item in select:
            if isinstance(item.expr, SqlCol) and \
                    (item.expr.alias, item.expr.column) == (e.alias, e.column):
                return item.output
        raise SqlError("UNSUPPORTED_SQL", "ORDER BY column not in select list")
    raise SqlError("UNSUPPORTED_SQL", "ORDER BY over an expression")


def parse_sql(text: str, schema: Schema) -> SqlQuery:
    """Parse and name-resolve a query in the supported subset."""
    tk = _Tokens(text.strip().rstrip(";"))
    return _parse_query(tk, schema, None, 0)


# ---------------------------------------------------------------------------
# lowering

_VAR_ALPHABET = "ijkmnoqrstuvwxyz"


class _Lowerer:
    def __init__(self, schema: Schema):
        self.schema = schema
        self.temp_n = 0
        self.group_n = 0
        self.func_n = 0
        self.handle_n = 0  # aggregate handles are unique across query blocks
        self.functions: list[ir.FunctionDef] = []

    def new_handles(self, n: int) -> list[int]:
        out = list(range(self.handle_n, self.handle_n + n))
        self.handle_n += n
        return out

    def new_temp(self) -> str:
        self.temp_n += 1
        return f"T{self.temp_n}"

    def new_group(self) -> str:
        self.group_n += 1
        return f"G{self.group_n}"

    def new_func(self) -> str:
        self.func_n += 1
        return "subquery" if self.func_n == 1 else f"subquery{self.func_n}"


def lower_to_forelem(q: SqlQuery, schema: Schema) -> ir.Program:
    """Lower a resolved query to its initial (unoptimized) program."""
    low = _Lowerer(schema)
    body = _lower_query(q, low, "R", outer_vars=None)
    p = ir.Program(tuple(low.functions), tuple(body))
    ir.validate(p, schema)
    return p


def _lower_query(q: SqlQuery, low: _Lowerer, result: str,
                 outer_vars: dict[tuple[str, str], ir.FieldRef] | None,
                 param_map: dict[tuple[str, str], str] | None = None) -> list:
    """Produce the statement list computing `result` for one query block."""
    var_iter = iter(_VAR_ALPHABET)
    alias_var: dict[str, str] = {}
    for _, alias in q.froms:
        alias_var[alias] = next(var_iter)

    def col_expr(c: SqlCol) -> ir.Expr:
        if c.alias in alias_var:
            return ir.FieldRef(c.table, alias_var[c.alias], c.column)
        if param_map is not None and (c.alias, c.column) in param_map:
            return ir.Param(param_map[(c.alias, c.column)])
        if outer_vars is not None and (c.alias, c.column) in outer_vars:
            return outer_vars[(c.alias, c.column)]
        raise SqlError("UNKNOWN_COLUMN", f"{c.alias}.{c.column}")

    def scalar(e) -> ir.Expr:
        if isinstance(e, SqlLit):
            return ir.Lit(e.value)
        if isinstance(e, SqlCol):
            return col_expr(e)
        if isinstance(e, SqlArith):
            return ir.BinOp(e.op, scalar(e.lhs), scalar(e.rhs))
        raise SqlError("UNSUPPORTED_SQL", repr(e))

    # WHERE atoms -> one innermost guard (folding happens in the rewriter)
    atoms: list[ir.Atom] = []
    for cj in q.conjuncts:
        if isinstance(cj, SqlComp):
            atoms.append(ir.Compare(scalar(cj.lhs), cj.op, scalar(cj.rhs)))
        else:
            atoms.append(_lower_subquery(cj, q, low, alias_var, scalar))

    def wrap_guard(inner: list) -> list:
        if atoms:
            return [ir.If(ir.Cond(tuple(atoms)), tuple(inner))]
        return inner

    def nest(innermost: list) -> list:
        stmts = wrap_guard(innermost)
        for table, alias in reversed(q.froms):
            stmts = [ir.Loop(alias_var[alias], ir.Full(table), tuple(stmts))]
        return stmts

    aggs: list[SqlAgg] = []
    for item in q.select:
        for e in _walk_sql(item.expr):
            if isinstance(e, SqlAgg) and e not in aggs:
                aggs.append(e)

    out: list = []
    if q.group_by:
        out = _lower_group_by(q, low, result, aggs, scalar, nest, alias_var)
    elif aggs:
        handle = dict(zip(aggs, low.new_handles(len(aggs))))
        for a in aggs:
            out.append(ir.AggInit(handle[a], a.kind))
        steps = [
            ir.AggStep(handle[a], ir.Lit(1) if a.arg is None else scalar(a.arg))
            for a in aggs
        ]
        out.extend(nest(steps))
        for a in aggs:
            out.append(ir.AggFinish(handle[a]))
        out.append(ir.Append(result, tuple(
            _select_expr(item.expr, handle, scalar) for item in q.select
        )))
    else:
        out = nest([ir.Append(result, tuple(scalar(i.expr) for i in q.select))])

    if q.distinct:
        out.append(ir.Distinct(result))
    if q.order_by:
        out.append(ir.SortBy(result, q.order_by))
    return out


def _select_expr(e, handle: dict, scalar):
    if isinstance(e, SqlAgg):
        return ir.AggResult(handle[e])
    if isinstance(e, SqlArith):
        return ir.BinOp(e.op, _select_expr(e.lhs, handle, scalar),
                        _select_expr(e.rhs, handle, scalar))
    return scalar(e)


def _lower_group_by(q: SqlQuery, low: _Lowerer, result: str, aggs,
                    scalar, nest, alias_var) -> list:
    temp = low.new_temp()
    groups = low.new_group()

    # every referenced column rides along in the temp
    pulled: list[SqlCol] = []
    seen_cols: set[tuple[str, str]] = set()
    names: dict[tuple[str, str], str] = {}

    def pull(c: SqlCol) -> str:
        key = (c.alias, c.column)
        if key not in seen_cols:
            if c.column in names.values():
                raise SqlError(
                    "UNSUPPORTED_SQL",
                    f"duplicate column name {c.column} in grouping temp",
                )
            seen_cols.add(key)
            names[key] = c.column
            pulled.append(c)
        return names[key]

    for c in q.group_by:
        pull(c)
    for a in aggs:
        if a.arg is not None:
            for e in _walk_sql(a.arg):
                if isinstance(e, SqlCol):
                    pull(e)

    out = nest([ir.Append(temp, tuple(scalar(c) for c in pulled))])

    gvar = "i"
    out.append(ir.Loop(gvar, ir.Full(temp), (
        ir.Append(groups, tuple(
            ir.FieldRef(temp, gvar, names[(c.alias, c.column)]) for c in q.group_by
        )),
    )))
    out.append(ir.Distinct(groups))

    group_fields = tuple(names[(c.alias, c.column)] for c in q.group_by)
    handle = dict(zip(aggs, low.new_handles(len(aggs))))
    avar, jvar = "i", "j"

    def temp_scalar(e) -> ir.Expr:
        if isinstance(e, SqlCol):
            return ir.FieldRef(temp, jvar, names[(e.alias, e.column)])
        if isinstance(e, SqlLit):
            return ir.Lit(e.value)
        if isinstance(e, SqlArith):
            return ir.BinOp(e.op, temp_scalar(e.lhs), temp_scalar(e.rhs))
        raise SqlError("UNSUPPORTED_SQL", repr(e))

    inner: list = []
    for a in aggs:
        inner.append(ir.AggInit(handle[a], a.kind))
    inner.append(ir.Loop(jvar, ir.Filtered(
        temp, group_fields,
        tuple(ir.FieldRef(groups, avar, f) for f in group_fields),
    ), tuple(
        ir.AggStep(handle[a], ir.Lit(1) if a.arg is None else temp_scalar(a.arg))
        for a in aggs
    )))
    for a in aggs:
        inner.append(ir.AggFinish(handle[a]))

    def result_expr(e) -> ir.Expr:
        if isinstance(e, SqlAgg):
            return ir.AggResult(handle[e])
        if isinstance(e, SqlCol):
            return ir.FieldRef(groups, avar, names[(e.alias, e.column)])
        if isinstance(e, SqlLit):
            return ir.Lit(e.value)
        if isinstance(e, SqlArith):
            return ir.BinOp(e.op, result_expr(e.lhs), result_expr(e.rhs))
        raise SqlError("UNSUPPORTED_SQL", repr(e))

    inner.append(ir.Append(result, tuple(result_expr(i.expr) for i in q.select)))
    out.append(ir.Loop(avar, ir.Full(groups), tuple(inner)))
    return out


def _lower_subquery(cj: SqlIn, q: SqlQuery, low: _Lowerer, alias_var,
                    scalar) -> ir.Membership:
    """Lower one IN-subquery to a FunctionDef plus a membership atom.

    Correlated columns (references to the enclosing FROM) become function
    parameters, passed as field references at the call site.
    """
    sub = cj.sub
    local_aliases = {alias for _, alias in sub.froms}
    correlated: list[SqlCol] = []
    for part in list(sub.conjuncts):
        if isinstance(part, SqlIn):
            raise SqlError("UNSUPPORTED_SQL", "nested IN subquery")
        for e in (part.lhs, part.rhs):
            for c in _walk_sql(e):
                if isinstance(c, SqlCol) and c.alias not in local_aliases:
                    if (c.alias, c.column) not in {(x.alias, x.column)
                                                   for x in correlated}:
                        correlated.append(c)

    fname = low.new_func()
    params = tuple(f"p{i + 1}" for i in range(len(correlated)))
    param_map = {(c.alias, c.column): p for c, p in zip(correlated, params)}

    ret = low.new_temp()
    fbody = [ir.SetClear(ret)]
    fbody.extend(_lower_query(sub, low, ret, outer_vars=None, param_map=param_map))
    low.functions.append(ir.FunctionDef(fname, params, tuple(fbody), ret))

    args = tuple(scalar(c) for c in correlated)
    return ir.Membership(scalar(cj.expr), ir.Call(fname, args))
