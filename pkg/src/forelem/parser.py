"""Parser for the canonical loop-IR text format.

`parse_text(emit_text(p))` returns a Program structurally equal to `p` for
any canonical program.  The one normalization performed: an `if` line whose
body is exactly one index-build line parses into the build statement's
guard field (which is also how `emit_text` prints guarded builds).

Materialized index ids (`pPTable.field`) are recognized by pre-scanning the
input for builder lines, so table names starting with `P` do not collide
with the `pP` prefix.
"""

from __future__ import annotations

import re

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
    FunctionDef,
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

NAME = r"[A-Za-z][A-Za-z0-9_]*"
_NAME_RE = re.compile(NAME)


class ParseError(Exception):
    def __init__(self, msg: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col
        self.msg = msg


class _Cursor:
    """Single-line scanner with position-carrying errors."""

    def __init__(self, text: str, lineno: int):
        self.text = text
        self.pos = 0
        self.lineno = lineno

    def error(self, msg: str):
        raise ParseError(msg, self.lineno, self.pos + 1)

    def peek(self, n: int = 1) -> str:
        return self.text[self.pos:self.pos + n]

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def skip_ws(self):
        while not self.eof() and self.text[self.pos] == " ":
            self.pos += 1

    def expect(self, tok: str):
        if not self.text.startswith(tok, self.pos):
            self.error(f"expected {tok!r}")
        self.pos += len(tok)

    def try_take(self, tok: str) -> bool:
        if self.text.startswith(tok, self.pos):
            self.pos += len(tok)
            return True
        return False

    def name(self) -> str:
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            self.error("expected a name")
        self.pos = m.end()
        return m.group()

    def integer(self) -> int:
        m = re.compile(r"-?\d+").match(self.text, self.pos)
        if not m:
            self.error("expected an integer")
        self.pos = m.end()
        return int(m.group())

    def done(self):
        self.skip_ws()
        if not self.eof():
            self.error("trailing input")


def _parse_literal(c: _Cursor) -> Lit:
    if c.try_take("INT_MAX"):
        return Lit(ir.INT_MAX)
    if c.try_take("INT_MIN"):
        return Lit(ir.INT_MIN)
    if c.peek() == '"':
        c.pos += 1
        out = []
        while True:
            if c.eof():
                c.error("unterminated string")
            ch = c.text[c.pos]
            c.pos += 1
            if ch == "\\":
                out.append(c.text[c.pos])
                c.pos += 1
            elif ch == '"':
                return Lit("".join(out))
            else:
                out.append(ch)
    m = re.compile(r"-?\d+\.\d+(e-?\d+)?|-?\d+e-?\d+").match(c.text, c.pos)
    if m:
        c.pos = m.end()
        return Lit(float(m.group()))
    m = re.compile(r"-?\d+").match(c.text, c.pos)
    if m:
        c.pos = m.end()
        return Lit(int(m.group()))
    c.error("expected a literal")


def _parse_atom_expr(c: _Cursor, ctx: "_Ctx"):
    c.skip_ws()
    if c.peek() == "(":
        c.expect("(")
        e = _parse_expr(c, ctx)
        c.expect(")")
        return e
    ch = c.peek()
    if ch == '"' or ch.isdigit() or (ch == "-" and c.peek(2)[1:].isdigit()):
        return _parse_literal(c)
    if c.text.startswith("INT_MAX", c.pos) or c.text.startswith("INT_MIN", c.pos):
        return _parse_literal(c)
    if c.text.startswith("agg_result(", c.pos):
        c.expect("agg_result(")
        h = c.integer()
        c.expect(")")
        return AggResult(h)
    name = c.name()
    if c.peek() == "[":
        c.expect("[")
        inner_start = c.pos
        # FieldRef is `set[var].field`; ArrayRef is `arr[expr...]`.
        m = re.compile(NAME + r"\]\.").match(c.text, inner_start)
        if m:
            var = c.name()
            c.expect("].")
            fld = c.name()
            return FieldRef(name, var, fld)
        keys = _parse_key_list(c, ctx)
        c.expect("]")
        return ArrayRef(name, keys)
    return Param(name)


def _parse_key_list(c: _Cursor, ctx: "_Ctx") -> tuple:
    c.skip_ws()
    if c.peek() == "(":
        # distinguish a key tuple `(k1, k2)` from a parenthesized operand of
        # a single key expression like `(a + b) * c`
        save = c.pos
        c.expect("(")
        keys = [_parse_expr(c, ctx)]
        if c.try_take(","):
            while True:
                keys.append(_parse_expr(c, ctx))
                if not c.try_take(","):
                    break
            c.expect(")")
            return tuple(keys)
        c.pos = save
    return (_parse_expr(c, ctx),)


def _parse_term(c: _Cursor, ctx: "_Ctx"):
    e = _parse_atom_expr(c, ctx)
    while True:
        c.skip_ws()
        if c.try_take("* "):
            rhs = _parse_atom_expr(c, ctx)
            e = BinOp("*", e, rhs)
        elif c.try_take("/ "):
            rhs = _parse_atom_expr(c, ctx)
            e = BinOp("/", e, rhs)
        else:
            return e


def _parse_expr(c: _Cursor, ctx: "_Ctx"):
    e = _parse_term(c, ctx)
    while True:
        c.skip_ws()
        if c.try_take("+ "):
            rhs = _parse_term(c, ctx)
            e = BinOp("+", e, rhs)
        elif c.try_take("- "):
            rhs = _parse_term(c, ctx)
            e = BinOp("-", e, rhs)
        else:
            return e


_CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")


def _parse_cond_atom(c: _Cursor, ctx: "_Ctx"):
    c.skip_ws()
    if c.text.startswith("is_not_empty(", c.pos):
        c.expect("is_not_empty(")
        idx = _parse_index_id(c, ctx)
        c.expect("[")
        keys = _parse_key_list(c, ctx)
        c.expect("]")
        c.expect(")")
        return NotEmpty(idx, keys)
    lhs = _parse_expr(c, ctx)
    c.skip_ws()
    if c.try_take("in "):
        name = c.name()
        if c.peek() == "(":
            c.expect("(")
            args = []
            c.skip_ws()
            if c.peek() != ")":
                args.append(_parse_expr(c, ctx))
                while c.try_take(","):
                    args.append(_parse_expr(c, ctx))
            c.expect(")")
            return Membership(lhs, Call(name, tuple(args)))
        return Membership(lhs, SetRef(name))
    for op in _CMP_OPS:
        if c.try_take(op + " "):
            rhs = _parse_expr(c, ctx)
            return Compare(lhs, op, rhs)
    c.error("expected a comparison or membership")


def _parse_cond(c: _Cursor, ctx: "_Ctx") -> Cond:
    atoms = [_parse_cond_atom(c, ctx)]
    while True:
        c.skip_ws()
        if c.try_take("&& "):
            atoms.append(_parse_cond_atom(c, ctx))
        else:
            return Cond(tuple(atoms))


def _parse_index_id(c: _Cursor, ctx: "_Ctx") -> str:
    start = c.pos
    c.expect("pP")
    c.name()
    c.expect(".")
    if c.try_take("("):
        while c.peek() != ")":
            c.pos += 1
        c.expect(")")
    else:
        c.name()
    return c.text[start:c.pos]


def _parse_index_set(c: _Cursor, ctx: "_Ctx"):
    c.skip_ws()
    # Materialized reference: only ids announced by a builder line qualify.
    if c.text.startswith("pP", c.pos):
        save = c.pos
        try:
            idx = _parse_index_id(c, ctx)
        except ParseError:
            c.pos = save
        else:
            if idx in ctx.index_ids:
                if c.try_take("["):
                    keys = _parse_key_list(c, ctx)
                    c.expect("]")
                    return MaterializedRef(idx, keys)
                return MaterializedRef(idx, None)
            c.pos = save
    if c.try_take("N_"):
        return _parse_plain_index(c, ctx, RangeSet, allow_filter=False)
    if c.try_take("p_"):
        return _parse_plain_index(c, ctx, Full, allow_filter=True, underscored=True)
    if c.try_take("p"):
        return _parse_plain_index(c, ctx, Full, allow_filter=True)
    c.error("expected an index set")


def _parse_plain_index(c: _Cursor, ctx: "_Ctx", kind, allow_filter: bool,
                       underscored: bool = False):
    part_var = None
    if underscored or (kind is RangeSet and ctx.part_vars):
        # `p_lA` / `N_lA`: the partition var must be bound by an enclosing
        # partition loop; longest binding wins.
        rest = c.text[c.pos:]
        for pv in sorted(ctx.part_vars, key=len, reverse=True):
            if rest.startswith(pv) and len(rest) > len(pv) and \
                    re.match(NAME, rest[len(pv):]):
                part_var = pv
                c.pos += len(pv)
                break
        if underscored and part_var is None:
            c.error("unknown partition variable in index set")
    table = c.name()
    base = kind(table)
    if allow_filter and c.peek() == ".":
        c.expect(".")
        if c.try_take("("):
            fields = [c.name()]
            while c.try_take(","):
                fields.append(c.name())
            c.expect(")")
        else:
            fields = [c.name()]
        c.expect("[")
        values = _parse_key_list(c, ctx)
        c.expect("]")
        base = Filtered(table, tuple(fields), values)
    if part_var is not None:
        return Partitioned(base, part_var)
    return base


class _Ctx:
    def __init__(self, index_ids: set[str]):
        self.index_ids = index_ids
        self.part_vars: list[str] = []


_BUILD_RE = re.compile(r"^\s*(pP" + NAME + r"\.(?:\(" + NAME + r"(?:," + NAME
                       + r")*\)|" + NAME + r"))\[.*<-\+")


def _split_lines(text: str) -> list[tuple[int, str, int]]:
    out = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        if not raw.strip():
            continue
        stripped = raw.lstrip(" ")
        indent = len(raw) - len(stripped)
        if indent % 2 != 0:
            raise ParseError("indentation must be a multiple of 2", lineno, 1)
        out.append((indent // 2, stripped, lineno))
    return out


def parse_text(text: str, schema=None) -> Program:
    """Parse canonical IR text; validates against `schema` when given."""
    lines = _split_lines(text)
    index_ids = {m.group(1) for _, s, _ in lines for m in [_BUILD_RE.match(s)] if m}
    ctx = _Ctx(index_ids)

    functions: list[FunctionDef] = []
    pos = 0

    def parse_block(depth: int) -> tuple[Stmt, ...]:
        nonlocal pos
        stmts: list[Stmt] = []
        while pos < len(lines):
            d, s, lineno = lines[pos]
            if d < depth:
                break
            if d > depth:
                raise ParseError("unexpected indentation", lineno, 1)
            stmts.append(parse_stmt(depth))
        return tuple(stmts)

    def parse_stmt(depth: int) -> Stmt:
        nonlocal pos
        d, text_line, lineno = lines[pos]
        c = _Cursor(text_line, lineno)
        pos += 1
        if c.try_take("forelem ("):
            var = c.name()
            c.expect("; ")
            var2 = c.name()
            if var2 != var:
                c.error("loop variable mismatch")
            c.expect(" in ")
            iset = _parse_index_set(c, ctx)
            c.expect(")")
            c.done()
            body = parse_block(depth + 1)
            return Loop(var, iset, body)
        if c.try_take("for ("):
            var = c.name()
            c.expect("; ")
            c.name()
            c.expect(" in ")
            n = c.integer()
            keys: list[tuple[str, str]] = []
            if c.try_take(" : "):
                while True:
                    t = c.name()
                    c.expect(".")
                    f = c.name()
                    keys.append((t, f))
                    if not c.try_take(", "):
                        break
            c.expect(")")
            c.done()
            ctx.part_vars.append(var)
            body = parse_block(depth + 1)
            ctx.part_vars.pop()
            return PartLoop(var, n, tuple(keys), body)
        if c.try_take("if ("):
            cond = _parse_cond(c, ctx)
            c.expect(")")
            c.done()
            body = parse_block(depth + 1)
            if len(body) == 1 and isinstance(body[0], IndexBuild) \
                    and body[0].guard is None:
                return ir.IndexBuild(body[0].index_id, body[0].table,
                                     body[0].fields, body[0].var, cond)
            return If(cond, body)
        if c.try_take("return "):
            s = c.name()
            c.done()
            return _Return(s)
        if c.try_take("agg_init("):
            h = c.integer()
            c.expect(", ")
            kind = c.name()
            c.expect(")")
            c.done()
            return AggInit(h, kind)
        if c.try_take("agg_step("):
            h = c.integer()
            c.expect(", ")
            e = _parse_expr(c, ctx)
            c.expect(")")
            c.done()
            return AggStep(h, e)
        if c.try_take("agg_finish("):
            h = c.integer()
            c.expect(")")
            c.done()
            return AggFinish(h)
        if c.try_take("distinct("):
            s = c.name()
            c.expect(")")
            c.done()
            return Distinct(s)
        if c.try_take("clear("):
            s = c.name()
            c.expect(")")
            c.done()
            return SetClear(s)
        if c.try_take("sort("):
            s = c.name()
            keys = []
            while c.try_take(", "):
                f = c.name()
                c.expect(" ")
                direction = c.name()
                if direction not in ("asc", "desc"):
                    c.error("sort direction must be asc or desc")
                keys.append((f, direction == "asc"))
            c.expect(")")
            c.done()
            return SortBy(s, tuple(keys))
        # Builder line: `pPT.f[key] <-+ (v)`
        m = _BUILD_RE.match(text_line)
        if m:
            idx = _parse_index_id(c, ctx)
            table, _, fields = ir.index_id_parts(idx)
            c.expect("[")
            keys = _parse_key_list(c, ctx)
            c.expect("]")
            c.expect(" <-+ (")
            var = c.name()
            c.expect(")")
            c.done()
            for f, k in zip(fields, keys):
                if not (isinstance(k, FieldRef) and k.field == f and k.var == var):
                    c.error("builder key must be the builder row's key fields")
                table = k.set_id
            return IndexBuild(idx, table, fields, var, None)
        name = c.name()
        if c.try_take(" <- ("):
            exprs = []
            c.skip_ws()
            if c.peek() != ")":
                exprs.append(_parse_expr(c, ctx))
                while c.try_take(", ") or c.try_take(","):
                    exprs.append(_parse_expr(c, ctx))
            c.expect(")")
            c.done()
            return Append(name, tuple(exprs))
        if c.try_take("[] = "):
            init = _parse_literal(c)
            c.done()
            return ArrayInitAll(name, init)
        if c.try_take("["):
            keys = _parse_key_list(c, ctx)
            c.expect("]")
            c.expect(" = ")
            value = _parse_expr(c, ctx)
            c.done()
            return ArrayAssign(name, keys, value)
        if c.try_take(" = "):
            func = c.name()
            c.expect("(")
            args = []
            c.skip_ws()
            if c.peek() != ")":
                args.append(_parse_expr(c, ctx))
                while c.try_take(", "):
                    args.append(_parse_expr(c, ctx))
            c.expect(")")
            c.done()
            return CallBind(name, func, tuple(args))
        c.error("unrecognized statement")

    body: list[Stmt] = []
    while pos < len(lines):
        d, s, lineno = lines[pos]
        if d == 0 and s.startswith("function "):
            c = _Cursor(s, lineno)
            c.expect("function ")
            fname = c.name()
            c.expect("(")
            params = []
            c.skip_ws()
            if c.peek() != ")":
                params.append(c.name())
                while c.try_take(", "):
                    params.append(c.name())
            c.expect(")")
            c.done()
            pos += 1
            fbody = list(parse_block(1))
            if not fbody or not isinstance(fbody[-1], _Return):
                raise ParseError("function body must end with a return", lineno, 1)
            ret = fbody.pop().set_id
            if any(isinstance(st, _Return) for st in fbody):
                raise ParseError("return must be the last function line", lineno, 1)
            functions.append(FunctionDef(fname, tuple(params), tuple(fbody), ret))
        elif d != 0:
            raise ParseError("unexpected indentation", lineno, 1)
        else:
            st = parse_stmt(0)
            if isinstance(st, _Return):
                raise ParseError("return outside a function", lineno, 1)
            body.append(st)

    p = Program(tuple(functions), tuple(body))
    ir.validate(p, schema)
    return p


class _Return:
    def __init__(self, set_id: str):
        self.set_id = set_id
