"""Program rewrites: the query-optimization passes.

Every pass is a pure Program -> Program function following one discipline:
check, then rewrite.  A pass that finds no legal target returns its input
unchanged (callers detect application with an identity check); genuinely
malformed requests raise TransformError.  No pass partially applies.

Paths (`LoopPath`) are tuples of child indices into the top-level body.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import ir
from .analysis import stmt_reads, stmt_vars, stmt_writes
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

LoopPath = tuple


class TransformError(Exception):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code


# ---------------------------------------------------------------------------
# trace


@dataclass(frozen=True)
class TraceEntry:
    name: str  # reporting name (the vocabulary of per-query trace tables)
    applied: bool
    reason: str = ""
    op: str = ""  # machine op for replay
    params: tuple = ()


@dataclass
class TransformTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def add(self, name: str, applied: bool, reason: str = "", op: str = "",
            params: tuple = ()) -> None:
        self.entries.append(TraceEntry(name, applied, reason, op, params))

    def applied_names(self) -> list[str]:
        return [e.name for e in self.entries if e.applied]

    def lines(self) -> list[str]:
        return [
            f"PASS {e.name} " + ("applied" if e.applied else f"skipped({e.reason})")
            for e in self.entries
        ]

    def contains_sequence(self, names: list[str]) -> bool:
        it = iter(self.applied_names())
        return all(n in it for n in names)


# ---------------------------------------------------------------------------
# structural utilities


def substitute(obj, var_map=None, set_map=None, array_map=None, index_map=None,
               param_map=None, fieldref_map=None):
    """Rebuild a statement/expression tree with renamed identifiers.

    `fieldref_map` maps (set_id, var, field) to replacement expressions and
    wins over the name maps; `param_map` maps parameter names to expressions.
    """
    vm = var_map or {}
    sm = set_map or {}
    am = array_map or {}
    im = index_map or {}
    pm = param_map or {}
    fm = fieldref_map or {}

    def s_var(v):
        return vm.get(v, v)

    def s_set(x):
        return sm.get(x, x)

    def expr(e):
        if isinstance(e, Lit):
            return e
        if isinstance(e, FieldRef):
            hit = fm.get((e.set_id, e.var, e.field))
            if hit is not None:
                return hit
            return FieldRef(s_set(e.set_id), s_var(e.var), e.field)
        if isinstance(e, Param):
            hit = pm.get(e.name)
            return hit if hit is not None else e
        if isinstance(e, AggResult):
            return e
        if isinstance(e, ArrayRef):
            return ArrayRef(am.get(e.array_id, e.array_id),
                            tuple(expr(k) for k in e.keys))
        if isinstance(e, BinOp):
            return BinOp(e.op, expr(e.lhs), expr(e.rhs))
        raise TransformError("BAD_EXPR", repr(e))

    def atom(a):
        if isinstance(a, Compare):
            return Compare(expr(a.lhs), a.op, expr(a.rhs))
        if isinstance(a, Membership):
            if isinstance(a.target, SetRef):
                tgt = SetRef(s_set(a.target.set_id))
            else:
                tgt = Call(a.target.func, tuple(expr(x) for x in a.target.args))
            return Membership(expr(a.expr), tgt)
        if isinstance(a, NotEmpty):
            return NotEmpty(im.get(a.index_id, a.index_id),
                            tuple(expr(k) for k in a.keys))
        raise TransformError("BAD_EXPR", repr(a))

    def cond(c):
        return Cond(tuple(atom(a) for a in c.atoms))

    def iset(x):
        if isinstance(x, Full):
            return Full(s_set(x.table))
        if isinstance(x, RangeSet):
            return RangeSet(s_set(x.table))
        if isinstance(x, Filtered):
            return Filtered(s_set(x.table), x.fields,
                            tuple(expr(v) for v in x.values))
        if isinstance(x, MaterializedRef):
            key = None if x.key is None else tuple(expr(k) for k in x.key)
            return MaterializedRef(im.get(x.index_id, x.index_id), key)
        if isinstance(x, Partitioned):
            return Partitioned(iset(x.base), s_var(x.part_var))
        raise TransformError("BAD_EXPR", repr(x))

    def stmt(s):
        if isinstance(s, Loop):
            return Loop(s_var(s.var), iset(s.index), stmts(s.body))
        if isinstance(s, PartLoop):
            return PartLoop(s_var(s.var), s.num_parts,
                            tuple((s_set(t), f) for t, f in s.key_fields),
                            stmts(s.body))
        if isinstance(s, If):
            return If(cond(s.cond), stmts(s.body))
        if isinstance(s, Append):
            return Append(s_set(s.target), tuple(expr(e) for e in s.exprs))
        if isinstance(s, AggStep):
            return AggStep(s.handle, expr(s.expr))
        if isinstance(s, (AggInit, AggFinish)):
            return s
        if isinstance(s, Distinct):
            return Distinct(s_set(s.set_id))
        if isinstance(s, SetClear):
            return SetClear(s_set(s.set_id))
        if isinstance(s, SortBy):
            return SortBy(s_set(s.set_id), s.keys)
        if isinstance(s, ArrayInitAll):
            return ArrayInitAll(am.get(s.array_id, s.array_id), s.init)
        if isinstance(s, ArrayAssign):
            return ArrayAssign(am.get(s.array_id, s.array_id),
                               tuple(expr(k) for k in s.keys), expr(s.value))
        if isinstance(s, IndexBuild):
            g = None if s.guard is None else cond(s.guard)
            return IndexBuild(im.get(s.index_id, s.index_id), s_set(s.table),
                              s.fields, s_var(s.var), g)
        if isinstance(s, CallBind):
            return CallBind(s_set(s.target), s.func,
                            tuple(expr(a) for a in s.args))
        raise TransformError("BAD_STMT", repr(s))

    def stmts(xs):
        return tuple(stmt(x) for x in xs)

    if isinstance(obj, tuple):
        return stmts(obj)
    if isinstance(obj, (Loop, PartLoop, If, Append, AggInit, AggStep, AggFinish,
                        Distinct, SetClear, SortBy, ArrayInitAll, ArrayAssign,
                        IndexBuild, CallBind)):
        return stmt(obj)
    return expr(obj)


def stmt_at(p: Program, path: LoopPath) -> Stmt:
    stmts = p.body
    node = None
    for i in path:
        node = stmts[i]
        stmts = node.body if isinstance(node, (Loop, PartLoop, If)) else ()
    if node is None:
        raise TransformError("BAD_PATH", repr(path))
    return node


def replace_at(p: Program, path: LoopPath, new: list[Stmt]) -> Program:
    def rec(stmts: tuple, rest: tuple) -> tuple:
        i = rest[0]
        s = stmts[i]
        if len(rest) == 1:
            return stmts[:i] + tuple(new) + stmts[i + 1:]
        inner = rec(s.body, rest[1:])
        return stmts[:i] + (replace(s, body=inner),) + stmts[i + 1:]

    return Program(p.functions, rec(p.body, path))


def temp_sets(p: Program) -> set[str]:
    return {s for s in ir._defined_sets(p) if not ir.is_result_set(s)}


def _fresh_temp(used: set[str]) -> str:
    i = 1
    while f"T{i}" in used:
        i += 1
    used.add(f"T{i}")
    return f"T{i}"


def _fresh_array(used: set[str]) -> str:
    i = 0
    while ("tmp" if i == 0 else f"tmp{i + 1}") in used:
        i += 1
    name = "tmp" if i == 0 else f"tmp{i + 1}"
    used.add(name)
    return name


def _array_ids(p: Program) -> set[str]:
    out = set()
    for s in ir.walk_program(p):
        if isinstance(s, (ArrayInitAll, ArrayAssign)):
            out.add(s.array_id)
        for e in ir.stmt_exprs(s):
            if isinstance(e, ArrayRef):
                out.add(e.array_id)
    return out


# ---------------------------------------------------------------------------
# nest normalization: unfold filters to guards, permute, refold


@dataclass
class _Nest:
    loops: list[Loop]  # headers (bodies ignored)
    inner: tuple[Stmt, ...]  # innermost body (guard absorbed)
    atoms: list  # unfolded guard atoms
    part_vars: dict[str, str]  # loop var -> partition var, when partitioned


def _collect_nest(root: Loop) -> _Nest | None:
    """A maximal single-child chain of loops starting at `root`."""
    loops = [root]
    node = root
    while len(node.body) == 1 and isinstance(node.body[0], Loop):
        node = node.body[0]
        loops.append(node)
    inner = node.body
    part_vars: dict[str, str] = {}
    for lp in loops:
        iset = lp.index
        if isinstance(iset, Partitioned):
            part_vars[lp.var] = iset.part_var
            iset = iset.base
        if not isinstance(iset, (Full, Filtered)):
            return None
    atoms: list = []
    if len(inner) == 1 and isinstance(inner[0], If):
        atoms = list(inner[0].cond.atoms)
        inner = inner[0].body
    for lp in loops:
        iset = lp.index.base if isinstance(lp.index, Partitioned) else lp.index
        if isinstance(iset, Filtered):
            atoms.extend(
                Compare(FieldRef(iset.table, lp.var, f), "==", v)
                for f, v in zip(iset.fields, iset.values)
            )
    return _Nest(loops, inner, atoms, part_vars)


def _refold(nest: _Nest, order: list[Loop], inner: tuple[Stmt, ...],
            outer_vars: set[str]) -> Loop:
    """Rebuild the nest folding every eligible equality atom into the index
    set of the deepest loop it can legally attach to."""
    remaining = list(nest.atoms)
    headers: list[tuple[str, object]] = []  # (var, index set)
    live = set(outer_vars)

    def base_table(lp: Loop) -> str:
        iset = lp.index.base if isinstance(lp.index, Partitioned) else lp.index
        return iset.table

    for lp in order:
        table = base_table(lp)
        fields: list[str] = []
        values: list = []
        rest: list = []
        for a in remaining:
            picked = None
            if isinstance(a, Compare) and a.op == "==":
                for own, other in ((a.lhs, a.rhs), (a.rhs, a.lhs)):
                    if (
                        isinstance(own, FieldRef)
                        and own.var == lp.var
                        and own.set_id == table
                        and isinstance(other, (Lit, FieldRef, Param))
                        and ir.expr_vars(other) <= live
                    ):
                        deeper = ir.expr_vars(a.lhs) | ir.expr_vars(a.rhs)
                        deeper -= live | {lp.var}
                        if not deeper:
                            picked = (own.field, other)
                            break
            if picked is not None:
                fields.append(picked[0])
                values.append(picked[1])
            else:
                rest.append(a)
        remaining = rest
        iset = (Filtered(table, tuple(fields), tuple(values))
                if fields else Full(table))
        if lp.var in nest.part_vars:
            iset = Partitioned(iset, nest.part_vars[lp.var])
        headers.append((lp.var, iset))
        live.add(lp.var)
    body = inner
    if remaining:
        body = (If(Cond(tuple(remaining)), body),)
    for var, iset in reversed(headers):
        body = (Loop(var, iset, body),)
    return body[0]


def _nest_positions(stmts: tuple, prefix: tuple = ()) -> list[tuple]:
    """Paths of nest roots: loops that are not the sole child of a loop."""
    out = []
    for i, s in enumerate(stmts):
        if isinstance(s, Loop):
            out.append(prefix + (i,))
            # nested non-chain loops inside the innermost body
            nest = _collect_nest(s)
            if nest is not None:
                node = s
                path = prefix + (i,)
                while len(node.body) == 1 and isinstance(node.body[0], Loop):
                    node = node.body[0]
                    path = path + (0,)
                out.extend(_nest_positions(node.body, path))
            else:
                out.extend(_nest_positions(s.body, prefix + (i,)))
        elif isinstance(s, (PartLoop, If)):
            out.extend(_nest_positions(s.body, prefix + (i,)))
    return out


def _outer_vars_at(p: Program, path: tuple) -> set[str]:
    out: set[str] = set()
    stmts = p.body
    for i in path[:-1]:
        s = stmts[i]
        if isinstance(s, (Loop, PartLoop)):
            out.add(s.var)
        stmts = s.body if isinstance(s, (Loop, PartLoop, If)) else ()
    return out


# ---------------------------------------------------------------------------
# condition folding (guard relocation into index sets)


def fold_conditions(p: Program) -> Program:
    """Fold equality guards into the index sets of the loops they bind,
    everywhere a loop nest forms a single-child chain."""
    changed = False

    def rebuild(stmts: tuple, outer: set[str]) -> tuple:
        nonlocal changed
        out = []
        for s in stmts:
            if isinstance(s, Loop):
                nest = _collect_nest(s)
                if nest is not None:
                    inner = rebuild(nest.inner, outer | {lp.var for lp in nest.loops})
                    new = _refold(nest, nest.loops, inner, outer)
                    if new != s:
                        changed = True
                    out.append(new)
                    continue
                out.append(replace(s, body=rebuild(s.body, outer | {s.var})))
            elif isinstance(s, PartLoop):
                out.append(replace(s, body=rebuild(s.body, outer | {s.var})))
            elif isinstance(s, If):
                out.append(replace(s, body=rebuild(s.body, outer)))
            else:
                out.append(s)
        return tuple(out)

    functions = tuple(
        replace(f, body=rebuild(f.body, set(f.params))) for f in p.functions
    )
    body = rebuild(p.body, set())
    return Program(functions, body) if changed else p


# ---------------------------------------------------------------------------
# loop interchange


def loop_interchange(p: Program, path: LoopPath, perm: tuple[int, ...]) -> Program:
    """Permute a perfect nest of len(perm) loops rooted at `path`.

    Folded filters that would refer to not-yet-bound variables after the
    permutation are unfolded into the innermost guard and refolded at the
    deepest legal level afterwards.
    """
    if sorted(perm) != list(range(len(perm))):
        raise TransformError("ILLEGAL_PERMUTATION", f"bad permutation {perm}")
    root = stmt_at(p, path)
    if not isinstance(root, Loop):
        raise TransformError("BAD_PATH", "path does not name a loop")
    nest = _collect_nest(root)
    if nest is None or len(nest.loops) < len(perm):
        return p
    if list(perm) == list(range(len(perm))):
        return p
    for s in ir.walk_stmts(nest.inner):
        if isinstance(s, (Distinct, SortBy)):
            raise TransformError("ILLEGAL_PERMUTATION",
                                 "order-sensitive statement in nest body")
    head = [nest.loops[i] for i in perm]
    tail = nest.loops[len(perm):]
    new = _refold(nest, head + tail, nest.inner, _outer_vars_at(p, path))
    return replace_at(p, path, [new])


# ---------------------------------------------------------------------------
# loop invariant code motion


_HOISTABLE = (ArrayInitAll, ArrayAssign, Loop, If, SetClear, Append, CallBind,
              Distinct)


def _group_hoistable(group: list[Stmt], rest: list[Stmt], before: list[Stmt],
                     var: str) -> bool:
    """A consecutive statement group may move out of its loop only when one
    execution is indistinguishable from one-per-iteration: it must not see
    the loop variable, everything it appends to or accumulates into must be
    (re)initialized at its start, and it must not touch state the rest of
    the body writes."""
    gw = set()
    gr = set()
    for s in group:
        if var in stmt_vars(s):
            return False
        if not isinstance(s, _HOISTABLE):
            return False
        for x in ir.walk_stmts((s,)):
            if isinstance(x, (AggInit, AggStep, AggFinish, PartLoop, IndexBuild,
                              SortBy)):
                return False
        gw |= stmt_writes(s)
        gr |= stmt_reads(s)
    inited: set = set()
    for s in group:
        for key in stmt_reads(s):
            if key in gw and key[0] in ("set", "array") and key not in inited:
                return False  # reads its own accumulation: not idempotent
        for x in ir.walk_stmts((s,)):
            if isinstance(x, Append):
                if ir.is_result_set(x.target) or ("set", x.target) not in inited:
                    return False
            if isinstance(x, Distinct) and ("set", x.set_id) not in inited:
                return False
        if isinstance(s, SetClear):
            inited.add(("set", s.set_id))
        elif isinstance(s, ArrayInitAll):
            inited.add(("array", s.array_id))
        elif isinstance(s, CallBind):
            inited.add(("set", s.target))
    rw = set()
    for s in rest:
        rw |= stmt_writes(s)
    br = set()
    for s in before:
        br |= stmt_reads(s)
    if gw & rw or gr & rw:
        return False
    if gw & br:  # a statement running before the group reads its output
        return False
    return True


def licm(p: Program) -> Program:
    """Hoist invariant guards and invariant computation groups out of loops,
    to a fixed point."""
    funcs = {f.name: f for f in p.functions}

    def hoist_in(stmts: tuple) -> tuple[tuple, bool]:
        """Guard swap: a loop whose sole statement is an invariant If turns
        into an If wrapping the loop."""
        changed = False
        out: list[Stmt] = []
        for s in stmts:
            if isinstance(s, (Loop, PartLoop, If)):
                inner, ch = hoist_in(s.body)
                if ch:
                    changed = True
                s = replace(s, body=inner)
                if (
                    isinstance(s, Loop)
                    and len(s.body) == 1
                    and isinstance(s.body[0], If)
                    and s.var not in _cond_vars(s.body[0].cond)
                    and not (_cond_reads(s.body[0].cond, funcs) & stmt_writes(s))
                ):
                    inner_if = s.body[0]
                    s = If(inner_if.cond, (Loop(s.var, s.index, inner_if.body),))
                    changed = True
                out.append(s)
            else:
                out.append(s)
        return tuple(out), changed

    def lift_groups(stmts: tuple) -> tuple[tuple, bool]:
        changed = False
        out: list[Stmt] = []
        for s in stmts:
            if isinstance(s, (Loop, PartLoop, If)):
                inner, ch = lift_groups(s.body)
                if ch:
                    changed = True
                s = replace(s, body=inner)
            if isinstance(s, Loop):
                body = list(s.body)
                i = 0
                while i < len(body):
                    hoisted = False
                    for j in range(len(body) - 1, i - 1, -1):
                        group = body[i:j + 1]
                        if _group_hoistable(group, body[:i] + body[j + 1:],
                                            body[:i], s.var):
                            out.extend(group)
                            del body[i:j + 1]
                            changed = True
                            hoisted = True
                            break
                    if not hoisted:
                        i += 1
                s = replace(s, body=tuple(body))
            out.append(s)
        return tuple(out), changed

    prog = p
    for _ in range(64):
        body, c1 = hoist_in(prog.body)
        body, c2 = lift_groups(body)
        fns = []
        cf = False
        for f in prog.functions:
            fb, a = hoist_in(f.body)
            fb, b = lift_groups(fb)
            cf = cf or a or b
            fns.append(replace(f, body=fb))
        if not (c1 or c2 or cf):
            break
        prog = Program(tuple(fns), body)
    return prog


def _cond_vars(c: Cond) -> set[str]:
    out: set[str] = set()
    for a in c.atoms:
        for e in ir.child_exprs(a):
            out |= ir.expr_vars(e)
    return out


def _cond_reads(c: Cond, funcs) -> set:
    return stmt_reads(If(c, (SetClear("R"),)), funcs) - {("set", "R")}


# ---------------------------------------------------------------------------
# inline


def inline_functions(p: Program) -> Program:
    """Splice function bodies at their call sites; membership calls become
    membership tests on the inlined result set."""
    if not p.functions:
        return p
    funcs = {f.name: f for f in p.functions}
    used_sets = set(ir.infer_set_columns(p))
    used_vars = ir.all_vars(p)
    changed = False

    def instantiate(f: FunctionDef, args: tuple, target: str | None):
        """Fresh copy of f's body binding args; returns (stmts, result set)."""
        local = sorted({
            x.target if isinstance(x, (Append, CallBind)) else x.set_id
            for x in ir.walk_stmts(f.body)
            if isinstance(x, (Append, CallBind, Distinct, SetClear))
        } | {f.returns})
        set_map = {}
        for name in local:
            if target is not None and name == f.returns:
                set_map[name] = target
            else:
                set_map[name] = _fresh_temp(used_sets)
        var_map = {}
        for s in ir.walk_stmts(f.body):
            if isinstance(s, (Loop, PartLoop)):
                var_map[s.var] = ir.fresh_name(s.var, used_vars)
        param_map = dict(zip(f.params, args))
        body = substitute(f.body, var_map=var_map, set_map=set_map,
                          param_map=param_map)
        ret = set_map[f.returns]
        if not any(isinstance(s, SetClear) and s.set_id == ret for s in body):
            body = (SetClear(ret),) + body
        return list(body), ret

    def walk(stmts: tuple) -> list[Stmt]:
        nonlocal changed
        out: list[Stmt] = []
        for s in stmts:
            if isinstance(s, (Loop, PartLoop, If)):
                s = replace(s, body=tuple(walk(s.body)))
            if isinstance(s, If):
                atoms = []
                pre: list[Stmt] = []
                for a in s.cond.atoms:
                    if isinstance(a, Membership) and isinstance(a.target, Call):
                        f = funcs[a.target.func]
                        block, ret = instantiate(f, a.target.args, None)
                        pre.extend(block)
                        atoms.append(Membership(a.expr, SetRef(ret)))
                        changed = True
                    else:
                        atoms.append(a)
                out.extend(pre)
                out.append(If(Cond(tuple(atoms)), s.body))
            elif isinstance(s, CallBind):
                f = funcs[s.func]
                block, _ = instantiate(f, s.args, s.target)
                out.extend(block)
                changed = True
            else:
                out.append(s)
        return out

    body = tuple(walk(p.body))
    # keep function defs only if something still references them
    still_called = {
        name for s in ir.walk_stmts(body)
        for kind, name in stmt_reads(s, funcs, deep=False) if kind == "func"
    }
    remaining = tuple(f for f in p.functions if f.name in still_called)
    if not changed and len(remaining) == len(p.functions):
        return p
    return Program(remaining, body)


# ---------------------------------------------------------------------------
# dead code elimination


def dead_code_elimination(p: Program) -> Program:
    """Remove writes to sets/arrays/indexes that are never read (results
    always live), then prune emptied loops; iterates to a fixed point."""
    prog = p
    changed_any = False
    for _ in range(64):
        funcs = {f.name: f for f in prog.functions}
        called: set[str] = set()
        for s in ir.walk_program(prog):
            for kind, name in stmt_reads(s, funcs, deep=False):
                if kind == "func":
                    called.add(name)
        reads: set = set()
        regions = [prog.body] + [f.body for f in prog.functions
                                 if f.name in called]
        for region in regions:
            for s in ir.walk_stmts(region):
                reads |= stmt_reads(s, funcs, deep=False)
        for f in prog.functions:
            if f.name in called:
                reads.add(("set", f.returns))

        def dead(kind: str, name) -> bool:
            if kind == "set" and ir.is_result_set(name):
                return False
            return (kind, name) not in reads

        changed = False

        def sweep(stmts: tuple) -> tuple:
            nonlocal changed
            out = []
            for s in stmts:
                if isinstance(s, (Loop, PartLoop, If)):
                    body = sweep(s.body)
                    if not body:
                        changed = True
                        continue
                    if body != s.body:
                        s = replace(s, body=body)
                    out.append(s)
                    continue
                kill = False
                if isinstance(s, (Append, CallBind)) and dead("set", s.target):
                    kill = True
                elif isinstance(s, (Distinct, SetClear, SortBy)) and \
                        dead("set", s.set_id):
                    kill = True
                elif isinstance(s, (ArrayInitAll, ArrayAssign)) and \
                        dead("array", s.array_id):
                    kill = True
                elif isinstance(s, IndexBuild) and dead("index", s.index_id):
                    kill = True
                if kill:
                    changed = True
                else:
                    out.append(s)
            return tuple(out)

        body = sweep(prog.body)
        fns = tuple(
            replace(f, body=sweep(f.body)) for f in prog.functions
            if f.name in called
        )
        if len(fns) != len(prog.functions):
            changed = True
        if not changed:
            break
        changed_any = True
        prog = Program(fns, body)
    return prog if changed_any else p


# ---------------------------------------------------------------------------
# table propagation


def _producer_info(p: Program, temp: str):
    """(top index, producer loop, append path, append stmt) for a
    single-producer append-only temp, else None."""
    sites = []
    for path, s in _walk_paths(p.body, ()):
        if isinstance(s, Append) and s.target == temp:
            sites.append((path, s))
    if len(sites) != 1:
        return None
    (path, app) = sites[0]
    root = p.body[path[0]]
    if not isinstance(root, Loop):
        return None
    for s in ir.walk_stmts((root,)):
        if isinstance(s, (Loop, If)):
            continue
        if s is app:
            continue
        return None  # impure producer
    for s in ir.walk_program(p):
        if isinstance(s, (Distinct, SetClear, SortBy)) and s.set_id == temp:
            return None
        if isinstance(s, CallBind) and s.target == temp:
            return None
    return (path[0], root, path, app)


def _walk_paths(stmts: tuple, prefix: tuple):
    for i, s in enumerate(stmts):
        path = prefix + (i,)
        yield path, s
        if isinstance(s, (Loop, PartLoop, If)):
            yield from _walk_paths(s.body, path)


def table_propagation(p: Program) -> Program:
    """Replace consumption of a single-producer temp with the producing
    nest, remapping field references (the producer itself is left for DCE)."""
    prog = p
    for _ in range(32):
        step = _propagate_once(prog)
        if step is None:
            break
        prog = step
    return prog


def _propagate_once(p: Program) -> Program | None:
    set_cols = ir.infer_set_columns(p)
    for temp in sorted(temp_sets(p)):
        info = _producer_info(p, temp)
        if info is None:
            continue
        top_idx, producer, _, app = info
        cols = set_cols[temp]
        # every use of the temp must be a consumer loop over it
        consumer = _find_consumer(p, temp, top_idx)
        if consumer is None:
            continue
        cpath, cloop = consumer
        if not _uses_only_consumers(p, temp, producer):
            continue
        new_stmts = _splice_producer(p, producer, app, cols, cloop)
        if new_stmts is None:
            continue
        return replace_at(p, cpath, new_stmts)
    return None


def _find_consumer(p: Program, temp: str, after_top: int):
    for path, s in _walk_paths(p.body, ()):
        if path[0] <= after_top:
            continue
        if isinstance(s, Loop) and isinstance(s.index, (Full, Filtered)) \
                and s.index.table == temp:
            return path, s
    return None


def _uses_only_consumers(p: Program, temp: str, producer: Loop) -> bool:
    consumer_vars: set[str] = set()
    for s in ir.walk_program(p):
        if isinstance(s, Loop) and isinstance(s.index, (Full, Filtered)) \
                and s.index.table == temp:
            consumer_vars.add(s.var)
    for s in ir.walk_program(p):
        if isinstance(s, Loop) and ir.index_table(s.index) == temp:
            if not isinstance(s.index, (Full, Filtered)):
                return False
        if isinstance(s, IndexBuild) and s.table == temp:
            return False
        if isinstance(s, If):
            for a in s.cond.atoms:
                if isinstance(a, Membership) and isinstance(a.target, SetRef) \
                        and a.target.set_id == temp:
                    return False
        for e in ir.stmt_exprs(s):
            if isinstance(e, FieldRef) and e.set_id == temp \
                    and e.var not in consumer_vars:
                return False
    return True


def _splice_producer(p: Program, producer: Loop, app: Append,
                     cols: tuple[str, ...], consumer: Loop):
    used_vars = ir.all_vars(p)
    var_map = {}
    for s in ir.walk_stmts((producer,)):
        if isinstance(s, (Loop, PartLoop)):
            var_map[s.var] = ir.fresh_name(s.var, used_vars)
    fresh = substitute((producer,), var_map=var_map)[0]
    fresh_exprs = None
    for s in ir.walk_stmts((fresh,)):
        if isinstance(s, Append) and s.target == app.target:
            fresh_exprs = s.exprs
    assert fresh_exprs is not None
    expr_of = dict(zip(cols, fresh_exprs))

    fieldref_map = {
        (consumer.index.table, consumer.var, c): e for c, e in expr_of.items()
    }
    body = substitute(consumer.body, fieldref_map=fieldref_map)

    # compose the consumer's equality filter into the producer copy
    guards: list = []
    filter_into: dict[str, list] = {}
    if isinstance(consumer.index, Filtered):
        for f, v in zip(consumer.index.fields, consumer.index.values):
            e_f = expr_of[f]
            if isinstance(e_f, FieldRef):
                filter_into.setdefault(e_f.var, []).append((e_f, v))
            else:
                guards.append(Compare(e_f, "==", v))
    if guards:
        body = (If(Cond(tuple(guards)), body),)

    def rebuild(s: Stmt):
        if isinstance(s, Append) and s.target == app.target:
            return list(body)
        if isinstance(s, Loop):
            inner = []
            for c in s.body:
                inner.extend(rebuild(c))
            iset = s.index
            for e_f, v in filter_into.get(s.var, []):
                if isinstance(iset, Full):
                    iset = Filtered(iset.table, (e_f.field,), (v,))
                elif isinstance(iset, Filtered):
                    iset = Filtered(iset.table, iset.fields + (e_f.field,),
                                    iset.values + (v,))
                else:
                    return None
            return [Loop(s.var, iset, tuple(inner))]
        if isinstance(s, If):
            inner = []
            for c in s.body:
                inner.extend(rebuild(c))
            return [If(s.cond, tuple(inner))]
        return [s]

    out = rebuild(fresh)
    if out is None or any(x is None for x in out):
        return None
    return out


# ---------------------------------------------------------------------------
# iteration space expansion


_AGG_DEFAULT = {
    "MIN": Lit(ir.INT_MAX),
    "MAX": Lit(ir.INT_MIN),
    "SUM": Lit(0),
    "COUNT": Lit(0),
}


def iteration_space_expansion(p: Program, path: LoopPath) -> Program:
    """Remove the target loop's probe-varying index-set conditions and
    expand the aggregate state written under it into arrays keyed by the
    removed fields; reads after the loop are rewritten to subscript the
    removed condition values.

    The body may be a pure nest (loops and guards) whose leaves are the
    aggregate update statements; everything stays in place, only the steps
    become keyed array updates.  Literal-valued conditions are kept in the
    index set (they select rows statically and do not vary per probe).
    """
    loop = stmt_at(p, path)
    if not isinstance(loop, Loop) or not isinstance(loop.index, Filtered):
        return p
    fil = loop.index
    removed = [
        k for k, v in enumerate(fil.values)
        if ir.expr_vars(v) or isinstance(v, Param)
    ]
    if not removed:
        removed = list(range(len(fil.values)))
    kept = [k for k in range(len(fil.values)) if k not in removed]

    # the body must be a pure nest with aggregate-update leaves
    steps: list[AggStep] = []
    for s in ir.walk_stmts(loop.body):
        if isinstance(s, AggStep):
            steps.append(s)
        elif not isinstance(s, (Loop, If)):
            return p
    if not steps:
        return p
    handles = [s.handle for s in steps]
    if len(set(handles)) != len(handles):
        return p

    key_exprs = tuple(FieldRef(fil.table, loop.var, fil.fields[k])
                      for k in removed)
    subscript = tuple(fil.values[k] for k in removed)

    # locate init/finish/reads; every handle must have exactly one of each,
    # outside the target loop
    inside = set(map(id, ir.walk_stmts((loop,))))
    inits: dict[int, list[tuple]] = {}
    finishes: dict[int, list[tuple]] = {}
    steps_elsewhere = False
    for spath, s in _walk_paths(p.body, ()):
        if isinstance(s, (AggInit, AggFinish)) and s.handle in handles \
                and id(s) in inside:
            return p
        if isinstance(s, AggInit) and s.handle in handles:
            inits.setdefault(s.handle, []).append(spath)
        elif isinstance(s, AggFinish) and s.handle in handles:
            finishes.setdefault(s.handle, []).append(spath)
        elif isinstance(s, AggStep) and s.handle in handles \
                and id(s) not in inside:
            steps_elsewhere = True
    if steps_elsewhere or p.functions:
        return p
    for h in handles:
        if len(inits.get(h, [])) != 1 or len(finishes.get(h, [])) != 1:
            return p

    # reads of the expanded state must sit where the subscript vars are live
    needed = set()
    for v in subscript:
        needed |= ir.expr_vars(v)
    for spath, s in _walk_paths(p.body, ()):
        uses = any(
            isinstance(e, AggResult) and e.handle in handles
            for e in ir.stmt_exprs(s)
        )
        if uses:
            if not needed <= _live_at(p, spath):
                return p

    used_arrays = _array_ids(p)
    kinds = {h: _agg_kind_of(p, h) for h in handles}
    arrays: dict[int, tuple] = {}
    for h in handles:
        if kinds[h] == "AVG":
            arrays[h] = (_fresh_array(used_arrays), _fresh_array(used_arrays))
        else:
            arrays[h] = (_fresh_array(used_arrays),)

    def result_expr(h: int) -> ir.Expr:
        if kinds[h] == "AVG":
            s_arr, c_arr = arrays[h]
            return BinOp("/", ArrayRef(s_arr, subscript), ArrayRef(c_arr, subscript))
        return ArrayRef(arrays[h][0], subscript)

    def update_stmts(h: int, expr: ir.Expr) -> list[Stmt]:
        kind = kinds[h]
        if kind == "MIN":
            return [If(Cond((Compare(expr, "<", ArrayRef(arrays[h][0], key_exprs)),)),
                       (ArrayAssign(arrays[h][0], key_exprs, expr),))]
        if kind == "MAX":
            return [If(Cond((Compare(expr, ">", ArrayRef(arrays[h][0], key_exprs)),)),
                       (ArrayAssign(arrays[h][0], key_exprs, expr),))]
        if kind == "SUM":
            return [ArrayAssign(arrays[h][0], key_exprs,
                                BinOp("+", ArrayRef(arrays[h][0], key_exprs), expr))]
        if kind == "COUNT":
            return [ArrayAssign(arrays[h][0], key_exprs,
                                BinOp("+", ArrayRef(arrays[h][0], key_exprs),
                                      Lit(1)))]
        s_arr, c_arr = arrays[h]
        return [
            ArrayAssign(s_arr, key_exprs,
                        BinOp("+", ArrayRef(s_arr, key_exprs), expr)),
            ArrayAssign(c_arr, key_exprs,
                        BinOp("+", ArrayRef(c_arr, key_exprs), Lit(1))),
        ]

    def expand_leaves(stmts: tuple) -> tuple:
        out: list[Stmt] = []
        for s in stmts:
            if isinstance(s, AggStep):
                out.extend(update_stmts(s.handle, s.expr))
            elif isinstance(s, (Loop, If)):
                out.append(replace(s, body=expand_leaves(s.body)))
            else:
                out.append(s)
        return tuple(out)

    if kept:
        new_index = Filtered(fil.table,
                             tuple(fil.fields[k] for k in kept),
                             tuple(fil.values[k] for k in kept))
    else:
        new_index = Full(fil.table)
    new_loop = Loop(loop.var, new_index, expand_leaves(loop.body))

    def rewrite(stmts: tuple) -> tuple:
        out: list[Stmt] = []
        for s in stmts:
            if isinstance(s, AggInit) and s.handle in handles:
                kind = kinds[s.handle]
                if kind == "AVG":
                    s_arr, c_arr = arrays[s.handle]
                    out.append(ArrayInitAll(s_arr, Lit(0)))
                    out.append(ArrayInitAll(c_arr, Lit(0)))
                else:
                    out.append(ArrayInitAll(arrays[s.handle][0],
                                            _AGG_DEFAULT[kind]))
            elif isinstance(s, AggFinish) and s.handle in handles:
                continue
            elif s is loop:
                out.append(new_loop)
            elif isinstance(s, (Loop, PartLoop, If)):
                out.append(replace(s, body=rewrite(s.body)))
            else:
                out.append(_sub_aggresults(s, handles, result_expr))
        return tuple(out)

    return Program(p.functions, rewrite(p.body))


def _agg_kind_of(p: Program, handle: int) -> str:
    for s in ir.walk_program(p):
        if isinstance(s, AggInit) and s.handle == handle:
            return s.kind
    raise TransformError("AGG_UNMATCHED", str(handle))


def _sub_aggresults(s: Stmt, handles, result_expr):
    def fix(e):
        if isinstance(e, AggResult) and e.handle in handles:
            return result_expr(e.handle)
        if isinstance(e, BinOp):
            return BinOp(e.op, fix(e.lhs), fix(e.rhs))
        if isinstance(e, ArrayRef):
            return ArrayRef(e.array_id, tuple(fix(k) for k in e.keys))
        return e

    if isinstance(s, Append):
        return Append(s.target, tuple(fix(e) for e in s.exprs))
    if isinstance(s, AggStep):
        return AggStep(s.handle, fix(s.expr))
    if isinstance(s, ArrayAssign):
        return ArrayAssign(s.array_id, tuple(fix(k) for k in s.keys),
                           fix(s.value))
    return s


def _live_at(p: Program, path: tuple) -> set[str]:
    out: set[str] = set()
    stmts = p.body
    for i in path:
        s = stmts[i]
        if isinstance(s, (Loop, PartLoop)):
            out.add(s.var)
        stmts = s.body if isinstance(s, (Loop, PartLoop, If)) else ()
    return out


# ---------------------------------------------------------------------------
# index set materialization


def index_set_materialization(p: Program, targets=None) -> Program:
    """Insert builder loops for filtered index sets over stored tables and
    convert the consumers to materialized references.

    `targets` is a list of (LoopPath, key_fields); `key_fields=None` keys
    the index on the probe-varying fields and moves literal-valued filter
    conditions into the builder guard (sites disagreeing on the literals
    fall back to keying on every field).  Builders for the same keyed index
    are shared across consumers.
    """
    set_cols = ir.infer_set_columns(p)

    found: list[tuple[tuple, Loop, object]] = []
    if targets is None:
        for path, s in _walk_paths(p.body, ()):
            if isinstance(s, Loop) and isinstance(s.index, Filtered) \
                    and s.index.table not in set_cols:
                found.append((path, s, None))
    else:
        for path, key_fields in targets:
            s = stmt_at(p, path)
            if not (isinstance(s, Loop) and isinstance(s.index, Filtered)):
                raise TransformError("NOT_MATERIALIZABLE", str(path))
            if s.index.table in set_cols:
                raise TransformError("NOT_MATERIALIZABLE",
                                     f"{s.index.table} is a temporary")
            if key_fields is not None and \
                    not set(key_fields) <= set(s.index.fields):
                raise TransformError("NOT_MATERIALIZABLE",
                                     "key fields not in the filter")
            found.append((path, s, None if key_fields is None
                          else tuple(key_fields)))
    if not found:
        return p

    def split(fil: Filtered):
        var_pairs = []
        lit_pairs = []
        for f, v in zip(fil.fields, fil.values):
            if ir.expr_vars(v) or isinstance(v, Param):
                var_pairs.append((f, v))
            else:
                lit_pairs.append((f, v))
        if not var_pairs:
            return list(zip(fil.fields, fil.values)), []
        return var_pairs, lit_pairs

    # group auto sites so that a guarded builder is only shared by sites
    # with identical literal conditions
    lit_groups: dict[tuple, set] = {}
    for path, loop, key_fields in found:
        if key_fields is not None:
            continue
        var_pairs, lit_pairs = split(loop.index)
        gk = (loop.index.table, tuple(f for f, _ in var_pairs))
        lit_groups.setdefault(gk, set()).add(tuple(lit_pairs))

    used_vars = ir.all_vars(p)
    builders: dict[str, Loop] = {}
    first_use: dict[str, int] = {}
    rewrites: dict[tuple, list[Stmt]] = {}
    for path, loop, key_fields in found:
        fil = loop.index
        residual: list = []
        guard_pairs: list = []
        if key_fields is None:
            var_pairs, lit_pairs = split(fil)
            gk = (fil.table, tuple(f for f, _ in var_pairs))
            if len(lit_groups.get(gk, set())) == 1 and lit_pairs:
                key_fields = tuple(f for f, _ in var_pairs)
                key_values = tuple(v for _, v in var_pairs)
                guard_pairs = lit_pairs
            else:
                key_fields = fil.fields
                key_values = fil.values
        else:
            key_values = tuple(v for f, v in zip(fil.fields, fil.values)
                               if f in key_fields)
            residual = [
                Compare(FieldRef(fil.table, loop.var, f), "==", v)
                for f, v in zip(fil.fields, fil.values) if f not in key_fields
            ]
        index_id = ir.make_index_id(fil.table, key_fields)
        if index_id not in builders:
            bvar = ir.fresh_name("i", used_vars)
            guard = None
            if guard_pairs:
                guard = Cond(tuple(
                    Compare(FieldRef(fil.table, bvar, f), "==", v)
                    for f, v in guard_pairs
                ))
            builders[index_id] = Loop(
                bvar, RangeSet(fil.table),
                (IndexBuild(index_id, fil.table, key_fields, bvar, guard),),
            )
            first_use[index_id] = path[0]
        first_use[index_id] = min(first_use[index_id], path[0])
        rewrites[path] = (index_id, key_values, tuple(residual))

    prog = p
    # innermost-first so outer headers keep their already-rewritten bodies
    for path in sorted(rewrites, reverse=True):
        index_id, key_values, residual = rewrites[path]
        cur = stmt_at(prog, path)
        body = cur.body
        if residual:
            body = (If(Cond(residual), body),)
        prog = replace_at(prog, path, [
            Loop(cur.var, MaterializedRef(index_id, key_values), body)
        ])
    # insert builders before their first consumers, preserving relative order
    inserts = sorted(builders.items(), key=lambda kv: first_use[kv[0]])
    body = list(prog.body)
    for index_id, bloop in reversed(inserts):
        body.insert(first_use[index_id], bloop)
    return Program(prog.functions, tuple(body))


# ---------------------------------------------------------------------------
# index set pruning


def _prunable_guard(loop: Loop, table: str):
    """The builder-evaluable atom subset of the consumer's leading guard,
    with its position, or None.

    Statements before the guard must be iteration-local temp writes (a
    cleared set being rebuilt, or a call binding): skipping them for rows
    the builder already rejected is unobservable.
    """
    cleared: set[str] = set()
    for k, s in enumerate(loop.body):
        if isinstance(s, If):
            movable = []
            rest = []
            for a in s.cond.atoms:
                if _builder_evaluable(Cond((a,)), table, loop.var):
                    movable.append(a)
                else:
                    rest.append(a)
            if not movable:
                return None
            return k, tuple(movable), tuple(rest)
        if isinstance(s, SetClear):
            cleared.add(s.set_id)
        elif isinstance(s, CallBind):
            cleared.add(s.target)
        elif isinstance(s, Append) and s.target in cleared:
            continue
        else:
            return None
    return None


def index_set_pruning(p: Program) -> Program:
    """Move guard atoms testing only the indexed table's own fields from
    every consumer of a materialized index set into its builder."""
    builders: dict[str, tuple] = {}
    for path, s in _walk_paths(p.body, ()):
        if isinstance(s, IndexBuild):
            builders[s.index_id] = (path, s)

    consumers: dict[str, list[tuple]] = {}
    for path, s in _walk_paths(p.body, ()):
        if isinstance(s, Loop) and isinstance(s.index, MaterializedRef) \
                and s.index.key is not None:
            consumers.setdefault(s.index.index_id, []).append((path, s))

    prog = p
    changed = False
    for index_id, cons in sorted(consumers.items()):
        if index_id not in builders:
            continue
        bpath, build = builders[index_id]
        table = build.table
        hits = []
        canon = None
        ok = True
        for _, loop in cons:
            hit = _prunable_guard(loop, table)
            if hit is None:
                ok = False
                break
            rendered = ir.emit_cond(substitute(
                If(Cond(hit[1]), (SetClear("R"),)), var_map={loop.var: "@"}
            ).cond)
            if canon is None:
                canon = rendered
            elif rendered != canon:
                ok = False
                break
            hits.append(hit)
        if not ok or canon is None:
            continue
        # move: builder gains the atoms, consumers lose them
        moved = substitute(If(Cond(hits[0][1]), (SetClear("R"),)),
                           var_map={cons[0][1].var: build.var}).cond
        guard = moved if build.guard is None else Cond(build.guard.atoms + moved.atoms)
        prog2 = replace_at(prog, bpath, [IndexBuild(
            build.index_id, build.table, build.fields, build.var, guard)])
        for (cpath, loop), (k, _, rest) in sorted(
            zip(cons, hits), key=lambda x: x[0][0], reverse=True
        ):
            old_if = loop.body[k]
            if rest:
                mid: tuple = (If(Cond(rest), old_if.body),)
            else:
                mid = old_if.body
            inner = loop.body[:k] + mid + loop.body[k + 1:]
            prog2 = replace_at(prog2, cpath, [replace(loop, body=inner)])
        prog = prog2
        changed = True
    return prog if changed else p


def _builder_evaluable(c: Cond, table: str, var: str) -> bool:
    for a in c.atoms:
        if not isinstance(a, Compare):
            return False
        for e in (a.lhs, a.rhs):
            for x in ir.walk_exprs(e):
                if isinstance(x, FieldRef):
                    if x.set_id != table or x.var != var:
                        return False
                elif isinstance(x, (ArrayRef, AggResult)):
                    return False
    return True


# ---------------------------------------------------------------------------
# index set combination


def index_set_combination(p: Program, stats=None) -> Program:
    """Absorb existence-only innermost loops into the builder of the
    enclosing loop's index set via a non-emptiness guard.

    Requires the absorbed index's key column to be unique in its table
    (checked against `stats`): with duplicate keys the loop body would
    execute once per duplicate and dropping the loop would change bag
    multiplicities.
    """
    prog = p
    for _ in range(16):
        step = _combine_once(prog, stats)
        if step is None:
            break
        prog = step
    return prog


def _combine_once(p: Program, stats) -> Program | None:
    builders: dict[str, tuple] = {}
    for path, s in _walk_paths(p.body, ()):
        if isinstance(s, IndexBuild):
            builders[s.index_id] = (path, s)

    # candidate: loop D directly inside loop C, D's var unused, D keyed by a
    # field of C's table, C materialized
    by_outer: dict[str, list] = {}
    consumers_of: dict[str, int] = {}
    for path, s in _walk_paths(p.body, ()):
        if isinstance(s, Loop) and isinstance(s.index, MaterializedRef):
            consumers_of[s.index.index_id] = \
                consumers_of.get(s.index.index_id, 0) + 1

    candidates = []
    for cpath, c in _walk_paths(p.body, ()):
        if not (isinstance(c, Loop) and isinstance(c.index, MaterializedRef)):
            continue
        for j, d in enumerate(c.body):
            if not (isinstance(d, Loop) and isinstance(d.index, MaterializedRef)
                    and d.index.key is not None and len(d.index.key) == 1):
                continue
            key = d.index.key[0]
            if not (isinstance(key, FieldRef) and key.var == c.var):
                continue
            if d.var in _vars_used(d.body):
                continue
            didx = d.index.index_id
            if didx not in builders or c.index.index_id not in builders:
                continue
            d_table, _, d_fields = ir.index_id_parts(didx)
            if len(d_fields) != 1:
                continue
            if stats is None:
                continue
            try:
                if not stats.column(d_table, d_fields[0]).unique:
                    continue
            except KeyError:
                continue
            candidates.append((cpath, j, c, d, key))
    if not candidates:
        return None

    # group by combined index; apply only if every consumer of the outer
    # index carries the same combinable child
    by_group: dict[tuple, list] = {}
    for cand in candidates:
        cpath, j, c, d, key = cand
        gkey = (c.index.index_id, d.index.index_id, key.field)
        by_group.setdefault(gkey, []).append(cand)
    for gkey, group in sorted(by_group.items()):
        outer_id, inner_id, _ = gkey
        if len(group) != consumers_of.get(outer_id, 0):
            continue
        bpath, build = builders[outer_id]
        d0 = group[0][3]
        guard_atom = NotEmpty(
            d0.index.index_id,
            (FieldRef(build.table, build.var, group[0][4].field),),
        )
        guard = (Cond((guard_atom,)) if build.guard is None
                 else Cond(build.guard.atoms + (guard_atom,)))
        prog = replace_at(p, bpath, [IndexBuild(
            build.index_id, build.table, build.fields, build.var, guard)])
        for cpath, j, c, d, _ in sorted(group, key=lambda x: x[0], reverse=True):
            new_body = c.body[:j] + d.body + c.body[j + 1:]
            prog = replace_at(prog, cpath, [replace(c, body=new_body)])
        # the guarded builder probes inner_id: it must run after that
        # index is populated
        c_top = bpath[0]
        d_top = builders[inner_id][0][0]
        if d_top > c_top:
            body = list(prog.body)
            moved = body.pop(c_top)
            body.insert(d_top, moved)
            prog = Program(prog.functions, tuple(body))
        return prog
    return None


def _vars_used(stmts: tuple) -> set[str]:
    out: set[str] = set()
    for s in ir.walk_stmts(stmts):
        for e in ir.stmt_exprs(s):
            out |= ir.expr_vars(e)
        if isinstance(s, IndexBuild):
            out.add(s.var)
    return out


# ---------------------------------------------------------------------------
# loop blocking


def loop_blocking(p: Program, path: LoopPath, num_parts: int,
                  key_fields: tuple[tuple[str, str], ...] = ()) -> Program:
    """Wrap the loop at `path` in a partition loop; contiguous row blocks by
    default, key-hash partitioning of every listed table under `by key`."""
    if num_parts < 1:
        raise TransformError("BAD_PARTITION", "num_parts must be >= 1")
    loop = stmt_at(p, path)
    if not isinstance(loop, Loop) or not isinstance(loop.index, (Full, RangeSet)):
        return p
    set_cols = ir.infer_set_columns(p)
    if loop.index.table in set_cols:
        return p
    used = ir.all_vars(p)
    pv = ir.fresh_name("l", used)
    keyed_tables = {t for t, _ in key_fields}

    def partition(s: Stmt) -> Stmt:
        if isinstance(s, Loop):
            iset = s.index
            t = ir.index_table(iset)
            if isinstance(iset, (Full, RangeSet, Filtered)) and t in keyed_tables:
                iset = Partitioned(iset, pv)
            return Loop(s.var, iset, tuple(partition(c) for c in s.body))
        if isinstance(s, (PartLoop, If)):
            return replace(s, body=tuple(partition(c) for c in s.body))
        return s

    inner = Loop(loop.var, Partitioned(loop.index, pv),
                 tuple(partition(c) for c in loop.body))
    wrapped = PartLoop(pv, num_parts, tuple(key_fields), (inner,))
    return replace_at(p, path, [wrapped])


# ---------------------------------------------------------------------------
# loop fusion


def loop_fusion(p: Program) -> Program:
    """Fuse adjacent loops over syntactically identical index sets when
    neither body touches what the other produces."""
    changed = False

    def fuse_block(stmts: tuple) -> tuple:
        nonlocal changed
        out = [
            replace(s, body=fuse_block(s.body))
            if isinstance(s, (Loop, PartLoop, If)) else s
            for s in stmts
        ]
        i = 0
        while i + 1 < len(out):
            a, b = out[i], out[i + 1]
            if (
                isinstance(a, Loop) and isinstance(b, Loop)
                and a.index == b.index
                and not isinstance(a.index, MaterializedRef)
                and _fusable(a, b)
            ):
                body_b = substitute(b.body, var_map={b.var: a.var})
                out[i:i + 2] = [Loop(a.var, a.index, a.body + body_b)]
                changed = True
            else:
                i += 1
        return tuple(out)

    body = fuse_block(p.body)
    return Program(p.functions, body) if changed else p


def _fusable(a: Loop, b: Loop) -> bool:
    wa = stmt_writes(a)
    wb = stmt_writes(b)
    ra = stmt_reads(a)
    rb = stmt_reads(b)
    if wa & (rb | wb):
        return False
    if wb & ra:
        return False
    return True
