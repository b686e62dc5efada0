"""Execution of IR programs over loaded databases.

Two entry points share one interpreter core:

  * `oracle_eval` - direct structural interpretation.  Loops enumerate
    their index sets by definition (filtered sets scan and test every
    subscript), nests enumerate Cartesian products, appends accumulate
    bags.  No runtime index structures are consulted; this is the ground
    truth every rewrite is checked against.

  * `execute` - the same interpreter honoring a ConcretePlan's storage
    decisions: materialized index sets are built once by their builder
    loops and then probed through hash / flat-array / ordered-map /
    sorted-scan structures (or re-scanned per probe under a forced NONE
    decision, which is the definitional fallback).

The interpreter compiles each statement to a closure once, then runs the
closure tree; per-iteration work stays on plain ints and column lists.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field as dc_field

from . import ir
from .ingest import Database
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
)

NONE = "NONE"
HASH = "HASH"
FLAT_ARRAY = "FLAT_ARRAY"
SORTED_SCAN = "SORTED_SCAN"
BALANCED_TREE = "BALANCED_TREE"
STORAGE_KINDS = (NONE, HASH, FLAT_ARRAY, SORTED_SCAN, BALANCED_TREE)

_MASK = (1 << 64) - 1


class EngineError(Exception):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code


def stable_hash(v) -> int:
    """Platform- and run-independent hash for partitioning keys."""
    if isinstance(v, int):
        z = (v & _MASK) * 0xBF58476D1CE4E5B9 & _MASK
        z ^= z >> 29
        return z
    if isinstance(v, str):
        h = 0xCBF29CE484222325
        for ch in v.encode("utf-8"):
            h = ((h ^ ch) * 0x100000001B3) & _MASK
        return h
    raise EngineError("BAD_PARTITION_KEY", repr(type(v)))


@dataclass
class ResultBag:
    columns: tuple[str, ...]
    rows: list
    sort_keys: tuple[tuple[str, bool], ...] | None = None


@dataclass
class ConcretePlan:
    """A Program with a storage decision for every runtime structure."""

    program: Program
    decisions: dict[str, str] = dc_field(default_factory=dict)
    array_kinds: dict[str, str] = dc_field(default_factory=dict)
    index_none: dict[str, str] = dc_field(default_factory=dict)  # unmaterialized sets

    def decision(self, index_id: str) -> str:
        return self.decisions.get(index_id, HASH)


# ---------------------------------------------------------------------------
# runtime index structures


class RuntimeIndexSet:
    """One materialized index set instance (per partition binding).

    Entries are bags of subscripts even for unique keys.  Insertion goes to
    a plain dict; ordered views (tree / sorted scan / flat array) are
    realized lazily on first probe.
    """

    def __init__(self, kind: str):
        self.kind = kind
        self.map: dict = {}
        self._frozen = None

    def insert(self, key, subscript: int) -> None:
        self.map.setdefault(key, []).append(subscript)
        self._frozen = None

    def _freeze(self):
        if self._frozen is None:
            if self.kind == FLAT_ARRAY:
                keys = self.map.keys()
                lo = min(keys) if keys else 0
                hi = max(keys) if keys else -1
                slots = [()] * (hi - lo + 1)
                for k, rows in self.map.items():
                    if not isinstance(k, int):
                        raise EngineError("BAD_DECISION", "flat array needs int keys")
                    slots[k - lo] = rows
                self._frozen = (lo, slots)
            elif self.kind in (BALANCED_TREE, SORTED_SCAN):
                skeys = sorted(self.map.keys())
                self._frozen = (skeys, [self.map[k] for k in skeys])
            else:
                self._frozen = ()
        return self._frozen

    def lookup(self, key) -> list:
        if self.kind == FLAT_ARRAY:
            lo, slots = self._freeze()
            if isinstance(key, int) and 0 <= key - lo < len(slots):
                return slots[key - lo]
            return ()
        if self.kind in (BALANCED_TREE, SORTED_SCAN):
            skeys, rows = self._freeze()
            i = bisect.bisect_left(skeys, key)
            if i < len(skeys) and skeys[i] == key:
                return rows[i]
            return ()
        return self.map.get(key, ())

    def representatives(self) -> list:
        """One subscript per distinct key; key order when ordered."""
        if self.kind in (BALANCED_TREE, SORTED_SCAN, FLAT_ARRAY):
            return [self.map[k][0] for k in sorted(self.map.keys())]
        return [rows[0] for rows in self.map.values()]

    def all_keys(self):
        return self.map.keys()


class _DenseArray:
    """List-backed aggregation array for dense integer keys."""

    __slots__ = ("lo", "data", "default")

    def __init__(self, default):
        self.lo = None
        self.data = []
        self.default = default

    def get(self, key):
        if self.lo is None or not isinstance(key, int):
            return self.default
        i = key - self.lo
        if 0 <= i < len(self.data):
            return self.data[i]
        return self.default

    def set(self, key, value):
        if not isinstance(key, int):
            raise EngineError("BAD_DECISION", "dense array needs int keys")
        if self.lo is None:
            self.lo = key
            self.data = [value]
            return
        i = key - self.lo
        if i < 0:
            self.data[:0] = [self.default] * (-i)
            self.lo = key
            i = 0
        elif i >= len(self.data):
            self.data.extend([self.default] * (i - len(self.data) + 1))
        self.data[i] = value


class _HashArray:
    __slots__ = ("map", "default")

    def __init__(self, default):
        self.map = {}
        self.default = default

    def get(self, key):
        return self.map.get(key, self.default)

    def set(self, key, value):
        self.map[key] = value


# ---------------------------------------------------------------------------
# the interpreter


_CMP = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}

_AGG_NUMERIC = ("MIN", "MAX", "SUM", "AVG")


class _Agg:
    __slots__ = ("kind", "count", "acc", "acc2")

    def __init__(self, kind: str):
        self.kind = kind
        self.count = 0
        self.acc = 0
        self.acc2 = 0


class _Exec:
    def __init__(self, p: Program, db: Database, plan: ConcretePlan | None):
        self.p = p
        self.db = db
        self.plan = plan
        self.set_cols = ir.infer_set_columns(p)
        self.sets: dict[str, list] = {name: [] for name in self.set_cols}
        self.set_version: dict[str, int] = {name: 0 for name in self.set_cols}
        self.arrays: dict[str, object] = {}
        self.aggs: dict[int, _Agg] = {}
        self.indexes: dict[tuple, RuntimeIndexSet] = {}
        self.builders: dict[str, IndexBuild] = {}
        self.sort_markers: dict[str, tuple] = {}
        self.call_cache: dict[tuple, list] = {}
        self.funcs = {f.name: f for f in p.functions}
        self.func_fns: dict[str, object] = {}
        for s in ir.walk_program(p):
            if isinstance(s, IndexBuild):
                self.builders.setdefault(s.index_id, s)

    # -- plumbing

    def _decision(self, index_id: str) -> str:
        if self.plan is None:
            return HASH
        return self.plan.decision(index_id)

    def _index_for(self, index_id: str, env) -> RuntimeIndexSet:
        table, part_var, _ = ir.index_id_parts(index_id)
        part = env.get(part_var) if part_var else None
        key = (index_id, part)
        idx = self.indexes.get(key)
        if idx is None:
            idx = RuntimeIndexSet(self._decision(index_id))
            self.indexes[key] = idx
        return idx

    def _table_rows(self, name: str) -> int | None:
        t = self.db.tables.get(name)
        return t.nrows if t is not None else None

    def _is_base(self, name: str) -> bool:
        return name in self.db.tables and name not in self.set_cols

    def _col(self, set_id: str, fld: str, var: str):
        """Closure producing the value of set_id[var].fld."""
        if self._is_base(set_id):
            col = self.db.tables[set_id].data[fld]
            return lambda env: col[env[var]]
        pos = self.set_cols[set_id].index(fld)
        sets = self.sets
        return lambda env: sets[set_id][env[var]][pos]

    # -- expressions

    def compile_expr(self, e):
        if isinstance(e, Lit):
            v = e.value
            return lambda env: v
        if isinstance(e, FieldRef):
            return self._col(e.set_id, e.field, e.var)
        if isinstance(e, Param):
            name = e.name
            return lambda env: env[name]
        if isinstance(e, AggResult):
            h = e.handle
            aggs = self.aggs
            def result(env):
                return _agg_value(aggs[h])
            return result
        if isinstance(e, ArrayRef):
            keys = self.compile_key(e.keys)
            arrays = self.arrays
            name = e.array_id
            return lambda env: arrays[name].get(keys(env))
        if isinstance(e, BinOp):
            lf = self.compile_expr(e.lhs)
            rf = self.compile_expr(e.rhs)
            op = e.op
            if op == "+":
                return lambda env: lf(env) + rf(env)
            if op == "-":
                return lambda env: lf(env) - rf(env)
            if op == "*":
                return lambda env: lf(env) * rf(env)
            if op == "/":
                def div(env):
                    d = rf(env)
                    if d == 0:
                        raise EngineError("EMPTY_AGGREGATE", "division by zero")
                    return lf(env) / d
                return div
        raise EngineError("BAD_EXPR", repr(e))

    def compile_key(self, keys: tuple):
        fns = tuple(self.compile_expr(k) for k in keys)
        if len(fns) == 1:
            f0 = fns[0]
            return lambda env: f0(env)
        return lambda env: tuple(f(env) for f in fns)

    def compile_atom(self, a):
        if isinstance(a, Compare):
            lf = self.compile_expr(a.lhs)
            rf = self.compile_expr(a.rhs)
            op = _CMP[a.op]
            return lambda env: op(lf(env), rf(env))
        if isinstance(a, Membership):
            ef = self.compile_expr(a.expr)
            if isinstance(a.target, SetRef):
                name = a.target.set_id
                sets = self.sets
                versions = self.set_version
                cache = {"v": -1, "s": frozenset()}
                def member(env):
                    if versions[name] != cache["v"]:
                        cache["s"] = {row[0] for row in sets[name]}
                        cache["v"] = versions[name]
                    return ef(env) in cache["s"]
                return member
            call = a.target
            argfns = tuple(self.compile_expr(x) for x in call.args)
            fname = call.func
            def member_call(env):
                bag = self._call(fname, tuple(f(env) for f in argfns))
                v = ef(env)
                return any(row[0] == v for row in bag)
            return member_call
        if isinstance(a, NotEmpty):
            keyf = self.compile_key(a.keys)
            index_id = a.index_id
            def nonempty(env):
                return len(self._probe(index_id, keyf(env), env)) > 0
            return nonempty
        raise EngineError("BAD_EXPR", repr(a))

    def compile_cond(self, c: Cond):
        fns = tuple(self.compile_atom(a) for a in c.atoms)
        if len(fns) == 1:
            return fns[0]
        if len(fns) == 2:
            f0, f1 = fns
            return lambda env: f0(env) and f1(env)
        return lambda env: all(f(env) for f in fns)

    # -- index probing

    def _probe(self, index_id: str, key, env) -> list:
        if self._decision(index_id) == NONE:
            return self._probe_by_definition(index_id, key, env)
        return self._index_for(index_id, env).lookup(key)

    def _probe_by_definition(self, index_id: str, key, env) -> list:
        """NONE decision: evaluate the index set by its definition (scan)."""
        b = self.builders.get(index_id)
        if b is None:
            raise EngineError("NO_BUILDER", index_id)
        table, part_var, _ = ir.index_id_parts(index_id)
        if part_var is not None:
            raise EngineError("BAD_DECISION",
                              f"{index_id}: partitioned sets need a structure")
        if self._is_base(b.table):
            n = self.db.tables[b.table].nrows
            cols = [self.db.tables[b.table].data[f] for f in b.fields]
        else:
            bag = self.sets[b.table]
            n = len(bag)
            pos = [self.set_cols[b.table].index(f) for f in b.fields]
            cols = [[row[q] for row in bag] for q in pos]
        keys = key if len(b.fields) > 1 else (key,)
        guard = self.compile_cond(b.guard) if b.guard is not None else None
        out = []
        sub_env = dict(env)
        for i in range(n):
            if all(c[i] == k for c, k in zip(cols, keys)):
                sub_env[b.var] = i
                if guard is None or guard(sub_env):
                    out.append(i)
        return out

    # -- partitioning

    def _part_bounds(self, table_rows: int, num_parts: int, l: int) -> range:
        size = -(-table_rows // num_parts)
        return range(l * size, min(table_rows, (l + 1) * size))

    def _key_partition(self, table: str, fld: str, num_parts: int, l: int) -> list:
        cachekey = ("kp", table, fld, num_parts, l)
        cached = self.call_cache.get(cachekey)
        if cached is None:
            col = self.db.tables[table].data[fld]
            parts = [[] for _ in range(num_parts)]
            for i, v in enumerate(col):
                parts[stable_hash(v) % num_parts].append(i)
            for li in range(num_parts):
                self.call_cache[("kp", table, fld, num_parts, li)] = parts[li]
            cached = parts[l]
        return cached

    # -- statements

    def compile_block(self, stmts: tuple, part_ctx: tuple):
        fns = [self.compile_stmt(s, part_ctx) for s in stmts]
        if len(fns) == 1:
            return fns[0]
        if len(fns) == 2:
            f0, f1 = fns
            def run2(env):
                f0(env)
                f1(env)
            return run2
        fns = tuple(fns)
        def run(env):
            for f in fns:
                f(env)
        return run

    def _loop_iter(self, iset, part_ctx):
        """Closure env -> iterable of subscripts for the index set."""
        if isinstance(iset, (Full, RangeSet)):
            name = iset.table
            if self._is_base(name):
                n = self.db.tables[name].nrows
                r = range(n)
                return lambda env: r
            sets = self.sets
            return lambda env: range(len(sets[name]))
        if isinstance(iset, Filtered):
            name = iset.table
            if self._is_base(name):
                cols = [self.db.tables[name].data[f] for f in iset.fields]
                n = self.db.tables[name].nrows
                vals = [self.compile_expr(v) for v in iset.values]
                if len(cols) == 1:
                    c0, v0 = cols[0], vals[0]
                    def scan1(env):
                        x = v0(env)
                        return [i for i in range(n) if c0[i] == x]
                    return scan1
                def scank(env):
                    xs = [v(env) for v in vals]
                    return [
                        i for i in range(n)
                        if all(c[i] == x for c, x in zip(cols, xs))
                    ]
                return scank
            pos = [self.set_cols[name].index(f) for f in iset.fields]
            vals = [self.compile_expr(v) for v in iset.values]
            sets = self.sets
            def scan_temp(env):
                xs = [v(env) for v in vals]
                bag = sets[name]
                return [
                    i for i in range(len(bag))
                    if all(bag[i][q] == x for q, x in zip(pos, xs))
                ]
            return scan_temp
        if isinstance(iset, MaterializedRef):
            index_id = iset.index_id
            if iset.key is None:
                def reps(env):
                    if self._decision(index_id) == NONE:
                        raise EngineError("BAD_DECISION",
                                          f"{index_id}: keyless probe needs a structure")
                    return self._index_for(index_id, env).representatives()
                return reps
            keyf = self.compile_key(iset.key)
            return lambda env: self._probe(index_id, keyf(env), env)
        if isinstance(iset, Partitioned):
            pv = iset.part_var
            scheme = None
            for var, num_parts, keyed in part_ctx:
                if var == pv:
                    scheme = (num_parts, keyed)
            if scheme is None:
                raise EngineError("BAD_PARTITION", f"no enclosing loop binds {pv}")
            num_parts, keyed = scheme
            base = iset.base
            tbl = ir.index_table(base)
            keyed_field = dict(keyed).get(tbl)
            if keyed_field is None:
                if not isinstance(base, (Full, RangeSet)):
                    inner = self._loop_iter(base, part_ctx)
                    nrows = self._table_rows(tbl)
                    def part_filter(env):
                        rows = self._part_bounds(nrows, num_parts, env[pv])
                        return [i for i in inner(env) if i in rows]
                    return part_filter
                nrows = self._table_rows(tbl)
                if nrows is None:
                    sets = self.sets
                    def part_rows_temp(env):
                        return self._part_bounds(len(sets[tbl]), num_parts, env[pv])
                    return part_rows_temp
                return lambda env: self._part_bounds(nrows, num_parts, env[pv])
            # key-hash partitioning
            if isinstance(base, (Full, RangeSet)):
                def part_keyed(env):
                    return self._key_partition(tbl, keyed_field, num_parts, env[pv])
                return part_keyed
            cols = [self.db.tables[tbl].data[f] for f in base.fields]
            vals = [self.compile_expr(v) for v in base.values]
            def part_keyed_filtered(env):
                rows = self._key_partition(tbl, keyed_field, num_parts, env[pv])
                xs = [v(env) for v in vals]
                return [
                    i for i in rows if all(c[i] == x for c, x in zip(cols, xs))
                ]
            return part_keyed_filtered
        raise EngineError("BAD_INDEX", repr(iset))

    def compile_stmt(self, s, part_ctx: tuple):
        if isinstance(s, Loop):
            iterf = self._loop_iter(s.index, part_ctx)
            body = self.compile_block(s.body, part_ctx)
            var = s.var
            def loop(env):
                for i in iterf(env):
                    env[var] = i
                    body(env)
            return loop
        if isinstance(s, PartLoop):
            ctx = part_ctx + ((s.var, s.num_parts, s.key_fields),)
            body = self.compile_block(s.body, ctx)
            var = s.var
            n = s.num_parts
            def ploop(env):
                for l in range(n):
                    env[var] = l
                    body(env)
            return ploop
        if isinstance(s, If):
            cond = self.compile_cond(s.cond)
            body = self.compile_block(s.body, part_ctx)
            def iff(env):
                if cond(env):
                    body(env)
            return iff
        if isinstance(s, Append):
            fns = tuple(self.compile_expr(e) for e in s.exprs)
            bag_name = s.target
            sets = self.sets
            versions = self.set_version
            def append(env):
                sets[bag_name].append(tuple(f(env) for f in fns))
                versions[bag_name] += 1
            return append
        if isinstance(s, AggInit):
            h, kind = s.handle, s.kind
            aggs = self.aggs
            def agginit(env):
                aggs[h] = _Agg(kind)
            return agginit
        if isinstance(s, AggStep):
            h = s.handle
            ef = self.compile_expr(s.expr)
            aggs = self.aggs
            def aggstep(env):
                a = aggs[h]
                v = ef(env)
                a.count += 1
                if a.kind == "SUM" or a.kind == "AVG":
                    a.acc += v
                elif a.kind == "MIN":
                    a.acc = v if a.count == 1 else min(a.acc, v)
                elif a.kind == "MAX":
                    a.acc = v if a.count == 1 else max(a.acc, v)
            return aggstep
        if isinstance(s, AggFinish):
            h = s.handle
            aggs = self.aggs
            def aggfinish(env):
                a = aggs[h]
                if a.count == 0 and a.kind in ("MIN", "MAX", "AVG"):
                    raise EngineError("EMPTY_AGGREGATE",
                                      f"{a.kind} over zero rows (handle {h})")
            return aggfinish
        if isinstance(s, Distinct):
            name = s.set_id
            sets = self.sets
            versions = self.set_version
            def distinct(env):
                seen = set()
                out = []
                for row in sets[name]:
                    if row not in seen:
                        seen.add(row)
                        out.append(row)
                sets[name] = out
                versions[name] += 1
            return distinct
        if isinstance(s, SetClear):
            name = s.set_id
            sets = self.sets
            versions = self.set_version
            def clear(env):
                sets[name] = []
                versions[name] += 1
            return clear
        if isinstance(s, SortBy):
            name = s.set_id
            cols = self.set_cols.get(name, ())
            keyspec = [(cols.index(f), asc) for f, asc in s.keys]
            sets = self.sets
            versions = self.set_version
            def sortby(env):
                rows = sets[name]
                for pos, asc in reversed(keyspec):
                    rows.sort(key=lambda r: r[pos], reverse=not asc)
                versions[name] += 1
                self.sort_markers[name] = s.keys
            return sortby
        if isinstance(s, ArrayInitAll):
            name = s.array_id
            default = s.init.value
            kind = (self.plan.array_kinds.get(name, "hash")
                    if self.plan is not None else "hash")
            arrays = self.arrays
            def arrinit(env):
                arrays[name] = (_DenseArray(default) if kind == "array"
                                else _HashArray(default))
            return arrinit
        if isinstance(s, ArrayAssign):
            name = s.array_id
            keyf = self.compile_key(s.keys)
            valf = self.compile_expr(s.value)
            arrays = self.arrays
            def arrset(env):
                arrays[name].set(keyf(env), valf(env))
            return arrset
        if isinstance(s, IndexBuild):
            index_id = s.index_id
            keyf = self.compile_key(
                tuple(FieldRef(s.table, s.var, f) for f in s.fields)
            )
            guard = self.compile_cond(s.guard) if s.guard is not None else None
            var = s.var
            def build(env):
                if guard is not None and not guard(env):
                    return
                if self._decision(index_id) == NONE:
                    return
                self._index_for(index_id, env).insert(keyf(env), env[var])
            return build
        if isinstance(s, CallBind):
            argfns = tuple(self.compile_expr(a) for a in s.args)
            fname, target = s.func, s.target
            sets = self.sets
            versions = self.set_version
            def callbind(env):
                bag = self._call(fname, tuple(f(env) for f in argfns))
                sets[target] = list(bag)
                versions[target] += 1
            return callbind
        raise EngineError("BAD_STMT", repr(s))

    # -- function calls

    def _call(self, fname: str, args: tuple) -> list:
        cached = self.call_cache.get((fname, args))
        if cached is not None:
            return cached
        f = self.funcs[fname]
        fn = self.func_fns.get(fname)
        if fn is None:
            fn = self.compile_block(f.body, ())
            self.func_fns[fname] = fn
        local_ids = _local_sets(f)
        saved = {name: self.sets.get(name) for name in local_ids}
        for name in local_ids:
            self.sets[name] = []
            self.set_version[name] = self.set_version.get(name, 0) + 1
        env = dict(zip(f.params, args))
        fn(env)
        out = list(self.sets[f.returns])
        for name, bag in saved.items():
            self.sets[name] = bag if bag is not None else []
            self.set_version[name] += 1
        self.call_cache[(fname, args)] = out
        return out

    # -- top level

    def run(self) -> dict[str, ResultBag]:
        fn = self.compile_block(self.p.body, ()) if self.p.body else lambda env: None
        fn({})
        out: dict[str, ResultBag] = {}
        for name, cols in self.set_cols.items():
            if ir.is_result_set(name):
                out[name] = ResultBag(cols, self.sets[name],
                                      self.sort_markers.get(name))
        return out


def _local_sets(f: ir.FunctionDef) -> set[str]:
    out = {f.returns}
    for s in ir.walk_stmts(f.body):
        if isinstance(s, (Append, CallBind)):
            out.add(s.target)
        elif isinstance(s, (Distinct, SetClear)):
            out.add(s.set_id)
    return out


def _agg_value(a: _Agg):
    if a.kind == "SUM":
        return a.acc
    if a.kind == "COUNT":
        return a.count
    if a.kind in ("MIN", "MAX"):
        if a.count == 0:
            raise EngineError("EMPTY_AGGREGATE", a.kind)
        return a.acc
    if a.kind == "AVG":
        if a.count == 0:
            raise EngineError("EMPTY_AGGREGATE", "AVG")
        return a.acc / a.count
    raise EngineError("BAD_EXPR", a.kind)


def oracle_eval(p: Program, db: Database) -> dict[str, ResultBag]:
    """Ground-truth evaluation: no runtime index structures, loops enumerate
    their index sets by definition."""
    return _Exec(p, db, None).run()


def execute(plan: ConcretePlan, db: Database) -> dict[str, ResultBag]:
    """Run a concretized plan; bag-equal to the oracle on the source program."""
    return _Exec(plan.program, db, plan).run()


def build_index_sets(plan: ConcretePlan, db: Database) -> dict[str, dict]:
    """Run only the top-level builder loops of a plan and return the stores
    as {index_id: {key: sorted subscripts}} (unpartitioned builders only)."""
    ex = _Exec(plan.program, db, plan)
    for s in plan.program.body:
        if isinstance(s, Loop) and any(
            isinstance(c, IndexBuild) for c in ir.walk_stmts((s,))
        ):
            ex.compile_stmt(s, ())({})
    out: dict[str, dict] = {}
    for (index_id, part), idx in ex.indexes.items():
        if part is None:
            out[index_id] = {k: sorted(v) for k, v in idx.map.items()}
    return out


# ---------------------------------------------------------------------------
# bag comparison


def _sort_key(row):
    key = []
    for v in row:
        if isinstance(v, str):
            key.append((1, v))
        elif isinstance(v, float):
            key.append((0, round(v, 9)))
        else:
            key.append((0, v))
    return key


def bag_equal(a: ResultBag, b: ResultBag, float_tol: float = 1e-9) -> bool:
    """Order-insensitive multiset equality; floats within relative tolerance
    after canonical pairing."""
    if len(a.columns) != len(b.columns) or len(a.rows) != len(b.rows):
        return False
    ra = sorted(a.rows, key=_sort_key)
    rb = sorted(b.rows, key=_sort_key)
    for x, y in zip(ra, rb):
        for u, v in zip(x, y):
            if isinstance(u, float) or isinstance(v, float):
                if u == v:
                    continue
                if abs(u - v) > float_tol * max(abs(u), abs(v), 1e-300):
                    return False
            elif u != v:
                return False
    return True


def bag_checksum(bag: ResultBag) -> str:
    """Stable content hash; floats rounded to 6 significant digits."""
    h = hashlib.sha256()
    for row in sorted(bag.rows, key=_sort_key):
        parts = []
        for v in row:
            if isinstance(v, float):
                parts.append(f"{v:.6g}")
            else:
                parts.append(repr(v))
        h.update("|".join(parts).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]
