"""Schema definition, table loading, statistics and synthetic data.

Storage conventions (fixed for the whole system):
  * int      -> int64
  * float    -> float64
  * string   -> str
  * date     -> int32 days since 1970-01-01
  * decimal  -> int64 scaled by 100 (cents); exact aggregation

`.tbl` files are pipe-delimited with a trailing pipe, LF line endings.
Empty fields are rejected: there are no NULLs anywhere in the system.
"""

from __future__ import annotations

import datetime
import os
from dataclasses import dataclass, field

COLUMN_TYPES = ("int", "float", "string", "date", "decimal")

_EPOCH = datetime.date(1970, 1, 1)


class IngestError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(f"{code}: {msg}")
        self.code = code
        self.msg = msg


@dataclass(frozen=True)
class Column:
    name: str
    type: str
    primary_key: bool = False
    unique: bool = False


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise IngestError("UNKNOWN_FIELD", f"{self.name}.{name}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)


@dataclass(frozen=True)
class Schema:
    tables: dict[str, Table]


def parse_schema(text: str) -> Schema:
    """Parse the line-oriented schema format.

    table NAME
      col NAME TYPE [pk] [unique]
    """
    tables: dict[str, Table] = {}
    current: str | None = None
    cols: list[Column] = []

    def flush():
        nonlocal cols
        if current is not None:
            if not cols:
                raise IngestError("SCHEMA", f"table {current} has no columns")
            names = [c.name for c in cols]
            if len(set(names)) != len(names):
                raise IngestError("SCHEMA", f"duplicate column in {current}")
            tables[current] = Table(current, tuple(cols))
        cols = []

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "table":
            if len(parts) != 2:
                raise IngestError("SCHEMA", f"line {lineno}: bad table line")
            flush()
            current = parts[1]
            if "_" in current:
                raise IngestError(
                    "SCHEMA", f"line {lineno}: table names may not contain '_'"
                )
            if current in tables:
                raise IngestError("SCHEMA", f"duplicate table {current}")
        elif parts[0] == "col":
            if current is None:
                raise IngestError("SCHEMA", f"line {lineno}: col before table")
            if len(parts) < 3 or parts[2] not in COLUMN_TYPES:
                raise IngestError("SCHEMA", f"line {lineno}: bad column line")
            flags = set(parts[3:])
            if not flags <= {"pk", "unique"}:
                raise IngestError("SCHEMA", f"line {lineno}: unknown flag")
            cols.append(
                Column(parts[1], parts[2], "pk" in flags, bool(flags & {"pk", "unique"}))
            )
        else:
            raise IngestError("SCHEMA", f"line {lineno}: unrecognized line")
    flush()
    return Schema(tables)


def load_schema(path: str) -> Schema:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_schema(fh.read())


# ---------------------------------------------------------------------------
# column tables


@dataclass
class ColumnTable:
    """Immutable-after-load columnar table."""

    name: str
    columns: tuple[Column, ...]
    data: dict[str, list]
    nrows: int

    def column_values(self, name: str) -> list:
        return self.data[name]


@dataclass
class Database:
    schema: Schema
    tables: dict[str, ColumnTable] = field(default_factory=dict)


def parse_date(text: str) -> int:
    try:
        y, m, d = text.split("-")
        return (datetime.date(int(y), int(m), int(d)) - _EPOCH).days
    except (ValueError, TypeError):
        raise IngestError("PARSE_ERROR", f"bad date {text!r}")


def format_date(days: int) -> str:
    return (_EPOCH + datetime.timedelta(days=days)).isoformat()


def parse_decimal(text: str) -> int:
    neg = text.startswith("-")
    if neg:
        text = text[1:]
    whole, _, frac = text.partition(".")
    if not whole.isdigit() or (frac and not frac.isdigit()) or len(frac) > 2:
        raise IngestError("PARSE_ERROR", f"bad decimal {text!r}")
    cents = int(whole) * 100 + int((frac + "00")[:2] or 0)
    return -cents if neg else cents


def format_decimal(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(cents)
    return f"{sign}{cents // 100}.{cents % 100:02d}"


def _parse_field(text: str, col: Column, lineno: int, colno: int):
    if text == "":
        raise IngestError("PARSE_ERROR", f"line {lineno}, field {colno}: empty field")
    try:
        if col.type == "int":
            return int(text)
        if col.type == "float":
            return float(text)
        if col.type == "string":
            return text
        if col.type == "date":
            return parse_date(text)
        return parse_decimal(text)
    except IngestError:
        raise
    except ValueError:
        raise IngestError(
            "PARSE_ERROR", f"line {lineno}, field {colno}: bad {col.type} {text!r}"
        )


def _load_delimited(path: str, table: Table, delim: str, trailing: bool) -> ColumnTable:
    data: dict[str, list] = {c.name: [] for c in table.columns}
    ncols = len(table.columns)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if trailing:
                if not line.endswith(delim):
                    raise IngestError(
                        "PARSE_ERROR", f"line {lineno}: missing trailing delimiter"
                    )
                line = line[:-1]
            fields = line.split(delim)
            if len(fields) != ncols:
                raise IngestError(
                    "ARITY_ERROR",
                    f"line {lineno}: {len(fields)} fields, schema has {ncols}",
                )
            for colno, (text, col) in enumerate(zip(fields, table.columns), start=1):
                data[col.name].append(_parse_field(text, col, lineno, colno))
    n = len(data[table.columns[0].name]) if table.columns else 0
    return ColumnTable(table.name, table.columns, data, n)


def load_tbl(path: str, table: Table) -> ColumnTable:
    """Load a pipe-delimited `.tbl` file (dbgen interchange format)."""
    return _load_delimited(path, table, "|", trailing=True)


def load_csv(path: str, table: Table) -> ColumnTable:
    """RFC-4180 subset: comma separated, no quoting, no embedded commas."""
    return _load_delimited(path, table, ",", trailing=False)


def write_tbl(path: str, t: ColumnTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        cols = [t.data[c.name] for c in t.columns]
        for i in range(t.nrows):
            parts = []
            for col, c in zip(cols, t.columns):
                v = col[i]
                if c.type == "date":
                    parts.append(format_date(v))
                elif c.type == "decimal":
                    parts.append(format_decimal(v))
                else:
                    parts.append(str(v))
            fh.write("|".join(parts) + "|\n")


def load_database(data_dir: str, schema: Schema) -> Database:
    """Load every schema table from `<data_dir>/<name>.tbl` (or `.csv`)."""
    db = Database(schema)
    for name, table in schema.tables.items():
        tbl_path = os.path.join(data_dir, f"{name}.tbl")
        csv_path = os.path.join(data_dir, f"{name}.csv")
        if os.path.exists(tbl_path):
            db.tables[name] = load_tbl(tbl_path, table)
        elif os.path.exists(csv_path):
            db.tables[name] = load_csv(csv_path, table)
        else:
            raise IngestError("IO_ERROR", f"no data file for table {name}")
    return db


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ColumnStats:
    distinct: int
    unique: bool
    min_int: int | None = None
    max_int: int | None = None


@dataclass(frozen=True)
class TableStats:
    nrows: int
    columns: dict[str, ColumnStats]


@dataclass(frozen=True)
class Stats:
    tables: dict[str, TableStats]

    def nrows(self, table: str) -> int:
        return self.tables[table].nrows

    def column(self, table: str, column: str) -> ColumnStats:
        return self.tables[table].columns[column]


def compute_stats(db: Database) -> Stats:
    """Exact per-column statistics; uniqueness is detected from the data."""
    tables: dict[str, TableStats] = {}
    for name, t in db.tables.items():
        cols: dict[str, ColumnStats] = {}
        for c in t.columns:
            values = t.data[c.name]
            distinct = len(set(values))
            unique = distinct == t.nrows
            if c.type in ("int", "date", "decimal") and values:
                cols[c.name] = ColumnStats(distinct, unique, min(values), max(values))
            else:
                cols[c.name] = ColumnStats(distinct, unique)
        tables[name] = TableStats(t.nrows, cols)
    return Stats(tables)


# ---------------------------------------------------------------------------
# deterministic generator

_SM_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


class SplitMix:
    """64-bit SplitMix generator; identical output for identical seeds on
    any platform (pure integer arithmetic, no float state)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _SM_GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return self.next_u64() % n

    def int_range(self, lo: int, hi: int) -> int:
        return lo + self.below(hi - lo + 1)


@dataclass(frozen=True)
class ColumnGen:
    """One column's distribution: seq [stride] | uniform lo hi [stride] |
    choice v1 v2 ... | date lo hi | decimal lo hi."""

    kind: str
    args: tuple


@dataclass(frozen=True)
class TableGen:
    name: str
    rows: int
    columns: dict[str, ColumnGen]


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int
    tables: tuple[TableGen, ...]


def parse_genspec(text: str) -> GeneratorSpec:
    seed = 0
    tables: list[TableGen] = []
    current: str | None = None
    rows = 0
    cols: dict[str, ColumnGen] = {}

    def flush():
        nonlocal cols
        if current is not None:
            tables.append(TableGen(current, rows, cols))
        cols = {}

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "table":
            flush()
            if len(parts) != 4 or parts[2] != "rows":
                raise IngestError("GENSPEC", f"line {lineno}: want `table N rows K`")
            current = parts[1]
            rows = int(parts[3])
        elif parts[0] == "col":
            if current is None:
                raise IngestError("GENSPEC", f"line {lineno}: col before table")
            name, kind, args = parts[1], parts[2], tuple(parts[3:])
            if kind == "seq":
                args = tuple(int(a) for a in args) or (1,)
            elif kind == "uniform":
                args = tuple(int(a) for a in args)
                if len(args) == 2:
                    args = args + (1,)
            elif kind == "date":
                args = (parse_date(args[0]), parse_date(args[1]))
            elif kind == "decimal":
                args = (parse_decimal(args[0]), parse_decimal(args[1]))
            elif kind != "choice":
                raise IngestError("GENSPEC", f"line {lineno}: unknown kind {kind}")
            cols[name] = ColumnGen(kind, args)
        else:
            raise IngestError("GENSPEC", f"line {lineno}: unrecognized line")
    flush()
    return GeneratorSpec(seed, tuple(tables))


def load_genspec(path: str) -> GeneratorSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_genspec(fh.read())


def generate(spec: GeneratorSpec, out_dir: str, schema: Schema) -> None:
    """Write one `.tbl` per table; byte-identical for identical specs."""
    os.makedirs(out_dir, exist_ok=True)
    for tg in spec.tables:
        table = schema.tables[tg.name]
        rng = SplitMix(spec.seed * 1000003 + _stable_str_hash(tg.name))
        columns: dict[str, list] = {}
        for col in table.columns:
            gen = tg.columns.get(col.name)
            if gen is None:
                raise IngestError("GENSPEC", f"no generator for {tg.name}.{col.name}")
            columns[col.name] = _gen_column(gen, tg.rows, rng)
        t = ColumnTable(tg.name, table.columns, columns, tg.rows)
        write_tbl(os.path.join(out_dir, f"{tg.name}.tbl"), t)


def _gen_column(gen: ColumnGen, rows: int, rng: SplitMix) -> list:
    if gen.kind == "seq":
        stride = gen.args[0]
        return [1 + i * stride for i in range(rows)]
    if gen.kind == "uniform":
        lo, hi, stride = gen.args
        span = (hi - lo) // stride + 1
        return [lo + rng.below(span) * stride for _ in range(rows)]
    if gen.kind == "choice":
        opts = gen.args
        return [opts[rng.below(len(opts))] for _ in range(rows)]
    if gen.kind in ("date", "decimal"):
        lo, hi = gen.args
        return [rng.int_range(lo, hi) for _ in range(rows)]
    raise IngestError("GENSPEC", gen.kind)


def _stable_str_hash(s: str) -> int:
    h = 0xCBF29CE484222325
    for ch in s.encode("utf-8"):
        h = ((h ^ ch) * 0x100000001B3) & _MASK
    return h
