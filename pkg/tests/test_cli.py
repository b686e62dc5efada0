import os

import pytest

from conftest import CORPUS
from forelem.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


SCHEMA = os.path.join(CORPUS, "schema.txt")


def write_query(tmp_path, text):
    p = tmp_path / "q.sql"
    p.write_text(text)
    return str(p)


def test_parse_prints_canonical_folded_text(tmp_path, capsys):
    q = write_query(tmp_path, "SELECT L.okey FROM L WHERE L.qty = 7")
    code, out, _ = run_cli(capsys, "parse", q, "--schema", SCHEMA)
    assert code == 0
    assert out == "forelem (i; i in pL.qty[7])\n  R <- (L[i].okey)\n"


def test_parse_malformed_sql_exits_2(tmp_path, capsys):
    q = write_query(tmp_path, "SELEC nope")
    code, _, err = run_cli(capsys, "parse", q, "--schema", SCHEMA)
    assert code == 2 and err


def test_parse_unsupported_construct_exits_2(tmp_path, capsys):
    q = write_query(tmp_path, "SELECT L.okey FROM L WHERE L.rflag LIKE 'x%'")
    code, _, err = run_cli(capsys, "parse", q, "--schema", SCHEMA)
    assert code == 2 and "UNSUPPORTED_SQL" in err


def test_run_both_modes_equal(tmp_path, capsys, small_data_dir):
    q = write_query(
        tmp_path,
        "SELECT C.ckey, O.okey FROM C, O "
        "WHERE C.ckey = O.ockey AND C.mkt = 'BUILDING' AND C.nat = 'N01'")
    code, out1, _ = run_cli(capsys, "run", q, "--schema", SCHEMA,
                            "--data", small_data_dir, "--oracle")
    assert code == 0
    code, out2, _ = run_cli(capsys, "run", q, "--schema", SCHEMA,
                            "--data", small_data_dir, "--optimized")
    assert code == 0
    assert out1 == out2 and out1


def test_run_missing_data_dir_exits_3(tmp_path, capsys):
    q = write_query(tmp_path, "SELECT L.okey FROM L")
    code, _, err = run_cli(capsys, "run", q, "--schema", SCHEMA,
                           "--data", str(tmp_path / "nope"))
    assert code == 3


def test_run_empty_min_exits_4(tmp_path, capsys, corpus_schema):
    # MIN over an empty scan is a runtime error by the aggregate contract
    data = tmp_path / "data"
    data.mkdir()
    for t, cols in (
        ("C", "1|BUILDING|N01|1.00|"), ("O", "1|1|1995-01-01|1.00|x|"),
        ("P", "1|B11|1|BAG|1.00|"), ("S", "1|N01|1.00|"),
    ):
        (data / f"{t}.tbl").write_text(cols + "\n")
    (data / "L.tbl").write_text("")  # empty fact table
    q = write_query(tmp_path, "SELECT MIN(L.qty) FROM L")
    code, _, err = run_cli(capsys, "run", q, "--schema", SCHEMA,
                           "--data", str(data), "--oracle")
    assert code == 4 and "EMPTY_AGGREGATE" in err


def test_run_distinct_has_no_duplicates(tmp_path, capsys, small_data_dir):
    q = write_query(tmp_path, "SELECT DISTINCT L.rflag FROM L")
    code, out, _ = run_cli(capsys, "run", q, "--schema", SCHEMA,
                           "--data", small_data_dir)
    rows = out.splitlines()
    assert code == 0 and len(rows) == len(set(rows))


def test_run_order_by_honored(tmp_path, capsys, small_data_dir):
    q = write_query(tmp_path,
                    "SELECT O.okey FROM O WHERE O.total > 2900.00 "
                    "ORDER BY O.okey DESC")
    code, out, _ = run_cli(capsys, "run", q, "--schema", SCHEMA,
                           "--data", small_data_dir)
    vals = [int(x) for x in out.split()]
    assert code == 0 and vals == sorted(vals, reverse=True)


def test_optimize_trace_lines(tmp_path, capsys, small_data_dir):
    code, out, _ = run_cli(capsys, "optimize", os.path.join(CORPUS, "q01.sql"),
                           "--schema", SCHEMA, "--data", small_data_dir,
                           "--trace")
    assert code == 0
    assert "PASS Table Propagation applied" in out
    assert "PASS Iteration Space Expansion applied" in out
    assert "forelem" in out


def test_explain_lists_decisions(tmp_path, capsys, small_data_dir):
    code, out, _ = run_cli(capsys, "explain", os.path.join(CORPUS, "q03.sql"),
                           "--schema", SCHEMA, "--data", small_data_dir,
                           "--analysis")
    assert code == 0
    assert "INDEX pPO.okey HASH" in out
    assert "DEFUSE" in out


def test_generate_is_deterministic(tmp_path, capsys):
    spec = os.path.join(CORPUS, "gen_small.txt")
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert run_cli(capsys, "generate", "--schema", SCHEMA, "--spec", spec,
                   "--out", d1)[0] == 0
    assert run_cli(capsys, "generate", "--schema", SCHEMA, "--spec", spec,
                   "--out", d2)[0] == 0
    for name in os.listdir(d1):
        with open(os.path.join(d1, name), "rb") as f1, \
                open(os.path.join(d2, name), "rb") as f2:
            assert f1.read() == f2.read()


def test_bench_emits_machine_lines(tmp_path, capsys, small_data_dir):
    corpus = tmp_path / "mini"
    corpus.mkdir()
    (corpus / "a.sql").write_text(
        "SELECT C.ckey, O.okey FROM C, O "
        "WHERE C.ckey = O.ockey AND C.mkt = 'BUILDING' AND C.nat = 'N01'")
    (corpus / "b.sql").write_text("SELECT SUM(L.qty) FROM L WHERE L.disc <= 2")
    code, out, _ = run_cli(capsys, "bench", str(corpus), "--schema", SCHEMA,
                           "--data", small_data_dir, "--reps", "1")
    assert code == 0
    lines = [l for l in out.splitlines() if l.startswith("BENCH ")]
    assert len(lines) == 2
    assert all("naive_ms=" in l and "speedup=" in l and "checksum=" in l
               for l in lines)
    assert "BENCH-SUMMARY" in out


def test_bench_checksum_mismatch_exits_5(tmp_path, capsys, small_data_dir,
                                         monkeypatch):
    # injected fault: make the optimized executor drop a row
    import forelem.cli as cli
    import forelem.engine as eng
    corpus = tmp_path / "mini"
    corpus.mkdir()
    (corpus / "a.sql").write_text("SELECT S.skey FROM S WHERE S.snat = 'N01'")
    real_execute = eng.execute

    def broken_execute(plan, db):
        out = real_execute(plan, db)
        for bag in out.values():
            if bag.rows:
                bag.rows.pop()
        return out

    monkeypatch.setattr(cli.engine, "execute", broken_execute)
    code, _, err = run_cli(capsys, "bench", str(corpus), "--schema", SCHEMA,
                           "--data", small_data_dir, "--reps", "1")
    assert code == 5 and "checksum mismatch" in err
