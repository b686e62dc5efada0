import pytest

from conftest import corpus_sql
from forelem import engine, ingest, strategy
from forelem import transforms as T
from forelem.cli import initial_program
from forelem.ir import emit_text, structural_eq
from forelem.parser import parse_text


def optimize_query(name, schema, stats, cfg=None):
    prog = initial_program(corpus_sql(name), schema)
    plan, trace = strategy.optimize(prog, schema, stats, cfg)
    return prog, plan, trace


def kinds_of(plan) -> set[str]:
    kinds = set(plan.decisions.values())
    for k in plan.array_kinds.values():
        kinds.add("FLAT_ARRAY" if k == "array" else "HASH")
    return kinds


# --- pipeline traces ---------------------------------------------------------

def test_trace_group_scan_query(corpus_schema, small_stats):
    _, plan, trace = optimize_query("q01", corpus_schema, small_stats)
    assert trace.contains_sequence([
        "Table Propagation", "Iteration Space Expansion", "LICM",
        "Dead Code Elimination",
    ])
    assert kinds_of(plan) == {"HASH"}


def test_trace_join_group_query(corpus_schema, small_stats):
    _, plan, trace = optimize_query("q03", corpus_schema, small_stats)
    assert trace.contains_sequence([
        "Loop Interchange", "Iteration Space Expansion", "LICM",
        "Index Set Pruning", "Index Set Combination",
    ])
    assert kinds_of(plan) == {"HASH"}


def test_trace_pure_scan_query_nothing_applies(corpus_schema, small_stats):
    _, plan, trace = optimize_query("q06", corpus_schema, small_stats)
    assert trace.applied_names() == []
    assert not plan.decisions and not plan.array_kinds


def test_trace_correlated_subquery_query(corpus_schema, small_stats):
    _, plan, trace = optimize_query("q17", corpus_schema, small_stats)
    assert trace.contains_sequence([
        "Inline", "Iteration Space Expansion", "LICM", "Index Set Pruning",
    ])
    assert kinds_of(plan) == {"FLAT_ARRAY"}


def test_pipeline_sound_on_corpus_sample(corpus_schema, small_db, small_stats):
    for name in ("q01", "q03", "q05", "q12", "q15", "q17", "q21"):
        prog, plan, _ = optimize_query(name, corpus_schema, small_stats)
        a = engine.oracle_eval(prog, small_db)["R"]
        b = engine.execute(plan, small_db)["R"]
        assert engine.bag_equal(a, b), name


# --- materialization decisions -----------------------------------------------

def test_full_scan_never_materialized(corpus_schema, small_stats):
    p = parse_text("forelem (i; i in pL)\n  R <- (L[i].qty)\n")
    targets, skipped = strategy.materialization_targets(
        p, small_stats, strategy.PipelineConfig())
    assert not targets
    assert any("full table" in why for _, why in skipped)


def test_outermost_filter_never_materialized(corpus_schema, small_stats):
    p = parse_text('forelem (i; i in pL.rflag["R"])\n  R <- (L[i].qty)\n')
    targets, skipped = strategy.materialization_targets(
        p, small_stats, strategy.PipelineConfig())
    assert not targets
    assert any("outermost" in why for _, why in skipped)


def test_tiny_table_never_materialized(corpus_schema, small_stats):
    p = parse_text(
        "forelem (i; i in pL)\n"
        "  forelem (j; j in pS.skey[L[i].skey])\n"
        "    R <- (S[j].snat)\n")
    targets, skipped = strategy.materialization_targets(
        p, small_stats, strategy.PipelineConfig())
    assert not targets
    assert any("rows" in why for _, why in skipped)


def test_inner_filter_on_big_table_materialized(corpus_schema, small_stats):
    p = parse_text(
        "forelem (i; i in pO)\n"
        "  forelem (j; j in pL.okey[O[i].okey])\n"
        "    R <- (L[j].qty)\n")
    targets, _ = strategy.materialization_targets(
        p, small_stats, strategy.PipelineConfig())
    assert len(targets) == 1


def test_concretize_unique_dense_key_is_flat_array(small_stats):
    assert strategy.concretize_index(small_stats, "pPP.pkey") == "FLAT_ARRAY"


def test_concretize_unique_sparse_key_is_hash(small_stats):
    assert strategy.concretize_index(small_stats, "pPO.okey") == "HASH"


def test_concretize_non_unique_key_is_tree(small_stats):
    assert strategy.concretize_index(small_stats, "pPL.okey") == "BALANCED_TREE"


def test_decision_totality(corpus_schema, small_db, small_stats):
    # every materialized id carries a decision; every skipped set a reason
    import forelem.ir as ir
    for name in ("q03", "q04", "q15", "q17"):
        _, plan, _ = optimize_query(name, corpus_schema, small_stats)
        built = {
            s.index_id for s in ir.walk_program(plan.program)
            if isinstance(s, ir.IndexBuild)
        }
        assert built == set(plan.decisions)


# --- replay and determinism --------------------------------------------------

def test_replay_reproduces_pipeline_output(corpus_schema, small_stats):
    for name in ("q01", "q03", "q17", "q12"):
        prog = initial_program(corpus_sql(name), corpus_schema)
        plan, trace = strategy.optimize(prog, corpus_schema, small_stats)
        replayed = strategy.replay(prog, trace, small_stats)
        assert emit_text(replayed) == emit_text(plan.program), name


def test_pipeline_runs_byte_identical(corpus_schema, small_stats):
    for name in ("q01", "q03", "q15"):
        prog = initial_program(corpus_sql(name), corpus_schema)
        p1, t1 = strategy.optimize(prog, corpus_schema, small_stats)
        p2, t2 = strategy.optimize(prog, corpus_schema, small_stats)
        assert emit_text(p1.program) == emit_text(p2.program)
        assert t1.lines() == t2.lines()
        assert p1.decisions == p2.decisions


def test_config_file_round_trip(tmp_path):
    cfg_path = tmp_path / "pipe.cfg"
    cfg_path.write_text(
        "tiny_table_threshold = 50\nblock_rows = 1024\n"
        "float_sum_tolerance = 1e-8\nprefer_sorted_aggregation = true\n"
        "disable = fusion, block\n")
    cfg = strategy.PipelineConfig.from_file(str(cfg_path))
    assert cfg.tiny_table_threshold == 50
    assert cfg.block_rows == 1024
    assert cfg.prefer_sorted_aggregation
    assert not cfg.enabled("fusion") and cfg.enabled("licm")


def test_config_rejects_nonpositive_threshold(tmp_path):
    cfg_path = tmp_path / "pipe.cfg"
    cfg_path.write_text("tiny_table_threshold = 0\n")
    with pytest.raises(ValueError):
        strategy.PipelineConfig.from_file(str(cfg_path))


# --- sorted aggregation option ------------------------------------------------

def test_sorted_aggregation_flag(corpus_schema, small_db, small_stats):
    cfg = strategy.PipelineConfig(prefer_sorted_aggregation=True)
    prog = initial_program(corpus_sql("q07"), corpus_schema)
    plan, trace = strategy.optimize(prog, corpus_schema, small_stats, cfg)
    assert "Sorted Aggregation" in trace.applied_names()
    assert "SORTED_SCAN" in plan.decisions.values()
    a = engine.oracle_eval(prog, small_db)["R"]
    b = engine.execute(plan, small_db)["R"]
    assert engine.bag_equal(a, b)


# --- named derivation recipes (golden IR) -------------------------------------

JOIN_START = """forelem (i; i in pA)
  forelem (j; j in pB.b[A[i].b])
    R <- (A[i].a)
"""

GROUP_START = """forelem (i; i in pA)
  T1 <- (A[i].field2, A[i].field3)
forelem (i; i in pT1)
  G1 <- (T1[i].field2)
distinct(G1)
forelem (i; i in pG1)
  agg_init(0, MIN)
  forelem (j; j in pT1.field2[G1[i].field2])
    agg_step(0, T1[j].field3)
  agg_finish(0)
  R <- (G1[i].field2, agg_result(0))
"""

SUBQ_START = """function subquery()
  clear(T1)
  forelem (i; i in pB.b2["str2"])
    forelem (j; j in pC.b_id[B[i].b_id])
      forelem (k; k in pA.a_id[C[j].a_id])
        T1 <- (A[k].a_id)
  return T1
forelem (i; i in pB.b2["str1"])
  forelem (j; j in pC.b_id[B[i].b_id])
    forelem (k; k in pA.a_id[C[j].a_id])
      if (A[k].a_id in subquery())
        R <- (A[k].a1)
"""

GOLDEN = {
    "NestedLoops": """forelem (i; i in N_A)
  forelem (j; j in N_B)
    if (A[i].b == B[j].b)
      R <- (A[i].a)
""",
    "BlockNestedLoops": """for (l; l in 4)
  forelem (b; b in N_lA)
    pPA_l.b[A[b].b] <-+ (b)
  forelem (j; j in N_B)
    forelem (i; i in pPA_l.b[B[j].b])
      R <- (A[i].a)
""",
    "IndexNestedLoops": """forelem (b; b in N_A)
  pPA.b[A[b].b] <-+ (b)
forelem (j; j in N_B)
  forelem (i; i in pPA.b[B[j].b])
    R <- (A[i].a)
""",
    "HashJoin": """for (l; l in 4 : A.b, B.b)
  forelem (b; b in N_lA)
    pPA_l.b[A[b].b] <-+ (b)
  forelem (j; j in N_lB)
    forelem (i; i in pPA_l.b[B[j].b])
      R <- (A[i].a)
""",
    "HashAggregation": """forelem (i; i in pA)
  T1 <- (A[i].field2, A[i].field3)
forelem (i; i in pT1)
  G1 <- (T1[i].field2)
distinct(G1)
tmp[] = INT_MAX
forelem (j; j in pT1)
  if (T1[j].field3 < tmp[T1[j].field2])
    tmp[T1[j].field2] = T1[j].field3
forelem (i; i in pG1)
  R <- (G1[i].field2, tmp[G1[i].field2])
""",
    "SortedAggregation": """forelem (i; i in pA)
  T1 <- (A[i].field2, A[i].field3)
sort(T1, field2 asc)
forelem (b; b in N_T1)
  pPT1.field2[T1[b].field2] <-+ (b)
forelem (i; i in pPT1.field2)
  agg_init(0, MIN)
  forelem (j; j in pPT1.field2[T1[i].field2])
    agg_step(0, T1[j].field3)
  agg_finish(0)
  R <- (T1[i].field2, agg_result(0))
""",
    "MultiBlockFlatten": """clear(T2)
forelem (i2; i2 in pB.b2["str2"])
  forelem (j2; j2 in pC.b_id[B[i2].b_id])
    forelem (k2; k2 in pA.a_id[C[j2].a_id])
      T2 <- (A[k2].a_id)
forelem (i; i in pB.b2["str1"])
  forelem (j; j in pC.b_id[B[i].b_id])
    forelem (k; k in pA.a_id[C[j].a_id])
      if (A[k].a_id in T2)
        R <- (A[k].a1)
""",
}

STARTS = {
    "NestedLoops": JOIN_START,
    "BlockNestedLoops": JOIN_START,
    "IndexNestedLoops": JOIN_START,
    "HashJoin": JOIN_START,
    "HashAggregation": GROUP_START,
    "SortedAggregation": GROUP_START,
    "MultiBlockFlatten": SUBQ_START,
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_recipe_matches_golden_ir(name):
    start = parse_text(STARTS[name])
    plan, trace = strategy.derive_named_algorithm(name, start)
    golden = parse_text(GOLDEN[name])
    assert structural_eq(plan.program, golden), emit_text(plan.program)


def test_recipe_rejects_wrong_shape():
    with pytest.raises(T.TransformError):
        strategy.derive_named_algorithm(
            "NestedLoops", parse_text("forelem (i; i in pA)\n  R <- (A[i].a)\n"))


def test_block_nested_loops_single_partition_degenerates():
    from genutil import random_db
    import random
    start = parse_text(JOIN_START.replace(".b[", ".f1[").replace("].b]", "].f1]")
                       .replace("A[i].a", "A[i].f2"))
    plan, _ = strategy.derive_named_algorithm("BlockNestedLoops", start,
                                              num_parts=1)
    nl, _ = strategy.derive_named_algorithm("NestedLoops", start)
    db = random_db(random.Random(11))
    a = engine.execute(plan, db)["R"]
    b = engine.execute(nl, db)["R"]
    assert engine.bag_equal(a, b)
