import random

import pytest

from genutil import random_db, random_pure_program
from forelem import parse_text
from forelem import transforms as T
from forelem.analysis import def_use, is_invariant, product_signature
from forelem.engine import bag_equal, oracle_eval

PROPAGATION_PRE = """forelem (i; i in pX.field2[7])
  T1 <- (X[i].field3)
forelem (i; i in pT1)
  R <- (T1[i].field3)
"""

PROPAGATION_POST = """forelem (i; i in pX.field2[7])
  T1 <- (X[i].field3)
forelem (i; i in pX.field2[7])
  R <- (X[i].field3)
"""


def test_def_use_chain_producer_consumer():
    info = def_use(parse_text(PROPAGATION_PRE))
    assert ("set", "T1") in info.defs
    assert len(info.defs[("set", "T1")]) == 1
    assert len(info.uses[("set", "T1")]) == 2  # loop over it + field read
    assert "T1" not in info.dead_sets


def test_def_use_flags_dead_after_propagation():
    info = def_use(parse_text(PROPAGATION_POST))
    assert "T1" in info.dead_sets


def test_def_use_empty_program():
    from forelem.ir import Program
    info = def_use(Program())
    assert not info.defs and not info.uses and not info.dead_sets


SELECTION = """forelem (i; i in pA)
  forelem (j; j in pC)
    if (A[i].field < 20)
      R <- (A[i].a1, C[j].x)
"""


def test_is_invariant_outer_field_under_inner_loop():
    p = parse_text(SELECTION)
    inner_if = p.body[0].body[0].body[0]
    assert is_invariant(p, (0, 0), inner_if)


def test_is_invariant_false_when_referencing_loop_var():
    p = parse_text("""forelem (i; i in pA)
  forelem (j; j in pC)
    if (A[i].field == C[j].x)
      R <- (A[i].a1)
""")
    inner_if = p.body[0].body[0].body[0]
    assert not is_invariant(p, (0, 0), inner_if)


def test_is_invariant_expanded_aggregation_loop():
    # after expansion the scan loop no longer mentions the group variable
    p = parse_text("""forelem (i; i in pG1)
  tmp[] = INT_MAX
  forelem (j; j in pT1)
    if (T1[j].field3 < tmp[T1[j].field2])
      tmp[T1[j].field2] = T1[j].field3
  R <- (G1[i].field2, tmp[G1[i].field2])
""")
    scan = p.body[0].body[1]
    assert not is_invariant(p, (0,), scan)  # tmp is reset by a sibling
    init = p.body[0].body[0]
    assert is_invariant(p, (0,), init)


FOLDED = """forelem (i; i in pA)
  forelem (j; j in pC.(aref,bref)[(A[i].aident, 13)])
    R <- (A[i].a1)
"""
EXPLICIT = """forelem (i; i in pA)
  forelem (j; j in pC)
    if (A[i].aident == C[j].aref && C[j].bref == 13)
      R <- (A[i].a1)
"""
INTERCHANGED = """forelem (j; j in pC)
  forelem (i; i in pA)
    if (A[i].aident == C[j].aref && C[j].bref == 13)
      R <- (A[i].a1)
"""
DROPPED = """forelem (i; i in pA)
  forelem (j; j in pC)
    if (A[i].aident == C[j].aref)
      R <- (A[i].a1)
"""


def test_signature_folding_is_guard_relocation():
    assert product_signature(parse_text(FOLDED)) == \
        product_signature(parse_text(EXPLICIT))


def test_signature_erases_loop_order():
    assert product_signature(parse_text(EXPLICIT)) == \
        product_signature(parse_text(INTERCHANGED))


def test_signature_distinguishes_guards():
    assert product_signature(parse_text(EXPLICIT)) != \
        product_signature(parse_text(DROPPED))


def test_signature_sees_through_temp_propagation():
    assert product_signature(parse_text(PROPAGATION_PRE)) == \
        product_signature(parse_text(PROPAGATION_POST))


@pytest.mark.parametrize("seed", range(200))
def test_signature_soundness_random(seed):
    """Signature-preserving rewrites produce equal signatures and equal
    oracle bags on random programs and databases."""
    rng = random.Random(seed)
    p = random_pure_program(rng)
    q = T.fold_conditions(p)
    q = T.licm(q)
    nest = q.body[0]
    depth = 0
    s = nest
    while isinstance(s, T.Loop):
        depth += 1
        s = s.body[0] if len(s.body) == 1 and isinstance(s.body[0], T.Loop) else None
        if s is None:
            break
    if depth >= 2:
        perm = list(range(depth))
        rng.shuffle(perm)
        try:
            q = T.loop_interchange(q, (0,), tuple(perm))
        except T.TransformError:
            pass
    assert product_signature(p) == product_signature(q)
    db = random_db(rng)
    ra, rb = oracle_eval(p, db), oracle_eval(q, db)
    assert bag_equal(ra["R"], rb["R"])


def test_removing_dead_statement_preserves_oracle():
    rng = random.Random(5)
    text = PROPAGATION_POST.replace("field2", "f2").replace("field3", "f3")
    for _ in range(40):
        p = parse_text(text.replace("X", rng.choice("ABC")))
        db = random_db(rng)
        q = T.dead_code_elimination(p)
        assert bag_equal(oracle_eval(p, db)["R"], oracle_eval(q, db)["R"])
