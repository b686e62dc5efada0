import pytest

from forelem import ir
from forelem.ir import (
    Append,
    Compare,
    Cond,
    FieldRef,
    Filtered,
    Full,
    If,
    IRError,
    Lit,
    Loop,
    Program,
    emit_text,
    structural_eq,
    validate,
)


def single_loop():
    return Program(body=(
        Loop("i", Filtered("A", ("a2",), (Lit(7),)),
             (Append("R", (FieldRef("A", "i", "a1"),)),)),
    ))


def join_nest():
    return Program(body=(
        Loop("i", Full("A"), (
            Loop("j", Full("C"), (
                If(Cond((
                    Compare(FieldRef("A", "i", "a_id"), "==",
                            FieldRef("C", "j", "a_id")),
                    Compare(FieldRef("C", "j", "b_id"), "==", Lit(13)),
                )), (Append("R", (FieldRef("A", "i", "a1"),)),)),
            )),
        )),
    ))


def test_emit_single_loop_exact_bytes():
    assert emit_text(single_loop()) == \
        "forelem (i; i in pA.a2[7])\n  R <- (A[i].a1)\n"


def test_emit_empty_program():
    assert emit_text(Program()) == ""


def test_emit_merged_join_nest_folded():
    p = Program(body=(
        Loop("i", Full("A"), (
            Loop("j", Filtered("C", ("a_id", "b_id"),
                               (FieldRef("A", "i", "a_id"), Lit(13))),
                 (Append("R", (FieldRef("A", "i", "a1"),)),)),
        )),
    ))
    text = emit_text(p)
    assert text == (
        "forelem (i; i in pA)\n"
        "  forelem (j; j in pC.(a_id,b_id)[(A[i].a_id, 13)])\n"
        "    R <- (A[i].a1)\n"
    )
    assert "if" not in text


def test_emit_deterministic():
    p = join_nest()
    assert emit_text(p) == emit_text(p)


def test_structural_eq_reflexive():
    p = join_nest()
    assert structural_eq(p, p)


def test_structural_eq_alpha_rename():
    a = single_loop()
    b = Program(body=(
        Loop("k", Filtered("A", ("a2",), (Lit(7),)),
             (Append("R", (FieldRef("A", "k", "a1"),)),)),
    ))
    assert structural_eq(a, b)


def test_structural_eq_distinguishes_loop_order():
    nest = join_nest()
    swapped = Program(body=(
        Loop("j", Full("C"), (
            Loop("i", Full("A"), (
                If(Cond((
                    Compare(FieldRef("A", "i", "a_id"), "==",
                            FieldRef("C", "j", "a_id")),
                    Compare(FieldRef("C", "j", "b_id"), "==", Lit(13)),
                )), (Append("R", (FieldRef("A", "i", "a1"),)),)),
            )),
        )),
    ))
    assert not structural_eq(nest, swapped)


def test_structural_eq_temp_set_renaming():
    a = Program(body=(
        Loop("i", Full("A"), (Append("T1", (FieldRef("A", "i", "x"),)),)),
        Loop("j", Full("T1"), (Append("R", (FieldRef("T1", "j", "x"),)),)),
    ))
    b = Program(body=(
        Loop("i", Full("A"), (Append("T9", (FieldRef("A", "i", "x"),)),)),
        Loop("j", Full("T9"), (Append("R", (FieldRef("T9", "j", "x"),)),)),
    ))
    assert structural_eq(a, b)


def test_validate_rejects_shadowed_vars():
    p = Program(body=(
        Loop("i", Full("A"), (
            Loop("i", Full("C"), (Append("R", (Lit(1),)),)),
        )),
    ))
    with pytest.raises(IRError) as e:
        validate(p)
    assert e.value.code == "VAR_SHADOWED"


def test_validate_rejects_unmatched_agg_handle():
    p = Program(body=(
        Loop("i", Full("A"), (ir.AggStep(0, FieldRef("A", "i", "a1")),)),
    ))
    with pytest.raises(IRError) as e:
        validate(p)
    assert e.value.code == "AGG_UNMATCHED"


def test_validate_rejects_unknown_field_against_schema():
    from genutil import small_schema
    p = Program(body=(
        Loop("i", Full("A"), (Append("R", (FieldRef("A", "i", "zz"),)),)),
    ))
    with pytest.raises(IRError) as e:
        validate(p, small_schema())
    assert e.value.code == "UNKNOWN_FIELD"


def test_validate_unknown_field_on_temp():
    p = Program(body=(
        Loop("i", Full("A"), (Append("T1", (FieldRef("A", "i", "x"),)),)),
        Loop("j", Full("T1"), (Append("R", (FieldRef("T1", "j", "nope"),)),)),
    ))
    with pytest.raises(IRError) as e:
        validate(p)
    assert e.value.code == "UNKNOWN_FIELD"


def test_validate_arity_mismatch():
    p = Program(body=(
        Loop("i", Full("A"), (
            Append("T1", (Lit(1),)),
            Append("T1", (Lit(1), Lit(2))),
        )),
    ))
    with pytest.raises(IRError) as e:
        ir.infer_set_columns(p)
    assert e.value.code == "ARITY_MISMATCH"


def test_index_id_round_trip():
    assert ir.index_id_parts(ir.make_index_id("A", ("b",))) == ("A", None, ("b",))
    assert ir.index_id_parts(ir.make_index_id("A", ("b", "c"), "l")) == \
        ("A", "l", ("b", "c"))
