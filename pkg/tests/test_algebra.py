import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taiji import expr as E
from taiji.algebra import (ARITY, InvalidPlanError, ItemRef, Modality, OpKind, Operator, QueryPlan, ResultSet,
                           as_multiset, check_plan, decode_value, encode_value, filter_, join, limit,
                           output_columns, plan_signature, project, scan, sem_match, topological_order,
                           validate_plan)
from taiji.language import parse_expression

from plans import CATALOG, random_expression

FURN, IMG = CATALOG["furniture"], CATALOG["image"]
CHAIRS = E.Cmp("==", E.Col("category"), E.Lit("chair"))


def chain4():
    return QueryPlan.chain(scan(FURN), filter_(CHAIRS), sem_match(Modality.IMAGE, "two chairs", 0.5), limit(10))


def test_valid_chain_has_no_violations():
    assert validate_plan(chain4()) == []


def test_cycle_is_reported_by_node():
    plan = QueryPlan((("a", filter_(CHAIRS)), ("b", filter_(CHAIRS))), (("a", "b"), ("b", "a")), "b")
    assert any(v.startswith("cycle through a") for v in validate_plan(plan))


def test_join_with_one_input_is_an_arity_mismatch():
    plan = QueryPlan((("s", scan(FURN)), ("j", join("furniture.id", "image.fid"))), (("s", "j"),), "j")
    assert any("arity mismatch at node j" in v for v in validate_plan(plan))
    with pytest.raises(InvalidPlanError):
        check_plan(plan)


def test_bad_parameters_are_violations():
    plan = QueryPlan.chain(scan(FURN), sem_match(Modality.IMAGE, "x", 1.5))
    assert any("threshold" in v for v in validate_plan(plan))
    plan = QueryPlan.chain(scan(FURN), limit(-1))
    assert any("Limit count" in v for v in validate_plan(plan))


def test_two_sinks_rejected():
    plan = QueryPlan((("a", scan(FURN)), ("b", scan(IMG))), (), "a")
    assert any("exactly one sink" in v for v in validate_plan(plan))


def test_arity_table_is_total():
    assert set(ARITY) == set(OpKind)


def test_chain_order_is_the_chain():
    assert topological_order(chain4()) == ["n0", "n1", "n2", "n3"]


def test_single_scan():
    plan = QueryPlan((("only", scan(FURN)),), (), "only")
    assert topological_order(plan) == ["only"]
    assert plan_signature(plan) == scan(FURN).signature()


def test_diamond_order_respects_edges():
    a = E.Cmp("<", E.Col("price"), E.Lit(100))
    b = E.Cmp(">", E.Col("price"), E.Lit(50))
    plan = QueryPlan((("s", scan(FURN)), ("fa", filter_(a)), ("fb", filter_(b)), ("t", scan(IMG)),
                      ("j", join("furniture.id", "image.fid")), ("j2", join("furniture.id", "furniture.id"))),
                     (("s", "fa"), ("s", "fb"), ("fa", "j"), ("t", "j"), ("j", "j2"), ("fb", "j2")), "j2")
    order = topological_order(plan)
    pos = {n: i for i, n in enumerate(order)}
    assert len(order) == len(plan.nodes)
    assert all(pos[u] < pos[v] for u, v in plan.edges)


def test_signature_ignores_node_ids_but_not_predicates():
    p = chain4()
    assert plan_signature(p) == plan_signature(p.relabel({f"n{i}": f"x{9 - i}" for i in range(4)}))
    other = QueryPlan.chain(scan(FURN), filter_(E.Cmp("==", E.Col("category"), E.Lit("table"))),
                            sem_match(Modality.IMAGE, "two chairs", 0.5), limit(10))
    assert plan_signature(p) != plan_signature(other)


def test_json_round_trip():
    p = parse_expression(random_expression(random.Random(3)), CATALOG)
    q = QueryPlan.from_json(p.to_json())
    assert q == p and plan_signature(q) == plan_signature(p)


def test_output_columns_of_join_and_project():
    p = parse_expression("scan(furniture) | join(scan(image), furniture.id == image.fid) | "
                         "project(furniture.id, image.img)", CATALOG)
    cols = output_columns(p)
    assert cols[p.sink] == ("furniture.id", "image.img")
    j = next(n for n, op in p.nodes if op.kind is OpKind.JOIN)
    assert cols[j] == FURN.columns + IMG.columns


def test_item_collections_lead_with_item_column():
    assert CATALOG["photos"].columns == ("photos.item",)


def test_result_rows_share_arity():
    with pytest.raises(ValueError):
        ResultSet(("a", "b"), ((1, 2), (3,)))


def test_value_encoding_round_trips_item_refs():
    ref = ItemRef("photos", "p1", Modality.IMAGE)
    for v in (ref, 3, 2.5, "x", None, True):
        assert decode_value(encode_value(v)) == v


expressions = st.integers(0, 10_000).map(lambda s: random_expression(random.Random(s)))


@settings(max_examples=60, deadline=None)
@given(expressions, st.randoms(use_true_random=False))
def test_signature_invariant_under_relabeling(text, rnd):
    p = parse_expression(text, CATALOG)
    ids = p.node_ids()
    shuffled = ids[:]
    rnd.shuffle(shuffled)
    mapping = {a: f"m{b}" for a, b in zip(ids, shuffled)}
    assert plan_signature(p.relabel(mapping)) == plan_signature(p)


@settings(max_examples=60, deadline=None)
@given(expressions)
def test_topological_order_is_complete_and_forward(text):
    p = parse_expression(text, CATALOG)
    order = topological_order(p)
    pos = {n: i for i, n in enumerate(order)}
    assert sorted(order) == sorted(p.node_ids())
    assert all(pos[u] < pos[v] for u, v in p.edges)


def test_multiset_counts_duplicates():
    rs = ResultSet(("a",), ((1,), (1,), (2,)))
    assert sum(as_multiset(rs).values()) == 3


def test_operator_json_round_trip():
    ops = [scan(FURN), filter_(CHAIRS), project("furniture.id"), limit(0), join("a.x", "b.y"),
           sem_match(Modality.IMAGE, "a lamp", 0.25), Operator(OpKind.SEM_EXTRACT, modality=Modality.IMAGE,
                                                               fields=("chair",))]
    for op in ops:
        assert Operator.from_json(op.to_json()) == op
