import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taiji.filtered_index import (Condition, FilteredVectorIndex, HnswParams, IndexError_, VectorRecord,
                                  recall_at_k, recall_eval)

from vectors import clustered, workload


@pytest.fixture(scope="module")
def mid():
    recs, centers = clustered(1500, 16, seed=3)
    return FilteredVectorIndex.build(recs, HnswParams(M=8, ef_construction=64), filterable=["s5", "s25"]), centers


def reachable(start, adjacency):
    """Nodes reachable from ``start`` following directed edges."""
    seen, stack = {start}, [start]
    while stack:
        for v in adjacency.get(stack.pop(), ()):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def check_structure(idx):
    M = idx.params.M
    for layer, adj in enumerate(idx.layers):
        bound = 2 * M if layer == 0 else M
        for u, vs in adj.items():
            assert len(vs) <= bound and u not in vs and len(set(vs)) == len(vs)
            assert idx.levels[u] >= layer and all(idx.levels[v] >= layer for v in vs)
    for aug in idx.augmentations.values():
        members = set(int(u) for u in aug.members)
        assert all(aug.condition.matches(idx.metadata[u]) for u in members)
        assert aug.extra_edge_count <= M * len(members)
        for e in aug.entries:
            assert reachable(e, aug.adjacency) == members


def test_single_record():
    idx = FilteredVectorIndex.build([VectorRecord("only", [1.0, 0.0])])
    assert idx.entry_point == 0 and all(not vs for layer in idx.layers for vs in layer.values())
    assert idx.search([1.0, 0.0], 1) == [("only", 1.0)]


def test_degree_bounds_hold_exhaustively():
    recs, _ = clustered(100, 8, seed=1)
    check_structure(FilteredVectorIndex.build(recs, HnswParams(M=8), filterable=["s25"]))


def test_structure_of_a_larger_build(mid):
    check_structure(mid[0])


def test_unfiltered_nearest_neighbour():
    recs, _ = clustered(500, 16, seed=7)
    idx = FilteredVectorIndex.build(recs)
    rng = np.random.default_rng(9)
    hits = 0
    for _ in range(200):
        q = rng.normal(size=16)
        hits += idx.search(q, 1)[0][0] == idx.brute_force(q, 1)[0][0]
    assert hits >= 198


def test_build_errors():
    with pytest.raises(IndexError_):
        FilteredVectorIndex.build([VectorRecord("a", [1, 0]), VectorRecord("b", [1, 0, 0])])
    with pytest.raises(IndexError_):
        FilteredVectorIndex.build([VectorRecord("a", [1, 0]), VectorRecord("a", [0, 1])])
    with pytest.raises(IndexError_):
        FilteredVectorIndex.build([])
    idx = FilteredVectorIndex.build([VectorRecord("a", [1, 0])])
    with pytest.raises(IndexError_):
        idx.search([1, 0, 0], 1)


def test_all_selecting_condition_needs_no_extra_edges():
    recs = [VectorRecord(r.id, r.embedding, {**r.metadata, "all": 1}) for r in clustered(300, 8, seed=2)[0]]
    idx = FilteredVectorIndex.build(recs, HnswParams(M=8))
    assert idx.augment(Condition.eq("all", 1)).extra_edge_count == 0


def test_two_far_apart_members_get_one_edge():
    rng = np.random.default_rng(5)
    recs = [VectorRecord(f"x{i}", rng.normal(size=4) + [5, 0, 0, 0], {"tag": "no"}) for i in range(60)]
    recs += [VectorRecord("east", [1, 0, 0, 0], {"tag": "yes"}), VectorRecord("west", [-1, 0, 0, 0], {"tag": "yes"})]
    idx = FilteredVectorIndex.build(recs, HnswParams(M=4))
    a, b = idx.id_to_idx["east"], idx.id_to_idx["west"]
    assert b not in idx.layers[0][a]
    aug = idx.augment(Condition.eq("tag", "yes"))
    assert aug.extra_edge_count == 1 and aug.extra_edges[a] == [b]


def test_unknown_attribute():
    idx = FilteredVectorIndex.build([VectorRecord("a", [1, 0], {"k": 1})])
    with pytest.raises(KeyError):
        idx.augment(Condition.eq("nope", 1))


def test_one_percent_subset_connected_on_10k():
    recs, _ = clustered(10_000, 32, seed=0)
    idx = FilteredVectorIndex.build(recs, filterable=["s1"])
    for aug in list(idx.augmentations.values())[:10]:
        members = {int(u) for u in aug.members}
        assert reachable(aug.entries[0], aug.adjacency) == members


def test_empty_subset_and_always_true(mid):
    idx, centers = mid
    q = centers[0]
    assert idx.search_filtered(q, 5, Condition.eq("s5", 999)) == []
    assert idx.search_filtered(q, 5, None) == idx.search(q, 5)
    assert idx.search_filtered(q, 5, Condition.between("s5", None, None)) == idx.search_filtered(
        q, 5, Condition.between("s5", -1, 100))


def test_results_satisfy_condition_and_are_sorted(mid):
    idx, centers = mid
    for q, cond in workload(centers, "s5", 30, seed=4) + workload(centers, "s1", 30, seed=5):
        out = idx.search_filtered(q, 10, cond)
        assert all(cond.matches(idx.metadata[idx.id_to_idx[i]]) for i, _ in out)
        sims = [s for _, s in out]
        assert sims == sorted(sims, reverse=True) and all(-1 <= s <= 1 for s in sims)


def test_ad_hoc_range_conditions_route_through_others(mid):
    idx, centers = mid
    cond = Condition.between("s1", 10, 12)
    r = recall_eval(idx, [(centers[i], cond) for i in range(20)], 10)
    assert r.mean >= 0.8


def test_self_similarity(mid):
    idx, _ = mid
    for i in (0, 17, 800):
        rid, sim = idx.search(idx.vectors[i], 1)[0]
        assert rid == idx.ids[i] and sim == pytest.approx(1.0, abs=1e-6)


def test_filtered_recall_beats_postfilter_on_sparse_subsets(mid):
    idx, centers = mid
    r = recall_eval(idx, workload(centers, "s5", 50, seed=6), 10)
    assert r.mean >= 0.9 and r.mean >= r.baseline_mean


def test_recall_helpers():
    assert recall_at_k(["a", "b"], ["b", "a"]) == 1.0
    assert recall_at_k(["c"], ["a", "b"]) == 0.0
    assert recall_at_k([], []) == 1.0
    with pytest.raises(ValueError):
        recall_eval(FilteredVectorIndex.build([VectorRecord("a", [1, 0])]), [], 1)


def test_deterministic_given_seed():
    recs, centers = clustered(400, 8, seed=11)
    a = FilteredVectorIndex.build(recs, filterable=["s5"])
    b = FilteredVectorIndex.build(recs, filterable=["s5"])
    assert a.layers == b.layers
    for q, c in workload(centers, "s5", 10, seed=2):
        assert a.search_filtered(q, 5, c) == b.search_filtered(q, 5, c)


def test_persistence_round_trip(tmp_path, mid):
    idx, centers = mid
    idx.save(tmp_path / "i.tjx")
    again = FilteredVectorIndex.load(tmp_path / "i.tjx")
    assert again.ids == idx.ids and again.layers == idx.layers and again.filterable == idx.filterable
    assert set(again.augmentations) == set(idx.augmentations)
    for q, c in workload(centers, "s25", 10, seed=8):
        assert again.search_filtered(q, 5, c) == idx.search_filtered(q, 5, c)


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(IndexError_, match="not a filtered-index"):
        FilteredVectorIndex.load(tmp_path / "bad")


def test_upsert_returns_a_new_snapshot():
    recs, _ = clustered(200, 8, seed=4)
    old = FilteredVectorIndex.build(recs, filterable=["s25"])
    new = old.upsert([VectorRecord("fresh", np.ones(8), {"s25": 2})])
    assert "fresh" in new.id_to_idx and "fresh" not in old.id_to_idx
    assert new.search(np.ones(8), 1)[0][0] == "fresh"
    check_structure(new)
    replaced = new.upsert([VectorRecord("fresh", -np.ones(8), {"s25": 3})])
    assert replaced.search(-np.ones(8), 1)[0][0] == "fresh" and len(replaced) == len(new)


def test_concurrent_searches_agree(mid):
    idx, centers = mid
    wl = workload(centers, "s5", 20, seed=12)
    want = [idx.search_filtered(q, 5, c) for q, c in wl]
    got = [None] * len(wl)

    def run(i):
        got[i] = idx.search_filtered(wl[i][0], 5, wl[i][1])

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(wl))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == want


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000), st.integers(2, 6))
def test_augmented_subgraphs_always_connected(n, seed, values):
    rng = np.random.default_rng(seed)
    recs = [VectorRecord(f"v{i}", rng.normal(size=4), {"c": int(rng.integers(values))}) for i in range(n)]
    idx = FilteredVectorIndex.build(recs, HnswParams(M=2, ef_construction=8, seed=seed), filterable=["c"])
    check_structure(idx)
    q = rng.normal(size=4)
    for aug in idx.augmentations.values():
        got = idx.search_filtered(q, len(aug.members), aug.condition, ef=len(aug.members))
        assert {i for i, _ in got} == {i for i, _ in idx.brute_force(q, len(aug.members), aug.condition)}
