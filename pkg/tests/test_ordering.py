import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bento_forge.dataset import AnnotationError, generate_dataset, generate_synthetic_scene
from bento_forge.ordering import (
    CyclicOcclusionError,
    OcclusionGraph,
    OrderingError,
    PairwiseOrderModel,
    PlacementOrder,
    build_occlusion_graph,
    occlusion_graph_from_masks,
    order_metrics,
    pair_features,
    pairs_from_scenes,
    recover_order,
    recover_scene_order,
    train_pairwise_order_model,
)


def _rect(y0, y1, x0, x1, size=10):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_disjoint_items_no_edges():
    amo = {0: _rect(0, 3, 0, 3), 1: _rect(5, 9, 5, 9)}
    g = occlusion_graph_from_masks(amo, amo)
    assert g.edges == {}


def test_two_item_overlap_edge():
    amo = {0: _rect(0, 6, 0, 6), 1: _rect(3, 9, 3, 9)}
    vis = {0: amo[0] & ~amo[1], 1: amo[1]}
    g = occlusion_graph_from_masks(vis, amo)
    assert g.edges == {(0, 1): 9}


def test_type3_croquette_to_shrimp():
    sc = generate_synthetic_scene(3, 4)
    ids = {it.category: it.item_id for it in sc.items}
    g = build_occlusion_graph(sc)
    assert (ids["croquette"], ids["fried_shrimp"]) in g.edges
    assert (ids["rice"], ids["croquette"]) in g.edges


def test_three_item_stack_edges():
    amo = {0: _rect(0, 10, 0, 10), 1: _rect(2, 8, 2, 8), 2: _rect(4, 6, 4, 9)}
    vis = {2: amo[2], 1: amo[1] & ~amo[2], 0: amo[0] & ~amo[1] & ~amo[2]}
    g = occlusion_graph_from_masks(vis, amo)
    assert set(g.edges) == {(0, 1), (1, 2), (0, 2)}
    assert all(v > 0 for v in g.edges.values())
    assert recover_order(g).ids == (0, 1, 2)


def test_visible_outside_amodal_rejected():
    sc = generate_synthetic_scene(1, 0)
    it = sc.items[1]
    it.visible_mask = it.visible_mask | ~it.amodal_mask
    with pytest.raises(AnnotationError, match=f"item {it.item_id}"):
        build_occlusion_graph(sc)


def test_empty_graph_area_tiebreak():
    g = OcclusionGraph(items=[0, 1, 2], visible_area={0: 10, 1: 100, 2: 50})
    assert recover_order(g).ids == (1, 2, 0)


def test_equal_area_tiebreak_by_id():
    g = OcclusionGraph(items=[4, 2, 7], visible_area={4: 5, 2: 5, 7: 5})
    assert recover_order(g).ids == (2, 4, 7)


def test_chain():
    g = OcclusionGraph(items=[0, 1, 2], edges={(0, 1): 1, (1, 2): 1}, visible_area={0: 1, 1: 5, 2: 9})
    assert recover_order(g).ids == (0, 1, 2)


def test_cycle_raises_with_cycle():
    g = OcclusionGraph(items=[0, 1, 2, 3], edges={(0, 1): 1, (1, 2): 1, (2, 0): 1, (2, 3): 1})
    with pytest.raises(CyclicOcclusionError) as info:
        recover_order(g)
    assert sorted(info.value.cycle) == [0, 1, 2]
    assert "->" in str(info.value)


@st.composite
def dags(draw):
    n = draw(st.integers(1, 8))
    perm = draw(st.permutations(range(n)))
    edges = {}
    for a in range(n):
        for b in range(a + 1, n):
            if draw(st.booleans()):
                edges[(perm[a], perm[b])] = draw(st.integers(1, 50))
    areas = {i: draw(st.integers(0, 100)) for i in range(n)}
    return OcclusionGraph(items=list(range(n)), edges=edges, visible_area=areas)


@settings(max_examples=50, deadline=None)
@given(dags())
def test_random_dag_valid_topological_order(g):
    order = recover_order(g)
    assert order.satisfies(g)
    assert recover_order(g) == order


def test_generator_z_order_recovered():
    for sc in generate_dataset(60, [1, 2, 3], seed=5):
        pred = recover_scene_order(sc)
        m = order_metrics(pred, sc.placement_order())
        assert m.exact and m.pairwise_accuracy == 1.0


def test_metrics_examples():
    assert order_metrics([1, 2, 3, 4], [1, 2, 3, 4]) == (order_metrics([1, 2, 3, 4], [1, 2, 3, 4]))
    ident = order_metrics(PlacementOrder((1, 2, 3, 4)), [1, 2, 3, 4])
    assert ident.exact and ident.pairwise_accuracy == 1.0
    rev = order_metrics([4, 3, 2, 1], [1, 2, 3, 4])
    assert not rev.exact and rev.pairwise_accuracy == 0.0
    swap = order_metrics([1, 3, 2, 4], [1, 2, 3, 4])
    assert swap.pairwise_accuracy == 5 / 6


def test_metrics_mismatch():
    with pytest.raises(OrderingError):
        order_metrics([1, 2], [1, 3])


# -- pairwise model -------------------------------------------------------


def test_pair_features_antisymmetric():
    sc = generate_synthetic_scene(3, 2)
    vis = {it.item_id: it.visible_mask for it in sc.items}
    amo = {it.item_id: it.amodal_mask for it in sc.items}
    np.testing.assert_array_equal(pair_features(vis, amo, 1, 2), -pair_features(vis, amo, 2, 1))


def test_pairwise_model_trains_to_perfect():
    x, y = pairs_from_scenes(generate_dataset(30, [1, 2, 3], seed=1))
    assert len(y) > 0 and y.mean() == 0.5
    model = train_pairwise_order_model(x, y)
    assert model.accuracy(x, y) == 1.0
    p = model.prob_on_top(x)
    np.testing.assert_allclose(p + model.prob_on_top(-x), 1.0, atol=1e-12)


def test_untrained_model_chance():
    x, y = pairs_from_scenes(generate_dataset(9, [1, 2, 3], seed=1))
    assert np.all(PairwiseOrderModel().prob_on_top(x) == 0.5)


def test_pairwise_empty_raises():
    with pytest.raises(OrderingError):
        train_pairwise_order_model(np.zeros((0, 2)), np.zeros(0))
