"""Placement-order recovery from per-item masks.

An edge ``i -> j`` in the occlusion graph means ``j`` covers part of ``i``
and therefore went down after it. Any topological order of the graph is a
consistent placement order; ties are broken by larger visible area first,
then smaller item id, which puts base dishes like rice at the bottom.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

if TYPE_CHECKING:
    from .dataset import Scene


class CyclicOcclusionError(ValueError):
    def __init__(self, cycle: Sequence[int]):
        self.cycle = list(cycle)
        super().__init__("cyclic occlusion: " + " -> ".join(map(str, self.cycle + self.cycle[:1])))


class OrderingError(ValueError):
    pass


@dataclass
class OcclusionGraph:
    items: list[int]
    edges: dict[tuple[int, int], int] = field(default_factory=dict)  # (under, over) -> overlap px
    visible_area: dict[int, int] = field(default_factory=dict)

    def successors(self, i: int) -> list[int]:
        return [b for (a, b) in self.edges if a == i]


@dataclass(frozen=True)
class PlacementOrder:
    ids: tuple[int, ...]

    def __iter__(self):
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def position(self) -> dict[int, int]:
        return {i: k for k, i in enumerate(self.ids)}

    def satisfies(self, graph: OcclusionGraph) -> bool:
        pos = self.position()
        return sorted(self.ids) == sorted(graph.items) and all(pos[a] < pos[b] for a, b in graph.edges)


def build_occlusion_graph(scene: "Scene") -> OcclusionGraph:
    for it in scene.items:
        if np.any(it.visible_mask & ~it.amodal_mask):
            from .dataset import AnnotationError

            raise AnnotationError(f"item {it.item_id}: visible mask is not a subset of the amodal mask")
    return occlusion_graph_from_masks(
        {it.item_id: it.visible_mask for it in scene.items},
        {it.item_id: it.amodal_mask for it in scene.items},
    )


def occlusion_graph_from_masks(visible: dict[int, np.ndarray], amodal: dict[int, np.ndarray]) -> OcclusionGraph:
    ids = sorted(amodal)
    graph = OcclusionGraph(items=ids, visible_area={i: int(visible[i].sum()) for i in ids})
    for a_pos, i in enumerate(ids):
        for j in ids[a_pos + 1 :]:
            overlap = amodal[i] & amodal[j]
            if not overlap.any():
                continue
            vis_i = int((overlap & visible[i]).sum())
            vis_j = int((overlap & visible[j]).sum())
            # clean masks give one side zero; noisy ones fall back to the majority
            if vis_j > vis_i:
                graph.edges[(i, j)] = vis_j
            elif vis_i > vis_j:
                graph.edges[(j, i)] = vis_i
    return graph


def _find_cycle(items: Iterable[int], edges: Iterable[tuple[int, int]]) -> list[int]:
    adj: dict[int, list[int]] = {i: [] for i in items}
    for a, b in edges:
        adj[a].append(b)
    color = {i: 0 for i in adj}
    stack_path: list[int] = []

    def visit(u: int) -> list[int] | None:
        color[u] = 1
        stack_path.append(u)
        for v in sorted(adj[u]):
            if color[v] == 1:
                return stack_path[stack_path.index(v) :]
            if color[v] == 0:
                found = visit(v)
                if found:
                    return found
        stack_path.pop()
        color[u] = 2
        return None

    for i in sorted(adj):
        if color[i] == 0:
            found = visit(i)
            if found:
                return found
    return []


def recover_order(graph: OcclusionGraph) -> PlacementOrder:
    """Kahn's algorithm with the (visible area desc, id asc) tie-break."""
    indeg = {i: 0 for i in graph.items}
    for _, b in graph.edges:
        indeg[b] += 1
    heap = [(-graph.visible_area.get(i, 0), i) for i in graph.items if indeg[i] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, i = heapq.heappop(heap)
        out.append(i)
        for j in sorted(graph.successors(i)):
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, (-graph.visible_area.get(j, 0), j))
    if len(out) != len(graph.items):
        raise CyclicOcclusionError(_find_cycle(graph.items, graph.edges))
    return PlacementOrder(tuple(out))


def recover_scene_order(scene: "Scene") -> PlacementOrder:
    return recover_order(build_occlusion_graph(scene))


@dataclass(frozen=True)
class OrderMetrics:
    exact: bool
    pairwise_accuracy: float


def order_metrics(pred: PlacementOrder | Sequence[int], truth: PlacementOrder | Sequence[int]) -> OrderMetrics:
    p, t = list(pred), list(truth)
    if sorted(p) != sorted(t) or len(set(p)) != len(p):
        raise OrderingError(f"orders cover different items: {p} vs {t}")
    if len(t) < 2:
        return OrderMetrics(p == t, 1.0)
    pos = {i: k for k, i in enumerate(p)}
    pairs = agree = 0
    for a in range(len(t)):
        for b in range(a + 1, len(t)):
            pairs += 1
            agree += pos[t[a]] < pos[t[b]]
    return OrderMetrics(p == t, agree / pairs)


# ---------------------------------------------------------------------------
# learned pairwise classifier


def pair_features(visible: dict[int, np.ndarray], amodal: dict[int, np.ndarray], i: int, j: int) -> np.ndarray:
    """Antisymmetric features for "is i on top of j": f(i, j) == -f(j, i)."""
    overlap = amodal[i] & amodal[j]
    n = max(1, int(overlap.sum()))
    frac_i = (overlap & visible[i]).sum() / n
    frac_j = (overlap & visible[j]).sum() / n
    area_i, area_j = amodal[i].sum(), amodal[j].sum()
    rel = (area_i - area_j) / max(1, area_i + area_j)
    return np.array([frac_i - frac_j, rel], dtype=np.float64)


@dataclass
class PairwiseOrderModel:
    """Logistic model without bias, so p(i over j) = 1 - p(j over i)."""

    weights: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def prob_on_top(self, features: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-(np.atleast_2d(features) @ self.weights)))

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        pred = self.prob_on_top(features) > 0.5
        return float(np.mean(pred == (np.asarray(labels) > 0.5)))


def pairs_from_scenes(scenes: Sequence["Scene"]) -> tuple[np.ndarray, np.ndarray]:
    """Both orientations of every overlapping item pair, labelled by z."""
    feats, labels = [], []
    for sc in scenes:
        vis = {it.item_id: it.visible_mask for it in sc.items}
        amo = {it.item_id: it.amodal_mask for it in sc.items}
        z = {it.item_id: it.z for it in sc.items}
        ids = sorted(vis)
        for a, i in enumerate(ids):
            for j in ids[a + 1 :]:
                if not (amo[i] & amo[j]).any():
                    continue
                for x, y in ((i, j), (j, i)):
                    feats.append(pair_features(vis, amo, x, y))
                    labels.append(1.0 if z[x] > z[y] else 0.0)
    return np.array(feats).reshape(-1, 2), np.array(labels)


def train_pairwise_order_model(features: np.ndarray, labels: np.ndarray, steps: int = 300, lr: float = 0.1) -> PairwiseOrderModel:
    """Binary cross-entropy fit with Adam."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.size == 0 or len(labels) == 0:
        raise OrderingError("cannot train the pairwise order model on an empty dataset")
    w = Tensor(np.zeros((features.shape[1], 1)), requires_grad=True)
    opt = Adam([w], lr=lr, betas=(0.9, 0.999))
    x, y = Tensor(features), Tensor(labels[:, None])
    for _ in range(steps):
        p = T.clip(T.sigmoid(T.matmul(x, w)), 1e-7, 1 - 1e-7)
        loss = -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p)).mean()
        loss.backward()
        opt.step()
    return PairwiseOrderModel(w.data[:, 0].copy())
