"""Axis-aligned bounding volume hierarchy over swept, thickness-inflated primitives.

Trees are built once per mesh (median split on the longest axis of box
centroids) and refit per query when only positions changed; refitting keeps
the containment invariant, so broad-phase results remain a superset of the
exact overlapping set.
"""

from __future__ import annotations

import numpy as np

LEAF_SIZE = 4


def swept_triangle_boxes(x0: np.ndarray, x1: np.ndarray, tris: np.ndarray,
                         thickness: float) -> np.ndarray:
    """(T, 6) [min, max] boxes covering both endpoint configurations, inflated."""
    p0 = x0[tris]                      # (T, 3, 3)
    p1 = x1[tris]
    pts = np.concatenate([p0, p1], axis=1)
    lo = pts.min(axis=1) - thickness
    hi = pts.max(axis=1) + thickness
    return np.concatenate([lo, hi], axis=1)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise overlap test for (N, 6) box arrays."""
    return ((a[:, :3] <= b[:, 3:]) & (b[:, :3] <= a[:, 3:])).all(axis=1)


class BvhTree:
    """Binary tree with bucketed leaves; topology fixed, boxes refit per query."""

    def __init__(self, boxes: np.ndarray, leaf_size: int = LEAF_SIZE):
        n = len(boxes)
        if n == 0:
            raise ValueError("empty primitive set")
        self.n_prims = n
        self.leaf_size = leaf_size
        centroids = 0.5 * (boxes[:, :3] + boxes[:, 3:])
        order = np.arange(n)
        nodes = []  # (start, count, left, right) with count > 0 for leaves

        def build(start, end):
            idx = len(nodes)
            nodes.append([start, end - start, -1, -1])
            if end - start <= leaf_size:
                return idx
            seg = order[start:end]
            c = centroids[seg]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            key = np.argsort(c[:, axis], kind="stable")
            order[start:end] = seg[key]
            mid = start + (end - start) // 2
            nodes[idx][1] = 0
            nodes[idx][2] = build(start, mid)
            nodes[idx][3] = build(mid, end)
            return idx

        import sys
        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 4 * n + 100))
        try:
            build(0, n)
        finally:
            sys.setrecursionlimit(old_limit)

        arr = np.array(nodes, dtype=int)
        self.start, self.count, self.left, self.right = arr.T.copy()
        self.order = order
        self.node_min = np.zeros((len(nodes), 3))
        self.node_max = np.zeros((len(nodes), 3))
        self.refit(boxes)

    def refit(self, boxes: np.ndarray) -> None:
        """Recompute node boxes bottom-up; children were created after parents."""
        self.prim_boxes = boxes
        for i in range(len(self.start) - 1, -1, -1):
            if self.count[i] > 0:
                seg = self.order[self.start[i]:self.start[i] + self.count[i]]
                self.node_min[i] = boxes[seg, :3].min(axis=0)
                self.node_max[i] = boxes[seg, 3:].max(axis=0)
            else:
                l, r = self.left[i], self.right[i]
                self.node_min[i] = np.minimum(self.node_min[l], self.node_min[r])
                self.node_max[i] = np.maximum(self.node_max[l], self.node_max[r])

    def leaf_prims(self, i: int) -> np.ndarray:
        return self.order[self.start[i]:self.start[i] + self.count[i]]

    @property
    def root_box(self) -> np.ndarray:
        return np.concatenate([self.node_min[0], self.node_max[0]])


def _node_overlap(tree_a, a, tree_b, b) -> np.ndarray:
    return ((tree_a.node_min[a] <= tree_b.node_max[b]).all(axis=1)
            & (tree_b.node_min[b] <= tree_a.node_max[a]).all(axis=1))


def tree_pair_candidates(tree_a: BvhTree, tree_b: BvhTree) -> np.ndarray:
    """(P, 2) primitive index pairs whose boxes overlap between two trees."""
    pairs: list[np.ndarray] = []
    frontier = np.array([[0, 0]], dtype=int)
    while len(frontier):
        a, b = frontier[:, 0], frontier[:, 1]
        keep = _node_overlap(tree_a, a, tree_b, b)
        a, b = a[keep], b[keep]
        if not len(a):
            break
        leaf_a = tree_a.count[a] > 0
        leaf_b = tree_b.count[b] > 0
        both = leaf_a & leaf_b
        for ia, ib in zip(a[both], b[both]):
            pa = tree_a.leaf_prims(ia)
            pb = tree_b.leaf_prims(ib)
            grid = np.empty((len(pa) * len(pb), 2), dtype=int)
            grid[:, 0] = np.repeat(pa, len(pb))
            grid[:, 1] = np.tile(pb, len(pa))
            pairs.append(grid)
        nxt = []
        # descend A when A is internal; otherwise descend B
        ia = a[~both & ~leaf_a]
        ib = b[~both & ~leaf_a]
        if len(ia):
            nxt.append(np.column_stack([tree_a.left[ia], ib]))
            nxt.append(np.column_stack([tree_a.right[ia], ib]))
        ia = a[~both & leaf_a]
        ib = b[~both & leaf_a]
        if len(ia):
            nxt.append(np.column_stack([ia, tree_b.left[ib]]))
            nxt.append(np.column_stack([ia, tree_b.right[ib]]))
        frontier = np.concatenate(nxt) if nxt else np.zeros((0, 2), dtype=int)
    if not pairs:
        return np.zeros((0, 2), dtype=int)
    return np.unique(np.concatenate(pairs), axis=0)


def self_pair_candidates(tree: BvhTree) -> np.ndarray:
    """(P, 2) primitive pairs (i < j) with overlapping boxes within one tree."""
    pairs: list[np.ndarray] = []
    frontier = np.array([[0, 0]], dtype=int)
    while len(frontier):
        a, b = frontier[:, 0], frontier[:, 1]
        same = a == b
        diff = ~same
        keep = np.zeros(len(a), dtype=bool)
        keep[same] = True
        keep[diff] = _node_overlap(tree, a[diff], tree, b[diff])
        a, b = a[keep], b[keep]
        if not len(a):
            break
        nxt = []
        for ia, ib in zip(a, b):
            la, lb = tree.count[ia] > 0, tree.count[ib] > 0
            if ia == ib:
                if la:
                    prims = tree.leaf_prims(ia)
                    if len(prims) > 1:
                        ii, jj = np.triu_indices(len(prims), k=1)
                        pairs.append(np.column_stack([prims[ii], prims[jj]]))
                else:
                    l, r = tree.left[ia], tree.right[ia]
                    nxt.extend([[l, l], [l, r], [r, r]])
            elif la and lb:
                pa, pb = tree.leaf_prims(ia), tree.leaf_prims(ib)
                grid = np.stack(np.meshgrid(pa, pb, indexing="ij"), axis=-1).reshape(-1, 2)
                pairs.append(grid)
            elif la:
                nxt.extend([[ia, tree.left[ib]], [ia, tree.right[ib]]])
            else:
                nxt.extend([[tree.left[ia], ib], [tree.right[ia], ib]])
        frontier = np.array(nxt, dtype=int) if nxt else np.zeros((0, 2), dtype=int)
    if not pairs:
        return np.zeros((0, 2), dtype=int)
    allp = np.concatenate(pairs)
    allp = np.sort(allp, axis=1)
    allp = allp[allp[:, 0] != allp[:, 1]]
    return np.unique(allp, axis=0)


def build_bvh(x0: np.ndarray, x1: np.ndarray, tris: np.ndarray, thickness: float) -> BvhTree:
    """Tree over swept, inflated triangle boxes of one mesh."""
    return BvhTree(swept_triangle_boxes(x0, x1, tris, thickness))
