"""Impact detection and impact-zone construction.

An impact is one colliding primitive pair (vertex-face or edge-edge) with
barycentric weights, a contact normal, and a time of impact; weights and
normals are frozen at detection time. Impacts connected through shared
movable vertices (rigid bodies join with their whole 6-DOF block) form an
impact zone, resolved as one local optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bodies import ClothMesh, RigidBody
from .bvh import BvhTree, self_pair_candidates, swept_triangle_boxes, tree_pair_candidates
from .ccd import ccd_ee_batch, ccd_vf_batch, proximity_ee_batch, proximity_vf_batch
from .rotations import rotation_matrix, vertex_jacobians
from .scene import GeneralizedState, Scene

VF_SIGNS = np.array([-1.0, -1.0, -1.0, 1.0])
EE_SIGNS = np.array([-1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True)
class Impact:
    """One non-penetration constraint: gap(x) = sum_i s_i a_i n . x_i >= thickness."""

    kind: str                       # "VF" | "EE"
    verts: tuple                    # 4 global vertex ids; -1 marks plane anchors
    alpha: np.ndarray               # (4,) barycentric weights
    normal: np.ndarray              # (3,) unit, oriented so the pre-step gap >= 0
    toi: float
    static_offset: float            # contribution of non-DOF slots to the gap
    key: tuple = field(default=(), compare=False)

    @property
    def signs(self) -> np.ndarray:
        return VF_SIGNS if self.kind == "VF" else EE_SIGNS


def impact_gaps(scene: Scene, impacts, x: np.ndarray) -> np.ndarray:
    """Signed gap of each impact at vertex positions x (movable slots only)."""
    out = np.zeros(len(impacts))
    movable = _collision_cache(scene).movable_mask
    for k, imp in enumerate(impacts):
        g = imp.static_offset
        for slot in range(4):
            vid = imp.verts[slot]
            if vid >= 0 and movable[vid]:
                g += imp.signs[slot] * imp.alpha[slot] * float(imp.normal @ x[vid])
        out[k] = g
    return out


def end_state_gaps(scene: Scene, impacts, x: np.ndarray) -> np.ndarray:
    """True signed separations at configuration x.

    Weights frozen at a mid-step time of impact can misjudge the end state
    once the primitives moved; re-linearizing each impact at x measures the
    actual penetration (negative = crossed to the wrong side). Pairs that are
    no longer meaningful contacts report an infinite gap.
    """
    out = np.full(len(impacts), np.inf)
    live = []
    rows = []
    for k, imp in enumerate(impacts):
        r = refresh_impact(scene, imp, x)
        if r is not None:
            live.append(r)
            rows.append(k)
    if live:
        out[rows] = impact_gaps(scene, live, x)
    return out


# ---------------------------------------------------------------------------
# Scene collision cache


class _CollisionCache:
    def __init__(self, scene: Scene):
        self.scene = scene
        self.trees: dict[int, BvhTree] = {}
        self.tri_global: dict[int, np.ndarray] = {}
        self.edge_global: dict[int, np.ndarray] = {}   # (E, 2) global vids
        self.tri_edges: dict[int, np.ndarray] = {}     # (T, 3) edge row ids
        movable = np.zeros(scene.n_vertices, dtype=bool)
        for i, body in enumerate(scene.bodies):
            base = scene.vert_offsets[i]
            if isinstance(body, RigidBody):
                tris = body.faces
                movable[base:base + body.n_vertices] = not body.static
            else:
                tris = body.triangles
                movable[base:base + body.n_nodes] = True
                for nid in body.pinned:
                    movable[base + int(nid)] = False
            self.tri_global[i] = tris + base
            edges, tri_edges = _mesh_edges(tris)
            self.edge_global[i] = edges + base
            self.tri_edges[i] = tri_edges
        self.movable_mask = movable

    def tree(self, body_index: int, x0: np.ndarray, x1: np.ndarray, thickness: float) -> BvhTree:
        boxes = swept_triangle_boxes(x0, x1, self.tri_global[body_index], thickness)
        tree = self.trees.get(body_index)
        if tree is None:
            tree = BvhTree(boxes)
            self.trees[body_index] = tree
        else:
            tree.refit(boxes)
        return tree


def _mesh_edges(tris: np.ndarray):
    raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(3, -1).T
    return edges, tri_edges


def _collision_cache(scene: Scene) -> _CollisionCache:
    cache = getattr(scene, "_collision_cache", None)
    if cache is None:
        cache = _CollisionCache(scene)
        scene._collision_cache = cache
    return cache


# ---------------------------------------------------------------------------
# find_impacts


def find_impacts(scene: Scene, x0: np.ndarray, x1: np.ndarray,
                 thickness: float | None = None) -> list[Impact]:
    """CCD plus end-state proximity impacts over all body pairs and the ground.

    Pairs sharing a mesh vertex (cloth self-adjacency) are excluded; pairs
    between two DOF-free bodies are skipped.
    """
    delta = scene.thickness if thickness is None else float(thickness)
    cache = _collision_cache(scene)
    movable = cache.movable_mask
    nb = len(scene.bodies)

    has_dofs = []
    for i, body in enumerate(scene.bodies):
        base = scene.vert_offsets[i]
        n = body.n_vertices if isinstance(body, RigidBody) else body.n_nodes
        has_dofs.append(bool(movable[base:base + n].any()))

    # body-level swept boxes
    body_boxes = np.empty((nb, 6))
    for i in range(nb):
        base = scene.vert_offsets[i]
        n = scene.bodies[i].n_vertices if isinstance(scene.bodies[i], RigidBody) \
            else scene.bodies[i].n_nodes
        pts = np.concatenate([x0[base:base + n], x1[base:base + n]])
        body_boxes[i, :3] = pts.min(axis=0) - delta
        body_boxes[i, 3:] = pts.max(axis=0) + delta

    vf_cands: list[np.ndarray] = []   # rows: (f1, f2, f3, v) global vids
    ee_cands: list[np.ndarray] = []   # rows: (a0, a1, b0, b1) global vids

    def add_tri_pairs(ti: np.ndarray, tj: np.ndarray, same_body: bool):
        if not len(ti):
            return
        if same_body:
            share = np.zeros(len(ti), dtype=bool)
            for a in range(3):
                for b in range(3):
                    share |= ti[:, a] == tj[:, b]
            ti, tj = ti[~share], tj[~share]
            if not len(ti):
                return
        p = len(ti)
        for face, verts in ((ti, tj), (tj, ti)):
            block = np.empty((3 * p, 4), dtype=np.int64)
            block[:, :3] = np.repeat(face, 3, axis=0)
            block[:, 3] = verts[:, :3].reshape(-1)
            vf_cands.append(block)
        ea = np.stack([ti, np.roll(ti, -1, axis=1)], axis=2)       # (p, 3, 2)
        eb = np.stack([tj, np.roll(tj, -1, axis=1)], axis=2)
        block = np.empty((9 * p, 4), dtype=np.int64)
        block[:, :2] = np.repeat(ea, 3, axis=1).reshape(-1, 2)
        block[:, 2:] = np.tile(eb, (1, 3, 1)).reshape(-1, 2)
        ee_cands.append(block)

    for i in range(nb):
        for j in range(i, nb):
            if not (has_dofs[i] or has_dofs[j]):
                continue
            if i == j:
                if not isinstance(scene.bodies[i], ClothMesh):
                    continue
                tree = cache.tree(i, x0, x1, delta)
                prims = self_pair_candidates(tree)
                if len(prims):
                    tg = cache.tri_global[i]
                    add_tri_pairs(tg[prims[:, 0]], tg[prims[:, 1]], same_body=True)
                continue
            overlap = ((body_boxes[i, :3] <= body_boxes[j, 3:])
                       & (body_boxes[j, :3] <= body_boxes[i, 3:])).all()
            if not overlap:
                continue
            ti = cache.tree(i, x0, x1, delta)
            tj = cache.tree(j, x0, x1, delta)
            prims = tree_pair_candidates(ti, tj)
            if len(prims):
                tgi, tgj = cache.tri_global[i], cache.tri_global[j]
                add_tri_pairs(tgi[prims[:, 0]], tgj[prims[:, 1]], same_body=False)

    impacts: dict[tuple, Impact] = {}

    def consider(imp: Impact):
        prev = impacts.get(imp.key)
        if prev is None or imp.toi < prev.toi:
            impacts[imp.key] = imp

    def unique_rows(blocks):
        """Dedupe (N, 4) int rows via packed 64-bit keys (vids fit in 16 bits)."""
        rows = np.concatenate(blocks)
        keys = (((rows[:, 0] << 16 | rows[:, 1]) << 16 | rows[:, 2]) << 16) | rows[:, 3]
        _, first = np.unique(keys, return_index=True)
        return rows[first]

    # --- vertex-face ---
    if vf_cands:
        quads = unique_rows(vf_cands)
        # drop candidates where the lone vertex sits in the face (can only
        # happen through degenerate meshes) and fully static quadruples
        ok = (quads[:, 3:4] != quads[:, :3]).all(axis=1)
        ok &= movable[quads].any(axis=1)
        quads = quads[ok]
        if len(quads):
            p0 = x0[quads]
            p1 = x1[quads]
            for hits in (ccd_vf_batch(p0, p1, delta), proximity_vf_batch(p1, delta)):
                for n_, al, t_, row in zip(hits.normal, hits.alpha, hits.toi,
                                           quads[hits.index]):
                    imp = _make_impact(scene, "VF", tuple(int(v) for v in row),
                                       al, n_, float(t_), x1, x0=x0, thickness=delta)
                    if imp is not None:
                        consider(imp)

    # --- edge-edge ---
    if ee_cands:
        raw = np.concatenate(ee_cands)
        ea = np.sort(raw[:, :2], axis=1)
        eb = np.sort(raw[:, 2:], axis=1)
        flip = (eb[:, 0] < ea[:, 0]) | ((eb[:, 0] == ea[:, 0]) & (eb[:, 1] < ea[:, 1]))
        lo = np.where(flip[:, None], eb, ea)
        hi = np.where(flip[:, None], ea, eb)
        quads = unique_rows([np.concatenate([lo, hi], axis=1)])
        share = ((quads[:, 0:1] == quads[:, 2:]) | (quads[:, 1:2] == quads[:, 2:])).any(axis=1)
        quads = quads[~share & movable[quads].any(axis=1)]
        if len(quads):
            p0 = x0[quads]
            p1 = x1[quads]
            for hits in (ccd_ee_batch(p0, p1, delta), proximity_ee_batch(p1, delta)):
                for n_, al, t_, row in zip(hits.normal, hits.alpha, hits.toi,
                                           quads[hits.index]):
                    imp = _make_impact(scene, "EE", tuple(int(v) for v in row),
                                       al, n_, float(t_), x1, x0=x0, thickness=delta)
                    if imp is not None:
                        consider(imp)

    # --- ground plane ---
    if scene.ground is not None:
        n = scene.ground.normal
        off = scene.ground.offset
        vids = np.where(movable)[0]
        g0 = x0[vids] @ n - off
        g1 = x1[vids] @ n - off
        crossing = (g0 >= 0.0) & (g1 < 0.0)
        near = g1 < delta
        hit = crossing | near
        for vid, gg0, gg1 in zip(vids[hit], g0[hit], g1[hit]):
            tau = 1.0 if gg1 >= 0.0 else float(np.clip(gg0 / max(gg0 - gg1, 1e-300), 0.0, 1.0))
            imp = Impact(kind="VF", verts=(-1, -1, -1, int(vid)),
                         alpha=np.array([1 / 3, 1 / 3, 1 / 3, 1.0]),
                         normal=n.copy(), toi=tau, static_offset=-off,
                         key=("PL", int(vid)))
            consider(imp)

    return [impacts[k] for k in sorted(impacts.keys())]


def refresh_impact(scene: Scene, imp: Impact, x1: np.ndarray) -> Impact | None:
    """Re-linearize a stale impact at the current configuration.

    Recomputes barycentric weights from closest points and re-orients the
    normal with sign continuity, so constraints accumulated across fail-safe
    iterations stay geometrically consistent with the shapes they constrain.
    Returns None when the pair no longer is a meaningful contact (edge-edge
    closest points left the interior: those regions belong to vertex-face).
    """
    from .ccd import EE_PROXIMITY_INTERIOR, closest_point_triangle, closest_segment_segment

    if any(v < 0 for v in imp.verts):
        return imp  # plane contacts carry constant geometry
    x = x1[list(imp.verts)]
    if imp.kind == "VF":
        _, bary = closest_point_triangle(x[3][None], x[0][None], x[1][None], x[2][None])
        n = np.cross(x[1] - x[0], x[2] - x[0])
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            return imp
        n = n / nn
        if n @ imp.normal < 0.0:
            n = -n
        alpha = np.array([bary[0, 0], bary[0, 1], bary[0, 2], 1.0])
    else:
        s, u = closest_segment_segment(x[0][None], x[1][None], x[2][None], x[3][None])
        lo, hi = EE_PROXIMITY_INTERIOR, 1.0 - EE_PROXIMITY_INTERIOR
        if not (lo <= s[0] <= hi and lo <= u[0] <= hi):
            return None
        pa = x[0] + s[0] * (x[1] - x[0])
        pb = x[2] + u[0] * (x[3] - x[2])
        off = pb - pa
        dist = np.linalg.norm(off)
        if dist > 1e-9:
            n = off / dist          # true separation direction of the pair
        else:
            n = np.cross(x[1] - x[0], x[3] - x[2])
            nn = np.linalg.norm(n)
            if nn < 1e-12:
                return imp
            n = n / nn
        if n @ imp.normal < 0.0:
            n = -n
        alpha = np.array([1.0 - s[0], s[0], 1.0 - u[0], u[0]])
    return _make_impact(scene, imp.kind, imp.verts, alpha, n, imp.toi, x1)


def _make_impact(scene: Scene, kind: str, verts: tuple, alpha, normal, toi,
                 x1: np.ndarray, x0: np.ndarray | None = None,
                 thickness: float | None = None) -> Impact | None:
    movable = _collision_cache(scene).movable_mask
    signs = VF_SIGNS if kind == "VF" else EE_SIGNS
    alpha = np.asarray(alpha, dtype=float)
    normal = np.asarray(normal, dtype=float)
    static_offset = 0.0
    for slot in range(4):
        vid = verts[slot]
        if vid >= 0 and not movable[vid]:
            static_offset += signs[slot] * alpha[slot] * float(normal @ x1[vid])
    if kind == "VF":
        key = ("VF", verts[3], tuple(sorted(verts[:3])))
    else:
        key = ("EE", tuple(sorted(verts[:2])), tuple(sorted(verts[2:])))
    imp = Impact(kind=kind, verts=verts, alpha=alpha, normal=normal, toi=float(toi),
                 static_offset=float(static_offset), key=key)
    if x0 is not None and thickness is not None:
        # tangential flush sliding: the pair hugs the surface the whole step
        # (both endpoint gaps within noise of zero). Its contact side is
        # arbitrary and a margin demand on it wedges the zone; not a contact.
        flush_band = 0.05 * thickness
        g0 = _frozen_gap(imp, movable, x0)
        g1 = _frozen_gap(imp, movable, x1)
        if abs(g0) < flush_band and abs(g1) < flush_band:
            return None
    return imp


def _frozen_gap(imp: Impact, movable, x: np.ndarray) -> float:
    g = imp.static_offset
    for slot in range(4):
        vid = imp.verts[slot]
        if vid >= 0 and movable[vid]:
            g += imp.signs[slot] * imp.alpha[slot] * float(imp.normal @ x[vid])
    return g


# ---------------------------------------------------------------------------
# Impact zones


@dataclass
class ZoneBlock:
    """One optimization block of a zone: a rigid body or a single cloth node."""

    kind: str                     # "rigid" | "node"
    body_index: int
    zone_dof: slice
    global_dof: np.ndarray        # global coordinate indices (len 6 or 3)
    vert_rows: np.ndarray         # contact-vertex rows owned by this block
    p_rest: np.ndarray | None = None    # (k, 3) body-frame rest vertices
    p_tilde: np.ndarray | None = None   # (k, 3) reference-rotated rest vertices
    rot_ref: np.ndarray | None = None   # accumulated rotation at assembly time


@dataclass
class ImpactZone:
    """A connected set of impacts with its frozen linear constraint data.

    Constraints read G f(z) + h <= 0 where f maps zone coordinates to the
    stacked positions of the zone's movable contact vertices.
    """

    impacts: list[Impact]
    blocks: list[ZoneBlock]
    vert_ids: np.ndarray          # (k,) global vids of movable contact vertices
    G: np.ndarray                 # (m, 3k)
    h: np.ndarray                 # (m,)
    n_dof: int

    @property
    def dof_ranges(self) -> list[np.ndarray]:
        return [blk.global_dof for blk in self.blocks]

    @property
    def global_index(self) -> np.ndarray:
        return np.concatenate([blk.global_dof for blk in self.blocks])

    def vertex_positions(self, z: np.ndarray) -> np.ndarray:
        """(3k,) stacked world positions of the contact vertices at zone coords z."""
        out = np.empty((len(self.vert_ids), 3))
        for blk in self.blocks:
            zb = z[blk.zone_dof]
            if blk.kind == "node":
                out[blk.vert_rows[0]] = zb
            else:
                r = rotation_matrix(zb[:3])
                out[blk.vert_rows] = blk.p_tilde @ r.T + zb[3:]
        return out.reshape(-1)

    def vertex_jacobian(self, z: np.ndarray) -> np.ndarray:
        """(3k, n) Jacobian of vertex_positions; identity blocks for cloth nodes."""
        k = len(self.vert_ids)
        jac = np.zeros((3 * k, self.n_dof))
        for blk in self.blocks:
            if blk.kind == "node":
                r = blk.vert_rows[0]
                jac[3 * r:3 * r + 3, blk.zone_dof] = np.eye(3)
            else:
                jb = vertex_jacobians(z[blk.zone_dof], blk.p_tilde)
                for row, jv in zip(blk.vert_rows, jb):
                    jac[3 * row:3 * row + 3, blk.zone_dof] = jv
        return jac

    def constraint_values(self, z: np.ndarray) -> np.ndarray:
        return self.G @ self.vertex_positions(z) + self.h


def build_zones(scene: Scene, state: GeneralizedState, impacts: list[Impact],
                thickness: float | None = None) -> list[ImpactZone]:
    """Group impacts into connected components and assemble constraint data.

    Any impact touching a rigid body joins that body's entire 6-DOF block;
    distinct zones share no movable vertices.
    """
    delta = scene.thickness if thickness is None else float(thickness)
    movable = _collision_cache(scene).movable_mask
    parent: dict = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    def node_of(vid: int):
        body = scene.body_of_vertex(vid)
        if isinstance(scene.bodies[body], RigidBody):
            return ("B", body)
        return ("V", vid)

    per_impact_nodes = []
    for imp in impacts:
        nodes = []
        for slot in range(4):
            vid = imp.verts[slot]
            if vid >= 0 and movable[vid]:
                nodes.append(node_of(vid))
        nodes = sorted(set(nodes))
        per_impact_nodes.append(nodes)
        for nd in nodes:
            parent.setdefault(nd, nd)
        for a, b in zip(nodes, nodes[1:]):
            union(a, b)

    groups: dict = {}
    for imp, nodes in zip(impacts, per_impact_nodes):
        if not nodes:
            continue  # nothing movable to resolve
        root = find(nodes[0])
        groups.setdefault(root, []).append(imp)

    zones = []
    for root in sorted(groups.keys()):
        zone_impacts = groups[root]
        zones.append(_assemble_zone(scene, state, zone_impacts, delta, movable))
    zones.sort(key=lambda z: int(z.vert_ids.min()))
    return zones


def _assemble_zone(scene, state, zone_impacts, delta, movable) -> ImpactZone:
    vids = sorted({int(v) for imp in zone_impacts for v in imp.verts
                   if v >= 0 and movable[v]})
    vid_row = {v: r for r, v in enumerate(vids)}

    rigid_bodies = sorted({scene.body_of_vertex(v) for v in vids
                           if isinstance(scene.bodies[scene.body_of_vertex(v)], RigidBody)})
    cloth_vids = [v for v in vids
                  if isinstance(scene.bodies[scene.body_of_vertex(v)], ClothMesh)]

    blocks = []
    offset = 0
    for bi in rigid_bodies:
        body = scene.bodies[bi]
        rows = np.array([vid_row[v] for v in vids if scene.body_of_vertex(v) == bi], dtype=int)
        locals_ = np.array([scene.local_vertex(v) for v in vids
                            if scene.body_of_vertex(v) == bi], dtype=int)
        ref = scene.rot_ref_of(state, bi)
        p_rest = body.rest_vertices[locals_]
        s = scene.dof_slices[bi]
        blocks.append(ZoneBlock(kind="rigid", body_index=bi,
                                zone_dof=slice(offset, offset + 6),
                                global_dof=np.arange(s.start, s.stop),
                                vert_rows=rows, p_rest=p_rest, p_tilde=p_rest @ ref.T,
                                rot_ref=ref.copy()))
        offset += 6
    for v in cloth_vids:
        bi = scene.body_of_vertex(v)
        nid = scene.local_vertex(v)
        s = scene.dof_slices[bi]
        gd = np.arange(s.start + 3 * nid, s.start + 3 * nid + 3)
        blocks.append(ZoneBlock(kind="node", body_index=bi,
                                zone_dof=slice(offset, offset + 3),
                                global_dof=gd, vert_rows=np.array([vid_row[v]], dtype=int)))
        offset += 3

    m = len(zone_impacts)
    g_mat = np.zeros((m, 3 * len(vids)))
    h_vec = np.zeros(m)
    for r, imp in enumerate(zone_impacts):
        h_vec[r] = delta - imp.static_offset
        for slot in range(4):
            vid = imp.verts[slot]
            if vid >= 0 and movable[vid]:
                col = vid_row[vid]
                g_mat[r, 3 * col:3 * col + 3] += -imp.signs[slot] * imp.alpha[slot] * imp.normal

    return ImpactZone(impacts=list(zone_impacts), blocks=blocks,
                      vert_ids=np.array(vids, dtype=int), G=g_mat, h=h_vec, n_dof=offset)
