"""Continuous collision detection for vertex-face and edge-edge pairs.

Motion is linear over the step. Coplanarity times are roots of a cubic in
tau; roots are found analytically, polished with Newton steps, and validated
by projecting onto the primitive at the root. End-of-step proximity tests
catch approaches that never become coplanar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROOT_BAND = 1e-10          # accepted root interval is [-ROOT_BAND, 1 + ROOT_BAND]
BARY_TOL = 1e-3            # acceptance band on face barycentrics (clamped after);
                           # exact corner crossings must register on at least one
                           # incident triangle despite roundoff
EE_INTERIOR = 1e-6         # edge-edge crossings must be interior; endpoint cases
                           # are vertex-face contacts and are handled there
EE_PROXIMITY_INTERIOR = 0.02   # proximity pairs additionally need clearly
                               # interior closest points (corners belong to VF)
DEGENERATE_AREA = 1e-14


# ---------------------------------------------------------------------------
# Cubic solver (vectorized)


def coplanarity_cubic(p0, pv, q0, qv, r0, rv):
    """Coefficients of det [p(t), q(t), r(t)] = p . (q x r) as a cubic in t.

    Inputs are (B, 3) base points and velocities of three relative vectors.
    Returns ((B, 4) coefficients [a0, a1, a2, a3], (B,) reference volume).
    """
    c00 = np.cross(q0, r0)
    c01 = np.cross(q0, rv) + np.cross(qv, r0)
    c11 = np.cross(qv, rv)
    a0 = np.einsum("ij,ij->i", p0, c00)
    a1 = np.einsum("ij,ij->i", pv, c00) + np.einsum("ij,ij->i", p0, c01)
    a2 = np.einsum("ij,ij->i", pv, c01) + np.einsum("ij,ij->i", p0, c11)
    a3 = np.einsum("ij,ij->i", pv, c11)
    length = np.zeros(len(p0))
    for v in (p0, pv, q0, qv, r0, rv):
        length = np.maximum(length, np.linalg.norm(v, axis=1))
    return np.column_stack([a0, a1, a2, a3]), length ** 3


def cubic_roots_in_step(coeffs: np.ndarray, scale_ref=None) -> np.ndarray:
    """Real roots in [-ROOT_BAND, 1 + ROOT_BAND], ascending, NaN-padded (B, 3).

    Analytic depressed-cubic solve with a Newton polish on the original
    polynomial; near-degenerate leading coefficients fall back to the
    quadratic / linear cases. Rows whose whole polynomial is negligible
    against the geometric reference volume scale_ref are identically
    coplanar configurations (tangential sliding), not crossings.
    """
    b = len(coeffs)
    roots = np.full((b, 3), np.nan)
    if b == 0:
        return roots
    scale = np.abs(coeffs).max(axis=1)
    ok = scale > 0.0
    if scale_ref is not None:
        ok &= scale > 1e-10 * np.asarray(scale_ref)
    c = coeffs.copy()
    c[ok] /= scale[ok, None]
    c[~ok] = 0.0
    a0, a1, a2, a3 = c.T

    cubic = np.abs(a3) > 1e-12
    quad = ~cubic & (np.abs(a2) > 1e-12)
    lin = ~cubic & ~quad & (np.abs(a1) > 1e-12)

    if cubic.any():
        idx = np.where(cubic)[0]
        b3, b2, b1, b0 = a3[idx], a2[idx], a1[idx], a0[idx]
        # depressed form t^3 + p t + q with tau = t - b2 / (3 b3)
        shift = b2 / (3.0 * b3)
        p = (3.0 * b3 * b1 - b2 * b2) / (3.0 * b3 * b3)
        q = (2.0 * b2 ** 3 - 9.0 * b3 * b2 * b1 + 27.0 * b3 * b3 * b0) / (27.0 * b3 ** 3)
        disc = -4.0 * p ** 3 - 27.0 * q * q
        three = disc >= 0.0
        if three.any():
            pp = np.minimum(p[three], -1e-300)
            m = 2.0 * np.sqrt(-pp / 3.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                arg = np.clip(3.0 * q[three] / (pp * m), -1.0, 1.0)
            ang = np.arccos(arg) / 3.0
            for k in range(3):
                roots[idx[three], k] = m * np.cos(ang - 2.0 * np.pi * k / 3.0) - shift[three]
        one = ~three
        if one.any():
            qq, pp = q[one], p[one]
            with np.errstate(invalid="ignore"):
                s = np.sqrt(np.maximum(qq * qq / 4.0 + pp ** 3 / 27.0, 0.0))
            roots[idx[one], 0] = np.cbrt(-qq / 2.0 + s) + np.cbrt(-qq / 2.0 - s) - shift[one]

    if quad.any():
        idx = np.where(quad)[0]
        disc = a1[idx] ** 2 - 4.0 * a2[idx] * a0[idx]
        pos = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        roots[idx[pos], 0] = (-a1[idx][pos] - sq[pos]) / (2.0 * a2[idx][pos])
        roots[idx[pos], 1] = (-a1[idx][pos] + sq[pos]) / (2.0 * a2[idx][pos])

    if lin.any():
        idx = np.where(lin)[0]
        roots[idx, 0] = -a0[idx] / a1[idx]

    # Newton polish against the unnormalized cubic.
    for _ in range(2):
        t = roots
        with np.errstate(invalid="ignore"):
            f = ((coeffs[:, 3, None] * t + coeffs[:, 2, None]) * t + coeffs[:, 1, None]) * t \
                + coeffs[:, 0, None]
            fp = (3.0 * coeffs[:, 3, None] * t + 2.0 * coeffs[:, 2, None]) * t + coeffs[:, 1, None]
            step = np.where(np.abs(fp) > 1e-30, f / np.where(fp == 0.0, 1.0, fp), 0.0)
            roots = t - np.where(np.abs(step) < 0.1, step, 0.0)

    with np.errstate(invalid="ignore"):
        inside = (roots >= -ROOT_BAND) & (roots <= 1.0 + ROOT_BAND)
    roots = np.where(inside, np.clip(roots, 0.0, 1.0), np.nan)
    roots = np.sort(roots, axis=1)
    return roots


# ---------------------------------------------------------------------------
# Primitive geometry helpers (vectorized)


def triangle_barycentrics(p, a, b, c):
    """Least-squares barycentrics of p in triangle (a, b, c); (B, 3)."""
    e1 = b - a
    e2 = c - a
    d = p - a
    d11 = np.einsum("ij,ij->i", e1, e1)
    d12 = np.einsum("ij,ij->i", e1, e2)
    d22 = np.einsum("ij,ij->i", e2, e2)
    r1 = np.einsum("ij,ij->i", d, e1)
    r2 = np.einsum("ij,ij->i", d, e2)
    det = d11 * d22 - d12 * d12
    det = np.where(np.abs(det) < 1e-300, 1.0, det)
    v = (d22 * r1 - d12 * r2) / det
    w = (d11 * r2 - d12 * r1) / det
    return np.column_stack([1.0 - v - w, v, w])


def closest_point_triangle(p, a, b, c):
    """Closest point on triangle and clamped barycentrics (vectorized Ericson)."""
    bary = triangle_barycentrics(p, a, b, c)
    bary = np.clip(bary, 0.0, None)
    s = bary.sum(axis=1, keepdims=True)
    bary = bary / s
    # exact region handling: clamp each edge candidate and keep the closest point
    cands = [bary]
    for (i, j), (pa, pb) in (((0, 1), (a, b)), ((1, 2), (b, c)), ((0, 2), (a, c))):
        seg = pb - pa
        t = np.einsum("ij,ij->i", p - pa, seg) / np.maximum(
            np.einsum("ij,ij->i", seg, seg), 1e-300)
        t = np.clip(t, 0.0, 1.0)
        bb = np.zeros_like(bary)
        bb[:, i] = 1.0 - t
        bb[:, j] = t
        cands.append(bb)
    best = None
    best_d = None
    for bb in cands:
        q = bb[:, 0, None] * a + bb[:, 1, None] * b + bb[:, 2, None] * c
        d = np.einsum("ij,ij->i", p - q, p - q)
        if best is None:
            best, best_d = bb, d
        else:
            take = d < best_d - 1e-300
            best = np.where(take[:, None], bb, best)
            best_d = np.minimum(best_d, d)
    q = best[:, 0, None] * a + best[:, 1, None] * b + best[:, 2, None] * c
    return q, best


def closest_segment_segment(p1, q1, p2, q2):
    """Closest-point parameters (s, t) between segments [p1, q1] and [p2, q2]."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b
    s = np.where(denom > 1e-300, np.clip((b * f - c * e) / np.where(denom <= 1e-300, 1.0, denom),
                                         0.0, 1.0), 0.0)
    t = np.where(e > 1e-300, (b * s + f) / np.where(e <= 1e-300, 1.0, e), 0.0)
    t_cl = np.clip(t, 0.0, 1.0)
    recompute = t != t_cl
    s = np.where(recompute, np.clip(np.where(a > 1e-300, (b * t_cl - c) / np.where(
        a <= 1e-300, 1.0, a), 0.0), 0.0, 1.0), s)
    return s, t_cl


# ---------------------------------------------------------------------------
# Batched narrow-phase kernels


@dataclass
class NarrowPhaseHits:
    """Accepted contacts from one batched narrow-phase call."""

    index: np.ndarray      # (H,) indices into the candidate batch
    toi: np.ndarray        # (H,)
    alpha: np.ndarray      # (H, 4) barycentric weights per slot
    normal: np.ndarray     # (H, 3) oriented so the gap is non-negative pre-step


def _orient_normals(n, gap0, gap_rate, tie=1e-12):
    """Signs making the pre-step gap non-negative; ties fall back to approach."""
    s = np.sign(gap0)
    tie_mask = np.abs(gap0) <= tie
    s = np.where(tie_mask, -np.sign(gap_rate), s)
    s = np.where(s == 0.0, 1.0, s)
    return n * s[:, None]


def ccd_vf_batch(x0: np.ndarray, x1: np.ndarray, thickness: float) -> NarrowPhaseHits:
    """Vertex-face CCD: rows 0..2 are the face, row 3 the vertex; (B, 4, 3) inputs."""
    b = len(x0)
    empty = NarrowPhaseHits(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    if b == 0:
        return empty
    v = x1 - x0
    coeffs, vol_ref = coplanarity_cubic(
        x0[:, 3] - x0[:, 0], v[:, 3] - v[:, 0],
        x0[:, 1] - x0[:, 0], v[:, 1] - v[:, 0],
        x0[:, 2] - x0[:, 0], v[:, 2] - v[:, 0])
    roots = cubic_roots_in_step(coeffs, vol_ref)

    found = np.full(b, False)
    toi = np.zeros(b)
    normal = np.zeros((b, 3))
    bary_all = np.zeros((b, 3))

    for k in range(3):
        t = roots[:, k]
        cand = ~found & np.isfinite(t)
        if not cand.any():
            continue
        idx = np.where(cand)[0]
        tt = t[idx, None, None]
        xt = x0[idx] + tt * v[idx]
        e1 = xt[:, 1] - xt[:, 0]
        e2 = xt[:, 2] - xt[:, 0]
        n = np.cross(e1, e2)
        nn = np.linalg.norm(n, axis=1)
        good = nn > DEGENERATE_AREA
        bary = triangle_barycentrics(xt[:, 3], xt[:, 0], xt[:, 1], xt[:, 2])
        good &= (bary >= -BARY_TOL).all(axis=1) & (bary <= 1.0 + BARY_TOL).all(axis=1)
        # the root guarantees coplanarity; require the vertex to be near the plane
        with np.errstate(invalid="ignore"):
            dist = np.abs(np.einsum("ij,ij->i", xt[:, 3] - xt[:, 0], n) / np.maximum(nn, 1e-300))
        good &= dist <= max(10.0 * thickness, 1e-6)
        # and require a genuine sign change of the coplanarity polynomial
        before = np.clip(t[idx] - 0.02, 0.0, 1.0)
        after = np.clip(t[idx] + 0.02, 0.0, 1.0)

        def poly(tv, rows=idx):
            return ((coeffs[rows, 3] * tv + coeffs[rows, 2]) * tv
                    + coeffs[rows, 1]) * tv + coeffs[rows, 0]

        fb, fa = poly(before), poly(after)
        scale_f = np.abs(coeffs[idx]).max(axis=1) + 1e-300
        good &= (fb * fa <= 0.0) | (np.abs(fb) <= 1e-9 * scale_f) \
            | (np.abs(fa) <= 1e-9 * scale_f)
        sel = idx[good]
        if not len(sel):
            continue
        found[sel] = True
        toi[sel] = t[sel]
        bary_all[sel] = np.clip(bary[good], 0.0, 1.0)
        bary_all[sel] /= bary_all[sel].sum(axis=1, keepdims=True)
        normal[sel] = n[good] / nn[good, None]

    idx = np.where(found)[0]
    if not len(idx):
        return empty
    bary = bary_all[idx]
    n = normal[idx]
    face0 = (bary[:, :, None] * x0[idx, :3]).sum(axis=1)
    gap0 = np.einsum("ij,ij->i", n, x0[idx, 3] - face0)
    facev = (bary[:, :, None] * v[idx, :3]).sum(axis=1)
    rate = np.einsum("ij,ij->i", n, v[idx, 3] - facev)
    n = _orient_normals(n, gap0, rate)
    alpha = np.column_stack([bary, np.ones(len(idx))])
    return NarrowPhaseHits(index=idx, toi=toi[idx], alpha=alpha, normal=n)


def ccd_ee_batch(x0: np.ndarray, x1: np.ndarray, thickness: float) -> NarrowPhaseHits:
    """Edge-edge CCD: rows 0,1 are edge A, rows 2,3 edge B; (B, 4, 3) inputs."""
    b = len(x0)
    empty = NarrowPhaseHits(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    if b == 0:
        return empty
    v = x1 - x0
    coeffs, vol_ref = coplanarity_cubic(
        x0[:, 1] - x0[:, 0], v[:, 1] - v[:, 0],
        x0[:, 2] - x0[:, 0], v[:, 2] - v[:, 0],
        x0[:, 3] - x0[:, 0], v[:, 3] - v[:, 0])
    roots = cubic_roots_in_step(coeffs, vol_ref)

    found = np.full(b, False)
    toi = np.zeros(b)
    params = np.zeros((b, 2))
    normal = np.zeros((b, 3))

    for k in range(3):
        t = roots[:, k]
        cand = ~found & np.isfinite(t)
        if not cand.any():
            continue
        idx = np.where(cand)[0]
        tt = t[idx, None, None]
        xt = x0[idx] + tt * v[idx]
        d1 = xt[:, 1] - xt[:, 0]
        d2 = xt[:, 3] - xt[:, 2]
        n = np.cross(d1, d2)
        nn = np.linalg.norm(n, axis=1)
        # near-parallel edges have directionally unstable cross products; use
        # the closest-offset fallback well before exact degeneracy
        len_prod = np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1)
        parallel = nn <= 1e-3 * np.maximum(len_prod, DEGENERATE_AREA)
        # line-line parameters by 2x2 solve; parallel pairs fall back to
        # clamped segment-segment proximity at the root time
        r = xt[:, 2] - xt[:, 0]
        a = np.einsum("ij,ij->i", d1, d1)
        e = np.einsum("ij,ij->i", d2, d2)
        bb = np.einsum("ij,ij->i", d1, d2)
        det = a * e - bb * bb
        c1 = np.einsum("ij,ij->i", r, d1)
        c2 = np.einsum("ij,ij->i", r, d2)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(~parallel, (c1 * e - bb * c2) / np.where(det == 0, 1.0, det), 0.0)
            u = np.where(~parallel, (c1 * bb - a * c2) / np.where(det == 0, 1.0, det), 0.0)
        if parallel.any():
            sp, up = closest_segment_segment(xt[parallel, 0], xt[parallel, 1],
                                             xt[parallel, 2], xt[parallel, 3])
            s[parallel] = sp
            u[parallel] = up
            pa = xt[parallel, 0] + sp[:, None] * d1[parallel]
            pb = xt[parallel, 2] + up[:, None] * d2[parallel]
            off = pb - pa
            dist = np.linalg.norm(off, axis=1)
            n[parallel] = np.where(dist[:, None] > 1e-12, off / np.maximum(
                dist[:, None], 1e-300), np.array([0.0, 0.0, 1.0]))
            nn_par = np.ones(parallel.sum())
            nn[parallel] = nn_par
        good = (s >= EE_INTERIOR) & (s <= 1.0 - EE_INTERIOR) \
            & (u >= EE_INTERIOR) & (u <= 1.0 - EE_INTERIOR)
        good &= nn > 0.0
        sel = idx[good]
        if not len(sel):
            continue
        found[sel] = True
        toi[sel] = t[sel]
        params[sel, 0] = np.clip(s[good], 0.0, 1.0)
        params[sel, 1] = np.clip(u[good], 0.0, 1.0)
        normal[sel] = n[good] / np.linalg.norm(n[good], axis=1)[:, None]

    idx = np.where(found)[0]
    if not len(idx):
        return empty
    # require a genuine coplanarity sign change around the root: clamped
    # band-edge roots of near-degenerate cubics are not crossings
    tt = toi[idx]
    before = np.clip(tt - 0.02, 0.0, 1.0)
    after = np.clip(tt + 0.02, 0.0, 1.0)

    def poly(tv):
        return ((coeffs[idx, 3] * tv + coeffs[idx, 2]) * tv + coeffs[idx, 1]) * tv \
            + coeffs[idx, 0]

    fb, fa = poly(before), poly(after)
    scale_f = np.abs(coeffs[idx]).max(axis=1) + 1e-300
    crossing = (fb * fa <= 0.0) | (np.abs(fb) <= 1e-9 * scale_f) \
        | (np.abs(fa) <= 1e-9 * scale_f)
    idx = idx[crossing]
    if not len(idx):
        return empty
    s, u = params[idx, 0], params[idx, 1]
    alpha = np.column_stack([1.0 - s, s, 1.0 - u, u])
    n = normal[idx]
    pa0 = (1.0 - s)[:, None] * x0[idx, 0] + s[:, None] * x0[idx, 1]
    pb0 = (1.0 - u)[:, None] * x0[idx, 2] + u[:, None] * x0[idx, 3]
    gap0 = np.einsum("ij,ij->i", n, pb0 - pa0)
    va = (1.0 - s)[:, None] * v[idx, 0] + s[:, None] * v[idx, 1]
    vb = (1.0 - u)[:, None] * v[idx, 2] + u[:, None] * v[idx, 3]
    rate = np.einsum("ij,ij->i", n, vb - va)
    n = _orient_normals(n, gap0, rate)
    return NarrowPhaseHits(index=idx, toi=toi[idx], alpha=alpha, normal=n)


def proximity_vf_batch(x1: np.ndarray, thickness: float) -> NarrowPhaseHits:
    """End-of-step vertex-face proximity: accepted when 0 < dist < thickness."""
    b = len(x1)
    empty = NarrowPhaseHits(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    if b == 0:
        return empty
    q, bary = closest_point_triangle(x1[:, 3], x1[:, 0], x1[:, 1], x1[:, 2])
    off = x1[:, 3] - q
    dist = np.linalg.norm(off, axis=1)
    keep = (dist < thickness) & (dist > 1e-12)
    idx = np.where(keep)[0]
    if not len(idx):
        return empty
    n = off[idx] / dist[idx, None]
    alpha = np.column_stack([bary[idx], np.ones(len(idx))])
    return NarrowPhaseHits(index=idx, toi=np.ones(len(idx)), alpha=alpha, normal=n)


def proximity_ee_batch(x1: np.ndarray, thickness: float) -> NarrowPhaseHits:
    """End-of-step edge-edge proximity."""
    b = len(x1)
    empty = NarrowPhaseHits(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    if b == 0:
        return empty
    s, t = closest_segment_segment(x1[:, 0], x1[:, 1], x1[:, 2], x1[:, 3])
    pa = x1[:, 0] + s[:, None] * (x1[:, 1] - x1[:, 0])
    pb = x1[:, 2] + t[:, None] * (x1[:, 3] - x1[:, 2])
    off = pb - pa
    dist = np.linalg.norm(off, axis=1)
    keep = (dist < thickness) & (dist > 1e-12)
    keep &= (s >= EE_PROXIMITY_INTERIOR) & (s <= 1.0 - EE_PROXIMITY_INTERIOR)
    keep &= (t >= EE_PROXIMITY_INTERIOR) & (t <= 1.0 - EE_PROXIMITY_INTERIOR)
    idx = np.where(keep)[0]
    if not len(idx):
        return empty
    n = off[idx] / dist[idx, None]
    alpha = np.column_stack([1.0 - s[idx], s[idx], 1.0 - t[idx], t[idx]])
    return NarrowPhaseHits(index=idx, toi=np.ones(len(idx)), alpha=alpha, normal=n)


# ---------------------------------------------------------------------------
# Single-pair wrappers


def ccd_vf(x0, x1, thickness):
    """First vertex-face contact for one moving quadruple, or None."""
    hits = ccd_vf_batch(np.asarray(x0, dtype=float)[None], np.asarray(x1, dtype=float)[None],
                        thickness)
    if len(hits.index) == 0:
        return None
    return float(hits.toi[0]), hits.alpha[0].copy(), hits.normal[0].copy()


def ccd_ee(x0, x1, thickness):
    """First edge-edge contact for one moving quadruple, or None."""
    hits = ccd_ee_batch(np.asarray(x0, dtype=float)[None], np.asarray(x1, dtype=float)[None],
                        thickness)
    if len(hits.index) == 0:
        return None
    return float(hits.toi[0]), hits.alpha[0].copy(), hits.normal[0].copy()
