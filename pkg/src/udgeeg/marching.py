"""Batched sub-triangulation of Q1 cells by their level sets.

A cut cell is split into 24 tetrahedra around its centre (one fan of four
per face).  The level set is evaluated trilinearly at face and cell centres,
so the reconstruction on each face only depends on that face's four nodes
and ambiguous faces/bodies are decided by the sign at their centres.  Each
tetrahedron is clipped by the linear interpolant of its vertex values; with
several level sets the pieces are clipped again, one level set at a time.

All coordinates here are cell-local (the unit cube).  Values equal to zero
belong to the negative side.
"""
from __future__ import annotations

import numpy as np

from .grid import CORNERS, trilinear_weights

# tiny pieces produced by vertices lying exactly on a zero set
_VOL_EPS = 1e-15
_AREA_EPS = 1e-15

# face corners in cyclic order: (axis, side) -> 4 corner ids
FACE_CORNERS = {}
for _axis in range(3):
    _b, _c = [a for a in range(3) if a != _axis]
    for _side in (0, 1):
        ring = []
        for u, v in ((0, 0), (1, 0), (1, 1), (0, 1)):
            off = [0, 0, 0]
            off[_axis], off[_b], off[_c] = _side, u, v
            ring.append(off[0] + 2 * off[1] + 4 * off[2])
        FACE_CORNERS[(_axis, _side)] = ring


def _cube_template(refine: int = 0):
    """Points (15*k, 3) and tets (24*k, 4) tiling the unit cube."""
    m = 1 << refine
    pts, tets = [], []
    base = np.vstack([CORNERS.astype(float),
                      [[0.5 if a != ax else s for a in range(3)] for ax in range(3) for s in (0, 1)],
                      [[0.5, 0.5, 0.5]]])
    faces = [(ax, s) for ax in range(3) for s in (0, 1)]
    for i in range(m):
        for j in range(m):
            for k in range(m):
                off = 15 * len(pts)
                pts.append((base + [i, j, k]) / m)
                for f, key in enumerate(faces):
                    ring = FACE_CORNERS[key]
                    for e in range(4):
                        tets.append([off + ring[e], off + ring[(e + 1) % 4], off + 8 + f, off + 14])
    return np.vstack(pts), np.array(tets, dtype=np.int64)


_TEMPLATES: dict[int, np.ndarray] = {}


def cube_tets(refine: int = 0) -> np.ndarray:
    """Template tetrahedra of the unit cube, shape (24 * 8**refine, 4, 3)."""
    if refine not in _TEMPLATES:
        pts, tets = _cube_template(refine)
        t = pts[tets]
        t.flags.writeable = False
        _TEMPLATES[refine] = t
    return _TEMPLATES[refine]


def face_tris(axis: int, side: int, refine: int = 0) -> np.ndarray:
    """Fans of four triangles per (sub-)square of a cube face, cell-local, (4 * 4**refine, 3, 3).

    The triangles coincide with the faces of the ``cube_tets(refine)`` template.
    """
    m = 1 << refine
    b, c = [a for a in range(3) if a != axis]
    ring = ((0, 0), (1, 0), (1, 1), (0, 1))
    out = []
    for i in range(m):
        for j in range(m):
            pts = []
            for u, v in ring + ((0.5, 0.5),):
                p = [0.0, 0.0, 0.0]
                p[axis], p[b], p[c] = float(side), (i + u) / m, (j + v) / m
                pts.append(p)
            for e in range(4):
                out.append([pts[e], pts[(e + 1) % 4], pts[4]])
    return np.array(out)


def eval_q1(cell_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trilinear values at local points; cell_values (P, 8), x (P, ..., 3)."""
    w = trilinear_weights(x)
    extra = w.ndim - 2
    cv = cell_values.reshape(cell_values.shape[0], *([1] * extra), 8)
    # explicit sum keeps the accumulation order fixed (zero weights add exact zeros)
    out = w[..., 0] * cv[..., 0]
    for q in range(1, 8):
        out = out + w[..., q] * cv[..., q]
    return out


def tet_volumes(X: np.ndarray) -> np.ndarray:
    d1 = X[:, 1] - X[:, 0]
    d2 = X[:, 2] - X[:, 0]
    d3 = X[:, 3] - X[:, 0]
    return np.abs(np.einsum("pi,pi->p", d1, np.cross(d2, d3))) / 6.0


def tri_normals(X: np.ndarray) -> np.ndarray:
    """Unnormalised normals (twice the area) following the vertex order."""
    return np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])


def _edge(Xs, vs, rows, i, j):
    a = Xs[rows, i]
    b = Xs[rows, j]
    va = vs[rows, i]
    vb = vs[rows, j]
    t = va / (va - vb)
    return a + t[:, None] * (b - a)


def clip_tets(X: np.ndarray, vals: np.ndarray):
    """Split tetrahedra by the sign of the linear interpolant of ``vals``.

    Returns ``(neg, neg_src), (pos, pos_src), (iface, iface_src)``: piece
    vertices with the index of the tet they came from.  Interface triangles
    are ordered so that their right-hand normal points to the positive side.
    """
    pos = vals > 0
    k = pos.sum(axis=1)
    order = np.argsort(pos, axis=1, kind="stable")
    r = np.arange(len(X))[:, None]
    Xs = X[r, order]
    vs = vals[r, order]
    neg_parts, neg_src, pos_parts, pos_src, tri_parts, tri_src, tri_ref = [], [], [], [], [], [], []

    idx = np.flatnonzero(k == 0)
    neg_parts.append(X[idx]); neg_src.append(idx)
    idx = np.flatnonzero(k == 4)
    pos_parts.append(X[idx]); pos_src.append(idx)

    idx = np.flatnonzero(k == 1)
    if idx.size:
        a, b, c, d = (Xs[idx, q] for q in range(4))
        pad = _edge(Xs, vs, idx, 0, 3)
        pbd = _edge(Xs, vs, idx, 1, 3)
        pcd = _edge(Xs, vs, idx, 2, 3)
        pos_parts.append(np.stack([pad, pbd, pcd, d], axis=1)); pos_src.append(idx)
        neg_parts.append(np.concatenate([np.stack([a, b, c, pad], 1), np.stack([b, c, pad, pbd], 1),
                                         np.stack([c, pad, pbd, pcd], 1)]))
        neg_src.append(np.tile(idx, 3))
        tri_parts.append(np.stack([pad, pbd, pcd], 1)); tri_src.append(idx); tri_ref.append(d)

    idx = np.flatnonzero(k == 3)
    if idx.size:
        a, b, c, d = (Xs[idx, q] for q in range(4))
        pab = _edge(Xs, vs, idx, 0, 1)
        pac = _edge(Xs, vs, idx, 0, 2)
        pad = _edge(Xs, vs, idx, 0, 3)
        neg_parts.append(np.stack([a, pab, pac, pad], 1)); neg_src.append(idx)
        pos_parts.append(np.concatenate([np.stack([b, c, d, pab], 1), np.stack([c, d, pab, pac], 1),
                                         np.stack([d, pab, pac, pad], 1)]))
        pos_src.append(np.tile(idx, 3))
        tri_parts.append(np.stack([pab, pac, pad], 1)); tri_src.append(idx); tri_ref.append(b)

    idx = np.flatnonzero(k == 2)
    if idx.size:
        a, b, c, d = (Xs[idx, q] for q in range(4))
        pac = _edge(Xs, vs, idx, 0, 2)
        pad = _edge(Xs, vs, idx, 0, 3)
        pbc = _edge(Xs, vs, idx, 1, 2)
        pbd = _edge(Xs, vs, idx, 1, 3)
        # both prisms split the interface quad along pad-pbc
        neg_parts.append(np.concatenate([np.stack([a, pac, pad, b], 1), np.stack([pac, pad, b, pbc], 1),
                                         np.stack([pad, b, pbc, pbd], 1)]))
        neg_src.append(np.tile(idx, 3))
        pos_parts.append(np.concatenate([np.stack([c, pac, pbc, d], 1), np.stack([pac, pbc, d, pad], 1),
                                         np.stack([pbc, d, pad, pbd], 1)]))
        pos_src.append(np.tile(idx, 3))
        tri_parts.append(np.concatenate([np.stack([pac, pad, pbc], 1), np.stack([pad, pbc, pbd], 1)]))
        tri_src.append(np.tile(idx, 2)); tri_ref.append(np.concatenate([c, c]))

    neg, nsrc = _drop_flat(np.concatenate(neg_parts), np.concatenate(neg_src))
    posp, psrc = _drop_flat(np.concatenate(pos_parts), np.concatenate(pos_src))
    if tri_parts:
        tris = np.concatenate(tri_parts)
        tsrc = np.concatenate(tri_src)
        ref = np.concatenate(tri_ref)
        nrm = tri_normals(tris)
        flip = np.einsum("pi,pi->p", nrm, ref - tris[:, 0]) < 0
        tris[flip] = tris[flip][:, [0, 2, 1]]
        keep = np.linalg.norm(nrm, axis=1) > 2 * _AREA_EPS
        tris, tsrc = tris[keep], tsrc[keep]
    else:
        tris, tsrc = np.empty((0, 3, 3)), np.empty(0, dtype=np.int64)
    return (neg, nsrc), (posp, psrc), (tris, tsrc)


def _drop_flat(T, src):
    keep = tet_volumes(T) > _VOL_EPS
    return T[keep], src[keep]


def clip_tris(X: np.ndarray, vals: np.ndarray):
    """Split triangles by sign; sub-triangles keep the parent's orientation."""
    pos = vals > 0
    k = pos.sum(axis=1)
    order = np.argsort(pos, axis=1, kind="stable")
    r = np.arange(len(X))[:, None]
    Xs = X[r, order]
    vs = vals[r, order]
    neg_parts, neg_src, pos_parts, pos_src = [], [], [], []
    idx = np.flatnonzero(k == 0)
    neg_parts.append(X[idx]); neg_src.append(idx)
    idx = np.flatnonzero(k == 3)
    pos_parts.append(X[idx]); pos_src.append(idx)
    idx = np.flatnonzero(k == 1)
    if idx.size:
        a, b, c = (Xs[idx, q] for q in range(3))
        pac = _edge(Xs, vs, idx, 0, 2)
        pbc = _edge(Xs, vs, idx, 1, 2)
        pos_parts.append(np.stack([pac, pbc, c], 1)); pos_src.append(idx)
        neg_parts.append(np.concatenate([np.stack([a, b, pbc], 1), np.stack([a, pbc, pac], 1)]))
        neg_src.append(np.tile(idx, 2))
    idx = np.flatnonzero(k == 2)
    if idx.size:
        a, b, c = (Xs[idx, q] for q in range(3))
        pab = _edge(Xs, vs, idx, 0, 1)
        pac = _edge(Xs, vs, idx, 0, 2)
        neg_parts.append(np.stack([a, pab, pac], 1)); neg_src.append(idx)
        pos_parts.append(np.concatenate([np.stack([pab, b, c], 1), np.stack([pab, c, pac], 1)]))
        pos_src.append(np.tile(idx, 2))
    ref = tri_normals(X)
    out = []
    for parts, srcs in ((neg_parts, neg_src), (pos_parts, pos_src)):
        T = np.concatenate(parts)
        s = np.concatenate(srcs)
        n = tri_normals(T)
        flip = np.einsum("pi,pi->p", n, ref[s]) < 0
        T[flip] = T[flip][:, [0, 2, 1]]
        keep = np.linalg.norm(n, axis=1) > 2 * _AREA_EPS
        out.append((T[keep], s[keep]))
    return out[0], out[1]


def subdivide(cell_values: np.ndarray, refine: int = 0):
    """Recursive sub-triangulation of cut cells.

    ``cell_values`` has shape (C, L, 8).  Returns a dict with

    - ``tets`` (P, 4, 3), ``tet_cell`` (P,), ``tet_bits`` (P,): volume pieces
      with the sign bits of all level sets (bit g set = positive side of g);
    - ``tris`` (I, 3, 3), ``tri_cell``, ``tri_bits``, ``tri_ls``: interface
      triangles of level set ``tri_ls`` (its own bit is left clear) with the
      normal pointing to the positive side.
    """
    C, L, _ = cell_values.shape
    template = cube_tets(refine)
    nt = len(template)
    tets = np.broadcast_to(template, (C, nt, 4, 3)).reshape(-1, 4, 3).copy()
    tet_cell = np.repeat(np.arange(C), nt)
    tet_bits = np.zeros(len(tets), dtype=np.int64)
    tris = np.empty((0, 3, 3))
    tri_cell = np.empty(0, dtype=np.int64)
    tri_bits = np.empty(0, dtype=np.int64)
    tri_ls = np.empty(0, dtype=np.int64)
    for g in range(L):
        cv = cell_values[:, g, :]
        if len(tris):
            tv = eval_q1(cv[tri_cell], tris)
            (tn, tns), (tp, tps) = clip_tris(tris, tv)
            tris = np.concatenate([tn, tp])
            tri_cell = np.concatenate([tri_cell[tns], tri_cell[tps]])
            tri_bits = np.concatenate([tri_bits[tns], tri_bits[tps] | (1 << g)])
            tri_ls = np.concatenate([tri_ls[tns], tri_ls[tps]])
        vals = eval_q1(cv[tet_cell], tets)
        (n_t, n_s), (p_t, p_s), (i_t, i_s) = clip_tets(tets, vals)
        new_cell = tet_cell[i_s]
        new_bits = tet_bits[i_s]
        tets = np.concatenate([n_t, p_t])
        tet_bits = np.concatenate([tet_bits[n_s], tet_bits[p_s] | (1 << g)])
        tet_cell = np.concatenate([tet_cell[n_s], tet_cell[p_s]])
        tris = np.concatenate([tris, i_t])
        tri_cell = np.concatenate([tri_cell, new_cell])
        tri_bits = np.concatenate([tri_bits, new_bits])
        tri_ls = np.concatenate([tri_ls, np.full(len(i_t), g, dtype=np.int64)])
    # stable order by cell keeps the output deterministic and grouped
    o = np.argsort(tet_cell, kind="stable")
    ot = np.argsort(tri_cell, kind="stable")
    return {
        "tets": tets[o], "tet_cell": tet_cell[o], "tet_bits": tet_bits[o],
        "tris": tris[ot], "tri_cell": tri_cell[ot], "tri_bits": tri_bits[ot], "tri_ls": tri_ls[ot],
    }


def subdivide_faces(face_values: np.ndarray, face_tris_local: np.ndarray):
    """Clip face triangles (F, 4, 3, 3) by the level sets; face_values (F, L, 8) are host-cell values."""
    F, L, _ = face_values.shape
    tris = face_tris_local.reshape(-1, 3, 3).copy()
    face = np.repeat(np.arange(F), face_tris_local.shape[1])
    bits = np.zeros(len(tris), dtype=np.int64)
    zero = np.zeros(len(tris), dtype=np.int64)  # bits of level sets vanishing on the piece
    for g in range(L):
        tv = eval_q1(face_values[face, g, :], tris)
        (tn, tns), (tp, tps) = clip_tris(tris, tv)
        ntv = eval_q1(face_values[face[tns], g, :], tn)
        nz = np.all(ntv == 0.0, axis=1)
        tris = np.concatenate([tn, tp])
        bits = np.concatenate([bits[tns], bits[tps] | (1 << g)])
        zero = np.concatenate([zero[tns] | (nz.astype(np.int64) << g), zero[tps]])
        face = np.concatenate([face[tns], face[tps]])
    o = np.argsort(face, kind="stable")
    return tris[o], face[o], bits[o], zero[o]
