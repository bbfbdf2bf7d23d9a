"""Cut-cell mesh: per-domain pieces of fundamental cells and their skeleton.

A cut cell is the part of one fundamental cell that belongs to one tissue
domain.  Uncut cells are kept as whole hexahedra; cut cells are represented
by tetrahedra from the marching sub-triangulation (cell-local coordinates).
The skeleton consists of clipped fundamental faces (between cut cells of
neighbouring cells) and interface triangles (between domains inside a cell).

Cut cells are ordered by (parent cell, domain), facets by (inside, outside)
with ``inside < outside``.  Because of this ordering the cut cells of a
lower cell always precede those of its upper neighbour, so normals of
clipped faces are simply ``+e_axis``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import CORNERS, FundamentalMesh, cell_of_point, local_coordinates
from .levelset import DomainSpec, LevelSetField, _check_same_mesh
from .marching import (FACE_CORNERS, cube_tets, eval_q1, face_tris, subdivide, subdivide_faces,
                       tet_volumes, tri_normals)
from .quadrature import cube_rule, square_rule, tet_rule, tri_rule

INTER_CELL = 0
INTERFACE = 1

_CHUNK = 2048


# --------------------------------------------------------------------------- single cells

@dataclass(frozen=True)
class SubTriangulation:
    """Pieces of one cell.

    ``tets`` are volume simplices with integer labels; ``full`` holds the
    label of a whole-cell hexahedral element (empty when the cell is cut).
    Interface triangles carry the generating level set and are oriented
    from its negative to its positive side.
    """

    tets: np.ndarray
    tet_label: np.ndarray
    full: tuple[int, ...]
    tris: np.ndarray
    tri_ls: np.ndarray
    cell_volume: float = 1.0

    def volume(self, label: int) -> float:
        v = float(tet_volumes(self.tets[self.tet_label == label]).sum())
        return v + self.cell_volume * sum(1 for f in self.full if f == label)

    def interface_area(self, level_set: int | None = None) -> float:
        T = self.tris if level_set is None else self.tris[self.tri_ls == level_set]
        return float(0.5 * np.linalg.norm(tri_normals(T), axis=1).sum())

    def labels(self) -> set[int]:
        return set(int(v) for v in np.unique(self.tet_label)) | set(self.full)


def _to_global(x, lo, edge):
    return np.asarray(lo, dtype=float) + x * np.asarray(edge, dtype=float)


def subtriangulate_cell(nodal_values, refine: int = 0, lo=(0.0, 0.0, 0.0), edge=(1.0, 1.0, 1.0)) -> SubTriangulation:
    """Split one cell by a single level set; labels are -1 / +1."""
    v = np.asarray(nodal_values, dtype=float).reshape(8)
    if not np.all(np.isfinite(v)):
        raise ValueError("nodal values must be finite")
    vol = float(np.prod(edge))
    if v.max() <= 0 or (v.min() >= 0 and v.mean() > 0):
        label = -1 if v.max() <= 0 else 1
        return SubTriangulation(np.empty((0, 4, 3)), np.empty(0, dtype=np.int64), (label,),
                                np.empty((0, 3, 3)), np.empty(0, dtype=np.int64), vol)
    sub = subdivide(v[None, None, :], refine)
    lab = np.where(sub["tet_bits"] & 1, 1, -1)
    return SubTriangulation(_to_global(sub["tets"], lo, edge), lab, (),
                            _to_global(sub["tris"], lo, edge), sub["tri_ls"], vol)


def subtriangulate_recursive(nodal_values_per_levelset, spec: DomainSpec, refine: int = 0,
                             lo=(0.0, 0.0, 0.0), edge=(1.0, 1.0, 1.0)) -> dict[int, SubTriangulation]:
    """Split one cell by all level sets (declaration order); one entry per present domain."""
    v = np.asarray(nodal_values_per_levelset, dtype=float)
    if v.ndim != 2 or v.shape[1] != 8 or v.shape[0] < 1:
        raise ValueError("expected an (L, 8) array of nodal values")
    if v.shape[0] != spec.n_level_sets:
        raise ValueError("number of level sets does not match the domain spec")
    if not np.all(np.isfinite(v)):
        raise ValueError("nodal values must be finite")
    vol = float(np.prod(edge))
    neg = v.max(axis=1) <= 0
    pos = (v.min(axis=1) >= 0) & (v.mean(axis=1) > 0)
    if np.all(neg | pos):
        d = int(spec.table[int(sum(1 << g for g in range(len(v)) if pos[g]))])
        if d < 0:
            return {}
        return {d: SubTriangulation(np.empty((0, 4, 3)), np.empty(0, dtype=np.int64), (d,),
                                    np.empty((0, 3, 3)), np.empty(0, dtype=np.int64), vol)}
    sub = subdivide(v[None], refine)
    dom = spec.table[sub["tet_bits"]]
    dneg = spec.table[sub["tri_bits"]]
    dpos = spec.table[sub["tri_bits"] | (1 << sub["tri_ls"])]
    tets = _to_global(sub["tets"], lo, edge)
    tris = _to_global(sub["tris"], lo, edge)
    out = {}
    for d in np.unique(dom[dom >= 0]):
        sel = dom == d
        tsel = (dneg != dpos) & ((dneg == d) | (dpos == d))
        out[int(d)] = SubTriangulation(tets[sel], dom[sel], (), tris[tsel], sub["tri_ls"][tsel], vol)
    return out


# --------------------------------------------------------------------------- mesh types

@dataclass(frozen=True)
class CutCell:
    index: int
    parent_cell: int
    domain: int
    volume: float
    diameter: float
    centroid: np.ndarray
    full: bool
    tets: np.ndarray  # global coordinates, empty for full cells

    @property
    def dof_block(self) -> int:
        return self.index


@dataclass(frozen=True)
class SkeletonFacet:
    index: int
    kind: int
    inside: int
    outside: int
    triangles: np.ndarray  # (T, 3, 3) global
    quads: np.ndarray  # (Q, 4, 3) global, counter-clockwise about the normal
    normals: np.ndarray  # (T + Q, 3) unit, inside -> outside
    areas: np.ndarray  # (T + Q,)
    facet_width: float

    @property
    def area(self) -> float:
        return float(self.areas.sum())


class CutMesh:
    """Cut cells and skeleton facets over a fundamental mesh (array storage)."""

    def __init__(self, mesh: FundamentalMesh, spec: DomainSpec, fields, theta: float, refine: int, voxel: bool,
                 parent, domain, full, volume, centroid, diameter,
                 tets, tet_owner,
                 facet_inside, facet_outside,
                 ftri, ftri_normal, ftri_facet,
                 fquad_lo, fquad_axis, fquad_facet,
                 patch_tris, patch_owner, unassigned_volume):
        self.mesh = mesh
        self.spec = spec
        self.fields = tuple(fields)
        self.theta = theta
        self.refine = refine
        self.voxel = voxel
        self.parent = parent
        self.domain = domain
        self.full = full
        self.volume = volume
        self.centroid = centroid
        self.diameter = diameter
        self.tets = tets  # cell-local coordinates of the parent
        self.tet_owner = tet_owner
        self.tet_start = np.searchsorted(tet_owner, np.arange(len(parent) + 1))
        self.facet_inside = facet_inside
        self.facet_outside = facet_outside
        self.facet_kind = np.where(domain[facet_inside] == domain[facet_outside], INTER_CELL, INTERFACE)
        self.ftri = ftri
        self.ftri_normal = ftri_normal
        self.ftri_facet = ftri_facet
        self.fquad_lo = fquad_lo
        self.fquad_axis = fquad_axis
        self.fquad_facet = fquad_facet
        self.patch_tris = patch_tris
        self.patch_owner = patch_owner
        self.unassigned_volume = unassigned_volume
        D = len(spec.domains)
        self._keys = parent * D + domain
        self._patch_tree = None
        self._cell_cache = None

    # sizes ---------------------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.parent)

    @property
    def n_facets(self) -> int:
        return len(self.facet_inside)

    @property
    def n_dofs(self) -> int:
        return 8 * self.n_cells

    @property
    def h(self) -> float:
        return self.mesh.h

    @property
    def facet_width(self) -> np.ndarray:
        return np.full(self.n_facets, self.mesh.h)

    def census(self) -> dict:
        names = self.spec.names
        per = {names[d]: int(np.sum(self.domain == d)) for d in range(len(names))}
        return {
            "cells_per_dim": self.mesh.n,
            "h_mm": self.mesh.h,
            "cut_cells": self.n_cells,
            "dofs": self.n_dofs,
            "facets": self.n_facets,
            "interface_facets": int(np.sum(self.facet_kind == INTERFACE)),
            "uncut_cells": int(self.full.sum()),
            "per_domain": per,
        }

    # lookup ----------------------------------------------------------------------
    def find(self, parent, domain) -> np.ndarray:
        """Cut-cell ids for (parent, domain) pairs, -1 where absent."""
        parent = np.asarray(parent, dtype=np.int64)
        domain = np.asarray(domain, dtype=np.int64)
        D = len(self.spec.domains)
        return _lookup(self._keys, parent * D + domain, (domain >= 0) & (parent >= 0))

    def cell(self, i: int) -> CutCell:
        i = int(i)
        lo = self.mesh.cell_lo(self.parent[i])
        t = self.tets[self.tet_start[i]:self.tet_start[i + 1]]
        return CutCell(i, int(self.parent[i]), int(self.domain[i]), float(self.volume[i]),
                       float(self.diameter[i]), self.centroid[i].copy(), bool(self.full[i]),
                       _to_global(t, lo, self.mesh.edge))

    @property
    def cells(self) -> list[CutCell]:
        return [self.cell(i) for i in range(self.n_cells)]

    def facet(self, k: int) -> SkeletonFacet:
        k = int(k)
        ts = np.flatnonzero(self.ftri_facet == k)
        qs = np.flatnonzero(self.fquad_facet == k)
        tris = self.ftri[ts]
        quads = np.array([_quad_vertices(self.fquad_lo[q], self.fquad_axis[q], self.mesh.edge) for q in qs])
        quads = quads.reshape(-1, 4, 3)
        qn = np.zeros((len(qs), 3))
        qn[np.arange(len(qs)), self.fquad_axis[qs]] = 1.0
        ea = self.mesh.edge
        qa = np.array([np.prod(np.delete(ea, a)) for a in self.fquad_axis[qs]]).reshape(-1)
        areas = np.concatenate([0.5 * np.linalg.norm(tri_normals(tris), axis=1), qa])
        return SkeletonFacet(k, int(self.facet_kind[k]), int(self.facet_inside[k]), int(self.facet_outside[k]),
                             tris, quads, np.vstack([self.ftri_normal[ts], qn]), areas, self.mesh.h)

    @property
    def facets(self) -> list[SkeletonFacet]:
        return [self.facet(k) for k in range(self.n_facets)]

    # quadrature ----------------------------------------------------------------
    def cut_volume_points(self, order: int):
        """Quadrature of all non-full cut cells: (cell ids, local xi, physical weights)."""
        lam, w = tet_rule(order)
        T = self.tets
        xi = np.einsum("qv,pvi->pqi", lam, T)
        wt = tet_volumes(T)[:, None] * w[None, :] * self.mesh.cell_volume
        owner = np.repeat(self.tet_owner, len(w))
        return owner, xi.reshape(-1, 3), wt.reshape(-1)

    def facet_points(self, order: int):
        """All facet quadrature points sorted by facet: (facet ids, points, weights, normals)."""
        lam, w = tri_rule(order)
        P = np.einsum("qv,pvi->pqi", lam, self.ftri)
        area = 0.5 * np.linalg.norm(tri_normals(self.ftri), axis=1)
        tp = P.reshape(-1, 3)
        tw = (area[:, None] * w[None, :]).reshape(-1)
        tf = np.repeat(self.ftri_facet, len(w))
        tn = np.repeat(self.ftri_normal, len(w), axis=0)
        uv, wq = square_rule(order)
        edge = self.mesh.edge
        nq = len(self.fquad_lo)
        qp = np.empty((nq, len(wq), 3))
        qn = np.zeros((nq, 3))
        qa = np.empty(nq)
        for a in range(3):
            s = self.fquad_axis == a
            b, c = [x for x in range(3) if x != a]
            qp[s, :, a] = self.fquad_lo[s, a][:, None]
            qp[s, :, b] = self.fquad_lo[s, b][:, None] + uv[None, :, 0] * edge[b]
            qp[s, :, c] = self.fquad_lo[s, c][:, None] + uv[None, :, 1] * edge[c]
            qn[s, a] = 1.0
            qa[s] = edge[b] * edge[c]
        facet = np.concatenate([tf, np.repeat(self.fquad_facet, len(wq))])
        pts = np.concatenate([tp, qp.reshape(-1, 3)])
        wts = np.concatenate([tw, (qa[:, None] * wq[None, :]).reshape(-1)])
        nrm = np.concatenate([tn, np.repeat(qn, len(wq), axis=0)])
        o = np.argsort(facet, kind="stable")
        return facet[o], pts[o], wts[o], nrm[o]

    def local_coordinates(self, cells, x) -> np.ndarray:
        """Parent-cell local coordinates of points x for cut cells ``cells`` (no range check)."""
        return (np.asarray(x, dtype=float) - self.mesh.cell_lo(self.parent[cells])) / self.mesh.edge

    # point location ----------------------------------------------------------
    def _domain_at(self, cell: int, x) -> int:
        if self.voxel:
            vals = [float(f.cell_values(cell).mean()) for f in self.fields]
        else:
            xi = local_coordinates(self.mesh, cell, x)
            vals = [float(eval_q1(f.cell_values(np.array([cell])), xi[None, :])[0]) for f in self.fields]
        return int(self.spec.domain_of_values(np.array(vals)))

    def _closed_cells(self, x) -> list[int]:
        """Fundamental cells whose closed box contains x."""
        mesh = self.mesh
        t = (np.asarray(x, dtype=float) - mesh.lo) / mesh.edge
        choices = []
        for a in range(3):
            f = np.floor(t[a])
            opts = {int(f)}
            if t[a] == f:
                opts.add(int(f) - 1)
            choices.append(sorted(o for o in opts if 0 <= o < mesh.n))
        out = []
        for i in choices[0]:
            for j in choices[1]:
                for k in choices[2]:
                    out.append(mesh.cell_index((i, j, k)))
        return sorted(out)

    def candidates(self, x, domain: int | None = None) -> list[int]:
        """Cut cells whose closure contains x (by parent box and level-set signs), ascending."""
        out = []
        for c in self._closed_cells(x):
            d = self._domain_at(c, x) if domain is None else domain
            if d < 0:
                continue
            i = int(self.find(c, d))
            if i >= 0:
                out.append(i)
        return sorted(set(out))

    def on_boundary(self, cell: int, x) -> bool:
        """True if x lies on a face of the parent cell or on a zero set inside it."""
        p = int(self.parent[cell])
        xi = local_coordinates(self.mesh, p, x)
        if np.any(xi == 0.0) or np.any(xi == 1.0):
            return True
        if self.full[cell]:
            return False
        return any(float(eval_q1(f.cell_values(np.array([p])), xi[None, :])[0]) == 0.0 for f in self.fields)

    def locate(self, x, domain: int | None = None) -> int | None:
        """Lowest-index cut cell containing x (optionally forcing the domain)."""
        c = self.candidates(x, domain)
        return c[0] if c else None

    def nearest_cell(self, x, domain: int, max_distance: float) -> int | None:
        """Closest cut cell of ``domain`` by distance to its parent box (ties: lower id)."""
        mesh = self.mesh
        x = np.asarray(x, dtype=float)
        cells, _ = mesh.locate(x[None, :])
        ijk = mesh.cell_ijk(int(cells[0]))
        best, best_d = None, np.inf
        r = int(np.ceil(max_distance / mesh.edge.min())) + 1
        rng = [range(max(0, ijk[a] - r), min(mesh.n, ijk[a] + r + 1)) for a in range(3)]
        for i in rng[0]:
            for j in rng[1]:
                for k in rng[2]:
                    c = mesh.cell_index((i, j, k))
                    cc = int(self.find(c, domain))
                    if cc < 0:
                        continue
                    lo = mesh.cell_lo(c)
                    d = float(np.linalg.norm(x - np.clip(x, lo, lo + mesh.edge)))
                    if d < best_d or (d == best_d and cc < best):
                        best, best_d = cc, d
        if best is None or best_d > max_distance:
            return None
        return best

    def project_to_boundary(self, x, domain: int):
        """Closest point on the outer boundary patches of ``domain``: (cut cell, point, distance)."""
        sel = self.domain[self.patch_owner] == domain
        if not np.any(sel):
            raise ValueError(f"domain {self.spec.names[domain]!r} has no outer boundary")
        if self._patch_tree is None:
            self._patch_tree = {}
        if domain not in self._patch_tree:
            from scipy.spatial import cKDTree
            idx = np.flatnonzero(sel)
            cen = self.patch_tris[idx].mean(axis=1)
            self._patch_tree[domain] = (cKDTree(cen), idx)
        tree, idx = self._patch_tree[domain]
        k = min(32, len(idx))
        _, nb = tree.query(np.asarray(x, dtype=float), k=k)
        nb = np.atleast_1d(nb)
        cand = idx[nb]
        pts = closest_points_on_triangles(np.asarray(x, dtype=float), self.patch_tris[cand])
        d = np.linalg.norm(pts - x, axis=1)
        # ties broken by patch index for determinism
        o = np.lexsort((cand, d))[0]
        return int(self.patch_owner[cand[o]]), pts[o], float(d[o])

    # export ------------------------------------------------------------------
    def write_debug_mesh(self, path, cells=None) -> None:
        """ASCII dump of volume tets and facet triangles (vertex list + element list)."""
        cells = range(self.n_cells) if cells is None else cells
        verts, elems = [], []
        for i in cells:
            cc = self.cell(i)
            T = cc.tets
            if cc.full:
                T = _to_global(cube_tets(0), self.mesh.cell_lo(cc.parent_cell), self.mesh.edge)
            for t in T:
                base = len(verts)
                verts.extend(t)
                elems.append(("tet", base, base + 1, base + 2, base + 3, i))
        for t, f in zip(self.ftri, self.ftri_facet):
            base = len(verts)
            verts.extend(t)
            elems.append(("tri", base, base + 1, base + 2, int(f)))
        with open(Path(path), "w") as fh:
            fh.write(f"vertices {len(verts)}\n")
            for v in verts:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            fh.write(f"elements {len(elems)}\n")
            for e in elems:
                fh.write(" ".join(str(v) for v in e) + "\n")


def _lookup(keys: np.ndarray, query: np.ndarray, valid) -> np.ndarray:
    query = np.asarray(query, dtype=np.int64)
    if len(keys) == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(keys, query), len(keys) - 1)
    ok = (keys[pos] == query) & valid
    out = np.where(ok, pos, -1)
    return int(out) if out.ndim == 0 else out


def _quad_vertices(lo, axis, edge):
    b, c = [a for a in range(3) if a != axis]
    out = np.repeat(np.asarray(lo, dtype=float)[None, :], 4, axis=0)
    for r, (u, v) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
        out[r, b] += u * edge[b]
        out[r, c] += v * edge[c]
    return out


def closest_points_on_triangles(p: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle of T (n, 3, 3), by region tests."""
    a, b, c = T[:, 0], T[:, 1], T[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    out = np.empty_like(a)
    done = np.zeros(len(T), dtype=bool)

    def put(mask, val):
        m = mask & ~done
        out[m] = val[m]
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + (d1 / (d1 - d3))[:, None] * ab)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + (d2 / (d2 - d6))[:, None] * ac)
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
            b + ((d4 - d3) / ((d4 - d3) + (d5 - d6)))[:, None] * (c - b))
        den = va + vb + vc
        v = vb / den
        w = vc / den
        put(np.ones(len(T), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


# --------------------------------------------------------------------------- construction

def _classify(cv: np.ndarray):
    """Per (cell, level set): uniformly negative / positive flags and centre values."""
    center = cv.sum(axis=2) * 0.125
    neg = cv.max(axis=2) <= 0
    pos = (cv.min(axis=2) >= 0) & (center > 0)
    return neg, pos, center


def _bits(flags: np.ndarray) -> np.ndarray:
    out = np.zeros(flags.shape[0], dtype=np.int64)
    for g in range(flags.shape[1]):
        out |= flags[:, g].astype(np.int64) << g
    return out


def build_cut_mesh(mesh: FundamentalMesh, fields, spec: DomainSpec, theta: float = 1e-6,
                   refine: int = 0, chunk: int = _CHUNK) -> CutMesh:
    """Cut cells of every (cell, domain) pair with volume above ``theta`` times the cell volume."""
    return _build(mesh, fields, spec, theta, refine, chunk, voxel=False)


def build_voxel_mesh(mesh: FundamentalMesh, fields, spec: DomainSpec) -> CutMesh:
    """Fitted voxel DG: every cell is labelled by the domain at its centre and kept whole."""
    return _build(mesh, fields, spec, 0.0, 0, _CHUNK, voxel=True)


def _build(mesh, fields, spec, theta, refine, chunk, voxel):
    fields = list(fields)
    if _check_same_mesh(fields) is not mesh:
        raise ValueError("level-set fields are not defined on this mesh")
    if len(fields) != spec.n_level_sets:
        raise ValueError(f"{len(fields)} fields given, domain spec has {spec.n_level_sets} level sets")
    if not 0.0 <= theta < 1.0:
        raise ValueError("volume threshold must lie in [0, 1)")
    L = len(fields)
    D = len(spec.domains)
    table = spec.table
    n = mesh.n
    all_cells = np.arange(mesh.n_cells)
    cv = np.stack([f.cell_values(all_cells) for f in fields], axis=1)  # (C, L, 8)
    neg, pos, center = _classify(cv)
    center_bits = _bits(center > 0)
    if voxel:
        is_cut = np.zeros(mesh.n_cells, dtype=bool)
        cell_dom = table[center_bits]
    else:
        is_cut = ~np.all(neg | pos, axis=1)
        cell_dom = np.where(is_cut, -1, table[_bits(pos)])
    cellvol = mesh.cell_volume
    edge = mesh.edge

    # volume pieces of cut cells -------------------------------------------------
    cut_ids = np.flatnonzero(is_cut)
    tets_l, tkey_l, tvol_l = [], [], []
    itri_l, icell_l, ineg_l, ipos_l = [], [], [], []
    # volume of each fundamental cell not owned by any cut cell (air and slivers)
    unassigned = np.where(~is_cut & (cell_dom < 0), cellvol, 0.0)
    for s in range(0, len(cut_ids), chunk):
        ids = cut_ids[s:s + chunk]
        sub = subdivide(cv[ids], refine)
        parent = ids[sub["tet_cell"]]
        dom = table[sub["tet_bits"]]
        vol = tet_volumes(sub["tets"]) * cellvol
        air = dom < 0
        np.add.at(unassigned, parent[air], vol[air])
        keep = ~air
        tets_l.append(sub["tets"][keep])
        tkey_l.append(parent[keep] * D + dom[keep])
        tvol_l.append(vol[keep])
        dn = table[sub["tri_bits"]]
        dp = table[sub["tri_bits"] | (1 << sub["tri_ls"])]
        ks = dn != dp
        itri_l.append(sub["tris"][ks])
        icell_l.append(ids[sub["tri_cell"][ks]])
        ineg_l.append(dn[ks])
        ipos_l.append(dp[ks])
    tets = np.concatenate(tets_l) if tets_l else np.empty((0, 4, 3))
    tkey = np.concatenate(tkey_l) if tkey_l else np.empty(0, dtype=np.int64)
    tvol = np.concatenate(tvol_l) if tvol_l else np.empty(0)
    del tets_l, tkey_l, tvol_l

    ukeys, inv = np.unique(tkey, return_inverse=True)
    uvol = np.bincount(inv, weights=tvol, minlength=len(ukeys))
    kept = uvol > theta * cellvol
    dropped_parent = ukeys[~kept] // D
    np.add.at(unassigned, dropped_parent, uvol[~kept])
    full_cells = np.flatnonzero(cell_dom >= 0)
    full_keys = full_cells * D + cell_dom[full_cells]
    keys = np.concatenate([full_keys, ukeys[kept]])
    is_full = np.concatenate([np.ones(len(full_keys), bool), np.zeros(int(kept.sum()), bool)])
    o = np.argsort(keys, kind="stable")
    keys, is_full = keys[o], is_full[o]
    parent = keys // D
    domain = keys % D
    N = len(keys)

    # tets by owner
    towner = _lookup(keys, tkey, np.ones(len(tkey), bool))
    ok = towner >= 0
    tets, tvol, towner = tets[ok], tvol[ok], towner[ok]
    o = np.argsort(towner, kind="stable")
    tets, tvol, towner = tets[o], tvol[o], towner[o]

    volume = np.where(is_full, cellvol, 0.0)
    centroid = mesh.cell_centers(parent).astype(float)
    diameter = np.where(is_full, float(np.linalg.norm(edge)), 0.0)
    if len(tets):
        volume = volume + np.bincount(towner, weights=tvol, minlength=N)
        tc = tets.mean(axis=1)
        cw = np.stack([np.bincount(towner, weights=tvol * tc[:, a], minlength=N) for a in range(3)], axis=1)
        cut = ~is_full
        centroid[cut] = mesh.cell_lo(parent[cut]) + cw[cut] / volume[cut, None] * edge
        starts = np.searchsorted(towner, np.arange(N))
        has = np.flatnonzero(cut)
        mn = np.minimum.reduceat(tets.min(axis=1), starts[has], axis=0)
        mx = np.maximum.reduceat(tets.max(axis=1), starts[has], axis=0)
        diameter[has] = np.linalg.norm((mx - mn) * edge, axis=1)

    # interface triangles inside cells -----------------------------------------
    itri = np.concatenate(itri_l) if itri_l else np.empty((0, 3, 3))
    icell = np.concatenate(icell_l) if icell_l else np.empty(0, dtype=np.int64)
    ineg = np.concatenate(ineg_l) if ineg_l else np.empty(0, dtype=np.int64)
    ipos = np.concatenate(ipos_l) if ipos_l else np.empty(0, dtype=np.int64)
    del itri_l
    id_neg = _lookup(keys, icell * D + ineg, ineg >= 0)
    id_pos = _lookup(keys, icell * D + ipos, ipos >= 0)
    itri_g = mesh.cell_lo(icell)[:, None, :] + itri * edge
    nrm = tri_normals(itri_g)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    pieces_tri, pieces_in, pieces_out, pieces_nrm = [], [], [], []
    patches, patch_owner = [], []
    both = (id_neg >= 0) & (id_pos >= 0)
    ins = np.minimum(id_neg, id_pos)
    flip = both & (ins == id_pos)
    nn = np.where(flip[:, None], -nrm, nrm)
    pieces_tri.append(itri_g[both])
    pieces_in.append(ins[both])
    pieces_out.append(np.maximum(id_neg, id_pos)[both])
    pieces_nrm.append(nn[both])
    b1 = (id_neg >= 0) & (ipos < 0)
    patches.append(itri_g[b1]); patch_owner.append(id_neg[b1])
    b2 = (id_pos >= 0) & (ineg < 0)
    patches.append(itri_g[b2][:, [0, 2, 1]]); patch_owner.append(id_pos[b2])

    # clipped fundamental faces ---------------------------------------------------
    active = is_cut | (cell_dom >= 0)
    quad_lo, quad_axis, quad_in, quad_out = [], [], [], []
    for a in range(3):
        # face (i, j, k) with index i along axis a sits between cells i-1 and i
        g = np.indices((n + 1, n, n)).reshape(3, -1)
        ijk = np.empty_like(g)
        order = [a] + [x for x in range(3) if x != a]
        for r, ax in enumerate(order):
            ijk[ax] = g[r]
        ijk = ijk.T
        lo_ijk = ijk.copy()
        lo_ijk[:, a] -= 1
        has_lo = ijk[:, a] > 0
        has_hi = ijk[:, a] < n
        c_lo = np.where(has_lo, mesh.cell_index(np.clip(lo_ijk, 0, n - 1)), -1)
        c_hi = np.where(has_hi, mesh.cell_index(np.clip(ijk, 0, n - 1)), -1)
        act_lo = has_lo & active[np.maximum(c_lo, 0)]
        act_hi = has_hi & active[np.maximum(c_hi, 0)]
        sel = act_lo | act_hi
        c_lo, c_hi, has_lo, has_hi, ijk = c_lo[sel], c_hi[sel], has_lo[sel], has_hi[sel], ijk[sel]
        cut_lo = has_lo & is_cut[np.maximum(c_lo, 0)]
        cut_hi = has_hi & is_cut[np.maximum(c_hi, 0)]
        face_lo = mesh.lo + ijk * edge

        # both sides uncut: whole face
        A = ~(cut_lo | cut_hi)
        d_lo = np.where(has_lo, cell_dom[np.maximum(c_lo, 0)], -1)
        d_hi = np.where(has_hi, cell_dom[np.maximum(c_hi, 0)], -1)
        _face_pieces_whole(mesh, a, A, c_lo, c_hi, d_lo, d_hi, face_lo, keys, D,
                           quad_lo, quad_axis, quad_in, quad_out, patches, patch_owner)

        B = np.flatnonzero(cut_lo | cut_hi)
        for s0 in range(0, len(B), chunk):
            idx = B[s0:s0 + chunk]
            _face_pieces_cut(mesh, a, idx, c_lo, c_hi, has_lo, face_lo, cv, center_bits, table, keys, D,
                             refine, pieces_tri, pieces_in, pieces_out, pieces_nrm,
                             quad_lo, quad_axis, quad_in, quad_out, patches, patch_owner)

    ftri = np.concatenate(pieces_tri)
    f_in = np.concatenate(pieces_in)
    f_out = np.concatenate(pieces_out)
    ftri_n = np.concatenate(pieces_nrm)
    qlo = np.concatenate(quad_lo) if quad_lo else np.empty((0, 3))
    qax = np.concatenate(quad_axis) if quad_axis else np.empty(0, dtype=np.int64)
    q_in = np.concatenate(quad_in) if quad_in else np.empty(0, dtype=np.int64)
    q_out = np.concatenate(quad_out) if quad_out else np.empty(0, dtype=np.int64)

    pair = np.concatenate([f_in * N + f_out, q_in * N + q_out])
    upair, pinv = np.unique(pair, return_inverse=True)
    facet_inside = upair // N
    facet_outside = upair % N
    t_facet = pinv[:len(ftri)]
    q_facet = pinv[len(ftri):]
    o = np.argsort(t_facet, kind="stable")
    ftri, ftri_n, t_facet = ftri[o], ftri_n[o], t_facet[o]
    o = np.argsort(q_facet, kind="stable")
    qlo, qax, q_facet = qlo[o], qax[o], q_facet[o]

    ptris = np.concatenate(patches) if patches else np.empty((0, 3, 3))
    powner = np.concatenate(patch_owner) if patch_owner else np.empty(0, dtype=np.int64)
    o = np.argsort(powner, kind="stable")

    return CutMesh(mesh, spec, fields, theta, refine, voxel,
                   parent, domain, is_full, volume, centroid, diameter,
                   tets, towner, facet_inside, facet_outside,
                   ftri, ftri_n, t_facet, qlo, qax, q_facet,
                   ptris[o], powner[o], unassigned)


def _face_pieces_whole(mesh, a, A, c_lo, c_hi, d_lo, d_hi, face_lo, keys, D,
                       quad_lo, quad_axis, quad_in, quad_out, patches, patch_owner):
    i_lo = _lookup(keys, c_lo * D + d_lo, A & (d_lo >= 0))
    i_hi = _lookup(keys, c_hi * D + d_hi, A & (d_hi >= 0))
    both = (i_lo >= 0) & (i_hi >= 0)
    quad_lo.append(face_lo[both])
    quad_axis.append(np.full(int(both.sum()), a, dtype=np.int64))
    quad_in.append(i_lo[both])
    quad_out.append(i_hi[both])
    m1 = (i_lo >= 0) & (d_hi < 0) & A
    m2 = (i_hi >= 0) & (d_lo < 0) & A
    if np.any(m1) or np.any(m2):
        sel = m1 | m2
        q = np.array([_quad_vertices(p, a, mesh.edge) for p in face_lo[sel]]).reshape(-1, 4, 3)
        T = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
        m1, m2, i_lo, i_hi = (np.concatenate([v[sel], v[sel]]) for v in (m1, m2, i_lo, i_hi))
        _patches_from_face(a, T, m1, m2, i_lo, i_hi, patches, patch_owner)


def _face_pieces_cut(mesh, a, idx, c_lo, c_hi, has_lo, face_lo, cv, center_bits, table, keys, D, refine,
                     pieces_tri, pieces_in, pieces_out, pieces_nrm,
                     quad_lo, quad_axis, quad_in, quad_out, patches, patch_owner):
    edge = mesh.edge
    host_lo = has_lo[idx]
    for side, host_mask in ((1, host_lo), (0, ~host_lo)):
        sub_idx = idx[host_mask]
        if len(sub_idx) == 0:
            continue
        host = np.where(side == 1, c_lo[sub_idx], c_hi[sub_idx])
        hv = cv[host]  # (F, L, 8)
        fv = hv[:, :, FACE_CORNERS[(a, side)]]
        all_pos = np.all(fv > 0, axis=2)
        all_np = np.all(fv <= 0, axis=2)
        uni = np.all(all_pos | all_np, axis=1)
        # uniform faces: one quad piece
        u = np.flatnonzero(uni)
        ubits = _bits(all_pos[u])
        uzero = _bits(np.all(fv[u] == 0, axis=2))
        _emit(mesh, a, sub_idx[u], None, ubits, uzero, c_lo, c_hi, face_lo, center_bits, table, keys, D,
              pieces_tri, pieces_in, pieces_out, pieces_nrm, quad_lo, quad_axis, quad_in, quad_out,
              patches, patch_owner)
        # cut faces: clipped triangle fans in the host's local frame
        c = np.flatnonzero(~uni)
        if len(c) == 0:
            continue
        ft = face_tris(a, side, refine)
        tris, face, bits, zero = subdivide_faces(hv[c], np.broadcast_to(ft, (len(c),) + ft.shape))
        fidx = sub_idx[c][face]
        tg = mesh.cell_lo(host[c][face])[:, None, :] + tris * edge
        _emit(mesh, a, fidx, tg, bits, zero, c_lo, c_hi, face_lo, center_bits, table, keys, D,
              pieces_tri, pieces_in, pieces_out, pieces_nrm, quad_lo, quad_axis, quad_in, quad_out,
              patches, patch_owner)


def _emit(mesh, a, fidx, tris, bits, zero, c_lo, c_hi, face_lo, center_bits, table, keys, D,
          pieces_tri, pieces_in, pieces_out, pieces_nrm, quad_lo, quad_axis, quad_in, quad_out,
          patches, patch_owner):
    """Assign face pieces (quads when ``tris`` is None) to the cut cells on both sides."""
    lo_c = c_lo[fidx]
    hi_c = c_hi[fidx]
    dom = []
    for cc in (lo_c, hi_c):
        cb = center_bits[np.maximum(cc, 0)]
        b = (bits & ~zero) | (zero & cb)
        dom.append(np.where(cc >= 0, table[b], -1))
    d_lo, d_hi = dom
    i_lo = _lookup(keys, lo_c * D + d_lo, (lo_c >= 0) & (d_lo >= 0))
    i_hi = _lookup(keys, hi_c * D + d_hi, (hi_c >= 0) & (d_hi >= 0))
    both = (i_lo >= 0) & (i_hi >= 0)
    if tris is None:
        quad_lo.append(face_lo[fidx][both])
        quad_axis.append(np.full(int(both.sum()), a, dtype=np.int64))
        quad_in.append(i_lo[both])
        quad_out.append(i_hi[both])
        m1 = (i_lo >= 0) & (d_hi < 0)
        m2 = (i_hi >= 0) & (d_lo < 0)
        if np.any(m1) or np.any(m2):
            q = np.array([_quad_vertices(p, a, mesh.edge) for p in face_lo[fidx]]).reshape(-1, 4, 3)
            T = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
            owner_lo = np.concatenate([i_lo, i_lo])
            owner_hi = np.concatenate([i_hi, i_hi])
            _patches_from_face(a, T, np.concatenate([m1, m1]), np.concatenate([m2, m2]), owner_lo, owner_hi,
                               patches, patch_owner)
        return
    e = np.zeros(3)
    e[a] = 1.0
    pieces_tri.append(tris[both])
    pieces_in.append(i_lo[both])
    pieces_out.append(i_hi[both])
    pieces_nrm.append(np.broadcast_to(e, (int(both.sum()), 3)).copy())
    m1 = (i_lo >= 0) & (d_hi < 0)
    m2 = (i_hi >= 0) & (d_lo < 0)
    _patches_from_face(a, tris, m1, m2, i_lo, i_hi, patches, patch_owner)


def _patches_from_face(a, T, m_lo, m_hi, owner_lo, owner_hi, patches, patch_owner):
    """Outer-boundary triangles on a fundamental face, oriented outward from their owner."""
    if not (np.any(m_lo) or np.any(m_hi)):
        return
    n = tri_normals(T)
    up = n[:, a] > 0
    # owner below the face: outward is +e_a
    t = T[m_lo].copy()
    f = ~up[m_lo]
    t[f] = t[f][:, [0, 2, 1]]
    patches.append(t); patch_owner.append(owner_lo[m_lo])
    t = T[m_hi].copy()
    f = up[m_hi]
    t[f] = t[f][:, [0, 2, 1]]
    patches.append(t); patch_owner.append(owner_hi[m_hi])


def volume_quadrature(cm: CutMesh, cell: int, order: int):
    """Points (global) and weights of one cut cell; weights sum to its volume."""
    tet_rule(order)
    p = int(cm.parent[cell])
    lo = cm.mesh.cell_lo(p)
    edge = cm.mesh.edge
    if cm.full[cell]:
        xi, w = cube_rule(order)
        return lo + xi * edge, w * cm.mesh.cell_volume
    lam, w = tet_rule(order)
    T = cm.tets[cm.tet_start[cell]:cm.tet_start[cell + 1]]
    xi = np.einsum("qv,pvi->pqi", lam, T).reshape(-1, 3)
    wt = (tet_volumes(T)[:, None] * w[None, :]).reshape(-1) * cm.mesh.cell_volume
    return lo + xi * edge, wt


def facet_quadrature(cm: CutMesh, facet: int, order: int):
    """Points, weights and unit normals (inside -> outside) of one facet."""
    tri_rule(order)
    f = cm.facet(facet)
    lam, w = tri_rule(order)
    pts, wts, nrm = [], [], []
    for t, nvec, area in zip(f.triangles, f.normals[:len(f.triangles)], f.areas[:len(f.triangles)]):
        pts.append(lam @ t)
        wts.append(area * w)
        nrm.append(np.repeat(nvec[None, :], len(w), axis=0))
    uv, wq = square_rule(order)
    for q, nvec, area in zip(f.quads, f.normals[len(f.triangles):], f.areas[len(f.triangles):]):
        pts.append(q[0] + uv[:, :1] * (q[1] - q[0]) + uv[:, 1:] * (q[3] - q[0]))
        wts.append(area * wq)
        nrm.append(np.repeat(nvec[None, :], len(wq), axis=0))
    if not pts:
        return np.empty((0, 3)), np.empty(0), np.empty((0, 3))
    return np.vstack(pts), np.concatenate(wts), np.vstack(nrm)
