"""2D simplicial meshes, their vertex-centered dual tessellation, and periodic torus meshes.

Coarse meshes are conforming triangulations with positive orientation and a
newest-vertex-bisection refinement path. The dual tessellation places one
polygonal control volume around each vertex, with corners at the barycenters
of incident triangles and midpoints of incident edges. Torus meshes are
uniform periodic triangulations of the centered unit cell, used by the
micro-scale cell problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MIN_ANGLE_DEG = 20.0


class MeshError(ValueError):
    """Raised for invalid mesh construction or refinement input."""


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def _rot(v):
    """Rotate 2-vectors by -90 degrees (x,y) -> (y,-x)."""
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def min_angles(vertices, triangles):
    """Smallest interior angle of each triangle, in degrees."""
    p = vertices[triangles]
    out = np.full(len(triangles), np.inf)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
        out = np.minimum(out, ang)
    return out


def p1_gradients(corner_coords):
    """Gradients of the three barycentric basis functions per triangle.

    ``corner_coords`` has shape (nt, 3, 2); returns (grads (nt,3,2), areas (nt,)).
    """
    p0, p1, p2 = corner_coords[:, 0], corner_coords[:, 1], corner_coords[:, 2]
    d1 = p1 - p0
    d2 = p2 - p0
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    g = np.empty_like(corner_coords)
    for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        e = corner_coords[:, b] - corner_coords[:, a]
        g[:, k, 0] = -e[:, 1]
        g[:, k, 1] = e[:, 0]
    g /= (2.0 * area)[:, None, None]
    return g, area


def _edge_table(triangles):
    """Canonical (min,max) edge list plus per-triangle edge ids and incidence."""
    edge_id = {}
    edges = []
    tri_edges = np.empty((len(triangles), 3), dtype=np.int64)
    edge_tris = []
    for ti, t in enumerate(triangles):
        for k in range(3):
            a, b = int(t[k]), int(t[(k + 1) % 3])
            key = (a, b) if a < b else (b, a)
            e = edge_id.get(key)
            if e is None:
                e = len(edges)
                edge_id[key] = e
                edges.append(key)
                edge_tris.append([ti])
            else:
                edge_tris[e].append(ti)
            tri_edges[ti, k] = e
    return np.array(edges, dtype=np.int64), tri_edges, edge_tris, edge_id


@dataclass
class CoarseMesh:
    """Conforming triangulation with refinement bookkeeping.

    ``triangles[t, 0]`` is the newest vertex; the refinement edge is the one
    opposite to it, ``(triangles[t,1], triangles[t,2])``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray
    generation: np.ndarray
    min_angle_deg: float = DEFAULT_MIN_ANGLE_DEG

    def __post_init__(self):
        self.vertices = _freeze(np.asarray(self.vertices, dtype=float))
        self.triangles = _freeze(np.asarray(self.triangles, dtype=np.int64))
        self.boundary_vertices = _freeze(np.asarray(self.boundary_vertices, dtype=np.int64))
        self.generation = _freeze(np.asarray(self.generation, dtype=np.int64))
        self.edges, self.tri_edges, self.edge_tris, self._edge_index = _edge_table(self.triangles)
        self.edges = _freeze(self.edges)
        self.areas = _freeze(signed_areas(self.vertices, self.triangles))
        self._validate()

    def _validate(self):
        if np.any(self.areas <= 0.0):
            raise MeshError("all triangle signed areas must be strictly positive")
        counts = np.array([len(ts) for ts in self.edge_tris])
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: edge shared by more than 2 triangles")
        ang = min_angles(self.vertices, self.triangles).min()
        if ang < self.min_angle_deg - 1e-9:
            raise MeshError(
                "shape regularity violated: min angle %.3f deg < %.3f deg"
                % (ang, self.min_angle_deg)
            )
        bset = set(self.boundary_edge_vertices())
        if bset != set(self.boundary_vertices.tolist()):
            raise MeshError("boundary_vertices inconsistent with edge incidence")

    def boundary_edge_vertices(self):
        verts = set()
        for e, ts in enumerate(self.edge_tris):
            if len(ts) == 1:
                verts.add(int(self.edges[e, 0]))
                verts.add(int(self.edges[e, 1]))
        return sorted(verts)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def interior_vertices(self):
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = False
        return np.nonzero(mask)[0]

    def total_area(self):
        return float(self.areas.sum())

    def h_max(self):
        p = self.vertices[self.triangles]
        lengths = [np.linalg.norm(p[:, (k + 1) % 3] - p[:, k], axis=1) for k in range(3)]
        return float(np.max(lengths))

    def edge_index(self, a, b):
        key = (a, b) if a < b else (b, a)
        return self._edge_index[key]

    def vertex_triangles(self):
        """List of incident triangle ids per vertex."""
        out = [[] for _ in range(self.n_vertices)]
        for ti, t in enumerate(self.triangles):
            for v in t:
                out[int(v)].append(ti)
        return out


def build_structured(nx, ny, domain=(0.0, 0.0, 1.0, 1.0)):
    """Criss-cross triangulation of an axis-aligned rectangle.

    Each of the nx*ny quads is split along its anti-diagonal, giving
    2*nx*ny right triangles ordered so the right-angle vertex is the
    newest vertex (refinement edge = hypotenuse).
    """
    if nx < 1 or ny < 1:
        raise MeshError("subdivision counts must be positive, got (%s, %s)" % (nx, ny))
    x0, y0, x1, y1 = domain
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate domain %s" % (domain,))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    vid = lambda i, j: i * (ny + 1) + j
    pts = np.array([[xs[i], ys[j]] for i in range(nx + 1) for j in range(ny + 1)])
    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v01))
            tris.append((v11, v01, v10))
    tris = np.array(tris, dtype=np.int64)
    boundary = [
        vid(i, j)
        for i in range(nx + 1)
        for j in range(ny + 1)
        if i in (0, nx) or j in (0, ny)
    ]
    return CoarseMesh(pts, tris, np.array(sorted(boundary)), np.zeros(len(tris), dtype=np.int64))


def refine(mesh, marked):
    """Newest-vertex bisection of the marked triangles, with closure.

    Returns a new conforming mesh; marked triangles are bisected at least
    once. An empty marked set returns a mesh identical to the input.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if len(marked) and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise MeshError("marked triangle index out of range")
    if len(marked) == 0:
        return CoarseMesh(
            mesh.vertices.copy(),
            mesh.triangles.copy(),
            mesh.boundary_vertices.copy(),
            mesh.generation.copy(),
            mesh.min_angle_deg,
        )

    tris = mesh.triangles
    edge_marked = np.zeros(len(mesh.edges), dtype=bool)
    # refinement edge of triangle t is its local edge 1: (t[1], t[2])
    ref_edge = mesh.tri_edges[:, 1]
    edge_marked[ref_edge[marked]] = True
    # closure: any triangle with a marked edge must have its refinement edge marked
    while True:
        tri_has_marked = edge_marked[mesh.tri_edges].any(axis=1)
        need = tri_has_marked & ~edge_marked[ref_edge]
        if not need.any():
            break
        edge_marked[ref_edge[need]] = True

    verts = [tuple(p) for p in mesh.vertices]
    midpoint_of = {}
    boundary = set(int(v) for v in mesh.boundary_vertices)
    boundary_edge = np.array([len(ts) == 1 for ts in mesh.edge_tris])
    for e in np.nonzero(edge_marked)[0]:
        a, b = mesh.edges[e]
        mid = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        midpoint_of[e] = len(verts)
        verts.append(tuple(mid))
        if boundary_edge[e]:
            boundary.add(len(verts) - 1)

    new_tris = []
    new_gen = []

    def emit(t0, t1, t2, gen, e12, e20, e01):
        # edge ids of (t1,t2), (t2,t0), (t0,t1); None for edges created here
        if e12 is None or not edge_marked[e12]:
            new_tris.append((t0, t1, t2))
            new_gen.append(gen)
            return
        m = midpoint_of[e12]
        emit(m, t2, t0, gen + 1, e20, None, None)
        emit(m, t0, t1, gen + 1, e01, None, None)

    for ti, t in enumerate(tris):
        e01, e12, e20 = mesh.tri_edges[ti]
        emit(int(t[0]), int(t[1]), int(t[2]), int(mesh.generation[ti]), e12, e20, e01)

    return CoarseMesh(
        np.array(verts),
        np.array(new_tris, dtype=np.int64),
        np.array(sorted(boundary), dtype=np.int64),
        np.array(new_gen, dtype=np.int64),
        mesh.min_angle_deg,
    )


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _polygon_is_convex(poly, tol=1e-12):
    n = len(poly)
    d = np.roll(poly, -1, axis=0) - poly
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    scale = max(np.abs(cross).max(), 1e-300)
    return bool(np.all(cross >= -tol * scale))


@dataclass
class DualMesh:
    """Vertex-centered control volumes of a coarse mesh.

    One polygonal cell per vertex; the interface between two neighboring
    cells is stored as individual straight segments (edge midpoint to
    triangle barycenter), each with a scaled normal oriented from cell
    ``seg_a`` to cell ``seg_b``.
    """

    mesh: CoarseMesh
    cell_polygons: list = field(repr=False)
    cell_area: np.ndarray = field(repr=False)
    H_D: np.ndarray = field(repr=False)
    C_P: np.ndarray = field(repr=False)
    interior: np.ndarray = field(repr=False)
    seg_tri: np.ndarray = field(repr=False)
    seg_a: np.ndarray = field(repr=False)
    seg_b: np.ndarray = field(repr=False)
    seg_mid: np.ndarray = field(repr=False)
    seg_normal: np.ndarray = field(repr=False)

    @property
    def n_cells(self):
        return self.mesh.n_vertices

    def cell_center(self, i):
        return self.mesh.vertices[i]

    @property
    def seg_length(self):
        return np.linalg.norm(self.seg_normal, axis=1)

    @property
    def seg_unit_normal(self):
        return self.seg_normal / self.seg_length[:, None]


# integrals of the three P1 basis functions over the dual fragment around
# local vertex k, as multiples of |T|: owner weight and the two others
_FRAG_W_OWN = 11.0 / 54.0
_FRAG_W_OTH = 7.0 / 108.0


def fragment_weights():
    """Per-fragment integral weights of P1 basis functions, relative to |T|."""
    w = np.full((3, 3), _FRAG_W_OTH)
    np.fill_diagonal(w, _FRAG_W_OWN)
    return w


def build_dual(mesh):
    """Barycentric dual tessellation with per-cell geometry and interface segments."""
    nv = mesh.n_vertices
    verts = mesh.vertices
    tris = mesh.triangles
    p = verts[tris]
    bary = p.mean(axis=1)

    interior = np.ones(nv, dtype=bool)
    interior[mesh.boundary_vertices] = False

    # interface segments: per triangle, per vertex pair
    nt = mesh.n_triangles
    seg_tri = np.repeat(np.arange(nt), 3)
    seg_a = np.empty(3 * nt, dtype=np.int64)
    seg_b = np.empty(3 * nt, dtype=np.int64)
    seg_mid = np.empty((3 * nt, 2))
    seg_normal = np.empty((3 * nt, 2))
    for k in range(3):
        a = tris[:, k]
        b = tris[:, (k + 1) % 3]
        M = 0.5 * (verts[a] + verts[b])
        n = _rot(bary - M)
        flip = np.einsum("ij,ij->i", n, verts[b] - verts[a]) < 0
        n[flip] = -n[flip]
        sl = slice(k, 3 * nt, 3)
        seg_a[sl] = a
        seg_b[sl] = b
        seg_mid[sl] = 0.5 * (M + bary)
        seg_normal[sl] = n

    # cell polygons by angular sort of incident barycenters and edge midpoints
    vertex_tris = mesh.vertex_triangles()
    polygons = []
    cell_area = np.empty(nv)
    H_D = np.empty(nv)
    C_P = np.empty(nv)
    for i in range(nv):
        pts = []
        seen_edges = set()
        for ti in vertex_tris[i]:
            pts.append(bary[ti])
            t = tris[ti]
            for v in t:
                v = int(v)
                if v != i and (i, v) not in seen_edges:
                    seen_edges.add((i, v))
                    pts.append(0.5 * (verts[i] + verts[v]))
        pts = np.array(pts)
        rel = pts - verts[i]
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        order = np.argsort(ang, kind="stable")
        pts = pts[order]
        ang = ang[order]
        if interior[i]:
            poly = pts
        else:
            # rotate so the exterior angular gap sits at the seam, then close via x_i
            gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
            k = int(np.argmax(gaps))
            pts = np.roll(pts, -(k + 1), axis=0)
            poly = np.vstack([verts[i][None, :], pts])
        if _polygon_area(poly) < 0:
            poly = poly[::-1]
        polygons.append(poly)
        cell_area[i] = _polygon_area(poly)
        d = poly[:, None, :] - poly[None, :, :]
        H_D[i] = np.sqrt((d ** 2).sum(axis=2).max())
        C_P[i] = 1.0 / math.pi if _polygon_is_convex(poly) else 1.0

    return DualMesh(
        mesh=mesh,
        cell_polygons=polygons,
        cell_area=_freeze(cell_area),
        H_D=_freeze(H_D),
        C_P=_freeze(C_P),
        interior=_freeze(interior),
        seg_tri=_freeze(seg_tri),
        seg_a=_freeze(seg_a),
        seg_b=_freeze(seg_b),
        seg_mid=_freeze(seg_mid),
        seg_normal=_freeze(seg_normal),
    )


@dataclass
class TorusMesh:
    """Uniform periodic triangulation of the centered unit cell Y = (-1/2,1/2)^2.

    Vertices are the m^2 representative grid nodes; triangle corner
    coordinates are stored separately (pre-identification) so P1 gradients
    stay well defined across the seam. ``faces`` enumerates the 3*m^2
    geometric torus edges with their two incident triangles.
    """

    m: int
    vertices: np.ndarray
    triangles: np.ndarray
    tri_coords: np.ndarray
    face_tris: np.ndarray  # (nf, 2) incident triangle ids
    face_len: np.ndarray
    face_h: np.ndarray
    raw_representative: np.ndarray  # raw grid id -> canonical raw grid id

    def __post_init__(self):
        self.grads, self.areas = p1_gradients(self.tri_coords)
        self.grads = _freeze(self.grads)
        self.areas = _freeze(self.areas)
        self.bary = _freeze(self.tri_coords.mean(axis=1))

    @property
    def n_vertices(self):
        return self.m * self.m

    @property
    def n_triangles(self):
        return len(self.triangles)

    def representative(self, raw_ids):
        """Idempotent map from raw (m+1)^2 grid ids to canonical raw ids."""
        return self.raw_representative[np.asarray(raw_ids)]


def build_torus(m):
    """Periodic criss-cross triangulation of Y with m^2 quads (anti-diagonal split)."""
    if m < 2:
        raise MeshError("torus resolution m must be >= 2, got %d" % m)
    h = 1.0 / m
    mp = m + 1

    def raw(i, j):
        return i * mp + j

    def rep(i, j):
        return (i % m) * m + (j % m)

    raw_rep = np.empty(mp * mp, dtype=np.int64)
    for i in range(mp):
        for j in range(mp):
            raw_rep[raw(i, j)] = raw(i % m, j % m)

    verts = np.array([[-0.5 + i * h, -0.5 + j * h] for i in range(m) for j in range(m)])
    tris = []
    coords = []
    for i in range(m):
        for j in range(m):
            x0, y0 = -0.5 + i * h, -0.5 + j * h
            v00, v10 = rep(i, j), rep(i + 1, j)
            v01, v11 = rep(i, j + 1), rep(i + 1, j + 1)
            p00 = (x0, y0)
            p10 = (x0 + h, y0)
            p01 = (x0, y0 + h)
            p11 = (x0 + h, y0 + h)
            tris.append((v00, v10, v01))
            coords.append((p00, p10, p01))
            tris.append((v11, v01, v10))
            coords.append((p11, p01, p10))
    tris = np.array(tris, dtype=np.int64)
    coords = np.array(coords)

    # pair (triangle, local edge) slots by wrapped edge midpoint
    slots = {}
    face_tris = []
    face_len = []
    face_h = []
    for ti in range(len(tris)):
        for k in range(3):
            pa = coords[ti, k]
            pb = coords[ti, (k + 1) % 3]
            mid = 0.5 * (pa + pb)
            wrapped = (mid + 0.5) % 1.0 - 0.5
            key = (round(float(wrapped[0]), 9), round(float(wrapped[1]), 9))
            if key in slots:
                tj, kj, pa2, pb2 = slots.pop(key)
                # shift the partner triangle next to this one before measuring diam
                mid2 = 0.5 * (pa2 + pb2)
                delta = mid - mid2
                quad = np.vstack([coords[ti], coords[tj] + delta[None, :]])
                d = quad[:, None, :] - quad[None, :, :]
                face_tris.append((ti, tj))
                face_len.append(float(np.linalg.norm(pb - pa)))
                face_h.append(float(np.sqrt((d ** 2).sum(axis=2).max())))
            else:
                slots[key] = (ti, k, pa, pb)
    if slots:
        raise MeshError("torus pairing failed: %d unpaired faces" % len(slots))

    return TorusMesh(
        m=m,
        vertices=_freeze(verts),
        triangles=_freeze(tris),
        tri_coords=_freeze(coords),
        face_tris=_freeze(np.array(face_tris, dtype=np.int64)),
        face_len=_freeze(np.array(face_len)),
        face_h=_freeze(np.array(face_h)),
        raw_representative=_freeze(raw_rep),
    )
