"""2D triangular meshes with no-slip / slip-wall boundary tagging.

Boundary edges are stored oriented so the interior lies to the left; the
outward normal of an edge (a, b) is then the edge vector rotated by -90
degrees.  Tag 0 is the no-slip wall (Dirichlet), tag 1 the impermeable slip
wall.  The ASCII file format has three sections (NODES / TRIANGLES /
BOUNDARY), one record per line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import InvalidDomainError, MeshFormatError, MeshValidationError

GAMMA0 = 0
GAMMA1 = 1
_TAG_NAMES = {GAMMA0: "Gamma0", GAMMA1: "Gamma1"}
_TAG_IDS = {v: k for k, v in _TAG_NAMES.items()}

SIDES = ("bottom", "right", "top", "left")


@dataclass
class Mesh:
    nodes: np.ndarray          # (n, 2) float
    triangles: np.ndarray      # (m, 3) int, counterclockwise
    boundary_edges: np.ndarray  # (k, 2) int, interior to the left
    boundary_tags: np.ndarray   # (k,) int in {GAMMA0, GAMMA1}

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=int).reshape(-1, 2)
        self.boundary_tags = np.asarray(self.boundary_tags, dtype=int).reshape(-1)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def gamma_edges(self, tag):
        return self.boundary_edges[self.boundary_tags == tag]

    def total_area(self):
        return float(np.sum(triangle_areas(self)))

    def gamma_length(self, tag):
        e = self.gamma_edges(tag)
        d = self.nodes[e[:, 1]] - self.nodes[e[:, 0]]
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def triangle_areas(mesh: Mesh):
    p = mesh.nodes[mesh.triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def unique_edges(triangles):
    """Sorted vertex-pair edges and the (m, 3) per-triangle edge index map.

    Local edge e of a triangle is the one opposite local vertex e.
    """
    tri = np.asarray(triangles, dtype=int)
    raw = np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(3, -1).T
    return edges, tri_edges


def _directed_boundary_of(triangles):
    """Map sorted edge pair -> CCW-directed pair, for edges used exactly once."""
    tri = np.asarray(triangles, dtype=int)
    count: Dict[Tuple[int, int], int] = {}
    directed: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for t in tri:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
            directed[key] = (a, b)
    return {k: v for k, v in directed.items() if count[k] == 1}, count


def validate_mesh(mesh: Mesh):
    """Raise MeshValidationError on orientation, coverage, or tagging defects."""
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= mesh.n_nodes):
        raise MeshValidationError("triangle references a nonexistent node")
    areas = triangle_areas(mesh)
    bad = np.nonzero(areas <= 0)[0]
    if bad.size:
        raise MeshValidationError(f"triangle {bad[0]} has nonpositive area (clockwise or degenerate)")

    boundary, _count = _directed_boundary_of(mesh.triangles)
    declared = {}
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        key = (min(a, b), max(a, b))
        if key in declared:
            raise MeshValidationError(f"boundary edge ({a}, {b}) listed twice")
        declared[key] = int(tag)
    missing = set(boundary) - set(declared)
    if missing:
        a, b = sorted(missing)[0]
        raise MeshValidationError(f"untagged boundary edge ({a}, {b})")
    spurious = set(declared) - set(boundary)
    if spurious:
        a, b = sorted(spurious)[0]
        raise MeshValidationError(f"edge ({a}, {b}) is tagged but not a boundary edge")
    for tag in declared.values():
        if tag not in _TAG_NAMES:
            raise MeshValidationError(f"unknown boundary tag id {tag}")
    if not any(t == GAMMA0 for t in declared.values()):
        raise InvalidDomainError("no-slip part Gamma0 is empty")

    # closed loops: every boundary vertex must touch exactly two boundary edges
    flat = np.asarray(list(boundary.values()), dtype=int).reshape(-1)
    verts, counts = np.unique(flat, return_counts=True)
    if np.any(counts != 2):
        v = verts[np.nonzero(counts != 2)[0][0]]
        raise MeshValidationError(f"boundary is not a closed loop at node {v}")


def _orient_boundary(mesh: Mesh):
    """Reorient declared boundary edges to the CCW traversal of the owning triangle."""
    boundary, _ = _directed_boundary_of(mesh.triangles)
    out = np.array([boundary[(min(a, b), max(a, b))] for a, b in mesh.boundary_edges], dtype=int)
    mesh.boundary_edges = out.reshape(-1, 2)


def generate_rectangle(lx, ly, nx, ny, gamma1_sides=frozenset()):
    """Structured crossed-triangle mesh of [0, lx] x [0, ly].

    Each cell is split into four triangles through its centre.  Sides in
    ``gamma1_sides`` (subset of bottom/right/top/left) become the slip wall;
    at least one side must remain no-slip.
    """
    if lx <= 0 or ly <= 0:
        raise InvalidDomainError("rectangle side lengths must be positive")
    if nx < 1 or ny < 1:
        raise InvalidDomainError("need nx, ny >= 1")
    g1 = frozenset(gamma1_sides)
    unknown = g1 - set(SIDES)
    if unknown:
        raise InvalidDomainError(f"unknown side names {sorted(unknown)}")
    if g1 == set(SIDES):
        raise InvalidDomainError("Gamma0 would be empty: leave at least one side no-slip")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    grid = np.array([(x, y) for y in ys for x in xs])
    centres = np.array([(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]))
                        for j in range(ny) for i in range(nx)])
    nodes = np.vstack([grid, centres])
    n_grid = len(grid)

    def gid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            c = n_grid + j * nx + i
            bl, br = gid(i, j), gid(i + 1, j)
            tl, tr = gid(i, j + 1), gid(i + 1, j + 1)
            tris += [(bl, br, c), (br, tr, c), (tr, tl, c), (tl, bl, c)]

    edges, tags = [], []

    def tag_of(side):
        return GAMMA1 if side in g1 else GAMMA0

    for i in range(nx):
        edges.append((gid(i, 0), gid(i + 1, 0)))
        tags.append(tag_of("bottom"))
        edges.append((gid(i + 1, ny), gid(i, ny)))
        tags.append(tag_of("top"))
    for j in range(ny):
        edges.append((gid(nx, j), gid(nx, j + 1)))
        tags.append(tag_of("right"))
        edges.append((gid(0, j + 1), gid(0, j)))
        tags.append(tag_of("left"))

    mesh = Mesh(nodes, np.array(tris), np.array(edges), np.array(tags))
    validate_mesh(mesh)
    return mesh


def edge_normals(mesh: Mesh):
    """Outward unit normal per boundary edge (interior-left orientation)."""
    d = mesh.nodes[mesh.boundary_edges[:, 1]] - mesh.nodes[mesh.boundary_edges[:, 0]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    return np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]


def rotate_minus90(v):
    """Fixed tangent convention: tau = nu rotated by -90 degrees."""
    v = np.asarray(v, dtype=float)
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


@dataclass
class BoundaryFrame:
    """Per slip-wall vertex: outward unit normal and the -90-degree tangent."""

    node_ids: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray

    def frame_of(self, node):
        i = int(np.nonzero(self.node_ids == node)[0][0])
        return self.normals[i], self.tangents[i]


def boundary_frames(mesh: Mesh) -> BoundaryFrame:
    """Normal/tangent frames at Gamma1 vertices.

    Interior vertices of a straight side get the side normal; at a corner
    between two slip edges the normals are averaged and renormalized.
    """
    normals = edge_normals(mesh)
    acc: Dict[int, np.ndarray] = {}
    for (a, b), tag, nu in zip(mesh.boundary_edges, mesh.boundary_tags, normals):
        if tag != GAMMA1:
            continue
        for v in (a, b):
            acc[v] = acc.get(v, np.zeros(2)) + nu
    ids = np.array(sorted(acc), dtype=int)
    nus = np.array([acc[v] for v in ids]) if len(ids) else np.zeros((0, 2))
    if len(ids):
        lens = np.linalg.norm(nus, axis=1)
        if np.any(lens < 1e-12):
            raise MeshValidationError("degenerate averaged normal at a slip corner")
        nus = nus / lens[:, None]
    return BoundaryFrame(node_ids=ids, normals=nus, tangents=rotate_minus90(nus))


def save_mesh(mesh: Mesh, path):
    """Plain ASCII: NODES / TRIANGLES / BOUNDARY sections, round-trip exact."""
    with open(path, "w") as fh:
        fh.write(f"NODES {mesh.n_nodes}\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"TRIANGLES {mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        fh.write(f"BOUNDARY {len(mesh.boundary_edges)}\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{a} {b} {_TAG_NAMES[int(tag)]}\n")


def load_mesh(path) -> Mesh:
    """Parse and validate a mesh file; parse errors carry the line number."""
    with open(path) as fh:
        lines = fh.readlines()

    pos = 0

    def next_record():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            stripped = lines[pos - 1].strip()
            if stripped and not stripped.startswith("#"):
                return stripped, pos
        return None, pos

    def expect_section(name):
        rec, ln = next_record()
        if rec is None:
            raise MeshFormatError(f"missing section {name}", ln)
        parts = rec.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} <count>', got {rec!r}", ln)
        try:
            return int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad count in section {name}", ln)

    n = expect_section("NODES")
    nodes = np.empty((n, 2))
    for i in range(n):
        rec, ln = next_record()
        if rec is None:
            raise MeshFormatError("unexpected end of file in NODES", ln)
        parts = rec.split()
        if len(parts) != 2:
            raise MeshFormatError(f"expected 'x y', got {rec!r}", ln)
        try:
            nodes[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"bad coordinate in {rec!r}", ln)

    m = expect_section("TRIANGLES")
    tris = np.empty((m, 3), dtype=int)
    for i in range(m):
        rec, ln = next_record()
        if rec is None:
            raise MeshFormatError("unexpected end of file in TRIANGLES", ln)
        parts = rec.split()
        if len(parts) != 3:
            raise MeshFormatError(f"expected three node ids, got {rec!r}", ln)
        try:
            tris[i] = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"bad node id in {rec!r}", ln)

    k = expect_section("BOUNDARY")
    edges = np.empty((k, 2), dtype=int)
    tags = np.empty(k, dtype=int)
    for i in range(k):
        rec, ln = next_record()
        if rec is None:
            raise MeshFormatError("unexpected end of file in BOUNDARY", ln)
        parts = rec.split()
        if len(parts) != 3:
            raise MeshFormatError(f"expected 'a b tag', got {rec!r}", ln)
        if parts[2] not in _TAG_IDS:
            raise MeshFormatError(f"unknown boundary tag {parts[2]!r}", ln)
        try:
            edges[i] = [int(parts[0]), int(parts[1])]
        except ValueError:
            raise MeshFormatError(f"bad node id in {rec!r}", ln)
        tags[i] = _TAG_IDS[parts[2]]

    rec, ln = next_record()
    if rec is not None:
        raise MeshFormatError(f"trailing content {rec!r}", ln)

    mesh = Mesh(nodes, tris, edges, tags)
    validate_mesh(mesh)
    _orient_boundary(mesh)
    return mesh


def mesh_to_vtk(mesh: Mesh, path, title="mesh"):
    """Legacy ASCII VTK export of the triangulation."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g} 0.0\n")
        fh.write(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {mesh.n_triangles}\n")
        for _ in range(mesh.n_triangles):
            fh.write("5\n")
