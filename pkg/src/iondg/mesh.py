"""Structured 2D triangulations of box-with-rectangular-inclusion geometries.

The mesh is a conforming triangulation of an outer rectangle containing zero
or more axis-aligned intracellular (ICS) rectangles.  Cells are tagged with
the index of the inclusion they belong to (1..N) or 0 for the extracellular
(ECS) remainder.  Facets are classified as interior (same tag on both sides),
membrane (different tags) or exterior (boundary of the outer box).  Membrane
facets are oriented so that side 1 is the ICS-incident triangle; the unit
normal stored for a facet points from side 1 to side 2.

All coordinates are in meters.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError

# facet classes
INTERIOR = 0
MEMBRANE = 1
EXTERIOR = 2

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class GeometrySpec:
    """Outer box, ICS inclusions and structured resolution.

    box : (x0, x1, y0, y1) in meters
    ics_boxes : list of (x0, x1, y0, y1), disjoint, strictly inside the box,
        with corners on the n-by-m grid so the triangulation conforms.
    n, m : number of grid rectangles along x and y.
    """

    box: tuple
    ics_boxes: tuple = ()
    n: int = 16
    m: int = 16

    def __post_init__(self):
        x0, x1, y0, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"degenerate outer box {self.box}")
        if self.n < 1 or self.m < 1:
            raise MeshError(f"resolution must be positive, got ({self.n}, {self.m})")
        object.__setattr__(self, "ics_boxes", tuple(tuple(b) for b in self.ics_boxes))
        for b in self.ics_boxes:
            bx0, bx1, by0, by1 = b
            if not (bx1 > bx0 and by1 > by0):
                raise MeshError(f"degenerate ICS rectangle {b}")
            if not (bx0 > x0 and bx1 < x1 and by0 > y0 and by1 < y1):
                raise MeshError(f"ICS rectangle {b} not strictly inside outer box")
        for i, a in enumerate(self.ics_boxes):
            for b in self.ics_boxes[i + 1:]:
                if a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]:
                    raise MeshError(f"ICS rectangles {a} and {b} overlap")

    @property
    def dx(self):
        return (self.box[1] - self.box[0]) / self.n

    @property
    def dy(self):
        return (self.box[3] - self.box[2]) / self.m

    def check_grid_aligned(self):
        """Raise MeshError unless every ICS corner lies on the structured grid."""
        for b in self.ics_boxes:
            for val, origin, step, name in (
                (b[0], self.box[0], self.dx, "x0"), (b[1], self.box[0], self.dx, "x1"),
                (b[2], self.box[2], self.dy, "y0"), (b[3], self.box[2], self.dy, "y1"),
            ):
                k = (val - origin) / step
                if abs(k - round(k)) > _ALIGN_TOL:
                    raise MeshError(
                        f"ICS corner {name}={val} of {b} does not align with the "
                        f"{self.n}x{self.m} grid (offset {abs(k - round(k)):.2e} cells)")


@dataclass
class Mesh2D:
    """Conforming triangulation with subdomain tags and classified facets.

    vertices : (nv, 2) float coordinates in meters
    triangles : (nt, 3) int vertex indices, counterclockwise
    cell_tag : (nt,) int, 0 = ECS, >= 1 = ICS inclusion id
    facets : (nf, 2) int vertex indices
    facet_cells : (nf, 2) int incident triangles, second entry -1 on the boundary
    facet_class : (nf,) int in {INTERIOR, MEMBRANE, EXTERIOR}
    facet_normal : (nf, 2) unit normal, side 1 -> side 2 (outward on the boundary)
    facet_length : (nf,) facet length

    Immutable after construction; safe for concurrent reads.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    cell_tag: np.ndarray
    facets: np.ndarray = field(default=None)
    facet_cells: np.ndarray = field(default=None)
    facet_class: np.ndarray = field(default=None)
    facet_normal: np.ndarray = field(default=None)
    facet_length: np.ndarray = field(default=None)

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_facets(self):
        return self.facets.shape[0]

    def facet_ids(self, facet_class):
        return np.flatnonzero(self.facet_class == facet_class)

    def triangle_centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _orient_counterclockwise(vertices, triangles):
    v = vertices[triangles]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    flipped = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) < 0
    triangles = triangles.copy()
    triangles[flipped, 1], triangles[flipped, 2] = (
        triangles[flipped, 2].copy(), triangles[flipped, 1].copy())
    return triangles


def build_facets(mesh):
    """Build facet arrays (connectivity, adjacency) from the triangle list.

    Facets are keyed by their sorted vertex pair; enumeration order is the
    lexicographic order of those pairs, hence independent of triangle order.
    """
    tri = mesh.triangles
    nt = tri.shape[0]
    # edge (a,b) of each triangle, local edges (0,1), (1,2), (2,0)
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    owner = np.tile(np.arange(nt), 3)
    key = np.sort(edges, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key, owner = key[order], owner[order]
    uniq, start = np.unique(key, axis=0, return_index=True)
    nf = uniq.shape[0]
    counts = np.diff(np.append(start, key.shape[0]))
    if counts.max() > 2:
        raise MeshError("non-manifold facet: more than two incident triangles")
    cells = np.full((nf, 2), -1, dtype=np.int64)
    cells[:, 0] = owner[start]
    two = counts == 2
    cells[two, 1] = owner[start[two] + 1]

    mesh.facets = uniq.astype(np.int64)
    mesh.facet_cells = cells
    vec = mesh.vertices[uniq[:, 1]] - mesh.vertices[uniq[:, 0]]
    mesh.facet_length = np.hypot(vec[:, 0], vec[:, 1])
    return mesh


def classify_facets(mesh):
    """Label every facet and fix membrane orientation (side 1 = ICS).

    A facet is exterior iff it has one incident triangle, membrane iff its two
    incident triangles carry different cell tags, interior otherwise.  Normals
    point from side 1 to side 2 (outward for exterior facets).
    """
    if mesh.facet_cells is None:
        build_facets(mesh)
    cells = mesh.facet_cells
    tags = mesh.cell_tag
    nf = cells.shape[0]
    fclass = np.full(nf, INTERIOR, dtype=np.int64)
    boundary = cells[:, 1] < 0
    fclass[boundary] = EXTERIOR
    both = ~boundary
    t0 = tags[cells[:, 0]]
    t1 = np.where(both, tags[np.where(both, cells[:, 1], 0)], t0)
    memb = both & (t0 != t1)
    fclass[memb] = MEMBRANE
    if np.any(memb & (t0 > 0) & (t1 > 0)):
        raise MeshError("two distinct ICS inclusions share a facet; membranes must "
                        "be separated by ECS")
    # membrane side 1 must be the ICS-incident triangle
    swap = memb & (t0 == 0)
    cells = cells.copy()
    cells[swap, 0], cells[swap, 1] = cells[swap, 1].copy(), cells[swap, 0].copy()

    # unit normal from side 1 toward side 2 (outward on the boundary)
    verts = mesh.vertices
    vec = verts[mesh.facets[:, 1]] - verts[mesh.facets[:, 0]]
    normal = np.stack([vec[:, 1], -vec[:, 0]], axis=1)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    cent = mesh.triangle_centroids()
    mid = 0.5 * (verts[mesh.facets[:, 0]] + verts[mesh.facets[:, 1]])
    toward1 = np.einsum("fd,fd->f", cent[cells[:, 0]] - mid, normal)
    flip = toward1 > 0  # normal must leave side 1
    normal[flip] *= -1.0

    mesh.facet_cells = cells
    mesh.facet_class = fclass
    mesh.facet_normal = normal
    return mesh


def build_structured_mesh(spec):
    """Triangulate the spec's box into 2*n*m triangles and classify facets.

    Each grid rectangle is split along its bottom-left to top-right diagonal.
    Cell tags are assigned by locating triangle centroids in the ICS
    rectangles, which is unambiguous because inclusions are grid aligned.
    """
    spec.check_grid_aligned()
    x0, x1, y0, y1 = spec.box
    n, m = spec.n, spec.m
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, m + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def vid(i, j):
        return i * (m + 1) + j

    ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    v00 = vid(ii, jj).ravel()
    v10 = vid(ii + 1, jj).ravel()
    v01 = vid(ii, jj + 1).ravel()
    v11 = vid(ii + 1, jj + 1).ravel()
    # diagonal v00 -> v11: lower triangle (v00, v10, v11), upper (v00, v11, v01)
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    triangles = np.empty((2 * n * m, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    triangles = _orient_counterclockwise(vertices, triangles)

    mesh = Mesh2D(vertices=vertices, triangles=triangles,
                  cell_tag=np.zeros(triangles.shape[0], dtype=np.int64))
    cent = mesh.triangle_centroids()
    for tag, (bx0, bx1, by0, by1) in enumerate(spec.ics_boxes, start=1):
        inside = ((cent[:, 0] > bx0) & (cent[:, 0] < bx1)
                  & (cent[:, 1] > by0) & (cent[:, 1] < by1))
        mesh.cell_tag[inside] = tag
    build_facets(mesh)
    classify_facets(mesh)
    return mesh


def refine_uniform(spec):
    """One uniform refinement: double the subdivisions in both directions."""
    return GeometrySpec(box=spec.box, ics_boxes=spec.ics_boxes,
                        n=2 * spec.n, m=2 * spec.m)


def membrane_perimeter(mesh):
    """Total length of the membrane facets."""
    ids = mesh.facet_ids(MEMBRANE)
    return float(mesh.facet_length[ids].sum())


def write_vtk_mesh(mesh, path, title="mesh"):
    """Dump the triangulation with cell tags as a legacy-ASCII VTK file."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        nv = mesh.vertices.shape[0]
        f.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.16g} {y:.16g} 0.0\n")
        nt = mesh.num_triangles
        f.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {nt}\n")
        f.write("\n".join(["5"] * nt) + "\n")
        f.write(f"CELL_DATA {nt}\nSCALARS cell_tag int\nLOOKUP_TABLE default\n")
        f.write("\n".join(str(t) for t in mesh.cell_tag) + "\n")
