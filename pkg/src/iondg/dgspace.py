"""Discontinuous Lagrange spaces on triangles: basis, quadrature, traces.

Every element owns its local degrees of freedom (nodal Lagrange, degree 1 or
2), so fields may jump across any facet.  The module precomputes the geometry
tables the assembly kernels consume: basis values / physical gradients at
volume quadrature points per element, and two-sided traces at facet
quadrature points with side-consistent normals (membrane facets have the ICS
element on side 1, see mesh.classify_facets).
"""

from dataclasses import dataclass, field

import numpy as np

from . import mesh as meshmod
from .errors import ConfigurationError

# ---------------------------------------------------------------------------
# reference element: unit triangle (0,0)-(1,0)-(0,1)
# ---------------------------------------------------------------------------

P1_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
P2_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                     [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])

# local edges of the reference triangle, matching mesh edge construction
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def reference_nodes(degree):
    if degree == 1:
        return P1_NODES
    if degree == 2:
        return P2_NODES
    raise ConfigurationError(f"unsupported polynomial degree {degree}")


def basis_values(degree, points):
    """Values of all local basis functions at reference points (..., 2)."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    l0, l1, l2 = 1.0 - x - y, x, y
    if degree == 1:
        return np.stack([l0, l1, l2], axis=-1)
    if degree == 2:
        return np.stack([
            l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
        ], axis=-1)
    raise ConfigurationError(f"unsupported polynomial degree {degree}")


def basis_grads(degree, points):
    """Reference-space gradients, shape (..., ndof, 2)."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    if degree == 1:
        gx = np.stack([-one, one, zero], axis=-1)
        gy = np.stack([-one, zero, one], axis=-1)
        return np.stack([gx, gy], axis=-1)
    if degree == 2:
        l0 = 1.0 - x - y
        gx = np.stack([
            1 - 4 * l0, 4 * x - 1, zero,
            4 * (l0 - x), 4 * y, -4 * y,
        ], axis=-1)
        gy = np.stack([
            1 - 4 * l0, zero, 4 * y - 1,
            -4 * x, 4 * x, 4 * (l0 - y),
        ], axis=-1)
        return np.stack([gx, gy], axis=-1)
    raise ConfigurationError(f"unsupported polynomial degree {degree}")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Points/weights on the reference triangle or unit edge.

    Triangle weights sum to the reference area 1/2; edge weights sum to 1.
    `degree` is the highest polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _dunavant(groups, degree):
    pts, wts = [], []
    for w, bary in groups:
        perms = {tuple(p) for p in
                 ((bary[0], bary[1], bary[2]), (bary[1], bary[2], bary[0]),
                  (bary[2], bary[0], bary[1]), (bary[0], bary[2], bary[1]),
                  (bary[2], bary[1], bary[0]), (bary[1], bary[0], bary[2]))}
        for b in sorted(perms):
            pts.append([b[1], b[2]])  # (x, y) from barycentric (l0, l1, l2)
            wts.append(w)
    pts = np.array(pts)
    wts = 0.5 * np.array(wts)  # normalize to reference area
    return QuadratureRule(points=pts, weights=wts, degree=degree)


_THIRD = 1.0 / 3.0
_TRI_RULES = (
    _dunavant([(1.0, (_THIRD, _THIRD, _THIRD))], 1),
    _dunavant([(_THIRD, (2 / 3, 1 / 6, 1 / 6))], 2),
    _dunavant([
        (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
        (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
    ], 4),
    _dunavant([
        (0.225, (_THIRD, _THIRD, _THIRD)),
        (0.132394152788506, (0.059715871789770, 0.470142064105115, 0.470142064105115)),
        (0.125939180544827, (0.797426985353087, 0.101286507323456, 0.101286507323456)),
    ], 5),
    _dunavant([
        (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
        (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
        (0.082851075618374, (0.053145049844816, 0.310352451033785, 0.636502499121399)),
    ], 6),
)


def triangle_quadrature(degree):
    """Smallest positive-weight symmetric rule exact to the given degree."""
    for rule in _TRI_RULES:
        if rule.degree >= degree:
            return rule
    raise ConfigurationError(f"no triangle quadrature of degree {degree}")


def edge_quadrature(npoints):
    """Gauss-Legendre rule mapped to the unit interval (exact to 2n-1)."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return QuadratureRule(points=0.5 * (x + 1.0), weights=0.5 * w,
                          degree=2 * npoints - 1)


# ---------------------------------------------------------------------------
# space and fields
# ---------------------------------------------------------------------------

@dataclass
class DgSpace:
    """Fully discontinuous P_p space over a Mesh2D.

    Element e owns the contiguous dof block [e*ndof_local, (e+1)*ndof_local).
    Geometry tables (affine maps, volume quadrature data, facet trace tables)
    are built once here and reused by every assembly.
    """

    mesh: meshmod.Mesh2D
    degree: int
    quad_volume: QuadratureRule = field(default=None)
    quad_edge: QuadratureRule = field(default=None)

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ConfigurationError(f"degree must be 1 or 2, got {self.degree}")
        p = self.degree
        if self.quad_volume is None:
            self.quad_volume = triangle_quadrature(2 * p + 1)
        if self.quad_edge is None:
            self.quad_edge = edge_quadrature(p + 2)
        self._build_geometry()
        self._facet_tables = {}

    # dof bookkeeping ------------------------------------------------------

    @property
    def ndof_local(self):
        return (self.degree + 1) * (self.degree + 2) // 2

    @property
    def ndof(self):
        return self.mesh.num_triangles * self.ndof_local

    def element_dofs(self, elements=None):
        nd = self.ndof_local
        if elements is None:
            elements = np.arange(self.mesh.num_triangles)
        base = np.asarray(elements)[..., None] * nd
        return base + np.arange(nd)

    # geometry tables ------------------------------------------------------

    def _build_geometry(self):
        mesh = self.mesh
        v = mesh.vertices[mesh.triangles]          # (nt, 3, 2)
        self.v0 = v[:, 0]
        J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # (nt, 2, 2)
        self.detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1]
        inv[:, 0, 1] = -J[:, 0, 1]
        inv[:, 1, 0] = -J[:, 1, 0]
        inv[:, 1, 1] = J[:, 0, 0]
        inv /= self.detJ[:, None, None]
        self.Jinv = inv                            # maps physical to reference

        q = self.quad_volume
        self.vol_weights = q.weights[None, :] * np.abs(self.detJ)[:, None]  # (nt, nq)
        self.vol_basis = basis_values(self.degree, q.points)                # (nq, nd)
        gref = basis_grads(self.degree, q.points)                           # (nq, nd, 2)
        # physical gradient e-component: sum_d gref[.., d] * Jinv[d, e]
        self.vol_grads = np.einsum("qnd,tde->tqne", gref, inv)  # (nt, nq, nd, 2)
        self.vol_points = self.v0[:, None, :] + np.einsum("tde,qe->tqd", J, q.points)

    def physical_to_reference(self, elements, points):
        """Map physical points (..., 2) into element reference coordinates."""
        rel = points - self.v0[elements]
        return np.einsum("...de,...e->...d", self.Jinv[elements], rel)

    def facet_tables(self, facet_class):
        """Two-sided (or one-sided) trace tables for a facet class, cached."""
        if facet_class not in self._facet_tables:
            self._facet_tables[facet_class] = FacetTables(self, facet_class)
        return self._facet_tables[facet_class]


@dataclass
class FacetTables:
    """Trace data for all facets of one class at edge quadrature points.

    vals / grads are indexed [side][facet, qpoint, dof(, dim)]; normals point
    from side 1 to side 2 (ICS to ECS on membrane facets, outward on exterior
    facets).  weights include the facet length; points are physical.
    """

    def __init__(self, space, facet_class):
        mesh = space.mesh
        ids = mesh.facet_ids(facet_class)
        self.facet_ids = ids
        self.two_sided = facet_class != meshmod.EXTERIOR
        q = space.quad_edge
        self.nq = q.points.shape[0]

        a = mesh.vertices[mesh.facets[ids, 0]]
        b = mesh.vertices[mesh.facets[ids, 1]]
        self.points = a[:, None, :] + q.points[None, :, None] * (b - a)[:, None, :]
        self.length = mesh.facet_length[ids]
        self.weights = q.weights[None, :] * self.length[:, None]
        self.normals = mesh.facet_normal[ids]

        nsides = 2 if self.two_sided else 1
        self.elements = [mesh.facet_cells[ids, s] for s in range(nsides)]
        self.vals = []
        self.grads = []
        for s in range(nsides):
            elems = self.elements[s]
            ref = space.physical_to_reference(elems[:, None], self.points)
            self.vals.append(basis_values(space.degree, ref))
            gref = basis_grads(space.degree, ref)
            self.grads.append(np.einsum("fqnd,fde->fqne", gref, space.Jinv[elems]))
        self.dofs = [space.element_dofs(e) for e in self.elements]


@dataclass
class DgField:
    """Coefficient vector over a DgSpace (units depend on the field's role)."""

    space: DgSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ConfigurationError(
                f"coefficient length {self.coeffs.shape} does not match space "
                f"dof count {self.space.ndof}")

    def copy(self):
        return DgField(self.space, self.coeffs.copy())

    def element_values(self, basis=None):
        """Field values at volume quadrature points, shape (nt, nq)."""
        space = self.space
        coef = self.coeffs.reshape(space.mesh.num_triangles, space.ndof_local)
        return np.einsum("qn,tn->tq", space.vol_basis if basis is None else basis, coef)

    def element_gradients(self):
        """Field gradients at volume quadrature points, shape (nt, nq, 2)."""
        space = self.space
        coef = self.coeffs.reshape(space.mesh.num_triangles, space.ndof_local)
        return np.einsum("tqnd,tn->tqd", space.vol_grads, coef)

    def trace_values(self, tables, side):
        """Trace values at facet quadrature points, shape (nf, nq)."""
        coef = self.coeffs[tables.dofs[side]]
        return np.einsum("fqn,fn->fq", tables.vals[side], coef)

    def trace_normal_grads(self, tables, side):
        """Normal derivative traces at facet quadrature points, (nf, nq)."""
        coef = self.coeffs[tables.dofs[side]]
        gn = np.einsum("fqnd,fd->fqn", tables.grads[side], tables.normals)
        return np.einsum("fqn,fn->fq", gn, coef)


# ---------------------------------------------------------------------------
# interpolation, evaluation, norms
# ---------------------------------------------------------------------------

def interpolate(space, f):
    """Elementwise nodal interpolation of f(x, y, tag) into the space.

    f must accept numpy arrays (x, y, tag broadcast together) and may be
    discontinuous across subdomain tags; no inter-element averaging happens.
    """
    nodes = reference_nodes(space.degree)
    mesh = space.mesh
    v = mesh.vertices[mesh.triangles]
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    pts = v[:, None, 0, :] + np.einsum("tde,ne->tnd", J, nodes)  # (nt, nnodes, 2)
    tags = np.broadcast_to(mesh.cell_tag[:, None], pts.shape[:2])
    vals = f(pts[..., 0], pts[..., 1], tags)
    vals = np.array(np.broadcast_to(vals, pts.shape[:2]), dtype=float)
    return DgField(space, vals.ravel())


def eval_basis(space, element, point):
    """Local basis values and physical gradients at one reference point."""
    point = np.asarray(point, dtype=float)
    vals = basis_values(space.degree, point)
    gref = basis_grads(space.degree, point)
    grads = np.einsum("...nd,de->...ne", gref, space.Jinv[element])
    return vals, grads


def facet_traces(space, facet, s):
    """Two-sided traces at edge parameters s in [0, 1] on one facet.

    Returns (side-1 values, side-1 gradients, side-2 values, side-2 gradients,
    unit normal).  The normal points from side 1 to side 2; on membrane facets
    side 1 is the ICS element, so a jump built as side1 - side2 is the
    intracellular-minus-extracellular jump.  Raises on exterior facets.
    """
    mesh = space.mesh
    if mesh.facet_class[facet] == meshmod.EXTERIOR:
        raise ConfigurationError("exterior facets have a single trace")
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = mesh.vertices[mesh.facets[facet, 0]]
    b = mesh.vertices[mesh.facets[facet, 1]]
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    out = []
    for side in range(2):
        e = mesh.facet_cells[facet, side]
        ref = space.physical_to_reference(np.full(s.shape, e), pts)
        vals = basis_values(space.degree, ref)
        grads = np.einsum("qnd,de->qne", basis_grads(space.degree, ref), space.Jinv[e])
        out.extend([vals, grads])
    return (*out, mesh.facet_normal[facet])


def evaluate_exact(space, f, points, tags, t=None):
    """Call an exact-solution callback with or without a time argument."""
    if t is None:
        return f(points[..., 0], points[..., 1], tags)
    return f(points[..., 0], points[..., 1], tags, t)


def l2_error(fld, exact, t=None, quad_degree=None):
    """L2 norm of (field - exact) by elementwise quadrature (degree 2p+2)."""
    space = fld.space
    rule = triangle_quadrature(quad_degree or (2 * space.degree + 2))
    basis = basis_values(space.degree, rule.points)
    wq = rule.weights[None, :] * np.abs(space.detJ)[:, None]
    mesh = space.mesh
    v = mesh.vertices[mesh.triangles]
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    pts = v[:, None, 0, :] + np.einsum("tde,qe->tqd", J, rule.points)
    tags = np.broadcast_to(mesh.cell_tag[:, None], pts.shape[:2])
    uh = fld.element_values(basis=basis)
    ue = np.broadcast_to(evaluate_exact(space, exact, pts, tags, t), uh.shape)
    return float(np.sqrt(np.sum(wq * (uh - ue) ** 2)))


def integrate(fld):
    """Integral of the field over the whole domain."""
    return float(np.sum(fld.space.vol_weights * fld.element_values()))


def domain_area(space):
    return float(np.sum(space.vol_weights))


def mean_value(fld):
    return integrate(fld) / domain_area(fld.space)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_vtk_field(fields, path, title="field"):
    """Write DG fields to legacy-ASCII VTK using element-local corner points.

    `fields` maps name -> DgField (all on the same space).  Each triangle
    contributes its own three points so discontinuities render faithfully.
    """
    space = next(iter(fields.values())).space
    mesh = space.mesh
    tri = mesh.triangles
    nt = tri.shape[0]
    pts = mesh.vertices[tri].reshape(-1, 2)
    corner = basis_values(space.degree, P1_NODES)  # evaluate at the 3 corners
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {3 * nt} double\n")
        for x, y in pts:
            f.write(f"{x:.16g} {y:.16g} 0.0\n")
        f.write(f"CELLS {nt} {4 * nt}\n")
        for e in range(nt):
            f.write(f"3 {3 * e} {3 * e + 1} {3 * e + 2}\n")
        f.write(f"CELL_TYPES {nt}\n")
        f.write("\n".join(["5"] * nt) + "\n")
        f.write(f"POINT_DATA {3 * nt}\n")
        for name, fld in fields.items():
            coef = fld.coeffs.reshape(nt, space.ndof_local)
            vals = coef @ corner.T  # (nt, 3)
            f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for row in vals:
                f.write(f"{row[0]:.16g}\n{row[1]:.16g}\n{row[2]:.16g}\n")
