"""Shared vectorized assembly kernels for the DG systems.

Element and facet contributions are computed as dense per-entity blocks with
einsum and scattered into COO triplets; duplicate entries are summed on CSR
conversion (deterministically, scipy sorts indices).  Facet couplings use the
side convention of FacetTables: jumps are side1 - side2, normals point from
side 1 to side 2.
"""

import numpy as np
import scipy.sparse as sp

_SIGN = (1.0, -1.0)


class CooBuilder:
    """Accumulates (row, col, value) triplets and finalizes to CSR."""

    def __init__(self, ndof):
        self.ndof = ndof
        self.rows = []
        self.cols = []
        self.vals = []

    def add_blocks(self, row_dofs, col_dofs, blocks):
        """row_dofs (n, ni), col_dofs (n, nj), blocks (n, ni, nj)."""
        n, ni, nj = blocks.shape
        r = np.broadcast_to(row_dofs[:, :, None], (n, ni, nj))
        c = np.broadcast_to(col_dofs[:, None, :], (n, ni, nj))
        self.rows.append(r.astype(np.int32).ravel())
        self.cols.append(c.astype(np.int32).ravel())
        self.vals.append(np.ascontiguousarray(blocks, dtype=float).ravel())

    def tocsr(self):
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        A = sp.coo_matrix((vals, (rows, cols)),
                          shape=(self.ndof, self.ndof)).tocsr()
        A.sum_duplicates()
        return A


def assemble_mass(space, scale=1.0):
    """Global (block-diagonal) mass matrix, optionally scaled."""
    wq = space.vol_weights
    V = space.vol_basis
    blocks = scale * np.einsum("tq,qi,qj->tij", wq, V, V)
    builder = CooBuilder(space.ndof)
    dofs = space.element_dofs()
    builder.add_blocks(dofs, dofs, blocks)
    return builder.tocsr()


def add_volume_stiffness(builder, space, coeff):
    """sum_E int coeff grad(u).grad(v); coeff is (nt, nq)."""
    wk = space.vol_weights * coeff
    blocks = np.einsum("tq,tqid,tqjd->tij", wk, space.vol_grads, space.vol_grads)
    dofs = space.element_dofs()
    builder.add_blocks(dofs, dofs, blocks)


def add_volume_mass(builder, space, coeff):
    """sum_E int coeff u v; coeff is scalar or (nt, nq)."""
    wk = space.vol_weights * coeff
    blocks = np.einsum("tq,qi,qj->tij", wk, space.vol_basis, space.vol_basis)
    dofs = space.element_dofs()
    builder.add_blocks(dofs, dofs, blocks)


def add_volume_drift(builder, space, coeff, velocity):
    """sum_E int coeff u (velocity . grad v); velocity is (nt, nq, 2).

    Divergence-form drift: the trial function multiplies the drift field and
    is integrated against the test gradient.
    """
    wk = space.vol_weights * coeff
    blocks = np.einsum("tq,tqd,tqid,qj->tij", wk, velocity, space.vol_grads,
                       space.vol_basis)
    dofs = space.element_dofs()
    builder.add_blocks(dofs, dofs, blocks)


def normal_grad_tables(tables):
    """Per-side normal-derivative traces of the basis, (nf, nq, nd)."""
    return [np.einsum("fqnd,fd->fqn", tables.grads[s], tables.normals)
            for s in range(2)]


def add_sip_facets(builder, tables, k_cons, k_pen, penalty_over_h):
    """Symmetric interior penalty coupling on two-sided facets.

      - consistency: -int {k grad(u).n}[v] - int {k grad(v).n}[u]
      - penalty:     +int (penalty/h) k_pen [u][v]

    k_cons is a pair of per-side coefficient arrays (nf, nq) entering the
    averages; k_pen (nf, nq) multiplies the penalty (harmonic mean for
    discontinuous coefficients).  penalty_over_h is (nf, 1) or (nf, nq).
    """
    w = tables.weights
    Gn = normal_grad_tables(tables)
    V = tables.vals
    pen = w * penalty_over_h * k_pen
    for a in range(2):
        for b in range(2):
            blk = -_SIGN[a] * np.einsum("fq,fqi,fqj->fij",
                                        w * 0.5 * k_cons[b], V[a], Gn[b])
            blk -= _SIGN[b] * np.einsum("fq,fqi,fqj->fij",
                                        w * 0.5 * k_cons[a], Gn[a], V[b])
            blk += _SIGN[a] * _SIGN[b] * np.einsum("fq,fqi,fqj->fij",
                                                   pen, V[a], V[b])
            builder.add_blocks(tables.dofs[a], tables.dofs[b], blk)


def add_jump_jump(builder, tables, coeff):
    """+int coeff [u][v] on two-sided facets; coeff (nf, nq) or scalar."""
    w = tables.weights * coeff
    V = tables.vals
    for a in range(2):
        for b in range(2):
            blk = _SIGN[a] * _SIGN[b] * np.einsum("fq,fqi,fqj->fij", w, V[a], V[b])
            builder.add_blocks(tables.dofs[a], tables.dofs[b], blk)


def add_upwind_drift(builder, tables, z_psi, speed_sides, lam):
    """Upwinded drift coupling on interior facets.

    Assembles  -z_psi * int ( {a u} - (lam/2) [u] ) [v]  with per-side drift
    normal speeds a_s = D grad(phi_s).n (speed_sides, each (nf, nq)) and
    dissipation coefficient lam = |D {grad(phi).n}| (nf, nq).
    """
    w = tables.weights
    V = tables.vals
    for b in range(2):
        coeff = -z_psi * (0.5 * speed_sides[b] - _SIGN[b] * 0.5 * lam)
        for a in range(2):
            blk = _SIGN[a] * np.einsum("fq,fqi,fqj->fij", w * coeff, V[a], V[b])
            builder.add_blocks(tables.dofs[a], tables.dofs[b], blk)


# rhs helpers ---------------------------------------------------------------

def rhs_accumulate(rhs, dofs, contrib):
    """Scatter per-entity rhs blocks (n, nd) into the global vector."""
    np.add.at(rhs, dofs.ravel(), contrib.ravel())


def add_rhs_volume(rhs, space, values):
    """+int values v; values (nt, nq)."""
    contrib = np.einsum("tq,qi->ti", space.vol_weights * values, space.vol_basis)
    rhs_accumulate(rhs, space.element_dofs(), contrib)


def add_rhs_volume_grad(rhs, space, vec):
    """+int vec . grad(v); vec (nt, nq, 2)."""
    contrib = np.einsum("tq,tqd,tqid->ti", space.vol_weights, vec, space.vol_grads)
    rhs_accumulate(rhs, space.element_dofs(), contrib)


def add_rhs_facet_jump(rhs, tables, values):
    """+int values [v] on two-sided facets; values (nf, nq)."""
    w = tables.weights * values
    for a in range(2):
        contrib = _SIGN[a] * np.einsum("fq,fqi->fi", w, tables.vals[a])
        rhs_accumulate(rhs, tables.dofs[a], contrib)


def add_rhs_facet_side(rhs, tables, side, values):
    """+int values v restricted to one side; values (nf, nq)."""
    contrib = np.einsum("fq,fqi->fi", tables.weights * values, tables.vals[side])
    rhs_accumulate(rhs, tables.dofs[side], contrib)
