"""Assembly of the potential (EMI) system.

One time step of the splitting solves, for the potential phi at the new time
level, a pure diffusion problem with conductivity kappa built from the lagged
concentrations, coupled across the membrane by a Robin term:

  matrix: sum_E int kappa grad(phi).grad(w)
          + SIP consistency/penalty terms on interior (non-membrane) facets
          + C [phi][w] on membrane facets (no SIP flux crosses the membrane)
  rhs:    diffusive current source in the lagged concentrations (volume and
          interior-facet average), C f [w] on the membrane, and optional
          manufactured volume/boundary data.

The matrix is symmetric positive semi-definite with constants in the kernel
(closed system); the rhs is orthogonalized against the constant vector before
the solve.
"""

from dataclasses import dataclass

import numpy as np

from . import assembly, mesh as meshmod, physics
from .linalg import SparseSystem


@dataclass
class EmiSystem:
    """Assembled potential system plus the data needed to precondition it."""

    system: SparseSystem
    beta: float
    dt: float
    kappa_mean: float      # volume-averaged conductivity, for the AMG shift


def _kappa_traces(space, tables, concs, species, consts):
    out = []
    for side in range(2):
        acc = None
        for s in species:
            term = (s.valence**2 * s.diffusivity
                    * concs[s.name].trace_values(tables, side))
            acc = term if acc is None else acc + term
        out.append(consts.F * consts.psi * acc)
    return out


def assemble_emi(space, concs, species, consts, interface, beta, dt,
                 volume_source=None, boundary_flux=None):
    """Assemble the potential system for one time step.

    concs maps name -> DgField for every species (the eliminated one already
    recovered, since kappa sums over the full set).  interface supplies the
    membrane Robin data (C, f).  volume_source(x, y, tag) and
    boundary_flux(x, y) are the manufactured-data hooks; the boundary term
    carries the outward total current F sum_k z_k J_k.n and vanishes for the
    closed system.
    """
    mesh = space.mesh
    builder = assembly.CooBuilder(space.ndof)

    # volume conductivity from the lagged concentrations
    conc_vals = {s.name: concs[s.name].element_values() for s in species}
    kq = physics.conductivity_kappa(conc_vals, species, consts)
    assembly.add_volume_stiffness(builder, space, kq)

    ti = space.facet_tables(meshmod.INTERIOR)
    if ti.facet_ids.size:
        k1, k2 = _kappa_traces(space, ti, concs, species, consts)
        k_harm = 2.0 * k1 * k2 / (k1 + k2)
        assembly.add_sip_facets(builder, ti, (k1, k2), k_harm,
                                beta / ti.length[:, None])

    tm = space.facet_tables(meshmod.MEMBRANE)
    if tm.facet_ids.size:
        assembly.add_jump_jump(builder, tm, interface.C)

    A = builder.tocsr()

    # rhs: diffusive current of the lagged concentrations
    b = np.zeros(space.ndof)
    gc = None
    for s in species:
        term = (consts.F * s.valence * s.diffusivity
                * concs[s.name].element_gradients())
        gc = term if gc is None else gc + term
    assembly.add_rhs_volume_grad(b, space, -gc)

    if ti.facet_ids.size:
        qn = None
        for s in species:
            scale = consts.F * s.valence * s.diffusivity
            term = 0.5 * scale * (concs[s.name].trace_normal_grads(ti, 0)
                                  + concs[s.name].trace_normal_grads(ti, 1))
            qn = term if qn is None else qn + term
        assembly.add_rhs_facet_jump(b, ti, qn)

    if tm.facet_ids.size:
        shape = tm.weights.shape
        f_i = np.asarray(interface.f_i, dtype=float).reshape(shape)
        f_e = np.asarray(interface.f_ecs, dtype=float).reshape(shape)
        assembly.add_rhs_facet_side(b, tm, 0, interface.C * f_i)
        assembly.add_rhs_facet_side(b, tm, 1, -interface.C * f_e)

    if volume_source is not None:
        pts = space.vol_points
        tags = np.broadcast_to(mesh.cell_tag[:, None], pts.shape[:2])
        vals = np.broadcast_to(volume_source(pts[..., 0], pts[..., 1], tags),
                               pts.shape[:2])
        assembly.add_rhs_volume(b, space, vals)

    if boundary_flux is not None:
        te = space.facet_tables(meshmod.EXTERIOR)
        data = np.broadcast_to(
            boundary_flux(te.points[..., 0], te.points[..., 1]),
            te.weights.shape)
        assembly.add_rhs_facet_side(b, te, 0, -data)

    # compatibility: project the rhs onto the complement of the kernel
    b -= b.mean()

    area = float(np.sum(space.vol_weights))
    kappa_mean = float(np.sum(space.vol_weights * kq)) / area
    system = SparseSystem(matrix=A, rhs=b, nullspace=np.ones(space.ndof))
    return EmiSystem(system=system, beta=beta, dt=dt, kappa_mean=kappa_mean)


def rayleigh_probe(system, trials=10, seed=0):
    """Minimum Rayleigh quotient over random vectors orthogonal to the
    nullspace; a negative value flags an insufficient penalty."""
    rng = np.random.default_rng(seed)
    A = system.matrix
    n = A.shape[0]
    null = system.nullspace
    unit = null / np.linalg.norm(null) if null is not None else None
    worst = np.inf
    for _ in range(trials):
        x = rng.standard_normal(n)
        if unit is not None:
            x -= (unit @ x) * unit
        x /= np.linalg.norm(x)
        worst = min(worst, float(x @ (A @ x)))
    return worst
