"""Assembly of the per-species transport (advection-diffusion) systems.

With the fresh potential phi^n from the EMI step, each non-eliminated species
solves an implicit Euler step of

  dc/dt + div(-D grad c - z D psi c grad phi) = 0

discretized with SIP diffusion and an upwinded (local Lax-Friedrichs) drift
flux on the interior facets.  The membrane does not couple the concentration
unknowns: the species flux across it is Robin data in the solved potential
jump, so it enters the right-hand side only,

  rhs_ICS -= int C_k,i ([phi] - g_k,i) v,   rhs_ECS += int C_k,e ([phi] - g_k,e) v,

which transfers mass between the compartments without creating or destroying
it (up to the per-side split of the capacitive current).
"""

from dataclasses import dataclass

import numpy as np

from . import assembly, dgspace, mesh as meshmod
from .linalg import SparseSystem


@dataclass
class DriftData:
    """Potential gradients cached for the drift terms of one step."""

    vol: np.ndarray          # (nt, nq, 2) element-gradient of phi
    facet_gn: tuple          # per-side grad(phi).n on interior facets (nf, nq)


def drift_field(phi):
    """Cache element gradients and one-sided facet normal gradients of phi."""
    space = phi.space
    ti = space.facet_tables(meshmod.INTERIOR)
    if ti.facet_ids.size:
        facet_gn = (phi.trace_normal_grads(ti, 0), phi.trace_normal_grads(ti, 1))
    else:
        facet_gn = (np.zeros(ti.weights.shape),) * 2
    return DriftData(vol=phi.element_gradients(), facet_gn=facet_gn)


@dataclass
class KnpSystem:
    system: SparseSystem
    gamma: float
    dt: float
    species_name: str = ""


def assemble_knp(space, species_k, c_old, phi, interface, gamma, dt, consts,
                 drift=None, volume_source=None, boundary_flux=None):
    """Assemble the transport system for one species and one time step.

    c_old is the lagged concentration field; phi the fresh potential.  The
    interface data supplies per-side (C_k, g_k); volume_source(x, y, tag, ...)
    and boundary_flux(x, y) are manufactured-data hooks (outward species flux
    J_k.n on the exterior boundary, zero for the closed system).
    """
    if drift is None:
        drift = drift_field(phi)
    if not np.all(np.isfinite(drift.vol)):
        raise ValueError("drift field contains non-finite values; "
                         "was the potential solved?")
    mesh = space.mesh
    D = species_k.diffusivity
    z_psi = species_k.valence * consts.psi

    builder = assembly.CooBuilder(space.ndof)
    assembly.add_volume_mass(builder, space, 1.0 / dt)
    assembly.add_volume_stiffness(builder, space, D)
    assembly.add_volume_drift(builder, space, z_psi * D, drift.vol)

    ti = space.facet_tables(meshmod.INTERIOR)
    if ti.facet_ids.size:
        assembly.add_sip_facets(builder, ti, (D, D), D,
                                gamma / ti.length[:, None])
        speed = (D * drift.facet_gn[0], D * drift.facet_gn[1])
        lam = np.abs(0.5 * (speed[0] + speed[1]))
        assembly.add_upwind_drift(builder, ti, z_psi, speed, lam)

    A = builder.tocsr()

    b = np.zeros(space.ndof)
    assembly.add_rhs_volume(b, space, c_old.element_values() / dt)

    tm = space.facet_tables(meshmod.MEMBRANE)
    if tm.facet_ids.size:
        shape = tm.weights.shape
        jump_phi = (phi.trace_values(tm, 0) - phi.trace_values(tm, 1))
        name = species_k.name
        C_i = np.asarray(interface.C_i[name], dtype=float).reshape(shape)
        C_e = np.asarray(interface.C_e[name], dtype=float).reshape(shape)
        g_i = np.asarray(interface.g_i[name], dtype=float).reshape(shape)
        g_e = np.asarray(interface.g_e[name], dtype=float).reshape(shape)
        flux_i = C_i * (jump_phi - g_i)   # outward ICS flux (mol/(m^2 s))
        flux_e = C_e * (jump_phi - g_e)   # flux into the ECS
        assembly.add_rhs_facet_side(b, tm, 0, -flux_i)
        assembly.add_rhs_facet_side(b, tm, 1, flux_e)

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

    return KnpSystem(system=SparseSystem(matrix=A, rhs=b), gamma=gamma, dt=dt,
                     species_name=species_k.name)


def total_mass(c):
    """Integral of a concentration field over the domain (mol per unit depth)."""
    return dgspace.integrate(c)
