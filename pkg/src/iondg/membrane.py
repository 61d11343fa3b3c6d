"""Membrane state, channel currents and the ODE stage of the splitting.

Membrane state lives at the quadrature points of the membrane facets (the
same points the interface integrals use).  The ODE stage advances the
membrane potential with the total transmembrane current set to zero,

    d(phi_M)/dt = -I_ch / C_M,     ds/dt = F(phi_M, s),

holding the concentration traces (hence the Nernst potentials) fixed over the
sub-interval.  Integration uses an embedded Dormand-Prince 4(5) pair with a
user-set maximum step; the points are independent, so the whole population is
advanced in one vectorized sweep with a shared adaptive step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import physics
from .errors import IntegratorError

GATE_TOL = 1e-9  # gating variables must stay in [0,1] up to this slack


@dataclass
class StimulusSpec:
    """Periodic synaptic conductance g_syn * mask(x) * exp(-t_loc/tau).

    The current g_syn f(x) exp(-t_loc/tau) (phi_M - E_Na) is added to the Na
    channel current; t_loc restarts every `period` seconds.
    """

    g_syn: float = 40.0          # S/m^2
    tau: float = 0.02            # s
    period: float = 0.02         # s
    x_max: float = None          # active where x <= x_max (meters); None = off
    species: str = "Na"

    def __post_init__(self):
        if self.g_syn < 0 or self.tau <= 0 or self.period <= 0:
            raise ValueError("stimulus requires g_syn >= 0, tau > 0, period > 0")

    def mask(self, points):
        if self.x_max is None:
            return np.zeros(points.shape[0], dtype=bool)
        return points[:, 0] <= self.x_max * (1 + 1e-12) + 1e-300

    def conductance(self, points, t):
        """Active synaptic conductance per point at absolute time t (S/m^2)."""
        if self.x_max is None or self.g_syn == 0.0:
            return np.zeros(points.shape[0])
        t_loc = np.mod(t, self.period)
        return self.g_syn * self.mask(points) * np.exp(-t_loc / self.tau)


@dataclass
class MembraneState:
    """phi_M and gating variables per membrane quadrature point."""

    phi_m: np.ndarray                 # (P,) volts
    gates: np.ndarray                 # (n_gates, P), HH order (n, m, h)
    points: np.ndarray                # (P, 2) meters, for stimulus masks/probes

    def copy(self):
        return MembraneState(self.phi_m.copy(), self.gates.copy(),
                             self.points)


# ---------------------------------------------------------------------------
# Hodgkin-Huxley kinetics (modern -65 mV-rest parameterization; rates 1/ms
# with V in mV, converted to SI on evaluation)
# ---------------------------------------------------------------------------

def _vtrap(x, k):
    """x / (1 - exp(-x/k)) with the removable singularity at x = 0 filled."""
    u = np.asarray(x, dtype=float) / k
    small = np.abs(u) < 1e-6
    safe = np.where(small, 1.0, u)
    out = np.where(small, k * (1.0 + 0.5 * u), k * safe / (-np.expm1(-safe)))
    return out


def hh_rates(phi_m):
    """Gating rate constants (alpha_n, beta_n, alpha_m, beta_m, alpha_h,
    beta_h) in 1/s for a membrane potential in volts."""
    v = np.asarray(phi_m, dtype=float) * 1e3  # mV
    a_n = 0.01 * _vtrap(v + 55.0, 10.0)
    b_n = 0.125 * np.exp(-(v + 65.0) / 80.0)
    a_m = 0.1 * _vtrap(v + 40.0, 10.0)
    b_m = 4.0 * np.exp(-(v + 65.0) / 18.0)
    a_h = 0.07 * np.exp(-(v + 65.0) / 20.0)
    b_h = 1.0 / (1.0 + np.exp(-(v + 35.0) / 10.0))
    return tuple(1e3 * r for r in (a_n, b_n, a_m, b_m, a_h, b_h))


def hh_steady_state(phi_m):
    """Gating steady state (n, m, h) at fixed membrane potential."""
    a_n, b_n, a_m, b_m, a_h, b_h = hh_rates(phi_m)
    return np.stack([a_n / (a_n + b_n), a_m / (a_m + b_m), a_h / (a_h + b_h)])


@dataclass
class MembraneModel:
    """Channel current model: passive leaks or Hodgkin-Huxley + leaks.

    The leak conductances come from the species table; the voltage-gated
    conductances are model parameters (defaults are the classic squid-axon
    densities, configurable per scenario).
    """

    kind: str = "passive"             # "passive" | "hodgkin-huxley"
    g_na_bar: float = 1200.0          # S/m^2
    g_k_bar: float = 360.0            # S/m^2
    n_gates: int = field(init=False)

    def __post_init__(self):
        if self.kind not in ("passive", "hodgkin-huxley"):
            raise ValueError(f"unknown membrane model {self.kind!r}")
        self.n_gates = 3 if self.kind == "hodgkin-huxley" else 0

    def initial_state(self, phi_m0, points):
        P = points.shape[0]
        phi = np.full(P, phi_m0, dtype=float)
        gates = (hh_steady_state(phi) if self.n_gates
                 else np.zeros((0, P)))
        return MembraneState(phi_m=phi, gates=gates, points=points)

    def conductances(self, phi_m, gates, species):
        """Per-species membrane conductance (S/m^2) at the current state."""
        g = {}
        for s in species:
            g_s = np.full_like(np.asarray(phi_m, dtype=float), s.g_leak)
            if self.kind == "hodgkin-huxley":
                n, m, h = gates
                if s.name == "Na":
                    g_s = g_s + self.g_na_bar * m**3 * h
                elif s.name == "K":
                    g_s = g_s + self.g_k_bar * n**4
            g[s.name] = g_s
        return g

    def gating_rhs(self, phi_m, gates):
        if self.n_gates == 0:
            return np.zeros_like(gates)
        a_n, b_n, a_m, b_m, a_h, b_h = hh_rates(phi_m)
        n, m, h = gates
        return np.stack([
            a_n * (1.0 - n) - b_n * n,
            a_m * (1.0 - m) - b_m * m,
            a_h * (1.0 - h) - b_h * h,
        ])


def nernst_from_traces(traces_i, traces_e, species, consts, counter=None):
    """Nernst potentials per species from per-side concentration traces."""
    E = {}
    for s in species:
        c_i = physics.clamped(traces_i[s.name], counter)
        c_e = physics.clamped(traces_e[s.name], counter)
        E[s.name] = physics.nernst_potential(c_e, c_i, s.valence, consts)
    return E


def channel_currents(model, phi_m, gates, E, species, points, t,
                     stimulus=None):
    """Per-species channel currents I_ch,k = g_k (phi_M - E_k) in A/m^2.

    The synaptic stimulus current is added to its target species (Na).
    """
    g = model.conductances(phi_m, gates, species)
    currents = {}
    for s in species:
        currents[s.name] = g[s.name] * (phi_m - E[s.name])
    if stimulus is not None and stimulus.x_max is not None:
        g_syn = stimulus.conductance(points, t)
        currents[stimulus.species] = (currents[stimulus.species]
                                      + g_syn * (phi_m - E[stimulus.species]))
    return currents


def total_current(currents):
    return sum(currents.values())


# ---------------------------------------------------------------------------
# Dormand-Prince 4(5) with shared adaptive step across all membrane points
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _rk45_integrate(rhs, y0, t0, t1, max_step, rtol=1e-6, atol=1e-9):
    """Integrate y' = rhs(t, y) for array-valued y over [t0, t1]."""
    t = t0
    y = y0.copy()
    h = min(max_step, t1 - t0)
    min_h = 1e-15 * max(t1 - t0, 1.0)
    while t < t1 - 1e-14 * (t1 - t0):
        h = min(h, t1 - t, max_step)
        if h < min_h:
            raise IntegratorError(
                f"ODE step size underflow at t = {t:.6e} (h = {h:.3e})")
        k = [rhs(t, y)]
        for i in range(1, 7):
            yi = y
            for a, kk in zip(_DP_A[i], k):
                yi = yi + (h * a) * kk
            k.append(rhs(t + _DP_C[i] * h, yi))
        y5 = y
        y4 = y
        for b5, b4, kk in zip(_DP_B5, _DP_B4, k):
            if b5:
                y5 = y5 + (h * b5) * kk
            if b4:
                y4 = y4 + (h * b4) * kk
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.max(np.abs(y5 - y4) / scale) if y.size else 0.0
        if err <= 1.0:
            t += h
            y = y5
            factor = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.2)
        else:
            factor = max(0.2, 0.9 * err ** -0.2)
        h *= factor
    return y


def ode_substep(state, model, E, species, consts, t0, dt, dt_max,
                stimulus=None):
    """Advance the membrane ODEs over [t0, t0 + dt] with max step dt_max.

    Returns a new MembraneState; the input is untouched.  Gating variables
    are kept in [0,1] by the dynamics alone and asserted to the usual slack.
    """
    P = state.phi_m.shape[0]
    ng = state.gates.shape[0]
    y0 = np.concatenate([state.phi_m[None, :], state.gates], axis=0)

    def rhs(t, y):
        phi = y[0]
        gates = y[1:]
        currents = channel_currents(model, phi, gates, E, species,
                                    state.points, t, stimulus)
        dphi = -total_current(currents) / consts.C_M
        out = np.empty_like(y)
        out[0] = dphi
        if ng:
            out[1:] = model.gating_rhs(phi, gates)
        return out

    try:
        y = _rk45_integrate(rhs, y0, t0, t0 + dt, dt_max)
    except IntegratorError as exc:
        worst = state.points[0] if P else (np.nan, np.nan)
        raise IntegratorError(f"{exc} near membrane point {tuple(worst)}") from exc
    gates = y[1:]
    if ng and (gates.min() < -GATE_TOL or gates.max() > 1.0 + GATE_TOL):
        raise IntegratorError(
            f"gating variable left [0,1]: range [{gates.min():.3e}, "
            f"{gates.max():.3e}]")
    return MembraneState(phi_m=y[0], gates=gates, points=state.points)


def update_phi_m_from_fields(state, phi_field, tables):
    """phi_M <- ICS-side minus ECS-side trace of the potential field."""
    jump = (phi_field.trace_values(tables, 0)
            - phi_field.trace_values(tables, 1))
    return MembraneState(phi_m=jump.ravel(), gates=state.gates,
                         points=state.points)
