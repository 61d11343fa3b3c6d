"""Ion bookkeeping and interface data for the electrodiffusion system.

Concentrations are in mol/m^3 (numerically identical to mM), potentials in V,
conductances in S/m^2.  One species is eliminated through the bulk
electroneutrality constraint sum_k z_k c_k = 0 and recovered algebraically
after every transport step; conductivity and capacitive-current fractions
always sum over the full species set including the recovered one.

The membrane enters the two PDE solves through Robin-type data:

  total current    I_M  = C ([phi] - f),           C   = C_M / dt
  species flux     J_k,r.n = C_k,r ([phi] - g_k,r), C_k = alpha_k C_M / (F z_k dt)

with per-side (ICS/ECS) coefficients.  `f` and `g_k` differ between the
passive scheme (channel currents folded into the potential step) and the
active scheme (channel currents integrated by the membrane ODEs, with only
the per-species routing terms left in g_k).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError

# floor applied to concentration traces inside log/alpha evaluations only;
# clamps are counted, never silent
CONC_FLOOR = 1e-12


@dataclass(frozen=True)
class PhysicalConstants:
    """Gas constant, temperature, Faraday constant, membrane capacitance."""

    R: float = 8.314        # J/(K mol)
    T: float = 300.0        # K
    F: float = 9.648e4      # C/mol
    C_M: float = 0.01       # F/m^2

    @property
    def psi(self):
        """F / (R T), 1/V."""
        return self.F / (self.R * self.T)


@dataclass
class IonSpecies:
    name: str
    valence: int
    diffusivity: float           # m^2/s
    c_init_ics: float            # mol/m^3
    c_init_ecs: float            # mol/m^3
    g_leak: float = 0.0          # S/m^2
    eliminated: bool = False

    def __post_init__(self):
        if self.valence == 0:
            raise ConfigurationError(f"species {self.name} has zero valence")
        if self.diffusivity <= 0:
            raise ConfigurationError(f"species {self.name} has non-positive D")


def default_species():
    """Three-ion set with the standard physiological rest concentrations."""
    return [
        IonSpecies("Na", +1, 1.33e-9, 12.0, 100.0, g_leak=1.0),
        IonSpecies("K", +1, 1.96e-9, 125.0, 4.0, g_leak=4.0),
        IonSpecies("Cl", -1, 2.03e-9, 137.0, 104.0, g_leak=0.0, eliminated=True),
    ]


def validate_species(species):
    elim = [s for s in species if s.eliminated]
    if len(elim) != 1:
        raise ConfigurationError(
            f"exactly one species must be eliminated, got {len(elim)}")
    return elim[0]


def solved_species(species):
    return [s for s in species if not s.eliminated]


def check_electroneutrality(species):
    """Max over ICS/ECS of |sum_k z_k c_k^0|; caller asserts against tol."""
    ics = sum(s.valence * s.c_init_ics for s in species)
    ecs = sum(s.valence * s.c_init_ecs for s in species)
    return max(abs(ics), abs(ecs))


def recover_eliminated(concs, species):
    """Coefficient vector of the eliminated species from electroneutrality.

    concs maps species name -> coefficient array for every non-eliminated
    species.  Valid coefficientwise for nodal bases.
    """
    elim = validate_species(species)
    acc = None
    for s in solved_species(species):
        term = s.valence * np.asarray(concs[s.name])
        acc = term if acc is None else acc + term
    return -acc / elim.valence


def nernst_potential(c_e, c_i, valence, consts):
    """Reversal potential (RT / zF) ln(c_e / c_i) in volts."""
    c_e = np.asarray(c_e, dtype=float)
    c_i = np.asarray(c_i, dtype=float)
    if np.any(c_e <= 0) or np.any(c_i <= 0):
        raise NumericalError("non-positive concentration in Nernst potential")
    return consts.R * consts.T / (valence * consts.F) * np.log(c_e / c_i)


def clamped(values, counter=None):
    """Floor concentrations at CONC_FLOOR, recording how many were clamped."""
    values = np.asarray(values, dtype=float)
    low = values < CONC_FLOOR
    if counter is not None:
        counter[0] += int(np.count_nonzero(low))
    if np.any(low):
        values = np.where(low, CONC_FLOOR, values)
    return values


def alpha_fractions(concs, species, counter=None):
    """Capacitive-current fractions D_k z_k^2 c_k / sum_l D_l z_l^2 c_l.

    concs maps name -> concentration array for ALL species (recovered
    included).  Values are clamped at the positivity floor before weighting.
    """
    weights = {}
    denom = None
    for s in species:
        w = s.diffusivity * s.valence**2 * clamped(concs[s.name], counter)
        weights[s.name] = w
        denom = w if denom is None else denom + w
    if np.any(denom <= 0):
        raise NumericalError("degenerate state: alpha-fraction denominator <= 0")
    return {name: w / denom for name, w in weights.items()}


def conductivity_kappa(concs, species, consts):
    """Bulk conductivity F psi sum_k z_k^2 D_k c_k (S/m), all species."""
    kappa = None
    for s in species:
        term = s.valence**2 * s.diffusivity * np.asarray(concs[s.name], dtype=float)
        kappa = term if kappa is None else kappa + term
    return consts.F * consts.psi * kappa


@dataclass
class InterfaceData:
    """Per-membrane-quadrature-point Robin data for one time step.

    f : (nmq,) potential-step data, volts.  The physical scheme carries one
        value per point (transmembrane current continuity); manufactured data
        may specify distinct per-side values f_i / f_e, since an exact
        solution need not have a flux-continuous total current.
    C : scalar C_M / dt, F/(m^2 s)
    C_i, C_e, g_i, g_e : dicts species name -> (nmq,) arrays; per-side flux
        coefficient alpha_k C_M / (F z_k dt) and data g_k.
    """

    f: np.ndarray
    C: float
    C_i: dict = field(default_factory=dict)
    C_e: dict = field(default_factory=dict)
    g_i: dict = field(default_factory=dict)
    g_e: dict = field(default_factory=dict)
    f_e: np.ndarray = None

    @property
    def f_i(self):
        return self.f

    @property
    def f_ecs(self):
        return self.f if self.f_e is None else self.f_e


def _robin_coefficients(alpha_i, alpha_e, species, consts, dt):
    C_i, C_e = {}, {}
    for s in solved_species(species):
        scale = consts.C_M / (consts.F * s.valence * dt)
        C_i[s.name] = alpha_i[s.name] * scale
        C_e[s.name] = alpha_e[s.name] * scale
    return C_i, C_e


def interface_data_passive(phi_m, traces_i, traces_e, currents, species, consts,
                           dt, counter=None):
    """Robin data for the splitting with channel currents kept in the
    potential equation.

    currents maps name -> I_ch,k (A/m^2) evaluated at the previous state.
    f    = phi_M - (dt / C_M) I_ch
    g_k  = phi_M - (dt / (C_M alpha_k)) I_ch,k      (per side)
    """
    phi_m = np.asarray(phi_m, dtype=float)
    i_total = sum(currents.values())
    f = phi_m - dt / consts.C_M * i_total
    alpha_i = alpha_fractions(traces_i, species, counter)
    alpha_e = alpha_fractions(traces_e, species, counter)
    C_i, C_e = _robin_coefficients(alpha_i, alpha_e, species, consts, dt)
    g_i, g_e = {}, {}
    for s in solved_species(species):
        g_i[s.name] = phi_m - dt / (consts.C_M * alpha_i[s.name]) * currents[s.name]
        g_e[s.name] = phi_m - dt / (consts.C_M * alpha_e[s.name]) * currents[s.name]
    return InterfaceData(f=f, C=consts.C_M / dt, C_i=C_i, C_e=C_e, g_i=g_i, g_e=g_e)


def interface_data_active(phi_m, traces_i, traces_e, currents, species, consts,
                          dt, counter=None):
    """Robin data for the splitting with channel currents handled by the
    membrane ODE stage.

    f    = phi_M                       (post-ODE membrane potential)
    g_k  = phi_M - (dt / (C_M alpha_k)) I_ch,k + (dt / C_M) I_ch   (per side)
    """
    phi_m = np.asarray(phi_m, dtype=float)
    i_total = sum(currents.values())
    alpha_i = alpha_fractions(traces_i, species, counter)
    alpha_e = alpha_fractions(traces_e, species, counter)
    C_i, C_e = _robin_coefficients(alpha_i, alpha_e, species, consts, dt)
    g_i, g_e = {}, {}
    shift = dt / consts.C_M * i_total
    for s in solved_species(species):
        g_i[s.name] = (phi_m - dt / (consts.C_M * alpha_i[s.name]) * currents[s.name]
                       + shift)
        g_e[s.name] = (phi_m - dt / (consts.C_M * alpha_e[s.name]) * currents[s.name]
                       + shift)
    return InterfaceData(f=phi_m.copy(), C=consts.C_M / dt,
                         C_i=C_i, C_e=C_e, g_i=g_i, g_e=g_e)
