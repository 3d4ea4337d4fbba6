"""Physical parameters of the levitated particle and the coefficients derived from them.

All quantities are SI. Field names carry their unit in the docstrings only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from kfcool.errors import InvalidInputError

# CODATA 2018 (c, hbar, k_B exact or to 10 digits)
C_LIGHT = 299_792_458.0
HBAR = 1.054571817e-34
K_B = 1.380649e-23
AMU = 1.66053906660e-27

# dry air, mean molecular mass
AIR_MOLECULAR_MASS = 28.97 * AMU
# Epstein coefficient for diffuse reflection with full accommodation
EPSTEIN_DELTA = 1.0 + math.pi / 8.0

DEFAULT_OMEGA = 2.0 * math.pi * 38e3
DEFAULT_TEMPERATURE = 300.0
MBAR = 100.0  # Pa


@dataclass(frozen=True)
class OpticsConfig:
    """Trapping/measurement beam.

    wavelength (m), power (W), waist (m), cross_section: Rayleigh cross section (m^2).
    """

    wavelength: float = 1550e-9
    power: float = 0.1
    waist: float = 1e-6
    cross_section: float = 1e-19

    def __post_init__(self):
        for name in ("wavelength", "waist", "cross_section"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"optics.{name} must be > 0, got {getattr(self, name)}")
        if not self.power >= 0:
            raise InvalidInputError(f"optics.power must be >= 0, got {self.power}")


@dataclass(frozen=True)
class ParticleSpec:
    """radius (m), density (kg/m^3), pressure of the surrounding gas (Pa)."""

    radius: float = 50e-9
    density: float = 1850.0
    pressure: float = 3.0 * MBAR

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidInputError(f"particle.radius must be > 0, got {self.radius}")
        if not self.density > 0:
            raise InvalidInputError(f"particle.density must be > 0, got {self.density}")
        if not self.pressure >= 0:
            raise InvalidInputError(f"particle.pressure must be >= 0, got {self.pressure}")

    @property
    def mass(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3 * self.density


def compute_measurement_rate(optics: OpticsConfig) -> float:
    """Position-measurement rate k in 1/(m^2 s).

    Chains the photon energy, the Rayleigh scattering rate and the
    measurement strength::

        omega_L = 2 pi c / lambda
        mu      = sigma P / (pi w0^2 hbar omega_L)
        k       = 12 pi^2 mu / (5 lambda^2)
    """
    if not (optics.wavelength > 0 and optics.waist > 0):
        raise InvalidInputError("wavelength and waist must be positive")
    omega_l = 2.0 * math.pi * C_LIGHT / optics.wavelength
    mu = optics.cross_section * optics.power / (math.pi * optics.waist**2 * HBAR * omega_l)
    return 12.0 * math.pi**2 * mu / (5.0 * optics.wavelength**2)


def compute_thermal_occupancy(omega: float, temperature: float) -> float:
    """Bose-Einstein occupancy of a mode at angular frequency ``omega``.

    Returns 0 at T = 0 (the limit), not an error.
    """
    if not omega > 0:
        raise InvalidInputError(f"omega must be > 0, got {omega}")
    if temperature < 0:
        raise InvalidInputError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return 0.0
    x = HBAR * omega / (K_B * temperature)
    if x > 700.0:
        return 0.0
    return 1.0 / math.expm1(x)


def compute_gas_damping(spec: ParticleSpec, temperature: float,
                        gas_molecular_mass: float = AIR_MOLECULAR_MASS) -> float:
    """Momentum damping rate (1/s) from free-molecular (Epstein) drag.

    Gamma = (4 pi / 3) delta r^2 rho_gas v_mean / m, with
    rho_gas = P m_gas / (k_B T) and v_mean = sqrt(8 k_B T / (pi m_gas)).
    Exactly linear in pressure.
    """
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0, got {temperature}")
    rho_gas = spec.pressure * gas_molecular_mass / (K_B * temperature)
    v_mean = math.sqrt(8.0 * K_B * temperature / (math.pi * gas_molecular_mass))
    drag = 4.0 * math.pi / 3.0 * EPSTEIN_DELTA * spec.radius**2 * rho_gas * v_mean
    return drag / spec.mass


@dataclass(frozen=True)
class PhysicalParams:
    """Coefficients of the conditional Langevin model.

    omega: trap angular frequency (rad/s); mass (kg); gamma: momentum damping
    rate (1/s); temperature: gas temperature (K); eta: detection efficiency;
    k_meas: measurement rate (1/(m^2 s)); nbar: thermal occupancy, computed
    from omega and temperature when left as None.
    """

    omega: float = DEFAULT_OMEGA
    mass: float = ParticleSpec().mass
    gamma: float = 0.0
    temperature: float = DEFAULT_TEMPERATURE
    eta: float = 0.1
    k_meas: float = 0.0
    nbar: float | None = None
    hbar: float = field(default=HBAR, repr=False)
    k_B: float = field(default=K_B, repr=False)

    def __post_init__(self):
        if not self.omega > 0:
            raise InvalidInputError(f"omega must be > 0, got {self.omega}")
        if not self.mass > 0:
            raise InvalidInputError(f"mass must be > 0, got {self.mass}")
        if not self.gamma >= 0:
            raise InvalidInputError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidInputError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.k_meas >= 0:
            raise InvalidInputError(f"k_meas must be >= 0, got {self.k_meas}")
        if self.temperature < 0:
            raise InvalidInputError(f"temperature must be >= 0, got {self.temperature}")
        if self.nbar is None:
            object.__setattr__(self, "nbar", compute_thermal_occupancy(self.omega, self.temperature))
        elif self.nbar < 0:
            raise InvalidInputError(f"nbar must be >= 0, got {self.nbar}")

    @classmethod
    def from_experiment(cls, particle: ParticleSpec | None = None, optics: OpticsConfig | None = None,
                        omega: float = DEFAULT_OMEGA, temperature: float = DEFAULT_TEMPERATURE,
                        eta: float = 0.1) -> PhysicalParams:
        """Derive every coefficient from experiment-level inputs."""
        particle = particle or ParticleSpec()
        optics = optics or OpticsConfig()
        return cls(
            omega=omega,
            mass=particle.mass,
            gamma=compute_gas_damping(particle, temperature) if temperature > 0 else 0.0,
            temperature=temperature,
            eta=eta,
            k_meas=compute_measurement_rate(optics),
        )

    def with_(self, **changes) -> PhysicalParams:
        """Copy with fields replaced; ``nbar`` is recomputed unless given."""
        if "nbar" not in changes and ({"omega", "temperature"} & changes.keys()):
            changes["nbar"] = None
        return replace(self, **changes)

    @property
    def thermal_force_std(self) -> float:
        """sqrt(2 Gamma k_B T m): momentum diffusion amplitude of the gas (kg m / s^1.5)."""
        return math.sqrt(2.0 * self.gamma * self.k_B * self.temperature * self.mass)

    @property
    def backaction_force_std(self) -> float:
        """sqrt(2 hbar^2 k): momentum diffusion amplitude of measurement backaction."""
        return math.sqrt(2.0 * self.hbar**2 * self.k_meas)

    @property
    def thermal_position_variance(self) -> float:
        """Equipartition <z^2> = k_B T / (m omega^2)."""
        return self.k_B * self.temperature / (self.mass * self.omega**2)
