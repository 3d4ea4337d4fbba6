"""Gaussian moment equations of the conditional state and their Riccati fixed point.

The state is the conditional mean (mean_z, mean_p) and the symmetrized
covariance (Vz, Vp, C). With feedback factor

    f = 1 + beta * omega * <p> <z> / <H>

the drift reads

    d<z> = <p>/m - Gamma <z>
    d<p> = -m omega^2 <z> f - Gamma <p>
    dVz  = 2C/m - 8 eta k Vz^2 - Gamma Vz + Gamma (2 nbar + 1) hbar / (2 m omega) - 3 Gamma <z>^2
    dVp  = -2 m omega^2 C f - 8 eta k C^2 + 2 k hbar^2 - Gamma Vp
           + Gamma (2 nbar + 1) m omega hbar / 2 - 3 Gamma <p>^2
    dC   = Vp/m - m omega^2 Vz f - 8 eta k C Vz - Gamma C - 3 Gamma <p><z>

and the innovation enters the means only, as sqrt(8 eta k) (Vz, C) dW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kfcool.errors import InvalidInputError, NoSteadyStateError, NumericalError
from kfcool.model import PhysicalParams


@dataclass(frozen=True)
class GaussianState:
    """mean_z (m), mean_p (kg m/s), Vz (m^2), Vp (kg^2 m^2/s^2), C (kg m^2/s)."""

    mean_z: float
    mean_p: float
    Vz: float
    Vp: float
    C: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_z, self.mean_p, self.Vz, self.Vp, self.C])

    def uncertainty_margin(self, hbar: float) -> float:
        """Vz Vp - C^2 - hbar^2/4; non-negative for a physical state."""
        return self.Vz * self.Vp - self.C**2 - hbar**2 / 4.0

    def energy(self, params: PhysicalParams, include_variance: bool = True) -> float:
        m, w = params.mass, params.omega
        e = self.mean_p**2 / (2 * m) + 0.5 * m * w**2 * self.mean_z**2
        if include_variance:
            e += self.Vp / (2 * m) + 0.5 * m * w**2 * self.Vz
        return e

    @classmethod
    def thermal(cls, params: PhysicalParams, mean_z: float = 0.0, mean_p: float = 0.0) -> GaussianState:
        """Thermal state at occupancy nbar: Vz = (2 nbar + 1) hbar / (2 m omega), Vp = m^2 omega^2 Vz."""
        vz = (2 * params.nbar + 1) * params.hbar / (2 * params.mass * params.omega)
        return cls(mean_z, mean_p, vz, (params.mass * params.omega) ** 2 * vz, 0.0)


@dataclass(frozen=True)
class FeedbackGain:
    """Dimensionless modulation depth beta, |beta| < 1."""

    beta: float = 0.0

    def __post_init__(self):
        if not abs(self.beta) < 1.0:
            raise InvalidInputError(f"|beta| must be < 1, got {self.beta}")


def _as_beta(beta) -> float:
    return beta.beta if isinstance(beta, FeedbackGain) else FeedbackGain(float(beta)).beta


def _drift(x, params: PhysicalParams, beta: float, include_gamma_moment_terms: bool,
           variance_in_energy: bool):
    mz, mp, vz, vp, c = x
    m, w, g = params.mass, params.omega, params.gamma
    ek = params.eta * params.k_meas
    hbar = params.hbar
    mw2 = m * w * w
    f = 1.0
    if beta:
        h = mp * mp / (2 * m) + 0.5 * mw2 * mz * mz
        if variance_in_energy:
            h += vp / (2 * m) + 0.5 * mw2 * vz
        if h != 0.0:
            f += beta * w * mp * mz / h
    two_n1 = 2 * params.nbar + 1
    dmz = mp / m - g * mz
    dmp = -mw2 * mz * f - g * mp
    dvz = 2 * c / m - 8 * ek * vz * vz - g * vz + g * two_n1 * hbar / (2 * m * w)
    dvp = (-2 * mw2 * c * f - 8 * ek * c * c + 2 * params.k_meas * hbar * hbar
           - g * vp + g * two_n1 * m * w * hbar / 2)
    dc = vp / m - mw2 * vz * f - 8 * ek * c * vz - g * c
    if include_gamma_moment_terms and g:
        dvz -= 3 * g * mz * mz
        dvp -= 3 * g * mp * mp
        dc -= 3 * g * mp * mz
    return dmz, dmp, dvz, dvp, dc


def moment_drift(state: GaussianState, params: PhysicalParams, beta=0.0,
                 include_gamma_moment_terms: bool = True, variance_in_energy: bool = True) -> np.ndarray:
    """Deterministic right-hand side (d/dt of mean_z, mean_p, Vz, Vp, C)."""
    return np.array(_drift(state.as_array().tolist(), params, _as_beta(beta), include_gamma_moment_terms,
                           variance_in_energy))


def propagate_moments(state: GaussianState, params: PhysicalParams, beta, dW: float, dt: float,
                      include_gamma_moment_terms: bool = True, variance_in_energy: bool = True,
                      check_uncertainty: bool = True) -> GaussianState:
    """One step of the conditional moment equations.

    The drift is advanced with classical RK4; the innovation ``dW`` (a
    Wiener increment, variance dt) is added Euler-Maruyama style with
    coefficients taken at the start of the step. Because the noise only
    enters the means and its coefficients depend only on the (deterministic)
    covariances, this is Ito-consistent.

    The step is explicit: the measurement term needs 16 eta k Vz dt below
    about 2.7, which a hot (thermal) initial variance can violate at
    dt = T/1000.
    """
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    b = _as_beta(beta)
    x = (state.mean_z, state.mean_p, state.Vz, state.Vp, state.C)
    args = (params, b, include_gamma_moment_terms, variance_in_energy)
    h = 0.5 * dt
    k1 = _drift(x, *args)
    k2 = _drift([a + h * d for a, d in zip(x, k1)], *args)
    k3 = _drift([a + h * d for a, d in zip(x, k2)], *args)
    k4 = _drift([a + dt * d for a, d in zip(x, k3)], *args)
    x_new = [a + dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4) for a, d1, d2, d3, d4 in zip(x, k1, k2, k3, k4)]
    if dW:
        s = math.sqrt(8 * params.eta * params.k_meas) * dW
        x_new[0] += s * x[2]
        x_new[1] += s * x[4]
    new = GaussianState(*x_new)
    if not (new.Vz > 0 and new.Vp > 0):
        raise NumericalError(f"non-positive variance after step: Vz={new.Vz}, Vp={new.Vp}")
    if check_uncertainty:
        bound = params.hbar**2 / 4.0
        if new.Vz * new.Vp - new.C**2 < bound * (1 - 1e-9):
            raise NumericalError("uncertainty relation violated: Vz Vp - C^2 < hbar^2/4")
    return new


def integrate_moments(state: GaussianState, params: PhysicalParams, beta, dt: float, n_steps: int,
                      rng: np.random.Generator | None = None, record_every: int = 0, **kwargs):
    """Repeated propagate_moments. ``rng=None`` means dW = 0 (noise-free).

    Returns the final state, plus the recorded states when ``record_every`` > 0.
    """
    sq = math.sqrt(dt)
    history = []
    for i in range(n_steps):
        dw = float(rng.standard_normal()) * sq if rng is not None else 0.0
        state = propagate_moments(state, params, beta, dw, dt, **kwargs)
        if record_every and (i + 1) % record_every == 0:
            history.append(state)
    return (state, history) if record_every else state


def _riccati_residual(v, params: PhysicalParams):
    vz, vp, c = v
    m, w = params.mass, params.omega
    ek = params.eta * params.k_meas
    return np.array([
        2 * c / m - 8 * ek * vz * vz,
        -2 * m * w * w * c - 8 * ek * c * c + 2 * params.k_meas * params.hbar**2,
        vp / m - m * w * w * vz - 8 * ek * c * vz,
    ])


def riccati_steady_state(params: PhysicalParams, max_iter: int = 50) -> tuple[float, float, float]:
    """Fixed point (Vz, Vp, C) of the covariance equations with beta = Gamma = 0.

    The zero of the dVp equation is a quadratic in C (taken in its
    cancellation-free form); Vz and Vp then follow from dVz = 0 and dC = 0.
    A few damped Newton steps on the 3-d residual polish the root.
    """
    m, w = params.mass, params.omega
    ek = params.eta * params.k_meas
    if not params.k_meas > 0:
        raise NoSteadyStateError("no steady state without measurement (k_meas = 0)")
    if not ek > 0:
        raise NoSteadyStateError("no steady state with zero detection efficiency")
    hk = 2 * params.k_meas * params.hbar**2
    # 8 ek C^2 + 2 m w^2 C - hk = 0, positive root
    c = 2 * hk / (2 * m * w * w + math.sqrt(4 * m * m * w**4 + 32 * ek * hk))
    vz = math.sqrt(c / (4 * m * ek))
    vp = m * (m * w * w * vz + 8 * ek * c * vz)
    v = np.array([vz, vp, c])
    scale = np.abs(v)
    for _ in range(max_iter):
        r = _riccati_residual(v, params)
        vz, vp, c = v
        jac = np.array([
            [-16 * ek * vz, 0.0, 2 / m],
            [0.0, 0.0, -2 * m * w * w - 16 * ek * c],
            [-m * w * w - 8 * ek * c, 1 / m, -8 * ek * vz],
        ])
        rs = _residual_scale(v, params)
        try:
            step = scale * np.linalg.solve(jac * scale / rs[:, None], r / rs)
        except np.linalg.LinAlgError:
            break
        if np.all(np.abs(step) <= 1e-16 * scale):
            break
        t = 1.0
        norm0 = np.linalg.norm(r / _residual_scale(v, params))
        while t > 1e-4:
            trial = v - t * step
            if np.all(trial > 0) and np.linalg.norm(_riccati_residual(trial, params) / _residual_scale(trial, params)) <= norm0:
                v = trial
                break
            t *= 0.5
        else:
            break
    vz, vp, c = (float(x) for x in v)
    if not (vz > 0 and vp > 0):
        raise NoSteadyStateError("Riccati iteration left the positive cone")
    return vz, vp, c


def _residual_scale(v, params: PhysicalParams) -> np.ndarray:
    """Magnitude of the largest term in each residual component (for relative residuals)."""
    vz, vp, c = np.abs(v)
    m, w = params.mass, params.omega
    ek = params.eta * params.k_meas
    return np.array([
        max(2 * c / m, 8 * ek * vz * vz),
        max(2 * m * w * w * c, 8 * ek * c * c, 2 * params.k_meas * params.hbar**2),
        max(vp / m, m * w * w * vz, 8 * ek * c * vz),
    ])


def riccati_relative_residual(v, params: PhysicalParams) -> np.ndarray:
    """Residual of each covariance equation divided by its largest term."""
    v = np.asarray(v, dtype=float)
    return _riccati_residual(v, params) / _residual_scale(v, params)


def analytic_modulation(mean_z: float, mean_p: float, params: PhysicalParams) -> float:
    """sin(2 theta) of the tracked oscillation, theta = atan2(p, m omega z).

    Algebraic form: 2 (m omega z) p / ((m omega z)^2 + p^2).
    """
    q = params.mass * params.omega * mean_z
    r = max(abs(q), abs(mean_p))
    if r == 0.0:
        raise NumericalError("phase undefined at z = p = 0")
    q, pr = q / r, mean_p / r      # rescale so the squares cannot underflow
    return 2.0 * q * pr / (q * q + pr * pr)
