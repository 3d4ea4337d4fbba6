"""Discrete-time Kalman filter for the harmonic-oscillator model of the axial motion.

State is X = (z, v) with v = p/m. Damping is dropped from the transition
(Gamma << omega^2), so F is an exact rotation in the (z, v/omega) plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from kfcool.errors import InvalidInputError, NoSteadyStateError, NumericalError
from kfcool.model import PhysicalParams


@dataclass(frozen=True)
class FilterState:
    """Estimate est_z (m), est_v (m/s), 2x2 error covariance (SI), step counter."""

    est_z: float
    est_v: float
    cov: np.ndarray
    step_count: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.array([self.est_z, self.est_v])


@dataclass(frozen=True)
class KalmanConfig:
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: float
    dt: float
    check_det: bool = field(default=True, repr=False)

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float).reshape(2, 2)
        Q = np.asarray(self.Q, dtype=float).reshape(2, 2)
        H = np.asarray(self.H, dtype=float).reshape(2)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "H", H)
        if not self.R > 0:
            raise InvalidInputError(f"R must be > 0, got {self.R}")
        if not np.allclose(Q, Q.T, rtol=1e-12, atol=0):
            raise InvalidInputError("Q must be symmetric")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-15 * max(np.trace(Q), 0.0):
            raise InvalidInputError("Q must be positive semidefinite")
        if self.check_det and abs(np.linalg.det(F) - 1.0) > 1e-12:
            raise InvalidInputError(f"det(F) = {np.linalg.det(F)!r} is not 1")


def discrete_transition(omega: float, dt: float) -> np.ndarray:
    """Exact transition of the undamped oscillator over ``dt``:

    [[cos w dt, sin(w dt)/w], [-w sin w dt, cos w dt]]
    """
    if not omega > 0:
        raise InvalidInputError(f"omega must be > 0, got {omega}")
    if dt < 0:
        raise InvalidInputError(f"dt must be >= 0, got {dt}")
    c, s = math.cos(omega * dt), math.sin(omega * dt)
    return np.array([[c, s / omega], [-omega * s, c]])


def default_config(params: PhysicalParams, dt: float, r_position: float, q_multiplier: float = 1.0,
                   temperature: float | None = None) -> KalmanConfig:
    """Physics-derived config: velocity process noise

        Q = G (2 Gamma k_B T / m + 2 hbar^2 k / m^2) dt G^T,  G = (0, 1)^T

    times ``q_multiplier``, measurement H = [1, 0] and R = ``r_position`` (m^2).
    """
    t = params.temperature if temperature is None else temperature
    q_v = (2 * params.gamma * params.k_B * t / params.mass
           + 2 * params.hbar**2 * params.k_meas / params.mass**2) * dt * q_multiplier
    Q = np.array([[0.0, 0.0], [0.0, q_v]])
    return KalmanConfig(discrete_transition(params.omega, dt), Q, np.array([1.0, 0.0]), r_position, dt)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def predict(state: FilterState, config: KalmanConfig) -> FilterState:
    F = config.F
    x = F @ state.x
    cov = _sym(F @ state.cov @ F.T + config.Q)
    return FilterState(float(x[0]), float(x[1]), cov, state.step_count)


def innovation(state: FilterState, meas_volts: float, cal: float, config: KalmanConfig):
    """(y, S): innovation in position units and its predicted variance."""
    y = meas_volts / cal - float(config.H @ state.x)
    s = float(config.H @ state.cov @ config.H) + config.R
    return y, s


def update(state: FilterState, meas_volts: float, cal: float, config: KalmanConfig) -> FilterState:
    """Measurement update with the Joseph-form covariance.

    ``cal`` is the detector gain in V/m, so meas_volts / cal is the measured
    position.
    """
    H = config.H
    y, s = innovation(state, meas_volts, cal, config)
    if not s > 0:
        raise NumericalError(f"innovation variance S = {s} is not positive")
    K = state.cov @ H / s
    x = state.x + K * y
    A = np.eye(2) - np.outer(K, H)
    cov = _sym(A @ state.cov @ A.T + config.R * np.outer(K, K))
    return FilterState(float(x[0]), float(x[1]), cov, state.step_count + 1)


def filter_step(state: FilterState, meas_volts: float, cal: float, config: KalmanConfig) -> FilterState:
    """predict then update."""
    return update(predict(state, config), meas_volts, cal, config)


def run_filter(measurements, cal: float, config: KalmanConfig, state: FilterState):
    """Filter a whole record. Returns posterior estimates (n, 2), normalized innovations
    squared (n,) and the final state."""
    out = np.empty((len(measurements), 2))
    nis = np.empty(len(measurements))
    for i, meas in enumerate(measurements):
        state = predict(state, config)
        y, s = innovation(state, meas, cal, config)
        nis[i] = y * y / s
        state = update(state, meas, cal, config)
        out[i] = state.est_z, state.est_v
    return out, nis, state


def steady_state_covariance(config: KalmanConfig, p0: np.ndarray | None = None, rtol: float = 1e-14,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Posterior error covariance at the fixed point of the predict+update map.

    Found by iterating the Riccati map itself. With Q = 0 the fixed point is
    the zero matrix (the information grows without bound).
    """
    if not np.any(config.Q):
        return np.zeros((2, 2))
    H = config.H
    obs = np.vstack([H, H @ config.F])
    if np.linalg.matrix_rank(obs) < 2:
        raise InvalidInputError("(F, H) is not observable")
    P = np.array(config.Q if p0 is None else p0, dtype=float)
    F, Q, R = config.F, config.Q, config.R
    eye = np.eye(2)
    for _ in range(max_iter):
        Pp = _sym(F @ P @ F.T + Q)
        K = Pp @ H / (H @ Pp @ H + R)
        A = eye - np.outer(K, H)
        Pn = _sym(A @ Pp @ A.T + R * np.outer(K, K))
        d = np.sqrt(np.abs(np.diag(Pn)))
        if np.max(np.abs(Pn - P) / np.outer(d, d)) <= rtol:
            return Pn
        P = Pn
    raise NoSteadyStateError(f"Riccati iteration did not converge in {max_iter} iterations")


def initial_state(config: KalmanConfig, cov: np.ndarray | None = None) -> FilterState:
    """Zero estimate with the given (default: steady-state) covariance."""
    if cov is None:
        cov = steady_state_covariance(config)
    return FilterState(0.0, 0.0, np.array(cov, dtype=float))


def with_q_multiplier(config: KalmanConfig, mult: float) -> KalmanConfig:
    return replace(config, Q=config.Q * mult)
