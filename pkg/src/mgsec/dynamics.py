"""Reduced-order DER primary-control dynamics.

Every unit, grid-forming or grid-following, obeys the same unified droop form

    dtheta/dt = -sigma_w * (P - P*) + sigma_w * dP*
    dV/dt     = -(sigma_v / tau_v) * (Q - Q*) + (sigma_v / tau_v) * dQ*

driven by low-pass-filtered powers. Secondary control acts through additive
reference shifts u = (dP*, dQ*) that accumulate into the setpoints.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .network import NetworkModel, NetworkState, injections_from_arrays


class DerMode(enum.Enum):
    GRID_FORMING = "grid_forming"
    GRID_FOLLOWING = "grid_following"
    NON_CONTROLLABLE = "non_controllable"


class SimulationDivergence(RuntimeError):
    """State went non-finite or nonphysical; carries the simulation time."""

    def __init__(self, message, t):
        super().__init__(f"{message} at t={t:.6f} s")
        self.t = t


class SetpointError(ValueError):
    """Secondary setpoint update sent to a unit that must not receive one."""


@dataclass
class DerUnit:
    """One DER's primary-control parameters and mutable power state (per-unit).

    sigma_omega and sigma_v are the frequency/voltage droop gains already
    normalized on the system base; tau_v is the equivalent first-order lag of
    the voltage-forming loop and tf the power measurement filter constant.
    """

    mode: DerMode
    sigma_omega: float
    sigma_v: float
    tau_v: float
    tf: float
    p_ref: float = 0.0
    q_ref: float = 0.0
    p_filt: float = 0.0
    q_filt: float = 0.0

    def __post_init__(self):
        if self.sigma_omega <= 0 or self.sigma_v <= 0:
            raise ValueError("droop gains must be positive")
        if self.tau_v <= 0 or self.tf <= 0:
            raise ValueError("time constants must be positive")

    @property
    def controllable(self) -> bool:
        return self.mode is not DerMode.NON_CONTROLLABLE


def filter_step(x, u, tf, dt):
    """Advance a first-order low-pass filter by ``dt`` (exact discretization).

    x+ = u + (x - u) * exp(-dt / tf)
    """
    if dt <= 0 or tf <= 0:
        raise ValueError("dt and tf must be positive")
    return u + (x - u) * np.exp(-dt / tf)


def droop_derivatives(der: DerUnit, p, q, u=(0.0, 0.0)):
    """Unified droop law: returns (dtheta/dt [rad/s], dV/dt [pu/s])."""
    dp_ref, dq_ref = u
    dtheta = -der.sigma_omega * (p - der.p_ref) + der.sigma_omega * dp_ref
    dv = -(der.sigma_v / der.tau_v) * (q - der.q_ref) + (der.sigma_v / der.tau_v) * dq_ref
    return dtheta, dv


def apply_setpoint_update(der: DerUnit, dp, dq):
    """Accumulate a secondary reference shift into the unit's setpoints."""
    if not der.controllable:
        raise SetpointError("setpoint update rejected: unit is non-controllable")
    der.p_ref += dp
    der.q_ref += dq


@dataclass
class UncertaintyConfig:
    """Residual-dynamics injection: first-order-lagged seeded Gaussian noise."""

    enabled: bool = False
    amp_omega: float = 0.0
    amp_v: float = 0.0
    lag: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.amp_omega < 0 or self.amp_v < 0:
            raise ValueError("residual amplitudes must be >= 0")
        if self.lag <= 0:
            raise ValueError("residual lag must be positive")


class ResidualProcess:
    """Stateful generator behind residual_step; deterministic given the seed."""

    def __init__(self, cfg: UncertaintyConfig, n: int):
        self.cfg = cfg
        self.n = n
        self.state_omega = np.zeros(n)
        self.state_v = np.zeros(n)
        self._rng = np.random.default_rng(cfg.seed)

    def step(self, dt):
        cfg = self.cfg
        if not cfg.enabled or (cfg.amp_omega == 0.0 and cfg.amp_v == 0.0):
            return np.zeros(self.n), np.zeros(self.n)
        alpha = np.exp(-dt / cfg.lag)
        w_omega = self._rng.standard_normal(self.n) * cfg.amp_omega
        w_v = self._rng.standard_normal(self.n) * cfg.amp_v
        self.state_omega = w_omega + (self.state_omega - w_omega) * alpha
        self.state_v = w_v + (self.state_v - w_v) * alpha
        return self.state_omega.copy(), self.state_v.copy()


def residual_step(process: ResidualProcess, dt):
    """Advance the residual process one step; zero when disabled."""
    return process.step(dt)


def _derivatives(net, ders, theta, v, pf, qf, u, f_omega, f_v, slack_pin):
    """Right-hand side of the coupled (theta, v, p_filt, q_filt) ODE."""
    p_inst, q_inst = injections_from_arrays(net.G, net.B, theta, v)
    n = net.n_der
    dtheta = np.empty(n)
    dv = np.empty(n)
    dpf = np.empty(n)
    dqf = np.empty(n)
    for i, der in enumerate(ders):
        dth_i, dv_i = droop_derivatives(der, pf[i], qf[i], (u[i], u[n + i]))
        dtheta[i] = dth_i + f_omega[i]
        dv[i] = dv_i + f_v[i]
        dpf[i] = (p_inst[i] - pf[i]) / der.tf
        dqf[i] = (q_inst[i] - qf[i]) / der.tf
    if slack_pin:
        dtheta[0] = 0.0
        dv[0] = 0.0
    return dtheta, dv, dpf, dqf


def simulate_step(net: NetworkModel, ders, state: NetworkState, u, dt,
                  f_omega=None, f_v=None):
    """Advance the microgrid one primary step with classic 4th-order Runge-Kutta.

    Integrates angles, voltages and the power-filter states as one coupled
    system; while ``net.grid_connected`` bus 0 is pinned to the slack
    reference (theta=0, V=1) instead of integrated. The per-unit disturbance
    rates ``f_omega``/``f_v`` are held constant over the step.

    Returns the new NetworkState; the filter states inside ``ders`` are
    updated in place.

    Raises:
        SimulationDivergence: on non-finite state or nonpositive voltage.
    """
    if dt > 1e-3:
        raise ValueError("primary step must be <= 1 ms for explicit integration")
    n = net.n_der
    u = np.asarray(u, dtype=float)
    if u.shape != (2 * n,):
        raise ValueError(f"u must have shape ({2 * n},)")
    if f_omega is None:
        f_omega = np.zeros(n)
    if f_v is None:
        f_v = np.zeros(n)

    theta = state.theta
    v = state.v
    pf = np.array([d.p_filt for d in ders])
    qf = np.array([d.q_filt for d in ders])
    pin = net.grid_connected
    if pin:
        theta = theta.copy()
        v = v.copy()
        theta[0] = 0.0
        v[0] = 1.0

    k1 = _derivatives(net, ders, theta, v, pf, qf, u, f_omega, f_v, pin)
    k2 = _derivatives(net, ders,
                      theta + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1],
                      pf + 0.5 * dt * k1[2], qf + 0.5 * dt * k1[3],
                      u, f_omega, f_v, pin)
    k3 = _derivatives(net, ders,
                      theta + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1],
                      pf + 0.5 * dt * k2[2], qf + 0.5 * dt * k2[3],
                      u, f_omega, f_v, pin)
    k4 = _derivatives(net, ders,
                      theta + dt * k3[0], v + dt * k3[1],
                      pf + dt * k3[2], qf + dt * k3[3],
                      u, f_omega, f_v, pin)

    w = dt / 6.0
    theta_n = theta + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    v_n = v + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    pf_n = pf + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    qf_n = qf + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])

    t_next = state.t + dt
    if not (np.all(np.isfinite(theta_n)) and np.all(np.isfinite(v_n))
            and np.all(np.isfinite(pf_n)) and np.all(np.isfinite(qf_n))):
        raise SimulationDivergence("non-finite state", t_next)
    if np.any(v_n <= 0):
        raise SimulationDivergence("nonpositive bus voltage", t_next)

    for i, der in enumerate(ders):
        der.p_filt = pf_n[i]
        der.q_filt = qf_n[i]
    return NetworkState(theta_n, v_n, t_next)


def frequency_deviation(ders, u=None, f_omega=None):
    """Instantaneous dtheta/dt [rad/s] per bus from the droop law.

    The angle rate is the frequency deviation from nominal; this evaluates it
    at the current filter states so it can be sampled as a measurement.
    """
    n = len(ders)
    if u is None:
        u = np.zeros(2 * n)
    if f_omega is None:
        f_omega = np.zeros(n)
    out = np.empty(n)
    for i, der in enumerate(ders):
        dth, _ = droop_derivatives(der, der.p_filt, der.q_filt, (u[i], u[n + i]))
        out[i] = dth + f_omega[i]
    return out
