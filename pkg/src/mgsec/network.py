"""Bus admittance assembly and Kron reduction to an equivalent DER-bus network.

Loads are folded in as constant-impedance shunts and every non-DER bus is
eliminated by a Schur complement, so the dynamic model only ever sees the
conductance/susceptance matrices G, B among DER buses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    """Raised for ill-posed network definitions (disconnected, singular)."""


@dataclass
class NetworkModel:
    """Equivalent per-unit network among the retained DER buses.

    Attributes:
        n_der: number of DER buses.
        G: n x n conductance matrix (per-unit).
        B: n x n susceptance matrix (per-unit).
        grid_connected: True while a slack pin holds bus 0 at the nominal
            angle/voltage reference.
    """

    n_der: int
    G: np.ndarray
    B: np.ndarray
    grid_connected: bool = False

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.n_der < 1:
            raise NetworkError("network needs at least one DER bus")
        if self.G.shape != (self.n_der, self.n_der):
            raise NetworkError(f"G must be {self.n_der}x{self.n_der}, got {self.G.shape}")
        if self.B.shape != (self.n_der, self.n_der):
            raise NetworkError(f"B must be {self.n_der}x{self.n_der}, got {self.B.shape}")
        if not np.allclose(self.G, self.G.T, atol=1e-9) or not np.allclose(
            self.B, self.B.T, atol=1e-9
        ):
            raise NetworkError("G and B must be symmetric (reciprocal lines)")

    @property
    def Y(self) -> np.ndarray:
        """Complex admittance G + jB."""
        return self.G + 1j * self.B


def assemble_bus_admittance(n_bus, lines, loads=()):
    """Build the full complex bus admittance matrix.

    Args:
        n_bus: total bus count.
        lines: iterable of (bus_i, bus_j, R, X) in per-unit.
        loads: iterable of (bus, P, Q, V_nom) folded as constant-impedance
            shunts y = (P - jQ) / V_nom**2.

    Returns:
        (n_bus, n_bus) complex ndarray.
    """
    Y = np.zeros((n_bus, n_bus), dtype=complex)
    for (i, j, r, x) in lines:
        if not (np.isfinite(r) and np.isfinite(x)):
            raise NetworkError(f"line ({i},{j}) has non-finite impedance")
        if r < 0:
            raise NetworkError(f"line ({i},{j}) has negative resistance")
        z = complex(r, x)
        if z == 0:
            raise NetworkError(f"line ({i},{j}) has zero impedance")
        y = 1.0 / z
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    for (bus, p, q, v_nom) in loads:
        if v_nom <= 0:
            raise NetworkError(f"load at bus {bus} has nonpositive nominal voltage")
        Y[bus, bus] += complex(p, -q) / v_nom**2
    return Y


def kron_reduce(Y, keep):
    """Eliminate all buses not in ``keep`` via the Schur complement.

    The eliminated buses must carry zero current injection, which holds here
    because loads are already folded into Y as shunts.
    """
    keep = list(keep)
    n = Y.shape[0]
    drop = [i for i in range(n) if i not in keep]
    if not drop:
        return Y[np.ix_(keep, keep)].copy()
    Ykk = Y[np.ix_(keep, keep)]
    Ykd = Y[np.ix_(keep, drop)]
    Ydk = Y[np.ix_(drop, keep)]
    Ydd = Y[np.ix_(drop, drop)]
    try:
        X = np.linalg.solve(Ydd, Ydk)
    except np.linalg.LinAlgError as exc:
        raise NetworkError("singular interior block during Kron reduction") from exc
    cond = np.linalg.cond(Ydd)
    if not np.isfinite(cond) or cond > 1e12:
        raise NetworkError(
            f"interior block nearly singular during Kron reduction (cond={cond:.2e})"
        )
    return Ykk - Ykd @ X


def _connected(n_bus, lines):
    adj = [[] for _ in range(n_bus)]
    for (i, j, *_rest) in lines:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for k in adj[stack.pop()]:
            if k not in seen:
                seen.add(k)
                stack.append(k)
    return len(seen) == n_bus


def build_network(lines, loads, der_buses, grid_connected=False) -> NetworkModel:
    """Reduce a bus/line/load description to the equivalent DER-bus network.

    Args:
        lines: list of (bus_i, bus_j, R, X), per-unit.
        loads: list of (bus, P, Q, V_nom), per-unit.
        der_buses: bus indices to retain; their order fixes the DER index.

    Returns:
        NetworkModel with G, B among the DER buses only.
    """
    der_buses = list(der_buses)
    if not der_buses:
        raise NetworkError("der_buses must not be empty")
    all_buses = set(der_buses)
    for (i, j, *_rest) in lines:
        all_buses.update((i, j))
    for (bus, *_rest) in loads:
        all_buses.add(bus)
    n_bus = max(all_buses) + 1
    if lines and not _connected(n_bus, lines):
        raise NetworkError("network is disconnected")
    if not lines and n_bus > 1:
        raise NetworkError("network is disconnected")
    Y = assemble_bus_admittance(n_bus, lines, loads)
    Yred = kron_reduce(Y, der_buses)
    return NetworkModel(
        n_der=len(der_buses),
        G=Yred.real.copy(),
        B=Yred.imag.copy(),
        grid_connected=grid_connected,
    )


@dataclass
class NetworkState:
    """Phasor state of the retained buses at simulation time t."""

    theta: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def copy(self) -> "NetworkState":
        return NetworkState(self.theta.copy(), self.v.copy(), self.t)


def compute_injections(net: NetworkModel, state: NetworkState):
    """Per-unit active/reactive injections at every retained bus.

    P_i = sum_j V_i V_j (G_ij cos(th_i - th_j) + B_ij sin(th_i - th_j))
    Q_i = sum_j V_i V_j (G_ij sin(th_i - th_j) - B_ij cos(th_i - th_j))
    """
    vc = state.v * np.exp(1j * state.theta)
    s = vc * np.conj(net.Y @ vc)
    return s.real, s.imag


def injections_from_arrays(G, B, theta, v):
    """Same power-flow sums on raw arrays (used inside integrator stages)."""
    vc = v * np.exp(1j * theta)
    s = vc * np.conj((G + 1j * B) @ vc)
    return s.real, s.imag
