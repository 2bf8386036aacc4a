"""Discrete-time LQR on the identified lifted model.

The Riccati solution is found by plain backward fixed-point iteration, which
is cheap at the lifted dimensions used here and easy to verify against a
finite-horizon dynamic-programming recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RiccatiError(RuntimeError):
    """Riccati iteration failed; carries the last relative residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class CostMatrices:
    """Block-diagonal LQR weights over the lifted state and the input shifts."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if not np.allclose(self.R, self.R.T, atol=1e-12):
            raise ValueError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(self.Q) < -1e-12 * max(1.0, np.linalg.norm(self.Q, 2))):
            raise ValueError("Q must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ValueError("R must be positive definite")


def build_cost(n, q_v=1e3, q_sin=0.0, q_cos=0.0, q_omega=1e-6,
               r_p=1e-6, r_q=1e-6) -> CostMatrices:
    """Assemble Q (4n x 4n) and R (2n x 2n) from per-block scalar weights."""
    eye = np.eye(n)
    Q = np.zeros((4 * n, 4 * n))
    for k, w in enumerate((q_v, q_sin, q_cos, q_omega)):
        Q[k * n:(k + 1) * n, k * n:(k + 1) * n] = w * eye
    R = np.zeros((2 * n, 2 * n))
    R[:n, :n] = r_p * eye
    R[n:, n:] = r_q * eye
    return CostMatrices(Q=Q, R=R)


def _riccati_map(S, A, B, Q, R):
    BtS = B.T @ S
    M = 0.5 * ((R + BtS @ B) + (R + BtS @ B).T)
    try:
        np.linalg.cholesky(M)  # definiteness check
        gain_term = np.linalg.solve(M, BtS @ A)
    except np.linalg.LinAlgError as exc:
        raise RiccatiError("(R + B'SB) is not positive definite") from exc
    S_next = A.T @ S @ A - (A.T @ BtS.T) @ gain_term + Q
    return 0.5 * (S_next + S_next.T)


def solve_dare(A, B, Q, R, tol=1e-9, max_iter=10_000, s0=None):
    """Fixed point of the discrete algebraic Riccati equation.

    Iterates S <- A'SA - A'SB (R + B'SB)^-1 B'SA + Q from S0 = Q (or a
    warm start), symmetrizing each pass, until the relative Frobenius change
    drops below tol.

    Raises:
        RiccatiError: no convergence within max_iter (residual attached), or
            an indefinite (R + B'SB) along the way.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    S = Q.copy() if s0 is None else 0.5 * (np.asarray(s0, dtype=float) + np.asarray(s0, dtype=float).T)
    rel = np.inf
    for _ in range(max_iter):
        S_next = _riccati_map(S, A, B, Q, R)
        denom = max(np.linalg.norm(S, "fro"), 1e-30)
        rel = np.linalg.norm(S_next - S, "fro") / denom
        S = S_next
        if not np.all(np.isfinite(S)):
            raise RiccatiError("Riccati iteration diverged", residual=rel)
        if rel <= tol:
            return S
    raise RiccatiError(
        f"Riccati iteration did not converge in {max_iter} steps "
        f"(relative residual {rel:.3e})", residual=rel)


def compute_gain(A, B, S, R):
    """State-feedback gain K = (B'SB + R)^-1 B'SA."""
    BtS = np.asarray(B).T @ S
    M = BtS @ B + R
    try:
        return np.linalg.solve(M, BtS @ A)
    except np.linalg.LinAlgError as exc:
        raise RiccatiError("singular (B'SB + R) when forming the gain") from exc


def control_step(K, z, u_lb, u_ub):
    """Saturated state feedback u = clip(-K z, u_lb, u_ub)."""
    return np.clip(-(K @ np.asarray(z, dtype=float)), u_lb, u_ub)


@dataclass
class ControllerState:
    """Current gain, Riccati solution and saturation bounds."""

    K: np.ndarray
    S: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray

    def __post_init__(self):
        self.u_lb = np.asarray(self.u_lb, dtype=float)
        self.u_ub = np.asarray(self.u_ub, dtype=float)
        if np.any(self.u_lb >= self.u_ub):
            raise ValueError("u_lb must be elementwise below u_ub")


class LqrController:
    """Re-solves the LQR each step on the freshest identified model.

    Holds the previous gain when a solve fails (the identified model can be
    momentarily unstabilizable) and optionally warm-starts the Riccati
    iteration from the last solution.
    """

    def __init__(self, cost: CostMatrices, u_lb, u_ub, tol=1e-9,
                 max_iter=10_000, warm_start=True):
        self.cost = cost
        self.u_lb = np.asarray(u_lb, dtype=float)
        self.u_ub = np.asarray(u_ub, dtype=float)
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.state: ControllerState | None = None
        self.last_model_step = -1
        self.solve_failures = 0

    def update_gain(self, A, B, model_step):
        """Refresh K from (A, B); returns True on a successful solve."""
        s0 = self.state.S if (self.warm_start and self.state is not None) else None
        try:
            S = solve_dare(A, B, self.cost.Q, self.cost.R, self.tol,
                           self.max_iter, s0=s0)
            K = compute_gain(A, B, S, self.cost.R)
            radius = np.max(np.abs(np.linalg.eigvals(A - B @ K)))
            if not np.isfinite(radius) or radius >= 1.0 + 1e-9:
                raise RiccatiError(f"closed loop not stable (radius {radius:.4f})")
        except RiccatiError:
            self.solve_failures += 1
            return False
        self.state = ControllerState(K=K, S=S, u_lb=self.u_lb, u_ub=self.u_ub)
        self.last_model_step = model_step
        return True

    def command(self, z):
        """Saturated input for the lifted state; zero before the first gain."""
        if self.state is None:
            return np.zeros_like(self.u_lb)
        return control_step(self.state.K, z, self.state.u_lb, self.state.u_ub)
