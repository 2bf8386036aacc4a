"""Closed-loop stability diagnostics: spectral radius, disc margins, BIBO runs.

The disc margin gives, per input channel, a complex-plane disc of simultaneous
gain/phase perturbations under which the LQR loop stays asymptotically stable:

    center = 1 + r_i / mu,   radius^2 = center^2 + (rho - r_i) / mu - 1

with rho = sigma_min(Q) / sigma_max(K)^2 and mu = sigma_max(B'SB). A negative
radius^2 means no disc guarantee for that channel; it is reported, not raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def spectral_radius(M) -> float:
    """Largest eigenvalue magnitude."""
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(M)))))


@dataclass
class DiscMargin:
    """Per-channel disc of tolerated complex input-channel perturbations."""

    channel: int
    center: float
    radius: float
    gain_lo: float
    gain_hi: float
    phase_lo: float
    phase_hi: float
    defined: bool = True

    def contains(self, alpha, strict=True) -> bool:
        """Whether the complex gain alpha lies inside the disc."""
        if not self.defined:
            return False
        d = abs(complex(alpha) - self.center)
        return d < self.radius if strict else d <= self.radius

    def as_dict(self):
        return {
            "channel": self.channel,
            "center": self.center,
            "radius": self.radius if self.defined else None,
            "gain_lo": self.gain_lo if self.defined else None,
            "gain_hi": self.gain_hi if self.defined else None,
            "phase_lo": self.phase_lo,
            "phase_hi": self.phase_hi,
            "defined": self.defined,
        }


def compute_disc_margins(Q, R, K, B, S):
    """Disc gain/phase margins for every input channel of the LQR loop."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    K = np.asarray(K, dtype=float)
    sig_k = np.linalg.norm(K, 2)
    rho = np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() / sig_k**2 if sig_k > 0 else np.inf
    mu = np.linalg.norm(np.asarray(B).T @ S @ B, 2)
    margins = []
    for i in range(R.shape[0]):
        r_i = R[i, i]
        center = 1.0 + r_i / mu
        rad_sq = center**2 + (rho - r_i) / mu - 1.0
        phase = np.arccos(np.clip(mu / (mu + r_i), -1.0, 1.0))
        if rad_sq < 0:
            margins.append(DiscMargin(channel=i, center=center, radius=float("nan"),
                                      gain_lo=float("nan"), gain_hi=float("nan"),
                                      phase_lo=-phase, phase_hi=phase, defined=False))
            continue
        radius = np.sqrt(rad_sq)
        margins.append(DiscMargin(
            channel=i, center=center, radius=radius,
            gain_lo=center - radius, gain_hi=center + radius,
            phase_lo=-phase, phase_hi=phase))
    return margins


def closed_loop_radius_with_gains(A, B, K, alphas):
    """Spectral radius of A - B diag(alphas) K (complex gains allowed)."""
    M = np.asarray(A, dtype=complex) - np.asarray(B) @ (np.diag(alphas) @ np.asarray(K))
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class BiboReport:
    """Spectral-radius flag plus an empirical bound of the driven response."""

    radius: float
    stable: bool
    max_norm: float
    final_norm: float

    def as_dict(self):
        return {"radius": self.radius, "stable": self.stable,
                "max_norm": self.max_norm, "final_norm": self.final_norm}


def bibo_check(A, B, K, u_lb, u_ub, n_steps=10_000, seed=0) -> BiboReport:
    """Drive the identified closed loop with bounded random input.

    Reports the closed-loop spectral radius (flagging >= 1) and the running
    maximum of the lifted-state norm as the empirical boundedness proxy.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    K = np.asarray(K, dtype=float)
    A_cl = A - B @ K
    radius = spectral_radius(A_cl)
    rng = np.random.default_rng(seed)
    u_lb = np.asarray(u_lb, dtype=float)
    u_ub = np.asarray(u_ub, dtype=float)
    z = np.zeros(A.shape[0])
    max_norm = 0.0
    if radius < 1.0:
        for _ in range(n_steps):
            w = rng.uniform(u_lb, u_ub)
            z = A_cl @ z + B @ w
            nz = np.linalg.norm(z)
            if nz > max_norm:
                max_norm = nz
            if not np.isfinite(nz):
                break
    return BiboReport(radius=radius, stable=bool(radius < 1.0),
                      max_norm=float(max_norm), final_norm=float(np.linalg.norm(z)))
