"""Online lifted-linear identification from sliding synchrophasor windows.

Pipeline per secondary step: lift the raw window into the observable space,
estimate impulse-response (Markov) blocks through a block-Toeplitz
pseudo-inverse, assemble Hankel matrices, and realize (A, B) by SVD with a
tunable balancing exponent ``gamma``. The exponent is re-optimized
periodically against a Kronecker-structured consistency objective and relaxed
toward the optimum with a smoothing factor, as are the realized matrices.
A fixed gamma = 1/2 variant and a one-shot least-squares EDMDc fit are kept
as baselines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class IdentificationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass
class MeasurementWindow:
    """Sliding window of N time-ordered samples at the secondary rate.

    theta, v, omega are (n, N): phasor angle [rad], voltage magnitude [pu] and
    frequency deviation [pu]; u is (2n, N) with column k holding the reference
    shift applied over the interval starting at sample k. The anchor
    (theta_l, v_l) is the first sample of the window.
    """

    theta: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        n, N = self.theta.shape
        if self.v.shape != (n, N) or self.omega.shape != (n, N):
            raise ValueError("theta, v, omega must share shape (n, N)")
        if self.u.shape != (2 * n, N):
            raise ValueError(f"u must have shape ({2 * n}, {N})")

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def N(self) -> int:
        return self.theta.shape[1]

    @property
    def theta_l(self) -> np.ndarray:
        return self.theta[:, 0]

    @property
    def v_l(self) -> np.ndarray:
        return self.v[:, 0]


@dataclass
class LiftedData:
    """Observable matrix Z (4n, N) and output matrix Y (2n, N) of a window."""

    Z: np.ndarray
    Y: np.ndarray


@dataclass
class IdentifiedModel:
    """Lifted linear triple with the realization exponent that produced it.

    C is the least-squares output map fitted on the lifted data (used for
    output prediction); c_real is the observation block of the realization
    itself, which composes with (A, B) to reproduce the estimated Markov
    blocks.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    gamma_opt: float
    rank_r: int
    c_real: np.ndarray | None = None

    def __post_init__(self):
        if not (0.0 <= self.gamma_opt <= 1.0):
            raise ValueError("gamma_opt must lie in [0, 1]")
        for name in ("A", "B", "C"):
            m = getattr(self, name)
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")


@dataclass
class OkidConfig:
    """Tuning knobs of the online identification.

    eta weighs the newest estimate against the running one; t_opt_steps gates
    how often (in secondary steps) the realization exponent is re-optimized.
    hankel_layout selects the triangular block-Toeplitz assembly ("paper") or
    the classical block-Hankel grid ("classical").
    """

    N: int = 9
    eta: float = 1.0 / 9.0
    t_opt_steps: int = 20
    gamma0: float = 0.5
    rank_r: int | None = None
    ridge: float = 1e-8
    hankel_layout: str = "paper"

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("eta must be in (0, 1]")
        if self.t_opt_steps < 1:
            raise ValueError("t_opt_steps must be >= 1")
        if self.rank_r is not None and self.rank_r < 1:
            raise ValueError("rank_r must be >= 1")
        if self.hankel_layout not in ("paper", "classical"):
            raise ValueError("hankel_layout must be 'paper' or 'classical'")


# ---------------------------------------------------------------------------
# Observable lifting
# ---------------------------------------------------------------------------

def lift_observables(theta, v, omega, theta_anchor, v_nom=1.0, omega_nom=0.0):
    """Lift one sample into the 4n observable vector.

    z = [v - v_nom; sin(theta) - sin(anchor); cos(theta) - cos(anchor);
         omega - omega_nom]
    """
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([
        np.asarray(v, dtype=float) - v_nom,
        np.sin(theta) - np.sin(theta_anchor),
        np.cos(theta) - np.cos(theta_anchor),
        np.asarray(omega, dtype=float) - omega_nom,
    ])


def lift_window(window: MeasurementWindow, v_nom=1.0, omega_nom=0.0) -> LiftedData:
    """Lifted observables and anchored outputs for every window column."""
    anchor = window.theta_l
    Z = np.column_stack([
        lift_observables(window.theta[:, k], window.v[:, k], window.omega[:, k],
                         anchor, v_nom, omega_nom)
        for k in range(window.N)
    ])
    Y = np.vstack([
        window.theta - window.theta_l[:, None],
        window.v - window.v_l[:, None],
    ])
    return LiftedData(Z=Z, Y=Y)


# ---------------------------------------------------------------------------
# Markov parameters and Hankel realization
# ---------------------------------------------------------------------------

def estimate_markov(Y, U, ridge=1e-8, n_blocks=None):
    """Least-squares impulse-response blocks from input/output records.

    Solves Y = [h_1 ... h_L] T(U) where T(U) is the block upper-triangular
    Toeplitz of the inputs (block row m of T carries U shifted right by m
    columns), via an SVD pseudo-inverse that discards singular values below
    ridge * sigma_max.

    Args:
        Y: (p, L) outputs; column j responds to input column j through h_1.
        U: (m, L) inputs.
        ridge: relative pseudo-inverse cutoff.
        n_blocks: number of Markov blocks L' to estimate (default: L).

    Returns:
        list of n_blocks (p, m) arrays [h_1, ..., h_L'].
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    p, L = Y.shape
    m, Lu = U.shape
    if L != Lu:
        raise ValueError("Y and U must have the same number of columns")
    if not np.any(U):
        raise IdentificationError("unexcited system: input record is all zero")
    if n_blocks is None:
        n_blocks = L
    T = np.zeros((n_blocks * m, L))
    for blk in range(n_blocks):
        width = L - blk
        if width <= 0:
            break
        T[blk * m:(blk + 1) * m, blk:] = U[:, :width]
    h_flat = Y @ np.linalg.pinv(T, rcond=ridge)
    return [h_flat[:, blk * m:(blk + 1) * m] for blk in range(n_blocks)]


def build_hankels(h, layout="paper"):
    """Assemble the Hankel matrix and its one-step shift from Markov blocks.

    "paper" places h_1..h_{L-1} in a block upper-triangular Toeplitz pattern
    (h_1 on the diagonal, zeros below); the shifted matrix starts at h_2.
    "classical" builds the square block-Hankel grid H[i, j] = h_{i+j+1} of
    size L//2, for which the SVD realization reproduces the blocks exactly.
    """
    L = len(h)
    if L < 2:
        raise ValueError("need at least two Markov blocks (h up to h_{N+1})")
    p, m = h[0].shape
    if layout == "paper":
        nb = L - 1
        H = np.zeros((nb * p, nb * m))
        Hp = np.zeros((nb * p, nb * m))
        for i in range(nb):
            for j in range(i, nb):
                H[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[j - i]
                Hp[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[j - i + 1]
    elif layout == "classical":
        nb = L // 2
        H = np.zeros((nb * p, nb * m))
        Hp = np.zeros((nb * p, nb * m))
        for i in range(nb):
            for j in range(nb):
                H[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[i + j]
                Hp[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[i + j + 1]
    else:
        raise ValueError("layout must be 'paper' or 'classical'")
    return H, Hp


def truncated_svd(H, rank_r):
    """Best rank-r factors of H; effective rank shrinks past tiny singulars.

    Returns (U_t, s_t, V_t) with H ~= U_t @ diag(s_t) @ V_t.T and s_t holding
    only strictly positive singular values in descending order.
    """
    if rank_r < 1:
        raise ValueError("rank_r must be >= 1")
    U, s, Vh = np.linalg.svd(H, full_matrices=False)
    rank_r = min(rank_r, s.size)
    cutoff = 1e-8 * s[0] if s[0] > 0 else 0.0
    r_eff = int(np.sum(s[:rank_r] > cutoff))
    if r_eff < rank_r:
        warnings.warn(
            f"Hankel numerical rank {r_eff} below requested {rank_r}; truncating",
            RuntimeWarning, stacklevel=2)
    if r_eff == 0:
        raise IdentificationError("Hankel matrix is numerically zero")
    return U[:, :r_eff], s[:r_eff], Vh[:r_eff].T


def estimate_C(Y, Z, ridge=1e-8):
    """Least-squares output map C = Y Z^+ on the lifted data."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return Y @ np.linalg.pinv(Z, rcond=ridge)


def _b_candidate(s, V_t, gamma, n_state, n_in):
    """Input-matrix candidate [diag(s)^(1-gamma) V^T] cut to (n_state, n_in)."""
    M = (s ** (1.0 - gamma))[:, None] * V_t.T
    return M[:min(n_state, M.shape[0]), :n_in]


def _gamma_objective(gamma, s, U_t, V_t, C, n_out, n_state, n_in, ridge):
    """Frobenius mismatch of the two Kronecker-factored expressions of the
    controllability/observability chain, with C fixed and B gamma-dependent."""
    r = s.size
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        s_pow = s ** (2.0 * gamma - 1.0)
        if not np.all(np.isfinite(s_pow)):
            return np.inf
        # Left factor: diag(s)^(2g-1) U^T (I (x) C^+)^T, applied blockwise.
        C_pinv_T = np.linalg.pinv(C, rcond=ridge).T  # (n_out, n_state)
        n_rows_blocks = U_t.shape[0] // n_out
        left = np.empty((r, n_state * n_rows_blocks))
        Ut_T = s_pow[:, None] * U_t.T
        for b in range(n_rows_blocks):
            left[:, b * n_state:(b + 1) * n_state] = (
                Ut_T[:, b * n_out:(b + 1) * n_out] @ C_pinv_T)
        # Right factor: V^T (I (x) B(gamma)^+), applied blockwise. When the
        # effective rank is below n_state the candidate is padded with zero
        # rows, matching the padded realization.
        Bg = _b_candidate(s, V_t, gamma, n_state, n_in)
        if Bg.shape[0] < n_state:
            Bg = np.vstack([Bg, np.zeros((n_state - Bg.shape[0], n_in))])
        B_pinv = np.linalg.pinv(Bg, rcond=ridge)  # (n_in, n_state)
        n_col_blocks = V_t.shape[0] // n_in
        right = np.empty((r, n_state * n_col_blocks))
        Vt_T = V_t.T
        for b in range(n_col_blocks):
            right[:, b * n_state:(b + 1) * n_state] = (
                Vt_T[:, b * n_in:(b + 1) * n_in] @ B_pinv)
        if left.shape != right.shape:
            raise IdentificationError(
                "Hankel grid is not square; gamma objective undefined")
        val = np.linalg.norm(left - right, "fro")
    return val if np.isfinite(val) else np.inf


_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, lo, hi, tol=1e-6, max_iter=200):
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def optimize_gamma(s, U_t, V_t, C, n_out, n_state, n_in, prev_gamma,
                   ridge=1e-8, grid_points=101):
    """Minimize the realization-consistency objective over gamma in [0, 1].

    A coarse grid scan brackets the minimum and golden-section search refines
    it. A flat objective (spread below 1e-12) ties back to 0.5; any non-finite
    evaluation on the grid falls back to ``prev_gamma`` with a warning.
    """
    def f(g):
        return _gamma_objective(g, s, U_t, V_t, C, n_out, n_state, n_in, ridge)

    grid = np.linspace(0.0, 1.0, grid_points)
    vals = np.array([f(g) for g in grid])
    if not np.all(np.isfinite(vals)):
        warnings.warn("non-finite gamma objective; keeping previous gamma",
                      RuntimeWarning, stacklevel=2)
        return float(prev_gamma)
    if vals.max() - vals.min() <= 1e-12:
        return 0.5
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid_points - 1)]
    gamma = _golden_section(f, lo, hi)
    return float(np.clip(gamma, 0.0, 1.0))


def update_gamma(prev, gamma_minus, eta, k, t_opt_steps):
    """Gated smoothed exponent update: only at multiples of the update period.

    gamma_k = eta * gamma_minus + (1 - eta) * gamma_prev
    """
    if k > 0 and t_opt_steps > 0 and k % t_opt_steps == 0:
        return float(np.clip(eta * gamma_minus + (1.0 - eta) * prev, 0.0, 1.0))
    return float(prev)


def realize_AB(s, U_t, V_t, Hp, gamma, eta, prev_A, prev_B, n_state, n_in):
    """SVD realization of (A, B) at exponent gamma, smoothed against previous.

    A_new = diag(s)^(-g) U^T H' V diag(s)^(g-1)
    B_new = [diag(s)^(1-g) V^T] truncated to (n_state, n_in)

    Returns eta-blended matrices when previous estimates exist. Raises on a
    zero singular value, whose negative power would be undefined.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise IdentificationError("zero singular value: gamma power undefined")
    r = s.size
    A_new = ((s ** -gamma)[:, None] * U_t.T) @ Hp @ (V_t * (s ** (gamma - 1.0))[None, :])
    B_new = _b_candidate(s, V_t, gamma, n_state, n_in)
    if r < n_state:
        A_pad = np.zeros((n_state, n_state))
        A_pad[:r, :r] = A_new
        B_pad = np.zeros((n_state, n_in))
        B_pad[:B_new.shape[0], :] = B_new
        A_new, B_new = A_pad, B_pad
    else:
        A_new = A_new[:n_state, :n_state] if r > n_state else A_new
        B_new = B_new
    if prev_A is not None and prev_B is not None:
        A_out = eta * A_new + (1.0 - eta) * prev_A
        B_out = eta * B_new + (1.0 - eta) * prev_B
    else:
        A_out, B_out = A_new, B_new
    return A_out, B_out


def realization_C(s, U_t, gamma, n_out, n_state):
    """Observation block of the realization: first n_out rows of U diag(s)^g."""
    C = (U_t * (s ** gamma)[None, :])[:n_out, :]
    if C.shape[1] < n_state:
        C = np.hstack([C, np.zeros((n_out, n_state - C.shape[1]))])
    return C[:, :n_state]


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def _shifted_inputs(U):
    """Inputs re-aligned so column j holds the input that produced sample j.

    The window stores u applied over the interval *starting* at each sample;
    the anchored zero-initial-condition relation needs the previous interval's
    input per output column, with the pre-window input taken as zero.
    """
    out = np.zeros_like(U)
    out[:, 1:] = U[:, :-1]
    return out


def _hankel_block_count(N, layout):
    # Markov blocks required so both H and its shift fill their grid.
    if layout == "paper":
        return N + 1
    return 2 * ((N + 1) // 2)


def okid_identify(window: MeasurementWindow, config: OkidConfig,
                  gamma: float, prev_A=None, prev_B=None) -> IdentifiedModel:
    """One OKID/ERA pass over a window at a fixed exponent ``gamma``.

    Shared by the adaptive and the fixed-gamma pipelines; gamma scheduling and
    its optimization live in OnlineIdentifier.
    """
    data = lift_window(window)
    n = window.n
    n_out, n_in, n_state = 2 * n, 2 * n, 4 * n
    h = estimate_markov(data.Y, _shifted_inputs(window.u), config.ridge,
                        n_blocks=_hankel_block_count(window.N, config.hankel_layout))
    H, Hp = build_hankels(h, config.hankel_layout)
    rank = config.rank_r if config.rank_r is not None else n_state
    U_t, s, V_t = truncated_svd(H, rank)
    C_ls = estimate_C(data.Y, data.Z, config.ridge)
    A, B = realize_AB(s, U_t, V_t, Hp, gamma, config.eta, prev_A, prev_B,
                      n_state, n_in)
    c_real = realization_C(s, U_t, gamma, n_out, n_state)
    return IdentifiedModel(A=A, B=B, C=C_ls, gamma_opt=gamma,
                           rank_r=s.size, c_real=c_real)


def conventional_okid(window: MeasurementWindow, config: OkidConfig,
                      prev_A=None, prev_B=None) -> IdentifiedModel:
    """Baseline OKID with the exponent pinned to the balanced value 1/2."""
    return okid_identify(window, config, gamma=0.5, prev_A=prev_A, prev_B=prev_B)


def edmdc_baseline(window: MeasurementWindow, ridge=1e-8) -> IdentifiedModel:
    """One-shot least-squares fit [A B] = Z_2:N [Z_1:N-1; U_1:N-1]^+."""
    data = lift_window(window)
    Z1 = data.Z[:, :-1]
    Z2 = data.Z[:, 1:]
    U1 = window.u[:, :-1]
    G = Z2 @ np.linalg.pinv(np.vstack([Z1, U1]), rcond=ridge)
    n_state = data.Z.shape[0]
    A = G[:, :n_state]
    B = G[:, n_state:]
    C = estimate_C(data.Y, data.Z, ridge)
    return IdentifiedModel(A=A, B=B, C=C, gamma_opt=0.5, rank_r=n_state,
                           c_real=None)


def predict_one_step(model: IdentifiedModel, z, u):
    """Propagate the lifted state one step and map it to the outputs."""
    z_next = model.A @ np.asarray(z, dtype=float) + model.B @ np.asarray(u, dtype=float)
    return z_next, model.C @ z_next


def prediction_error(v_true, v_pred):
    """Mean-scaled voltage prediction error ||dV_true - dV_pred||_2 / n."""
    v_true = np.asarray(v_true, dtype=float)
    v_pred = np.asarray(v_pred, dtype=float)
    return float(np.linalg.norm(v_true - v_pred) / v_true.size)


class OnlineIdentifier:
    """Stateful sliding-window identifier shared by all controller variants.

    variant: "enhanced" re-optimizes the realization exponent every
    t_opt_steps; "conventional" keeps gamma = 1/2; "edmdc" refits the
    least-squares model each step. The enhanced/conventional matrices are
    eta-smoothed across steps.
    """

    def __init__(self, config: OkidConfig, variant="enhanced"):
        if variant not in ("enhanced", "conventional", "edmdc"):
            raise ValueError(f"unknown variant {variant!r}")
        self.config = config
        self.variant = variant
        self.gamma = config.gamma0
        self.step = 0
        self.model: IdentifiedModel | None = None
        self.gamma_updated_last = False

    def update(self, window: MeasurementWindow) -> IdentifiedModel | None:
        """Identify from the window; returns None while inputs are unexcited."""
        self.step += 1
        self.gamma_updated_last = False
        try:
            if self.variant == "edmdc":
                self.model = edmdc_baseline(window, self.config.ridge)
                return self.model
            prev_A = self.model.A if self.model is not None else None
            prev_B = self.model.B if self.model is not None else None
            if self.variant == "enhanced" and self.step % self.config.t_opt_steps == 0:
                gamma_minus = self._optimize(window)
                self.gamma = update_gamma(self.gamma, gamma_minus, self.config.eta,
                                          self.step, self.config.t_opt_steps)
                self.gamma_updated_last = True
            gamma = self.gamma if self.variant == "enhanced" else 0.5
            self.model = okid_identify(window, self.config, gamma, prev_A, prev_B)
            return self.model
        except IdentificationError:
            return None

    def _optimize(self, window):
        data = lift_window(window)
        n = window.n
        h = estimate_markov(data.Y, _shifted_inputs(window.u), self.config.ridge,
                            n_blocks=_hankel_block_count(window.N,
                                                         self.config.hankel_layout))
        H, _ = build_hankels(h, self.config.hankel_layout)
        rank = self.config.rank_r if self.config.rank_r is not None else 4 * n
        U_t, s, V_t = truncated_svd(H, rank)
        C_ls = estimate_C(data.Y, data.Z, self.config.ridge)
        return optimize_gamma(s, U_t, V_t, C_ls, 2 * n, 4 * n, 2 * n,
                              self.gamma, self.config.ridge)
