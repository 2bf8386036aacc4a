"""Scenario execution: simulator + identification + control + measurements.

The primary loop integrates the reduced microgrid at sub-millisecond steps;
every secondary tick the PMU model samples noisy phasors, the active
controller identifies/updates and issues a saturated reference shift, which
reaches the units through a per-message delayed queue. Trajectories go to a
CSV at the secondary rate and a JSON summary collects the run metrics.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dynamics import (DerMode, ResidualProcess, SimulationDivergence,
                       apply_setpoint_update, droop_derivatives, simulate_step)
from .identification import (IdentifiedModel, MeasurementWindow,
                             OnlineIdentifier, lift_observables,
                             predict_one_step, prediction_error)
from .lqr import LqrController, build_cost
from .network import NetworkState, compute_injections
from .scenario import (IrradianceDrop, Islanding, LoadStep, PiGains,
                       ScenarioSpec)
from .stability import bibo_check, compute_disc_margins

# Lag of the ambient reference-perturbation process (s); the per-tick targets
# follow the configured sigma, this only sets how fast they are tracked.
AMBIENT_LAG_S = 0.2

CSV_HEADER = ("t_s,bus,v_pu,f_hz,theta_rad,p_pu,q_pu,"
              "u_p_pu,u_q_pu,gamma_opt,pred_err")


@dataclass
class PiState:
    """Incremental-PI memory for one DER (previous errors)."""

    prev_v_err: float = 0.0
    prev_f_err: float = 0.0


def pi_step(gains: PiGains, v_err, f_err, dt, state: PiState,
            u_lb=-np.inf, u_ub=np.inf):
    """Decoupled PI reference shift for one DER.

    Incremental form: each call returns the additive update (dP*, dQ*) and the
    realized correction accumulates in the setpoints, so a constant error under
    pure integral gain ramps the accumulated correction at ki * err * t.
    Clamping the increment at the saturation bounds gives inherent anti-windup.
    """
    dp = -(gains.kp_f * (f_err - state.prev_f_err) + gains.ki_f * f_err * dt)
    dq = -(gains.kp_v * (v_err - state.prev_v_err) + gains.ki_v * v_err * dt)
    state.prev_f_err = f_err
    state.prev_v_err = v_err
    return (float(np.clip(dp, u_lb, u_ub)), float(np.clip(dq, u_lb, u_ub)))


@dataclass
class RunMetrics:
    """Headline numbers of one scenario run (times are absolute sim times)."""

    settling_time_v: float = math.inf
    settling_time_f: float = math.inf
    sse_v: float = 0.0
    sse_f: float = 0.0
    max_dev_v: float = 0.0
    max_dev_f: float = 0.0
    mean_pred_err_proposed: float = math.nan
    mean_pred_err_conventional: float = math.nan
    ident_ms_median: float = math.nan
    ident_ms_max: float = math.nan
    gamma_ms_median: float = math.nan
    gamma_ms_max: float = math.nan
    n_ticks: int = 0
    gain_fresh_ticks: int = 0
    gain_held_ticks: int = 0
    probe_ticks: int = 0
    gamma_min: float = math.nan
    gamma_max: float = math.nan
    controller: str = "none"
    seed: int = 0
    diverged: bool = False
    divergence_t: float | None = None
    margins: list | None = None
    bibo: dict | None = None

    def as_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


def compute_metrics(times, v, f_dev_hz, band_v, band_f_hz, t_ref=0.0):
    """Settling/steady-state/excursion numbers from a secondary-rate trajectory.

    Settling time is the first sample time after which every bus stays inside
    its band to the end of the record (inf sentinel when the last sample is
    still outside); SSE is the mean absolute deviation over the final 10%;
    max deviations are taken from t_ref onward.
    """
    times = np.asarray(times, dtype=float)
    v_dev = np.abs(np.asarray(v, dtype=float) - 1.0)
    f_dev = np.abs(np.asarray(f_dev_hz, dtype=float))

    def settle(dev, band):
        inside = np.all(dev <= band, axis=1)
        if not inside[-1]:
            return math.inf
        idx = len(inside) - 1
        while idx > 0 and inside[idx - 1]:
            idx -= 1
        return float(times[idx])

    tail = max(1, int(0.1 * len(times)))
    post = times >= t_ref
    return {
        "settling_time_v": settle(v_dev, band_v),
        "settling_time_f": settle(f_dev, band_f_hz),
        "sse_v": float(np.mean(v_dev[-tail:])),
        "sse_f": float(np.mean(f_dev[-tail:])),
        "max_dev_v": float(np.max(v_dev[post])) if np.any(post) else 0.0,
        "max_dev_f": float(np.max(f_dev[post])) if np.any(post) else 0.0,
    }


class _AmbientProcess:
    """Lagged per-unit wander of each DER's angle/voltage reference."""

    def __init__(self, n, sigma, rng):
        self.n = n
        self.sigma = sigma
        self.rng = rng
        self.offset = np.zeros((2, n))
        self.target = np.zeros((2, n))

    def resample(self):
        if self.sigma > 0:
            self.target = self.rng.normal(0.0, self.sigma, size=(2, self.n))

    def rates(self, dt):
        """Advance the lag filter; returns (dtheta/dt, dV/dt) contributions."""
        if self.sigma <= 0:
            return np.zeros(self.n), np.zeros(self.n)
        rate = (self.target - self.offset) / AMBIENT_LAG_S
        self.offset += rate * dt
        return rate[0], rate[1]


class ScenarioRunner:
    """Owns all mutable state of one scenario run."""

    def __init__(self, spec: ScenarioSpec, out_dir=None):
        self.spec = spec
        self.out_dir = out_dir
        n = spec.n
        self.net = spec.build_network()
        self.ders = spec.make_units()
        self.state = NetworkState(np.zeros(n), np.ones(n), 0.0)
        p0, q0 = compute_injections(self.net, self.state)
        for i, der in enumerate(self.ders):
            der.p_filt = p0[i]
            der.q_filt = q0[i]

        ss = np.random.SeedSequence(spec.seed)
        noise_s, delay_s, ambient_s, residual_s, probe_s = ss.spawn(5)
        self.noise_rng = np.random.default_rng(noise_s)
        self.delay_rng = np.random.default_rng(delay_s)
        self.probe_rng = np.random.default_rng(probe_s)
        self.ambient = _AmbientProcess(n, spec.measurement.ambient_sigma,
                                       np.random.default_rng(ambient_s))
        unc = spec.uncertainty
        unc.seed = int(np.random.default_rng(residual_s).integers(2**32))
        self.residual = ResidualProcess(unc, n)

        self.controllable = np.array([d.controllable for d in self.ders])
        self.u_mask = np.concatenate([self.controllable, self.controllable])
        bound = spec.lqr.u_bound
        self.u_lb = np.full(2 * n, -bound)
        self.u_ub = np.full(2 * n, bound)

        self.identifier = None
        self.shadow = None
        self.controller = None
        self.pi_states = None
        variant = {"proposed": "enhanced", "okid": "conventional",
                   "edmdc": "edmdc"}.get(spec.controller)
        if variant is not None:
            self.identifier = OnlineIdentifier(spec.okid, variant)
            cost = build_cost(n, spec.lqr.q_v, spec.lqr.q_sin, spec.lqr.q_cos,
                              spec.lqr.q_omega, spec.lqr.r_p, spec.lqr.r_q)
            self.cost = cost
            self.controller = LqrController(cost, self.u_lb, self.u_ub,
                                            tol=spec.lqr.dare_tol,
                                            max_iter=spec.lqr.dare_max_iter,
                                            warm_start=spec.lqr.warm_start)
            if variant == "enhanced":
                self.shadow = OnlineIdentifier(spec.okid, "conventional")
        elif spec.controller == "pi":
            self.pi_states = [PiState() for _ in range(n)]

        isl = spec.islanding_time()
        self.enable_t = (isl if isl is not None else 0.0) + spec.secondary_enable_lag

        # tick-aligned histories
        self.theta_meas = []
        self.v_meas = []
        self.omega_meas = []
        self.u_hist = []
        self.rows = []
        self.extra_loads = []
        self._queue = []
        self._queue_count = 0
        self.ident_ms = []
        self.gamma_ms = []
        self.gamma_hist = []
        self.probe_ticks = 0
        self.gain_fresh = 0
        self._pred = {}  # name -> (v_pred, valid)
        self.pred_errs = {"primary": [], "shadow": []}

    # ---------------------------------------------------------------- events
    def _apply_event(self, ev):
        if isinstance(ev, Islanding):
            self.net.grid_connected = False
        elif isinstance(ev, LoadStep):
            self.extra_loads.append((ev.bus, ev.dp, ev.dq, 1.0))
            self.net = self.spec.build_network(
                self.extra_loads, grid_connected=self.net.grid_connected)
        elif isinstance(ev, IrradianceDrop):
            idx = self.spec.der_buses.index(ev.bus)
            self.ders[idx].p_ref += ev.dp
        else:  # pragma: no cover - parser rejects unknown events
            raise ValueError(f"unhandled event {ev!r}")

    # ----------------------------------------------------------- measurement
    def _true_freq_dev(self):
        """Actual dtheta/dt [rad/s] per bus, including disturbance terms."""
        out = np.empty(self.spec.n)
        for i, der in enumerate(self.ders):
            dth, _ = droop_derivatives(der, der.p_filt, der.q_filt)
            out[i] = dth
        out += self._f_omega_cache
        if self.net.grid_connected:
            out[0] = 0.0
        return out

    def _measure(self, tick):
        n = self.spec.n
        sig = self.spec.measurement.noise_sigma
        noise = self.noise_rng.normal(0.0, sig, size=(2, n)) if sig > 0 else np.zeros((2, n))
        theta_m = self.state.theta + noise[0]
        v_m = self.state.v + noise[1]
        if tick == 0:
            omega_m = np.zeros(n)
        else:
            omega_m = (theta_m - self.theta_meas[-1]) / (
                self.spec.secondary_dt * self.spec.omega_nom)
        self.theta_meas.append(theta_m)
        self.v_meas.append(v_m)
        self.omega_meas.append(omega_m)

    def _window(self, tick):
        N = self.spec.okid.N
        if tick + 1 < N:
            return None
        sl = slice(tick + 1 - N, tick + 1)
        u = np.column_stack(self.u_hist[sl.start:tick] + [np.zeros(2 * self.spec.n)])
        return MeasurementWindow(
            theta=np.column_stack(self.theta_meas[sl]),
            v=np.column_stack(self.v_meas[sl]),
            omega=np.column_stack(self.omega_meas[sl]),
            u=u)

    # ---------------------------------------------------------------- control
    def _probe(self):
        u = self.probe_rng.uniform(-1.0, 1.0, 2 * self.spec.n) * 0.25 * self.spec.lqr.u_bound
        self.probe_ticks += 1
        return u * self.u_mask

    def _lqr_tick(self, tick, window):
        t0 = time.perf_counter()
        model = self.identifier.update(window)
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        if self.identifier.gamma_updated_last:
            self.gamma_ms.append(elapsed_ms)
        else:
            self.ident_ms.append(elapsed_ms)
        self.gamma_hist.append(self.identifier.gamma)
        if model is None:
            return self._probe(), None
        if self.controller.update_gain(model.A, model.B, self.identifier.step):
            self.gain_fresh += 1
        if self.controller.state is None:
            return self._probe(), model
        z = lift_observables(self.theta_meas[tick], self.v_meas[tick],
                             self.omega_meas[tick], window.theta_l)
        u = self.controller.command(z)
        return u * self.u_mask, model

    def _pi_tick(self, tick):
        n = self.spec.n
        u = np.zeros(2 * n)
        for i, der in enumerate(self.ders):
            if not der.controllable:
                continue
            v_err = self.v_meas[tick][i] - 1.0
            f_err = self.omega_meas[tick][i]
            dp, dq = pi_step(self.spec.pi, v_err, f_err, self.spec.secondary_dt,
                             self.pi_states[i], self.u_lb[i], self.u_ub[i])
            u[i] = dp
            u[n + i] = dq
        return u

    def _predict(self, name, identifier, window, u, tick):
        model = identifier.model
        if model is None:
            self._pred[name] = None
            return
        z = lift_observables(self.theta_meas[tick], self.v_meas[tick],
                             self.omega_meas[tick], window.theta_l)
        _, y_next = predict_one_step(model, z, u)
        self._pred[name] = y_next[self.spec.n:] + window.v_l

    def _score_prediction(self, name, key, tick):
        pred = self._pred.get(name)
        if pred is None:
            return math.nan
        err = prediction_error(self.v_meas[tick], pred)
        self.pred_errs[key].append((self.state.t, err))
        return err

    # ------------------------------------------------------------------- run
    def run(self) -> RunMetrics:
        spec = self.spec
        n = spec.n
        steps_per_tick = max(1, round(spec.secondary_dt / spec.primary_dt))
        dt = spec.secondary_dt / steps_per_tick
        n_ticks = math.floor(spec.t_end / spec.secondary_dt) + 1
        events = list(spec.events)
        ev_idx = 0
        diverged_at = None
        v_log = np.zeros((n_ticks, n))
        f_log = np.zeros((n_ticks, n))
        t_log = np.zeros(n_ticks)
        self._f_omega_cache = np.zeros(n)

        tick = 0
        try:
            while tick < n_ticks:
                t = tick * spec.secondary_dt
                self._measure(tick)

                pred_err = math.nan
                if self.identifier is not None:
                    pe = self._score_prediction("primary", "primary", tick)
                    if self.shadow is not None:
                        self._score_prediction("shadow", "shadow", tick)
                    pred_err = pe

                u = np.zeros(2 * n)
                window = None
                if t + 1e-12 >= self.enable_t and spec.controller != "none":
                    window = self._window(tick)
                if window is not None:
                    if self.identifier is not None:
                        u, _ = self._lqr_tick(tick, window)
                        self._predict("primary", self.identifier, window, u, tick)
                        if self.shadow is not None:
                            self.shadow.update(window)
                            self._predict("shadow", self.shadow, window, u, tick)
                    elif self.pi_states is not None:
                        u = self._pi_tick(tick)
                else:
                    self._pred["primary"] = None
                    self._pred["shadow"] = None
                self.u_hist.append(u)
                if np.any(u):
                    delay = max(0.0, self.delay_rng.normal(
                        spec.measurement.delay_mean, spec.measurement.delay_sigma))
                    heapq.heappush(self._queue, (t + delay, self._queue_count, u))
                    self._queue_count += 1

                f_dev = self._true_freq_dev()
                t_log[tick] = t
                v_log[tick] = self.state.v
                f_log[tick] = f_dev / spec.omega_nom * spec.f_nom
                gamma = self.identifier.gamma if self.identifier is not None else math.nan
                for b in range(n):
                    self.rows.append(
                        f"{t:.10g},{b},{self.state.v[b]:.10g},"
                        f"{spec.f_nom + f_dev[b] / (2 * math.pi):.10g},"
                        f"{self.state.theta[b]:.10g},{self.ders[b].p_filt:.10g},"
                        f"{self.ders[b].q_filt:.10g},{u[b]:.10g},{u[n + b]:.10g},"
                        f"{gamma:.10g},{pred_err:.10g}")

                if tick == n_ticks - 1:
                    break
                self.ambient.resample()
                for _ in range(steps_per_tick):
                    while ev_idx < len(events) and events[ev_idx].t <= self.state.t + 1e-12:
                        self._apply_event(events[ev_idx])
                        ev_idx += 1
                    while self._queue and self._queue[0][0] <= self.state.t + 1e-12:
                        _, _, du = heapq.heappop(self._queue)
                        for i, der in enumerate(self.ders):
                            if der.controllable:
                                apply_setpoint_update(der, du[i], du[n + i])
                    amb_th, amb_v = self.ambient.rates(dt)
                    res_om, res_v = self.residual.step(dt)
                    self._f_omega_cache = amb_th + res_om
                    f_v = amb_v + res_v
                    self.state = simulate_step(self.net, self.ders, self.state,
                                               np.zeros(2 * n), dt,
                                               f_omega=self._f_omega_cache,
                                               f_v=f_v)
                tick += 1
        except SimulationDivergence as exc:
            diverged_at = exc.t
            v_log = v_log[:tick]
            f_log = f_log[:tick]
            t_log = t_log[:tick]

        metrics = self._finalize(t_log, v_log, f_log, diverged_at)
        if self.out_dir is not None:
            self._write_outputs(metrics)
        if diverged_at is not None:
            raise SimulationDivergence("scenario diverged", diverged_at)
        return metrics

    def _finalize(self, t_log, v_log, f_log, diverged_at):
        spec = self.spec
        m = RunMetrics(controller=spec.controller, seed=spec.seed)
        m.n_ticks = len(t_log)
        m.diverged = diverged_at is not None
        m.divergence_t = diverged_at
        if len(t_log):
            t_ref = max((e.t for e in spec.events), default=0.0)
            vals = compute_metrics(t_log, v_log, f_log, spec.band_v,
                                   spec.band_f_hz, t_ref=t_ref)
            for k, v in vals.items():
                setattr(m, k, v)
        isl = spec.islanding_time() or 0.0
        for key, attr in (("primary", "mean_pred_err_proposed"
                           if spec.controller == "proposed" else None),
                          ("shadow", "mean_pred_err_conventional")):
            if attr is None:
                continue
            errs = [e for (t, e) in self.pred_errs[key] if t >= isl]
            if errs:
                setattr(m, attr, float(np.mean(errs)))
        if spec.controller in ("okid", "edmdc") and self.pred_errs["primary"]:
            errs = [e for (t, e) in self.pred_errs["primary"] if t >= isl]
            if errs:
                m.mean_pred_err_conventional = float(np.mean(errs))
        if self.ident_ms:
            m.ident_ms_median = float(np.median(self.ident_ms))
            m.ident_ms_max = float(np.max(self.ident_ms))
        if self.gamma_ms:
            m.gamma_ms_median = float(np.median(self.gamma_ms))
            m.gamma_ms_max = float(np.max(self.gamma_ms))
        if self.gamma_hist:
            m.gamma_min = float(np.min(self.gamma_hist))
            m.gamma_max = float(np.max(self.gamma_hist))
        if self.controller is not None:
            m.gain_fresh_ticks = self.gain_fresh
            m.gain_held_ticks = self.controller.solve_failures
        m.probe_ticks = self.probe_ticks
        if (self.controller is not None and self.controller.state is not None
                and self.identifier.model is not None):
            model = self.identifier.model
            st = self.controller.state
            m.margins = [d.as_dict() for d in compute_disc_margins(
                self.cost.Q, self.cost.R, st.K, model.B, st.S)]
            m.bibo = bibo_check(model.A, model.B, st.K, self.u_lb,
                                self.u_ub, n_steps=10_000).as_dict()
        return m

    def _write_outputs(self, metrics: RunMetrics):
        from pathlib import Path

        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trajectory.csv").write_text(
            CSV_HEADER + "\n" + "\n".join(self.rows) + "\n")
        (out / "summary.json").write_text(
            json.dumps(metrics.as_dict(), indent=2) + "\n")


def run_scenario(spec: ScenarioSpec, out_dir=None) -> RunMetrics:
    """Execute a validated scenario; writes trajectory.csv and summary.json."""
    return ScenarioRunner(spec, out_dir=out_dir).run()


def margins_report(spec: ScenarioSpec, snapshot_t=None):
    """Disc-margin report for the identified model at a mid-run snapshot."""
    import dataclasses

    isl = spec.islanding_time() or 0.0
    if snapshot_t is None:
        snapshot_t = min(spec.t_end, isl + spec.secondary_enable_lag + 0.7)
    spec = dataclasses.replace(spec, controller="proposed", t_end=snapshot_t,
                               events=[e for e in spec.events if e.t < snapshot_t])
    runner = ScenarioRunner(spec)
    runner.run()
    if runner.controller is None or runner.controller.state is None:
        raise RuntimeError("no converged controller at the snapshot")
    model = runner.identifier.model
    st = runner.controller.state
    margins = compute_disc_margins(runner.cost.Q, runner.cost.R, st.K,
                                   model.B, st.S)
    report = {
        "scenario": spec.name,
        "snapshot_t_s": snapshot_t,
        "gamma_opt": model.gamma_opt,
        "margins": [d.as_dict() for d in margins],
        "bibo": bibo_check(model.A, model.B, st.K, runner.u_lb,
                           runner.u_ub).as_dict(),
    }
    return report, runner, model
