"""Scenario configuration: JSON parsing, validation, per-unit normalization.

Config keys carry their units explicitly (``sigma_omega_rad_per_ws``,
``p_kw``); everything is normalized onto the system base before any
computation. Unknown keys are rejected with the offending field path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dynamics import DerMode, DerUnit, UncertaintyConfig
from .identification import OkidConfig
from .network import NetworkModel, build_network


class ScenarioError(ValueError):
    """Configuration parse/validation failure, with a field path."""


def _require(d, key, path, kind=None):
    if key not in d:
        raise ScenarioError(f"{path}.{key}: missing required key")
    val = d[key]
    if kind is not None and not isinstance(val, kind):
        raise ScenarioError(f"{path}.{key}: expected {kind}, got {type(val).__name__}")
    return val


def _number(d, key, path, default=None, minimum=None):
    if key not in d:
        if default is None:
            raise ScenarioError(f"{path}.{key}: missing required key")
        return default
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioError(f"{path}.{key}: expected a number")
    if minimum is not None and val < minimum:
        raise ScenarioError(f"{path}.{key}: must be >= {minimum}")
    return float(val)


def _check_keys(d, allowed, path):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ScenarioError(f"{path}: unknown keys {sorted(unknown)}")


@dataclass
class Event:
    t: float


@dataclass
class Islanding(Event):
    pass


@dataclass
class LoadStep(Event):
    bus: int = 0
    dp: float = 0.0
    dq: float = 0.0


@dataclass
class IrradianceDrop(Event):
    bus: int = 0
    dp: float = 0.0


@dataclass
class MeasurementModel:
    """PMU noise, control-path delay and ambient reference perturbation."""

    noise_sigma: float = 0.0056
    delay_mean: float = 0.05
    delay_sigma: float = 0.002
    ambient_sigma: float = 0.01

    def __post_init__(self):
        for name in ("noise_sigma", "delay_mean", "delay_sigma", "ambient_sigma"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"measurement.{name} must be >= 0")


@dataclass
class PiGains:
    """Decoupled PI gains applied per controllable DER (per-unit errors)."""

    kp_v: float = 0.0
    ki_v: float = 0.0
    kp_f: float = 0.0
    ki_f: float = 0.0

    def __post_init__(self):
        for name in ("kp_v", "ki_v", "kp_f", "ki_f"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"pi.{name} must be >= 0")


@dataclass
class LqrSettings:
    q_v: float = 1e3
    q_sin: float = 0.0
    q_cos: float = 0.0
    q_omega: float = 1e-6
    r_p: float = 1e-6
    r_q: float = 1e-6
    u_bound: float = 1.0 / 30.0
    warm_start: bool = True
    dare_tol: float = 1e-9
    dare_max_iter: int = 10_000


@dataclass
class DerDef:
    bus: int
    mode: DerMode
    sigma_omega: float
    sigma_v: float
    tau_v: float
    tf: float
    p_ref: float
    q_ref: float

    def make_unit(self) -> DerUnit:
        return DerUnit(mode=self.mode, sigma_omega=self.sigma_omega,
                       sigma_v=self.sigma_v, tau_v=self.tau_v, tf=self.tf,
                       p_ref=self.p_ref, q_ref=self.q_ref)


@dataclass
class ScenarioSpec:
    """Fully validated, per-unit scenario ready to run."""

    name: str
    s_base_va: float
    v_base_v: float
    f_nom: float
    lines: list
    loads: list
    der_defs: list
    der_buses: list
    grid_connected_start: bool
    events: list
    t_end: float
    controller: str
    secondary_enable_lag: float
    seed: int
    primary_dt: float
    secondary_dt: float
    measurement: MeasurementModel
    okid: OkidConfig
    lqr: LqrSettings
    pi: PiGains
    uncertainty: UncertaintyConfig
    band_v: float
    band_f_hz: float

    @property
    def n(self) -> int:
        return len(self.der_defs)

    @property
    def omega_nom(self) -> float:
        return 2.0 * math.pi * self.f_nom

    def build_network(self, extra_loads=(), grid_connected=None) -> NetworkModel:
        """Reduce the configured topology, optionally with event-added loads."""
        if grid_connected is None:
            grid_connected = self.grid_connected_start
        return build_network(self.lines, list(self.loads) + list(extra_loads),
                             self.der_buses, grid_connected=grid_connected)

    def make_units(self):
        return [d.make_unit() for d in self.der_defs]

    def islanding_time(self):
        for ev in self.events:
            if isinstance(ev, Islanding):
                return ev.t
        return None


_MODES = {
    "grid_forming": DerMode.GRID_FORMING,
    "grid_following": DerMode.GRID_FOLLOWING,
    "non_controllable": DerMode.NON_CONTROLLABLE,
}

_CONTROLLERS = ("proposed", "okid", "edmdc", "pi", "none")


def _parse_events(raw, s_base_va, path):
    events = []
    for i, ev in enumerate(raw):
        p = f"{path}[{i}]"
        kind = _require(ev, "type", p, str)
        t = _number(ev, "t_s", p, minimum=0.0)
        if kind == "islanding":
            _check_keys(ev, {"type", "t_s"}, p)
            events.append(Islanding(t=t))
        elif kind == "load_step":
            _check_keys(ev, {"type", "t_s", "bus", "dp_kw", "dq_kvar"}, p)
            events.append(LoadStep(
                t=t, bus=int(_require(ev, "bus", p, int)),
                dp=_number(ev, "dp_kw", p, default=0.0) * 1e3 / s_base_va,
                dq=_number(ev, "dq_kvar", p, default=0.0) * 1e3 / s_base_va))
        elif kind == "irradiance_drop":
            _check_keys(ev, {"type", "t_s", "bus", "dp_kw"}, p)
            events.append(IrradianceDrop(
                t=t, bus=int(_require(ev, "bus", p, int)),
                dp=_number(ev, "dp_kw", p) * 1e3 / s_base_va))
        else:
            raise ScenarioError(f"{p}.type: unknown event type {kind!r}")
    times = [e.t for e in events]
    if times != sorted(times):
        raise ScenarioError(f"{path}: events must be time-sorted")
    return events


def parse_scenario(raw: dict, overrides=None) -> ScenarioSpec:
    """Validate a raw config dict and normalize it to per-unit."""
    overrides = overrides or {}
    top_keys = {"name", "base", "network", "ders", "grid_connected_start",
                "events", "t_end_s", "controller", "secondary_enable_lag_s",
                "seed", "timing", "measurement", "identification", "lqr",
                "pi", "uncertainty", "metrics"}
    _check_keys(raw, top_keys, "scenario")

    base = _require(raw, "base", "scenario", dict)
    _check_keys(base, {"s_base_kva", "v_base_v", "f_nom_hz"}, "base")
    s_base_va = _number(base, "s_base_kva", "base", minimum=1e-9) * 1e3
    v_base = _number(base, "v_base_v", "base", minimum=1e-9)
    f_nom = _number(base, "f_nom_hz", "base", default=60.0, minimum=1.0)
    z_base = v_base**2 / s_base_va
    omega_el = 2.0 * math.pi * f_nom

    netw = _require(raw, "network", "scenario", dict)
    _check_keys(netw, {"lines", "loads"}, "network")
    lines = []
    for i, ln in enumerate(_require(netw, "lines", "network", list)):
        p = f"network.lines[{i}]"
        _check_keys(ln, {"from", "to", "r_ohm", "x_ohm", "l_mh"}, p)
        r = _number(ln, "r_ohm", p, minimum=0.0)
        if "x_ohm" in ln:
            x = _number(ln, "x_ohm", p)
        elif "l_mh" in ln:
            x = omega_el * _number(ln, "l_mh", p, minimum=0.0) * 1e-3
        else:
            raise ScenarioError(f"{p}: needs x_ohm or l_mh")
        lines.append((int(_require(ln, "from", p, int)),
                      int(_require(ln, "to", p, int)),
                      r / z_base, x / z_base))
    loads = []
    for i, ld in enumerate(netw.get("loads", [])):
        p = f"network.loads[{i}]"
        _check_keys(ld, {"bus", "p_kw", "q_kvar", "v_nom_pu"}, p)
        loads.append((int(_require(ld, "bus", p, int)),
                      _number(ld, "p_kw", p, default=0.0) * 1e3 / s_base_va,
                      _number(ld, "q_kvar", p, default=0.0) * 1e3 / s_base_va,
                      _number(ld, "v_nom_pu", p, default=1.0, minimum=1e-6)))

    der_defs = []
    der_buses = []
    for i, dd in enumerate(_require(raw, "ders", "scenario", list)):
        p = f"ders[{i}]"
        _check_keys(dd, {"bus", "mode", "sigma_omega_rad_per_ws",
                         "sigma_v_v_per_var", "tau_v_s", "tf_s",
                         "p_ref_kw", "q_ref_kvar"}, p)
        mode_name = _require(dd, "mode", p, str)
        if mode_name not in _MODES:
            raise ScenarioError(f"{p}.mode: unknown mode {mode_name!r}")
        der_defs.append(DerDef(
            bus=int(_require(dd, "bus", p, int)),
            mode=_MODES[mode_name],
            sigma_omega=_number(dd, "sigma_omega_rad_per_ws", p, minimum=1e-30) * s_base_va,
            sigma_v=_number(dd, "sigma_v_v_per_var", p, minimum=1e-30) * s_base_va / v_base,
            tau_v=_number(dd, "tau_v_s", p, minimum=1e-9),
            tf=_number(dd, "tf_s", p, minimum=1e-9),
            p_ref=_number(dd, "p_ref_kw", p, default=0.0) * 1e3 / s_base_va,
            q_ref=_number(dd, "q_ref_kvar", p, default=0.0) * 1e3 / s_base_va,
        ))
        der_buses.append(der_defs[-1].bus)
    if not der_defs:
        raise ScenarioError("ders: at least one DER required")
    if len(set(der_buses)) != len(der_buses):
        raise ScenarioError("ders: duplicate DER buses")

    events = _parse_events(raw.get("events", []), s_base_va, "events")
    t_end = float(overrides.get("t_end", _number(raw, "t_end_s", "scenario", minimum=1e-9)))
    if events and t_end <= max(e.t for e in events):
        raise ScenarioError("t_end_s must exceed the last event time")

    controller = overrides.get("controller",
                               raw.get("controller", "proposed"))
    if controller not in _CONTROLLERS:
        raise ScenarioError(f"controller: must be one of {_CONTROLLERS}")

    timing = raw.get("timing", {})
    _check_keys(timing, {"primary_dt_s", "secondary_dt_s"}, "timing")
    primary_dt = _number(timing, "primary_dt_s", "timing", default=1e-4, minimum=1e-7)
    secondary_dt = _number(timing, "secondary_dt_s", "timing", default=0.03, minimum=1e-4)
    if primary_dt > 1e-3:
        raise ScenarioError("timing.primary_dt_s must be <= 1 ms")

    meas_raw = raw.get("measurement", {})
    _check_keys(meas_raw, {"noise_sigma_pu", "delay_mean_s", "delay_sigma_s",
                           "ambient_sigma_pu"}, "measurement")
    measurement = MeasurementModel(
        noise_sigma=_number(meas_raw, "noise_sigma_pu", "measurement", default=0.0056),
        delay_mean=_number(meas_raw, "delay_mean_s", "measurement", default=0.05),
        delay_sigma=_number(meas_raw, "delay_sigma_s", "measurement", default=0.002),
        ambient_sigma=_number(meas_raw, "ambient_sigma_pu", "measurement", default=0.01))

    ident_raw = raw.get("identification", {})
    _check_keys(ident_raw, {"window_n", "eta", "t_opt_s", "gamma0", "rank_r",
                            "ridge", "hankel_layout"}, "identification")
    window_n = int(_number(ident_raw, "window_n", "identification", default=9, minimum=2))
    t_opt_s = _number(ident_raw, "t_opt_s", "identification", default=0.6, minimum=secondary_dt)
    okid = OkidConfig(
        N=window_n,
        eta=_number(ident_raw, "eta", "identification", default=1.0 / window_n),
        t_opt_steps=max(1, round(t_opt_s / secondary_dt)),
        gamma0=_number(ident_raw, "gamma0", "identification", default=0.5),
        rank_r=int(ident_raw["rank_r"]) if "rank_r" in ident_raw else None,
        ridge=_number(ident_raw, "ridge", "identification", default=1e-8),
        hankel_layout=ident_raw.get("hankel_layout", "paper"))

    lqr_raw = raw.get("lqr", {})
    _check_keys(lqr_raw, {"q_v", "q_sin", "q_cos", "q_omega", "r_p", "r_q",
                          "u_bound_kva", "warm_start", "dare_tol",
                          "dare_max_iter"}, "lqr")
    lqr = LqrSettings(
        q_v=_number(lqr_raw, "q_v", "lqr", default=1e3),
        q_sin=_number(lqr_raw, "q_sin", "lqr", default=0.0),
        q_cos=_number(lqr_raw, "q_cos", "lqr", default=0.0),
        q_omega=_number(lqr_raw, "q_omega", "lqr", default=1e-6),
        r_p=_number(lqr_raw, "r_p", "lqr", default=1e-6, minimum=1e-30),
        r_q=_number(lqr_raw, "r_q", "lqr", default=1e-6, minimum=1e-30),
        u_bound=_number(lqr_raw, "u_bound_kva", "lqr", default=1.0, minimum=1e-12)
        * 1e3 / s_base_va,
        warm_start=bool(lqr_raw.get("warm_start", True)),
        dare_tol=_number(lqr_raw, "dare_tol", "lqr", default=1e-9, minimum=1e-15),
        dare_max_iter=int(_number(lqr_raw, "dare_max_iter", "lqr", default=10_000,
                                  minimum=1)))

    pi_raw = raw.get("pi", {})
    _check_keys(pi_raw, {"kp_v", "ki_v", "kp_f", "ki_f"}, "pi")
    pi = PiGains(kp_v=_number(pi_raw, "kp_v", "pi", default=0.0),
                 ki_v=_number(pi_raw, "ki_v", "pi", default=0.0),
                 kp_f=_number(pi_raw, "kp_f", "pi", default=0.0),
                 ki_f=_number(pi_raw, "ki_f", "pi", default=0.0))

    unc_raw = raw.get("uncertainty", {})
    _check_keys(unc_raw, {"enabled", "amp_omega_pu", "amp_v_pu", "lag_s"},
                "uncertainty")
    uncertainty = UncertaintyConfig(
        enabled=bool(unc_raw.get("enabled", False)),
        amp_omega=_number(unc_raw, "amp_omega_pu", "uncertainty", default=0.0),
        amp_v=_number(unc_raw, "amp_v_pu", "uncertainty", default=0.0),
        lag=_number(unc_raw, "lag_s", "uncertainty", default=0.1, minimum=1e-6),
        seed=0)

    metr = raw.get("metrics", {})
    _check_keys(metr, {"band_v_pu", "band_f_hz"}, "metrics")

    spec = ScenarioSpec(
        name=str(raw.get("name", "scenario")),
        s_base_va=s_base_va,
        v_base_v=v_base,
        f_nom=f_nom,
        lines=lines,
        loads=loads,
        der_defs=der_defs,
        der_buses=der_buses,
        grid_connected_start=bool(raw.get("grid_connected_start", True)),
        events=events,
        t_end=t_end,
        controller=controller,
        secondary_enable_lag=_number(raw, "secondary_enable_lag_s", "scenario",
                                     default=0.1, minimum=0.0),
        seed=int(overrides.get("seed", raw.get("seed", 0))),
        primary_dt=primary_dt,
        secondary_dt=secondary_dt,
        measurement=measurement,
        okid=okid,
        lqr=lqr,
        pi=pi,
        uncertainty=uncertainty,
        band_v=_number(metr, "band_v_pu", "metrics", default=0.01, minimum=1e-9),
        band_f_hz=_number(metr, "band_f_hz", "metrics", default=0.05, minimum=1e-9),
    )
    # Fail early if the topology itself is bad.
    spec.build_network()
    for ev in spec.events:
        if isinstance(ev, IrradianceDrop) and ev.bus not in spec.der_buses:
            raise ScenarioError(f"irradiance_drop at bus {ev.bus}: not a DER bus")
    return spec


def load_scenario(path, overrides=None) -> ScenarioSpec:
    """Read and validate a scenario JSON file."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {p}")
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: invalid JSON ({exc})")
    return parse_scenario(raw, overrides)


def bundled_scenario_path(name: str) -> Path:
    """Path of a packaged scenario ('mg4' or 'mg13')."""
    ref = resources.files("mgsec").joinpath(f"data/{name}.json")
    with resources.as_file(ref) as p:
        return Path(p)
