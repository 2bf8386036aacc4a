"""Microgrid secondary voltage/frequency control testbed.

Reduced-order AC microgrid simulation with mixed grid-forming/grid-following
units, online lifted-linear identification (OKID/ERA with an adaptive
balancing exponent, plus fixed-exponent and EDMDc baselines), discrete-time
LQR, and closed-loop stability diagnostics.
"""

from .dynamics import (DerMode, DerUnit, ResidualProcess, SetpointError,
                       SimulationDivergence, UncertaintyConfig,
                       apply_setpoint_update, droop_derivatives, filter_step,
                       residual_step, simulate_step)
from .harness import (PiState, RunMetrics, ScenarioRunner, compute_metrics,
                      margins_report, pi_step, run_scenario)
from .identification import (IdentificationError, IdentifiedModel, LiftedData,
                             MeasurementWindow, OkidConfig, OnlineIdentifier,
                             build_hankels, conventional_okid, edmdc_baseline,
                             estimate_C, estimate_markov, lift_observables,
                             lift_window, okid_identify, optimize_gamma,
                             predict_one_step, prediction_error, realize_AB,
                             realization_C, truncated_svd, update_gamma)
from .lqr import (ControllerState, CostMatrices, LqrController, RiccatiError,
                  build_cost, compute_gain, control_step, solve_dare)
from .network import (NetworkError, NetworkModel, NetworkState,
                      assemble_bus_admittance, build_network,
                      compute_injections, kron_reduce)
from .scenario import (MeasurementModel, PiGains, ScenarioError, ScenarioSpec,
                       bundled_scenario_path, load_scenario, parse_scenario)
from .stability import (BiboReport, DiscMargin, bibo_check,
                        closed_loop_radius_with_gains, compute_disc_margins,
                        spectral_radius)

__version__ = "0.1.0"
