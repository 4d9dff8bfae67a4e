"""Data-driven adaptive control against adversarial disturbances.

A Hankel representation built from one noise-free (or estimated) trajectory
replaces the system matrices; accumulated disturbances are reconstructed
online and a disturbance-action controller is tuned by online gradient
descent.
"""

from .behavior import AccHistory, HankelPair, acc_noise, build_hankel, extract_lstep, pi_traj
from .controller import AdacParams, adac_control, default_memory, project_M
from .errors import (AdaclabError, ConfigError, ContractError, PersistencyError,
                     SingularRepresentationError, StabilityError)
from .learner import build_sensitivity, grad_f, ogd_step, step_size
from .lti import CostOracle, DisturbanceGen, LinearEnvironment, LtiSystem, random_stable_system, simulate
from .pipeline import (EtcConfig, RunTrace, comparator_oracle, evaluate, regret, run_clean, run_etc,
                       run_output_etc, slope_fit)

__version__ = "0.1.0"
