"""Learned value functions as terminal costs for constrained MPC."""
from .core import EnvModel, Trajectory, step, rollout, linearize, dynamics_defect
from .envs import make_env, ENV_NAMES
from .solver import SolverConfig, OcpProblem, SolveResult, solve_ocp, solve_batch
from .valuenet import ValueNetwork, PolicyNetwork, TrainConfig, Adam, save_checkpoint, load_checkpoint
from .training import ViConfig, Dataset, value_iteration, bellman_targets, ground_truth_value
from .mpc import MpcTrace, mpc_step, mpc_rollout, mpc_rollout_batch

__version__ = "0.1.0"
