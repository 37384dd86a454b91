"""Curiosity-arbitrated switching between gradient MPC in a learned latent space and actor-critic control."""

from .config import ConfigError, RunConfig, load_config
from .controller import MetaController, ReplayBuffer, RunAborted
from .dynamics import CuriosityState, LatentDynamics
from .envs import PixelGrasper, PixelReacher, make_env
from .kernels import BACKEND
from .learner import ActorCritic, LearnerConfig
from .planner import Planner, PlannerConfig

__version__ = "0.1.0"

__all__ = ["ActorCritic", "BACKEND", "ConfigError", "CuriosityState", "LatentDynamics", "LearnerConfig",
           "MetaController", "Planner", "PlannerConfig", "PixelGrasper", "PixelReacher", "ReplayBuffer",
           "RunAborted", "RunConfig", "load_config", "make_env"]
