"""Kernel-smoothed optimistic value iteration for continuous-state episodic MDPs."""
from .agents import AGENT_BONUS, AgentConfig, KernelAgent, backward_induction, make_theory_constants
from .envs import PuddleWorld, make_variant
from .harness import RunConfig, aggregate, oracle_check, run_experiment

__all__ = ["AGENT_BONUS", "AgentConfig", "KernelAgent", "PuddleWorld", "RunConfig", "aggregate",
           "backward_induction", "make_theory_constants", "make_variant", "oracle_check", "run_experiment"]
__version__ = "0.1.0"
