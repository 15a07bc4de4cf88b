"""Decision Transformer agents for multi-agent path finding, with a
full-observability advisor for goal changes."""
from .env import Action, Coord, EpisodeConfig, GridMap, RewardConfig, generate_map, observe, reset, sample_instance, step
from .planner import JointPlan, PlanningFailure, plan_cbs, plan_prioritized, plan_with_fallback, validate_plan

__version__ = "0.1.0"
