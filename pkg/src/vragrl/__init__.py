"""Multi-turn visual retrieval agents: action grammar, region perception,
retrieval environment, rewards, rollouts, GRPO and expert data synthesis."""

from .grammar import Answer, Region, Search, parse_response, render_response
from .grpo import GrpoConfig, ToyPolicy, compute_advantages, grpo_loss
from .perception import EncoderProfile, ImageDocument, crop_and_reencode, fit_to_budget, map_region_to_raw
from .retrieval import Corpus, SimulatedRetriever, make_planted_corpus
from .reward import COLD_START, POST_SFT, RewardWeights, retrieval_reward, score_trajectory
from .rollout import EnvironmentBundle, OraclePolicy, rollout, rollout_group
from .trajectory import FinishReason, QueryTask, Trajectory, Turn

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "COLD_START",
    "Corpus",
    "EncoderProfile",
    "EnvironmentBundle",
    "FinishReason",
    "GrpoConfig",
    "ImageDocument",
    "OraclePolicy",
    "POST_SFT",
    "QueryTask",
    "Region",
    "RewardWeights",
    "Search",
    "SimulatedRetriever",
    "ToyPolicy",
    "Trajectory",
    "Turn",
    "compute_advantages",
    "crop_and_reencode",
    "fit_to_budget",
    "grpo_loss",
    "make_planted_corpus",
    "map_region_to_raw",
    "parse_response",
    "render_response",
    "retrieval_reward",
    "rollout",
    "rollout_group",
    "score_trajectory",
]
