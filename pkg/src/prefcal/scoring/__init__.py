"""Stage 2: VLM client and score extraction."""

from prefcal.scoring.cache import ScoreCache, cache_key
from prefcal.scoring.client import (
    CostCounter,
    HttpBackend,
    MockBackend,
    VlmClient,
    VlmRequest,
)
from prefcal.scoring.scorer import (
    AgentTemperatures,
    PairScores,
    Scorer,
    default_sigma_i,
    determine_winner,
    multi_agent_score,
    multi_agent_single,
    score_mode1_single,
    score_mode2_pair,
)

__all__ = [
    "AgentTemperatures",
    "CostCounter",
    "HttpBackend",
    "MockBackend",
    "PairScores",
    "ScoreCache",
    "Scorer",
    "VlmClient",
    "VlmRequest",
    "cache_key",
    "default_sigma_i",
    "determine_winner",
    "multi_agent_score",
    "multi_agent_single",
    "score_mode1_single",
    "score_mode2_pair",
]
