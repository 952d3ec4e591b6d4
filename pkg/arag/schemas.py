# arag/schemas.py
from datetime import datetime
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")


# --- Corpus ---

# A recommendable unit with its textual metadata
class Item(FrozenModel):
    id: str
    title: str
    description: str = ""
    reviews: Tuple[str, ...] = ()
    category: str = ""

    @field_validator("id", "title")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value or not value.strip():
            raise ValueError("must be a non-empty string")
        return value


# One user/item event from the interaction log
class Interaction(FrozenModel):
    user_id: str
    item_id: str
    timestamp: int = Field(ge=0)
    rating: Optional[float] = Field(default=None, ge=1, le=5)
    review_text: Optional[str] = None


# Long-term context plus the current session, both oldest first
class UserContext(FrozenModel):
    user_id: str
    long_term: Tuple[Interaction, ...] = ()
    session: Tuple[Interaction, ...] = ()

    @model_validator(mode="after")
    def _check_order(self) -> "UserContext":
        for name in ("long_term", "session"):
            stamps = [i.timestamp for i in getattr(self, name)]
            if stamps != sorted(stamps):
                raise ValueError(f"{name} is not sorted by timestamp")
        if self.long_term and self.session and self.session[0].timestamp < self.long_term[-1].timestamp:
            raise ValueError("session precedes long-term history")
        return self

    def newest_first(self) -> List[Interaction]:
        """Session interactions newest first, then long-term newest first."""
        return list(reversed(self.session)) + list(reversed(self.long_term))

    def item_ids(self) -> set:
        return {i.item_id for i in self.long_term} | {i.item_id for i in self.session}


# Leave-last-out evaluation instance
class EvalInstance(FrozenModel):
    context: UserContext
    ground_truth: str

    @model_validator(mode="after")
    def _check_holdout(self) -> "EvalInstance":
        if self.ground_truth in self.context.item_ids():
            raise ValueError("ground truth still present in the user's history")
        if not self.context.session and not self.context.long_term:
            raise ValueError("instance has no history left")
        return self


# --- LLM transport ---

class ChatMessage(FrozenModel):
    role: str
    content: str

    @field_validator("role")
    @classmethod
    def _known_role(cls, value: str) -> str:
        if value not in ("system", "user"):
            raise ValueError(f"unsupported chat role: {value}")
        return value


class ChatRequest(FrozenModel):
    messages: Tuple[ChatMessage, ...] = Field(min_length=1)
    temperature: float = Field(default=0.0, ge=0)
    max_tokens: int = Field(default=256, ge=1)
    model_tag: str = "gpt-3.5-turbo-0125"
    # Agent role that issued the call; used for error messages and usage only.
    agent_role: Optional[str] = None


class ChatResponse(FrozenModel):
    text: str
    prompt_tokens: int = Field(default=0, ge=0)
    completion_tokens: int = Field(default=0, ge=0)


# --- Blackboard ---

class AgentRole(StrEnum):
    USER_UNDERSTANDING = "user_understanding"
    NLI = "nli"
    CONTEXT_SUMMARY = "context_summary"
    ITEM_RANKER = "item_ranker"


# Protocol step at which each role writes to the board
ROLE_STAGES: Dict[AgentRole, int] = {
    AgentRole.USER_UNDERSTANDING: 1,
    AgentRole.NLI: 1,
    AgentRole.CONTEXT_SUMMARY: 2,
    AgentRole.ITEM_RANKER: 3,
}


class Message(FrozenModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: Optional[str] = None
    role: AgentRole
    content: str
    score: Optional[float] = None
    timestamp: Optional[int] = Field(default=None, ge=0)
    stage: int

    @model_validator(mode="after")
    def _check_role(self) -> "Message":
        expected = ROLE_STAGES[self.role]
        if self.stage != expected:
            raise ValueError(f"role {self.role.value} must be posted at stage {expected}, got {self.stage}")
        if self.role is AgentRole.NLI and self.score is None:
            raise ValueError("nli messages must carry a score")
        return self

    def sort_key(self) -> Tuple[int, str, str]:
        return (self.stage, self.role.value, self.id or "")


# --- Agent outputs ---

class UserSummary(FrozenModel):
    text: str = Field(min_length=1)


class NliJudgement(FrozenModel):
    item_id: str
    score: float = Field(ge=0.0, le=1.0)
    rationale: str = ""


class ContextSummary(FrozenModel):
    text: str
    source_item_ids: Tuple[str, ...] = ()


class Ranking(FrozenModel):
    item_ids: Tuple[str, ...]
    explanation: str = ""


# --- Pipeline ---

class Variant(StrEnum):
    ARAG = "arag"
    ARAG_NO_NLI = "arag_no_nli"
    ARAG_NO_NLI_NO_CSA = "arag_no_nli_no_csa"
    VANILLA_RAG = "vanilla_rag"
    RECENCY = "recency"


class TokenUsage(FrozenModel):
    agent_role: str
    prompt_tokens: int
    completion_tokens: int


class PipelineOutput(FrozenModel):
    user_id: str
    variant: Variant
    ranking: Ranking
    board_trace: str
    usage: Tuple[TokenUsage, ...] = ()
    wall_time: float = 0.0


# --- Evaluation ---

# Outcome for one (user, variant) pair; rank is 1-indexed, None when absent or failed
class UserRecord(FrozenModel):
    user_id: str
    variant: Variant
    rank: Optional[int] = None
    ndcg: float = 0.0
    hit: int = 0
    pool_digest: str = ""
    error: Optional[str] = None


class VariantAggregate(FrozenModel):
    variant: Variant
    ndcg: float
    hit: float
    users: int
    failures: int
    missing_ground_truth: int = 0


class EvalResult(FrozenModel):
    k: int
    records: Tuple[UserRecord, ...]
    aggregates: Dict[str, VariantAggregate]


class RunManifest(BaseModel):
    command: str
    config: dict
    dataset_digests: Dict[str, str]
    backend_kind: str
    version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
