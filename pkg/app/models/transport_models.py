from pydantic import BaseModel, Field
from typing import Dict, List
from enum import Enum


class BackendKind(str, Enum):
    SIMULATED = "simulated"
    SOCKET = "socket"


class TraceRecord(BaseModel):
    src: int
    dst: int
    seq: int  # position within the ordered (src, dst) pair
    stage: str
    payload_bytes: int = Field(ge=0)
    message_count: int = 1
    pair_count: int = 0  # sparse index-value pairs carried
    dense_count: int = 0  # dense words carried


# -------------------------------------------------------------------------------------------
# summaries


class RankTraffic(BaseModel):
    rank: int
    messages_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    bytes_received: int = 0
    pairs_sent: int = 0
    dense_sent: int = 0


class StageTraffic(BaseModel):
    rank: int
    stage: str
    messages: int = 0
    payload_bytes: int = 0
    pairs: int = 0
    dense_words: int = 0


class TraceSummary(BaseModel):
    world_size: int
    ranks: List[RankTraffic]
    stages: List[StageTraffic] = []

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes_sent for r in self.ranks)

    @property
    def total_messages(self) -> int:
        return sum(r.messages_sent for r in self.ranks)

    def per_stage(self) -> Dict[str, StageTraffic]:
        """Stage aggregates summed over ranks (rank field set to -1)"""
        merged: Dict[str, StageTraffic] = {}
        for row in self.stages:
            agg = merged.setdefault(row.stage, StageTraffic(rank=-1, stage=row.stage))
            agg.messages += row.messages
            agg.payload_bytes += row.payload_bytes
            agg.pairs += row.pairs
            agg.dense_words += row.dense_words
        return merged

    def rank_stages(self, rank: int) -> List[StageTraffic]:
        return [row for row in self.stages if row.rank == rank]
