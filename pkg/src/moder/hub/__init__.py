"""Foundational hub: expert storage, retrieval, forging and classification."""

from moder.hub.core import (
    ForgeConfig,
    FoundationalHub,
    HubEntry,
    MergeReport,
    Prediction,
    Protocol,
    build_prototypes,
    classify,
    forge,
    forged_task_vector,
    insert,
    predict_batch,
    rank_scores,
    seen_prototype,
    top_k,
    zero_shot_prototype,
)
from moder.hub.io import dumps, load, loads, save

__all__ = [
    "ForgeConfig", "FoundationalHub", "HubEntry", "MergeReport", "Prediction", "Protocol",
    "build_prototypes", "classify", "forge", "forged_task_vector", "insert", "predict_batch",
    "rank_scores", "seen_prototype", "top_k", "zero_shot_prototype",
    "dumps", "load", "loads", "save",
]
