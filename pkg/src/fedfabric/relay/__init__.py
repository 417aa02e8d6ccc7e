"""Cloud-relay stand-in: function registry, tiered store-and-forward task routing."""

from .core import (
    BLOB_TIER_MODEL,
    FAST_TIER_MODEL,
    RelayConfig,
    RelayCore,
    TierPolicy,
)
from .protocol import (
    FunctionRecord,
    ResultEnvelope,
    Status,
    TaskDescriptor,
    Tier,
    WorkerTimings,
    new_id,
)
from .server import RelayClient, RelayServer

__all__ = [
    "BLOB_TIER_MODEL",
    "FAST_TIER_MODEL",
    "FunctionRecord",
    "RelayClient",
    "RelayConfig",
    "RelayCore",
    "RelayServer",
    "ResultEnvelope",
    "Status",
    "TaskDescriptor",
    "Tier",
    "TierPolicy",
    "WorkerTimings",
    "new_id",
]
