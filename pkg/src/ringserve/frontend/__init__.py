from .core import Frontend, FrontendConfig, SubmitCoalescer
from .reader import AdaptivePoller, PollConfig, TokenReader
from .slots import NoFreeSlot, SlotCache, SlotTracker
from .tracker import RequestRecord, RequestTracker, Status

__all__ = [
    "AdaptivePoller", "Frontend", "FrontendConfig", "NoFreeSlot", "PollConfig", "RequestRecord",
    "RequestTracker", "SlotCache", "SlotTracker", "Status", "SubmitCoalescer", "TokenReader",
]
