"""QPU class library."""

from .base import CapabilityError, ConfigError, StatefulQPU
from .cache import CacheQPU
from .dsd import DataStoreDriver
from .filter import FilterQPU
from .index import IndexQPU
from .join import JoinQPU
from .state import CacheState, IndexState, JoinState, TopKState
from .topk import TopKQPU

QPU_CLASSES = {
    "dsd": DataStoreDriver,
    "index": IndexQPU,
    "join": JoinQPU,
    "topk": TopKQPU,
    "cache": CacheQPU,
    "filter": FilterQPU,
}

__all__ = [
    "QPU_CLASSES",
    "CacheQPU",
    "CacheState",
    "CapabilityError",
    "ConfigError",
    "DataStoreDriver",
    "FilterQPU",
    "IndexQPU",
    "IndexState",
    "JoinQPU",
    "JoinState",
    "StatefulQPU",
    "TopKQPU",
    "TopKState",
]
