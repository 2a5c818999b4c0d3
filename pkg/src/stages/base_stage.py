import time
from typing import Any, Dict, List, Tuple

from utils.config import PipelineConfig


class BaseStage:
    """Common shell of a pipeline stage: config access, call history, last stats."""

    def __init__(self, role: str, config: PipelineConfig):
        self.role = role
        self.config = config
        self.history: List[Dict[str, Any]] = []
        self.last_stats: Dict[str, Any] = {}

    def process(self, *args: Any, **kwargs: Any) -> Tuple[Any, Dict[str, Any]]:
        raise NotImplementedError

    def execute(self, *args: Any, **kwargs: Any) -> Any:
        start = time.perf_counter()
        result, stats = self.process(*args, **kwargs)
        stats = dict(stats)
        stats["seconds"] = time.perf_counter() - start
        self.history.append(stats)
        self.last_stats = stats
        return result

    def counts(self) -> Dict[str, Any]:
        """Last stats without timing, safe to embed in deterministic outputs."""
        return {key: value for key, value in self.last_stats.items() if key != "seconds"}
