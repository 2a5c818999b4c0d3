import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import typer


class RunLog:
    """Line-delimited JSON run log, echoed to the console as it is written."""

    def __init__(self, logs_dir: Optional[str] = None, echo: bool = True):
        self.run_stamp = time.strftime("%Y%m%d_%H%M%S")
        self.echo = echo
        self.path: Optional[Path] = None
        logs_dir = os.getenv("CRISP_LOG_DIR") or logs_dir
        if logs_dir:
            Path(logs_dir).mkdir(parents=True, exist_ok=True)
            self.path = Path(logs_dir) / f"run_{self.run_stamp}.jsonl"
        self.stage_timings: List[Dict[str, Any]] = []
        self._handler: Optional[logging.Handler] = None

    def append(self, message: str, /, **fields: Any) -> None:
        record = {"time": time.strftime("%H:%M:%S"), "event": message}
        record.update(fields)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")
        if self.echo:
            typer.echo(message)

    @contextmanager
    def stage(self, name: str) -> Iterator[Dict[str, Any]]:
        """Time one pipeline stage; callers may add counts to the yielded dict."""
        stats: Dict[str, Any] = {}
        self.append(f"{name}: started", stage=name)
        start = time.perf_counter()
        try:
            yield stats
        finally:
            seconds = time.perf_counter() - start
            self.stage_timings.append({"stage": name, "seconds": seconds, **stats})
            self.append(f"{name}: done in {seconds:.2f}s", stage=name, seconds=seconds, **stats)

    def timings(self) -> List[Dict[str, Any]]:
        total = sum(item["seconds"] for item in self.stage_timings)
        rows = []
        for item in self.stage_timings:
            share = 100.0 * item["seconds"] / total if total > 0 else 0.0
            rows.append({**item, "proportion": share})
        return rows

    def capture_library_logs(self, level: int = logging.INFO) -> None:
        if self._handler is not None:
            return
        self._handler = _RunLogHandler(self)
        self._handler.setLevel(level)
        root = logging.getLogger()
        root.addHandler(self._handler)
        if root.level > level or root.level == logging.NOTSET:
            root.setLevel(level)

    def close(self) -> None:
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler = None


class _RunLogHandler(logging.Handler):
    def __init__(self, run_log: RunLog):
        super().__init__()
        self.run_log = run_log

    def emit(self, record: logging.LogRecord) -> None:
        self.run_log.append(
            record.getMessage(), level=record.levelname.lower(), logger=record.name
        )
