"""
Structured JSON logging.

Every log line is one JSON object so solver runs can be filtered by
instance size, step counts, final eta and so on. Structured fields are
attached with the `solver_data` extra:

    logger.info("ExpSinkhorn finished", extra={"solver_data": {"steps": 41}})

Library modules only call `logging.getLogger("expsinkhorn.<module>")`;
`configure_logging()` is called once by the CLI entry point. Logs go to
stderr because stdout carries command results (costs, reports).
"""

import json
import logging
import sys


class JSONLogFormatter(logging.Formatter):
    """
    Formats log records as single-line JSON objects.

    Example output:

        {"timestamp": "2026-02-06 10:30:00,120", "level": "INFO",
         "logger": "expsinkhorn.sinkhorn", "message": "ExpSinkhorn finished",
         "steps": 41, "eta": 8872.9}
    """

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if hasattr(record, "solver_data"):
            log_entry.update(record.solver_data)
        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_entry, default=str)


def configure_logging(level: str = "warning") -> None:
    """Install the JSON formatter on a stderr handler for the root logger."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONLogFormatter())

    logging.basicConfig(
        level=getattr(logging, level.upper()),
        handlers=[handler],
        force=True,
    )
