"""Structured warning records on the ``hetero_eeg`` logger.

Every record is a dict ``{code, subject_id, trial_index, detail}`` serialized
as one JSON line, so a log handler writing to stderr yields a machine-parseable
diagnostic stream.
"""

from __future__ import annotations

import json
import logging
from typing import Any

logger = logging.getLogger("hetero_eeg")


def emit_warning(
    code: str,
    detail: str,
    subject_id: str | None = None,
    trial_index: int | None = None,
) -> dict[str, Any]:
    record = {
        "code": code,
        "subject_id": subject_id,
        "trial_index": trial_index,
        "detail": detail,
    }
    logger.warning(json.dumps(record), extra={"record": record})
    return record


def emit_error(code: str, detail: str, **context: Any) -> dict[str, Any]:
    record = {"code": code, "detail": detail, **context}
    logger.error(json.dumps(record, default=str), extra={"record": record})
    return record
