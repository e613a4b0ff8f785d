"""Instants are int64 seconds since the Unix epoch, always UTC."""
from __future__ import annotations

from datetime import datetime, timezone

import numpy as np

HOUR = 3600
DAY = 86400


def to_epoch(value) -> int:
    """Parse an ISO-8601 string, date or datetime into UTC epoch seconds.

    Naive values are taken to be UTC.
    """
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        value = datetime.fromisoformat(text)
    if not isinstance(value, datetime):
        value = datetime(value.year, value.month, value.day)
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return int(value.timestamp())


def to_iso(seconds: int) -> str:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def midnight_floor(seconds):
    return (np.asarray(seconds) // DAY) * DAY
