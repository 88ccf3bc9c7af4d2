import os
from datetime import datetime, timezone
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

# Manifest timestamps; TOMOCLASS_TZ=Europe/Berlin etc., else the host zone.
RUN_TZ = (os.getenv("TOMOCLASS_TZ", "") or "").strip()


def now_local_iso() -> str:
    now = datetime.now(tz=timezone.utc)
    try:
        tz = ZoneInfo(RUN_TZ) if RUN_TZ else None
    except ZoneInfoNotFoundError:
        tz = None
    return now.astimezone(tz).isoformat(timespec="seconds")


def format_wall_time(seconds: float) -> str:
    """H:MM:SS.s for run logs and the ledger listing."""
    seconds = max(0.0, float(seconds))
    m, s = divmod(seconds, 60.0)
    h, m = divmod(int(m), 60)
    return f"{h}:{m:02d}:{s:04.1f}"
