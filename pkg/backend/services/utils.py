import hashlib
import json
import re
from typing import Any, Optional


def normalize_text(text: Optional[str]) -> str:
    """Normalize prompt text: trim, collapse whitespace, lowercase."""
    if not text:
        return ""
    cleaned = re.sub(r"\s+", " ", str(text)).strip()
    return cleaned.lower()


def stable_hash(payload: Any) -> str:
    """SHA-256 of a JSON-serializable payload with sorted keys (or of raw bytes/str)."""
    if isinstance(payload, bytes):
        data = payload
    elif isinstance(payload, str):
        data = payload.encode("utf-8")
    else:
        data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def memory_mb() -> Optional[float]:
    """Resident set size of this process in MiB, or None without psutil."""
    try:
        import psutil  # type: ignore
    except Exception:  # pragma: no cover - optional dependency
        return None
    return psutil.Process().memory_info().rss / (1024.0 * 1024.0)
