import logging
import threading


logger = logging.getLogger(__name__)

_MESSAGES = []
_LOCK = threading.Lock()

LABELS = {
    "info": "Info",
    "warning": "Warning",
    "error": "Error",
}


def reset_messages():
    """Clear collected messages for a new run."""
    with _LOCK:
        _MESSAGES.clear()


def add_message(level: str, text: str):
    """Collect a non-blocking message for the end-of-run diagnostics block."""
    message = {"level": level, "text": str(text)}
    with _LOCK:
        if message in _MESSAGES:
            return
        _MESSAGES.append(message)
    if level == "warning":
        logger.warning("%s", text)
    elif level == "error":
        logger.error("%s", text)
    else:
        logger.info("%s", text)


def get_messages(level: str = None) -> list[dict]:
    with _LOCK:
        return [dict(m) for m in _MESSAGES if level is None or m["level"] == level]


def render_messages(stream) -> int:
    """Write collected messages as compact lines; returns how many were written."""
    messages = get_messages()
    if not messages:
        return 0
    stream.write(f"Diagnostics ({len(messages)})\n")
    for message in messages:
        label = LABELS.get(message.get("level"), "Message")
        stream.write(f"- {label}: {message.get('text', '')}\n")
    return len(messages)
