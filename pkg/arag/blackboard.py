# arag/blackboard.py

import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

from pydantic import ValidationError

from .errors import BlackboardError, TraceError
from .schemas import AgentRole, Message

logger = logging.getLogger(__name__)


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


class Blackboard:
    """
    Shared append-only memory for one user's agent run.

    Messages are never changed or removed once posted. Reads return the canonical
    (stage, role, id) order, so the view does not depend on which concurrent
    post arrived first.
    """

    def __init__(self, clock: Callable[[], int] = _now_ms):
        self._messages: List[Message] = []
        self._ids: set = set()
        self._counter = 0
        self._lock = threading.Lock()
        self._clock = clock

    def __len__(self) -> int:
        with self._lock:
            return len(self._messages)

    def post(self, message: Union[Message, Dict[str, Any]]) -> str:
        """Append a message and return its id; ids are assigned from a counter when absent."""
        if not isinstance(message, Message):
            try:
                message = Message.model_validate(message)
            except ValidationError as e:
                raise BlackboardError(f"Invalid message: {e}") from e
        with self._lock:
            if message.id is None:
                self._counter += 1
                while f"m{self._counter:06d}" in self._ids:
                    self._counter += 1
                message = message.model_copy(update={"id": f"m{self._counter:06d}"})
            elif message.id in self._ids:
                raise BlackboardError(f"Duplicate message id '{message.id}'")
            if message.timestamp is None:
                message = message.model_copy(update={"timestamp": self._clock()})
            self._messages.append(message)
            self._ids.add(message.id)
        logger.debug(f"Posted {message.role.value} message {message.id} at stage {message.stage}")
        return message.id

    def read(self, role: Optional[AgentRole] = None) -> List[Message]:
        """Messages (optionally of one role) in canonical order."""
        with self._lock:
            snapshot = list(self._messages)
        if role is not None:
            snapshot = [m for m in snapshot if m.role == role]
        return sorted(snapshot, key=Message.sort_key)


def payload(message: Message) -> Dict[str, Any]:
    """Decode the JSON payload stored in a message's content."""
    try:
        value = json.loads(message.content)
    except json.JSONDecodeError as e:
        raise TraceError(f"Message {message.id} does not carry a JSON payload: {e}") from e
    if not isinstance(value, dict):
        raise TraceError(f"Message {message.id} payload is not an object")
    return value


def encode_payload(value: Dict[str, Any]) -> str:
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


# --- Traces ---

TRACE_FIELDS = ("id", "role", "content", "score", "timestamp", "stage")


def serialize(board: Blackboard) -> str:
    """One JSON object per message, canonical order, fields exactly TRACE_FIELDS."""
    lines = []
    for message in board.read():
        row = message.model_dump(mode="json")
        lines.append(json.dumps({name: row[name] for name in TRACE_FIELDS}, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def replay(trace: str) -> Blackboard:
    """Rebuild a board from a trace document; errors name the byte offset."""
    board = Blackboard()
    offset = 0
    for line in trace.split("\n"):
        raw = line.rstrip("\r")
        if raw.strip():
            try:
                row = json.loads(raw)
            except json.JSONDecodeError as e:
                position = offset + len(raw[:e.pos].encode("utf-8"))
                raise TraceError(f"Malformed trace line: {e.msg}", offset=position) from e
            if not isinstance(row, dict) or set(row) != set(TRACE_FIELDS):
                raise TraceError(f"Trace line must have exactly the fields {', '.join(TRACE_FIELDS)}", offset=offset)
            try:
                message = Message.model_validate(row)
                board.post(message)
            except (ValidationError, BlackboardError) as e:
                raise TraceError(f"Invalid trace message: {e}", offset=offset) from e
        offset += len(line.encode("utf-8")) + 1
    return board


def write_trace(board: Blackboard, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize(board), encoding="utf-8")
    return path


def read_trace(path: Path) -> Blackboard:
    path = Path(path)
    if not path.exists():
        raise TraceError(f"Trace file not found: {path}")
    return replay(path.read_text(encoding="utf-8"))
