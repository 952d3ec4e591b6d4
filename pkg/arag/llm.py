# arag/llm.py

import asyncio
import hashlib
import json
import logging
import threading
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol

import httpx
from pydantic import ValidationError
from tenacity import AsyncRetrying, before_sleep_log, retry_if_exception, stop_after_attempt, wait_exponential

from .config import BASE_URL, OPENAI_API_KEY, BackendConfig
from .errors import BackendError, CassetteMiss, ConfigError
from .schemas import ChatRequest, ChatResponse, TokenUsage

logger = logging.getLogger(__name__)

Responder = Callable[[ChatRequest], str]


def request_digest(request: ChatRequest) -> str:
    """Stable hash of the ordered (role, content) pairs; ignores max_tokens and model_tag."""
    pairs = [[m.role, m.content] for m in request.messages]
    payload = json.dumps(pairs, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def count_tokens(text: str) -> int:
    """Whitespace token count used by the offline backends."""
    return len(text.split())


class ChatBackend(Protocol):
    kind: str

    async def complete(self, request: ChatRequest) -> ChatResponse:
        ...


async def complete(backend: ChatBackend, request: ChatRequest) -> ChatResponse:
    return await backend.complete(request)


# --- Remote OpenAI-compatible endpoint ---

def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code in (408, 409, 429, 500, 502, 503, 504)
    return isinstance(exc, httpx.TransportError)


class RemoteBackend:
    kind = "remote"

    def __init__(
        self,
        base_url: str = BASE_URL,
        api_key: Optional[str] = OPENAI_API_KEY,
        max_attempts: int = 3,
        backoff_seconds: float = 1.0,
        timeout_seconds: float = 60.0,
        concurrency_cap: int = 4,
        client: Optional[httpx.AsyncClient] = None,
    ):
        if client is None and not api_key:
            raise ConfigError("OPENAI_API_KEY is not set; the remote backend needs it in the environment")
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.concurrency_cap = concurrency_cap
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.AsyncClient(base_url=base_url, headers=headers, timeout=timeout_seconds)
        self._slots: Dict[int, asyncio.Semaphore] = {}

    async def _post(self, body: dict) -> dict:
        response = await self.client.post("/chat/completions", json=body)
        response.raise_for_status()
        return response.json()

    async def complete(self, request: ChatRequest) -> ChatResponse:
        # One semaphore per event loop; asyncio primitives are loop-bound
        slots = self._slots.setdefault(id(asyncio.get_running_loop()), asyncio.Semaphore(self.concurrency_cap))
        body = {
            "model": request.model_tag,
            "messages": [m.model_dump() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        retrying = AsyncRetrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=wait_exponential(multiplier=self.backoff_seconds),
            retry=retry_if_exception(_is_retryable),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        try:
            async with slots:
                result = await retrying(self._post, body)
        except httpx.HTTPError as e:
            logger.error(f"Chat completion failed for {request.agent_role}: {e}")
            raise BackendError(request.agent_role, f"chat completion failed: {e}") from e
        try:
            usage = result.get("usage") or {}
            return ChatResponse(
                text=result["choices"][0]["message"]["content"] or "",
                prompt_tokens=usage.get("prompt_tokens", 0),
                completion_tokens=usage.get("completion_tokens", 0),
            )
        except (KeyError, IndexError, TypeError, ValidationError) as e:
            raise BackendError(request.agent_role, f"unexpected response shape: {e}") from e

    async def aclose(self) -> None:
        await self.client.aclose()


# --- Offline backends ---

class MockBackend:
    """
    Scripted responses keyed by request digest.

    Unscripted requests go to the responder (or the default text); in strict mode
    they are an error instead.
    """

    kind = "mock"

    def __init__(
        self,
        script: Optional[Dict[str, str]] = None,
        responder: Optional[Responder] = None,
        default: Optional[str] = None,
        strict: bool = False,
    ):
        self.script = dict(script or {})
        self.responder = responder
        self.default = default
        self.strict = strict

    async def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        if digest in self.script:
            text = self.script[digest]
        elif self.strict:
            raise CassetteMiss(request.agent_role, f"no scripted response for digest {digest[:12]}")
        elif self.responder is not None:
            text = self.responder(request)
        elif self.default is not None:
            text = self.default
        else:
            raise CassetteMiss(request.agent_role, f"no scripted response for digest {digest[:12]}")
        prompt = "\n".join(m.content for m in request.messages)
        return ChatResponse(text=text, prompt_tokens=count_tokens(prompt), completion_tokens=count_tokens(text))


def load_cassette(path: Path) -> Dict[str, ChatResponse]:
    """Read a cassette file: one {digest, response_text, prompt_tokens, completion_tokens} per line."""
    entries: Dict[str, ChatResponse] = {}
    path = Path(path)
    if not path.exists():
        return entries
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                entries[row["digest"]] = ChatResponse(
                    text=row["response_text"],
                    prompt_tokens=row.get("prompt_tokens", 0),
                    completion_tokens=row.get("completion_tokens", 0),
                )
            except (json.JSONDecodeError, KeyError, ValidationError) as e:
                raise ConfigError(f"{path}:{line_no}: malformed cassette line: {e}") from e
    return entries


class RecordingBackend:
    """Passes calls to the wrapped backend and appends each new digest to the cassette."""

    kind = "record"

    def __init__(self, inner: ChatBackend, cassette_path: Path):
        self.inner = inner
        self.cassette_path = Path(cassette_path)
        self.cassette_path.parent.mkdir(parents=True, exist_ok=True)
        self.entries = load_cassette(self.cassette_path)
        self._inflight: Dict[str, asyncio.Future] = {}
        self._write_lock = threading.Lock()

    async def _fetch(self, request: ChatRequest, digest: str) -> ChatResponse:
        response = await self.inner.complete(request)
        with self._write_lock:
            if digest not in self.entries:
                self.entries[digest] = response
                row = {
                    "digest": digest,
                    "response_text": response.text,
                    "prompt_tokens": response.prompt_tokens,
                    "completion_tokens": response.completion_tokens,
                }
                try:
                    with self.cassette_path.open("a", encoding="utf-8") as f:
                        f.write(json.dumps(row, ensure_ascii=False) + "\n")
                except OSError as e:
                    logger.error(f"Could not append to cassette {self.cassette_path}: {e}")
                    raise BackendError(request.agent_role, f"cassette write failed: {e}") from e
        return self.entries[digest]

    async def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        if digest in self.entries:
            return self.entries[digest]
        task = self._inflight.get(digest)
        if task is None:
            # Concurrent identical requests share one call and one cassette entry
            task = self._inflight[digest] = asyncio.ensure_future(self._fetch(request, digest))
        try:
            return await task
        finally:
            self._inflight.pop(digest, None)


def record(backend: ChatBackend, cassette_path: Path) -> RecordingBackend:
    return RecordingBackend(backend, cassette_path)


class ReplayBackend:
    kind = "replay"

    def __init__(self, cassette_path: Path):
        self.cassette_path = Path(cassette_path)
        if not self.cassette_path.exists():
            raise ConfigError(f"Cassette not found: {self.cassette_path}")
        self.entries = load_cassette(self.cassette_path)
        logger.info(f"Replaying {len(self.entries)} recorded responses from {self.cassette_path}")

    async def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        try:
            return self.entries[digest]
        except KeyError:
            raise CassetteMiss(request.agent_role, f"cassette miss for digest {digest[:12]}") from None


class UsageMeter:
    """Wraps a backend and records token usage per call, in call order."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.kind = inner.kind
        self.calls: List[TokenUsage] = []

    async def complete(self, request: ChatRequest) -> ChatResponse:
        response = await self.inner.complete(request)
        self.calls.append(TokenUsage(
            agent_role=request.agent_role or "unknown",
            prompt_tokens=response.prompt_tokens,
            completion_tokens=response.completion_tokens,
        ))
        return response


def make_backend(config: BackendConfig, concurrency_cap: int = 4, responder: Optional[Responder] = None) -> ChatBackend:
    """Build the backend named by the configuration."""
    if config.kind == "replay":
        if config.cassette_path is None:
            raise ConfigError("The replay backend needs backend.cassette_path")
        return ReplayBackend(config.cassette_path)

    if config.kind == "remote" or (config.kind == "record" and config.record_source == "remote"):
        inner: ChatBackend = RemoteBackend(
            max_attempts=config.max_attempts,
            backoff_seconds=config.backoff_seconds,
            timeout_seconds=config.timeout_seconds,
            concurrency_cap=concurrency_cap,
        )
    else:
        if responder is None:
            from .synthetic import OverlapResponder
            responder = OverlapResponder()
        script = {}
        if config.script_path is not None:
            script = {digest: r.text for digest, r in load_cassette(config.script_path).items()}
        inner = MockBackend(script=script, responder=responder, strict=config.strict)

    if config.kind == "record":
        if config.cassette_path is None:
            raise ConfigError("The record backend needs backend.cassette_path")
        return record(inner, config.cassette_path)
    return inner
