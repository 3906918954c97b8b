"""Chat-completion HTTP client shared by the policy, judge and expert roles.

Messages inside the package are plain dicts ``{"role", "text", "images"}``
where ``images`` holds :class:`~vragrl.trajectory.ImageRef` objects. The
client converts them to the OpenAI-compatible wire shape, inlining images as
base64 PNG data URLs fetched from an :class:`ImageStore`.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import requests

from .perception import EncodedView, ImageDocument, render_view
from .trajectory import ImageRef

logger = logging.getLogger(__name__)


class EndpointUnreachable(Exception):
    """The endpoint failed every attempt (connection error, timeout or 5xx)."""


class BadCompletion(Exception):
    """The endpoint answered with something that is not a chat completion."""


class ChatModel(Protocol):
    def complete(self, messages: Sequence[dict], **params) -> str: ...


class ImageStore:
    """Content-addressed PNG store for observation images."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory else None
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def add_view(self, doc: ImageDocument, view: EncodedView) -> ImageRef:
        payload = render_view(doc, view)
        digest = hashlib.sha256(payload).hexdigest()
        with self._lock:
            self._blobs.setdefault(digest, payload)
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            path = self.directory / f"{digest}.png"
            if not path.exists():
                path.write_bytes(payload)
        return ImageRef(view, digest)

    def get(self, digest: str) -> bytes:
        with self._lock:
            if digest in self._blobs:
                return self._blobs[digest]
        if self.directory is not None:
            path = self.directory / f"{digest}.png"
            if path.exists():
                return path.read_bytes()
        raise KeyError(digest)

    def __contains__(self, digest: str) -> bool:
        try:
            self.get(digest)
        except KeyError:
            return False
        return True


def to_wire(messages: Sequence[dict], store: Optional[ImageStore]) -> list[dict]:
    wire = []
    for msg in messages:
        images = msg.get("images") or ()
        text = msg.get("text") or ""
        if not images:
            wire.append({"role": msg["role"], "content": text})
            continue
        parts = []
        for ref in images:
            if store is None:
                raise ValueError("image messages need an ImageStore")
            b64 = base64.b64encode(store.get(ref.sha256)).decode()
            parts.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        if text:
            parts.append({"type": "text", "text": text})
        wire.append({"role": msg["role"], "content": parts})
    return wire


class ChatClient:
    """``POST {base_url}/chat/completions`` with retries on transport errors and 5xx."""

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        api_key: Optional[str] = None,
        temperature: float = 0.0,
        max_tokens: int = 2048,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        store: Optional[ImageStore] = None,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("VRAG_API_KEY")
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.store = store
        self.session = session or requests.Session()

    def complete(self, messages: Sequence[dict], **params) -> str:
        body = {
            "model": self.model,
            "messages": to_wire(messages, self.store),
            "temperature": params.pop("temperature", self.temperature),
            "max_tokens": params.pop("max_tokens", self.max_tokens),
        }
        body.update({k: v for k, v in params.items() if v is not None})
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = f"{self.base_url}/chat/completions"

        last: Optional[str] = None
        for attempt in range(self.attempts):
            if attempt and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(url, json=body, headers=headers, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.warning("chat endpoint %s attempt %d failed: %s", url, attempt + 1, last)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BadCompletion(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BadCompletion(f"{url}: malformed completion") from exc
        raise EndpointUnreachable(f"{url}: {self.attempts} attempts failed ({last})")

    def identity(self) -> str:
        return f"chat:{self.base_url}:{self.model}"


class FunctionModel:
    """Adapts a plain callable ``messages -> text`` to the ChatModel interface."""

    def __init__(self, fn: Callable[[Sequence[dict]], str]):
        self.fn = fn

    def complete(self, messages: Sequence[dict], **params) -> str:
        return self.fn(messages)
