"""LLM endpoints: an HTTP chat-completions client and a file-driven playback client."""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import httpx

from .protocol import ChatMessage, EndpointError, ToolCall, ToolSpec

log = logging.getLogger(__name__)

BASE_URL_ENV = "SMPSAGENT_BASE_URL"
API_KEY_ENV = "SMPSAGENT_API_KEY"
MODEL_ENV = "SMPSAGENT_MODEL"


class ChatClient(Protocol):
    def complete(self, messages: Sequence[ChatMessage], tools: Sequence[ToolSpec],
                 temperature: float, top_p: float) -> ChatMessage: ...


class ChatCompletionsClient:
    """POSTs to ``{base_url}/chat/completions``; retries transport errors,
    429 and 5xx with exponential backoff."""

    def __init__(self, base_url: str, api_key: str = "", model: str = "gpt-4o",
                 timeout: float = 120.0, attempts: int = 3, backoff: float = 1.0,
                 transport: Optional[httpx.BaseTransport] = None, sleep=time.sleep):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, base_url: Optional[str] = None, model: Optional[str] = None,
                 **kwargs) -> "ChatCompletionsClient":
        url = base_url or os.environ.get(BASE_URL_ENV)
        if not url:
            raise EndpointError(f"no LLM endpoint configured; set {BASE_URL_ENV}")
        model = model or os.environ.get(MODEL_ENV) or "gpt-4o"
        return cls(url, os.environ.get(API_KEY_ENV, ""), model, **kwargs)

    def complete(self, messages, tools, temperature=1.0, top_p=1.0) -> ChatMessage:
        body: dict = {
            "model": self.model,
            "messages": [m.to_wire() for m in messages],
            "temperature": temperature,
            "top_p": top_p,
        }
        if tools:
            body["tools"] = [t.to_wire() for t in tools]
        url = f"{self.base_url}/chat/completions"
        last = ""
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post(url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                log.warning("attempt %d: %s", attempt + 1, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                log.warning("attempt %d: %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return _parse_completion(resp)
        raise EndpointError(f"giving up after {self.attempts} attempts ({last})")


def _parse_completion(resp: httpx.Response) -> ChatMessage:
    try:
        msg = resp.json()["choices"][0]["message"]
        calls = tuple(ToolCall.from_wire(c) for c in msg.get("tool_calls") or ())
        return ChatMessage("assistant", msg.get("content") or "", calls)
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise EndpointError(f"malformed completion response: {exc!r}") from None


class ScriptedClient:
    """Replays canned assistant turns, one per call.

    File format::

        {"turns": [{"content": "...",
                    "tool_calls": [{"name": "simulate_and_read",
                                    "arguments": {"signal": "V(out)", "kind": "mean"}}]}],
         "repeat_last": false}

    ``arguments`` may be a string to send deliberately malformed JSON. Call ids
    are ``call_<turn>_<index>`` so replays are reproducible.
    """

    def __init__(self, turns: Sequence[dict], repeat_last: bool = False):
        self.turns = list(turns)
        self.repeat_last = repeat_last
        self.position = 0

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScriptedClient":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            return cls(data)
        return cls(data["turns"], bool(data.get("repeat_last", False)))

    def complete(self, messages, tools, temperature=1.0, top_p=1.0) -> ChatMessage:
        turn_no = self.position
        if self.position >= len(self.turns):
            if not (self.repeat_last and self.turns):
                raise EndpointError(f"script exhausted after {len(self.turns)} turns")
            turn = self.turns[-1]
        else:
            turn = self.turns[self.position]
        self.position += 1
        calls = tuple(
            ToolCall.make(f"call_{turn_no}_{i}", c["name"], c.get("arguments", {}))
            for i, c in enumerate(turn.get("tool_calls") or ())
        )
        return ChatMessage("assistant", turn.get("content", ""), calls)
