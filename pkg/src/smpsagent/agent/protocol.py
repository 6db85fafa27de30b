"""Chat and tool-calling records, shaped after the common chat-completions wire format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

ROLES = ("system", "user", "assistant", "tool")


class AgentError(Exception):
    pass


class EndpointError(AgentError):
    """Transport or protocol failure talking to the LLM (after retries)."""


class MalformedToolArguments(AgentError):
    pass


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    # raw JSON text as sent by the model; parsed lazily so bad JSON becomes a tool error
    raw_arguments: str = "{}"

    @classmethod
    def make(cls, id: str, name: str, arguments: Any) -> "ToolCall":
        raw = arguments if isinstance(arguments, str) else json.dumps(arguments)
        return cls(id, name, raw)

    @property
    def arguments(self) -> dict[str, Any]:
        try:
            args = json.loads(self.raw_arguments or "{}")
        except json.JSONDecodeError as exc:
            raise MalformedToolArguments(f"arguments are not valid JSON: {exc}") from None
        if not isinstance(args, dict):
            raise MalformedToolArguments("arguments must be a JSON object")
        return args

    def to_wire(self) -> dict:
        return {"id": self.id, "type": "function",
                "function": {"name": self.name, "arguments": self.raw_arguments}}

    @classmethod
    def from_wire(cls, d: dict) -> "ToolCall":
        fn = d.get("function") or {}
        args = fn.get("arguments", "{}")
        if not isinstance(args, str):
            args = json.dumps(args)
        return cls(str(d["id"]), str(fn["name"]), args)


@dataclass(frozen=True)
class ToolResult:
    id: str
    text: str
    success: bool = True


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: Optional[str] = None
    # bookkeeping for transcripts; not sent on the wire
    success: Optional[bool] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))

    @classmethod
    def from_result(cls, r: ToolResult) -> "ChatMessage":
        return cls("tool", r.text, tool_call_id=r.id, success=r.success)

    def to_wire(self) -> dict:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [c.to_wire() for c in self.tool_calls]
        if self.tool_call_id:
            d["tool_call_id"] = self.tool_call_id
        return d

    def to_json(self) -> dict:
        d = self.to_wire()
        if self.success is not None:
            d["success"] = self.success
        return d

    @classmethod
    def from_wire(cls, d: dict) -> "ChatMessage":
        calls = tuple(ToolCall.from_wire(c) for c in d.get("tool_calls") or ())
        return cls(d["role"], d.get("content") or "", calls, d.get("tool_call_id"),
                   d.get("success"))


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str
    description: str = ""
    required: bool = True
    enum: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    params: tuple[ToolParam, ...] = field(default_factory=tuple)

    def to_wire(self) -> dict:
        props = {}
        for p in self.params:
            prop: dict[str, Any] = {"type": p.type, "description": p.description}
            if p.enum:
                prop["enum"] = list(p.enum)
            props[p.name] = prop
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": props,
                    "required": [p.name for p in self.params if p.required],
                },
            },
        }


def check_transcript(messages: list[ChatMessage]) -> None:
    """Raise ValueError unless every tool call is answered right after its request."""
    pending: list[str] = []
    for i, m in enumerate(messages):
        if m.role == "tool":
            if not pending or m.tool_call_id != pending[0]:
                raise ValueError(f"message {i}: unexpected tool result {m.tool_call_id!r}")
            pending.pop(0)
            continue
        if pending:
            raise ValueError(f"message {i}: tool calls {pending} were never answered")
        if m.role == "assistant":
            pending = [c.id for c in m.tool_calls]
    if pending:
        raise ValueError(f"tool calls {pending} were never answered")
