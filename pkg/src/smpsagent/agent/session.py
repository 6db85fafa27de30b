from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..engine import Engine
from ..netlist import (
    KNOWN_KINDS,
    Component,
    Netlist,
    NetlistError,
    parse_card,
    parse_netlist,
    parse_value,
    serialize_netlist,
)
from ..rag import RetrievalConfig, RetrievalIndex, load_datasheet
from .clients import ChatClient
from .protocol import ChatMessage, EndpointError, ToolResult
from .tools import ITERATION_LIMIT_TEXT, SessionState, default_toolset, execute_tool

log = logging.getLogger(__name__)

TERMINATIONS = ("final_answer", "iteration_cap", "error")
NETLIST_TAGS = ("spice", "netlist", "cir", "sp", "net", "ngspice", "ltspice")
REMINDER = ("Your reply did not contain a netlist. Call a tool, or give the complete "
            "adapted netlist in a ```spice block ending with .end.")


@dataclass(frozen=True)
class SessionConfig:
    max_iterations: int = 8
    temperature: float = 1.0
    top_p: float = 1.0
    system_instructions: str = ""
    datasheet: Optional[Union[str, Path]] = None
    engine: Engine = "reference"
    tools_enabled: bool = True
    retrieval: RetrievalConfig = RetrievalConfig()

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class SessionOutcome:
    final_netlist: Optional[Netlist]
    transcript: list[ChatMessage]
    iterations_used: int
    termination: str
    last_candidate: Optional[Netlist] = None
    diagnostics: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def deck(n: Optional[Netlist]) -> Optional[str]:
            return serialize_netlist(n) if n is not None else None
        return {
            "termination": self.termination,
            "iterations_used": self.iterations_used,
            "final_netlist": deck(self.final_netlist),
            "last_candidate": deck(self.last_candidate),
            "diagnostics": list(self.diagnostics),
            "messages": [m.to_json() for m in self.transcript],
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n",
                              encoding="utf-8")


def load_transcript(path: Union[str, Path]) -> list[ChatMessage]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [ChatMessage.from_wire(m) for m in data["messages"]]


def build_system_prompt(cfg: SessionConfig) -> str:
    lines = [
        "You are an assistant for designing switched-mode power supplies. You "
        "receive a SPICE netlist and a design task and adapt the netlist to meet it.",
        "Always include the complete adapted netlist in your response, inside a "
        "```spice code block that ends with .end.",
        "Think step by step.",
    ]
    if cfg.tools_enabled:
        lines.append(
            "Tools: submit_netlist stores a candidate netlist; simulate_and_read "
            "simulates the current candidate (the original netlist until you submit "
            "one) and returns a single measured value such as a mean, a ripple, a "
            "switching frequency or a settle time. Use them to check your changes "
            "before answering. Reply without tool calls once you are done."
        )
        if cfg.datasheet is not None:
            lines.append(
                "You have access to the datasheet of the controller in this circuit. "
                "Query it with search_datasheet whenever you need pin functions, "
                "formulas or limits."
            )
    else:
        lines.append("No tools are available; answer directly with the adapted netlist.")
    if cfg.system_instructions.strip():
        lines.append(cfg.system_instructions.strip())
    return "\n".join(lines)


_FENCE_RE = re.compile(r"```[ \t]*([\w+-]*)[^\n]*\n(.*?)```", re.DOTALL)


def _looks_like_card(line: str) -> bool:
    """Strict check used when scanning prose for an unfenced deck."""
    s = line.strip()
    if not s:
        return False
    if s[0] in "*+":
        return True
    if s[0] == ".":
        return re.match(r"^\.[A-Za-z]+\b", s) is not None
    toks = s.split()
    if not re.match(r"^[A-Za-z][\w.-]*$", toks[0]) or toks[0][0].upper() not in KNOWN_KINDS:
        return False
    try:
        card = parse_card(s)
    except NetlistError:
        return False
    if not isinstance(card, Component) or card.opaque:
        return False
    kind = card.kind
    if kind in "RLC":
        return len(toks) == 4 and parse_value(toks[3]) is not None
    if kind in "VI":
        head = toks[3].lower() if len(toks) > 3 else ""
        return parse_value(head) is not None or head.startswith(
            ("dc", "ac", "pulse", "sin", "pwl", "exp"))
    if kind == "D":
        return len(toks) == 4
    return True


def _parse_or_none(text: str) -> Optional[Netlist]:
    try:
        return parse_netlist(text)
    except NetlistError:
        return None


def _longest_card_run(lines: list[str]) -> Optional[Netlist]:
    best: Optional[tuple[int, Netlist]] = None
    for end, line in enumerate(lines):
        if line.strip().lower() != ".end":
            continue
        start = end
        while start > 0 and (_looks_like_card(lines[start - 1]) or not lines[start - 1].strip()):
            start -= 1
        while start < end and not lines[start].strip():
            start += 1
        n = _parse_or_none("\n".join(lines[start:end + 1]))
        if n is not None and n.components and (best is None or end - start > best[0]):
            best = (end - start, n)
    return best[1] if best else None


def extract_netlist_from_response(text: str) -> Optional[Netlist]:
    """The netlist an assistant reply carries, if any.

    Tagged fenced blocks win (the last one that parses); otherwise the longest
    run of card lines that ends with ``.end``.
    """
    if not text:
        return None
    tagged = [body for tag, body in _FENCE_RE.findall(text) if tag.lower() in NETLIST_TAGS]
    for body in reversed(tagged):
        n = _parse_or_none(body)
        if n is not None and n.components:
            return n
    return _longest_card_run(text.splitlines())


def _with_deck(task_prompt: str, initial: Netlist) -> str:
    deck = serialize_netlist(initial)
    if deck.strip() in task_prompt:
        return task_prompt
    return f"{task_prompt.rstrip()}\n\n```spice\n{deck}```"


def open_datasheet(cfg: SessionConfig) -> Optional[RetrievalIndex]:
    if cfg.datasheet is None:
        return None
    return load_datasheet(str(cfg.datasheet), cfg.retrieval)


def run_session(task_prompt: str, initial: Netlist, cfg: SessionConfig, client: ChatClient,
                datasheet: Optional[RetrievalIndex] = None) -> SessionOutcome:
    """Alternate LLM turns and tool executions until a final netlist or the cap.

    One iteration is one assistant turn that requests tools; a reply with
    neither tool calls nor a netlist earns a reminder and also counts.
    """
    if datasheet is None and cfg.tools_enabled:
        datasheet = open_datasheet(cfg)
    state = SessionState(initial, cfg.engine, datasheet, cfg.retrieval.max_chunks)
    tools = default_toolset(state) if cfg.tools_enabled else []
    transcript = [
        ChatMessage("system", build_system_prompt(cfg)),
        ChatMessage("user", _with_deck(task_prompt, initial)),
    ]
    iterations = 0
    last_candidate: Optional[Netlist] = None

    def finish(termination: str, final: Optional[Netlist] = None,
               notes: Optional[list[str]] = None) -> SessionOutcome:
        diagnostics = list(notes or [])
        if termination != "final_answer" and last_candidate is not None:
            diagnostics.append("last candidate:\n" + serialize_netlist(last_candidate))
        return SessionOutcome(final, transcript, iterations, termination, last_candidate,
                              diagnostics)

    while True:
        try:
            reply = client.complete(transcript, tools, cfg.temperature, cfg.top_p)
        except EndpointError as exc:
            log.error("endpoint failure: %s", exc)
            return finish("error", notes=[f"endpoint error: {exc}"])
        transcript.append(reply)
        if reply.tool_calls:
            if not cfg.tools_enabled or iterations >= cfg.max_iterations:
                text = ITERATION_LIMIT_TEXT if cfg.tools_enabled else "error: tools are disabled"
                for call in reply.tool_calls:
                    transcript.append(ChatMessage.from_result(ToolResult(call.id, text, False)))
                if cfg.tools_enabled:
                    return finish("iteration_cap", notes=[f"stopped after {iterations} iterations"])
            else:
                iterations += 1
                before = state.submissions
                for call in reply.tool_calls:
                    transcript.append(ChatMessage.from_result(execute_tool(state, call)))
                if state.submissions != before:
                    last_candidate = state.netlist
                continue
        n = extract_netlist_from_response(reply.content)
        if n is not None:
            return finish("final_answer", n)
        if not cfg.tools_enabled:
            return finish("iteration_cap", notes=["single turn produced no netlist"])
        if iterations >= cfg.max_iterations:
            return finish("iteration_cap", notes=[f"stopped after {iterations} iterations"])
        iterations += 1
        transcript.append(ChatMessage("user", REMINDER))
