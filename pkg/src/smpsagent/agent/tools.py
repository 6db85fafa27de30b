"""Tools the agent may call, and the simulate-then-read helper shared with the benchmark."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

from .. import measure
from ..engine import Engine, EngineError, simulate
from ..netlist import Netlist, NetlistError, parse_netlist, serialize_netlist
from ..rag import RetrievalIndex, render_hits, retrieve
from .protocol import MalformedToolArguments, ToolCall, ToolParam, ToolResult, ToolSpec

ITERATION_LIMIT_TEXT = "error: iteration limit reached; the tool call was not executed"


@lru_cache(maxsize=4096)
def _measure_deck(deck_text: str, engine: Engine, signal: str, kind: str) -> measure.Measurement:
    return measure.read_feature(simulate(parse_netlist(deck_text), engine), signal, kind)


def measure_netlist(n: Netlist, signal: str, kind: str,
                    engine: Engine = "reference") -> measure.Measurement:
    """Simulate ``n`` and apply one reading tool.

    The agent's simulate_and_read tool and the benchmark's verification both go
    through here, so what the model sees is exactly what gets scored.
    """
    kind = measure.normalize_kind(kind)
    return _measure_deck(serialize_netlist(n), engine, signal.strip(), kind)


@dataclass
class SessionState:
    netlist: Netlist
    engine: Engine = "reference"
    datasheet: Optional[RetrievalIndex] = None
    top_k: int = 20
    submissions: int = 0


SUBMIT = ToolSpec(
    "submit_netlist",
    "Store a complete SPICE netlist as the current design candidate. Later "
    "simulate_and_read calls run this netlist.",
    (ToolParam("netlist", "string", "Full netlist text ending with .end"),),
)
SIMULATE = ToolSpec(
    "simulate_and_read",
    "Run a transient simulation of the current candidate and read one feature "
    "of one signal. mean: time-averaged value in steady state. ripple: "
    "peak-to-peak value in steady state. switching_frequency: fundamental "
    "frequency from the spectrum. settle_time: first time the signal reaches "
    "90% of its steady-state mean.",
    (
        ToolParam("signal", "string", "Signal name such as V(out) or I(L1)"),
        ToolParam("kind", "string", "Feature to read", enum=measure.KINDS),
    ),
)
SEARCH = ToolSpec(
    "search_datasheet",
    "Search the attached datasheet and return the most relevant passages.",
    (ToolParam("query", "string", "What to look up"),),
)


def default_toolset(state: SessionState) -> list[ToolSpec]:
    tools = [SUBMIT, SIMULATE]
    if state.datasheet is not None:
        tools.append(SEARCH)
    return tools


def _submit(state: SessionState, args: dict) -> str:
    text = _string_arg(args, "netlist")
    n = parse_netlist(text)
    state.netlist = n
    state.submissions += 1
    return (f"netlist accepted ({len(n.components)} components); "
            "simulate_and_read now uses it")


def _simulate(state: SessionState, args: dict) -> str:
    m = measure_netlist(state.netlist, _string_arg(args, "signal"), _string_arg(args, "kind"),
                        state.engine)
    return str(m) + (f"\nnote: {m.diagnostics}" if m.diagnostics else "")


def _search(state: SessionState, args: dict) -> str:
    assert state.datasheet is not None
    query = _string_arg(args, "query")
    k = min(state.top_k, state.datasheet.cfg.max_chunks)
    return render_hits(retrieve(query, state.datasheet, k))


def _string_arg(args: dict, name: str) -> str:
    value = args.get(name)
    if not isinstance(value, str) or not value.strip():
        raise MalformedToolArguments(f"missing or non-string argument {name!r}")
    return value


_HANDLERS: dict[str, Callable[[SessionState, dict], str]] = {
    SUBMIT.name: _submit,
    SIMULATE.name: _simulate,
    SEARCH.name: _search,
}


def execute_tool(state: SessionState, call: ToolCall) -> ToolResult:
    """Run one tool call. Failures become unsuccessful results, never exceptions."""
    offered = {t.name for t in default_toolset(state)}
    if call.name not in offered:
        return ToolResult(call.id, f"error: unknown tool {call.name!r}; available: "
                                   f"{', '.join(sorted(offered))}", False)
    try:
        return ToolResult(call.id, _HANDLERS[call.name](state, call.arguments))
    except (MalformedToolArguments, NetlistError, EngineError, measure.MeasureError,
            ValueError) as exc:
        return ToolResult(call.id, f"error: {type(exc).__name__}: {exc}", False)
