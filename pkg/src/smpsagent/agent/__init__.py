"""Tool-calling agent loop, LLM clients and scripted stand-in agents."""
from .clients import ChatClient, ChatCompletionsClient, ScriptedClient
from .protocol import (
    AgentError,
    ChatMessage,
    EndpointError,
    MalformedToolArguments,
    ToolCall,
    ToolParam,
    ToolResult,
    ToolSpec,
    check_transcript,
)
from .scripted import AGENTS, GreedyBisectionAgent, NoOpAgent, OracleAgent, oracle_netlist
from .session import (
    SessionConfig,
    SessionOutcome,
    build_system_prompt,
    extract_netlist_from_response,
    load_transcript,
    run_session,
)
from .tools import SessionState, default_toolset, execute_tool, measure_netlist

__all__ = [
    "AGENTS", "AgentError", "ChatClient", "ChatCompletionsClient", "ChatMessage",
    "EndpointError", "GreedyBisectionAgent", "MalformedToolArguments", "NoOpAgent",
    "OracleAgent", "ScriptedClient", "SessionConfig", "SessionOutcome", "SessionState",
    "ToolCall", "ToolParam", "ToolResult", "ToolSpec", "build_system_prompt",
    "check_transcript", "default_toolset", "execute_tool", "extract_netlist_from_response",
    "load_transcript", "measure_netlist", "oracle_netlist", "run_session",
]
