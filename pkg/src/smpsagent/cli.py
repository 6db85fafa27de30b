"""Command-line entry point.

Exit codes:
  0  success
  1  unexpected internal error
  2  invalid input: netlist, question file, config, empty datasheet
  3  measurement failed or unknown signal
  4  agent session stopped at the iteration cap
  5  simulation engine failure
  6  LLM endpoint failure
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, measure
from .agent import (
    AGENTS,
    ChatCompletionsClient,
    EndpointError,
    ScriptedClient,
    SessionConfig,
    run_session,
)
from .agent.tools import measure_netlist
from .benchmark import (
    BenchmarkError,
    aggregate,
    load_questions,
    read_results,
    run_benchmark,
    write_report,
)
from .engine import (
    EngineConfig,
    EngineError,
    UnknownSignal,
    parse_raw,
    simulate,
    write_raw,
)
from .engine.external import NGSPICE_TEMPLATE
from .netlist import Comment, Component, Directive, NetlistError, parse_netlist, serialize_netlist
from .rag import RetrievalConfig, RetrievalError, load_datasheet

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_MEASURE, EXIT_CAP, EXIT_ENGINE, EXIT_ENDPOINT = range(7)

CONFIG_ENV = "SMPSAGENT_CONFIG"
DEFAULT_CONFIG = Path("~/.config/smpsagent/config.json")
# env var -> CliConfig field; env vars win over flags and the config file
ENV_FIELDS = {
    "SMPSAGENT_ENGINE": "engine",
    "SMPSAGENT_ENGINE_CMD": "engine_cmd",
    "SMPSAGENT_BASE_URL": "base_url",
    "SMPSAGENT_MODEL": "model",
    "SMPSAGENT_MAX_ITER": "max_iterations",
    "SMPSAGENT_OUTPUT_DIR": "output_dir",
}

log = logging.getLogger("smpsagent")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    engine: str = "reference"
    engine_cmd: str = NGSPICE_TEMPLATE
    engine_timeout: float = 120.0
    base_url: Optional[str] = None
    model: str = "gpt-4o"
    api_key_env: str = "SMPSAGENT_API_KEY"
    max_iterations: int = 8
    temperature: float = 1.0
    top_p: float = 1.0
    output_dir: str = "."

    def __post_init__(self):
        if self.engine not in ("reference", "external"):
            raise ConfigError(f"engine must be 'reference' or 'external', not {self.engine!r}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")

    def engine_selection(self):
        if self.engine == "reference":
            return "reference"
        try:
            return EngineConfig(self.engine_cmd, timeout=self.engine_timeout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def session(self, **overrides) -> SessionConfig:
        return SessionConfig(max_iterations=self.max_iterations, temperature=self.temperature,
                             top_p=self.top_p, engine=self.engine_selection(), **overrides)

    def live_client(self) -> ChatCompletionsClient:
        if not self.base_url:
            raise ConfigError("no LLM endpoint: set SMPSAGENT_BASE_URL, pass --base-url, or put "
                              "base_url in the config file (or use --scripted / a scripted agent)")
        return ChatCompletionsClient(self.base_url, os.environ.get(self.api_key_env, ""),
                                     self.model)


def _coerce(name: str, value):
    kind = {f.name: f.type for f in fields(CliConfig)}[name]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    return value


def resolve_config(args: argparse.Namespace, env=None) -> CliConfig:
    """Config file, then command-line flags, then environment variables."""
    env = os.environ if env is None else env
    values: dict = {}
    path = args.config or env.get(CONFIG_ENV)
    if path is None and DEFAULT_CONFIG.expanduser().is_file():
        path = str(DEFAULT_CONFIG.expanduser())
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        if "api_key" in data:
            raise ConfigError("credentials belong in environment variables, not the config file")
        known = {f.name for f in fields(CliConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
        values.update(data)
    for name in ("engine", "engine_cmd", "base_url", "model", "max_iterations", "output_dir"):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    for var, name in ENV_FIELDS.items():
        if env.get(var):
            values[name] = env[var]
    return CliConfig(**{k: _coerce(k, v) for k, v in values.items()})


def _card_json(card) -> dict:
    if isinstance(card, Comment):
        return {"type": "comment", "text": card.text}
    if isinstance(card, Directive):
        return {"type": "directive", "keyword": card.keyword, "args": card.args}
    assert isinstance(card, Component)
    d = {"type": "component", "name": card.name, "kind": card.kind, "nodes": list(card.nodes),
         "value": card.value}
    if card.kind == "X":
        d["subckt"] = card.subckt
    q = card.quantity
    if q is not None:
        d["magnitude"] = q.magnitude
        d["unit"] = q.unit
    return d


def _read_deck(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_netlist(text)


def cmd_parse(args, cfg: CliConfig) -> int:
    n = _read_deck(args.deck)
    if args.json:
        print(json.dumps({"title": n.title, "end_present": n.end_present,
                          "cards": [_card_json(c) for c in n.cards]}, indent=2))
    else:
        sys.stdout.write(serialize_netlist(n))
    print(f"{len(n.components)} components, {len(n.cards)} cards", file=sys.stderr)
    return EXIT_OK


def _is_raw(path: Path) -> bool:
    with path.open("rb") as fh:
        head = fh.read(16)
    return head.startswith((b"Title:", b"\xff\xfeT\x00", b"T\x00i\x00"))


def cmd_simulate(args, cfg: CliConfig) -> int:
    n = _read_deck(args.deck)
    ds = simulate(n, cfg.engine_selection())
    if args.output:
        Path(args.output).write_bytes(write_raw(ds, binary=not args.ascii))
    print(f"{ds.n_points} points, {ds.time[0]:.6g}..{ds.time[-1]:.6g} s; "
          f"signals: {', '.join(ds.names[1:])}")
    return EXIT_OK


def cmd_measure(args, cfg: CliConfig) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    if _is_raw(path):
        m = measure.read_feature(parse_raw(path.read_bytes()), args.signal, args.kind)
    else:
        m = measure_netlist(_read_deck(args.input), args.signal, args.kind,
                            cfg.engine_selection())
    print(m)
    if m.diagnostics:
        print(f"note: {m.diagnostics}", file=sys.stderr)
    return EXIT_OK


def cmd_ask(args, cfg: CliConfig) -> int:
    n = _read_deck(args.deck)
    prompt = args.prompt
    if args.prompt_file:
        prompt = Path(args.prompt_file).read_text(encoding="utf-8")
    if not prompt:
        raise ConfigError("give a prompt argument or --prompt-file")
    index = None
    if args.rag:
        index = load_datasheet(args.rag, RetrievalConfig())
    session = cfg.session(datasheet=args.rag, tools_enabled=not args.no_tools)
    if args.max_iter is not None:
        session = replace(session, max_iterations=args.max_iter)
    client = ScriptedClient.load(args.scripted) if args.scripted else cfg.live_client()
    outcome = run_session(prompt, n, session, client, index)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.deck).stem
    deck_out = Path(args.output) if args.output else outdir / f"{stem}.adapted.cir"
    transcript = Path(args.transcript) if args.transcript else outdir / f"{stem}.transcript.json"
    outcome.save(transcript)
    print(f"termination: {outcome.termination} after {outcome.iterations_used} iterations")
    print(f"transcript: {transcript}")
    if outcome.termination == "final_answer":
        deck_out.write_text(serialize_netlist(outcome.final_netlist), encoding="utf-8")
        print(f"netlist: {deck_out}")
        return EXIT_OK
    for note in outcome.diagnostics:
        print(note, file=sys.stderr)
    return EXIT_CAP if outcome.termination == "iteration_cap" else EXIT_ENDPOINT


def cmd_bench(args, cfg: CliConfig) -> int:
    questions = load_questions(args.questions)
    if args.only:
        wanted = set(args.only)
        questions = [q for q in questions if q.id in wanted]
        if not questions:
            raise ConfigError("--only matched no question ids")
    if args.agent == "live":
        client = cfg.live_client()
        factory = lambda q, n, s: client  # noqa: E731
    else:
        factory = AGENTS[args.agent]
    session = cfg.session(tools_enabled=not args.no_tools)
    outdir = Path(args.out or cfg.output_dir)
    report = run_benchmark(questions, factory, session, args.runs, args.workers,
                           outdir / "transcripts" if args.transcripts else None)
    paths = write_report(report, outdir)
    _print_summary(report)
    print(f"report: {paths['table']}")
    return EXIT_OK


def _print_summary(report) -> None:
    print(f"solve_rate: {report.solve_rate:.1f}")
    if report.solve_rate_ci is not None:
        lo, hi = report.solve_rate_ci
        print(f"solve_rate_ci_95: ({lo:.1f}, {hi:.1f})")
    print("median_ape: " + ("n/a" if report.median_ape is None else f"{report.median_ape:.2f}"))


def cmd_report(args, cfg: CliConfig) -> int:
    src = Path(args.results)
    if src.is_dir():
        src = src / "results.csv"
    if not src.is_file():
        raise ConfigError(f"no results file at {src}")
    report = aggregate(read_results(src))
    if args.json:
        print(json.dumps(report.summary(), indent=2))
    else:
        sys.stdout.write(report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="smpsagent",
        description="Edit, simulate and measure SMPS netlists; run LLM design sessions "
                    "and the benchmark.",
        epilog="Credentials are read from environment variables only "
               "(SMPSAGENT_API_KEY by default).",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON config file (default: $SMPSAGENT_CONFIG or "
                                     "~/.config/smpsagent/config.json)")
    p.add_argument("--engine", choices=("reference", "external"),
                   help="simulator: built-in ideal buck or an external SPICE binary")
    p.add_argument("--engine-cmd", dest="engine_cmd",
                   help="external simulator command with {netlist_path} and {raw_path}")
    p.add_argument("--base-url", dest="base_url", help="chat-completions endpoint base URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--output-dir", dest="output_dir", help="where results are written")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("parse", help="parse a deck and print it normalized")
    s.add_argument("deck")
    s.add_argument("--json", action="store_true", help="print a structured card listing")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("simulate", help="run a transient simulation")
    s.add_argument("deck")
    s.add_argument("-o", "--output", help="write the waveforms to this raw file")
    s.add_argument("--ascii", action="store_true", help="write an ASCII raw file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("measure", help="read one feature from a deck or raw file")
    s.add_argument("input", help="netlist (simulated first) or raw waveform file")
    s.add_argument("signal", help="signal name, e.g. V(out) or I(L1)")
    s.add_argument("kind", choices=measure.KINDS)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("ask", help="run one agent session on a deck")
    s.add_argument("deck")
    s.add_argument("prompt", nargs="?", default="", help="design task")
    s.add_argument("--prompt-file", help="read the design task from a file")
    s.add_argument("--rag", metavar="DATASHEET", help="plain-text datasheet to search")
    s.add_argument("--max-iter", type=int, help="tool-iteration budget")
    s.add_argument("--scripted", metavar="SCRIPT", help="replay a scripted client file")
    s.add_argument("--no-tools", action="store_true", help="single turn without tools")
    s.add_argument("-o", "--output", help="adapted netlist path")
    s.add_argument("--transcript", help="transcript JSON path")
    s.set_defaults(func=cmd_ask)

    s = sub.add_parser("bench", help="run the benchmark on a question file")
    s.add_argument("questions")
    s.add_argument("--agent", choices=("oracle", "noop", "greedy", "live"), default="oracle")
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--only", nargs="+", metavar="ID", help="restrict to these question ids")
    s.add_argument("--no-tools", action="store_true", help="agents answer without tools")
    s.add_argument("--transcripts", action="store_true", help="save session transcripts")
    s.add_argument("--out", help="report directory (default: --output-dir)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="re-aggregate a results.csv")
    s.add_argument("results", help="results.csv or the directory holding it")
    s.add_argument("--json", action="store_true", help="print the summary as JSON")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except NetlistError as exc:
        where = f"line {exc.line}: " if getattr(exc, "line", None) else ""
        print(f"error: {where}{exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, BenchmarkError, RetrievalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (UnknownSignal, measure.MeasureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEASURE
    except EngineError as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except EndpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except Exception:  # noqa: BLE001
        log.exception("unexpected failure")
        return EXIT_INTERNAL

