"""Question files, answer verification and aggregate scoring.

Question file layout (``schema`` must be ``smpsagent.questions/v1``)::

    {"schema": "smpsagent.questions/v1",
     "questions": [
       {"id": "buck-il-ripple-100m", "circuit": "buck.cir", "circuit_class": "buck",
        "category": "parameter_tuning",
        "prompt_template": "... current ripple of {target} ...",
        "target": {"value": 0.1, "unit": "A"}, "tolerance_pct": 5,
        "verification": {"tool": "ripple", "args": {"signal": "I(L1)"}}},
       {"id": "ctrl-pulse-skip", "circuit": "ctrl_mode.cir", "circuit_class": "controller",
        "category": "topology_adaption", "prompt_template": "...",
        "verification": {"tool": "pin_connected_via",
                         "args": {"pin": "XU1:5", "target": "XU1:6", "kind": "R", "value": 1e5}}}]}

Paths are resolved relative to the question file.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import jsonschema
from scipy import stats

from . import measure
from .agent import ChatClient, SessionConfig, SessionOutcome, measure_netlist, run_session
from .engine import Engine, EngineError
from .netlist import Netlist, NetlistError, connectivity_query, parse_netlist, resolve_pin
from .rag import RetrievalIndex, load_datasheet

log = logging.getLogger(__name__)

SCHEMA_ID = "smpsagent.questions/v1"
CATEGORIES = ("parameter_tuning", "topology_adaption")
PREDICATES = ("pin_connected_via",)
DEFAULT_TOLERANCE_PCT = 5.0
ALPHA = 0.05

QUESTION_SCHEMA = {
    "type": "object",
    "required": ["schema", "questions"],
    "properties": {
        "schema": {"const": SCHEMA_ID},
        "questions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "circuit", "prompt_template", "category", "verification"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "circuit": {"type": "string", "minLength": 1},
                    "circuit_class": {"type": "string"},
                    "datasheet": {"type": "string"},
                    "prompt_template": {"type": "string", "minLength": 1},
                    "category": {"enum": list(CATEGORIES)},
                    "target": {
                        "type": "object",
                        "required": ["value", "unit"],
                        "additionalProperties": False,
                        "properties": {"value": {"type": "number"}, "unit": {"type": "string"}},
                    },
                    "tolerance_pct": {"type": "number", "exclusiveMinimum": 0},
                    "verification": {
                        "type": "object",
                        "required": ["tool", "args"],
                        "additionalProperties": False,
                        "properties": {
                            "tool": {"enum": list(measure.KINDS) + list(PREDICATES)},
                            "args": {"type": "object"},
                        },
                    },
                },
            },
        },
    },
}


class BenchmarkError(Exception):
    pass


class SchemaViolation(BenchmarkError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("question file is invalid:\n  " + "\n  ".join(self.problems))


class MissingFixture(BenchmarkError):
    pass


@dataclass(frozen=True)
class Target:
    value: float
    unit: str


@dataclass(frozen=True)
class Verification:
    tool: str
    args: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class BenchmarkQuestion:
    id: str
    circuit: Path
    prompt_template: str
    category: str
    verification: Verification
    target: Optional[Target] = None
    tolerance_pct: Optional[float] = None
    circuit_class: str = "buck"
    datasheet: Optional[Path] = None

    @property
    def netlist(self) -> Netlist:
        return _read_deck(str(self.circuit))


@lru_cache(maxsize=64)
def _read_deck(path: str) -> Netlist:
    return parse_netlist(Path(path).read_text(encoding="utf-8"))


def _check_question(i: int, q: dict) -> list[str]:
    where = f"questions[{i}] ({q.get('id', '?')})"
    problems = []
    tool = q["verification"]["tool"]
    args = q["verification"]["args"]
    has_placeholder = "{target}" in q["prompt_template"]
    if q["category"] == "parameter_tuning":
        if "target" not in q:
            problems.append(f"{where}: parameter_tuning questions need a target")
        if tool not in measure.KINDS:
            problems.append(f"{where}: parameter_tuning must verify with a measurement, not {tool}")
        if not isinstance(args.get("signal"), str):
            problems.append(f"{where}: verification.args.signal is required")
    else:
        if "target" in q:
            problems.append(f"{where}: topology_adaption questions take no target")
        if "tolerance_pct" in q:
            problems.append(f"{where}: topology_adaption questions take no tolerance_pct")
        if tool not in PREDICATES:
            problems.append(f"{where}: topology_adaption must verify with a predicate, not {tool}")
        missing = [k for k in ("pin", "target", "kind", "value") if k not in args]
        if missing:
            problems.append(f"{where}: verification.args lacks {', '.join(missing)}")
        elif not isinstance(args["value"], (int, float)):
            problems.append(f"{where}: verification.args.value must be a number")
    if has_placeholder and "target" not in q:
        problems.append(f"{where}: prompt_template has {{target}} but no target is given")
    return problems


def load_questions(path: Union[str, Path]) -> list[BenchmarkQuestion]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation([f"{path}: not valid JSON ({exc})"]) from None
    validator = jsonschema.Draft202012Validator(QUESTION_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise SchemaViolation(
            [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors])
    problems = []
    seen = set()
    for i, q in enumerate(data["questions"]):
        problems += _check_question(i, q)
        if q["id"] in seen:
            problems.append(f"questions[{i}]: duplicate id {q['id']!r}")
        seen.add(q["id"])
    if problems:
        raise SchemaViolation(problems)
    out = []
    for q in data["questions"]:
        circuit = (path.parent / q["circuit"]).resolve()
        if not circuit.is_file():
            raise MissingFixture(f"{q['id']}: circuit file {circuit} does not exist")
        datasheet = None
        if "datasheet" in q:
            datasheet = (path.parent / q["datasheet"]).resolve()
            if not datasheet.is_file():
                raise MissingFixture(f"{q['id']}: datasheet {datasheet} does not exist")
        target = Target(float(q["target"]["value"]), q["target"]["unit"]) if "target" in q else None
        tol = q.get("tolerance_pct", DEFAULT_TOLERANCE_PCT if target is not None else None)
        out.append(BenchmarkQuestion(
            q["id"], circuit, q["prompt_template"], q["category"],
            Verification(q["verification"]["tool"], dict(q["verification"]["args"])),
            target, tol, q.get("circuit_class", "buck"), datasheet,
        ))
    return out


_PREFIXES = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k"), (1.0, ""),
             (1e-3, "m"), (1e-6, "µ"), (1e-9, "n"), (1e-12, "p"), (1e-15, "f")]


def format_quantity(value: float, unit: str) -> str:
    """Engineering notation for prompts: 0.1 A -> '100 mA'."""
    if value == 0:
        return f"0 {unit}"
    for scale, prefix in _PREFIXES:
        if abs(value) >= scale * (1 - 1e-12):
            return f"{value / scale:.4g} {prefix}{unit}"
    scale, prefix = _PREFIXES[-1]
    return f"{value / scale:.4g} {prefix}{unit}"


def render_prompt(q: BenchmarkQuestion) -> str:
    text = q.prompt_template
    if q.target is not None:
        text = text.replace("{target}", format_quantity(q.target.value, q.target.unit))
    return f"{text.rstrip()}\n\n```spice\n{q.netlist}```"


def pin_connected_via(n: Netlist, pin_node: str, target_node: str, kind: str,
                      value: float) -> bool:
    """True iff one component of ``kind`` whose value is within 1% of ``value``
    directly bridges the two nodes. Nodes may be given as ``XU1:5`` pin refs."""
    a, b = resolve_pin(n, pin_node), resolve_pin(n, target_node)
    return connectivity_query(n, a, b).direct_link(kind, value, rel_tol=0.01) is not None


def ape(actual: float, achieved: float) -> float:
    """Absolute percentage error of ``achieved`` against the target ``actual``."""
    return abs((actual - achieved) / actual) * 100.0


@dataclass
class EvalResult:
    question_id: str
    solved: bool
    category: str
    circuit_class: str = "buck"
    measured: Optional[measure.Measurement] = None
    ape: Optional[float] = None
    failure_reason: Optional[str] = None
    run: int = 0
    target: Optional[float] = None
    termination: str = ""
    iterations_used: int = 0


def evaluate_answer(q: BenchmarkQuestion, answer: Optional[Netlist],
                    engine: Engine = "reference") -> EvalResult:
    base = dict(category=q.category, circuit_class=q.circuit_class,
                target=q.target.value if q.target else None)
    if answer is None:
        return EvalResult(q.id, False, failure_reason="no parseable netlist in the answer", **base)
    args = q.verification.args
    if q.category == "topology_adaption":
        try:
            ok = pin_connected_via(answer, args["pin"], args["target"], args["kind"],
                                   float(args["value"]))
        except NetlistError as exc:
            return EvalResult(q.id, False, failure_reason=f"{type(exc).__name__}: {exc}", **base)
        return EvalResult(q.id, ok, failure_reason=None if ok else "required connection missing",
                          **base)
    assert q.target is not None and q.tolerance_pct is not None
    try:
        m = measure_netlist(answer, args["signal"], q.verification.tool, engine)
    except (EngineError, measure.MeasureError, NetlistError) as exc:
        return EvalResult(q.id, False,
                          failure_reason=f"simulation failed: {type(exc).__name__}: {exc}", **base)
    a, f = q.target.value, m.value
    solved = abs(f - a) <= q.tolerance_pct / 100.0 * abs(a)
    return EvalResult(q.id, solved, measured=m, ape=ape(a, f),
                      failure_reason=None if solved else "outside tolerance", **base)


AgentFactory = Callable[[BenchmarkQuestion, Netlist, SessionConfig], ChatClient]


@lru_cache(maxsize=16)
def _datasheet_index(path: str, cfg) -> RetrievalIndex:
    return load_datasheet(path, cfg)


def run_question(q: BenchmarkQuestion, factory: AgentFactory, cfg: SessionConfig, run: int = 0,
                 transcript_dir: Optional[Path] = None) -> EvalResult:
    initial = q.netlist
    session_cfg = replace(cfg, datasheet=q.datasheet) if q.datasheet else cfg
    index = None
    if session_cfg.datasheet is not None and session_cfg.tools_enabled:
        index = _datasheet_index(str(session_cfg.datasheet), session_cfg.retrieval)
    client = factory(q, initial, session_cfg)
    outcome: SessionOutcome = run_session(render_prompt(q), initial, session_cfg, client, index)
    if transcript_dir is not None:
        outcome.save(Path(transcript_dir) / f"run{run:02d}_{q.id}.json")
    result = evaluate_answer(q, outcome.final_netlist, session_cfg.engine)
    if outcome.final_netlist is None:
        result.failure_reason = f"session ended with {outcome.termination}"
    result.run = run
    result.termination = outcome.termination
    result.iterations_used = outcome.iterations_used
    return result


def mean_ci(values: Sequence[float], alpha: float = ALPHA) -> Optional[tuple[float, float]]:
    """Two-sided Student-t interval for the mean; None for fewer than two values."""
    n = len(values)
    if n < 2:
        return None
    mean = statistics.fmean(values)
    sd = statistics.stdev(values)
    if sd == 0:
        return (mean, mean)
    half = stats.t.ppf(1 - alpha / 2, n - 1) * sd / math.sqrt(n)
    return (mean - half, mean + half)


def _rate(results: Sequence[EvalResult]) -> float:
    return 100.0 * sum(r.solved for r in results) / len(results) if results else 0.0


@dataclass
class Report:
    results: list[EvalResult]
    n_runs: int
    run_rates: list[float]
    solve_rate: float
    median_ape: Optional[float]
    solve_rate_ci: Optional[tuple[float, float]]
    by_category: dict[str, float]
    by_circuit_class: dict[str, float]

    def summary(self) -> dict[str, Any]:
        return {
            "n_runs": self.n_runs,
            "n_questions": len(self.results) // max(self.n_runs, 1),
            "solve_rate": self.solve_rate,
            "solve_rate_ci": list(self.solve_rate_ci) if self.solve_rate_ci else None,
            "median_ape": self.median_ape,
            "run_solve_rates": self.run_rates,
            "by_category": self.by_category,
            "by_circuit_class": self.by_circuit_class,
        }

    def table(self) -> str:
        lines = [f"solve_rate: {self.solve_rate:.1f}"]
        if self.solve_rate_ci is not None:
            lo, hi = self.solve_rate_ci
            lines.append(f"solve_rate_ci_95: ({lo:.1f}, {hi:.1f})")
        lines.append("median_ape: " + ("n/a" if self.median_ape is None
                                       else f"{self.median_ape:.2f}"))
        lines.append(f"runs: {self.n_runs}")
        for title, table in (("category", self.by_category),
                             ("circuit_class", self.by_circuit_class)):
            lines.append("")
            lines.append(f"{title:<20} solve_rate")
            lines += [f"{k:<20} {v:.1f}" for k, v in table.items()]
        lines.append("")
        lines.append(f"{'run':>3}  {'question':<28} {'solved':<6} {'measured':>14} {'ape%':>8}  reason")
        for r in self.results:
            meas = f"{r.measured.value:.6g} {r.measured.unit}" if r.measured else "-"
            ape_s = f"{r.ape:.2f}" if r.ape is not None else "-"
            lines.append(f"{r.run:>3}  {r.question_id:<28} {'yes' if r.solved else 'no':<6} "
                         f"{meas:>14} {ape_s:>8}  {r.failure_reason or ''}")
        return "\n".join(lines) + "\n"


def aggregate(results: Sequence[EvalResult]) -> Report:
    """Reduce ordered per-question results (possibly from several runs) to a Report."""
    results = sorted(results, key=lambda r: (r.run, r.question_id))
    runs = sorted({r.run for r in results})
    run_rates = [_rate([r for r in results if r.run == k]) for k in runs]
    apes = [r.ape for r in results if r.category == "parameter_tuning" and r.ape is not None]

    def breakdown(key: Callable[[EvalResult], str]) -> dict[str, float]:
        groups: dict[str, list[EvalResult]] = {}
        for r in results:
            groups.setdefault(key(r), []).append(r)
        return {k: _rate(v) for k, v in sorted(groups.items())}

    return Report(
        list(results), len(runs), run_rates,
        statistics.fmean(run_rates) if run_rates else 0.0,
        statistics.median(apes) if apes else None,
        mean_ci(run_rates),
        breakdown(lambda r: r.category),
        breakdown(lambda r: r.circuit_class),
    )


def run_benchmark(questions: Sequence[BenchmarkQuestion], factory: AgentFactory,
                  cfg: SessionConfig = SessionConfig(), n_runs: int = 1, workers: int = 1,
                  transcript_dir: Optional[Union[str, Path]] = None) -> Report:
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if transcript_dir is not None:
        Path(transcript_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(run, q) for run in range(n_runs) for q in questions]

    def one(job: tuple[int, BenchmarkQuestion]) -> EvalResult:
        run, q = job
        log.info("run %d question %s", run, q.id)
        return run_question(q, factory, cfg, run,
                            Path(transcript_dir) if transcript_dir is not None else None)

    if workers == 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    return aggregate(results)


CSV_COLUMNS = ("run", "question_id", "category", "circuit_class", "solved", "target",
               "measured", "unit", "window_start", "window_end", "ape_pct", "termination",
               "iterations_used", "failure_reason")


def write_report(report: Report, outdir: Union[str, Path]) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"table": outdir / "report.txt", "csv": outdir / "results.csv",
             "summary": outdir / "summary.json"}
    paths["table"].write_text(report.table(), encoding="utf-8")
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.results:
            m = r.measured
            w.writerow([r.run, r.question_id, r.category, r.circuit_class, int(r.solved),
                        "" if r.target is None else repr(r.target),
                        "" if m is None else repr(m.value), "" if m is None else m.unit,
                        "" if m is None else repr(m.window.t_start),
                        "" if m is None else repr(m.window.t_end),
                        "" if r.ape is None else repr(r.ape), r.termination,
                        r.iterations_used, r.failure_reason or ""])
    paths["summary"].write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return paths


def read_results(path: Union[str, Path]) -> list[EvalResult]:
    """Load per-question rows written by :func:`write_report`."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            m = None
            if row["measured"]:
                w = measure.SteadyWindow(float(row["window_start"]), float(row["window_end"]))
                m = measure.Measurement("", float(row["measured"]), row["unit"], w)
            out.append(EvalResult(
                row["question_id"], row["solved"] == "1", row["category"], row["circuit_class"],
                m, float(row["ape_pct"]) if row["ape_pct"] else None,
                row["failure_reason"] or None, int(row["run"]),
                float(row["target"]) if row["target"] else None, row["termination"],
                int(row["iterations_used"]),
            ))
    return out
