"""Transient simulation: the built-in ideal-buck engine or an external SPICE binary."""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Union

from ..netlist import Netlist, serialize_netlist, parse_netlist
from .dataset import Dataset, EngineError, NonMonotonicTime, UnknownSignal, Variable
from .external import (
    EngineConfig,
    EngineFailure,
    EngineNotFound,
    EngineTimeout,
    RawMissing,
    SimulationJob,
    run_external,
    with_tran,
)
from .rawfile import HeaderMalformed, PayloadSizeMismatch, parse_raw, write_raw
from .reference import (
    BuckMatch,
    BuckParams,
    PatternMismatch,
    StepTooCoarse,
    TransientSpec,
    detect_buck_pattern,
    match_buck,
    run_reference_buck,
    transient_from_deck,
)

__all__ = [
    "BuckMatch", "BuckParams", "Dataset", "Engine", "EngineConfig", "EngineError", "EngineFailure",
    "EngineNotFound", "EngineTimeout", "HeaderMalformed", "NonMonotonicTime",
    "PatternMismatch", "PayloadSizeMismatch", "RawMissing", "SimulationJob",
    "StepTooCoarse", "TransientSpec", "UnknownSignal", "Variable", "detect_buck_pattern",
    "match_buck", "parse_raw", "run_external", "run_reference_buck", "simulate",
    "transient_from_deck", "with_tran", "write_raw",
]

Engine = Union[str, EngineConfig]


def _reference_names(m: BuckMatch) -> dict[str, str]:
    names = {
        "V(sw)": f"V({m.sw_node.lower()})",
        "V(out)": f"V({m.out_node.lower()})",
        "I(L)": f"I({m.inductor})",
        "I(Vin)": f"I({m.source})",
    }
    if m.in_node != m.sw_node:
        names["V(in)"] = f"V({m.in_node.lower()})"
    return names


@lru_cache(maxsize=16)
def _simulate_reference(deck_text: str, spec: Optional[TransientSpec]) -> Dataset:
    n = parse_netlist(deck_text)
    m = match_buck(n)
    if spec is None:
        spec = transient_from_deck(n, m.params.f_s)
    names = _reference_names(m)
    ds = run_reference_buck(m.params, spec)
    keep = [i for i, v in enumerate(ds.variables) if i == 0 or v.name in names]
    ds = Dataset([ds.variables[i] for i in keep], [ds.columns[i] for i in keep],
                 ds.title, ds.plotname)
    return ds.renamed(names)


def simulate(n: Netlist, engine: Engine = "reference",
             spec: Optional[TransientSpec] = None) -> Dataset:
    """Run a transient simulation of ``n``.

    With the reference engine, signals are named after the deck (``V(out)``,
    ``I(L1)``, ...) and the analysis defaults to the deck's ``.tran`` card.
    Results are memoized on the serialized deck; the engine is deterministic.
    """
    if isinstance(engine, EngineConfig):
        if spec is None:
            spec = _external_spec(n)
        return run_external(SimulationJob(n, spec, engine), engine)
    if engine != "reference":
        raise ValueError(f"unknown engine {engine!r}")
    return _simulate_reference(serialize_netlist(n), spec)


def _external_spec(n: Netlist) -> TransientSpec:
    if n.directives("tran"):
        return transient_from_deck(n, 1.0)
    try:
        return TransientSpec.default_for(match_buck(n).params.f_s)
    except PatternMismatch:
        raise EngineError("deck has no .tran card and no analysis was given") from None
