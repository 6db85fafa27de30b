from __future__ import annotations

import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from ..netlist import Directive, Netlist, format_value, serialize_netlist
from .dataset import Dataset, EngineError
from .rawfile import parse_raw
from .reference import TransientSpec

log = logging.getLogger(__name__)

ENGINE_ENV = "SMPSAGENT_ENGINE_CMD"
# ngspice needs -r to write a raw file; LTspice writes <deck>.raw next to the deck
NGSPICE_TEMPLATE = "ngspice -b -r {raw_path} {netlist_path}"
LTSPICE_TEMPLATE = "LTspice -b {netlist_path}"


class EngineNotFound(EngineError):
    pass


class EngineTimeout(EngineError):
    pass


class EngineFailure(EngineError):
    def __init__(self, message: str, stderr: str = "", returncode: Optional[int] = None):
        super().__init__(message + (f"\n{stderr.strip()}" if stderr.strip() else ""))
        self.stderr = stderr
        self.returncode = returncode


class RawMissing(EngineError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    command_template: str = NGSPICE_TEMPLATE
    working_dir: Optional[Path] = None
    timeout: float = 120.0
    keep_artifacts: bool = False

    def __post_init__(self):
        if "{netlist_path}" not in self.command_template:
            raise ValueError("command template must contain {netlist_path}")

    @classmethod
    def from_env(cls, **overrides) -> "EngineConfig":
        template = os.environ.get(ENGINE_ENV)
        if template:
            overrides.setdefault("command_template", template)
        return cls(**overrides)


def with_tran(n: Netlist, spec: TransientSpec) -> Netlist:
    """Add a ``.tran`` card built from ``spec`` unless the deck has one."""
    if n.directives("tran"):
        return n
    step = spec.t_step_hint or spec.t_stop / 10000
    args = f"{format_value(step)} {format_value(spec.t_stop)} {format_value(spec.t_start_record)}"
    return Netlist(n.cards + (Directive("tran", args),), n.end_present)


@dataclass(frozen=True)
class SimulationJob:
    netlist: Netlist
    analysis: TransientSpec
    # "reference" or an EngineConfig for an external simulator
    engine: Union[str, EngineConfig] = "reference"


def run_external(job: SimulationJob, cfg: EngineConfig) -> Dataset:
    """Simulate with an external SPICE executable and parse its raw output."""
    spec = job.analysis
    deck = with_tran(job.netlist, spec)
    workdir = Path(tempfile.mkdtemp(prefix="smpsagent-", dir=cfg.working_dir))
    netlist_path = workdir / "deck.cir"
    raw_path = workdir / "deck.raw"
    netlist_path.write_text(serialize_netlist(deck), encoding="utf-8")
    argv = [
        tok.replace("{netlist_path}", str(netlist_path)).replace("{raw_path}", str(raw_path))
        for tok in shlex.split(cfg.command_template)
    ]
    try:
        if not argv or shutil.which(argv[0]) is None:
            raise EngineNotFound(f"simulator executable {argv[0] if argv else ''!r} not found")
        log.debug("running %s", argv)
        try:
            proc = subprocess.run(argv, cwd=workdir, capture_output=True, timeout=cfg.timeout)
        except subprocess.TimeoutExpired:
            raise EngineTimeout(f"simulation exceeded {cfg.timeout:g}s and was killed") from None
        except OSError as exc:
            raise EngineNotFound(str(exc)) from None
        stderr = proc.stderr.decode("utf-8", errors="replace")
        if proc.returncode != 0:
            raise EngineFailure(f"simulator exited with status {proc.returncode}",
                                stderr, proc.returncode)
        if not raw_path.exists():
            raise RawMissing(f"simulator finished but wrote no raw file at {raw_path}")
        ds = parse_raw(raw_path.read_bytes())
    finally:
        if not cfg.keep_artifacts:
            shutil.rmtree(workdir, ignore_errors=True)
    if spec.t_start_record > 0:
        ds = ds.window(spec.t_start_record)
    return ds
