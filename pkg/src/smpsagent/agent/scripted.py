"""Deterministic stand-ins for an LLM, used by tests and the offline benchmark.

Each agent is built per benchmark question (it knows the target) and speaks the
same chat protocol as a live endpoint:

* OracleAgent computes the answer from the ideal buck equations in one turn.
* NoOpAgent returns the input deck unchanged.
* GreedyBisectionAgent tunes a single component by log-space bisection, one
  submit + simulate round per iteration, and answers with its best candidate.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Optional

from ..engine import PatternMismatch, match_buck
from ..engine.reference import CONTROLLER_SUBCKT, controller_params, pulse_timing
from ..netlist import (
    Component,
    Netlist,
    NetlistError,
    add_component,
    format_value,
    resolve_pin,
    rewire_pin,
    serialize_netlist,
    set_component_text,
    set_component_value,
)
from .protocol import ChatMessage, ToolCall


def _answer(n: Netlist, note: str = "") -> ChatMessage:
    text = (note + "\n\n" if note else "") + f"```spice\n{serialize_netlist(n)}```"
    return ChatMessage("assistant", text)


def _target(q: Any) -> Optional[float]:
    return None if q.target is None else float(q.target.value)


class NoOpAgent:
    def __init__(self, question: Any, initial: Netlist, cfg: Any = None):
        self.initial = initial

    def complete(self, messages, tools, temperature=1.0, top_p=1.0) -> ChatMessage:
        return _answer(self.initial, "The circuit already meets the requirement.")


# ---- deck surgery shared by the oracle and the greedy agent ----

def _controller(n: Netlist) -> Optional[Component]:
    for c in n.components:
        if c.kind == "X" and (c.subckt or "").upper() == CONTROLLER_SUBCKT:
            return c
    return None


def _driver(n: Netlist) -> Component:
    for c in n.components:
        if c.kind == "V" and pulse_timing(c):
            return c
    raise PatternMismatch("no PULSE source sets the duty cycle")


def _pulse_fields(c: Component) -> list[str]:
    m = re.match(r"^pulse\s*\(?([^)]*)\)?", c.value.strip(), re.IGNORECASE)
    assert m
    return m.group(1).replace(",", " ").split()


def _set_pulse(n: Netlist, name: str, ton: Optional[float] = None,
               per: Optional[float] = None) -> Netlist:
    fields = _pulse_fields(n.component(name))
    if ton is not None:
        fields[5] = format_value(ton)
    if per is not None:
        fields[6] = format_value(per)
    return set_component_text(n, name, f"PULSE({' '.join(fields)})")


def _set_param(n: Netlist, name: str, key: str, value: float) -> Netlist:
    comp = n.component(name)
    toks = comp.value.split()
    rendered = f"{key}={format_value(value)}"
    for i, tok in enumerate(toks):
        if tok.lower().startswith(key.lower() + "="):
            toks[i] = rendered
            break
    else:
        toks.append(rendered)
    return set_component_text(n, name, " ".join(toks))


def _divider(n: Netlist, out: str, fb: str) -> tuple[Component, Component]:
    def between(a: str, b: str) -> Component:
        for c in n.components:
            if c.kind == "R" and {x.upper() for x in c.nodes} == {a, b}:
                return c
        raise PatternMismatch(f"no resistor between {a} and {b}")
    return between(out, fb), between(fb, "0")


def _signal_node(signal: str) -> str:
    m = re.match(r"^\s*[vi]\((.*)\)\s*$", signal, re.IGNORECASE)
    return (m.group(1) if m else signal).strip().upper()


@dataclass
class Knob:
    label: str
    get: Callable[[Netlist], float]
    set: Callable[[Netlist, float], Netlist]
    sign: int
    upper: Optional[float] = None


def choose_knob(signal: str, kind: str, n: Netlist) -> Optional[Knob]:
    """The single component value that steers (signal, kind), with its direction."""
    try:
        m = match_buck(n)
    except PatternMismatch:
        return None
    node = _signal_node(signal)
    ctrl = _controller(n)
    src = m.source

    def value_of(name: str) -> Callable[[Netlist], float]:
        return lambda deck: deck.component(name).quantity.magnitude

    def setter(name: str) -> Callable[[Netlist, float], Netlist]:
        return lambda deck, x: set_component_value(deck, name, x)

    if kind == "mean" and node == m.in_node.upper() and m.in_node != m.sw_node:
        upper = controller_params(ctrl)["vinmax"] if ctrl else None
        return Knob(src, value_of(src), setter(src), +1, upper)
    if kind == "mean" and node == m.out_node.upper():
        if ctrl is not None:
            top, _ = _divider(n, m.out_node.upper(), ctrl.nodes[2].upper())
            return Knob(top.name, value_of(top.name), setter(top.name), +1)
        drv = _driver(n).name
        period = pulse_timing(n.component(drv))[3]
        return Knob(f"{drv} on-time", lambda d: pulse_timing(d.component(drv))[2],
                    lambda d, x: _set_pulse(d, drv, ton=x), +1, 0.98 * period)
    if kind == "ripple" and signal.strip().upper() == f"I({m.inductor.upper()})":
        return Knob(m.inductor, value_of(m.inductor), setter(m.inductor), -1)
    if kind == "ripple" and node == m.out_node.upper():
        cap = next(c for c in n.components if c.kind == "C")
        return Knob(cap.name, value_of(cap.name), setter(cap.name), -1)
    if kind == "switching_frequency":
        if ctrl is not None:
            name = ctrl.name
            return Knob(f"{name} fsw", lambda d: controller_params(d.component(name))["fsw"],
                        lambda d, x: _set_param(d, name, "fsw", x), +1)
        drv = _driver(n).name

        def set_period(d: Netlist, per: float) -> Netlist:
            _, _, ton, old = pulse_timing(d.component(drv))
            return _set_pulse(d, drv, ton=ton * per / old, per=per)
        return Knob(f"{drv} period", lambda d: pulse_timing(d.component(drv))[3], set_period, -1)
    return None


# ---- oracle ----

def oracle_netlist(q: Any, n: Netlist) -> Netlist:
    """Closed-form answer for the ideal buck decks (CCM equations)."""
    tool = q.verification.tool
    args = q.verification.args
    if tool == "pin_connected_via":
        return _oracle_topology(n, args)
    m = match_buck(n)
    p = m.params
    t = _target(q)
    node = _signal_node(args.get("signal", ""))
    ctrl = _controller(n)
    v_out = p.D * p.v_in
    if tool == "mean" and node == m.in_node.upper():
        return set_component_value(n, m.source, t)
    if tool == "mean" and node == m.out_node.upper():
        if ctrl is not None:
            prm = controller_params(ctrl)
            top, bottom = _divider(n, m.out_node.upper(), ctrl.nodes[2].upper())
            r_bot = bottom.quantity.magnitude
            n = set_component_value(n, top.name, r_bot * (t / prm["vref"] - 1))
            if t > prm["dmax"] * p.v_in:
                n = set_component_value(n, m.source, prm["vinmax"])
            return n
        drv = _driver(n)
        return _set_pulse(n, drv.name, ton=t / p.v_in * p.period)
    if tool == "ripple" and node == m.out_node.upper():
        ripple_il = v_out * (1 - p.D) / (p.L * p.f_s)
        cap = next(c for c in n.components if c.kind == "C")
        return set_component_value(n, cap.name, ripple_il / (8 * p.f_s * t))
    if tool == "ripple":
        return set_component_value(n, m.inductor, v_out * (1 - p.D) / (t * p.f_s))
    if tool == "switching_frequency":
        if ctrl is not None:
            return _set_param(n, ctrl.name, "fsw", t)
        drv = _driver(n)
        return _set_pulse(n, drv.name, ton=p.D / t, per=1 / t)
    raise PatternMismatch(f"oracle has no rule for {tool} on {args}")


def _oracle_topology(n: Netlist, args: dict) -> Netlist:
    pin_ref, target_ref = args["pin"], args["target"]
    target = resolve_pin(n, target_ref)
    node = resolve_pin(n, pin_ref)
    if ":" in pin_ref and (node == "0" or _shared(n, node)):
        comp, _, index = pin_ref.rpartition(":")
        node = f"{comp}_P{index}".upper()
        n = rewire_pin(n, comp, int(index) - 1, node)
    kind = args.get("kind", "R").upper()
    taken = {c.name.upper() for c in n.components}
    i = 1
    while f"{kind}{i}".upper() in taken:
        i += 1
    value = format_value(float(args["value"]))
    return add_component(n, f"{kind}{i} {node} {target} {value}")


def _shared(n: Netlist, node: str) -> bool:
    users = sum(1 for c in n.components for x in c.nodes if x.upper() == node.upper())
    return users > 1


class OracleAgent:
    def __init__(self, question: Any, initial: Netlist, cfg: Any = None):
        self.question = question
        self.initial = initial

    def complete(self, messages, tools, temperature=1.0, top_p=1.0) -> ChatMessage:
        return _answer(oracle_netlist(self.question, self.initial), "Computed from the design equations.")


# ---- greedy bisection ----

def _reading(messages, call_id: str) -> Optional[float]:
    for m in reversed(messages):
        if m.role == "tool" and m.tool_call_id == call_id:
            if not m.success:
                return None
            try:
                return float(m.content.split()[1])
            except (IndexError, ValueError):
                return None
    return None


class GreedyBisectionAgent:
    SPAN = 8.0

    def __init__(self, question: Any, initial: Netlist, cfg: Any = None):
        self.initial = initial
        self.budget = cfg.max_iterations if cfg is not None else 8
        self.target = _target(question)
        self.tolerance = float(getattr(question, "tolerance_pct", 5.0) or 5.0) / 100
        args = question.verification.args
        self.signal = args.get("signal", "")
        self.kind = question.verification.tool
        self.knob = None
        if self.target is not None and self.kind != "pin_connected_via":
            try:
                self.knob = choose_knob(self.signal, self.kind, initial)
            except (NetlistError, PatternMismatch):
                self.knob = None
        self.best = initial
        self.best_error = math.inf
        self.probes = 0
        self.pending: Optional[tuple[float, Netlist, str]] = None
        if self.knob is not None:
            x0 = self.knob.get(initial)
            self.lo = math.log(x0 / self.SPAN)
            self.hi = math.log(x0 * self.SPAN)
            if self.knob.upper is not None:
                self.hi = min(self.hi, math.log(self.knob.upper))
                self.lo = min(self.lo, self.hi - math.log(self.SPAN))
            self.next_x = x0

    def _update(self, messages) -> None:
        x, deck, call_id = self.pending
        self.pending = None
        value = _reading(messages, call_id)
        if value is not None:
            error = abs(value - self.target) / abs(self.target)
            if error < self.best_error:
                self.best, self.best_error = deck, error
        lx = math.log(x)
        if value is None or self.knob.sign * (value - self.target) > 0:
            self.hi = lx
        else:
            self.lo = lx
        self.next_x = math.exp(0.5 * (self.lo + self.hi))

    def complete(self, messages, tools, temperature=1.0, top_p=1.0) -> ChatMessage:
        if self.pending is not None:
            self._update(messages)
        done = (self.knob is None or not tools or self.best_error <= self.tolerance
                or self.probes >= self.budget)
        if done:
            return _answer(self.best, f"Best candidate after {self.probes} simulations.")
        x = self.next_x
        deck = self.knob.set(self.initial, x)
        self.probes += 1
        submit = ToolCall.make(f"greedy_{self.probes}_0", "submit_netlist",
                               {"netlist": serialize_netlist(deck)})
        read = ToolCall.make(f"greedy_{self.probes}_1", "simulate_and_read",
                             {"signal": self.signal, "kind": self.kind})
        self.pending = (x, deck, read.id)
        return ChatMessage("assistant", f"Trying {self.knob.label} = {format_value(x)}.",
                           (submit, read))


AGENTS = {"oracle": OracleAgent, "noop": NoOpAgent, "greedy": GreedyBisectionAgent}
