"""SPICE deck model: parsing, serialization and small structural edits.

A deck is a flat, ordered list of cards. Component cards keep their node
tokens and an uninterpreted value tail (``10k``, ``PULSE(0 5 0 1n 1n 1u 2u)``,
a model name, ...). Edits never mutate; they return a new :class:`Netlist`.
"""
from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Iterable, Iterator, Optional, Union

SUFFIXES: dict[str, float] = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
    "g": 1e9,
    "t": 1e12,
}
# shortest-form rendering, largest factor first
_RENDER_ORDER = ["t", "g", "meg", "k", "", "m", "u", "n", "p", "f"]

KNOWN_KINDS = frozenset("RLCVIDSXMQ")
SCALAR_KINDS = frozenset("RLCVI")
# fixed node counts; X and the transistors are handled separately
_NODE_COUNT = {"R": 2, "L": 2, "C": 2, "V": 2, "I": 2, "D": 2, "S": 4, "Q": 3}

_VALUE_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkgt]|µ)?([a-z]*)$",
    re.IGNORECASE,
)
_DEFAULT_UNITS = {"R": "Ω", "L": "H", "C": "F", "V": "V", "I": "A"}


class NetlistError(Exception):
    """Base class for deck parsing and editing errors."""


class EmptyDeck(NetlistError):
    pass


class DuplicateName(NetlistError):
    pass


class MalformedCard(NetlistError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownComponent(NetlistError):
    pass


class NonScalarComponent(NetlistError):
    pass


class PinIndexOutOfRange(NetlistError):
    pass


class UnknownNode(NetlistError):
    pass


@dataclass(frozen=True)
class PhysicalValue:
    magnitude: float
    unit: Optional[str] = None

    def __str__(self) -> str:
        return format_value(self.magnitude) + (self.unit or "")


def parse_value(text: str) -> Optional[PhysicalValue]:
    """Parse a SPICE number such as ``10k``, ``4.7uF`` or ``1meg``.

    Returns None when the text is not a plain number (expressions, model
    names, source functions).
    """
    m = _VALUE_RE.match(text.strip())
    if not m:
        return None
    number, suffix, unit = m.groups()
    if not suffix:
        return PhysicalValue(float(number), unit or None)
    # scale in decimal so "10u" is exactly 1e-05
    exponent = round(math.log10(SUFFIXES["u" if suffix == "µ" else suffix.lower()]))
    return PhysicalValue(float(Decimal(number).scaleb(exponent)), unit or None)


def format_value(x: float) -> str:
    """Render ``x`` in the shortest suffix form (``10k``, ``1050k``, ``4.7u``).

    Ties go to the conventional mantissa range [1, 1000).
    """
    if x == 0:
        return "0"
    if not math.isfinite(x):
        raise ValueError(f"cannot render non-finite value {x!r}")
    candidates = []
    for suffix in _RENDER_ORDER:
        mantissa = x / SUFFIXES.get(suffix, 1.0)
        text = f"{mantissa:.13g}"
        if "e" in text:
            continue
        conventional = 1 <= abs(mantissa) < 1000
        candidates.append((len(text) + len(suffix), not conventional, text + suffix))
    if not candidates:
        return f"{x:.13g}"
    return min(candidates)[2]


@dataclass(frozen=True)
class Comment:
    text: str

    def render(self) -> str:
        return "*" + self.text


@dataclass(frozen=True)
class Directive:
    keyword: str
    args: str = ""

    def render(self) -> str:
        return f".{self.keyword} {self.args}".rstrip()


@dataclass(frozen=True)
class Component:
    """One element card.

    ``nodes`` holds the terminal nodes; for a subcircuit instance (kind X)
    these are the pins in order and ``value`` starts with the subcircuit
    name. ``opaque`` cards (unsupported first letter) keep their whole tail in
    ``value`` and expose no nodes.
    """

    name: str
    kind: str
    nodes: tuple[str, ...]
    value: str = ""
    opaque: bool = False

    @property
    def pins(self) -> tuple[str, ...]:
        return self.nodes

    @property
    def subckt(self) -> Optional[str]:
        if self.kind != "X" or not self.value:
            return None
        return self.value.split()[0]

    @property
    def quantity(self) -> Optional[PhysicalValue]:
        """Scalar value of R/L/C and DC sources, else None."""
        if self.kind not in SCALAR_KINDS or self.opaque:
            return None
        tokens = self.value.split()
        if len(tokens) == 2 and tokens[0].upper() == "DC" and self.kind in "VI":
            tokens = tokens[1:]
        if len(tokens) != 1:
            return None
        pv = parse_value(tokens[0])
        if pv is None:
            return None
        return PhysicalValue(pv.magnitude, pv.unit or _DEFAULT_UNITS.get(self.kind))

    def render(self) -> str:
        return " ".join([self.name, *self.nodes, *([self.value] if self.value else [])])


Card = Union[Component, Directive, Comment]


@dataclass(frozen=True)
class Netlist:
    cards: tuple[Card, ...]
    end_present: bool = True

    @property
    def title(self) -> str:
        """Text of a leading comment line, the usual place for a deck title."""
        if self.cards and isinstance(self.cards[0], Comment):
            return self.cards[0].text.strip()
        return ""

    @property
    def components(self) -> list[Component]:
        return [c for scope, c in _scoped_components(self.cards) if scope is None]

    def component(self, name: str) -> Component:
        key = name.upper()
        for c in self.components:
            if c.name.upper() == key:
                return c
        raise UnknownComponent(f"no component named {name!r}")

    def directives(self, keyword: str) -> list[Directive]:
        kw = keyword.lower().lstrip(".")
        return [c for c in self.cards if isinstance(c, Directive) and c.keyword == kw]

    def nodes(self) -> set[str]:
        """Upper-cased node names used by top-level components."""
        return {n.upper() for c in self.components for n in c.nodes}

    def __str__(self) -> str:
        return serialize_netlist(self)


def _scoped_components(cards: Iterable[Card]) -> Iterator[tuple[Optional[str], Component]]:
    """Yield (subckt scope or None, component) pairs."""
    scope: Optional[str] = None
    for card in cards:
        if isinstance(card, Directive):
            if card.keyword == "subckt":
                scope = (card.args.split() or ["?"])[0].upper()
            elif card.keyword == "ends":
                scope = None
        elif isinstance(card, Component):
            yield scope, card


def _logical_lines(text: str) -> Iterator[tuple[int, str]]:
    """Merge '+' continuation lines into their predecessor."""
    pending: Optional[tuple[int, str]] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("+"):
            if pending is None:
                raise MalformedCard("continuation line without a preceding card", lineno)
            pending = (pending[0], pending[1] + " " + line[1:].strip())
            continue
        if pending is not None:
            yield pending
        pending = (lineno, line)
    if pending is not None:
        yield pending


def parse_card(line: str, lineno: Optional[int] = None) -> Card:
    """Classify a single logical line."""
    line = line.strip()
    if line.startswith("*"):
        return Comment(line[1:].rstrip())
    if line.startswith("."):
        keyword, *args = line[1:].split()
        return Directive(keyword.lower(), " ".join(args))
    tokens = line.split()
    name = tokens[0]
    kind = name[0].upper()
    rest = tokens[1:]
    if kind not in KNOWN_KINDS:
        return Component(name, kind, (), " ".join(rest), opaque=True)
    if kind == "X":
        # last token that is not a parameter assignment names the subcircuit
        idx = len(rest) - 1
        while idx >= 0 and ("=" in rest[idx] or rest[idx].lower() == "params:"):
            idx -= 1
        if idx < 2:
            raise MalformedCard(f"{name}: subcircuit instance needs >=2 pins and a name", lineno)
        return Component(name, kind, tuple(rest[:idx]), " ".join(rest[idx:]))
    if kind == "M":
        n_nodes = 4 if len(rest) >= 5 else 3
    else:
        n_nodes = _NODE_COUNT[kind]
    if len(rest) < max(2, n_nodes):
        raise MalformedCard(f"{name}: expected {n_nodes} nodes, got {len(rest)} tokens", lineno)
    return Component(name, kind, tuple(rest[:n_nodes]), " ".join(rest[n_nodes:]))


def _check_unique(cards: Iterable[Card]) -> None:
    seen: set[tuple[Optional[str], str]] = set()
    for scope, comp in _scoped_components(cards):
        key = (scope, comp.name.upper())
        if key in seen:
            raise DuplicateName(f"duplicate component name {comp.name!r}")
        seen.add(key)


def parse_netlist(text: str) -> Netlist:
    cards: list[Card] = []
    end_present = False
    for lineno, line in _logical_lines(text):
        if end_present:
            # anything after .end is ignored by simulators
            break
        if line.lower() == ".end" or line.lower().startswith(".end "):
            end_present = True
            continue
        cards.append(parse_card(line, lineno))
    if not cards:
        raise EmptyDeck("deck contains no cards")
    _check_unique(cards)
    return Netlist(tuple(cards), end_present)


def serialize_netlist(n: Netlist) -> str:
    lines = [c.render() for c in n.cards]
    if n.end_present:
        lines.append(".end")
    return "\n".join(lines) + "\n"


def _index_of(n: Netlist, name: str) -> int:
    key = name.upper()
    for i, comp in _indexed_top_components(n):
        if comp.name.upper() == key:
            return i
    raise UnknownComponent(f"no component named {name!r}")


def _indexed_top_components(n: Netlist) -> Iterator[tuple[int, Component]]:
    scope: Optional[str] = None
    for i, card in enumerate(n.cards):
        if isinstance(card, Directive):
            if card.keyword == "subckt":
                scope = "sub"
            elif card.keyword == "ends":
                scope = None
        elif isinstance(card, Component) and scope is None:
            yield i, card


def _replace_card(n: Netlist, index: int, card: Card) -> Netlist:
    cards = list(n.cards)
    cards[index] = card
    return replace(n, cards=tuple(cards))


def set_component_value(n: Netlist, name: str, v: Union[PhysicalValue, float]) -> Netlist:
    if not isinstance(v, PhysicalValue):
        v = PhysicalValue(float(v))
    i = _index_of(n, name)
    comp = n.cards[i]
    assert isinstance(comp, Component)
    if comp.quantity is None:
        raise NonScalarComponent(f"{comp.name} does not carry a scalar value ({comp.value!r})")
    rendered = format_value(v.magnitude)
    tokens = comp.value.split()
    tokens[-1] = rendered
    return _replace_card(n, i, replace(comp, value=" ".join(tokens)))


def set_component_text(n: Netlist, name: str, value: str) -> Netlist:
    """Replace everything after the nodes, e.g. a PULSE(...) spec or model name."""
    i = _index_of(n, name)
    comp = n.cards[i]
    assert isinstance(comp, Component)
    return _replace_card(n, i, replace(comp, value=" ".join(value.split())))


def rewire_pin(n: Netlist, name: str, pin_index: int, node: str) -> Netlist:
    i = _index_of(n, name)
    comp = n.cards[i]
    assert isinstance(comp, Component)
    if not 0 <= pin_index < len(comp.nodes):
        raise PinIndexOutOfRange(
            f"{comp.name} has {len(comp.nodes)} pins; index {pin_index} is out of range"
        )
    nodes = list(comp.nodes)
    nodes[pin_index] = node
    return _replace_card(n, i, replace(comp, nodes=tuple(nodes)))


def add_component(n: Netlist, c: Union[Component, str]) -> Netlist:
    if isinstance(c, str):
        card = parse_card(c)
        if not isinstance(card, Component):
            raise MalformedCard(f"not a component card: {c!r}")
        c = card
    key = c.name.upper()
    if any(existing.name.upper() == key for existing in n.components):
        raise DuplicateName(f"duplicate component name {c.name!r}")
    return replace(n, cards=n.cards + (c,))


def resolve_pin(n: Netlist, ref: str) -> str:
    """Node named by ``ref``: either a node name or ``<component>:<pin>`` (1-based)."""
    name, sep, pin = ref.strip().rpartition(":")
    if not sep:
        node = ref.strip()
        if node.upper() not in n.nodes():
            raise UnknownNode(f"no node named {node!r}")
        return node
    comp = n.component(name)
    try:
        index = int(pin)
    except ValueError:
        raise PinIndexOutOfRange(f"bad pin number in {ref!r}") from None
    if not 1 <= index <= len(comp.nodes):
        raise PinIndexOutOfRange(f"{comp.name} has {len(comp.nodes)} pins; {ref!r} is out of range")
    return comp.nodes[index - 1]


@dataclass(frozen=True)
class Connectivity:
    node_a: str
    node_b: str
    direct: tuple[Component, ...] = field(default_factory=tuple)
    path_exists: bool = False

    def direct_link(self, kind: Optional[str] = None, value: Optional[float] = None,
                    rel_tol: float = 0.01) -> Optional[Component]:
        """First two-terminal component bridging the nodes that matches kind/value."""
        for comp in self.direct:
            if kind is not None and comp.kind != kind.upper():
                continue
            if value is not None:
                q = comp.quantity
                if q is None or not math.isclose(q.magnitude, value, rel_tol=rel_tol):
                    continue
            return comp
        return None


def connectivity_query(n: Netlist, node_a: str, node_b: str) -> Connectivity:
    """Report two-terminal components directly bridging two nodes and whether
    any path of components joins them. Multi-terminal parts join all pins."""
    a, b = node_a.upper(), node_b.upper()
    known = n.nodes()
    for node in (a, b):
        if node not in known:
            raise UnknownNode(f"node {node!r} does not appear in the deck")
    comps = n.components
    direct = tuple(
        c for c in comps
        if len(c.nodes) == 2 and {x.upper() for x in c.nodes} == {a, b} and a != b
    )
    if a == b:
        return Connectivity(node_a, node_b, direct, True)
    adjacency: dict[str, set[str]] = {}
    for c in comps:
        pins = {x.upper() for x in c.nodes}
        for p in pins:
            adjacency.setdefault(p, set()).update(pins - {p})
    seen = {a}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        for nxt in adjacency.get(cur, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return Connectivity(node_a, node_b, direct, b in seen)
