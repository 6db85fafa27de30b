"""Built-in transient engine for the ideal buck converter.

The circuit is a two-state piecewise-linear system (inductor current, capacitor
voltage). Each switching period is integrated with the trapezoidal rule on a
fixed grid; the switching instant and the diode turn-off instant are resolved
by splitting the step that contains them. Constant-mode stretches are
advanced with precomputed matrix powers, so a period costs a handful of numpy
calls regardless of the step count.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..netlist import Component, Netlist, parse_value
from .dataset import Dataset, EngineError, Variable

DEFAULT_STEPS_PER_PERIOD = 400
MIN_STEPS_PER_PERIOD = 200
COARSEST_STEPS_PER_PERIOD = 50

CONTROLLER_SUBCKT = "BUCKCTRL"
# pin order of the built-in ideal controller
CONTROLLER_PINS = ("VIN", "SW", "FB", "GND", "MODE", "INTVCC")
CONTROLLER_DEFAULTS = {"fsw": 500e3, "vref": 0.6, "dmax": 0.95, "vinmax": 48.0}


class PatternMismatch(EngineError):
    pass


class StepTooCoarse(EngineError):
    pass


@dataclass(frozen=True)
class TransientSpec:
    t_stop: float
    t_step_hint: Optional[float] = None
    t_start_record: float = 0.0

    def __post_init__(self):
        if not self.t_stop > 0:
            raise ValueError("t_stop must be positive")
        if not self.t_start_record < self.t_stop:
            raise ValueError("t_start_record must precede t_stop")
        if self.t_step_hint is not None and not self.t_step_hint > 0:
            raise ValueError("t_step_hint must be positive")

    @classmethod
    def default_for(cls, f_s: float, periods: int = 400) -> "TransientSpec":
        t_stop = periods / f_s
        return cls(t_stop, None, 0.75 * t_stop)


@dataclass(frozen=True)
class BuckParams:
    v_in: float
    L: float
    C: float
    R: float
    f_s: float
    D: float
    esr: float = 0.0
    # complementary low-side switch instead of a diode: no DCM clamp
    synchronous: bool = False

    def __post_init__(self):
        for name in ("v_in", "L", "C", "R", "f_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.D < 1:
            raise ValueError("duty cycle must lie in (0, 1)")
        if self.esr < 0:
            raise ValueError("esr must be non-negative")

    @property
    def period(self) -> float:
        return 1.0 / self.f_s


def _trap(A: np.ndarray, b: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(2)
    lhs = eye - 0.5 * h * A
    return np.linalg.solve(lhs, eye + 0.5 * h * A), np.linalg.solve(lhs, h * b)


class _Stepper:
    """Affine one-step map x -> M x + g with cached powers."""

    def __init__(self, A: np.ndarray, b: np.ndarray, h: float, n: int):
        self.M, self.g = _trap(A, b, h)
        powers = np.empty((n + 1, 2, 2))
        sums = np.empty((n + 1, 2))
        powers[0] = np.eye(2)
        sums[0] = 0.0
        for k in range(1, n + 1):
            powers[k] = self.M @ powers[k - 1]
            sums[k] = self.M @ sums[k - 1] + self.g
        self.powers = powers
        self.sums = sums

    def run(self, x0: np.ndarray, m: int) -> np.ndarray:
        """States after 1..m steps, shape (m, 2)."""
        return self.powers[1:m + 1] @ x0 + self.sums[1:m + 1]


def run_reference_buck(p: BuckParams, t: TransientSpec) -> Dataset:
    T = p.period
    if t.t_step_hint is None:
        n = DEFAULT_STEPS_PER_PERIOD
    else:
        n = int(round(T / t.t_step_hint))
        if n < COARSEST_STEPS_PER_PERIOD:
            raise StepTooCoarse(
                f"step hint {t.t_step_hint:g}s gives {n} steps per period "
                f"(minimum {COARSEST_STEPS_PER_PERIOD})"
            )
        n = max(n, MIN_STEPS_PER_PERIOD)
    h = T / n

    alpha = p.R / (p.R + p.esr)
    A = np.array([[-alpha * p.esr / p.L, -alpha / p.L],
                  [alpha / p.C, -alpha / (p.R * p.C)]])
    b_on = np.array([p.v_in / p.L, 0.0])
    b_off = np.zeros(2)
    on = _Stepper(A, b_on, h, n)
    off = _Stepper(A, b_off, h, n)
    # discontinuous mode: inductor current pinned at zero, capacitor discharges into R
    beta = alpha / (p.R * p.C)

    def dcm_ratio(dt: float) -> float:
        return (1 - 0.5 * dt * beta) / (1 + 0.5 * dt * beta)

    r_dcm = dcm_ratio(h)
    dcm_powers = r_dcm ** np.arange(1, n + 1)

    s = p.D * n
    k_on = int(math.floor(s))
    frac = s - k_on
    split = frac > 1e-9
    if split:
        on_part = _trap(A, b_on, frac * h)
        off_part = _trap(A, b_off, (1 - frac) * h)

    def off_phase(x0: np.ndarray, m: int, first: Optional[tuple] = None) -> np.ndarray:
        """States over the off interval. ``first`` is an optional shortened
        leading step (M, g, dt)."""
        out = np.empty((m, 2))
        x = x0
        i = 0
        if first is not None:
            M1, g1, dt1 = first
            x1 = M1 @ x + g1
            if not p.synchronous and x1[0] < 0:
                theta = x[0] / (x[0] - x1[0]) if x[0] > 0 else 0.0
                vc = x[1] + theta * (x1[1] - x[1])
                x1 = np.array([0.0, vc * dcm_ratio((1 - theta) * dt1)])
            out[0] = x1
            x = x1
            i = 1
        rest = m - i
        if rest <= 0:
            return out
        if not p.synchronous and x[0] <= 0:
            out[i:, 0] = 0.0
            out[i:, 1] = x[1] * dcm_powers[:rest]
            return out
        seq = off.run(x, rest)
        if not p.synchronous:
            neg = np.nonzero(seq[:, 0] < 0)[0]
            if neg.size:
                j = int(neg[0])
                prev = seq[j - 1] if j > 0 else x
                theta = prev[0] / (prev[0] - seq[j, 0])
                vc = prev[1] + theta * (seq[j, 1] - prev[1])
                vc *= dcm_ratio((1 - theta) * h)
                seq[j] = (0.0, vc)
                tail = rest - j - 1
                if tail:
                    seq[j + 1:, 0] = 0.0
                    seq[j + 1:, 1] = vc * dcm_powers[:tail]
        out[i:] = seq
        return out

    total = int(math.floor(t.t_stop / h + 1e-9))
    first_rec = max(0, int(math.ceil(t.t_start_record / h - 1e-9)))
    n_rec = total - first_rec + 1
    states = np.empty((n_rec, 2))

    x = np.zeros(2)
    if first_rec == 0:
        states[0] = x
    n_periods = int(math.ceil(total / n))
    for k in range(n_periods):
        base = k * n
        period = np.empty((n, 2))
        period[:k_on] = on.run(x, k_on)
        if split:
            x_on = period[k_on - 1] if k_on else x
            x_mid = on_part[0] @ x_on + on_part[1]
            period[k_on:] = off_phase(x_mid, n - k_on, first=(*off_part, (1 - frac) * h))
        else:
            x_on = period[k_on - 1] if k_on else x
            period[k_on:] = off_phase(x_on, n - k_on)
        # period[i] is the state at grid index base + i + 1
        lo = max(base + 1, first_rec)
        hi = min(base + n, total)
        if hi >= lo:
            states[lo - first_rec: hi - first_rec + 1] = period[lo - base - 1: hi - base]
        x = period[-1]

    idx = np.arange(first_rec, total + 1)
    time = idx * h
    i_l = states[:, 0]
    v_out = alpha * (states[:, 1] + p.esr * i_l)
    local = idx % n
    switch_on = local < s
    v_sw = np.where(switch_on, p.v_in, 0.0)
    if not p.synchronous:
        v_sw = np.where(~switch_on & (i_l <= 0), v_out, v_sw)
    i_src = np.where(switch_on, -i_l, 0.0)
    signals = {
        "V(in)": np.full_like(time, p.v_in),
        "V(sw)": v_sw,
        "V(out)": v_out,
        "I(L)": i_l,
        "I(Vin)": i_src,
    }
    variables = [Variable("time", "time")]
    variables += [Variable(k, "current" if k.startswith("I") else "voltage") for k in signals]
    return Dataset(variables, [time, *signals.values()], title="reference buck")


# --- deck pattern matching -------------------------------------------------

def _num(text: str) -> float:
    pv = parse_value(text)
    if pv is None:
        raise PatternMismatch(f"cannot evaluate {text!r} (expressions are not supported)")
    return pv.magnitude


def pulse_timing(comp: Component) -> Optional[tuple[float, float, float, float]]:
    """(V1, V2, on-time, period) of a PULSE source, None if not a pulse."""
    m = re.match(r"^pulse\s*\(?([^)]*)\)?", comp.value.strip(), re.IGNORECASE)
    if not m:
        return None
    args = m.group(1).replace(",", " ").split()
    if len(args) < 7:
        raise PatternMismatch(f"{comp.name}: PULSE needs V1 V2 TD TR TF TON TPER")
    v1, v2, _td, _tr, _tf, ton, per = (_num(a) for a in args[:7])
    if per <= 0 or not 0 < ton < per:
        raise PatternMismatch(f"{comp.name}: PULSE on-time must lie inside the period")
    return v1, v2, ton, per


def _dc(comp: Component) -> Optional[float]:
    q = comp.quantity
    return None if q is None else q.magnitude


def controller_params(comp: Component) -> dict[str, float]:
    params = dict(CONTROLLER_DEFAULTS)
    for tok in comp.value.split()[1:]:
        key, sep, val = tok.partition("=")
        if sep:
            params[key.lower()] = _num(val)
    return params


@dataclass(frozen=True)
class BuckMatch:
    params: BuckParams
    in_node: str
    sw_node: str
    out_node: str
    inductor: str
    source: str


def _two(c: Component) -> tuple[str, str]:
    return c.nodes[0].upper(), c.nodes[1].upper()


def match_buck(n: Netlist) -> BuckMatch:
    """Structural match of the canonical ideal buck; see :func:`detect_buck_pattern`."""
    comps = n.components
    by_kind: dict[str, list[Component]] = {}
    for c in comps:
        if c.opaque:
            raise PatternMismatch(f"{c.name}: unsupported element for the reference engine")
        by_kind.setdefault(c.kind, []).append(c)
    for kind in "MQI":
        if by_kind.get(kind):
            raise PatternMismatch(f"{by_kind[kind][0].name}: {kind} elements are not supported")
    xs = by_kind.get("X", [])
    if len(xs) > 1 or (xs and (xs[0].subckt or "").upper() != CONTROLLER_SUBCKT):
        raise PatternMismatch("subcircuit instances other than one ideal controller "
                              f"({CONTROLLER_SUBCKT}) need an external engine")
    if len(by_kind.get("L", [])) != 1 or len(by_kind.get("C", [])) != 1:
        raise PatternMismatch("expected exactly one inductor and one capacitor")
    ind, cap = by_kind["L"][0], by_kind["C"][0]
    resistors = list(by_kind.get("R", []))
    used = {ind.name, cap.name}
    node_users: dict[str, list[Component]] = {}
    for c in comps:
        for node in {x.upper() for x in c.nodes}:
            node_users.setdefault(node, []).append(c)

    def r_between(a: str, b: str) -> list[Component]:
        return [r for r in resistors if set(_two(r)) == {a, b} and r.name not in used]

    # output node: the inductor terminal that reaches ground through the capacitor
    out = sw = None
    esr = 0.0
    c1, c2 = _two(cap)
    for cand_sw, cand_out in (_two(ind), _two(ind)[::-1]):
        if {c1, c2} == {cand_out, "0"}:
            out, sw = cand_out, cand_sw
            break
        if "0" in (c1, c2) or cand_out in (c1, c2):
            mid = c2 if c1 in ("0", cand_out) else c1
            far = "0" if cand_out in (c1, c2) else cand_out
            series = r_between(mid, far)
            if len(series) == 1 and len(node_users.get(mid, [])) == 2:
                out, sw = cand_out, cand_sw
                esr = _dc(series[0]) or 0.0
                used.add(series[0].name)
                break
    if out is None or sw is None or sw == "0":
        raise PatternMismatch("no L-C output filter found")

    loads = r_between(out, "0")
    if len(loads) != 1:
        raise PatternMismatch(f"expected one load resistor from {out} to ground, found {len(loads)}")
    load = loads[0]
    used.add(load.name)
    r_load = _dc(load)
    if r_load is None:
        raise PatternMismatch(f"{load.name}: load value is not a number")

    vsrcs = by_kind.get("V", [])
    switches = by_kind.get("S", [])
    diodes = by_kind.get("D", [])

    def diode_at_sw() -> bool:
        for d in diodes:
            if _two(d) == ("0", sw):
                used.add(d.name)
                return True
        return False

    if xs:
        x = xs[0]
        if len(x.nodes) != len(CONTROLLER_PINS):
            raise PatternMismatch(f"{x.name}: {CONTROLLER_SUBCKT} takes pins {' '.join(CONTROLLER_PINS)}")
        pins = [p.upper() for p in x.nodes]
        vin_node, sw_pin, fb, gnd = pins[0], pins[1], pins[2], pins[3]
        if sw_pin != sw or gnd != "0":
            raise PatternMismatch(f"{x.name}: SW pin must drive the inductor and GND must be 0")
        used.add(x.name)
        prm = controller_params(x)
        tops, bots = r_between(out, fb), r_between(fb, "0")
        if len(tops) != 1 or len(bots) != 1:
            raise PatternMismatch("controller needs a feedback divider OUT-FB-0")
        r_top, r_bot = _dc(tops[0]), _dc(bots[0])
        if not r_top or not r_bot:
            raise PatternMismatch("feedback resistors must be plain numbers")
        used.update({tops[0].name, bots[0].name})
        supply = [v for v in vsrcs if _two(v) == (vin_node, "0") and _dc(v) is not None]
        if len(supply) != 1:
            raise PatternMismatch(f"{x.name}: no DC supply at {vin_node}")
        src = supply[0]
        used.add(src.name)
        v_in = _dc(src)
        if not diode_at_sw():
            raise PatternMismatch("controller deck needs a catch diode from 0 to SW")
        # mode/intvcc wiring does not change the ideal model
        for r in resistors:
            if r.name not in used and {*_two(r)} <= {pins[4], pins[5], "0"}:
                used.add(r.name)
        if v_in <= 0:
            raise PatternMismatch("supply voltage must be positive")
        if v_in > prm["vinmax"]:
            raise PatternMismatch(f"{src.name}: {v_in:g} V exceeds the controller's "
                                  f"maximum input of {prm['vinmax']:g} V")
        v_set = prm["vref"] * (1 + r_top / r_bot)
        duty = min(v_set / v_in, prm["dmax"])
        f_s = prm["fsw"]
        r_eff = 1.0 / (1.0 / r_load + 1.0 / (r_top + r_bot))
        synchronous = False
        in_node = vin_node
    else:
        pulse_at_sw = [v for v in vsrcs if _two(v) == (sw, "0") and pulse_timing(v)]
        if pulse_at_sw:
            src = pulse_at_sw[0]
            used.add(src.name)
            v1, v2, ton, per = pulse_timing(src)
            v_in = max(v1, v2)
            if min(v1, v2) != 0:
                raise PatternMismatch(f"{src.name}: switching-node pulse must swing from 0")
            duty = ton / per if v2 > v1 else 1 - ton / per
            f_s = 1 / per
            synchronous = True
            in_node = sw
        else:
            hs = [s for s in switches if sw in _two(s)]
            if len(hs) < 1:
                raise PatternMismatch(f"no switch or pulse source drives {sw}")
            high = None
            for s in hs:
                a, b = _two(s)
                other = b if a == sw else a
                if other != "0":
                    high = (s, other)
            if high is None:
                raise PatternMismatch("no high-side switch found")
            sw_comp, in_node = high
            used.add(sw_comp.name)
            supply = [v for v in vsrcs if _two(v) == (in_node, "0") and _dc(v) is not None]
            if len(supply) != 1:
                raise PatternMismatch(f"no DC supply at {in_node}")
            src = supply[0]
            used.add(src.name)
            v_in = _dc(src)
            cp, cm = sw_comp.nodes[2].upper(), sw_comp.nodes[3].upper()
            drivers = [v for v in vsrcs if set(_two(v)) == {cp, cm} and pulse_timing(v)]
            if len(drivers) != 1:
                raise PatternMismatch(f"{sw_comp.name}: control input is not driven by a PULSE source")
            drv = drivers[0]
            used.add(drv.name)
            v1, v2, ton, per = pulse_timing(drv)
            if _two(drv) != (cp, cm):
                v1, v2 = -v1, -v2
            duty = ton / per if v2 > v1 else 1 - ton / per
            f_s = 1 / per
            lows = [s for s in hs if s is not sw_comp and set(_two(s)) == {sw, "0"}]
            if diode_at_sw():
                synchronous = False
            elif len(lows) == 1:
                synchronous = True
                used.add(lows[0].name)
                lc = {lows[0].nodes[2].upper(), lows[0].nodes[3].upper()}
                used.update(v.name for v in vsrcs if set(_two(v)) == lc and pulse_timing(v))
            else:
                raise PatternMismatch("no freewheeling diode or low-side switch at the switching node")
        r_eff = r_load
        if v_in is None or v_in <= 0:
            raise PatternMismatch("supply voltage must be positive")
    leftovers = [c.name for c in comps if c.name not in used]
    if leftovers:
        raise PatternMismatch(f"elements outside the ideal buck pattern: {', '.join(leftovers)}")
    l_val, c_val = _dc(ind), _dc(cap)
    if not l_val or not c_val:
        raise PatternMismatch("inductor and capacitor need plain numeric values")
    try:
        params = BuckParams(v_in, l_val, c_val, r_eff, f_s, duty, esr, synchronous)
    except ValueError as exc:
        raise PatternMismatch(str(exc)) from None
    return BuckMatch(params, in_node, sw, out, ind.name, src.name)


def detect_buck_pattern(n: Netlist) -> BuckParams:
    """Extract ideal-buck parameters from a deck, matching structure rather
    than names. Raises PatternMismatch for anything else."""
    return match_buck(n).params


def transient_from_deck(n: Netlist, f_s: float) -> TransientSpec:
    """TransientSpec from the deck's ``.tran`` card, or the default window."""
    cards = n.directives("tran")
    if not cards:
        return TransientSpec.default_for(f_s)
    nums = []
    for tok in cards[-1].args.split():
        pv = parse_value(tok)
        if pv is not None:
            nums.append(pv.magnitude)
    if not nums:
        return TransientSpec.default_for(f_s)
    if len(nums) == 1:
        return TransientSpec(nums[0])
    t_stop = nums[1]
    t_start = nums[2] if len(nums) > 2 else 0.0
    hint = nums[3] if len(nums) > 3 and nums[3] > 0 else None
    return TransientSpec(t_stop, hint, t_start)
