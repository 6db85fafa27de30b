import shlex
import struct
import sys
import time

import numpy as np
import pytest

from smpsagent.engine import (
    BuckParams,
    Dataset,
    EngineConfig,
    EngineFailure,
    EngineNotFound,
    EngineTimeout,
    HeaderMalformed,
    NonMonotonicTime,
    PatternMismatch,
    PayloadSizeMismatch,
    RawMissing,
    SimulationJob,
    StepTooCoarse,
    TransientSpec,
    UnknownSignal,
    Variable,
    detect_buck_pattern,
    match_buck,
    parse_raw,
    run_external,
    run_reference_buck,
    simulate,
    with_tran,
    write_raw,
)
from smpsagent.measure import read_feature
from smpsagent.netlist import parse_netlist, set_component_value

PY = shlex.quote(sys.executable)
FIXTURE = BuckParams(12, 10e-6, 100e-6, 6, 500e3, 0.5)
LONG = TransientSpec(20e-3, None, 19e-3)

# adaptive ODE solution of the same circuit (tests/oracles.py::buck_ode)
ODE_40US = (17.98221058, 4.191641481)
ODE_80US = (11.43623035, 10.55815301)
DCM_VOUT_R600 = 11.291658096804793


def ascii_raw(names, rows, flags="real"):
    head = ["Title: hand made", "Date: today", "Plotname: Transient Analysis",
            f"Flags: {flags}", f"No. Variables: {len(names)}", f"No. Points: {len(rows)}",
            "Variables:"]
    head += [f"\t{i}\t{n}\t{'time' if i == 0 else 'voltage'}" for i, n in enumerate(names)]
    body = []
    for p, row in enumerate(rows):
        body.append(f" {p}\t{row[0]!r}")
        body += [f"\t{v!r}" for v in row[1:]]
    return ("\n".join(head + ["Values:"] + body) + "\n").encode()


def binary_header(names, npts, flags="real forward", encoding="ascii"):
    head = ["Title: * generated", "Date: x", "Plotname: Transient Analysis", f"Flags: {flags}",
            f"No. Variables: {len(names)}", f"No. Points: {npts}", "Offset: 0", "Variables:"]
    head += [f"\t{i}\t{n}\t{'time' if i == 0 else 'voltage'}" for i, n in enumerate(names)]
    return ("\n".join(head + ["Binary:"]) + "\n").encode(encoding)


ROWS = [(0.0, 1.0, -2.0), (1e-6, 1.5, 0.25), (2e-6, 2.0, 3.5)]


# ---- raw files ----

def test_ascii_three_points():
    ds = parse_raw(ascii_raw(["time", "V(out)", "V(sw)"], ROWS))
    assert ds.n_points == 3
    assert ds.names == ["time", "V(out)", "V(sw)"]
    assert list(ds["V(sw)"]) == [-2.0, 0.25, 3.5]


def test_ltspice_binary_single_precision():
    payload = b"".join(struct.pack("<dff", *r) for r in ROWS)
    ds = parse_raw(binary_header(["time", "V(a)", "V(b)"], 3) + payload)
    assert list(ds.time) == [0.0, 1e-6, 2e-6]
    assert list(ds["V(b)"]) == [-2.0, 0.25, 3.5]


def test_ltspice_utf16_header():
    payload = b"".join(struct.pack("<dff", *r) for r in ROWS)
    data = binary_header(["time", "V(a)", "V(b)"], 3, encoding="utf_16_le") + payload
    ds = parse_raw(data)
    assert ds["V(a)"][1] == 1.5


def test_ngspice_double_precision():
    payload = b"".join(struct.pack("<ddd", *r) for r in ROWS)
    ds = parse_raw(binary_header(["time", "v(a)", "v(b)"], 3) + payload)
    assert list(ds["v(b)"]) == [-2.0, 0.25, 3.5]


def test_fastaccess_layout():
    cols = list(zip(*ROWS))
    payload = (struct.pack("<3d", *cols[0]) + struct.pack("<3f", *cols[1])
               + struct.pack("<3f", *cols[2]))
    ds = parse_raw(binary_header(["time", "V(a)", "V(b)"], 3, "real forward fastaccess") + payload)
    assert list(ds["V(a)"]) == [1.0, 1.5, 2.0]


def test_compressed_points_have_negative_time():
    rows = [(0.0, 1.0), (-1e-6, 2.0), (2e-6, 3.0)]
    payload = b"".join(struct.pack("<df", *r) for r in rows)
    ds = parse_raw(binary_header(["time", "V(a)"], 3) + payload)
    assert list(ds.time) == [0.0, 1e-6, 2e-6]


def test_truncated_payload():
    payload = b"".join(struct.pack("<dff", *r) for r in ROWS)[:-3]
    with pytest.raises(PayloadSizeMismatch):
        parse_raw(binary_header(["time", "V(a)", "V(b)"], 3) + payload)


def test_trailing_newline_is_tolerated():
    payload = b"".join(struct.pack("<dff", *r) for r in ROWS)
    ds = parse_raw(binary_header(["time", "V(a)", "V(b)"], 3) + payload + b"\n")
    assert ds.n_points == 3


@pytest.mark.parametrize("data", [
    b"Title: x\nPlotname: y\nVariables:\n\t0\ttime\ttime\nValues:\n",
    b"just some text",
    b"Title: x\nPlotname: p\nFlags: real\nNo. Variables: 2\nNo. Points: 1\n"
    b"Variables:\n\t0\ttime\ttime\nValues:\n 0\t0.0\n",
    b"Title: x\nPlotname: p\nFlags: complex\nNo. Variables: 1\nNo. Points: 1\n"
    b"Variables:\n\t0\tfrequency\tfrequency\nValues:\n 0\t1.0\n",
])
def test_malformed_headers(data):
    with pytest.raises(HeaderMalformed):
        parse_raw(data)


def test_non_monotonic_time():
    with pytest.raises(NonMonotonicTime):
        parse_raw(ascii_raw(["time", "V(a)"], [(0.0, 1.0), (2e-6, 1.0), (1e-6, 1.0)]))


def test_sine_round_trip_within_float32():
    t = np.linspace(0, 1e-3, 10000)
    v = 3.0 * np.sin(2 * np.pi * 5e3 * t)
    ds = Dataset.from_columns(t, {"V(out)": v})
    back = parse_raw(write_raw(ds))
    err = np.abs(back["V(out)"] - v)
    assert np.all(err <= np.spacing(np.abs(v).astype(np.float32)).astype(np.float64))
    assert parse_raw(write_raw(ds, binary=False)) == ds


def test_dataset_lookup_is_case_insensitive():
    ds = Dataset.from_columns(np.array([0.0, 1.0]), {"V(out)": np.array([1.0, 2.0])})
    assert ds["v(OUT)"][1] == 2.0
    assert "V(out)" in ds and "V(x)" not in ds
    with pytest.raises(UnknownSignal) as info:
        ds["V(x)"]
    assert "available: V(out)" in str(info.value)


def test_dataset_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Dataset([Variable("time", "time"), Variable("V(a)")], [np.arange(3.0), np.arange(2.0)])
    with pytest.raises(ValueError):
        Dataset([Variable("V(a)")], [np.arange(3.0)])


# ---- reference engine ----

def test_matches_adaptive_ode_during_startup():
    ds = run_reference_buck(FIXTURE, TransientSpec(80e-6))
    for t, (il, vc) in ((40e-6, ODE_40US), (80e-6, ODE_80US)):
        assert np.interp(t, ds.time, ds["I(L)"]) == pytest.approx(il, rel=1e-6)
        assert np.interp(t, ds.time, ds["V(out)"]) == pytest.approx(vc, rel=1e-6)


def test_dcm_mean_matches_theory():
    ds = run_reference_buck(BuckParams(12, 10e-6, 100e-6, 600, 500e3, 0.5), LONG)
    assert read_feature(ds, "V(out)", "mean").value == pytest.approx(DCM_VOUT_R600, rel=0.005)


def test_synchronous_buck_never_clamps():
    p = BuckParams(12, 10e-6, 100e-6, 600, 500e3, 0.5, synchronous=True)
    ds = run_reference_buck(p, LONG)
    assert ds["I(L)"].min() < 0
    assert read_feature(ds, "V(out)", "mean").value == pytest.approx(6.0, rel=0.02)


def test_tiny_duty_gives_tiny_output():
    ds = run_reference_buck(BuckParams(12, 10e-6, 100e-6, 6, 500e3, 0.01), LONG)
    assert read_feature(ds, "V(out)", "mean").value == pytest.approx(0.12, rel=0.05)


def test_energy_balance():
    ds = run_reference_buck(FIXTURE, LONG)
    T = FIXTURE.period
    w = ds.window(ds.time[-1] - 100 * T)
    p_in = FIXTURE.v_in * np.trapezoid(-w["I(Vin)"], w.time)
    p_out = np.trapezoid(w["V(out)"] ** 2 / FIXTURE.R, w.time)
    assert p_in >= p_out * 0.99
    assert p_in == pytest.approx(p_out, rel=0.01)


def test_esr_adds_resistive_ripple():
    p = BuckParams(12, 10e-6, 100e-6, 6, 500e3, 0.5, esr=0.01)
    ds = run_reference_buck(p, LONG)
    ripple = read_feature(ds, "V(out)", "ripple").value
    # the resistive term dominates the 1.5 mV capacitive ripple
    assert ripple == pytest.approx(0.6 * 0.01, rel=0.10)
    assert ripple > 1.5e-3


def test_deterministic():
    a = run_reference_buck(FIXTURE, TransientSpec(100e-6))
    b = run_reference_buck(FIXTURE, TransientSpec(100e-6))
    assert a == b


def test_recording_window():
    ds = run_reference_buck(FIXTURE, TransientSpec(100e-6, None, 60e-6))
    assert ds.time[0] >= 60e-6 - 1e-12
    assert ds.time[-1] == pytest.approx(100e-6)


def test_step_hints():
    T = FIXTURE.period
    with pytest.raises(StepTooCoarse):
        run_reference_buck(FIXTURE, TransientSpec(20e-6, T / 40))
    ds = run_reference_buck(FIXTURE, TransientSpec(20e-6, T / 100))
    assert np.diff(ds.time)[0] == pytest.approx(T / 200)
    ds = run_reference_buck(FIXTURE, TransientSpec(20e-6, T / 1000))
    assert np.diff(ds.time)[0] == pytest.approx(T / 1000)


def test_transient_spec_validation():
    with pytest.raises(ValueError):
        TransientSpec(0)
    with pytest.raises(ValueError):
        TransientSpec(1e-3, None, 2e-3)
    with pytest.raises(ValueError):
        BuckParams(12, 10e-6, 100e-6, 6, 500e3, 1.0)


# ---- pattern matching ----

def test_fixture_parameters(buck_deck):
    assert detect_buck_pattern(buck_deck) == BuckParams(12, 10e-6, 100e-6, 6, 500e3, 0.5)


def test_renamed_nodes_give_same_parameters(buck_deck, data_dir):
    names = {"IN": "VSUPPLY", "SW": "LX", "OUT": "VO", "G": "DRV"}
    lines = []
    for line in (data_dir / "buck.cir").read_text().splitlines():
        if line[:1] not in ".*":
            line = " ".join(names.get(tok, tok) for tok in line.split())
        lines.append(line)
    renamed = parse_netlist("\n".join(lines))
    assert renamed.nodes() == {"VSUPPLY", "LX", "VO", "DRV", "0"}
    assert detect_buck_pattern(renamed) == detect_buck_pattern(buck_deck)


def test_third_party_controller_is_rejected(data_dir):
    with pytest.raises(PatternMismatch):
        detect_buck_pattern(parse_netlist((data_dir / "ltc3419.cir").read_text()))


def test_pulse_at_switch_node(data_dir):
    n = parse_netlist((data_dir / "buck_sync.cir").read_text())
    p = detect_buck_pattern(n)
    assert p.synchronous and p.v_in == 12 and p.D == 0.5
    ds = simulate(n)
    assert "V(in)" not in ds
    assert set(ds.names) == {"time", "V(lx)", "V(vo)", "I(L1)", "I(VSW)"}


def test_ideal_controller_duty(data_dir):
    n = parse_netlist((data_dir / "ctrl_mode.cir").read_text())
    m = match_buck(n)
    assert m.params.D == pytest.approx(0.6 * (1 + 121 / 16.5) / 12)
    assert m.params.f_s == 500e3


def test_controller_supply_limit(data_dir):
    n = parse_netlist((data_dir / "ctrl_vout.cir").read_text())
    with pytest.raises(PatternMismatch, match="maximum input"):
        match_buck(set_component_value(n, "V1", 60))


@pytest.mark.parametrize("extra", ["R9 OUT 0 1k", "Q1 a b c QMOD", "B1 OUT 0 V=1"])
def test_extra_elements_are_rejected(buck_deck, extra):
    from smpsagent.netlist import add_component
    with pytest.raises(PatternMismatch):
        match_buck(add_component(buck_deck, extra))


def test_simulate_names_signals_after_the_deck(buck_dataset):
    assert buck_dataset.names == ["time", "V(in)", "V(sw)", "V(out)", "I(L1)", "I(V1)"]
    with pytest.raises(UnknownSignal):
        read_feature(buck_dataset, "V(bogus)", "mean")


def test_simulate_unknown_engine(buck_deck):
    with pytest.raises(ValueError):
        simulate(buck_deck, engine="spectre")


# ---- external engine ----

SELF_ENGINE = f"{PY} -m smpsagent simulate {{netlist_path}} -o {{raw_path}}"


def test_with_tran_injects_analysis(buck_deck):
    bare = parse_netlist("V1 a 0 1\nR1 a 0 1k\n")
    deck = with_tran(bare, TransientSpec(1e-3, 1e-6, 0.5e-3))
    assert deck.directives("tran")[0].args == "1u 1m 500u"
    assert with_tran(buck_deck, TransientSpec(1e-3)) == buck_deck


def test_external_engine_round_trip(buck_deck):
    cfg = EngineConfig(SELF_ENGINE, timeout=60)
    ds = simulate(buck_deck, cfg)
    assert read_feature(ds, "V(out)", "mean").value == pytest.approx(6.0, rel=0.02)


def test_external_engine_records_window(buck_deck):
    cfg = EngineConfig(SELF_ENGINE, timeout=60)
    job = SimulationJob(buck_deck, TransientSpec(20e-3, None, 19.5e-3), cfg)
    ds = run_external(job, cfg)
    assert ds.time[0] >= 19.5e-3


def test_missing_binary(buck_deck):
    cfg = EngineConfig("no-such-spice-binary -b {netlist_path}")
    with pytest.raises(EngineNotFound):
        simulate(buck_deck, cfg)


def test_engine_failure_captures_stderr():
    cfg = EngineConfig(SELF_ENGINE, timeout=60)
    broken = parse_netlist("V1 IN 0 DC 12\nL1 IN OUT 10u\nC1 OUT 0 1u\nRload OUT 0 1\n.tran 0 1m\n")
    with pytest.raises(EngineFailure) as info:
        simulate(broken, cfg)
    assert "PULSE" in info.value.stderr or "switch" in info.value.stderr
    assert info.value.returncode != 0


def test_engine_timeout(buck_deck):
    cfg = EngineConfig(f"{PY} -c 'import time; time.sleep(10)' {{netlist_path}}", timeout=0.5)
    start = time.perf_counter()
    with pytest.raises(EngineTimeout):
        simulate(buck_deck, cfg)
    assert time.perf_counter() - start < 5


def test_raw_missing(buck_deck):
    cfg = EngineConfig(f"{PY} -c pass {{netlist_path}}")
    with pytest.raises(RawMissing):
        simulate(buck_deck, cfg)


def test_keep_artifacts(buck_deck, tmp_path):
    cfg = EngineConfig(SELF_ENGINE, working_dir=tmp_path, keep_artifacts=True, timeout=60)
    simulate(buck_deck, cfg)
    kept = list(tmp_path.glob("smpsagent-*/deck.raw"))
    assert len(kept) == 1


def test_template_needs_netlist_placeholder():
    with pytest.raises(ValueError):
        EngineConfig("ngspice -b")


def test_config_from_env(monkeypatch):
    monkeypatch.setenv("SMPSAGENT_ENGINE_CMD", "myspice {netlist_path}")
    assert EngineConfig.from_env().command_template == "myspice {netlist_path}"
