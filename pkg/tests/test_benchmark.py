import copy
import json
import shutil

import pytest

from oracles import t_interval
from smpsagent.agent import AGENTS, SessionConfig
from smpsagent.benchmark import (
    BenchmarkQuestion,
    EvalResult,
    MissingFixture,
    SchemaViolation,
    Target,
    Verification,
    aggregate,
    ape,
    evaluate_answer,
    format_quantity,
    load_questions,
    mean_ci,
    pin_connected_via,
    read_results,
    render_prompt,
    run_benchmark,
    write_report,
)
from smpsagent.netlist import parse_netlist


@pytest.fixture
def question_file(data_dir, tmp_path):
    """A writable copy of the shipped question set with its fixtures."""
    for name in ("buck.cir", "buck_sync.cir", "ctrl_mode.cir", "ctrl_vout.cir",
                 "buckctrl_datasheet.txt", "questions.json"):
        shutil.copy(data_dir / name, tmp_path / name)
    return tmp_path / "questions.json"


def rewrite(path, edit):
    data = json.loads(path.read_text())
    edit(data)
    path.write_text(json.dumps(data))
    return path


def topology_index(data):
    return next(i for i, q in enumerate(data["questions"]) if q["category"] == "topology_adaption")


# ---- loading ----

def test_shipped_questions_load(data_dir):
    qs = load_questions(data_dir / "questions.json")
    assert len(qs) == 12
    assert {q.category for q in qs} == {"parameter_tuning", "topology_adaption"}
    assert all(q.circuit.is_file() for q in qs)
    topo = [q for q in qs if q.category == "topology_adaption"]
    assert all(q.target is None and q.tolerance_pct is None for q in topo)


def test_tolerance_on_topology_question(question_file):
    def edit(data):
        data["questions"][topology_index(data)]["tolerance_pct"] = 5
    with pytest.raises(SchemaViolation, match="tolerance_pct"):
        load_questions(rewrite(question_file, edit))


def test_unknown_field_is_rejected(question_file):
    def edit(data):
        data["questions"][0]["difficulty"] = "hard"
    with pytest.raises(SchemaViolation, match="difficulty"):
        load_questions(rewrite(question_file, edit))


def test_problems_are_all_reported(question_file):
    def edit(data):
        del data["questions"][0]["target"]
        data["questions"][1]["id"] = data["questions"][2]["id"]
    with pytest.raises(SchemaViolation) as info:
        load_questions(rewrite(question_file, edit))
    text = "\n".join(info.value.problems)
    assert "need a target" in text and "duplicate id" in text and "{target}" in text


def test_bad_json(question_file):
    question_file.write_text("{")
    with pytest.raises(SchemaViolation, match="not valid JSON"):
        load_questions(question_file)


def test_missing_fixture(question_file):
    (question_file.parent / "ctrl_mode.cir").unlink()
    with pytest.raises(MissingFixture, match="ctrl_mode.cir"):
        load_questions(question_file)


def test_default_tolerance(question_file):
    def edit(data):
        del data["questions"][0]["tolerance_pct"]
    q = load_questions(rewrite(question_file, edit))[0]
    assert q.tolerance_pct == 5.0


# ---- prompts ----

@pytest.mark.parametrize("value,unit,text", [
    (0.1, "A", "100 mA"), (500e3, "Hz", "500 kHz"), (3.3, "V", "3.3 V"),
    (0.018, "V", "18 mV"), (0, "V", "0 V"), (22e-6, "H", "22 µH"),
])
def test_format_quantity(value, unit, text):
    assert format_quantity(value, unit) == text


def test_render_prompt_embeds_deck(data_dir):
    q = BenchmarkQuestion("q", data_dir / "buck.cir", "Set the inductor current ripple to {target}.",
                          "parameter_tuning", Verification("ripple", {"signal": "I(L1)"}),
                          Target(0.1, "A"), 5.0)
    text = render_prompt(q)
    assert text.startswith("Set the inductor current ripple to 100 mA.")
    assert text.endswith(".end\n```")
    assert "V1 IN 0 DC 12" in text


# ---- verification ----

def mean_question(data_dir, target, tol=5.0):
    return BenchmarkQuestion("v", data_dir / "buck.cir", "{target}", "parameter_tuning",
                             Verification("mean", {"signal": "V(out)"}), Target(target, "V"), tol)


def test_ape():
    assert ape(18e-3, 18.5e-3) == pytest.approx(2.7777777, rel=1e-6)
    assert ape(-5, -4) == pytest.approx(20.0)


@pytest.mark.parametrize("target,solved", [(6.3, True), (5.75, True), (6.4, False), (5.6, False)])
def test_tolerance_band(data_dir, buck_deck, target, solved):
    # the reference deck reads 6.0 V, so 6.3 is inside 5% and 6.4 is not
    r = evaluate_answer(mean_question(data_dir, target), buck_deck)
    assert r.solved is solved
    assert r.ape == pytest.approx(ape(target, r.measured.value))


def test_missing_answer(data_dir):
    r = evaluate_answer(mean_question(data_dir, 5.0), None)
    assert not r.solved and "no parseable netlist" in r.failure_reason


def test_simulation_failure_is_a_miss(data_dir):
    broken = parse_netlist("R1 a 0 1k\n.end\n")
    r = evaluate_answer(mean_question(data_dir, 5.0), broken)
    assert not r.solved and r.failure_reason.startswith("simulation failed")


FIXED = "XU1 IN SW FB 0 MODE INTVCC BUCKCTRL\nRmode MODE INTVCC 100k\n.end\n"


def test_pin_connected_via():
    n = parse_netlist(FIXED)
    assert pin_connected_via(n, "XU1:5", "XU1:6", "R", 1e5)
    assert pin_connected_via(n, "XU1:5", "XU1:6", "R", 100.5e3)  # within 1%
    assert not pin_connected_via(n, "XU1:5", "XU1:6", "R", 1e4)
    assert not pin_connected_via(n, "XU1:5", "XU1:6", "C", 1e5)
    assert not pin_connected_via(n, "XU1:5", "XU1:2", "R", 1e5)


def test_topology_question_unanswered(data_dir):
    q = next(q for q in load_questions(data_dir / "questions.json")
             if q.category == "topology_adaption")
    r = evaluate_answer(q, q.netlist)
    assert not r.solved and r.failure_reason == "required connection missing"
    assert r.ape is None


# ---- statistics ----

def test_mean_ci_edge_cases():
    assert mean_ci([]) is None
    assert mean_ci([50.0]) is None
    assert mean_ci([75.0, 75.0, 75.0]) == (75.0, 75.0)


def test_mean_ci_matches_t_table():
    lo, hi = mean_ci([50.0, 60.0, 70.0])
    assert (lo, hi) == pytest.approx(t_interval([50.0, 60.0, 70.0]), rel=1e-9)
    assert (lo, hi) == pytest.approx((35.1586, 84.8414), abs=1e-4)


def result(qid, solved, ape_value=None, run=0, category="parameter_tuning"):
    return EvalResult(qid, solved, category, ape=ape_value, run=run)


def test_median_ape_shrugs_off_an_outlier():
    base = [result(f"q{i}", True, a) for i, a in enumerate([1.0, 2.0, 3.0, 4.0, 5.0])]
    wild = copy.deepcopy(base)
    wild[4].ape = 1e9
    assert aggregate(base).median_ape == aggregate(wild).median_ape == 3.0


def test_topology_results_do_not_count_for_ape():
    rep = aggregate([result("a", True, 2.0), result("t", False, category="topology_adaption")])
    assert rep.median_ape == 2.0
    assert rep.solve_rate == 50.0
    assert rep.by_category == {"parameter_tuning": 100.0, "topology_adaption": 0.0}


def test_run_rates_and_interval():
    rs = [result("a", True, run=0), result("b", False, run=0),
          result("a", True, run=1), result("b", True, run=1)]
    rep = aggregate(rs)
    assert rep.run_rates == [50.0, 100.0]
    assert rep.solve_rate == 75.0
    assert rep.solve_rate_ci == pytest.approx(t_interval([50.0, 100.0]))


# ---- end to end with stand-in agents ----

@pytest.fixture(scope="module")
def questions(data_dir):
    return load_questions(data_dir / "questions.json")


def oracle(q, initial, cfg):
    return AGENTS["oracle"](q, initial, cfg)


def test_oracle_solves_everything(questions, tmp_path):
    rep = run_benchmark(questions, oracle, transcript_dir=tmp_path / "t")
    assert rep.solve_rate == 100.0
    assert rep.solve_rate_ci is None
    assert len(list((tmp_path / "t").glob("run00_*.json"))) == len(questions)


def test_workers_keep_order(questions):
    serial = run_benchmark(questions, oracle)
    threaded = run_benchmark(questions, oracle, workers=4)
    assert [r.question_id for r in threaded.results] == [r.question_id for r in serial.results]
    assert threaded.summary() == serial.summary()


def test_report_round_trip(questions, tmp_path):
    rep = run_benchmark(questions[:4], lambda q, n, c: AGENTS["noop"](q, n, c), n_runs=2)
    paths = write_report(rep, tmp_path)
    back = read_results(paths["csv"])
    assert [(r.run, r.question_id, r.solved, r.ape) for r in back] == \
           [(r.run, r.question_id, r.solved, r.ape) for r in rep.results]
    assert aggregate(back).summary() == rep.summary()
    assert json.loads(paths["summary"].read_text())["n_runs"] == 2
    assert paths["table"].read_text().startswith("solve_rate: ")


def test_benchmark_arguments(questions):
    with pytest.raises(ValueError):
        run_benchmark(questions, oracle, n_runs=0)
    with pytest.raises(ValueError):
        run_benchmark(questions, oracle, workers=0)


def test_tools_disabled_noop(questions):
    rep = run_benchmark(questions, lambda q, n, c: AGENTS["noop"](q, n, c),
                        SessionConfig(tools_enabled=False))
    assert all(r.termination == "final_answer" for r in rep.results)
