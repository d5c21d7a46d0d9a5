import json
from pathlib import Path

import pytest

from delibchain.cli import main, verify_chain_cmd
from delibchain.scenario import ScenarioError, load_scenario

SCENARIO = """\
seed: 5
output_dir: out
sweep:
  agents: [3, 4]
  turns: [2]
agent:
  behavior: convergent
  p_adopt: 0.9
  initial_accuracy: 0.7
problems:
  - {id: g1, statement: "6 * 7?", ground_truth: "42"}
  - {id: g2, statement: "5 + 5?", ground_truth: "10"}
  - id: pol
    kind: prioritized
    statement: "Which measures?"
    initial_policies: [[a, b], [a], [a, b, c]]
"""

EXAMPLE = Path(__file__).resolve().parents[1] / "scenarios" / "sweep.yaml"


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "sc.yaml"
    path.write_text(SCENARIO)
    return path


@pytest.fixture
def ran(scenario, capsys):
    assert main(["run", str(scenario)]) == 0
    capsys.readouterr()
    return scenario.parent / "out"


def test_run_writes_outputs(ran):
    names = sorted(p.name for p in ran.iterdir())
    assert names == [
        "chain_a3_t2.bin", "chain_a4_t2.bin", "samples.csv", "summary.csv",
        "transcript_a3_t2.jsonl", "transcript_a4_t2.jsonl",
    ]
    assert len((ran / "samples.csv").read_text().splitlines()) == 1 + 2 * 3


def test_rerun_is_byte_identical(scenario, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(scenario), "--output-dir", str(a)]) == 0
    assert main(["run", str(scenario), "--output-dir", str(b)]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_seed_changes_output(scenario, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", str(scenario), "--output-dir", str(a)])
    main(["run", str(scenario), "--output-dir", str(b), "--seed", "6"])
    assert (a / "chain_a3_t2.bin").read_bytes() != (b / "chain_a3_t2.bin").read_bytes()


def test_env_overrides(scenario, tmp_path):
    sc = load_scenario(scenario, {"DELIBCHAIN_SEED": "99", "DELIBCHAIN_OUTPUT_DIR": str(tmp_path / "x")})
    assert sc.seed == 99 and sc.output_dir == tmp_path / "x"


@pytest.mark.parametrize(
    "text, line",
    [
        ("seed: 1\nsweep: {agents: [3], turns: [0]}\nproblems: [{statement: s}]\n", 2),
        ("seed: 1\nsweep: {agents: [3], turns: [1]}\nproblems:\n  - {statement: s, kind: weird}\n", 4),
        ("sweep: {agents: [3], turns: [1]}\nproblems: [{statement: s}]\n", 1),
        ("seed: [1\n", 2),
    ],
)
def test_config_errors(tmp_path, capsys, text, line):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ScenarioError) as info:
        load_scenario(path, {})
    assert info.value.line == line
    assert main(["run", str(path)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_command_is_config_error(capsys):
    assert main(["frobnicate"]) == 2


def test_verify_chain(ran, capsys):
    chain = ran / "chain_a3_t2.bin"
    assert main(["verify-chain", str(chain)]) == 0
    assert capsys.readouterr().out.startswith("valid, height 3")
    data = bytearray(chain.read_bytes())
    data[len(data) // 2] ^= 0x01
    chain.write_bytes(bytes(data))
    ok, report = verify_chain_cmd(chain)
    assert not ok and report.startswith("invalid at height ")
    assert main(["verify-chain", str(chain)]) == 1


def test_verify_empty_chain(tmp_path, capsys):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert main(["verify-chain", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "valid, height 0"
    assert main(["verify-chain", str(tmp_path / "missing.bin")]) == 2


def test_inspect_block(ran, capsys):
    assert main(["inspect-block", str(ran / "chain_a3_t2.bin"), "1"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["height"] == 1 and info["problem"]["id"] == "g1" and len(info["agents"]) == 3
    assert main(["inspect-block", str(ran / "chain_a3_t2.bin"), "9"]) == 2


def test_metrics(ran, capsys):
    assert main(["metrics", str(ran)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:3] == ["agents", "turns", "deliberations"]
    assert len(out) == 3
    assert main(["metrics", str(ran / "nowhere")]) == 2


def test_bundled_example_loads():
    sc = load_scenario(EXAMPLE, {})
    assert sc.agent_counts == [3, 4, 5] and sc.turn_counts == [2, 3]
