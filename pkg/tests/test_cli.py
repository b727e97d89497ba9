import json
from pathlib import Path

import pytest

from flashsloth.cli import main
from flashsloth.cost import CSV_COLUMNS

GOLDEN = Path(__file__).parent / "golden"
TINY = {
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "d_vis": 4, "grid": 6, "max_seq": 256},
    "embq": {"n_queries": 2, "layer": 1, "dim": 8},
    "train": {"n_train": 4, "n_eval": 2, "stage1_steps": 3, "stage2_steps": 3, "lr1": 0.01},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_demo_default_counts(capsys):
    assert main(["demo"]) == 0
    out = capsys.readouterr().out
    assert "visual=81 queries=9 total_visual_side=90" in out


def test_demo_hd_counts(capsys):
    assert main(["demo", "--hd"]) == 0
    assert "visual=405 queries=9 total_visual_side=414" in capsys.readouterr().out


def test_demo_is_deterministic(capsys, tiny_cfg):
    main(["demo", "--config", tiny_cfg, "--seed", "3"])
    a = capsys.readouterr().out
    main(["demo", "--config", tiny_cfg, "--seed", "3"])
    assert capsys.readouterr().out == a


def test_cost_default_golden(tmp_path, capsys):
    assert main(["cost"]) == 0
    out = capsys.readouterr().out
    assert out == (GOLDEN / "cost_default.csv").read_text()
    assert "\nFlashSloth,90," in out and out.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert main(["cost", "--out", str(tmp_path / "c.json")]) == 0
    rows = json.loads((tmp_path / "c.json").read_text())
    assert rows[-1]["method"] == "FlashSloth" and rows[-1]["token_number"] == 90


def test_gradcheck_passes_on_tiny_model(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for group in ("llm", "sap", "projector", "embq", "queries"):
        assert group in out
    assert "PASS" in out


def test_train_writes_curves_and_keeps_frozen_checksum(tmp_path, tiny_cfg, capsys):
    assert main(["train", "--config", tiny_cfg, "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("stage1"))
    before, after = line.split("frozen_checksum ")[1].split(" -> ")
    assert before == after
    for name in ("stage1_loss.csv", "stage2_loss.csv"):
        lines = (tmp_path / "run" / name).read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 4
    assert (tmp_path / "run" / "model.slth").read_bytes()[:4] == b"SLTH"


def test_exit_codes(tmp_path, tiny_cfg, capsys):
    assert main(["ablate", "--config", tiny_cfg]) == 1
    assert main(["ablate", "--axis", "depth", "--config", tiny_cfg]) == 1
    assert "query_count" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["serve"])
    assert e.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"embq": {"dimension": 4}}')
    assert main(["demo", "--config", str(bad)]) == 2
    assert "embq.dimension" in capsys.readouterr().err
    assert main(["demo", "--config", str(tmp_path / "missing.json")]) == 2
    cap = dict(TINY, model=dict(TINY["model"], max_seq=10))
    small = tmp_path / "small.json"
    small.write_text(json.dumps(cap))
    assert main(["demo", "--config", str(small)]) == 2
    assert "CapacityError" in capsys.readouterr().err


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    import flashsloth.cli as cli
    from flashsloth.gradcheck import GradReport

    monkeypatch.setattr(cli, "gradcheck", lambda *a, **k: GradReport({"embed": 1.0}, {"llm": 1.0}, 1))
    assert main(["gradcheck"]) == 3
