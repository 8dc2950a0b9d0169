import json
import subprocess
import sys

import pytest

from quantbench.cli import KEYS, build_parser, main, resolve_config
from quantbench.errors import ConfigError

BLOBS = ["--task", "blobs", "--classes", "3", "--n_per_class", "60", "--dims", "4", "--hidden", "12",
         "--epochs", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def trained(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train_fp", "--out", out, *BLOBS)
    assert code == 0
    return out


def test_full_chain(trained, capsys):
    out = trained
    assert run(capsys, "calibrate", "--out", out)[0] == 0
    assert run(capsys, "quantize", "--out", out, "--weight_bits", 4, "--act_bits", 6)[0] == 0
    code, text, _ = run(capsys, "eval", "--out", out)
    assert code == 0 and text.startswith("quantized accuracy")
    code, card, _ = run(capsys, "card", "--out", out)
    assert code == 0 and card.count("\n") == 7
    for name in ("config.json", "train_fp.config.json", "eval.timing.json", "model.json", "model.bin",
                 "calibrate.json", "eval.json", "eval.csv", "run_model.card.md", "run_model.card.txt"):
        assert (out / name).exists(), name
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["task"] == "blobs" and cfg["weight_bits"] == 4   # later commands inherit earlier flags
    assert "Unlabeled calibration data" in (out / "run_model.card.md").read_text()
    assert "seconds" not in (out / "run_model.card.txt").read_text()


def test_eval_twice_is_identical(trained, capsys):
    run(capsys, "calibrate", "--out", trained)
    first = run(capsys, "eval", "--out", trained)
    csv1 = (trained / "eval.csv").read_bytes()
    second = run(capsys, "eval", "--out", trained)
    assert first == second and (trained / "eval.csv").read_bytes() == csv1


def test_learn_bits_without_penalties_reaches_the_maximum(trained, capsys):
    code, _, _ = run(capsys, "learn_bits", "--out", trained, "--lambda1", 0, "--lambda2", 0, "--mpq_steps", 40,
                     "--allowed_bits", "2,4,8")
    assert code == 0
    alloc = json.loads((trained / "allocation.json").read_text())
    assert set(alloc["bits_w"].values()) == {8} and set(alloc["bits_a"].values()) == {8}
    history = (trained / "history.jsonl").read_text().splitlines()
    assert len(history) == 40 and "ema_accuracy" in json.loads(history[0])
    assert (trained / "learn_bits_model.card.txt").exists()


def test_unmet_budget_has_its_own_exit_code(trained, capsys):
    code, _, err = run(capsys, "learn_bits", "--out", trained, "--mpq_steps", 5, "--allowed_bits", "4,8",
                       "--target_w", 3, "--target_a", 3)
    assert code == 3 and err.startswith("error:")
    assert json.loads((trained / "allocation.json").read_text())["meets_constraints"] is False


def test_errors_are_one_line(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out", tmp_path / "empty")
    assert code == 1 and err.startswith("error: model not found") and err.count("\n") == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"weight_bitz": 3}))
    code, _, err = run(capsys, "train_fp", "--out", tmp_path / "x", "--config", bad)
    assert code == 1 and "weight_bitz" in err
    code, _, err = run(capsys, "calibrate", "--out", tmp_path / "x", "--config", tmp_path / "missing.json")
    assert code == 1 and "not found" in err


def test_unknown_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train_fp", "--weight_bitz", "3"])
    assert e.value.code == 2


def test_config_layering_and_env_seed(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"out": str(tmp_path / "o"), "epochs": 2, "lr": 0.5}))
    cfg = resolve_config({"lr": "0.1"}, str(f), env={"QUANTBENCH_SEED": "17"})
    assert cfg["epochs"] == 2 and cfg["lr"] == 0.1 and cfg["seed"] == 17
    assert resolve_config({"seed": "3"}, str(f), env={"QUANTBENCH_SEED": "17"})["seed"] == 3
    with pytest.raises(ConfigError):
        resolve_config({"nope": 1}, None, env={})


def test_help_lists_every_key():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for key in KEYS:
            assert f"--{key}" in text, (name, key)


def test_observe_writes_tables_and_cards(tmp_path, capsys):
    out = tmp_path / "obs"
    code, text, _ = run(capsys, "observe", "obs8", "--out", out, "--seeds", 2, "--sweep", "8")
    assert code == 0 and text.startswith("config,")
    for name in ("obs8_0.csv", "obs8_1.csv", "obs8_0.json", "obs8_summary.csv", "obs8_summary.json"):
        assert (out / name).exists(), name
    assert list(out.glob("obs8_*.card.md")) and list(out.glob("obs8_*.card.txt"))


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "quantbench.cli", "eval", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("error:")
