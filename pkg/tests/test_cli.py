import json
import subprocess
import sys

import pytest
from conftest import TOY

from efficio.cli import main
from efficio.model import ParamReport

SMALL_RUN = {
    "model": {"embedding_size": 8, "hidden_size": 16, "num_layers": 2, "num_heads": 2, "d_ff": 32,
              "max_seq_len": 16, "group_count": 1},
    "train": {"max_steps": 8, "warmup_steps": 2, "batch_size": 4, "seq_len": 16, "eval_interval": 4,
              "eval_windows": 2, "checkpoint_interval": 4, "lr_max": 3e-3},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch, corpus_text):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "corpus.txt").write_text(corpus_text[:6000])
    (tmp_path / "c.json").write_text(json.dumps(SMALL_RUN))
    (tmp_path / "toy.json").write_text(json.dumps(TOY.to_dict()))
    return tmp_path


def listing(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*"))


def test_count_params_toy(workdir, capsys):
    assert main(["count-params", "--config", "toy.json"]) == 0
    assert "232" in capsys.readouterr().out
    assert main(["count-params", "--config", "toy.json", "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total_unique"] == 232
    assert list(d) == [f.name for f in ParamReport.__dataclass_fields__.values()]


def test_count_params_bad_group_count(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({**TOY.to_dict(), "group_count": 5}))
    assert main(["count-params", "--config", "bad.json"]) == 1
    assert "group_count" in capsys.readouterr().err


def test_unknown_key_and_bad_json(workdir, capsys):
    (workdir / "typo.json").write_text(json.dumps({"hiden_size": 4}))
    assert main(["count-params", "--config", "typo.json"]) == 1
    assert "hiden_size" in capsys.readouterr().err
    (workdir / "nested.json").write_text(json.dumps({"model": {"lr_max": 1.0}}))
    assert main(["count-params", "--config", "nested.json"]) == 1
    (workdir / "broken.json").write_text("{")
    assert main(["count-params", "--config", "broken.json"]) == 1


def test_flags_override_file(workdir, capsys):
    assert main(["count-params", "--config", "toy.json", "--set", "vocab_size=12", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["embedding_params"] == 12 * 2 + 2 * 4


def test_train_is_deterministic_and_writes_only_under_out(workdir, capsys):
    before = listing(workdir)
    for out in ("r1", "r2"):
        assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--seed", "7",
                     "--out", out, "--quiet"]) == 0
    assert (workdir / "r1/loss.csv").read_bytes() == (workdir / "r2/loss.csv").read_bytes()
    new = set(listing(workdir)) - set(before)
    assert all(p.startswith(("r1", "r2")) for p in new)
    assert {"manifest.json", "loss.csv", "model.gpte", "step0000004.gpte"} <= set(listing(workdir / "r1"))
    manifest = json.loads((workdir / "r1/manifest.json").read_text())
    assert manifest["train"]["seed"] == 7 and manifest["model"]["vocab_size"] == 256


def test_manifest_reproduces_run(workdir):
    assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "a", "--quiet"]) == 0
    assert main(["train", "--config", "a/manifest.json", "--out", "b", "--quiet"]) == 0
    assert (workdir / "a/loss.csv").read_bytes() == (workdir / "b/loss.csv").read_bytes()


def test_resume_continues_the_same_trajectory(workdir):
    assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "full", "--quiet"]) == 0
    assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "part", "--quiet",
                 "--set", "max_steps=8", "--resume", "full/step0000004.gpte"]) == 0
    full = (workdir / "full/loss.csv").read_text().splitlines()
    part = (workdir / "part/loss.csv").read_text().splitlines()
    assert part[0] == full[0] and part[1:] == full[5:]


def test_eval_and_generate(workdir, capsys):
    main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "r", "--quiet"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "r/model.gpte", "--data", "corpus.txt", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["perplexity"] >= 1
    assert main(["generate", "--checkpoint", "r/model.gpte", "--temperature", "0", "--prompt", "ab",
                 "--max-new", "8", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["ids"]) == 10 and out["ids"][:2] == [97, 98]


def test_char_tokenizer_run(workdir, capsys):
    assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "ch", "--quiet",
                 "--tokenizer", "char"]) == 0
    manifest = json.loads((workdir / "ch/manifest.json").read_text())
    assert manifest["tokenizer"]["kind"] == "char_vocab"
    assert manifest["model"]["vocab_size"] == len(manifest["tokenizer"]["vocab"]) + 1


def test_sweep_command(workdir, capsys):
    assert main(["sweep", "--config", "c.json", "--data", "corpus.txt", "--out", "sw",
                 "--group-counts", "1", "2", "--steps", "2"]) == 0
    lines = (workdir / "sw/sweep.csv").read_text().splitlines()
    assert lines[0] == "mode,H,G,E,factorized,n_params,train_loss,val_ppl,last_tok_acc,tok_per_s,seconds"
    assert len(lines) == 3


def test_fit_config_command(workdir, capsys):
    assert main(["fit-config", "--config", "toy.json", "--target", "232", "--tolerance", "0",
                 "--layers", "2", "3", "--embedding-sizes", "1", "2", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["num_layers"] == 2 and rows[0]["n_params"] == 232


def test_grad_check_command_passes(capsys):
    assert main(["grad-check"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv,code", [
    (["train", "--config", "c.json", "--data", "missing.txt", "--out", "x"], 2),
    (["train", "--config", "c.json", "--out", "x"], 1),
    (["train", "--config", "c.json", "--data", "corpus.txt"], 1),
    (["eval", "--checkpoint", "missing.gpte", "--data", "corpus.txt"], 2),
    (["count-params", "--config", "missing.json"], 1),
    (["frobnicate"], 1),
])
def test_error_exit_codes(workdir, argv, code):
    assert main(argv) == code


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(workdir, capsys):
    assert main(["train", "--config", "c.json", "--data", "corpus.txt", "--out", "nan", "--quiet",
                 "--set", "lr_max=1e300", "--set", "clip_norm=null"]) == 3
    assert "step" in capsys.readouterr().err


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "efficio", "count-params", "--config", "toy.json", "--json"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["total_unique"] == 232
