import json
import subprocess
import sys

import pytest

from rhythmid import cli
from rhythmid.facs import load_vocabulary, read_facs_corpus


def call(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def pipeline(tmp_path, capsys):
    d = tmp_path / "syn"
    code, out, _ = call(capsys, "synth", "gen", "--out-dir", d, "--n-speakers", 3, "--utts-per-speaker", 8,
                        "--test-utts-per-speaker", 3, "--xvec-dim", 6)
    assert code == 0 and summary(out)["test_utterances"] == 9
    assert call(capsys, "vocab", "build", "--alignments", d / "train.jsonl", "--out", tmp_path / "v.tsv")[0] == 0
    for part in ("train", "test"):
        code, out, _ = call(capsys, "facs", "encode", "--alignments", d / f"{part}.jsonl", "--vocab",
                            tmp_path / "v.tsv", "--out", tmp_path / f"{part}.facs")
        assert code == 0
    return tmp_path


def test_full_pipeline(pipeline, capsys):
    p = pipeline
    vocab = load_vocabulary(p / "v.tsv")
    assert len(read_facs_corpus(p / "train.facs", vocab)) == 24
    small = ["--epochs", 2, "--batch-size", 8, "--d-model", 8, "--n-heads", 2, "--n-layers", 1, "--max-tokens", 400]
    code, out, _ = call(capsys, "train", "rhythm", "--facs", p / "train.facs", "--vocab", p / "v.tsv",
                        "--run-dir", p / "r", *small)
    assert code == 0 and summary(out)["mode"] == "rhythm_only"
    code, out, _ = call(capsys, "train", "fusion", "--facs", p / "train.facs", "--vocab", p / "v.tsv",
                        "--xvectors", p / "syn" / "xvectors.tsv", "--rhythm-checkpoint", p / "r" / "best.ckpt",
                        "--run-dir", p / "f", "--d-proj", 4, *small)
    assert code == 0 and summary(out)["mode"] == "fusion"
    code, out, _ = call(capsys, "train", "xvec-baseline", "--facs", p / "train.facs",
                        "--xvectors", p / "syn" / "xvectors.tsv", "--run-dir", p / "b", "--epochs", 3)
    assert code == 0
    code, out, _ = call(capsys, "eval", "--checkpoint", p / "r" / "best.ckpt", "--facs", p / "test.facs",
                        "--vocab", p / "v.tsv", "--out", p / "report.json", "--confusion-csv", p / "cm.csv")
    report = summary(out)
    assert code == 0 and report["n_samples"] == 9
    assert json.loads((p / "report.json").read_text()) == report
    assert (p / "cm.csv").read_text().startswith("true\\pred,0,1,2")
    for ckpt, extra in (("f", ["--vocab", p / "v.tsv"]), ("b", [])):
        code, out, _ = call(capsys, "eval", "--checkpoint", p / ckpt / "best.ckpt", "--facs", p / "test.facs",
                            "--xvectors", p / "syn" / "xvectors.tsv", *extra)
        assert code == 0 and summary(out)["n_samples"] == 9


def test_decode(pipeline, capsys):
    code, _, _ = call(capsys, "facs", "decode", "--facs", pipeline / "test.facs", "--vocab", pipeline / "v.tsv",
                      "--out", pipeline / "runs.jsonl")
    assert code == 0
    first = json.loads((pipeline / "runs.jsonl").read_text().splitlines()[0])
    assert first["runs"][0] == ["*", 2]


def test_missing_dataset_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run(["train", "rhythm", "--vocab", "v.tsv", "--run-dir", "r"])
    assert exc.value.code == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    code, out, err = call(capsys, "facs", "encode", "--alignments", tmp_path / "none.jsonl",
                          "--vocab", tmp_path / "v.tsv", "--out", tmp_path / "o")
    assert code == 1 and out == "" and "error" in err
    assert not (tmp_path / "o").exists()


def test_eval_rejects_mismatched_vocabulary(pipeline, capsys):
    small = ["--epochs", 1, "--d-model", 8, "--n-heads", 2, "--n-layers", 1, "--max-tokens", 400]
    call(capsys, "train", "rhythm", "--facs", pipeline / "train.facs", "--vocab", pipeline / "v.tsv",
         "--run-dir", pipeline / "r", *small)
    other = pipeline / "v2.tsv"
    other.write_text((pipeline / "v.tsv").read_text().replace("\tz\n", "\tzz\n"))
    code, _, err = call(capsys, "eval", "--checkpoint", pipeline / "r" / "best.ckpt", "--facs",
                        pipeline / "test.facs", "--vocab", other)
    assert code == 1 and "vocabulary" in err


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "17")
    args = cli.build_parser().parse_args(["train", "rhythm", "--facs", "f", "--vocab", "v", "--run-dir", "r"])
    assert args.seed == 17


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.run(["train", "rhythm", "--help"])
    sub = " ".join(capsys.readouterr().out.split())
    for needle in ("default: 32", "default: 0.0001", "default: 300", "default: 128", "default: 2"):
        assert needle in sub


def test_gradcheck_command(capsys):
    code, out, err = call(capsys, "gradcheck", "--seeds", 1)
    doc = summary(out)
    assert code == 0 and doc["passed"] and doc["max_rel_error"]["band_scores"] < 1e-4
    assert "encoder_2_layer" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rhythmid", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "rhythmid" in proc.stdout
