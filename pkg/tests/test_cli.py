import json
import logging
from pathlib import Path

import numpy as np
import pytest

from cdrode import cli
from cdrode import data_io as dio
from cdrode.metrics import DesignResult

CORPUS = Path(__file__).resolve().parents[1] / "data" / "corpus"
TINY = {
    "seed": 0,
    "epochs": 2,
    "batch_size": 5,
    "solver": {"t_end": 20.0, "steps": 4},
    "model": {"widths": [8, 16, 8], "encoder_widths": [8, 16]},
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d.jsonl"
    assert cli.main(["featurize", "--task", str(CORPUS / "tasks.json"), "--out", str(out)]) == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.mark.parametrize("cmd", ["featurize", "train", "generate", "evaluate"])
def test_help_documents_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = next(a for a in cli.build_parser()._subparsers._group_actions[0].choices.items() if a[0] == cmd)[1]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        assert action.help is not None or action.option_strings == ["-h", "--help"] or action.dest in ("mode",)


def test_featurize_outcomes(tmp_path, capsys):
    out = tmp_path / "one.jsonl"
    assert cli.main(["featurize", "--task", str(CORPUS / "toy1.task.json"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1
    assert "cdr_len=8" in capsys.readouterr().out

    good = json.loads((CORPUS / "toy1.task.json").read_text())
    bad = dict(good, cdr_range=[25, 40], name="bad")
    tasks = tmp_path / "tasks.json"
    tasks.write_text(json.dumps([dict(good, structure=str(CORPUS / "toy1.pdb")), dict(bad, structure=str(CORPUS / "toy1.pdb"))]))
    two = tmp_path / "two.jsonl"
    assert cli.main(["featurize", "--task", str(tasks), "--out", str(two)]) == 2
    assert len(two.read_text().splitlines()) == 1

    tasks.write_text(json.dumps(dict(bad, structure=str(CORPUS / "toy1.pdb"))))
    assert cli.main(["featurize", "--task", str(tasks), "--out", str(tmp_path / "none.jsonl")]) == 1


def test_featurize_fatal_names_range(tmp_path, caplog):
    t = json.loads((CORPUS / "toy1.task.json").read_text())
    p = tmp_path / "t.json"
    p.write_text(json.dumps(dict(t, cdr_range=[25, 40])))
    with caplog.at_level(logging.ERROR):
        code = cli.main(["featurize", "--task", str(p), "--pdb", str(CORPUS / "toy1.pdb"), "--out", str(tmp_path / "x.jsonl")])
    assert code == 1 and "[25, 40]" in caplog.text


def test_train_rejects_bad_config_before_work(tmp_path, dataset):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(dict(TINY, learning_rate=1.0)))
    out = tmp_path / "m.abode"
    assert cli.main(["train", "--data", str(dataset), "--config", str(p), "--out", str(out)]) == 1
    p.write_text(json.dumps(dict(TINY, solver={"t_end": 20.0, "tolerance": 1})))
    assert cli.main(["train", "--data", str(dataset), "--config", str(p), "--out", str(out)]) == 1
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["train", "--data", str(empty), "--out", str(out)]) == 1
    assert not out.exists()


def test_train_deterministic_and_history(tmp_path, dataset, tiny_config):
    paths = []
    for run in ("a", "b"):
        out = tmp_path / run / "m.abode"
        out.parent.mkdir()
        args = ["train", "--data", str(dataset), "--config", str(tiny_config), "--out", str(out), "--epochs", "3"]
        assert cli.main(args + ["--mask-antigen", "0.1"]) == 0
        paths.append(out)
    a, b = paths
    assert a.read_bytes() == b.read_bytes()
    ha, hb = cli.history_path(a), cli.history_path(b)
    assert ha.read_bytes() == hb.read_bytes()
    hist = json.loads(ha.read_text())
    assert len(hist["epochs"]) == 3


def test_train_modes_and_framework_flag(tmp_path, dataset, tiny_config):
    out = tmp_path / "m.abode"
    base = ["train", "--data", str(dataset), "--config", str(tiny_config), "--out", str(out), "--epochs", "1"]
    assert cli.main(base + ["--mode", "unconditional", "--framework-conditioning", "on"]) == 0
    params, header = dio.load_model(out)
    assert params.config.framework_conditioning and header["train"]["mode"] == "unconditional"


def test_generate_zero_model_gives_alanine(tmp_path, dataset, tiny_config):
    model = tmp_path / "m.abode"
    assert cli.main(["train", "--data", str(dataset), "--config", str(tiny_config), "--out", str(model), "--epochs", "0"]) == 0
    pred = tmp_path / "p.jsonl"
    assert cli.main(["generate", "--model", str(model), "--data", str(dataset), "--out", str(pred)]) == 0
    rows = [json.loads(line) for line in pred.read_text().splitlines()]
    assert len(rows) == 5
    assert all(r["sequence"] == "A" * 8 for r in rows)
    assert set(rows[0]) >= {"sequence", "probabilities", "coords", "confidence"}
    assert cli.main(["generate", "--model", str(tmp_path / "absent"), "--data", str(dataset), "--out", str(pred)]) == 1


def write_preds(path, designs, names):
    path.write_text("".join(json.dumps({"name": n, **d.to_json()}) + "\n" for n, d in zip(names, designs)))


def test_evaluate_perfect_and_uniform(tmp_path, dataset, capsys):
    truth = dio.read_dataset(dataset)
    names = [cx.name for cx in truth]
    perfect = [
        DesignResult(cx.cdr_sequence, np.eye(20)[["ACDEFGHIKLMNPQRSTVWY".index(a) for a in cx.cdr_sequence]], cx.cdr_coords, np.ones(8))
        for cx in truth
    ]
    pred, rep = tmp_path / "p.jsonl", tmp_path / "r.json"
    write_preds(pred, perfect, names)
    assert cli.main(["evaluate", "--pred", str(pred), "--truth", str(dataset), "--out", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["aar"] == 100.0 and r["rmsd"] < 1e-9 and r["ppl"] == 1.0
    assert "AAR" in capsys.readouterr().out

    uniform = [DesignResult("A" * 8, np.full((8, 20), 0.05), cx.cdr_coords, np.full(8, 0.05)) for cx in truth]
    write_preds(pred, uniform, names)
    assert cli.main(["evaluate", "--pred", str(pred), "--truth", str(dataset), "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["ppl"] == 20.0


def test_evaluate_length_mismatch_names_sample(tmp_path, dataset, caplog):
    truth = dio.read_dataset(dataset)
    short = [DesignResult("A" * 7, np.full((7, 20), 0.05), cx.cdr_coords[:7], np.full(7, 0.05)) for cx in truth]
    pred = tmp_path / "p.jsonl"
    write_preds(pred, short, [cx.name for cx in truth])
    with caplog.at_level(logging.ERROR):
        assert cli.main(["evaluate", "--pred", str(pred), "--truth", str(dataset), "--out", str(tmp_path / "r.json")]) == 1
    assert "toy1" in caplog.text


def test_threads_flag_and_env(monkeypatch, tmp_path, dataset):
    assert cli.main(["--threads", "0", "evaluate", "--pred", "x", "--truth", "y", "--out", "z"]) == 1
    monkeypatch.setenv("ABODE_THREADS", "2")
    monkeypatch.setenv("OMP_NUM_THREADS", "8")
    cli._set_threads(None)
    import os

    assert os.environ["OMP_NUM_THREADS"] == "2"
