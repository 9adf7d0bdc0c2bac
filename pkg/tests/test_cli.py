import json

from click.testing import CliRunner

from fairvic.cli import main


def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


def test_run_writes_report(tmp_path):
    res = invoke("run", "--dataset", "german", "--seeds", "0,1", "--epochs", "2",
                 "--out", str(tmp_path), "--counterfactual")
    assert res.exit_code == 0, res.output
    assert "accuracy" in res.output and "counterfactual AD" in res.output
    assert any(p.suffix == ".json" for p in tmp_path.iterdir())


def test_unknown_dataset_gives_json_error(tmp_path):
    res = invoke("run", "--dataset", "mnist", "--seeds", "1", "--epochs", "1", "--out", str(tmp_path))
    assert res.exit_code == 1
    record = json.loads(res.stderr.strip().splitlines()[-1])
    assert set(record) == {"error", "message"}
    assert "mnist" in record["message"]


def test_bad_lambdas_rejected(tmp_path):
    res = invoke("run", "--dataset", "german", "--seeds", "1", "--epochs", "1",
                 "--lambdas", "0.5,0.5,0.5,0.5", "--out", str(tmp_path))
    assert res.exit_code == 1
    assert json.loads(res.stderr.strip())["error"]


def test_audit(tmp_path):
    csv = tmp_path / "preds.csv"
    csv.write_text("prob,label,group\n0.9,1,1\n0.2,0,1\n0.7,1,0\n0.4,1,0\n")
    out = tmp_path / "audit.json"
    res = invoke("audit", str(csv), "--out", str(out))
    assert res.exit_code == 0
    rec = json.loads(out.read_text())
    assert rec["statistical_parity"] == 0.0
    assert rec["disparate_impact"] == 1.0
    assert rec["accuracy"] == 0.75


def test_audit_rejects_non_binary_group(tmp_path):
    csv = tmp_path / "preds.csv"
    csv.write_text("prob,label,group\n0.9,1,1\n0.2,0,2\n")
    res = invoke("audit", str(csv))
    assert res.exit_code == 1
    assert "row 1" in json.loads(res.stderr.strip())["message"]


def test_embeddings_command(tmp_path):
    res = invoke("embeddings", "--dataset", "german", "--seeds", "3", "--epochs", "1",
                 "--out", str(tmp_path))
    assert res.exit_code == 0
    (path,) = tmp_path.iterdir()
    assert "seed0" in path.name
    assert path.read_text().splitlines()[0] == "x0,x1,label,group"
