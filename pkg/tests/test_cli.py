import json
import math
import socket

import pytest
import yaml

from dptabicl.cli import EXIT_BACKEND, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from toy import toy_config, write_toy


def run(argv):
    try:
        return main(argv)
    except SystemExit as e:
        return e.code


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["bogus"]) == EXIT_USAGE
    assert run(["amplify", "--epsilon", "1"]) == EXIT_USAGE
    assert run(["demos-gdp", "--data", "x.csv", "--epsilon", "1"]) == EXIT_USAGE


def test_amplify_and_ttest(capsys):
    assert run(["amplify", "--epsilon", "5", "--n", "300", "--N", "598"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == f"{math.log(1 + 300 / 598 * (math.exp(5) - 1)):.6f}"
    assert run(["amplify", "--epsilon", "5", "--n", "900", "--N", "598"]) == EXIT_DATA
    assert run(["ttest", "--a", "1,2,3,5", "--b", "1,1,2,2"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("t=1.98")
    assert run(["ttest", "--a", "1,2", "--b", "1,2"]) == EXIT_DATA


def test_ldp_chain(blood_csv, tmp_path, capsys):
    p = tmp_path / "p.csv"
    assert run(["perturb", "--dataset", "blood", "--data", str(blood_csv), "--epsilon", "10", "--out", str(p)]) == 0
    meta = yaml.safe_load((tmp_path / "p.csv.meta.yaml").read_text())
    assert meta["provenance"] == "perturbed" and len(meta["allocation"]) == 5
    d = tmp_path / "dist.json"
    assert run(["reconstruct", "--perturbed", str(p), "--out", str(d)]) == 0
    payload = json.loads(d.read_text())
    assert payload["dims"] == [2, 2, 2, 2, 2]
    assert abs(sum(payload["cells"]) - 1) < 1e-9
    assert run(["demos-ldp", "--distribution", str(d), "--k", "3", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("A blood donor") == 3
    assert run(["reconstruct", "--perturbed", str(blood_csv)]) == EXIT_USAGE


def test_gdp_demos_and_render(blood_csv, capsys):
    assert run(["demos-gdp", "--dataset", "blood", "--data", str(blood_csv), "--epsilon", "5", "--k", "4"]) == 0
    captured = capsys.readouterr()
    assert captured.out.count("Answer:") == 4
    assert "privacy spent" in captured.err
    assert run(["render", "--dataset", "blood", "frequency=2", "monetary=500", "recency=11", "time=21"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("Yes or No? Answer:")
    assert run(["render", "--dataset", "blood", "frequency=2"]) == EXIT_USAGE
    assert run(["demos-gdp", "--dataset", "nope", "--data", str(blood_csv), "--epsilon", "5"]) == EXIT_DATA


def test_run_and_report(tmp_path, capsys):
    write_toy(tmp_path)
    cfg = toy_config(tmp_path, epsilons=[1, "inf"], ks=[1, 2])
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump(cfg))
    out = tmp_path / "out"
    assert run(["run", "--config", str(tmp_path / "exp.yaml"), "--out", str(out), "--trials", "3"]) == 0
    text = capsys.readouterr().out
    assert "[ldp]" in text
    assert len((out / "report.csv").read_text().splitlines()) == 1 + 2 * 2 * 3
    assert run(["report", "--csv", str(out / "report.csv")]) == 0
    assert capsys.readouterr().out == text
    (tmp_path / "broken.yaml").write_text(yaml.safe_dump({**cfg, "pipeline": "nope"}))
    assert run(["run", "--config", str(tmp_path / "broken.yaml")]) == EXIT_DATA


def test_run_backend_failure_exit_code(tmp_path):
    write_toy(tmp_path)
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    cfg = toy_config(tmp_path, backend="http",
                     backend_settings={"endpoint": f"http://127.0.0.1:{port}/v1/completions", "retries": 0})
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump(cfg))
    assert run(["run", "--config", str(tmp_path / "exp.yaml")]) == EXIT_DATA  # not opted in
    assert run(["run", "--config", str(tmp_path / "exp.yaml"), "--live"]) == EXIT_BACKEND
