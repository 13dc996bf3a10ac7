import csv
import json
import subprocess
import sys

import pytest

from edgevit import budget
from edgevit.cli import main
from edgevit.container import load_model

TINY = ["--patch-size", "4", "--depth", "2", "--embed-dim", "8", "--heads", "2", "--qk", "8",
        "--v", "8", "--expansion", "16", "--epochs", "2", "--batch-size", "16"]
QUICK = ["--recovery-epochs", "1", "--batch-size", "16"]


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", d / "spec.json", "--num-classes", 4, "--samples-per-class", 12,
               "--image-size", 8) == 0
    assert run("train", "--data", d / "spec.json", "--out", d / "base.nwv", "--report",
               d / "train.json", *TINY) == 0
    (d / "task.json").write_text(json.dumps({"classes": [2, 0]}))
    (d / "task2.json").write_text(json.dumps({"classes": [1, 3]}))
    return d


def test_train_outputs(work):
    model = load_model(work / "base.nwv")
    assert model.config.embed_dim == 8 and model.config.num_classes == 4
    rep = json.loads((work / "train.json").read_text())
    assert 0 <= rep["eval_accuracy"] <= 1 and rep["run"]["epochs"] == 2


def test_derive_and_report(work):
    assert run("derive", "--model", work / "base.nwv", "--data", work / "spec.json", "--task",
               work / "task.json", "--alpha", 0.5, "--out", work / "edge.nwv", "--report",
               work / "edge.json", *QUICK) == 0
    edge, base = load_model(work / "edge.nwv"), load_model(work / "base.nwv")
    rep = json.loads((work / "edge.json").read_text())
    assert edge.class_ids == [2, 0] and rep["reached"]
    # the reported rate is recomputable from the saved model alone
    assert rep["achieved_rate"] == 1 - budget.params_a2(edge.config) / budget.params_a2(base.config)


def test_derive_alpha_zero(work):
    assert run("derive", "--model", work / "base.nwv", "--data", work / "spec.json", "--task",
               work / "task.json", "--alpha", 0, "--out", work / "a0.nwv", *QUICK) == 0
    assert load_model(work / "a0.nwv").config.heads == [2, 2]


def test_random_prune(work):
    assert run("random-prune", "--model", work / "base.nwv", "--data", work / "spec.json",
               "--task", work / "task.json", "--alpha", 0.5, "--out", work / "rnd.nwv", "--report",
               work / "rnd.json", *QUICK) == 0
    assert json.loads((work / "rnd.json").read_text())["achieved_rate"] >= 0.5


def test_unreachable_exit_code(work):
    code = run("derive", "--model", work / "base.nwv", "--data", work / "spec.json", "--task",
               work / "task.json", "--alpha", 0.95, "--max-iterations", 1, "--out",
               work / "un.nwv", "--report", work / "un.json", *QUICK)
    assert code == 2
    assert (work / "un.nwv").exists()
    assert not json.loads((work / "un.json").read_text())["reached"]


def test_bench(work, capsys):
    assert run("bench", "--model", work / "base.nwv", "--batch", 4, "--repeats", 1, "--warmup",
               0) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["repeats"] == 1 and doc["iqr_ms"] == 0 and doc["median_ms"] > 0
    assert doc["kernel_backend"] in ("numba", "numpy")


def test_analyze_similarity_is_one_on_itself(work):
    out = work / "sim.json"
    assert run("analyze", "--model", work / "base.nwv", "--data", work / "spec.json", "--mode",
               "similarity", "--task", work / "task.json", "--task", work / "task.json",
               "--task", work / "task2.json", "--out", out) == 0
    m = json.loads(out.read_text())["matrix"]
    assert m[0][0] == pytest.approx(1.0) and m[0][1] == pytest.approx(1.0)
    assert m[0][2] == pytest.approx(m[2][0])


def test_analyze_scores_csv(work):
    out = work / "scores.csv"
    assert run("analyze", "--model", work / "base.nwv", "--data", work / "spec.json", "--mode",
               "scores", "--kind", "neuron", "--task", work / "task.json", "--format", "csv",
               "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["task", "layer", "index", "score"] and len(rows) == 1 + 32


def test_analyze_neurons(work):
    out = work / "neurons.json"
    assert run("analyze", "--model", work / "base.nwv", "--data", work / "spec.json", "--mode",
               "neurons", "--neurons", "0:3,1:0", "--k", 5, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert sorted(doc["samples"]) == ["0:3", "1:0"] and all(len(v) == 5 for v in doc["samples"].values())


def test_analyze_depth_probes(work):
    out = work / "probes.csv"
    assert run("analyze", "--model", work / "base.nwv", "--data", work / "spec.json", "--mode",
               "depth-probes", "--task", work / "task.json", "--probe-epochs", 1, "--format", "csv",
               "--save-probed", work / "probed.nwv", "--out", out) == 0
    assert len(list(csv.reader(out.open()))) == 3
    assert len(load_model(work / "probed.nwv").aux) == 8


def test_usage_errors(work):
    assert run("derive", "--model", work / "base.nwv") == 64
    assert run("derive", "--model", work / "base.nwv", "--task", work / "task.json", "--alpha",
               1.5, "--out", work / "x.nwv") == 64
    assert run("bench", "--model", work / "base.nwv", "--repeats", 0) == 64
    assert run("nonsense") == 64


def test_io_and_format_errors(work):
    assert run("bench", "--model", work / "missing.nwv") == 1
    (work / "bad.nwv").write_bytes(b"NOTAVIT!" + b"\0" * 20)
    assert run("bench", "--model", work / "bad.nwv") == 3
    (work / "bad.json").write_text("{classes: ")
    assert run("derive", "--model", work / "base.nwv", "--data", work / "spec.json", "--task",
               work / "bad.json", "--alpha", 0.5, "--out", work / "y.nwv") == 3


def test_console_script_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "edgevit.cli", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("edgevit ")
