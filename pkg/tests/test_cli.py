import csv
import json
import subprocess
import sys

import pytest

from autometa.cli import load_params, main, parse_args, read_config_file
from autometa.search import checkpoint_load
from autometa.tasks import load_dataset

TINY = ["--filters", "2", "--stages", "1", "--query", "3", "--test-classes", "5",
        "--inner-iterations", "1", "--meta-batch", "2", "--eval-inner-iterations", "1"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "glyphs.fsds"
    assert main(["gen-data", "--seed", "1", "--classes", "12", "--per-class", "8", "--size", "8",
                 "--out", str(path)]) == 0
    return path


def test_gen_data(data):
    ds = load_dataset(data)
    assert ds.pixels.shape == (12, 8, 8, 8)


@pytest.fixture(scope="module")
def search_out(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("search")
    argv = ["search", "--blocks", "2", "--beam", "2", "--eval-episodes", "2", "--outer-iterations", "1",
            "--final-iterations", "2", "--final-episodes", "3", "--dataset", str(data), "--out", str(out),
            *TINY]
    assert main(argv) == 0
    return out, argv


def test_search_writes_everything(search_out):
    out, _ = search_out
    for name in ("state.json", "report.json", "trace.csv", "params.json", "depth_hist.csv",
                 "scores.csv", "best_cell.json", "depth_summary.json"):
        assert (out / name).exists(), name
    state = checkpoint_load(out / "state.json")
    assert len(state.history) == 55 + 2
    with (out / "trace.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["outer_iter", "meta_test_acc", "ci95", "wall_seconds"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]


def test_search_resume_is_a_no_op_when_finished(search_out, tmp_path):
    out, argv = search_out
    before = (out / "state.json").read_bytes()
    assert main([*argv, "--resume", "--skip-final"]) == 0
    assert (out / "state.json").read_bytes() == before


def test_train_and_eval(search_out, data, tmp_path, capsys):
    out, _ = search_out
    cell = tmp_path / "cell.json"
    cell.write_text(json.dumps([[0, "conv3", 1, "id"]]))
    argv = ["train", "--cell", str(cell), "--outer-iterations", "2", "--episodes", "3", "--trace-every", "1",
            "--dataset", str(data), "--out", str(tmp_path / "t"), *TINY]
    assert main(argv) == 0
    report = json.loads((tmp_path / "t" / "report.json").read_text())
    assert report["cell"] == [[0, "conv3", 1, "id"]]
    capsys.readouterr()
    assert main(["eval", "--params", str(tmp_path / "t" / "params.json"), "--episodes", "4",
                 "--transduction"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["episodes"] == 4 and result["transduction"] is True
    assert 0.0 <= result["mean"] <= 1.0
    config, spec, theta = load_params(tmp_path / "t" / "params.json")
    assert spec.filters == 2 and config.k_shot == 1
    assert set(theta.params)


def test_report_command(search_out, tmp_path):
    out, _ = search_out
    assert main(["report", "--state", str(out / "state.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scores.csv").read_text() == (out / "scores.csv").read_text()


def test_config_file_is_overridden_by_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# search settings\nbeam = 9\nworkers=3\ntransduction = true\ninner-lr = 0.01\n")
    assert read_config_file(cfg) == {"beam": "9", "workers": "3", "transduction": "true", "inner_lr": "0.01"}
    args = parse_args(["search", "--config", str(cfg), "--out", "x", "--beam", "4"])
    assert args.beam == 4 and args.workers == 3 and args.transduction is True and args.inner_lr == 0.01
    cfg.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        parse_args(["search", "--config", str(cfg), "--out", "x"])


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "autometa", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("search", "train", "eval", "report", "gen-data"):
        assert cmd in out.stdout
