import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from densreg import __version__, cli
from densreg.errors import NumericError

TINY = [
    "--set", "train.stage1_epochs=3",
    "--set", "train.density_epochs=2",
    "--set", "train.stage3_epochs=2",
    "--set", "train.hidden=[8,8]",
    "--set", "train.feature_dim=2",
    "--set", "dataset.n_train=80",
    "--set", "dataset.n_test=40",
]


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def read_header(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return json.loads(first[2:])


class TestConfigResolution:
    def test_defaults_per_command(self):
        assert cli.resolve_config("toy")["train"]["density"] == "kde"
        assert cli.resolve_config("train")["train"] == {}

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seeds": [3], "train": {"lr": 0.01, "batch_size": 64}}))
        cfg = cli.resolve_config("train", path, ["train.lr=0.002", "seeds=[4,5]"])
        assert cfg["seeds"] == [4, 5]
        assert cfg["train"] == {"lr": 0.002, "batch_size": 64}

    def test_values_fall_back_to_strings(self):
        cfg = cli.resolve_config("train", None, ["outdir=some/dir", "method=ensemble"])
        assert cfg["outdir"] == "some/dir" and cfg["method"] == "ensemble"

    @pytest.mark.parametrize(
        "override",
        ["method=bogus", "methods=[\"x\"]", "seeds=[]", "seeds=[-1]", "ensemble_size=0", "dataset.kind=parquet", "train.lr=-1", "train.epochs=3", "nonsense=1", "novalue"],
    )
    def test_invalid(self, override):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config("train", None, [override])

    def test_bad_config_files(self, tmp_path):
        with pytest.raises(cli.ConfigError, match="no such"):
            cli.resolve_config("train", tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("[1, 2]")
        with pytest.raises(cli.ConfigError, match="object"):
            cli.resolve_config("train", tmp_path / "bad.json")


class TestToy:
    def test_outputs_and_band(self, tmp_path):
        assert run("toy", "--outdir", tmp_path, *TINY) == 0
        out = tmp_path / "density-regression" / "0"
        names = {p.name for p in out.iterdir()}
        assert names == {"checkpoint.json", "metrics_iid.json", "metrics_ood.json", "plotdata_band.csv", "plotdata_train.csv"}
        band = np.loadtxt(out / "plotdata_band.csv", delimiter=",", skiprows=2)
        assert band[0, 0] == -7.0 and band[-1, 0] == 7.0
        assert np.all(np.diff(band[:, 0]) > 0)
        assert np.all(band[:, 3] >= band[:, 2])
        np.testing.assert_allclose(band[:, 1], (band[:, 2] + band[:, 3]) / 2, rtol=1e-9, atol=1e-9)

    def test_every_output_echoes_config(self, tmp_path):
        run("toy", "--outdir", tmp_path, *TINY)
        out = tmp_path / "density-regression" / "0"
        for name in ("checkpoint.json", "metrics_iid.json", "metrics_ood.json"):
            prov = json.loads((out / name).read_text())["provenance"]
            assert prov["version"] == __version__ and prov["config"]["train"]["stage1_epochs"] == 3
        for name in ("plotdata_band.csv", "plotdata_train.csv"):
            assert read_header(out / name)["config"]["outdir"] == str(tmp_path)

    def test_rerun_is_byte_identical(self, tmp_path):
        run("toy", "--outdir", tmp_path, *TINY)
        out = tmp_path / "density-regression" / "0"
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        run("toy", "--outdir", tmp_path, *TINY)
        assert {p.name: p.read_bytes() for p in out.iterdir()} == first

    def test_other_method(self, tmp_path):
        assert run("toy", "--outdir", tmp_path, "--set", "method=deterministic", *TINY) == 0
        assert (tmp_path / "deterministic" / "0" / "plotdata_band.csv").is_file()


class TestTrainAndEval:
    def test_train_then_eval(self, tmp_path):
        assert run("train", "--outdir", tmp_path, "--set", "seeds=[0,1]", *TINY) == 0
        ck = tmp_path / "density-regression" / "1" / "checkpoint.json"
        assert ck.is_file()
        assert run("eval", ck, "--outdir", tmp_path / "ev") == 0
        iid = json.loads((tmp_path / "ev" / "metrics_iid.json").read_text())
        assert iid["split"] == "iid" and iid["n"] == 40 and iid["provenance"]["seed"] == 1

    def test_eval_is_reproducible(self, tmp_path):
        run("toy", "--outdir", tmp_path, *TINY)
        out = tmp_path / "density-regression" / "0"
        run("eval", out / "checkpoint.json", "--outdir", tmp_path / "ev")
        assert (tmp_path / "ev" / "metrics_ood.json").read_bytes() == (out / "metrics_ood.json").read_bytes()

    def test_eval_on_explicit_file(self, tmp_path, fixtures_dir):
        common = ["--set", "dataset.kind=csv", "--set", f"dataset.source_a={fixtures_dir / 'red.csv'}",
                  "--set", f"dataset.source_b={fixtures_dir / 'white.csv'}", "--set", "dataset.target=quality"]
        assert run("train", "--outdir", tmp_path, *common, *TINY) == 0
        ck = tmp_path / "density-regression" / "0" / "checkpoint.json"
        assert run("eval", ck, "--data", fixtures_dir / "white.csv", "--target", "quality", "--split-name", "ood", "--outdir", tmp_path / "ev") == 0
        assert json.loads((tmp_path / "ev" / "metrics_ood.json").read_text())["n"] == 60

    def test_eval_on_empty_split_writes_nothing(self, tmp_path, fixtures_dir, capsys):
        run("train", "--outdir", tmp_path, *TINY)
        ck = tmp_path / "density-regression" / "0" / "checkpoint.json"
        code = run("eval", ck, "--data", fixtures_dir / "header_only.csv", "--target", "y", "--outdir", tmp_path / "ev")
        assert code == 3
        assert "no data rows" in capsys.readouterr().err
        assert not (tmp_path / "ev").exists()

    def test_eval_needs_target(self, tmp_path, fixtures_dir):
        run("train", "--outdir", tmp_path, *TINY)
        ck = tmp_path / "density-regression" / "0" / "checkpoint.json"
        assert run("eval", ck, "--data", fixtures_dir / "red.csv") == 2


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert run("toy", "--outdir", tmp_path, "--set", "method=bogus") == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_data_error(self, tmp_path):
        assert run("train", "--outdir", tmp_path, "--set", "dataset.kind=csv", "--set", "dataset.source_a=/nope.csv",
                   "--set", "dataset.source_b=/nope.csv", "--set", "dataset.target=y") == 3

    def test_numeric_error(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise NumericError("stage 1: non-finite loss at epoch 0, batch 0")

        monkeypatch.setattr(cli, "fit_method", diverge)
        assert run("train", "--outdir", tmp_path) == 4

    def test_disk_error_names_path(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("train", "--outdir", blocker / "sub", *TINY) == 1
        assert str(blocker) in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert run("eval", tmp_path / "none.json") == 3

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "densreg", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and __version__ in out.stdout


class TestCompare:
    def test_ten_seeds_one_row_per_method(self, tmp_path):
        args = ["compare", "--outdir", tmp_path, "--set", "seeds=[0,1,2,3,4,5,6,7,8,9]", "--set", "ensemble_size=2",
                "--set", "latency_repeats=3", *TINY]
        assert run(*args) == 0
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert json.loads(lines[0][2:])["config"]["seeds"] == list(range(10))
        rows = list(csv.DictReader(lines[1:]))
        assert [r["method"] for r in rows] == list(cli.METHODS)
        for r in rows:
            assert r["n_seeds"] == "10"
            assert all("±" in r[k] for k in r if k.endswith(("_iid", "_ood")))
            assert int(r["params"]) > 0 and float(r["latency_ms"]) > 0
        with (tmp_path / "runs.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 3 * 10 * 2
        for m in cli.METHODS:
            assert (tmp_path / m / "9" / "metrics_ood.json").is_file()

    def test_parallel_replicates_match_sequential(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DENSREG_THREADS", raising=False)
        base = ["compare", "--set", "seeds=[0,1]", "--set", "methods=[\"deterministic\"]", "--set", "latency_repeats=1", *TINY]
        run(*base, "--outdir", tmp_path / "seq")
        run(*base, "--outdir", tmp_path / "par", "--set", "workers=2")
        a = (tmp_path / "seq" / "deterministic" / "1" / "metrics_iid.json").read_text()
        b = (tmp_path / "par" / "deterministic" / "1" / "metrics_iid.json").read_text()
        assert json.loads(a)["nll"] == json.loads(b)["nll"]

    def test_mean_std_format(self):
        assert cli.mean_std([1.0, 3.0]) == "2.0000 ± 1.0000"
        assert cli.mean_std([2.5]) == "2.5000 ± 0.0000"
