import hashlib
import json

import numpy as np
import pytest

from bentmix.cli import main
from bentmix.data import load_csv, write_csv
from bentmix.model import bent_cable, BentCableCoefs, TransitionCoefs
from bentmix.data import LongitudinalDataset, Profile


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tiny_dataset(path, m=3, n=24, noise=0.3, seed=0):
    rng = np.random.default_rng(seed)
    profiles = []
    t = np.arange(n, dtype=float)
    for i in range(m):
        y = bent_cable(t, BentCableCoefs(8.0, 0.5, -1.0), TransitionCoefs(3.0, 11.0))
        profiles.append(Profile(f"p{i}", t, y + rng.normal(0, noise, n)))
    write_csv(LongitudinalDataset(profiles=tuple(profiles)), path)
    return path


class TestErrors:
    def test_missing_file_exits_2_with_error_json(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "out"), "--iters", "50", "--burnin", "10"])
        assert code == 2
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "error" in payload and "type" in payload

    def test_bad_scenario_name_lists_valid(self, tmp_path, capsys):
        code = main(["simulate", "--scenario", "S99", "--out", str(tmp_path / "o")])
        assert code == 2
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "S1a" in payload["error"] and "S3" in payload["error"]

    def test_compare_refuses_order_at_least_min_length(self, tmp_path, capsys):
        data = _tiny_dataset(tmp_path / "d.csv", n=6)
        code = main([
            "compare-dic", "--data", str(data), "--out", str(tmp_path / "o"),
            "--p", "0,6", "--seed", "1", "--iters", "60", "--burnin", "10",
        ])
        assert code == 2
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "reduction" in payload["error"] or "observations" in payload["error"]


class TestSimulateCommand:
    def test_builtin_scenario_shape_and_manifest(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--scenario", "S2", "--seed", "3",
                     "--out", str(out)]) == 0
        ds = load_csv(out / "dataset.csv")
        assert ds.m == 20
        assert all(n == 150 for n in ds.n)
        truth = json.loads((out / "truth.json").read_text())
        assert truth["spec"]["omega"] == 0.5
        manifests = list(out.glob("manifest.json"))
        assert len(manifests) == 1
        manifest = json.loads(manifests[0].read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seeds"] == [3]

    def test_fixed_seed_identical_digests(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["simulate", "--scenario", "S1a", "--seed", "7",
                         "--out", str(out)]) == 0
        assert _digest(a / "dataset.csv") == _digest(b / "dataset.csv")
        assert _digest(a / "truth.json") == _digest(b / "truth.json")

    def test_custom_spec_round_trip(self, tmp_path):
        spec = {
            "name": "custom", "m": 3, "n": 20, "omega": 0.5,
            "mu_beta": [5.0, 0.4, -0.8],
            "Sigma_beta": (0.01 * np.eye(3)).tolist(),
            "mu_alpha": [1.0, 2.3],
            "Sigma_alpha": (0.01 * np.eye(2)).tolist(),
            "mu_tauA": 2.3, "sigma2_tauA": 0.01,
            "phi": [], "sigma2": [0.1, 0.1, 0.1], "seed": 5,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "sim"
        assert main(["simulate", "--spec", str(spec_path), "--out", str(out)]) == 0
        truth = json.loads((out / "truth.json").read_text())
        assert truth["spec"] == json.loads(json.dumps(spec))


class TestFitAndSummarize:
    @pytest.fixture(scope="class")
    def fitted(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("fit")
        data = _tiny_dataset(root / "d.csv")
        out = root / "run"
        code = main([
            "fit", "--data", str(data), "--out", str(out),
            "--p", "0", "--seed", "5", "--iters", "400", "--burnin", "100",
        ])
        assert code == 0
        return data, out

    def test_fit_outputs_and_manifest(self, fitted):
        data, out = fitted
        assert (out / "draws_chain1.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "fit"
        assert manifest["seeds"] == [5]
        assert manifest["chains"][0]["stationarity_proportion"] is None
        assert "config_digest" in manifest and "wall_clock_sec" in manifest
        assert manifest["versions"]["bentmix"]

    def test_fit_reproducible_given_seed(self, fitted, tmp_path):
        data, out = fitted
        out2 = tmp_path / "again"
        assert main([
            "fit", "--data", str(data), "--out", str(out2),
            "--p", "0", "--seed", "5", "--iters", "400", "--burnin", "100",
        ]) == 0
        assert _digest(out / "draws_chain1.csv") == _digest(out2 / "draws_chain1.csv")

    def test_summarize_chain_dir(self, fitted, tmp_path):
        data, out = fitted
        rep = tmp_path / "report"
        assert main([
            "summarize", str(out), "--out", str(rep), "--data", str(data), "--svg",
        ]) == 0
        report = json.loads((rep / "report.json").read_text())
        params = report["parameters"]
        for key in ("omega", "mu0", "mu1", "mu2", "M_gamma", "M_tau", "M_tauA",
                    "S_gamma", "S_tau", "ctp_g", "ctp_a"):
            assert key in params
        curves = (rep / "curves.csv").read_text().splitlines()
        assert curves[0] == "time,mean,lo95,hi95,population"
        assert any(line.endswith(",G") for line in curves[1:])
        assert any(",individual:p0" in line for line in curves[1:])
        assert (rep / "curves.svg").read_text().startswith("<svg")
        assert (rep / "manifest.json").exists()

    def test_summarize_empty_dir_fails(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["summarize", str(empty)]) == 2
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "no chain draws" in payload["error"]

    def test_multi_chain_fit(self, tmp_path):
        data = _tiny_dataset(tmp_path / "d.csv")
        out = tmp_path / "run"
        assert main([
            "fit", "--data", str(data), "--out", str(out), "--chains", "2",
            "--p", "0", "--seed", "5", "--iters", "200", "--burnin", "50",
        ]) == 0
        assert (out / "draws_chain1.csv").exists()
        assert (out / "draws_chain2.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [5, 6]


class TestCompareCommand:
    def test_single_entry_ranking(self, tmp_path):
        data = _tiny_dataset(tmp_path / "d.csv")
        out = tmp_path / "cmp"
        assert main([
            "compare-dic", "--data", str(data), "--out", str(out),
            "--p", "0", "--seed", "2", "--iters", "300", "--burnin", "100",
        ]) == 0
        ranking = json.loads((out / "dic_ranking.json").read_text())
        assert len(ranking) == 1
        assert ranking[0]["p"] == 0
        assert (out / "dic_ranking.txt").exists()
        assert (out / "winner_draws.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["winner"]["variant"] == "flexible"

    def test_variant_list(self, tmp_path):
        data = _tiny_dataset(tmp_path / "d.csv")
        out = tmp_path / "cmp"
        assert main([
            "compare-dic", "--data", str(data), "--out", str(out),
            "--p", "0", "--variant", "flexible,a-only", "--no-refit",
            "--seed", "2", "--iters", "300", "--burnin", "100",
        ]) == 0
        ranking = json.loads((out / "dic_ranking.json").read_text())
        assert {r["variant"] for r in ranking} == {"flexible", "a-only"}


class TestReplicateStudyCommand:
    def test_smoke_two_replicates(self, tmp_path):
        spec = {
            "name": "tiny", "m": 3, "n": 20, "omega": 1.0,
            "mu_beta": [5.0, 0.4, -0.8],
            "Sigma_beta": (1e-4 * np.eye(3)).tolist(),
            "mu_alpha": [1.0, 2.3],
            "Sigma_alpha": (1e-4 * np.eye(2)).tolist(),
            "mu_tauA": 2.3, "sigma2_tauA": 1e-4,
            "phi": [], "sigma2": [0.01, 0.01, 0.01], "seed": 5,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "study"
        assert main([
            "replicate-study", "--spec", str(spec_path), "--replicates", "2",
            "--out", str(out), "--variant", "g-only",
            "--iters", "300", "--burnin", "100",
        ]) == 0
        lines = (out / "study.csv").read_text().splitlines()
        assert lines[0] == "parameter,truth,estimate,coverage"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_failed"] == 0
        assert manifest["config"]["replicates"] == 2
