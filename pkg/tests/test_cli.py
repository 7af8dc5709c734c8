import csv
import json
import math

import numpy as np
import pytest
import yaml

from placeprivacy.cli import main, read_summary
from placeprivacy.config import ConfigError, from_dict, load_config
from placeprivacy.synth import SynthSpec, write_city


def make_project(tmp_path, categories=None, **overrides):
    spec = SynthSpec(n_users=30, n_pois=400, mean_visits=15, region_km=2.0, seed=1,
                     **({"categories": categories} if categories else {}))
    paths = write_city(spec, tmp_path / "city")
    cfg = {
        "output_dir": "out",
        "seed": 0,
        "mapping": "city/mapping.tsv",
        "categories": list(spec.categories),
        "cities": [{"name": "a", "checkins": "city/checkins.tsv", "pois": {"path": "city/pois.csv", "format": "canonical_csv"}}],
        "scenarios": ["uninformed", "spatial_join", "gbdt_spatiotemporal"],
        "sweep": {"radii": [0, 100, 400]},
        "n_folds": 3,
        "model": {"n_rounds": 3, "max_depth": 3},
        "variogram": {"size_km": 2, "n_pairs": 20000, "bins": [0, 50, 200, 800]},
    }
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, paths


class TestConfig:
    def test_defaults(self):
        cfg = from_dict({"cities": [{"name": "x", "checkins": "c.tsv"}]})
        assert cfg.k == 20 and cfg.feature_radius == 200.0 and cfg.model.max_depth == 10
        assert len(cfg.categories) == 12
        cfg.validate(check_files=False)

    @pytest.mark.parametrize("bad", [
        {"sweep": {"radii": [-1]}},
        {"poi_fraction": 0.0},
        {"poi_fraction": 1.5},
        {"scenarios": ["magic"]},
        {"split": "random"},
        {"n_folds": 1},
    ])
    def test_invalid(self, bad):
        cfg = from_dict({"cities": [{"name": "x", "checkins": "c.tsv"}], **bad})
        with pytest.raises(ConfigError):
            cfg.validate(check_files=False)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_dict({"cities": [], "colour": "red"})

    def test_missing_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("cities: [{name: x, checkins: nowhere.tsv}]\n")
        with pytest.raises(ConfigError, match="nowhere.tsv"):
            load_config(p).validate()

    def test_overrides(self, tmp_path):
        path, _ = make_project(tmp_path)
        cfg = load_config(path, ["seed=7", "sweep.radii=[0, 50]", "model.n_rounds=9"])
        assert cfg.seed == 7 and cfg.sweep.radii == [0, 50] and cfg.model.n_rounds == 9

    def test_digest_tracks_content(self, tmp_path):
        path, _ = make_project(tmp_path)
        assert load_config(path).digest() == load_config(path).digest()
        assert load_config(path).digest() != load_config(path, ["seed=1"]).digest()


class TestIngest:
    def test_counts_and_idempotence(self, tmp_path, capsys):
        path, _ = make_project(tmp_path)
        assert main(["ingest", str(path)]) == 0
        out = capsys.readouterr().out
        assert "samples" in out and "users" in out and "merged" in out and "dropped labels" in out
        first = (tmp_path / "out/data/a/samples.csv").read_bytes()
        report = json.loads((tmp_path / "out/data/a/ingest_report.json").read_text())
        assert report["users"] == 30 and report["pois"] == 400
        assert main(["ingest", str(path)]) == 0
        assert (tmp_path / "out/data/a/samples.csv").read_bytes() == first

    def test_empty_input(self, tmp_path, capsys):
        path, paths = make_project(tmp_path)
        open(paths["checkins"], "w").close()
        assert main(["ingest", str(path)]) != 0
        assert "no check-ins parsed" in capsys.readouterr().err

    def test_invalid_config_exit(self, tmp_path, capsys):
        path, _ = make_project(tmp_path, poi_fraction=2.0)
        assert main(["ingest", str(path)]) == 2
        assert "poi_fraction" in capsys.readouterr().err

    def test_run_before_ingest(self, tmp_path, capsys):
        path, _ = make_project(tmp_path)
        assert main(["run", str(path)]) == 2
        assert "ingest" in capsys.readouterr().err


class TestRun:
    @pytest.fixture(scope="class")
    @classmethod
    def project(cls, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("run")
        path, _ = make_project(tmp)
        assert main(["ingest", str(path)]) == 0
        assert main(["run", str(path)]) == 0
        return tmp, path

    def test_summary(self, project):
        tmp, _ = project
        rows = read_summary(tmp / "out/summary.csv")
        assert len(rows) == 9 and all(r["status"] == "ok" for r in rows)
        assert list(rows[0]) == ["city", "policy", "radius", "scenario", "status", "n_samples", "n_users", "accuracy",
                                 "profiling_error", "profiling_error_hard", "hit@1", "hit@5", "median_PL"]
        sj0 = next(r for r in rows if r["policy"] == "r0" and r["scenario"] == "spatial_join")
        assert float(sj0["accuracy"]) == 1.0

    def test_bundle_and_manifest(self, project):
        tmp, _ = project
        point = tmp / "out/runs/a/r100/gbdt_spatiotemporal"
        for name in ("metrics.json", "report.json", "predictions.csv", "profiles_soft.csv", "density.csv", "pl_cdf.csv"):
            assert (point / name).exists()
        man = json.loads((tmp / "out/manifest_run.json").read_text())
        assert man["seed"] == 0 and len(man["config_sha256"]) == 64
        assert {"numpy", "python", "placeprivacy"} <= set(man["versions"])
        assert "a/samples.csv" in man["inputs_sha256"]

    def test_byte_identical_rerun(self, project, tmp_path):
        tmp, path = project
        first = (tmp / "out/summary.csv").read_bytes()
        assert main(["run", str(path), "--output-dir", str(tmp_path / "again"), "--set", "seed=0"]) == 2  # not ingested
        assert main(["ingest", str(path), "--output-dir", str(tmp_path / "again")]) == 0
        assert main(["run", str(path), "--output-dir", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again/summary.csv").read_bytes() == first

    def test_uninformed_baseline(self, project):
        tmp, _ = project
        rows = [r for r in read_summary(tmp / "out/summary.csv") if r["scenario"] == "uninformed"]
        samples = list(csv.DictReader(open(tmp / "out/data/a/samples.csv")))
        cats = [s["category"] for s in samples]
        f = np.array([cats.count(c) for c in set(cats)]) / len(cats)
        for r in rows:
            assert abs(float(r["accuracy"]) - np.sum(f**2)) < 0.06
            assert float(r["hit@5"]) <= 5 / 30 + 0.2

    def test_report(self, project, capsys):
        tmp, _ = project
        assert main(["report", str(tmp / "out/summary.csv"), "--policy", "r100"]) == 0
        out = capsys.readouterr().out
        assert "gbdt_spatiotemporal" in out and "median_PL" in out
        assert main(["report", str(tmp / "out/summary.csv"), "--policy", "r999"]) == 2

    def test_fit_monotone_sweep(self, project, capsys):
        tmp, _ = project
        assert main(["fit", str(tmp / "out/summary.csv"), "--scenario", "spatial_join"]) == 0
        fit = json.loads((tmp / "out/fit_a_spatial_join_accuracy.json").read_text())
        assert fit["lam"] > 0 and fit["radii"] == [0.0, 100.0, 400.0]


class TestFailures:
    def test_city_level_error(self, tmp_path, capsys):
        path, _ = make_project(tmp_path, n_folds=40, scenarios=["uninformed"], sweep={"radii": [0]})
        assert main(["ingest", str(path)]) == 0
        assert main(["run", str(path)]) == 2
        assert "cannot be split into 40 folds" in capsys.readouterr().err

    def test_failed_point_gives_exit_1(self, tmp_path, monkeypatch):
        import placeprivacy.cli as cli

        real = cli.run_scenario

        def flaky(samples, scenario, policy, *args, **kwargs):
            if scenario == "spatial_join" and policy.radius == 100:
                raise RuntimeError("injected")
            return real(samples, scenario, policy, *args, **kwargs)

        monkeypatch.setattr(cli, "run_scenario", flaky)
        path, _ = make_project(tmp_path, scenarios=["uninformed", "spatial_join"], sweep={"radii": [0, 100]})
        assert main(["ingest", str(path)]) == 0
        assert main(["run", str(path)]) == 1
        rows = read_summary(tmp_path / "out/summary.csv")
        status = {(r["policy"], r["scenario"]): r["status"] for r in rows}
        assert status[("r100", "spatial_join")] == "failed: RuntimeError: injected"
        assert sum(v == "ok" for v in status.values()) == 3


class TestFitAndVariogram:
    def test_fit_exact_three_points(self, tmp_path):
        xs = [0.0, 100.0, 300.0]
        ys = [0.2 + 0.5 * math.exp(-0.02 * x) for x in xs]
        summary = tmp_path / "s.csv"
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["city", "policy", "radius", "scenario", "status", "accuracy"])
            for x, y in zip(xs, ys):
                w.writerow(["c", f"r{x:g}", x, "s", "ok", repr(y)])
        out = tmp_path / "fit.json"
        assert main(["fit", str(summary), "--scenario", "s", "--output", str(out)]) == 0
        fit = json.loads(out.read_text())
        assert fit["lam"] == pytest.approx(0.02, rel=1e-4)
        assert fit["a"] == pytest.approx(0.2, abs=1e-6) and fit["c"] == pytest.approx(0.5, abs=1e-6)

    def test_fit_missing_file(self, tmp_path):
        assert main(["fit", str(tmp_path / "none.csv")]) == 2

    def test_variogram_single_category(self, tmp_path):
        path, _ = make_project(tmp_path, categories=("Only",))
        assert main(["ingest", str(path)]) == 0
        assert main(["variogram", str(path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "out/variogram_a.csv")))
        assert [r["bin_hi"] for r in rows] == ["50", "200", "800"]
        assert all(float(r["gamma"]) == 0.0 for r in rows if r["gamma"])


class TestSynthCommand:
    def test_writes_config(self, tmp_path):
        assert main(["synth", str(tmp_path / "demo"), "--users", "8"]) == 0
        cfg = load_config(tmp_path / "demo/config.yaml")
        cfg.validate()
        assert cfg.cities[0].pois.format == "canonical_csv"
