import os

import numpy as np
import pytest

from app.models.experiments import PredictionSet, RunReport
from app.models.repositories import (
    MEDIANS_HEADERS,
    emit_report,
    load_archive,
    read_medians,
    render_tables,
    run_directory,
    write_summary,
    write_tables,
)
from app.utils.pose_geometry import ErrorPair, quat_normalize


def predictions(rng, n=4, prefix="scene1/test/frame"):
    def vector():
        return np.concatenate([rng.uniform(-5, 5, 3), quat_normalize(rng.normal(size=4)).as_array()])
    return PredictionSet([f"{prefix}{i:05d}" for i in range(n)],
                         np.array([vector() for _ in range(n)]), np.array([vector() for _ in range(n)]))


def report(method="apanet", nu=0.05, seed=0, task_id="scene0->scene1:ape", target=(1.0, 2.0), joint=False, rng=None):
    rng = rng or np.random.default_rng(seed)
    return RunReport(
        task_id=task_id,
        method=method,
        nu=nu,
        seed=seed,
        mode="ape",
        target=ErrorPair(*target),
        target_predictions=predictions(rng),
        source=ErrorPair(0.5, 1.5) if joint else None,
        source_predictions=predictions(rng, prefix="scene0/test/frame") if joint else None,
        curves={"source_loss": [3.0, 2.5], "disc_loss": [0.69]},
        probe_accuracy=0.55,
        wall_clock=1.25,
        config={"lr": 0.001, "mode": method},
    )


class TestArchive:
    def test_layout(self, tmp_path):
        reports = [report(), report(method="joint", nu=1.0, joint=True)]
        provenance = emit_report(reports, str(tmp_path), snapshot="train.lr=0.001\n")
        with open(tmp_path / "config.txt", encoding="utf-8") as fh:
            assert fh.readline() == f"# provenance sha256={provenance}\n"
            assert fh.read() == "train.lr=0.001\n"
        rows = read_medians(str(tmp_path))
        assert list(rows[0].keys()) == MEDIANS_HEADERS
        assert rows[0]["source_position_m"] == ""
        assert rows[1]["source_position_m"] == "0.5"
        names = sorted(os.listdir(tmp_path / "predictions"))
        assert len(names) == 3
        assert sum(name.endswith(".source.csv") for name in names) == 1

    def test_round_trip(self, tmp_path):
        reports = [report(seed=s) for s in range(3)] + [report(method="joint", nu=1.0, joint=True)]
        emit_report(reports, str(tmp_path / "a"), snapshot="x=1\n")
        loaded = load_archive(str(tmp_path / "a"))
        assert [r.run_id for r in loaded] == [r.run_id for r in reports]
        for before, after in zip(reports, loaded):
            assert after.target == before.target
            assert after.curves == before.curves
            np.testing.assert_array_equal(after.target_predictions.predicted, before.target_predictions.predicted)
        assert loaded[-1].source == ErrorPair(0.5, 1.5)
        np.testing.assert_array_equal(loaded[-1].source_predictions.truth, reports[-1].source_predictions.truth)

        emit_report(loaded, str(tmp_path / "b"), snapshot="x=1\n")
        for name in ("medians.csv", "report.jsonl", "config.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_medians_recomputable_from_predictions(self, tmp_path):
        r = report()
        r.target = r.target_predictions.medians()
        emit_report([r], str(tmp_path))
        (loaded,) = load_archive(str(tmp_path))
        assert loaded.target_predictions.medians() == loaded.target

    def test_missing_archive(self, tmp_path):
        with pytest.raises(ValueError, match="report.jsonl"):
            load_archive(str(tmp_path))

    def test_run_directory(self, tmp_path):
        a = run_directory(str(tmp_path), "x=1\n", label="adapt")
        b = run_directory(str(tmp_path), "x=2\n", label="adapt")
        assert os.path.isdir(a) and os.path.isdir(b)
        assert os.path.basename(a).startswith("adapt-")
        assert a != b


class TestTables:
    def test_cells_and_order(self):
        reports = [
            report(method="apanet", nu=0.05, seed=0, target=(1.0, 10.0)),
            report(method="apanet", nu=0.05, seed=1, target=(3.0, 30.0)),
            report(method="no_adaptation", nu=0.0, target=(12.346, 6.789)),
            report(method="apanet", nu=0.05, task_id="scene0+scene1->scene2:ape", target=(0.5, 0.25)),
        ]
        tables = render_tables(reports)
        lines = tables["markdown"].splitlines()
        assert lines[0] == "| method | scene0+scene1->scene2:ape | scene0->scene1:ape |"
        assert lines[2] == "| no_adaptation | - | 12.35/6.79 |"
        assert lines[3] == "| apanet, nu=0.05 | 0.50/0.25 | 2.00/20.00 |"
        assert tables["csv"].splitlines() == [
            "method,nu,seed,scene0+scene1->scene2:ape,scene0->scene1:ape",
            "no_adaptation,0.0,0,-,12.346/6.789",
            "apanet,0.05,0,0.5/0.25,1.0/10.0",
            "apanet,0.05,1,-,3.0/30.0",
        ]

    def test_csv_matches_stored_medians(self, tmp_path):
        reports = [report(method="no_adaptation", nu=0.0, seed=s, target=(12.3456789 + s, 6.7891234)) for s in range(2)]
        emit_report(reports, str(tmp_path))
        lines = render_tables(load_archive(str(tmp_path)))["csv"].splitlines()[1:]
        stored = read_medians(str(tmp_path))
        assert len(lines) == len(stored) == 2
        for line, row in zip(lines, stored):
            method, nu, seed, cell = line.split(",")
            assert (method, nu, seed) == (row["method"], row["nu"], row["seed"])
            assert cell == f"{row['target_position_m']}/{row['target_orientation_deg']}"
        assert lines[0].endswith(",12.3456789/6.7891234")

    def test_nu_rows_sorted(self):
        reports = [report(method="ss", nu=nu) for nu in (0.5, 0.01, 0.2)]
        labels = [line.split("|")[1].strip() for line in render_tables(reports)["markdown"].splitlines()[2:]]
        assert labels == ["ss, nu=0.01", "ss, nu=0.2", "ss, nu=0.5"]

    def test_write_tables(self, tmp_path):
        tables = write_tables([report()], str(tmp_path))
        assert (tmp_path / "tables.md").read_text() == tables["markdown"]
        assert (tmp_path / "tables.csv").read_text() == tables["csv"]


def test_write_summary(tmp_path):
    write_summary({"coverage": 0.25, "tau": 1.5, "n_query": 8}, str(tmp_path / "analysis"))
    assert (tmp_path / "analysis" / "summary.txt").read_text() == "coverage=0.25\ntau=1.5\nn_query=8\n"
    assert (tmp_path / "analysis" / "summary.csv").read_text() == "coverage,tau,n_query\n0.25,1.5,8\n"
