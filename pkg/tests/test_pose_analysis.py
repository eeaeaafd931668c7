import itertools
import logging
import math
import os

import numpy as np
import pytest

from app.utils.pose_analysis import (
    CAMBRIDGE_HEADER,
    Pose6D,
    PoseFileError,
    PoseRecord,
    analyze,
    ball_cells,
    cloud_array,
    coverage_fraction,
    mean_pairwise_distance,
    occupancy_estimate,
    parse_pose_file,
    relative_cloud,
    to_6d,
    write_pose_file,
)
from app.utils.pose_geometry import Pose, Quaternion, compose_pose, quat_normalize, relative_pose
from app.utils.scene_synth import save_scene


def write_lines(path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))
    return str(path)


def random_cloud(rng, n, spread=1.0):
    points = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        points.append(Pose6D(tuple(rng.normal(scale=spread, size=3)), tuple(axis * rng.uniform(0, math.pi))))
    return points


def brute_force_coverage(queries, references, tau, rho):
    covered = 0
    for q in queries:
        qa = q.as_array(rho)
        if any(math.sqrt(sum((a - b) ** 2 for a, b in zip(qa, r.as_array(rho)))) <= tau for r in references):
            covered += 1
    return covered / len(queries)


class TestParsing:
    def test_single_identity_line(self, tmp_path):
        path = write_lines(tmp_path / "seq" / "poses.txt", ["seq1/frame00001.png 10.0 2.0 -3.0 1.0 0.0 0.0 0.0"])
        (record,) = parse_pose_file(path)
        assert record.image_id == "seq1/frame00001.png"
        assert record.pose.t == (10.0, 2.0, -3.0)
        assert record.pose.q == Quaternion.identity()
        assert record.scene == "seq"

    def test_cambridge_header_is_skipped(self, tmp_path):
        rows = [f"seq1/frame{i:05d}.png {i}.0 0.0 0.0 1.0 0.0 0.0 0.0" for i in range(5)]
        records = parse_pose_file(write_lines(tmp_path / "dataset_train.txt", list(CAMBRIDGE_HEADER) + rows))
        assert len(records) == 5
        assert [r.pose.t[0] for r in records] == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_non_unit_quaternion_is_renormalized(self, tmp_path, caplog):
        path = write_lines(tmp_path / "poses.txt", ["a.png 0 0 0 2.0 0.0 0.0 0.0"])
        with caplog.at_level(logging.WARNING):
            (record,) = parse_pose_file(path)
        assert record.pose.q == Quaternion.identity()
        assert "not unit" in caplog.text

    def test_negative_w_is_canonicalized(self, tmp_path):
        path = write_lines(tmp_path / "poses.txt", ["a.png 0 0 0 -0.6 0.8 0.0 0.0"])
        (record,) = parse_pose_file(path)
        np.testing.assert_allclose(record.pose.q.as_array(), [0.6, -0.8, 0.0, 0.0])

    def test_zero_w_follows_quat_normalize(self, tmp_path):
        path = write_lines(tmp_path / "poses.txt", ["a.png 0 0 0 0.0 0.0 -0.6 0.8"])
        (record,) = parse_pose_file(path)
        np.testing.assert_allclose(record.pose.q.as_array(), quat_normalize([0.0, 0.0, -0.6, 0.8]).as_array(), atol=1e-15)
        assert record.pose.q.as_array().tolist() == [0.0, 0.0, 0.6, -0.8]

    def test_unrecognized_file(self, tmp_path):
        path = write_lines(tmp_path / "notes.txt", ["hello world", "nothing to see"])
        with pytest.raises(PoseFileError, match="unrecognized pose file"):
            parse_pose_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PoseFileError, match="cannot read"):
            parse_pose_file(str(tmp_path / "absent.txt"))

    def test_strict_and_lenient(self, tmp_path):
        path = write_lines(tmp_path / "poses.txt", [
            "a.png 0 0 0 1 0 0 0",
            "b.png 1 0 0 1 0 0 nope",
            "",
            "c.png 2 0 0 1 0 0 0",
        ])
        with pytest.raises(PoseFileError, match=":2:"):
            parse_pose_file(path)
        records = parse_pose_file(path, strict=False)
        assert [r.image_id for r in records] == ["a.png", "c.png"]

    def test_reserialize_is_fixed_point(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(20):
            q = quat_normalize(rng.normal(size=4)).as_array()
            values = " ".join(repr(float(v)) for v in np.concatenate([rng.uniform(-10, 10, 3), q]))
            rows.append(f"img{i}.png {values}")
        first = parse_pose_file(write_lines(tmp_path / "scene" / "a.txt", list(CAMBRIDGE_HEADER) + rows))
        write_pose_file(first, str(tmp_path / "scene" / "b.txt"))
        second = parse_pose_file(str(tmp_path / "scene" / "b.txt"))
        assert second == first

    def test_synthetic_scene_file(self, small_scene, tmp_path):
        path = str(tmp_path / "scene0.txt")
        save_scene(small_scene, path)
        records = parse_pose_file(path)
        assert len(records) == len(small_scene.train) + len(small_scene.test)
        assert {r.scene for r in records} == {"scene0"}
        assert records[0].pose == small_scene.train[0].pose


class TestClouds:
    def test_identity_maps_to_origin(self):
        assert to_6d(Pose.identity()).as_array().tolist() == [0.0] * 6

    def test_quarter_turn_about_z(self):
        roll = Pose((0.0, 0.0, 0.0), Quaternion(math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)))
        anchor = Pose.from_vector(np.concatenate([[3.0, -1.0, 2.0], np.random.default_rng(1).normal(size=4)]))
        point = to_6d(relative_pose(anchor, compose_pose(anchor, roll)))
        np.testing.assert_allclose(point.translation, [0.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(point.rotation, [0.0, 0.0, math.pi / 2], atol=1e-9)

    def test_rotation_is_minimal(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = Pose.from_vector(np.concatenate([np.zeros(3), rng.normal(size=4)]))
            assert np.linalg.norm(to_6d(p).rotation) <= math.pi + 1e-12

    def test_identical_records_give_zero_cloud(self):
        pose = Pose.from_vector([1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 0.5])
        records = [PoseRecord(f"f{i}", pose) for i in range(7)]
        cloud = relative_cloud(records, anchor_stride=3)
        np.testing.assert_allclose(cloud_array(cloud), np.zeros((7, 6)), atol=1e-12)

    def test_single_record(self):
        cloud = relative_cloud([PoseRecord("only", Pose.from_vector([5, 5, 5, 0, 1, 0, 0]))], anchor_stride=10)
        np.testing.assert_allclose(cloud_array(cloud), np.zeros((1, 6)), atol=1e-12)

    def test_nearest_anchor_by_position(self):
        records = [PoseRecord(f"f{i}", Pose((float(x), 0.0, 0.0), Quaternion.identity()))
                   for i, x in enumerate([0, 1, 9, 10, 11])]
        cloud = relative_cloud(records, anchor_stride=3)
        # anchors sit at x=0 and x=10
        assert [p.translation[0] for p in cloud] == pytest.approx([0.0, 1.0, -1.0, 0.0, 1.0])

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            relative_cloud([], anchor_stride=1)
        with pytest.raises(ValueError):
            relative_cloud([PoseRecord("a", Pose.identity())], anchor_stride=0)


class TestCoverage:
    def test_self_coverage_is_complete(self):
        cloud = random_cloud(np.random.default_rng(3), 50)
        assert coverage_fraction(cloud, cloud, 1e-9) == 1.0

    def test_far_references_cover_nothing(self):
        tau = 0.5
        cloud = random_cloud(np.random.default_rng(4), 40, spread=0.01)
        moved = [Pose6D((p.translation[0] + 10 * tau, *p.translation[1:]), p.rotation) for p in cloud]
        assert coverage_fraction(cloud, moved, tau) == 0.0

    @pytest.mark.parametrize("rho", [0.1, 1.0, 10.0])
    def test_matches_brute_force(self, rho):
        rng = np.random.default_rng(5)
        queries, references = random_cloud(rng, 60), random_cloud(rng, 80)
        tau = 0.5 * mean_pairwise_distance(references, rho)
        assert coverage_fraction(queries, references, tau, rho) == brute_force_coverage(queries, references, tau, rho)

    def test_monotone(self):
        rng = np.random.default_rng(6)
        queries, references = random_cloud(rng, 100), random_cloud(rng, 100)
        by_tau = [coverage_fraction(queries, references, tau) for tau in (0.5, 1.0, 2.0, 4.0)]
        assert by_tau == sorted(by_tau)
        by_size = [coverage_fraction(queries, references[:n], 1.5) for n in (10, 50, 100)]
        assert by_size == sorted(by_size)

    def test_chunking_is_transparent(self, monkeypatch):
        rng = np.random.default_rng(7)
        queries, references = random_cloud(rng, 70), random_cloud(rng, 30)
        expected = coverage_fraction(queries, references, 2.0)
        monkeypatch.setattr("app.utils.pose_analysis.QUERY_CHUNK", 8)
        assert coverage_fraction(queries, references, 2.0) == expected

    def test_invalid_arguments(self):
        cloud = random_cloud(np.random.default_rng(8), 3)
        with pytest.raises(ValueError):
            coverage_fraction([], cloud, 1.0)
        with pytest.raises(ValueError):
            coverage_fraction(cloud, cloud, 0.0)


class TestOccupancy:
    def test_identical_points_fill_one_cell(self):
        cloud = [Pose6D((1.0, 2.0, 3.0), (0.1, 0.0, 0.0))] * 5
        assert occupancy_estimate(cloud) == 1.0 / len(ball_cells())

    def test_saturation(self):
        # edge 1 with r = sqrt(6)
        cells = ball_cells()
        cloud = [Pose6D(tuple(map(float, k[:3])), tuple(map(float, k[3:]))) for k in cells]
        assert occupancy_estimate(cloud, radius=math.sqrt(6.0)) == 1.0

    def test_ball_cells_are_symmetric(self):
        cells = {tuple(k) for k in ball_cells()}
        assert (0,) * 6 in cells
        assert all(tuple(-v for v in k) in cells for k in cells)

    def test_slice_matches_direct_count(self):
        rng = np.random.default_rng(9)
        cloud = [Pose6D(tuple(rng.uniform(-1, 1, 3)), (0.0, 0.0, 0.0)) for _ in range(300)]
        radius = 1.5
        result = occupancy_estimate(cloud, radius=radius)

        offsets = cloud_array(cloud) - cloud_array(cloud).mean(axis=0)
        edge = radius / math.sqrt(6.0)
        grid = np.array(list(itertools.product(range(-3, 4), repeat=6)), dtype=np.float64)
        low, high = grid * edge - edge / 2, grid * edge + edge / 2
        closest = np.clip(0.0, low, high)
        in_ball = np.linalg.norm(closest, axis=1) <= radius
        occupied = sum(
            bool(np.any(np.all((offsets >= lo) & (offsets < hi), axis=1)))
            for lo, hi in zip(low[in_ball], high[in_ball])
        )
        assert int(in_ball.sum()) == len(ball_cells())
        assert result == occupied / int(in_ball.sum())
        assert result < 0.1

    def test_default_radius_is_mean_distance(self):
        cloud = random_cloud(np.random.default_rng(10), 30)
        assert occupancy_estimate(cloud) == occupancy_estimate(cloud, radius=mean_pairwise_distance(cloud))

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            occupancy_estimate([Pose6D((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))])


class TestAnalyze:
    def test_identical_files(self, tmp_path):
        rng = np.random.default_rng(11)
        rows = [f"f{i}.png {' '.join(repr(float(v)) for v in np.concatenate([rng.uniform(-5, 5, 3), quat_normalize(rng.normal(size=4)).as_array()]))}"
                for i in range(30)]
        path = write_lines(tmp_path / "poses.txt", list(CAMBRIDGE_HEADER) + rows)
        summary = analyze([path], [path], anchor_stride=5)
        assert summary["coverage"] == 1.0
        assert summary["n_query"] == summary["n_reference"] == 30
        assert summary["tau"] > 0
        assert 0.0 < summary["reference_occupancy"] <= 1.0

    def test_explicit_tau(self, tmp_path):
        near = write_lines(tmp_path / "a.txt", [f"a{i} {i}.0 0 0 1 0 0 0" for i in range(10)])
        far = write_lines(tmp_path / "b.txt", [f"b{i} {3 * i}.0 0 0 1 0 0 0" for i in range(10)])
        summary = analyze([far], [near], anchor_stride=10, tau=0.5)
        assert summary["tau"] == 0.5
        assert 0.0 <= summary["coverage"] < 1.0


CAMBRIDGE_ROOT = os.environ.get("CAMBRIDGE_ROOT", "")


@pytest.mark.skipif(not CAMBRIDGE_ROOT or not os.path.isfile(os.path.join(CAMBRIDGE_ROOT, "KingsCollege", "dataset_test.txt")),
                    reason="set CAMBRIDGE_ROOT to a Cambridge Landmarks checkout")
def test_kings_college_against_old_hospital():
    summary = analyze([os.path.join(CAMBRIDGE_ROOT, "KingsCollege", "dataset_test.txt")],
                      [os.path.join(CAMBRIDGE_ROOT, "OldHospital", "dataset_train.txt")])
    assert summary["coverage"] == pytest.approx(0.088, abs=0.02)
