import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from trackfeat import evalkit as ev
from trackfeat import io
from trackfeat.geometry import Homography, PoseSE3


class TestCoverage:
    def test_single_cell(self):
        rep = ev.coverage(np.array([[1, 1], [2, 3], [5, 5]]), 64, 64)
        assert rep.occupancy_entropy == 0.0 and rep.keypoint_count == 3

    def test_uniform(self):
        xy = np.array([[8 * i + 1, 8 * j + 1] for i in range(8) for j in range(8)])
        assert ev.coverage(xy, 64, 64).occupancy_entropy == pytest.approx(1.0)

    def test_two_cells_half(self):
        # two equally filled cells out of 64: ln 2 / ln 64 = 1/6
        rep = ev.coverage(np.array([[1, 1], [60, 60]]), 64, 64)
        assert rep.occupancy_entropy == pytest.approx(1 / 6)

    def test_empty(self):
        rep = ev.coverage(np.zeros((0, 2)), 64, 64)
        assert rep.empty and rep.keypoint_count == 0

    def test_dynamic_fraction(self):
        mask = np.zeros((64, 64), bool)
        mask[32:] = True
        rep = ev.coverage(np.array([[1, 1], [1, 40], [5, 50], [9, 9]]), 64, 64, region_mask=mask)
        assert rep.dynamic_region_fraction == 0.5

    def test_static_coverage_drops_masked(self):
        mask = np.zeros((64, 64), bool)
        mask[32:] = True
        rep = ev.static_coverage(np.array([[1, 1], [1, 40]]), 64, 64, mask)
        assert rep.keypoint_count == 1

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            ev.coverage(np.zeros((1, 2)), 8, 8, grid=1)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 47)), min_size=1, max_size=60))
    def test_entropy_bounds(self, pts):
        e = ev.coverage(np.array(pts), 64, 48).occupancy_entropy
        assert 0.0 <= e <= 1.0


class TestRepeatability:
    def test_identity(self, rng):
        xy = rng.integers(0, 64, (20, 2))
        assert ev.repeatability(xy, xy, Homography.identity(), 1.0, 64, 64) == 1.0

    def test_disjoint(self):
        a = np.array([[2, 2], [3, 5]])
        b = np.array([[60, 60]])
        assert ev.repeatability(a, b, Homography.identity(), 3.0, 64, 64) == 0.0

    def test_translation(self):
        a = np.array([[10, 10], [20, 20]])
        b = np.array([[15, 10], [40, 40]])
        assert ev.repeatability(a, b, Homography.translation(5, 0), 1.0, 64, 64) == 0.5

    def test_out_of_view(self):
        a = np.array([[10, 10]])
        assert ev.repeatability(a, a, Homography.translation(100, 0), 3.0, 64, 64) is None

    def test_symmetric(self):
        a = np.array([[10, 10], [20, 20]])
        b = np.array([[10, 10]])
        assert ev.repeatability(a, b, Homography.identity(), 1.0, 64, 64, symmetric=True) == 0.75

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            ev.repeatability(np.zeros((1, 2)), np.zeros((1, 2)), Homography.identity(), 0.0, 8, 8)


class TestTrajectory:
    def test_equal(self, rng):
        gt = [PoseSE3.from_rotvec(rng.normal(size=3) * 0.1, rng.normal(size=3)) for _ in range(5)]
        err = ev.trajectory_error(gt, gt)
        assert err.ate_rmse == pytest.approx(0.0, abs=1e-12)
        assert err.rpe_trans == pytest.approx(0.0, abs=1e-12) and err.rpe_rot == pytest.approx(0.0, abs=1e-6)

    def test_rigid_offset_removed(self, rng):
        gt = [PoseSE3(np.eye(3), rng.normal(size=3)) for _ in range(6)]
        shift = PoseSE3.from_rotvec([0, 0.3, 0], [1, 2, 3])
        est = [shift @ p for p in gt]
        assert ev.trajectory_error(est, gt).ate_rmse < 1e-9

    def test_ate_matches_independent_alignment(self, rng):
        gt = [PoseSE3(np.eye(3), rng.normal(size=3)) for _ in range(8)]
        est = [PoseSE3(np.eye(3), p.translation + rng.normal(size=3) * 0.1) for p in gt]
        pe = np.array([p.translation for p in est])
        pg = np.array([p.translation for p in gt])
        rot, _ = Rotation.align_vectors(pg - pg.mean(0), pe - pe.mean(0))
        d = rot.apply(pe - pe.mean(0)) - (pg - pg.mean(0))
        want = np.sqrt(np.mean(np.sum(d * d, axis=1)))
        assert ev.trajectory_error(est, gt).ate_rmse == pytest.approx(want, rel=1e-9)

    def test_validation(self):
        p = [PoseSE3.identity()] * 3
        with pytest.raises(ValueError):
            ev.trajectory_error(p, p[:2])
        with pytest.raises(ValueError):
            ev.trajectory_error(p[:1], p[:1])

    def test_path_length(self):
        ps = [PoseSE3(np.eye(3), t) for t in ([0, 0, 0], [3, 4, 0], [3, 4, 1])]
        assert ev.path_length(ps) == pytest.approx(6.0)


class TestOverlay:
    def test_no_keypoints(self, tmp_path, rng):
        img = rng.integers(0, 200, (16, 16)).astype(np.uint8)
        out = ev.render_overlay(img, np.zeros((0, 2)), tmp_path / "o.pgm")
        assert np.array_equal(out, img)
        assert (tmp_path / "o.pgm").read_bytes() == b"P5\n16 16\n255\n" + img.tobytes()

    def test_cross(self):
        img = np.zeros((20, 20), np.uint8)
        out = ev.render_overlay(img, np.array([[10, 10]]))
        ys, xs = np.nonzero(out != img)
        assert sorted(zip(xs.tolist(), ys.tolist())) == [(9, 10), (10, 9), (10, 10), (10, 11), (11, 10)]

    def test_border_clipped(self):
        out = ev.render_overlay(np.zeros((5, 5), np.uint8), np.array([[0, 0]]))
        assert int((out > 0).sum()) == 3


def test_compare_table_and_csv(tmp_path):
    rows = [ev.ArmReport("classical", 0.5, 0.25, 0.75, 0.125, 0).row(), ev.ArmReport("learned", 1.0, 0.0, 0.5, 2.0, 3).row()]
    table = ev.format_compare_table(rows)
    lines = table.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ev.COMPARE_COLUMNS
    assert lines[2].split() == ["learned", "1.0000", "0.0000", "0.5000", "2.0000", "3"]
    ev.write_report_csv(tmp_path / "r.csv", rows, ev.COMPARE_COLUMNS)
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "classical,0.500000,0.250000,0.750000,0.125000,0"


class TestPGM:
    def test_round_trip_8(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 9)).astype(np.uint8)
        io.write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), img)

    def test_round_trip_16(self, tmp_path, rng):
        img = rng.integers(0, 65536, (7, 9)).astype(np.uint16)
        io.write_pgm(tmp_path / "a.pgm", img)
        back = io.read_pgm(tmp_path / "a.pgm")
        assert back.dtype == np.uint16 and np.array_equal(back, img)

    def test_comment_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
        assert io.read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]

    def test_rejects(self, tmp_path):
        with pytest.raises(TypeError):
            io.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))
        (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            io.read_pgm(tmp_path / "p2.pgm")


def test_kv_round_trip(tmp_path):
    io.write_kv(tmp_path / "a.cfg", {"a": "1", "b.c": "x y"})
    assert io.read_kv(tmp_path / "a.cfg") == {"a": "1", "b.c": "x y"}
    (tmp_path / "b.cfg").write_text("# comment\n\nk = v # trailing\n")
    assert io.read_kv(tmp_path / "b.cfg") == {"k": "v"}
    (tmp_path / "bad.cfg").write_text("novalue\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        io.read_kv(tmp_path / "bad.cfg")
