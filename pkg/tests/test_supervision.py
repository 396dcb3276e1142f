import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reference import brute_correspondence
from trackfeat import supervision as sv
from trackfeat.geometry import Homography, HomographyConfig, PoseSE3, project, sample_homography, transform
from trackfeat.matcher_vo import Observation, Track, VOResult
from trackfeat.supervision import BAD, DUSTBIN, GOOD, UNDECIDED, LabelGrid, SupervisionConfig
from trackfeat.synthscene import default_rig

RIG = default_rig()
INTR = RIG.left
STEP = PoseSE3.from_rotvec([0.0, 0.01, 0.0], [0.02, 0.0, -0.2])


def make_track(tid, x_world, n, rel=STEP, noise=None, stereo=True):
    """Track of a world point seen in frames 0..n-1 of a camera moving by ``rel`` each frame."""
    t = Track(tid)
    p = np.asarray(x_world, float)
    for f in range(n):
        pix = project(INTR, p)
        if noise is not None and f > 0:
            pix = pix + noise
        right = project(INTR, transform(RIG.extrinsic, p)) if stereo else None
        t.add(Observation(f, pix, right, float(p[2]) if stereo else None))
        p = transform(rel, p)
    return t


class TestScoring:
    def test_exact_track_good(self):
        t = make_track(0, [0.3, -0.2, 6.0], 4)
        v = sv.score_track(t, [STEP] * 3, RIG, SupervisionConfig())
        assert v.verdict == GOOD
        assert v.mean_residual == pytest.approx(0.0, abs=1e-9)
        assert v.stereo_consistent and v.track_length == 4

    def test_short_exact_track_undecided(self):
        t = make_track(0, [0.3, -0.2, 6.0], 2)
        assert sv.score_track(t, [STEP], RIG, SupervisionConfig()).verdict == UNDECIDED

    def test_single_observation_undecided(self):
        t = make_track(0, [0.3, -0.2, 6.0], 1)
        v = sv.score_track(t, [STEP], RIG, SupervisionConfig())
        assert v.verdict == UNDECIDED and np.isnan(v.mean_residual)

    def test_no_depth_undecided(self):
        t = make_track(0, [0.3, -0.2, 6.0], 5, stereo=False)
        assert sv.score_track(t, [STEP] * 4, RIG, SupervisionConfig()).verdict == UNDECIDED

    def test_large_residual_bad(self):
        t = make_track(0, [0.3, -0.2, 6.0], 4)
        t.observations[-1].left = t.observations[-1].left + np.array([6.0, 0.0])
        v = sv.score_track(t, [STEP] * 3, RIG, SupervisionConfig())
        assert v.verdict == BAD
        assert t.residuals == pytest.approx([0.0, 0.0, 6.0], abs=1e-9)
        assert v.mean_residual == pytest.approx(2.0, abs=1e-9)

    def test_stereo_inconsistent_bad(self):
        t = make_track(0, [0.3, -0.2, 6.0], 4)
        last = t.observations[-1]
        last.right = last.right + np.array([4.0, 0.0])
        assert sv.score_track(t, [STEP] * 3, RIG, SupervisionConfig()).verdict == BAD

    def test_wrong_motion_flags_track(self):
        t = make_track(0, [0.3, -0.2, 6.0], 4)
        wrong = PoseSE3.from_rotvec([0.0, 0.05, 0.0], [0.0, 0.0, -0.2])
        assert sv.score_track(t, [wrong] * 3, RIG, SupervisionConfig()).verdict == BAD

    def test_gap_composes_poses(self):
        t = make_track(0, [0.3, -0.2, 6.0], 4)
        del t.observations[1]
        v = sv.score_track(t, [STEP] * 3, RIG, SupervisionConfig())
        assert v.mean_residual == pytest.approx(0.0, abs=1e-9) and v.verdict == GOOD

    def test_score_tracks_pose_override(self):
        tracks = [make_track(i, [0.2 * i, 0.1, 5.0 + i], 4) for i in range(3)]
        vo = VOResult([PoseSE3.identity()] * 3, tracks, [0] * 3, [False] * 3)
        assert all(v.verdict == GOOD for v in sv.score_tracks(vo, RIG, poses=[STEP] * 3))
        with pytest.raises(ValueError):
            sv.score_tracks(VOResult([], tracks, [], []), RIG)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SupervisionConfig(tau_px=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
    def test_tighter_tau_shrinks_good_set(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        tracks = [make_track(i, [rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(4, 9)], 4,
                             noise=rng.normal(size=2) * 1.5) for i in range(8)]
        vo = VOResult([STEP] * 3, tracks, [0] * 3, [False] * 3)
        lo, hi = sorted((t1, t2))

        def good(tau):
            return {v.track_id for v in sv.score_tracks(vo, RIG, SupervisionConfig(tau_px=tau, stereo_tau=10.0)) if v.verdict == GOOD}

        assert good(lo) <= good(hi)


class TestLabelGrid:
    def test_empty(self):
        g = sv.build_label_grid([], 32, 24)
        assert g.labels.shape == (3, 4) and (g.labels == DUSTBIN).all()

    def test_offset_encoding(self):
        g = sv.build_label_grid([(9, 17)], 32, 24)
        assert g.labels[2, 1] == 9
        assert (g.labels == DUSTBIN).sum() == 11

    def test_collision_smaller_residual(self):
        g = sv.build_label_grid([(9, 17, 0.8), (12, 20, 0.2)], 32, 24)
        assert g.labels[2, 1] == (20 % 8) * 8 + 12 % 8

    def test_collision_tie_lexicographic(self):
        g = sv.build_label_grid([(12, 17, 0.5), (9, 20, 0.5), (10, 17, 0.5)], 32, 24)
        assert g.labels[2, 1] == (17 % 8) * 8 + 10 % 8

    def test_outside(self):
        with pytest.raises(ValueError):
            sv.build_label_grid([(40, 1)], 32, 24)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 23)), max_size=20, unique=True))
    def test_keypoints_round_trip(self, pts):
        g = sv.build_label_grid(pts, 32, 24)
        back = {tuple(p) for p in g.keypoints()}
        assert back <= set(pts)
        assert len(back) == len({(y // 8, x // 8) for x, y in pts})

    def test_ignore_only_on_dustbin(self):
        g = sv.build_label_grid([(1, 1)], 32, 24, undecided=[(2, 2), (20, 10)])
        assert g.ignore.tolist() == [[False] * 4, [False, False, True, False], [False] * 4]

    def test_frame_labels(self):
        tracks = [make_track(0, [0.3, -0.2, 6.0], 4), make_track(1, [-0.5, 0.2, 7.0], 2)]
        bad = make_track(2, [0.1, 0.4, 5.0], 4, noise=np.array([5.0, 0.0]))
        tracks.append(bad)
        vo = VOResult([STEP] * 3, tracks, [0] * 3, [False] * 3)
        verdicts = sv.score_tracks(vo, RIG)
        assert [v.verdict for v in verdicts] == [GOOD, UNDECIDED, BAD]
        grids = sv.frame_labels(vo, verdicts, 4, 256, 192)
        for f, g in enumerate(grids):
            x, y = np.rint(tracks[0].observations[f].left).astype(int)
            assert g.labels[y // 8, x // 8] == (y % 8) * 8 + x % 8
            assert (g.labels < DUSTBIN).sum() == 1
        assert len(grids[0].ignore_xy) == 1 and len(grids[2].ignore_xy) == 0


class TestWarpedPair:
    def test_identity(self, rng):
        img = rng.uniform(0, 1, (24, 32))
        g = sv.build_label_grid([(9, 17), (30, 2)], 32, 24)
        warped, g2, valid = sv.make_warped_pair(img, g, Homography.identity())
        assert np.array_equal(g2.labels, g.labels)
        assert valid.all()
        assert np.allclose(warped, img)

    def test_cell_shift(self, rng):
        img = rng.uniform(0, 1, (24, 32))
        g = sv.build_label_grid([(9, 17), (3, 2)], 32, 24)
        _, g2, valid = sv.make_warped_pair(img, g, Homography.translation(8, 0))
        assert np.array_equal(g2.labels[:, 1:], g.labels[:, :-1])
        assert (g2.labels[:, 0] == DUSTBIN).all()
        assert not valid[:, 0].any() and valid[:, 1:].all()

    def test_ignored_points_follow(self):
        g = sv.build_label_grid([], 32, 24, undecided=[(2, 2)])
        _, g2, _ = sv.make_warped_pair(np.zeros((24, 32)), g, Homography.translation(8, 8))
        assert g2.ignore_xy.tolist() == [[10, 10]]


class TestCorrespondence:
    def test_identity(self):
        c = sv.build_correspondence_matrix(Homography.identity(), 32, 24)
        assert np.array_equal(c.s, np.eye(12, dtype=np.uint8))
        assert c.valid_a.all() and c.valid_b.all()

    def test_shift_right(self):
        c = sv.build_correspondence_matrix(Homography.translation(8, 0), 32, 24)
        expect = np.zeros((12, 12), np.uint8)
        for i in range(3):
            for j in range(3):
                expect[i * 4 + j, i * 4 + j + 1] = 1
        assert np.array_equal(c.s, expect)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([4.0, 8.0]))
    def test_brute_force(self, seed, eps):
        h = sample_homography(HomographyConfig(width=64, height=48), seed)
        c = sv.build_correspondence_matrix(h, 64, 48, eps)
        assert np.array_equal(c.s, brute_correspondence(h, 64, 48, eps))
        assert (c.s.sum(axis=1) <= 1).all()


def test_label_files_round_trip(tmp_path):
    grids = [sv.build_label_grid([(9, 17), (30, 2)], 32, 24), sv.build_label_grid([], 32, 24)]
    verdicts = [sv.GoodFeatureVerdict(0, GOOD, 0.1, 3, True), sv.GoodFeatureVerdict(1, UNDECIDED, float("nan"), 1, False)]
    sv.write_labels(tmp_path, grids, verdicts)
    back = sv.read_labels(tmp_path, 2, 32, 24)
    assert all(np.array_equal(a.labels, b.labels) for a, b in zip(grids, back))
    lines = (tmp_path / "verdicts.csv").read_text().splitlines()
    assert lines == ["track_id,verdict,mean_residual,length", "0,good,0.1,3", "1,undecided,,1"]


def test_label_grid_dataclass():
    g = LabelGrid(np.full((2, 2), DUSTBIN))
    assert g.shape == (2, 2) and len(g.keypoints()) == 0
