"""Pseudo-labels from VO geometry.

Tracks are judged by their reprojection residuals under the estimated motion;
keypoints of good tracks become positive cells of a label grid, undecided ones
are left unsupervised, and everything else is dustbin. Homographic warps give
the second view and the cell correspondences used by the descriptor loss.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import CELL
from .geometry import (
    Homography,
    PoseSE3,
    StereoRig,
    apply_homography,
    compose,
    transform,
    warp_image,
    warp_valid_mask,
)
from .matcher_vo import Track, VOResult

log = logging.getLogger(__name__)

DUSTBIN = CELL * CELL
GOOD, BAD, UNDECIDED = "good", "bad", "undecided"


@dataclass(frozen=True)
class SupervisionConfig:
    tau_px: float = 1.0
    min_length: int = 3
    stereo_tau: float = 1.0
    eps_cell: float = 8.0

    def __post_init__(self):
        if not (self.tau_px > 0 and self.min_length > 0 and self.stereo_tau > 0 and self.eps_cell > 0):
            raise ValueError("supervision thresholds must be positive")


@dataclass
class GoodFeatureVerdict:
    track_id: int
    verdict: str
    mean_residual: float
    track_length: int
    stereo_consistent: bool


def _pose_between(rel: Sequence[PoseSE3], f0: int, f1: int) -> PoseSE3:
    pose = PoseSE3.identity()
    for k in range(f0, f1):
        pose = compose(rel[k], pose)
    return pose


def score_track(track: Track, rel: Sequence[PoseSE3], rig: StereoRig, cfg: SupervisionConfig) -> GoodFeatureVerdict:
    intr = rig.left
    residuals = []
    stereo_checks = []
    obs = track.observations
    for a, b in zip(obs[:-1], obs[1:]):
        if a.depth is None:
            continue
        za = a.depth
        p = np.array([(a.left[0] - intr.cx) / intr.fx * za, (a.left[1] - intr.cy) / intr.fy * za, za])
        q = transform(_pose_between(rel, a.frame, b.frame), p)
        if not q[2] > 1e-9:
            residuals.append(np.inf)
            continue
        proj = np.array([intr.fx * q[0] / q[2] + intr.cx, intr.fy * q[1] / q[2] + intr.cy])
        residuals.append(float(np.linalg.norm(proj - b.left)))
        if b.right is not None:
            qr = transform(rig.extrinsic, q)
            if qr[2] > 1e-9:
                pr = np.array([rig.right.fx * qr[0] / qr[2] + rig.right.cx, rig.right.fy * qr[1] / qr[2] + rig.right.cy])
                stereo_checks.append(float(np.linalg.norm(pr - b.right)) <= cfg.stereo_tau)
            else:
                stereo_checks.append(False)
    track.residuals = residuals
    n = len(track)
    if not residuals:
        return GoodFeatureVerdict(track.id, UNDECIDED, float("nan"), n, False)
    mean = float(np.mean(residuals))
    consistent = bool(stereo_checks) and all(stereo_checks)
    if mean > cfg.tau_px or (stereo_checks and not all(stereo_checks)):
        verdict = BAD
    elif n >= cfg.min_length and consistent:
        verdict = GOOD
    else:
        verdict = UNDECIDED
    return GoodFeatureVerdict(track.id, verdict, mean, n, consistent)


def score_tracks(vo: VOResult, rig: StereoRig, cfg: SupervisionConfig = SupervisionConfig(), poses: Optional[Sequence[PoseSE3]] = None) -> list[GoodFeatureVerdict]:
    """Verdict per track; ``poses`` overrides the VO relative poses (e.g. ground truth)."""
    rel = list(poses) if poses is not None else vo.relative_poses
    if len(rel) < 1:
        raise ValueError("need at least one relative pose")
    return [score_track(t, rel, rig, cfg) for t in vo.tracks]


# ---------------------------------------------------------------- label grids


@dataclass
class LabelGrid:
    """Per-cell targets: 0..63 is the keypoint offset inside the cell, 64 the dustbin.

    ``ignore_xy`` holds undecided keypoints; their cells are left out of the loss.
    """

    labels: np.ndarray
    ignore_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @property
    def shape(self):
        return self.labels.shape

    @property
    def ignore(self) -> np.ndarray:
        m = np.zeros(self.labels.shape, dtype=bool)
        if len(self.ignore_xy):
            m[self.ignore_xy[:, 1] // CELL, self.ignore_xy[:, 0] // CELL] = True
        return m & (self.labels == DUSTBIN)

    def keypoints(self) -> np.ndarray:
        """Pixel ``(x, y)`` of each labelled cell, in row-major cell order."""
        i, j = np.nonzero(self.labels < DUSTBIN)
        off = self.labels[i, j]
        return np.stack([j * CELL + off % CELL, i * CELL + off // CELL], -1).astype(np.int64)


def build_label_grid(good: Sequence, width: int, height: int, undecided: Sequence = ()) -> LabelGrid:
    """Encode good keypoints ``(x, y[, mean_residual])`` into an (H/8, W/8) grid.

    Within a cell the keypoint with the smaller residual wins, ties going to
    the smaller ``(y, x)``.
    """
    labels = np.full((height // CELL, width // CELL), DUSTBIN, dtype=np.int64)
    best: dict[tuple[int, int], tuple] = {}
    for item in good:
        x, y = int(item[0]), int(item[1])
        res = float(item[2]) if len(item) > 2 else 0.0
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"keypoint ({x}, {y}) outside the image")
        key = (y // CELL, x // CELL)
        cand = (res, y, x)
        if key not in best or cand < best[key]:
            best[key] = cand
    for (i, j), (_, y, x) in best.items():
        labels[i, j] = (y % CELL) * CELL + (x % CELL)
    ign = np.array([(int(p[0]), int(p[1])) for p in undecided], dtype=np.int64).reshape(-1, 2)
    if len(ign):
        ign = ign[(ign[:, 0] >= 0) & (ign[:, 1] >= 0) & (ign[:, 0] < width) & (ign[:, 1] < height)]
    return LabelGrid(labels, ign)


def frame_labels(vo: VOResult, verdicts: Sequence[GoodFeatureVerdict], n_frames: int, width: int, height: int) -> list[LabelGrid]:
    """Label grid per frame from track verdicts."""
    good = [[] for _ in range(n_frames)]
    und = [[] for _ in range(n_frames)]
    for t, v in zip(vo.tracks, verdicts):
        if v.verdict == BAD:
            continue
        for o in t.observations:
            x, y = int(round(o.left[0])), int(round(o.left[1]))
            if not (0 <= x < width and 0 <= y < height):
                continue
            if v.verdict == GOOD:
                good[o.frame].append((x, y, v.mean_residual))
            else:
                und[o.frame].append((x, y))
    return [build_label_grid(good[f], width, height, und[f]) for f in range(n_frames)]


def _map_points(xy: np.ndarray, h: Homography, valid: np.ndarray):
    hgt, wid = valid.shape
    if len(xy) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    m = np.rint(apply_homography(h, xy.astype(np.float64)))
    ok = np.all(np.isfinite(m), axis=1)
    ok &= (m[:, 0] >= 0) & (m[:, 1] >= 0) & (m[:, 0] < wid) & (m[:, 1] < hgt)
    m = m[ok].astype(np.int64)
    return m[valid[m[:, 1], m[:, 0]]]


def cell_valid_mask(valid: np.ndarray) -> np.ndarray:
    hgt, wid = valid.shape
    return valid.reshape(hgt // CELL, CELL, wid // CELL, CELL).all(axis=(1, 3))


def make_warped_pair(img: np.ndarray, grid: LabelGrid, h: Homography):
    """Warp an image and carry its labels along: returns ``(img', grid', cell_valid')``."""
    warped, valid = warp_image(img, h)
    hgt, wid = valid.shape
    pts = _map_points(grid.keypoints(), h, valid)
    ign = _map_points(grid.ignore_xy, h, valid)
    out = build_label_grid([(x, y) for x, y in pts], wid, hgt, [(x, y) for x, y in ign])
    return warped, out, cell_valid_mask(valid)


# ---------------------------------------------------------------- correspondences


@dataclass
class CorrespondenceMatrix:
    s: np.ndarray  # (N, N) between cells of I (rows) and I' (columns)
    valid_a: np.ndarray  # (N,)
    valid_b: np.ndarray  # (N,)


def cell_centers(width: int, height: int) -> np.ndarray:
    hc, wc = height // CELL, width // CELL
    i, j = np.mgrid[0:hc, 0:wc]
    return np.stack([j.ravel() * CELL + 3.5, i.ravel() * CELL + 3.5], -1)


def build_correspondence_matrix(h: Homography, width: int, height: int, eps_cell: float = 8.0) -> CorrespondenceMatrix:
    """``s[c, c'] = 1`` when cell c's centre lands (under h) nearest to cell c' and within ``eps_cell``.

    Equidistant candidates resolve to the lower row-major index, so every row
    has at most one entry.
    """
    hc, wc = height // CELL, width // CELL
    n = hc * wc
    centers = cell_centers(width, height)
    mapped = apply_homography(h, centers)
    valid_b = cell_valid_mask(warp_valid_mask(h, width, height)).ravel()
    valid_a = np.all(np.isfinite(mapped), axis=1)
    valid_a &= (mapped[:, 0] >= 0) & (mapped[:, 1] >= 0) & (mapped[:, 0] <= width - 1) & (mapped[:, 1] <= height - 1)
    s = np.zeros((n, n), dtype=np.uint8)
    g = (np.where(valid_a[:, None], mapped, 0.0) - 3.5) / CELL
    j = np.clip(np.ceil(g[:, 0] - 0.5), 0, wc - 1).astype(np.int64)
    i = np.clip(np.ceil(g[:, 1] - 0.5), 0, hc - 1).astype(np.int64)
    tgt = i * wc + j
    dist = np.linalg.norm(mapped - centers[tgt], axis=1)
    ok = valid_a & valid_b[tgt] & (dist <= eps_cell)
    s[np.flatnonzero(ok), tgt[ok]] = 1
    return CorrespondenceMatrix(s, valid_a, valid_b)


# ---------------------------------------------------------------- files


def write_labels(root, grids: Sequence[LabelGrid], verdicts: Sequence[GoodFeatureVerdict]) -> None:
    root = Path(root)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for f, g in enumerate(grids):
        with open(root / "labels" / f"{f:06d}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["cell_row", "cell_col", "label"])
            for i, j in zip(*np.nonzero(g.labels < DUSTBIN)):
                wr.writerow([int(i), int(j), int(g.labels[i, j])])
    with open(root / "verdicts.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["track_id", "verdict", "mean_residual", "length"])
        for v in verdicts:
            wr.writerow([v.track_id, v.verdict, "" if np.isnan(v.mean_residual) else repr(v.mean_residual), v.track_length])


def read_labels(root, n_frames: int, width: int, height: int) -> list[LabelGrid]:
    root = Path(root)
    grids = []
    for f in range(n_frames):
        labels = np.full((height // CELL, width // CELL), DUSTBIN, dtype=np.int64)
        with open(root / "labels" / f"{f:06d}.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                labels[int(row["cell_row"]), int(row["cell_col"])] = int(row["label"])
        grids.append(LabelGrid(labels))
    return grids
