"""Descriptor matching and a minimal stereo visual-odometry frontend."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .features import KeypointSet
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    StereoRig,
    accumulate,
    bearing,
    rigid_align,
    so3_exp,
    triangulate_rectified_batch,
)

log = logging.getLogger(__name__)


class PoseEstimationError(RuntimeError):
    """Too few correspondences to attempt a pose."""


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    similarity: float


# ---------------------------------------------------------------- matching


def match_descriptors(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    ratio: float = 0.8,
    mutual: bool = True,
    allowed: Optional[np.ndarray] = None,
) -> list[Match]:
    """Nearest-neighbour matching on unit descriptors.

    ``allowed`` optionally restricts the candidate pairs (boolean ``(Na, Nb)``).
    The ratio test compares Euclidean distances to the best and second-best
    candidate; a query with a single candidate skips it.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    sim = a @ b.T
    if allowed is not None:
        sim = np.where(allowed, sim, -np.inf)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))

    best_b = np.argmax(sim, axis=1)
    rows = np.arange(len(a))
    best_sim = sim[rows, best_b]
    ok = np.isfinite(best_sim)
    ncand = np.isfinite(sim).sum(axis=1)
    if sim.shape[1] >= 2:
        part = np.partition(dist, 1, axis=1)
        d1, d2 = part[:, 0], part[:, 1]
        ratio_ok = (ncand < 2) | (d1 < ratio * d2)
    else:
        ratio_ok = np.ones(len(a), dtype=bool)
    ok &= ratio_ok
    if mutual:
        best_a = np.argmax(sim, axis=0)
        ok &= best_a[best_b] == rows
    return [Match(int(i), int(best_b[i]), float(best_sim[i])) for i in np.flatnonzero(ok)]


def stereo_match(
    left: KeypointSet,
    right: KeypointSet,
    rig: StereoRig,
    band: float | None = None,
    ratio: float = 0.8,
    max_disparity: float | None = None,
):
    """Row-gated descriptor matching between rectified views.

    Returns ``[(Match, depth)]``; depth is ``None`` for far points (disparity
    at or below the rig's minimum), which are kept as depth-unknown matches.
    """
    band = rig.epipolar_band if band is None else band
    if len(left) == 0 or len(right) == 0:
        return []
    lx, ly = left.xy[:, 0][:, None], left.xy[:, 1][:, None]
    rx, ry = right.xy[:, 0][None, :], right.xy[:, 1][None, :]
    allowed = (np.abs(ly - ry) <= band) & (lx - rx > 0)
    if max_disparity is not None:
        allowed &= lx - rx <= max_disparity
    out = []
    matches = match_descriptors(left.desc, right.desc, ratio=ratio, mutual=True, allowed=allowed)
    if not matches:
        return out
    ia = np.array([m.idx_a for m in matches])
    ib = np.array([m.idx_b for m in matches])
    # keypoints sit on integer rows, so re-check the band with the rig's own test
    _, depth, status = triangulate_rectified_batch(rig, left.xy[ia], right.xy[ib])
    for m, d, s in zip(matches, depth, status):
        if s == 2:
            continue
        out.append((m, float(d) if s == 0 else None))
    return out


# ---------------------------------------------------------------- P3P + RANSAC


def p3p_grunert(points: np.ndarray, bearings: np.ndarray) -> list[PoseSE3]:
    """Minimal absolute pose from three world points and unit bearings.

    Solves Grunert's quartic for the distances along the rays and then fits
    the rigid motion. Returns up to four world->camera poses.
    """
    p1, p2, p3 = np.asarray(points, dtype=np.float64)
    f1, f2, f3 = np.asarray(bearings, dtype=np.float64)
    a = np.linalg.norm(p2 - p3)
    b = np.linalg.norm(p1 - p3)
    c = np.linalg.norm(p1 - p2)
    if min(a, b, c) < 1e-9:
        return []
    ca, cb, cg = f2 @ f3, f1 @ f3, f1 @ f2
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    coeffs = [
        (amc - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg),
        (1 + amc) ** 2 - 4 * a2 / b2 * cg**2,
    ]
    if not np.all(np.isfinite(coeffs)):
        return []
    roots = np.roots(coeffs)
    sols = []
    world = np.stack([p1, p2, p3])
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v**2 - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1sq = b2 / (1 + v**2 - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        cam = np.stack([s1 * f1, u * s1 * f2, v * s1 * f3])
        try:
            sols.append(rigid_align(world, cam))
        except ValueError:
            continue
    return sols


@dataclass(frozen=True)
class RansacConfig:
    inlier_px: float = 2.0
    min_inliers: int = 12
    iterations: int = 200
    seed: int = 0
    max_gn_iters: int = 50


@dataclass
class PoseEstimate:
    pose: PoseSE3
    inliers: np.ndarray
    degenerate: bool
    rms_minimal: float
    rms_refined: float


def _residuals(pose: PoseSE3, pts: np.ndarray, pix: np.ndarray, intr: CameraIntrinsics):
    q = pts @ pose.rotation.T + pose.translation
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    r = np.stack([intr.fx * q[:, 0] / zs + intr.cx - pix[:, 0], intr.fy * q[:, 1] / zs + intr.cy - pix[:, 1]], -1)
    r[~front] = np.inf
    return r, q


def refine_pose(pose: PoseSE3, pts: np.ndarray, pix: np.ndarray, intr: CameraIntrinsics, max_iters: int = 50) -> PoseSE3:
    """Gauss-Newton on squared reprojection error with step halving (cost never increases)."""
    r, q = _residuals(pose, pts, pix, intr)
    cost = float(np.sum(r * r))
    for _ in range(max_iters):
        x, y, z = q[:, 0], q[:, 1], q[:, 2]
        n = len(q)
        jq = np.zeros((n, 2, 3))
        jq[:, 0, 0] = intr.fx / z
        jq[:, 0, 2] = -intr.fx * x / z**2
        jq[:, 1, 1] = intr.fy / z
        jq[:, 1, 2] = -intr.fy * y / z**2
        # dq/d(omega) = -[q]x, dq/dv = I
        qx = np.zeros((n, 3, 3))
        qx[:, 0, 1], qx[:, 0, 2] = -z, y
        qx[:, 1, 0], qx[:, 1, 2] = z, -x
        qx[:, 2, 0], qx[:, 2, 1] = -y, x
        j = np.concatenate([-jq @ qx, jq], axis=2).reshape(-1, 6)
        rv = r.reshape(-1)
        try:
            delta = -np.linalg.solve(j.T @ j, j.T @ rv)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        step = delta
        accepted = False
        for _ in range(30):
            if np.linalg.norm(step) < 1e-10:
                break
            rot = so3_exp(step[:3])
            cand = PoseSE3(rot @ pose.rotation, rot @ pose.translation + step[3:])
            r_c, q_c = _residuals(cand, pts, pix, intr)
            c_c = float(np.sum(r_c * r_c))
            if c_c < cost:
                pose, r, q, cost = cand, r_c, q_c, c_c
                accepted = True
                break
            step = step / 2
        if not accepted or np.linalg.norm(step) < 1e-10:
            break
    return pose


def estimate_relative_pose(points_a: np.ndarray, pix_b: np.ndarray, intr: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Pose mapping frame-a points into frame b from 3D-2D correspondences."""
    pts = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    pix = np.asarray(pix_b, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 4:
        raise PoseEstimationError(f"need at least 4 correspondences, got {n}")
    rays = bearing(intr, pix)
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_px**2
    best = None  # (count, -cost, pose)
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=3, replace=False)
        for pose in p3p_grunert(pts[idx], rays[idx]):
            r, _ = _residuals(pose, pts, pix, intr)
            e2 = np.sum(r * r, axis=1)
            inl = e2 < thr2
            score = (int(inl.sum()), -float(np.sum(np.minimum(e2, thr2))))
            if best is None or score > best[0]:
                best = (score, pose)
    if best is None:
        return PoseEstimate(PoseSE3.identity(), np.zeros(n, bool), True, np.inf, np.inf)
    pose = best[1]
    r, _ = _residuals(pose, pts, pix, intr)
    inl = np.sum(r * r, axis=1) < thr2
    if inl.sum() < 3:
        return PoseEstimate(pose, inl, True, np.inf, np.inf)
    rms_min = float(np.sqrt(np.mean(np.sum(r[inl] ** 2, axis=1))))
    refined = refine_pose(pose, pts[inl], pix[inl], intr, cfg.max_gn_iters)
    r2, _ = _residuals(refined, pts, pix, intr)
    rms_ref = float(np.sqrt(np.mean(np.sum(r2[inl] ** 2, axis=1))))
    # second pass on the refined inlier set, accepted only if it keeps the first set's RMS
    inl2 = np.sum(r2 * r2, axis=1) < thr2
    if inl2.sum() >= 3 and not np.array_equal(inl2, inl):
        cand = refine_pose(refined, pts[inl2], pix[inl2], intr, cfg.max_gn_iters)
        r3, _ = _residuals(cand, pts, pix, intr)
        if np.sqrt(np.mean(np.sum(r3[inl] ** 2, axis=1))) <= rms_ref:
            refined, r2 = cand, r3
            rms_ref = float(np.sqrt(np.mean(np.sum(r3[inl] ** 2, axis=1))))
    final = np.sum(r2 * r2, axis=1) < thr2
    return PoseEstimate(refined, final, bool(final.sum() < cfg.min_inliers), rms_min, rms_ref)


# ---------------------------------------------------------------- tracks and VO


@dataclass
class Observation:
    frame: int
    left: np.ndarray
    right: Optional[np.ndarray]
    depth: Optional[float]
    descriptor: Optional[np.ndarray] = None


@dataclass
class Track:
    id: int
    observations: list[Observation] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)

    def add(self, obs: Observation) -> None:
        if self.observations and obs.frame <= self.observations[-1].frame:
            raise ValueError("track frames must strictly increase")
        self.observations.append(obs)

    def __len__(self):
        return len(self.observations)

    @property
    def frames(self) -> list[int]:
        return [o.frame for o in self.observations]

    @property
    def depth_per_obs(self) -> list[Optional[float]]:
        return [o.depth for o in self.observations]


@dataclass
class VOResult:
    relative_poses: list[PoseSE3]
    tracks: list[Track]
    inlier_counts: list[int]
    failures: list[bool]
    keypoints: list[KeypointSet] = field(default_factory=list)

    def trajectory(self, start: PoseSE3 | None = None) -> list[PoseSE3]:
        return accumulate(self.relative_poses, start)

    @property
    def failure_count(self) -> int:
        return int(sum(self.failures))


@dataclass(frozen=True)
class VOConfig:
    ratio: float = 0.8
    mutual: bool = True
    band: float = 1.0
    max_disparity: Optional[float] = 64.0
    temporal_radius: Optional[float] = 40.0
    ransac: RansacConfig = RansacConfig()


Extractor = Callable[[np.ndarray], KeypointSet]


@dataclass
class _FrameState:
    pts: np.ndarray  # (M, 2) float
    desc: np.ndarray
    right: np.ndarray  # (M, 2), NaN where no stereo match
    depth: np.ndarray  # (M,), NaN where unknown
    track: np.ndarray  # (M,) int


def _stereo(left: KeypointSet, right: KeypointSet, rig: StereoRig, cfg: VOConfig):
    rpix = np.full((len(left), 2), np.nan)
    depth = np.full(len(left), np.nan)
    for m, d in stereo_match(left, right, rig, cfg.band, cfg.ratio, cfg.max_disparity):
        rpix[m.idx_a] = right.xy[m.idx_b]
        if d is not None:
            depth[m.idx_a] = d
    return rpix, depth


def _oracle_stereo(ds, frame: int, pts: np.ndarray, rig: StereoRig):
    depth_gt, idx = ds.world.depth_at(ds.gt_poses[frame], rig.left, pts)
    ok = idx >= 0
    rpix = np.full((len(pts), 2), np.nan)
    dz = np.where(ok, depth_gt, 1.0)
    rpix[ok] = np.stack([pts[ok, 0] - rig.left.fx * rig.baseline / dz[ok], pts[ok, 1]], -1)
    _, depth, status = triangulate_rectified_batch(rig, pts, np.where(ok[:, None], rpix, np.nan))
    depth[~ok] = np.nan
    rpix[~ok] = np.nan
    return rpix, depth


def run_vo(
    frames: Sequence[tuple[np.ndarray, np.ndarray]],
    extractor: Extractor,
    rig: StereoRig,
    cfg: VOConfig = VOConfig(),
    oracle=None,
) -> VOResult:
    """Frame-to-frame stereo VO.

    With ``oracle`` (a synthetic dataset) stereo and temporal correspondences
    come from ground truth instead of the matcher, which isolates the pose
    estimator. Keypoint detection still uses ``extractor``.
    """
    if len(frames) < 2:
        raise ValueError("run_vo needs at least two frames")
    from .synthscene import gt_correspondences  # local: synthscene is only needed in oracle mode

    tracks: list[Track] = []
    rel, inliers, failures, kps_all = [], [], [], []

    def open_tracks(frame, pts, desc, rpix, depth):
        ids = np.empty(len(pts), dtype=np.int64)
        for k in range(len(pts)):
            t = Track(len(tracks))
            t.add(_obs(frame, pts[k], rpix[k], depth[k], desc[k]))
            tracks.append(t)
            ids[k] = t.id
        return ids

    def detect(i):
        left, right = frames[i]
        kl = extractor(left)
        kps_all.append(kl)
        if oracle is None:
            rpix, depth = _stereo(kl, extractor(right), rig, cfg)
        else:
            rpix, depth = _oracle_stereo(oracle, i, kl.xy.astype(np.float64), rig)
        return kl, rpix, depth

    kl, rpix, depth = detect(0)
    pts = kl.xy.astype(np.float64)
    state = _FrameState(pts, kl.desc, rpix, depth, open_tracks(0, pts, kl.desc, rpix, depth))

    for i in range(1, len(frames)):
        kl, rpix, depth = detect(i)
        new_pts = kl.xy.astype(np.float64)
        if oracle is None:
            allowed = None
            if cfg.temporal_radius is not None and len(state.pts) and len(new_pts):
                diff = np.abs(state.pts[:, None, :] - new_pts[None, :, :]).max(-1)
                allowed = diff <= cfg.temporal_radius
            matches = match_descriptors(state.desc, kl.desc, cfg.ratio, cfg.mutual, allowed)
            src = np.array([m.idx_a for m in matches], dtype=np.int64)
            dst = np.array([m.idx_b for m in matches], dtype=np.int64)
            cur_pts, cur_desc, cur_r, cur_d = new_pts, kl.desc, rpix, depth
        else:
            prop = gt_correspondences(oracle, i - 1, state.pts, i) if len(state.pts) else np.zeros((0, 2))
            src = np.flatnonzero(np.all(np.isfinite(prop), axis=1))
            prop_pts = prop[src]
            if len(prop_pts) and len(new_pts):
                dmin = np.abs(new_pts[:, None, :] - prop_pts[None, :, :]).max(-1).min(1)
                fresh = dmin > 4
            else:
                fresh = np.ones(len(new_pts), dtype=bool)
            prop_r, prop_d = _oracle_stereo(oracle, i, prop_pts, rig)
            cur_pts = np.concatenate([prop_pts, new_pts[fresh]])
            cur_desc = np.concatenate([state.desc[src], kl.desc[fresh]])
            cur_r = np.concatenate([prop_r, rpix[fresh]])
            cur_d = np.concatenate([prop_d, depth[fresh]])
            dst = np.arange(len(src))

        # pose from previous-frame 3D points to current 2D observations
        has_d = np.isfinite(state.depth[src]) if len(src) else np.zeros(0, bool)
        s3, d2 = src[has_d], dst[has_d]
        pose, n_inl, failed = PoseSE3.identity(), 0, True
        if len(s3) >= 4:
            p = state.pts[s3]
            z = state.depth[s3]
            p3 = np.stack([(p[:, 0] - rig.left.cx) / rig.left.fx * z, (p[:, 1] - rig.left.cy) / rig.left.fy * z, z], -1)
            est = estimate_relative_pose(p3, cur_pts[d2], rig.left, cfg.ransac)
            n_inl = int(est.inliers.sum())
            if not est.degenerate:
                pose, failed = est.pose, False
        if failed:
            log.info("frame %d: pose estimation failed (%d candidates, %d inliers)", i, len(s3), n_inl)
        rel.append(pose)
        inliers.append(n_inl)
        failures.append(failed)

        ids = np.full(len(cur_pts), -1, dtype=np.int64)
        for a, b in zip(src, dst):
            tid = state.track[a]
            tracks[tid].add(_obs(i, cur_pts[b], cur_r[b], cur_d[b], cur_desc[b]))
            ids[b] = tid
        unmatched = np.flatnonzero(ids < 0)
        ids[unmatched] = open_tracks(i, cur_pts[unmatched], cur_desc[unmatched], cur_r[unmatched], cur_d[unmatched])
        state = _FrameState(cur_pts, cur_desc, cur_r, cur_d, ids)

    return VOResult(rel, tracks, inliers, failures, kps_all)


def _obs(frame, pt, rpix, depth, desc):
    return Observation(
        frame,
        np.asarray(pt, dtype=np.float64).copy(),
        None if not np.all(np.isfinite(rpix)) else np.asarray(rpix, dtype=np.float64).copy(),
        None if not np.isfinite(depth) else float(depth),
        desc,
    )


# ---------------------------------------------------------------- files


def write_tracks(path, tracks: Sequence[Track]) -> None:
    """``track_id,frame,x,y,right_x,depth`` with blanks for missing stereo/depth."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["track_id", "frame", "x", "y", "right_x", "depth"])
        for t in tracks:
            for o in t.observations:
                wr.writerow([
                    t.id, o.frame, repr(float(o.left[0])), repr(float(o.left[1])),
                    "" if o.right is None else repr(float(o.right[0])),
                    "" if o.depth is None else repr(float(o.depth)),
                ])


def read_tracks(path) -> list[Track]:
    by_id: dict[int, Track] = {}
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        for row in rd:
            tid = int(row["track_id"])
            x, y = float(row["x"]), float(row["y"])
            right = None if row["right_x"] == "" else np.array([float(row["right_x"]), y])
            depth = None if row["depth"] == "" else float(row["depth"])
            by_id.setdefault(tid, Track(tid)).add(Observation(int(row["frame"]), np.array([x, y]), right, depth))
    return [by_id[k] for k in sorted(by_id)]


def write_summary(path, vo: VOResult) -> None:
    n = len(vo.relative_poses) + 1
    lines = [
        f"frames = {n}",
        f"failures = {vo.failure_count}",
        f"mean_inliers = {float(np.mean(vo.inlier_counts)) if vo.inlier_counts else 0.0!r}",
        f"tracks = {len(vo.tracks)}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
