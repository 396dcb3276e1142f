"""Coverage, repeatability, trajectory accuracy and overlay rendering."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import io
from .geometry import Homography, PoseSE3, apply_homography, relative_poses, rigid_align


@dataclass
class CoverageReport:
    occupancy_entropy: float
    dynamic_region_fraction: float
    keypoint_count: int
    empty: bool = False


def coverage(xy: np.ndarray, width: int, height: int, grid: int = 8, region_mask: Optional[np.ndarray] = None) -> CoverageReport:
    """Normalised entropy of keypoint counts over a ``grid`` x ``grid`` partition.

    ``dynamic_region_fraction`` is the share of keypoints on ``region_mask``.
    """
    if grid < 2:
        raise ValueError("coverage grid must be at least 2x2")
    xy = np.asarray(xy).reshape(-1, 2)
    n = len(xy)
    if n == 0:
        return CoverageReport(0.0, 0.0, 0, empty=True)
    gx = np.clip((xy[:, 0] * grid // width).astype(int), 0, grid - 1)
    gy = np.clip((xy[:, 1] * grid // height).astype(int), 0, grid - 1)
    counts = np.bincount(gy * grid + gx, minlength=grid * grid).astype(np.float64)
    p = counts[counts > 0] / n
    ent = float(-(p * np.log(p)).sum() / np.log(grid * grid))
    ent = min(max(ent, 0.0), 1.0)
    frac = 0.0
    if region_mask is not None:
        m = np.asarray(region_mask, dtype=bool)
        xi = np.asarray(xy, dtype=np.int64)
        frac = float(m[xi[:, 1], xi[:, 0]].mean())
    return CoverageReport(ent, frac, n)


def static_coverage(xy: np.ndarray, width: int, height: int, region_mask: np.ndarray, grid: int = 8) -> CoverageReport:
    """Coverage computed only over keypoints that lie off the dynamic region."""
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    keep = ~np.asarray(region_mask, dtype=bool)[xy[:, 1], xy[:, 0]]
    return coverage(xy[keep], width, height, grid)


def repeatability(xy_a: np.ndarray, xy_b: np.ndarray, h: Homography, eps: float, width: int, height: int, symmetric: bool = False):
    """Share of ``a`` keypoints whose image under ``h`` has a ``b`` keypoint within ``eps`` px.

    Only mappings landing inside the image count. Returns ``None`` when none do.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def one_way(a, b, hom):
        a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
        b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
        if len(a) == 0:
            return None
        pa = apply_homography(hom, a)
        inside = (pa[:, 0] >= 0) & (pa[:, 1] >= 0) & (pa[:, 0] <= width - 1) & (pa[:, 1] <= height - 1)
        if not inside.any():
            return None
        if len(b) == 0:
            return 0.0
        d = np.linalg.norm(pa[inside][:, None, :] - b[None, :, :], axis=-1).min(axis=1)
        return float(np.mean(d <= eps))

    fwd = one_way(xy_a, xy_b, h)
    if not symmetric:
        return fwd
    bwd = one_way(xy_b, xy_a, h.inverse())
    if fwd is None or bwd is None:
        return None
    return (fwd + bwd) / 2


@dataclass
class TrajectoryError:
    ate_rmse: float
    rpe_trans: float
    rpe_rot: float
    failure_count: int = 0


def trajectory_error(est: Sequence[PoseSE3], gt: Sequence[PoseSE3], failure_count: int = 0) -> TrajectoryError:
    """ATE after rigid (scale-free) alignment plus per-frame relative pose error."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    pe = np.array([p.translation for p in est])
    pg = np.array([p.translation for p in gt])
    align = rigid_align(pe, pg)
    d = align.transform(pe) - pg
    ate = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    trans, rot = [], []
    for re, rg in zip(relative_poses(est), relative_poses(gt)):
        err = rg.inverse() @ re
        trans.append(np.linalg.norm(err.translation))
        rot.append(np.degrees(err.rotation_angle()))
    return TrajectoryError(ate, float(np.mean(trans)), float(np.mean(rot)), failure_count)


def path_length(poses: Sequence[PoseSE3]) -> float:
    p = np.array([x.translation for x in poses])
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def render_overlay(img: np.ndarray, xy: np.ndarray, path=None) -> np.ndarray:
    """Mark keypoints with 5-pixel crosses at full intensity; optionally write a PGM."""
    out = np.array(img, dtype=np.uint8, copy=True)
    h, w = out.shape
    for x, y in np.asarray(xy, dtype=np.int64).reshape(-1, 2):
        for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
            u, v = x + dx, y + dy
            if 0 <= u < w and 0 <= v < h:
                out[v, u] = 255
    if path is not None:
        io.write_pgm(path, out)
    return out


COMPARE_COLUMNS = ["method", "entropy", "dyn_fraction", "repeatability", "ate_rmse", "failures"]


def format_compare_table(rows: Sequence[dict]) -> str:
    """Fixed-column plain-text table for method comparisons."""
    lines = ["  ".join(f"{c:>13}" for c in COMPARE_COLUMNS)]
    for r in rows:
        cells = []
        for c in COMPARE_COLUMNS:
            v = r[c]
            cells.append(f"{v:>13}" if isinstance(v, (str, int)) else f"{v:>13.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def write_report_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.6f}" for c in columns])


# ---------------------------------------------------------------- extractor evaluation


@dataclass
class ArmReport:
    method: str
    entropy: float
    dyn_fraction: float
    repeatability: float
    ate_rmse: float
    failures: int
    keypoints: float = 0.0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in COMPARE_COLUMNS}


def detection_stats(extractor, ds, grid: int = 8, hom_cfg=None, eps: float = 3.0, seed: int = 0):
    """Static-region entropy, dynamic fraction and repeatability averaged over left frames.

    Entropy is the per-frame mean of :func:`static_coverage`; the dynamic
    fraction pools all keypoints; repeatability maps each frame's keypoints
    into its warp by a homography drawn from ``(seed, frame)``.
    """
    from .geometry import HomographyConfig, sample_homography, warp_image

    hgt, wid = ds.frames[0][0].shape
    hom_cfg = hom_cfg or HomographyConfig(width=wid, height=hgt)
    ents, reps = [], []
    n_dyn = n_all = 0
    for i, (left, _) in enumerate(ds.frames):
        xy = extractor(left).xy
        mask = ds.gt_region_mask[i]
        ents.append(static_coverage(xy, wid, hgt, mask, grid).occupancy_entropy)
        xi = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
        n_dyn += int(mask[xi[:, 1], xi[:, 0]].sum())
        n_all += len(xi)
        h = sample_homography(hom_cfg, int(np.random.default_rng([seed, i]).integers(2**31)))
        warped, _ = warp_image(left, h)
        r = repeatability(xy, extractor(np.clip(np.rint(warped), 0, 255).astype(np.uint8)).xy, h, eps, wid, hgt)
        if r is not None:
            reps.append(r)
    return {
        "entropy": float(np.mean(ents)),
        "dyn_fraction": n_dyn / n_all if n_all else 0.0,
        "repeatability": float(np.mean(reps)) if reps else 0.0,
        "keypoints": n_all / len(ds.frames),
    }


def evaluate_arm(method: str, extractor, ds, vo_cfg=None, grid: int = 8, hom_cfg=None, eps: float = 3.0, seed: int = 0) -> ArmReport:
    """Detection statistics plus VO accuracy for one extractor on a dataset."""
    from .matcher_vo import VOConfig, run_vo

    st = detection_stats(extractor, ds, grid, hom_cfg, eps, seed)
    vo = run_vo(ds.frames, extractor, ds.rig, vo_cfg or VOConfig())
    err = trajectory_error(vo.trajectory(ds.gt_poses[0]), ds.gt_poses, vo.failure_count)
    return ArmReport(method, st["entropy"], st["dyn_fraction"], st["repeatability"], err.ate_rmse, vo.failure_count, st["keypoints"])
