"""Rigid poses, pinhole projection, rectified stereo, homographies and warping.

Every function here is pure. Points are row vectors: a single point is a
``(3,)`` array, a batch is ``(N, 3)``. Pixel coordinates are ``(u, v)`` with
``u`` along image columns.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation


class DomainError(ValueError):
    """Input outside the domain of a geometric operation."""


class FarPointError(DomainError):
    """Stereo disparity too small to give a bounded depth."""


class EpipolarError(DomainError):
    """Stereo pair violates the rectified row constraint."""


ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise DomainError("pose has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(r) <= 0:
            raise DomainError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "PoseSE3":
        return cls(so3_exp(np.asarray(rotvec, dtype=np.float64)), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return transform(self, x)

    def rotation_angle(self) -> float:
        """Angle of the rotation part in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"PoseSE3(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose that applies ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    # keep long chains within the orthonormality tolerance
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return PoseSE3(r, a.rotation @ b.translation + a.translation)


def inverse(p: PoseSE3) -> PoseSE3:
    return p.inverse()


def transform(p: PoseSE3, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ p.rotation.T + p.translation


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    r = np.eye(3) + a * k + b * k @ k
    u, _, vt = np.linalg.svd(r)
    return u @ vt


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pix: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pix = np.asarray(pix, dtype=np.float64)
        u, v = pix[..., 0], pix[..., 1]
        return (u >= margin) & (v >= margin) & (u <= self.width - 1 - margin) & (v <= self.height - 1 - margin)


@dataclass(frozen=True)
class StereoRig:
    left: CameraIntrinsics
    right: CameraIntrinsics
    extrinsic: PoseSE3  # left camera frame -> right camera frame
    min_disparity: float = 0.5
    epipolar_band: float = 1.0

    def __post_init__(self):
        if not self.baseline > 0:
            raise DomainError("stereo baseline must be positive")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.extrinsic.translation))

    @property
    def is_rectified(self) -> bool:
        t = self.extrinsic.translation
        return (
            np.allclose(self.extrinsic.rotation, np.eye(3), atol=1e-12)
            and abs(t[1]) < 1e-12
            and abs(t[2]) < 1e-12
            and t[0] < 0
            and self.left == self.right
        )

    @classmethod
    def rectified(cls, intr: CameraIntrinsics, baseline: float, **kw) -> "StereoRig":
        ext = PoseSE3(np.eye(3), np.array([-float(baseline), 0.0, 0.0]))
        return cls(intr, intr, ext, **kw)


# ---------------------------------------------------------------- projection


def project(intr: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points (``(3,)`` or ``(N, 3)``)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    bad = ~(z > 1e-9)
    if np.any(bad):
        if p.ndim == 1:
            raise DomainError(f"point {p.tolist()} has non-positive depth")
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"point #{i} {p[i].tolist()} has non-positive depth")
    return _project_unchecked(intr, p)


def _project_unchecked(intr: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    u = intr.fx * p[..., 0] / p[..., 2] + intr.cx
    v = intr.fy * p[..., 1] / p[..., 2] + intr.cy
    return np.stack([u, v], axis=-1)


def unproject(intr: CameraIntrinsics, pix: np.ndarray, depth) -> np.ndarray:
    pix = np.asarray(pix, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise DomainError("unproject needs positive depth")
    x = (pix[..., 0] - intr.cx) / intr.fx * depth
    y = (pix[..., 1] - intr.cy) / intr.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def bearing(intr: CameraIntrinsics, pix: np.ndarray) -> np.ndarray:
    """Unit viewing rays for pixels."""
    pix = np.asarray(pix, dtype=np.float64)
    d = np.stack(
        [(pix[..., 0] - intr.cx) / intr.fx, (pix[..., 1] - intr.cy) / intr.fy, np.ones(pix.shape[:-1])],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def triangulate_rectified(rig: StereoRig, left_pix, right_pix) -> tuple[np.ndarray, float]:
    """Depth and left-camera point from a rectified stereo correspondence.

    Raises :class:`EpipolarError` when the rows disagree by more than the rig's
    epipolar band and :class:`FarPointError` when the disparity is at or below
    ``rig.min_disparity`` (the feature is then depth-unknown, not invalid).
    """
    lp = np.asarray(left_pix, dtype=np.float64)
    rp = np.asarray(right_pix, dtype=np.float64)
    if abs(lp[1] - rp[1]) > rig.epipolar_band:
        raise EpipolarError(f"row mismatch {abs(lp[1] - rp[1]):.3f} px > {rig.epipolar_band}")
    d = lp[0] - rp[0]
    if not d > rig.min_disparity:
        raise FarPointError(f"disparity {d:.3f} px <= {rig.min_disparity}")
    depth = rig.left.fx * rig.baseline / d
    return unproject(rig.left, lp, depth), float(depth)


def triangulate_rectified_batch(rig: StereoRig, left_pix: np.ndarray, right_pix: np.ndarray):
    """Vectorised :func:`triangulate_rectified`.

    Returns ``(points, depth, status)`` where status is 0 for a valid depth,
    1 for a far point and 2 for an epipolar violation. Invalid rows carry NaN.
    """
    lp = np.asarray(left_pix, dtype=np.float64).reshape(-1, 2)
    rp = np.asarray(right_pix, dtype=np.float64).reshape(-1, 2)
    disp = lp[:, 0] - rp[:, 0]
    status = np.zeros(len(lp), dtype=np.int8)
    status[~(disp > rig.min_disparity)] = 1
    status[np.abs(lp[:, 1] - rp[:, 1]) > rig.epipolar_band] = 2
    depth = np.full(len(lp), np.nan)
    ok = status == 0
    depth[ok] = rig.left.fx * rig.baseline / disp[ok]
    pts = np.full((len(lp), 3), np.nan)
    if ok.any():
        pts[ok] = unproject(rig.left, lp[ok], depth[ok])
    return pts, depth, status


def reprojection_residual(intr: CameraIntrinsics, pose_a_to_b: PoseSE3, point_in_a, observed_in_b):
    """Projected minus observed pixel, or ``None`` if the point is behind camera b."""
    q = transform(pose_a_to_b, point_in_a)
    if not q[2] > 1e-9:
        return None
    return _project_unchecked(intr, q) - np.asarray(observed_in_b, dtype=np.float64)


def reprojection_residuals(intr: CameraIntrinsics, pose_a_to_b: PoseSE3, points_a: np.ndarray, observed_b: np.ndarray):
    """Batch residuals ``(N, 2)`` plus a mask of points in front of camera b."""
    q = transform(pose_a_to_b, np.asarray(points_a, dtype=np.float64).reshape(-1, 3))
    front = q[:, 2] > 1e-9
    res = np.full((len(q), 2), np.nan)
    res[front] = _project_unchecked(intr, q[front]) - np.asarray(observed_b, dtype=np.float64).reshape(-1, 2)[front]
    return res, front


def rigid_align(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Least-squares rigid motion T (no scale) with ``T(src) ~ dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    r = u @ s @ vt
    return PoseSE3(r, mu_d - r @ mu_s)


# ---------------------------------------------------------------- homographies


@dataclass(frozen=True, eq=False)
class Homography:
    """Planar projective map from image I to its warped copy I'."""

    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if abs(h[2, 2]) < 1e-12:
            raise DomainError("homography with h[2,2] = 0 cannot be normalised")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-9:
            raise DomainError("singular homography")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self, pts)


def apply_homography(h: Homography, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    x = pts[..., 0] * h.h[0, 0] + pts[..., 1] * h.h[0, 1] + h.h[0, 2]
    y = pts[..., 0] * h.h[1, 0] + pts[..., 1] * h.h[1, 1] + h.h[1, 2]
    w = pts[..., 0] * h.h[2, 0] + pts[..., 1] * h.h[2, 1] + h.h[2, 2]
    return np.stack([x / w, y / w], axis=-1)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from four or more correspondences."""
    rows = []
    for (x, y), (u, v) in zip(np.asarray(src, float), np.asarray(dst, float)):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    return vt[-1].reshape(3, 3)


@dataclass(frozen=True)
class HomographyConfig:
    width: int = 256
    height: int = 192
    scale: float = 0.2  # scale drawn from [1 - scale, 1 + scale]
    rotation_deg: float = 15.0
    translation: float = 0.1  # fraction of image size
    perspective: float = 0.05  # max corner jitter, fraction of image size

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not 0 <= self.scale < 1:
            raise ValueError("scale half-range must lie in [0, 1)")
        for name in ("rotation_deg", "translation", "perspective"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.perspective >= 0.25:
            raise ValueError("perspective jitter this large can fold the image")


def sample_homography(cfg: HomographyConfig, seed: int) -> Homography:
    """Random viewpoint change: corner jitter, then scale/rotation about the centre, then shift."""
    rng = np.random.default_rng(seed)
    w, h = cfg.width, cfg.height
    size = np.array([w, h], dtype=np.float64)
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-1.0, 1.0, size=(4, 2)) * cfg.perspective * size
    s = 1.0 + rng.uniform(-1.0, 1.0) * cfg.scale
    ang = np.deg2rad(rng.uniform(-1.0, 1.0) * cfg.rotation_deg)
    shift = rng.uniform(-1.0, 1.0, size=2) * cfg.translation * size

    if cfg.perspective > 0:
        persp = homography_from_points(corners, corners + jitter)
        persp = persp / persp[2, 2]
    else:
        persp = np.eye(3)
    c = (size - 1) / 2
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    sim = np.eye(3)
    sim[:2, :2] = s * rot
    sim[:2, 2] = c - s * rot @ c + shift
    return Homography(sim @ persp)


# ---------------------------------------------------------------- images


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear lookup of ``img`` at float coordinates; outside samples get ``fill``."""
    img = np.asarray(img, dtype=np.float64)
    hgt, wid = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= 0) & (y >= 0) & (x <= wid - 1) & (y <= hgt - 1)
    xc = np.clip(x, 0, wid - 1)
    yc = np.clip(y, 0, hgt - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), wid - 2) if wid > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc).astype(np.int64), hgt - 2) if hgt > 1 else np.zeros_like(yc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, wid - 1)
    y1 = np.minimum(y0 + 1, hgt - 1)
    ax = (xc - x0)[..., None] if img.ndim == 3 else xc - x0
    ay = (yc - y0)[..., None] if img.ndim == 3 else yc - y0
    out = (
        img[y0, x0] * (1 - ax) * (1 - ay)
        + img[y0, x1] * ax * (1 - ay)
        + img[y1, x0] * (1 - ax) * ay
        + img[y1, x1] * ax * ay
    )
    mask = inside[..., None] if img.ndim == 3 else inside
    return np.where(mask, out, fill)


def _warp_sources(h: Homography, width: int, height: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    src = apply_homography(h.inverse(), np.stack([xs, ys], axis=-1))
    sx, sy = src[..., 0], src[..., 1]
    # tolerate round-off so the identity warp keeps the border valid
    eps = 1e-9
    valid = (sx >= -eps) & (sy >= -eps) & (sx <= width - 1 + eps) & (sy <= height - 1 + eps)
    return sx, sy, valid


def warp_valid_mask(h: Homography, width: int, height: int) -> np.ndarray:
    """Output pixels of :func:`warp_image` whose source lies inside the input."""
    return _warp_sources(h, width, height)[2]


def warp_image(img: np.ndarray, h: Homography) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp ``img`` so that output pixel ``p'`` shows input pixel ``h^-1 p'``."""
    img = np.asarray(img, dtype=np.float64)
    hgt, wid = img.shape
    sx, sy, valid = _warp_sources(h, wid, hgt)
    warped = bilinear_sample(img, np.clip(sx, 0, wid - 1), np.clip(sy, 0, hgt - 1))
    warped[~valid] = 0.0
    return warped, valid


# ---------------------------------------------------------------- trajectory files

TRAJ_HEADER = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


def write_trajectory(path, poses: Sequence[PoseSE3], timestamps: Sequence[float] | None = None) -> None:
    """Camera-to-world poses as ``timestamp,tx,ty,tz,qx,qy,qz,qw`` rows (Hamilton quaternions)."""
    if timestamps is None:
        timestamps = [float(i) for i in range(len(poses))]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(TRAJ_HEADER)
        for ts, p in zip(timestamps, poses):
            q = Rotation.from_matrix(p.rotation).as_quat()  # x, y, z, w
            if q[3] < 0:
                q = -q
            wr.writerow([repr(float(ts))] + [repr(float(v)) for v in (*p.translation, *q)])


def read_trajectory(path) -> tuple[list[float], list[PoseSE3]]:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if [h.strip() for h in header] != TRAJ_HEADER:
            raise ValueError(f"{path}: unexpected trajectory header {header}")
        stamps, poses = [], []
        for row in rd:
            if not row:
                continue
            vals = [float(v) for v in row]
            stamps.append(vals[0])
            r = Rotation.from_quat(vals[4:8]).as_matrix()
            poses.append(PoseSE3(r, vals[1:4]))
    return stamps, poses


def relative_poses(abs_poses: Sequence[PoseSE3]) -> list[PoseSE3]:
    """Frame t -> t+1 transforms from camera-to-world poses."""
    return [abs_poses[i + 1].inverse() @ abs_poses[i] for i in range(len(abs_poses) - 1)]


def accumulate(rel: Sequence[PoseSE3], start: PoseSE3 | None = None) -> list[PoseSE3]:
    """Camera-to-world poses from frame t -> t+1 transforms."""
    out = [start if start is not None else PoseSE3.identity()]
    for r in rel:
        out.append(out[-1] @ r.inverse())
    return out
