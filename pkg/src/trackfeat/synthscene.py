"""Deterministic synthetic stereo sequences with exact ground truth.

The world is a set of textured rectangles rendered by per-pixel ray casting.
Static planes carry band-limited value noise plus saddle-shaped blobs centred
on landmarks; one extra rectangle (the dynamic region) gets a fresh random
texture every frame, standing in for water and reflections.

World and camera frames share the convention x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .geometry import (
    CameraIntrinsics,
    DomainError,
    PoseSE3,
    StereoRig,
    bilinear_sample,
    read_trajectory,
    write_trajectory,
)

TEXEL = 0.02  # static texture resolution, metres per texel
SKY = 0.72
DEPTH_TOL = 0.01
# water lattice spacings (u, v) in metres
WAVE_SWELL = (1.5, 0.25)
WAVE_RIPPLE = (0.6, 0.09)


@dataclass(frozen=True)
class PlaneSpec:
    center: tuple[float, float, float]
    axis_u: tuple[float, float, float]
    axis_v: tuple[float, float, float]
    half_u: float
    half_v: float
    richness: float = 0.5

    def __post_init__(self):
        u = np.asarray(self.axis_u, float)
        v = np.asarray(self.axis_v, float)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ValueError("plane axes must be orthonormal")
        if self.half_u <= 0 or self.half_v <= 0:
            raise ValueError("plane extents must be positive")
        if not 0 <= self.richness <= 1:
            raise ValueError("texture richness must lie in [0, 1]")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    @property
    def area(self) -> float:
        return 4 * self.half_u * self.half_v

    def corners(self) -> np.ndarray:
        c, u, v = (np.asarray(a, float) for a in (self.center, self.axis_u, self.axis_v))
        return np.array([c + su * self.half_u * u + sv * self.half_v * v for su in (-1, 1) for sv in (-1, 1)])


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    static_planes: tuple[PlaneSpec, ...]
    dynamic_region: PlaneSpec
    landmark_count: int = 2400
    width: int = 256
    height: int = 192
    brightness: float = 1.0

    def __post_init__(self):
        if self.landmark_count <= 0:
            raise ValueError("landmark_count must be positive")
        if not self.static_planes:
            raise ValueError("scene needs at least one static plane")
        if self.width % 8 or self.height % 8:
            raise ValueError("image size must be divisible by 8")
        for i, p in enumerate(self.static_planes):
            if _rects_overlap(p, self.dynamic_region):
                raise ValueError(f"dynamic region overlaps static plane {i}")


def _rects_overlap(a: PlaneSpec, b: PlaneSpec) -> bool:
    """True if two rectangles share interior area (coplanar case only)."""
    na, nb = a.normal, b.normal
    if abs(abs(na @ nb) - 1) > 1e-9:
        return False
    if abs(na @ (np.asarray(b.center) - np.asarray(a.center))) > 1e-9:
        return False
    pts = b.corners() - np.asarray(a.center)
    bu = pts @ np.asarray(a.axis_u)
    bv = pts @ np.asarray(a.axis_v)
    return bool(bu.min() < a.half_u and bu.max() > -a.half_u and bv.min() < a.half_v and bv.max() > -a.half_v)


@dataclass
class SyntheticDataset:
    frames: list[tuple[np.ndarray, np.ndarray]]
    gt_poses: list[PoseSE3]
    gt_depth: list[np.ndarray]
    gt_region_mask: list[np.ndarray]
    spec: SceneSpec
    rig: StereoRig
    world: "World" = field(repr=False, default=None)

    def __post_init__(self):
        n = len(self.frames)
        if not (len(self.gt_poses) == len(self.gt_depth) == len(self.gt_region_mask) == n):
            raise ValueError("dataset lists must have equal length")
        if self.world is None:
            self.world = World(self.spec)

    def __len__(self):
        return len(self.frames)

    def left(self, i: int) -> np.ndarray:
        return self.frames[i][0]

    def right(self, i: int) -> np.ndarray:
        return self.frames[i][1]


# ---------------------------------------------------------------- textures


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], spacing, amp: float):
    """Lattice of random values to be smoothly interpolated at ``spacing`` metres (scalar or ``(u, v)``)."""
    su, sv = np.broadcast_to(np.asarray(spacing, dtype=float), (2,))
    return rng.uniform(-amp, amp, size=(int(shape[0] / sv) + 3, int(shape[1] / su) + 3))


def _eval_lattice(lat: np.ndarray, spacing, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    sp_u, sp_v = np.broadcast_to(np.asarray(spacing, dtype=float), (2,))
    gu = su / sp_u + 1.0
    gv = sv / sp_v + 1.0
    i0 = np.clip(np.floor(gv).astype(np.int64), 0, lat.shape[0] - 2)
    j0 = np.clip(np.floor(gu).astype(np.int64), 0, lat.shape[1] - 2)
    fv = np.clip(gv - i0, 0, 1)
    fu = np.clip(gu - j0, 0, 1)
    fv = fv * fv * (3 - 2 * fv)
    fu = fu * fu * (3 - 2 * fu)
    return (
        lat[i0, j0] * (1 - fu) * (1 - fv)
        + lat[i0, j0 + 1] * fu * (1 - fv)
        + lat[i0 + 1, j0] * (1 - fu) * fv
        + lat[i0 + 1, j0 + 1] * fu * fv
    )


def _saddle(du, dv, angle, contrast, sigma, edge):
    c, s = np.cos(angle), np.sin(angle)
    a = c * du + s * dv
    b = -s * du + c * dv
    return contrast * np.tanh(a / edge) * np.tanh(b / edge) * np.exp(-(du**2 + dv**2) / (2 * sigma**2))


class _StaticTexture:
    """Texel image of one static plane with landmark saddles baked in."""

    def __init__(self, plane: PlaneSpec, rng: np.random.Generator, n_landmarks: int):
        nu = int(np.ceil(2 * plane.half_u / TEXEL)) + 1
        nv = int(np.ceil(2 * plane.half_v / TEXEL)) + 1
        su = np.arange(nu) * TEXEL
        sv = np.arange(nv) * TEXEL
        gu, gv = np.meshgrid(su, sv)
        size = (2 * plane.half_v, 2 * plane.half_u)
        coarse = _value_noise(rng, size, 0.6, 0.14)
        fine = _value_noise(rng, size, 0.15, 0.05 + 0.05 * plane.richness)
        tex = 0.45 + rng.uniform(-0.08, 0.08) + _eval_lattice(coarse, 0.6, gu, gv) + _eval_lattice(fine, 0.15, gu, gv)

        margin = 0.25
        lu = rng.uniform(margin, 2 * plane.half_u - margin, size=n_landmarks)
        lv = rng.uniform(margin, 2 * plane.half_v - margin, size=n_landmarks)
        angles = rng.uniform(0, np.pi / 2, size=n_landmarks)
        contrast = rng.choice([-1.0, 1.0], size=n_landmarks) * rng.uniform(0.25, 0.4, size=n_landmarks)
        sigma = rng.uniform(0.09, 0.14, size=n_landmarks)
        for k in range(n_landmarks):
            r = int(np.ceil(3.5 * sigma[k] / TEXEL))
            j, i = int(round(lu[k] / TEXEL)), int(round(lv[k] / TEXEL))
            i0, i1 = max(i - r, 0), min(i + r + 1, nv)
            j0, j1 = max(j - r, 0), min(j + r + 1, nu)
            du = su[j0:j1][None, :] - lu[k]
            dv = sv[i0:i1][:, None] - lv[k]
            tex[i0:i1, j0:j1] += _saddle(du, dv, angles[k], contrast[k], sigma[k], 0.3 * sigma[k])
        self.tex = np.clip(tex, 0.02, 0.98)
        c, u, v = (np.asarray(a, float) for a in (plane.center, plane.axis_u, plane.axis_v))
        corner = c - plane.half_u * u - plane.half_v * v
        self.landmarks = corner + lu[:, None] * u + lv[:, None] * v

    def sample(self, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
        return bilinear_sample(self.tex, su / TEXEL, sv / TEXEL, fill=SKY)


def _dynamic_texture(spec: SceneSpec, frame: int, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    """Water texture at plane coordinates, independent for every frame."""
    rng = np.random.default_rng([spec.seed, 7919, frame])
    plane = spec.dynamic_region
    size = (2 * plane.half_v, 2 * plane.half_u)
    # wave crests run across the canal: long along u, short along v
    swell = _value_noise(rng, size, WAVE_SWELL, 0.3)
    ripple = _value_noise(rng, size, WAVE_RIPPLE, 0.12)
    return np.clip(0.4 + _eval_lattice(swell, WAVE_SWELL, su, sv) + _eval_lattice(ripple, WAVE_RIPPLE, su, sv), 0.02, 0.98)


# ---------------------------------------------------------------- ray casting


class World:
    """Geometry plus baked textures for one :class:`SceneSpec`."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        weights = np.array([p.area * (0.2 + p.richness) for p in spec.static_planes])
        alloc = np.floor(spec.landmark_count * weights / weights.sum()).astype(int)
        alloc[np.argmax(weights)] += spec.landmark_count - alloc.sum()
        self.textures = [_StaticTexture(p, rng, int(n)) for p, n in zip(spec.static_planes, alloc)]
        self.landmarks = np.concatenate([t.landmarks for t in self.textures])
        self.planes = list(spec.static_planes) + [spec.dynamic_region]
        self.dynamic_index = len(self.planes) - 1

    def check_camera(self, center: np.ndarray) -> None:
        for i, p in enumerate(self.planes):
            d = center - np.asarray(p.center)
            if abs(d @ p.normal) < 1e-3 and abs(d @ np.asarray(p.axis_u)) <= p.half_u and abs(d @ np.asarray(p.axis_v)) <= p.half_v:
                raise DomainError(f"camera centre {center.tolist()} lies inside plane {i}")

    def cast(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest hit along ``origin + t * dirs``.

        Returns ``(t, plane_index, su, sv)``; plane_index is -1 where nothing is hit.
        """
        shape = dirs.shape[:-1]
        d = dirs.reshape(-1, 3)
        best_t = np.full(len(d), np.inf)
        best_i = np.full(len(d), -1, dtype=np.int64)
        best_u = np.zeros(len(d))
        best_v = np.zeros(len(d))
        for k, p in enumerate(self.planes):
            n = p.normal
            denom = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((np.asarray(p.center) - origin) @ n) / denom
            hit = origin + t[:, None] * d
            rel = hit - np.asarray(p.center)
            su = rel @ np.asarray(p.axis_u)
            sv = rel @ np.asarray(p.axis_v)
            ok = (np.abs(denom) > 1e-12) & (t > 1e-6) & (np.abs(su) <= p.half_u) & (np.abs(sv) <= p.half_v) & (t < best_t)
            best_t[ok] = t[ok]
            best_i[ok] = k
            best_u[ok] = su[ok] + p.half_u
            best_v[ok] = sv[ok] + p.half_v
        return best_t.reshape(shape), best_i.reshape(shape), best_u.reshape(shape), best_v.reshape(shape)

    def depth_at(self, pose_cw: PoseSE3, intr: CameraIntrinsics, pix: np.ndarray):
        """Exact depth and plane index for (sub)pixel positions of a camera."""
        pix = np.asarray(pix, dtype=np.float64)
        rays = np.stack([(pix[..., 0] - intr.cx) / intr.fx, (pix[..., 1] - intr.cy) / intr.fy, np.ones(pix.shape[:-1])], -1)
        t, idx, _, _ = self.cast(pose_cw.translation, rays @ pose_cw.rotation.T)
        depth = np.where(idx >= 0, t, 0.0)
        return depth, idx

    def render(self, pose_cw: PoseSE3, intr: CameraIntrinsics, frame: int):
        ys, xs = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
        rays = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)], -1)
        t, idx, su, sv = self.cast(pose_cw.translation, rays @ pose_cw.rotation.T)
        img = np.full(xs.shape, SKY)
        for k, tex in enumerate(self.textures):
            m = idx == k
            if m.any():
                img[m] = tex.sample(su[m], sv[m])
        m = idx == self.dynamic_index
        if m.any():
            img[m] = _dynamic_texture(self.spec, frame, su[m], sv[m])
        img = np.clip(img * self.spec.brightness, 0, 1)
        depth = np.where(idx >= 0, t, 0.0)
        return np.round(img * 255).astype(np.uint8), depth, m


def right_camera_pose(pose_cw: PoseSE3, rig: StereoRig) -> PoseSE3:
    """Camera-to-world pose of the right camera given the left one."""
    return pose_cw @ rig.extrinsic.inverse()


def render_sequence(spec: SceneSpec, trajectory: Sequence[PoseSE3], rig: StereoRig) -> SyntheticDataset:
    if len(trajectory) == 0:
        raise ValueError("trajectory must be non-empty")
    if (rig.left.width, rig.left.height) != (spec.width, spec.height):
        raise ValueError("rig image size does not match the scene")
    world = World(spec)
    frames, depths, masks = [], [], []
    for i, pose in enumerate(trajectory):
        pose_r = right_camera_pose(pose, rig)
        world.check_camera(pose.translation)
        world.check_camera(pose_r.translation)
        left, depth, mask = world.render(pose, rig.left, i)
        right, _, _ = world.render(pose_r, rig.right, i)
        frames.append((left, right))
        depths.append(depth)
        masks.append(mask)
    return SyntheticDataset(frames, list(trajectory), depths, masks, spec, rig, world)


def gt_correspondence(ds: SyntheticDataset, frame_i: int, pix, frame_j: int, rig: StereoRig | None = None):
    """Pixel in frame_j's left image showing the same surface point as ``pix`` in frame_i.

    Returns ``None`` for sky, the dynamic region, points leaving the view and
    occluded points (1 cm depth test).
    """
    rig = rig or ds.rig
    intr = rig.left
    pix = np.asarray(pix, dtype=np.float64)
    if not intr.contains(pix):
        raise DomainError(f"pixel {pix.tolist()} outside the image")
    if not (0 <= frame_i < len(ds) and 0 <= frame_j < len(ds)):
        raise IndexError("frame index out of range")
    depth, idx = ds.world.depth_at(ds.gt_poses[frame_i], intr, pix)
    if idx < 0 or idx == ds.world.dynamic_index:
        return None
    if frame_i == frame_j:
        return pix.copy()
    p_i = np.array([(pix[0] - intr.cx) / intr.fx * depth, (pix[1] - intr.cy) / intr.fy * depth, depth])
    rel = ds.gt_poses[frame_j].inverse() @ ds.gt_poses[frame_i]
    q = rel.transform(p_i)
    if q[2] <= 1e-9:
        return None
    out = np.array([intr.fx * q[0] / q[2] + intr.cx, intr.fy * q[1] / q[2] + intr.cy])
    if not intr.contains(out):
        return None
    d_j, idx_j = ds.world.depth_at(ds.gt_poses[frame_j], intr, out)
    if idx_j < 0 or abs(d_j - q[2]) > DEPTH_TOL:
        return None
    return out


def gt_correspondences(ds: SyntheticDataset, frame_i: int, pix: np.ndarray, frame_j: int):
    """Vectorised :func:`gt_correspondence`; rows without a correspondence are NaN."""
    intr = ds.rig.left
    pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
    out = np.full_like(pix, np.nan)
    depth, idx = ds.world.depth_at(ds.gt_poses[frame_i], intr, pix)
    ok = (idx >= 0) & (idx != ds.world.dynamic_index) & intr.contains(pix)
    p_i = np.stack([(pix[:, 0] - intr.cx) / intr.fx * depth, (pix[:, 1] - intr.cy) / intr.fy * depth, depth], -1)
    rel = ds.gt_poses[frame_j].inverse() @ ds.gt_poses[frame_i]
    q = rel.transform(p_i)
    ok &= q[:, 2] > 1e-9
    zq = np.where(ok, q[:, 2], 1.0)
    proj = np.stack([intr.fx * q[:, 0] / zq + intr.cx, intr.fy * q[:, 1] / zq + intr.cy], -1)
    ok &= intr.contains(proj)
    d_j, idx_j = ds.world.depth_at(ds.gt_poses[frame_j], intr, np.where(ok[:, None], proj, 0.0))
    ok &= (idx_j >= 0) & (np.abs(d_j - q[:, 2]) <= DEPTH_TOL)
    out[ok] = proj[ok]
    return out


# ---------------------------------------------------------------- scene family


def _plane(center, u, v, hu, hv, rich):
    return PlaneSpec(tuple(float(x) for x in center), tuple(float(x) for x in u), tuple(float(x) for x in v), float(hu), float(hv), float(rich))


def canal_scene(seed: int = 0, landmark_count: int = 2400, width: int = 256, height: int = 192, brightness: float = 1.0) -> SceneSpec:
    """A walled canal: two textured banks, a far wall, a few frontal panels and a water surface.

    The seed perturbs canal width, wall richness and panel placement, so different
    seeds give different scenes from the same family.
    """
    rng = np.random.default_rng([seed, 104729])
    half_w = rng.uniform(2.2, 2.8)
    water_y = rng.uniform(1.3, 1.7)
    top = -14.0
    z0, z1 = -3.0, 26.0
    zc, zh = (z0 + z1) / 2, (z1 - z0) / 2
    yc, yh = (top + water_y) / 2, (water_y - top) / 2
    ex, ey, ez = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    planes = [
        _plane((-half_w, yc, zc), ez, ey, zh, yh, rng.uniform(0.7, 1.0)),
        _plane((half_w, yc, zc), ey, ez, yh, zh, rng.uniform(0.4, 0.8)),
        _plane((0.0, yc, z1), ex, ey, half_w, yh, rng.uniform(0.4, 0.7)),
    ]
    for k in range(2):
        side = -1 if k == 0 else 1
        px = side * (half_w - rng.uniform(0.5, 0.8))
        pz = rng.uniform(13.0, 22.0)
        ph = rng.uniform(0.8, 1.4)
        planes.append(_plane((px, water_y - ph - 0.05, pz), ex, ey, 0.35, ph, rng.uniform(0.6, 1.0)))
    water = _plane((0.0, water_y, zc), ex, ez, half_w - 1e-3, zh, 0.0)
    return SceneSpec(seed, tuple(planes), water, landmark_count, width, height, brightness)


def default_rig(width: int = 256, height: int = 192, focal: float = 200.0, baseline: float = 0.25) -> StereoRig:
    intr = CameraIntrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    return StereoRig.rectified(intr, baseline)


def forward_trajectory(n_frames: int, step: float = 0.2, seed: int = 0, weave: float = 0.3, yaw_deg: float = 3.0) -> list[PoseSE3]:
    """Forward motion along +z with a gentle lateral weave and matching yaw."""
    rng = np.random.default_rng([seed, 15485863])
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(30, 50)
    poses = []
    for i in range(n_frames):
        s = i * step
        a = 2 * np.pi * i / period + phase
        x = weave * (np.sin(a) - np.sin(phase))
        yaw = np.deg2rad(yaw_deg) * np.cos(a)
        pitch = np.deg2rad(0.5) * np.sin(0.7 * a)
        poses.append(PoseSE3.from_rotvec([pitch, yaw, 0.0], [x, 0.0, s]))
    return poses


# ---------------------------------------------------------------- files


def spec_to_config(spec: SceneSpec, rig: StereoRig) -> dict[str, str]:
    cfg = {
        "seed": str(spec.seed),
        "landmark_count": str(spec.landmark_count),
        "width": str(spec.width),
        "height": str(spec.height),
        "brightness": repr(spec.brightness),
        "plane_count": str(len(spec.static_planes)),
        "rig.fx": repr(rig.left.fx),
        "rig.fy": repr(rig.left.fy),
        "rig.cx": repr(rig.left.cx),
        "rig.cy": repr(rig.left.cy),
        "rig.baseline": repr(rig.baseline),
        "rig.min_disparity": repr(rig.min_disparity),
        "rig.epipolar_band": repr(rig.epipolar_band),
    }
    for name, p in [(f"plane{i}", p) for i, p in enumerate(spec.static_planes)] + [("dynamic", spec.dynamic_region)]:
        cfg[f"{name}.center"] = ",".join(repr(x) for x in p.center)
        cfg[f"{name}.axis_u"] = ",".join(repr(x) for x in p.axis_u)
        cfg[f"{name}.axis_v"] = ",".join(repr(x) for x in p.axis_v)
        cfg[f"{name}.half_u"] = repr(p.half_u)
        cfg[f"{name}.half_v"] = repr(p.half_v)
        cfg[f"{name}.richness"] = repr(p.richness)
    return cfg


def spec_from_config(cfg: dict[str, str]) -> tuple[SceneSpec, StereoRig]:
    def vec(key):
        return tuple(float(x) for x in cfg[key].split(","))

    def plane(name):
        return PlaneSpec(
            vec(f"{name}.center"), vec(f"{name}.axis_u"), vec(f"{name}.axis_v"),
            float(cfg[f"{name}.half_u"]), float(cfg[f"{name}.half_v"]), float(cfg[f"{name}.richness"]),
        )

    n = int(cfg["plane_count"])
    spec = SceneSpec(
        int(cfg["seed"]), tuple(plane(f"plane{i}") for i in range(n)), plane("dynamic"),
        int(cfg["landmark_count"]), int(cfg["width"]), int(cfg["height"]), float(cfg["brightness"]),
    )
    intr = CameraIntrinsics(float(cfg["rig.fx"]), float(cfg["rig.fy"]), float(cfg["rig.cx"]), float(cfg["rig.cy"]), spec.width, spec.height)
    rig = StereoRig.rectified(intr, float(cfg["rig.baseline"]), min_disparity=float(cfg["rig.min_disparity"]), epipolar_band=float(cfg["rig.epipolar_band"]))
    return spec, rig


def write_dataset(ds: SyntheticDataset, root) -> None:
    root = Path(root)
    for sub in ("left", "right", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, ((left, right), depth, mask) in enumerate(zip(ds.frames, ds.gt_depth, ds.gt_region_mask)):
        io.write_pgm(root / "left" / f"{i:06d}.pgm", left)
        io.write_pgm(root / "right" / f"{i:06d}.pgm", right)
        mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(np.uint16)
        io.write_pgm(root / "depth" / f"{i:06d}.pgm", mm)
        io.write_pgm(root / "mask" / f"{i:06d}.pgm", mask.astype(np.uint8) * 255)
    write_trajectory(root / "gt_poses.csv", ds.gt_poses)
    io.write_kv(root / "scene.cfg", spec_to_config(ds.spec, ds.rig))


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    if not (root / "scene.cfg").is_file():
        raise FileNotFoundError(f"{root}: no scene.cfg, run `synth` first")
    spec, rig = spec_from_config(io.read_kv(root / "scene.cfg"))
    _, poses = read_trajectory(root / "gt_poses.csv")
    frames, depths, masks = [], [], []
    for i in range(len(poses)):
        frames.append((io.read_pgm(root / "left" / f"{i:06d}.pgm"), io.read_pgm(root / "right" / f"{i:06d}.pgm")))
        depths.append(io.read_pgm(root / "depth" / f"{i:06d}.pgm").astype(np.float64) / 1000.0)
        masks.append(io.read_pgm(root / "mask" / f"{i:06d}.pgm") > 127)
    return SyntheticDataset(frames, poses, depths, masks, spec, rig)
