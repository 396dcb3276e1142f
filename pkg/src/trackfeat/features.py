"""Keypoint decoding, NMS, descriptor sampling and the classical corner baseline."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

CELL = 8


@dataclass
class KeypointSet:
    """Integer-pixel keypoints of one image with unit-norm descriptors."""

    xy: np.ndarray  # (N, 2) int, columns x, y
    scores: np.ndarray  # (N,)
    desc: np.ndarray  # (N, D)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.desc = np.asarray(self.desc, dtype=np.float64)
        if self.desc.ndim == 1:
            self.desc = self.desc.reshape(len(self.xy), -1)
        if not (len(self.xy) == len(self.scores) == len(self.desc)):
            raise ValueError("keypoint arrays disagree in length")

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls, dim: int = 64) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)))

    def subset(self, idx) -> "KeypointSet":
        return KeypointSet(self.xy[idx], self.scores[idx], self.desc[idx])


# ---------------------------------------------------------------- learned outputs


def decode_scores(logits: np.ndarray) -> np.ndarray:
    """Per-cell 65-way softmax, dustbin dropped, depth-to-space to an (H, W) map."""
    logits = np.asarray(logits, dtype=np.float64)
    hc, wc, c = logits.shape
    if c != CELL * CELL + 1:
        raise ValueError(f"expected 65 channels, got {c}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p = p[..., :64].reshape(hc, wc, CELL, CELL)
    return p.transpose(0, 2, 1, 3).reshape(hc * CELL, wc * CELL)


def nms(score_map: np.ndarray, radius: int = 4, threshold: float = 0.015, max_n: int = 500) -> np.ndarray:
    """Greedy Chebyshev-radius suppression.

    Pixels are visited by descending score (ties by ``(y, x)``); a pixel is
    kept if it clears ``threshold`` and no kept pixel lies within ``radius``.
    Returns ``(K, 2)`` integer ``(x, y)`` in acceptance order.
    """
    if radius < 1:
        raise ValueError("nms radius must be >= 1")
    m = np.asarray(score_map, dtype=np.float64)
    h, w = m.shape
    ys, xs = np.nonzero(m > threshold)
    if len(ys) == 0 or max_n <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((xs, ys, -m[ys, xs]))
    blocked = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    out = []
    for k in order:
        y, x = ys[k], xs[k]
        if blocked[y + radius, x + radius]:
            continue
        out.append((x, y))
        if len(out) >= max_n:
            break
        blocked[y : y + 2 * radius + 1, x : x + 2 * radius + 1] = True
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def sample_descriptors(field, xy, return_flags: bool = False):
    """Bilinear descriptor lookup at pixel positions, normalised to unit length.

    ``field`` is ``(Hc, Wc, D)``; cell ``(i, j)`` is centred on pixel
    ``(8j + 3.5, 8i + 3.5)`` and positions beyond the outermost centres are
    clamped. Works on numpy arrays and (differentiably) on torch tensors.
    A sample that interpolates to the zero vector becomes ``e0`` and is flagged.
    """
    is_np = not isinstance(field, torch.Tensor)
    f = torch.as_tensor(np.asarray(field) if is_np else field)
    if f.dtype not in (torch.float32, torch.float64):
        f = f.double()
    pts = torch.as_tensor(np.asarray(xy, dtype=np.float64) if not isinstance(xy, torch.Tensor) else xy).to(f.dtype).reshape(-1, 2)
    hc, wc, d = f.shape
    gx = ((pts[:, 0] - 3.5) / CELL).clamp(0, wc - 1)
    gy = ((pts[:, 1] - 3.5) / CELL).clamp(0, hc - 1)
    x0 = gx.floor().long().clamp(max=max(wc - 2, 0))
    y0 = gy.floor().long().clamp(max=max(hc - 2, 0))
    x1 = (x0 + 1).clamp(max=wc - 1)
    y1 = (y0 + 1).clamp(max=hc - 1)
    ax = (gx - x0).unsqueeze(1)
    ay = (gy - y0).unsqueeze(1)
    v = f[y0, x0] * (1 - ax) * (1 - ay) + f[y0, x1] * ax * (1 - ay) + f[y1, x0] * (1 - ax) * ay + f[y1, x1] * ax * ay
    out, flags = normalize_rows(v)
    if is_np:
        out = out.detach().numpy()
        flags = flags.numpy()
    return (out, flags) if return_flags else out


def sample_descriptor(field, x: float, y: float) -> np.ndarray:
    return sample_descriptors(field, [[x, y]])[0]


def normalize_rows(v: torch.Tensor, eps: float = 1e-12):
    """Unit-normalise rows; zero rows become ``e0``. Returns (rows, zero_flags)."""
    n = v.norm(dim=1, keepdim=True)
    zero = (n < eps).squeeze(1)
    e0 = torch.zeros_like(v)
    e0[:, 0] = 1.0
    safe = torch.where(zero.unsqueeze(1), e0, v / n.clamp_min(eps))
    return safe, zero


# ---------------------------------------------------------------- classical baseline


def classical_corner_map(img: np.ndarray, window: int = 5) -> np.ndarray:
    """Shi-Tomasi score (min eigenvalue of the structure tensor), scaled to [0, 1]."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    im = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(im, axis=1, mode="nearest")
    gy = ndimage.sobel(im, axis=0, mode="nearest")
    a = ndimage.uniform_filter(gx * gx, window, mode="constant")
    b = ndimage.uniform_filter(gx * gy, window, mode="constant")
    c = ndimage.uniform_filter(gy * gy, window, mode="constant")
    lam = (a + c) / 2 - np.sqrt(((a - c) / 2) ** 2 + b * b)
    lam = np.maximum(lam, 0.0)
    top = lam.max()
    # round-off floor so flat images stay exactly zero
    if top <= 1e-12:
        return np.zeros_like(lam)
    return lam / top


def patch_descriptors(img: np.ndarray, xy: np.ndarray, size: int = 11) -> np.ndarray:
    """Zero-mean, unit-norm intensity patches (``size`` x ``size``) around each keypoint."""
    im = np.asarray(img, dtype=np.float64)
    r = size // 2
    pad = np.pad(im, r, mode="reflect")
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    oy, ox = np.mgrid[0:size, 0:size]
    patches = pad[xy[:, 1, None, None] + oy, xy[:, 0, None, None] + ox].reshape(len(xy), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    out, _ = normalize_rows(torch.from_numpy(patches))
    return out.numpy()


def remove_border(xy: np.ndarray, width: int, height: int, border: int) -> np.ndarray:
    xy = np.asarray(xy).reshape(-1, 2)
    keep = (xy[:, 0] >= border) & (xy[:, 1] >= border) & (xy[:, 0] < width - border) & (xy[:, 1] < height - border)
    return keep


class ClassicalExtractor:
    """Corner-map detector with intensity-patch descriptors (the non-learned baseline arm)."""

    name = "classical"

    def __init__(self, window=5, radius=4, threshold=0.01, max_n=500, border=4, patch=11):
        self.window, self.radius, self.threshold, self.max_n = window, radius, threshold, max_n
        self.border, self.patch = border, patch

    def __call__(self, img: np.ndarray) -> KeypointSet:
        im = np.asarray(img, dtype=np.float64) / 255.0 if np.asarray(img).dtype == np.uint8 else np.asarray(img, float)
        m = classical_corner_map(im, self.window)
        h, w = m.shape
        b = self.border
        m[:b] = 0
        m[h - b :] = 0
        m[:, :b] = 0
        m[:, w - b :] = 0
        xy = nms(m, self.radius, self.threshold, self.max_n)
        return KeypointSet(xy, m[xy[:, 1], xy[:, 0]], patch_descriptors(im, xy, self.patch))


# ---------------------------------------------------------------- dumps


def write_keypoints(csv_path, bin_path, per_frame: list[KeypointSet]) -> None:
    """``frame,x,y,score`` rows plus little-endian float32 descriptors in the same row order."""
    with open(csv_path, "w", newline="") as f, open(bin_path, "wb") as fb:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["frame", "x", "y", "score"])
        for i, kps in enumerate(per_frame):
            for (x, y), s in zip(kps.xy, kps.scores):
                wr.writerow([i, int(x), int(y), repr(float(s))])
            fb.write(np.ascontiguousarray(kps.desc, dtype="<f4").tobytes())


def read_keypoints(csv_path, bin_path, dim: int) -> list[KeypointSet]:
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    desc = np.fromfile(bin_path, dtype="<f4").reshape(-1, dim).astype(np.float64)
    if len(rows) == 0:
        return []
    frames = rows[:, 0].astype(int)
    out = []
    for i in range(frames.max() + 1):
        sel = frames == i
        out.append(KeypointSet(rows[sel, 1:3], rows[sel, 3], desc[sel]))
    return out
