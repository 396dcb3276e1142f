"""Tiny SuperPoint-style detector/descriptor network."""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..features import KeypointSet, decode_scores, nms, sample_descriptors

CHECKPOINT_MAGIC = b"TFNET\x00\x00\x00"
CHECKPOINT_VERSION = 1

# fixed input standardisation applied inside the network (inputs stay in [0, 1])
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


class TinyPoint(nn.Module):
    """Three 3x3 conv stages (1->16->32->64), each with SiLU and 2x2 average pooling,
    then 1x1 heads for 65 detector logits per 8x8 cell and ``desc_dim`` descriptor channels.

    SiLU and average pooling keep the whole map smooth, so finite-difference
    checks never straddle a kink.
    """

    def __init__(self, desc_dim: int = 64, seed: int = 0):
        super().__init__()
        self.desc_dim = desc_dim
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, padding=1)
        self.det = nn.Conv2d(64, 65, 1)
        self.desc = nn.Conv2d(64, desc_dim, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.conv1, self.conv2, self.conv3, self.det, self.desc):
                fan_in = layer.weight[0].numel()
                a = math.sqrt(1.0 / fan_in)
                for p in (layer.weight, layer.bias):
                    p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 * a - a)

    def forward(self, x: torch.Tensor):
        """``x``: (B, 1, H, W) in [0, 1] -> logits (B, 65, H/8, W/8), descriptors (B, D, H/8, W/8)."""
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"expected (B, 1, H, W) with H, W divisible by 8, got {tuple(x.shape)}")
        x = (x - INPUT_MEAN) * INPUT_SCALE
        h = F.avg_pool2d(F.silu(self.conv1(x)), 2)
        h = F.avg_pool2d(F.silu(self.conv2(h)), 2)
        h = F.avg_pool2d(F.silu(self.conv3(h)), 2)
        return self.det(h), self.desc(h)

    def ordered_parameters(self):
        """Parameters in checkpoint order."""
        return [(n, p) for n, p in self.named_parameters()]


def to_input(img, dtype=torch.float32) -> torch.Tensor:
    """uint8 or [0,1] float image(s) -> (B, 1, H, W) tensor."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    t = torch.as_tensor(a, dtype=dtype)
    if t.dim() == 2:
        t = t[None]
    return t[:, None]


def forward(model: TinyPoint, img) -> tuple[np.ndarray, np.ndarray]:
    """Score grid (Hc, Wc, 65) and descriptor field (Hc, Wc, D) for one image."""
    a = np.asarray(img)
    if a.ndim != 2 or a.shape[0] % 8 or a.shape[1] % 8:
        raise ValueError(f"image shape {a.shape} is not divisible by 8")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits, desc = model(to_input(a, dtype))
    return logits[0].permute(1, 2, 0).double().numpy(), desc[0].permute(1, 2, 0).double().numpy()


class LearnedExtractor:
    """Keypoints from the detector head, descriptors sampled from the descriptor head.

    A trained detector keeps most cell mass in the dustbin, so the default
    threshold is low and ``max_n`` sets the keypoint budget.
    """

    name = "learned"

    def __init__(self, model: TinyPoint, radius: int = 4, threshold: float = 0.001, max_n: int = 200, border: int = 4):
        self.model, self.radius, self.threshold, self.max_n, self.border = model, radius, threshold, max_n, border

    def __call__(self, img) -> KeypointSet:
        logits, desc = forward(self.model, img)
        m = decode_scores(logits)
        b = self.border
        if b:
            m[:b] = 0
            m[-b:] = 0
            m[:, :b] = 0
            m[:, -b:] = 0
        xy = nms(m, self.radius, self.threshold, self.max_n)
        d = sample_descriptors(desc, xy) if len(xy) else np.zeros((0, desc.shape[-1]))
        return KeypointSet(xy, m[xy[:, 1], xy[:, 0]], d)


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   8 bytes  magic b"TFNET\0\0\0"
#   u32      format version
#   u32      descriptor dimension D
#   u32      number of tensors K
#   K times: u32 ndim, ndim x u32 shape
#   then all tensors as float32 in the same order (conv1.w, conv1.b, conv2.w, ...).


def save_checkpoint(model: TinyPoint, path) -> None:
    params = model.ordered_parameters()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<III", CHECKPOINT_VERSION, model.desc_dim, len(params))
    for _, p in params:
        out += struct.pack("<I", p.dim()) + struct.pack(f"<{p.dim()}I", *p.shape)
    for _, p in params:
        out += p.detach().cpu().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> TinyPoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, dim, k = struct.unpack_from("<III", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    shapes = []
    for _ in range(k):
        (nd,) = struct.unpack_from("<I", raw, pos)
        shapes.append(struct.unpack_from(f"<{nd}I", raw, pos + 4))
        pos += 4 + 4 * nd
    model = TinyPoint(dim)
    params = model.ordered_parameters()
    if len(params) != k:
        raise ValueError(f"{path}: expected {len(params)} tensors, found {k}")
    size = pos + 4 * sum(int(np.prod(sh)) for sh in shapes)
    if len(raw) != size:
        raise ValueError(f"{path}: expected {size} bytes, found {len(raw)}")
    with torch.no_grad():
        for (name, p), shape in zip(params, shapes):
            if tuple(p.shape) != tuple(shape):
                raise ValueError(f"{path}: tensor {name} has shape {shape}, expected {tuple(p.shape)}")
            n = int(np.prod(shape))
            p.copy_(torch.from_numpy(np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)))
            pos += 4 * n
    return model
