"""Small file formats: binary PGM and flat ``key = value`` text."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) PGM; uint16 arrays are written big-endian with maxval 65535."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are single-channel")
    if img.dtype == np.uint8:
        maxval, data = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, data = 65535, img.astype(">u2").tobytes()
    else:
        raise TypeError(f"unsupported PGM dtype {img.dtype}")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + data)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.uint8 if maxval < 256 else np.uint16)


def write_kv(path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
