"""Momentum training on VO-derived pseudo-labels and the self-supervised round."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..geometry import Homography, HomographyConfig, sample_homography
from ..matcher_vo import VOConfig, VOResult, run_vo
from ..supervision import (
    GOOD,
    BAD,
    LabelGrid,
    SupervisionConfig,
    build_correspondence_matrix,
    frame_labels,
    make_warped_pair,
    score_tracks,
)
from .losses import LossReport, LossWeights, total_loss
from .network import LearnedExtractor, TinyPoint, to_input

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "l_i", "l_i_warped", "l_pk", "l_d", "total"]


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1e-3
    momentum: float = 0.9
    steps: int = 500
    batch: int = 8
    seed: int = 0
    m_p: float = 1.0
    m_n: float = 0.2
    lambda_d: float = 250.0
    eps_cell: float = 8.0

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step_size must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not (self.lambda_d >= 0 and self.eps_cell > 0):
            raise ValueError("lambda_d must be >= 0 and eps_cell > 0")


@dataclass
class Sample:
    """One training pair: an image, its warp by ``h`` and all targets in tensor form."""

    img: torch.Tensor  # (1, H, W)
    warped: torch.Tensor
    y: torch.Tensor  # (Hc, Wc) long
    y_warped: torch.Tensor
    valid: torch.Tensor  # (Hc, Wc) bool, cells that take part in the detector loss
    valid_warped: torch.Tensor
    s: torch.Tensor  # (N, N) correspondence
    valid_a: torch.Tensor
    valid_b: torch.Tensor


def prepare_sample(img: np.ndarray, y: LabelGrid, h: Homography, eps_cell: float = 8.0) -> Sample:
    a = np.asarray(img)
    a = a / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)
    hgt, wid = a.shape
    warped, y_w, cell_valid = make_warped_pair(a, y, h)
    corr = build_correspondence_matrix(h, wid, hgt, eps_cell)
    return Sample(
        img=to_input(a)[0],
        warped=to_input(warped)[0],
        y=torch.from_numpy(y.labels),
        y_warped=torch.from_numpy(y_w.labels),
        valid=torch.from_numpy(~y.ignore),
        valid_warped=torch.from_numpy(cell_valid & ~y_w.ignore),
        s=torch.from_numpy(corr.s),
        valid_a=torch.from_numpy(corr.valid_a),
        valid_b=torch.from_numpy(corr.valid_b),
    )


@dataclass
class Optimizer:
    """Heavy-ball state ``v <- mu v - eta g; p <- p + v``."""

    velocity: dict = field(default_factory=dict)
    steps: int = 0
    rejected: int = 0


def batch_loss(model: TinyPoint, samples: list[Sample], cfg: TrainConfig, w: LossWeights):
    """Mean total loss over the batch, and the mean LossReport."""
    dtype = next(model.parameters()).dtype
    x = torch.stack([s.img for s in samples] + [s.warped for s in samples]).to(dtype)
    logits, desc = model(x.contiguous(memory_format=torch.channels_last))
    logits = logits.permute(0, 2, 3, 1)
    desc = desc.permute(0, 2, 3, 1)
    b = len(samples)
    total = 0.0
    reports = []
    for k, s in enumerate(samples):
        t, rep = total_loss(
            logits[k], logits[b + k], s.y, s.y_warped, desc[k], desc[b + k], s.s, w,
            s.valid, s.valid_warped, s.valid_a, s.valid_b, cfg.m_p, cfg.m_n, cfg.lambda_d,
        )
        total = total + t
        reports.append(rep)
    rows = np.array([r.as_row() for r in reports])
    m = rows.mean(axis=0)
    return total / b, LossReport(*[float(v) for v in m[:4]], 0.0)


def train_step(model: TinyPoint, opt: Optimizer, batch, cfg: TrainConfig, w: LossWeights = LossWeights()):
    """One momentum step on a batch of ``(img, y, h)`` tuples or prepared Samples.

    Returns ``(report, accepted)``. A non-finite loss or gradient leaves both
    the parameters and the velocity untouched.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    samples = [b if isinstance(b, Sample) else prepare_sample(*b, eps_cell=cfg.eps_cell) for b in batch]
    model.zero_grad(set_to_none=True)
    loss, rep = batch_loss(model, samples, cfg, w)
    rep.total = w.w_i * rep.l_i + w.w_i_warped * rep.l_i_warped + w.w_pk * rep.l_pk + w.w_d * rep.l_d
    loss.backward()
    params = list(model.named_parameters())
    finite = math.isfinite(float(loss.detach())) and all(p.grad is None or bool(torch.isfinite(p.grad).all()) for _, p in params)
    opt.steps += 1
    if not finite:
        opt.rejected += 1
        log.warning("step %d rejected: non-finite loss or gradient", opt.steps)
        return rep, False
    with torch.no_grad():
        for name, p in params:
            if p.grad is None:
                continue
            v = opt.velocity.get(name)
            v = -cfg.step_size * p.grad if v is None else cfg.momentum * v - cfg.step_size * p.grad
            opt.velocity[name] = v
            p.add_(v)
    return rep, True


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for step, rep in rows:
            wr.writerow([step] + [repr(v) for v in rep.as_row()])


def train(model: TinyPoint, images, labels, cfg: TrainConfig, w: LossWeights = LossWeights(),
          hom: HomographyConfig | None = None, opt: Optimizer | None = None, log_rows=None, seed_offset: int = 0):
    """``cfg.steps`` steps over labelled frames.

    Each step draws ``cfg.batch`` frames and a fresh homography per frame from
    seeds derived from ``(cfg.seed, seed_offset, step)``.
    """
    hgt, wid = np.asarray(images[0]).shape
    hom = hom or HomographyConfig(width=wid, height=hgt)
    opt = opt or Optimizer()
    log_rows = [] if log_rows is None else log_rows
    n = len(images)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, seed_offset, step])
        pick = rng.choice(n, size=min(cfg.batch, n), replace=False)
        batch = [(images[k], labels[k], sample_homography(hom, int(rng.integers(2**31)))) for k in pick]
        rep, _ = train_step(model, opt, batch, cfg, w)
        log_rows.append((len(log_rows), rep))
    return opt, log_rows


# ---------------------------------------------------------------- self-supervised round


@dataclass
class RoundConfig:
    vo: VOConfig = VOConfig()
    supervision: SupervisionConfig = SupervisionConfig()
    train: TrainConfig = TrainConfig(steps=100)
    weights: LossWeights = LossWeights()
    homography: HomographyConfig | None = None
    threshold: float = 0.001
    max_keypoints: int = 200


@dataclass
class RoundReport:
    vo_failures: int
    good_tracks: int
    bad_tracks: int
    undecided_tracks: int
    mean_loss: float
    rejected_steps: int
    vo: VOResult = field(repr=False, default=None)
    log: list = field(repr=False, default_factory=list)


class NoGoodTracksError(RuntimeError):
    """VO produced no good tracks, so there is nothing to train on."""


def self_supervised_round(frames, model: TinyPoint, rig, cfg: RoundConfig = RoundConfig(), round_index: int = 0, opt: Optimizer | None = None):
    """VO with the current network, verdicts, label grids, then training on the left images."""
    if len(frames) < 2:
        raise ValueError("a self-supervised round needs at least two frames")
    ext = LearnedExtractor(model, threshold=cfg.threshold, max_n=cfg.max_keypoints)
    vo = run_vo(frames, ext, rig, cfg.vo)
    verdicts = score_tracks(vo, rig, cfg.supervision)
    n_good = sum(v.verdict == GOOD for v in verdicts)
    n_bad = sum(v.verdict == BAD for v in verdicts)
    if n_good == 0:
        raise NoGoodTracksError(
            f"round {round_index}: no good tracks ({len(verdicts)} tracks, {vo.failure_count} VO failures)"
        )
    hgt, wid = frames[0][0].shape
    labels = frame_labels(vo, verdicts, len(frames), wid, hgt)
    images = [f[0] for f in frames]
    opt = opt or Optimizer()
    before = opt.rejected
    _, rows = train(model, images, labels, cfg.train, cfg.weights, cfg.homography, opt, seed_offset=round_index)
    mean = float(np.mean([r.total for _, r in rows])) if rows else float("nan")
    log.info("round %d: %d good / %d bad tracks, %d VO failures, mean loss %.4f", round_index, n_good, n_bad, vo.failure_count, mean)
    return RoundReport(vo.failure_count, n_good, n_bad, len(verdicts) - n_good - n_bad, mean, opt.rejected - before, vo, rows)
