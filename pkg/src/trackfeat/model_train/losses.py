"""The four weighted loss terms used to train the detector and descriptor heads.

All functions take single-image tensors in cell layout: score grids are
``(Hc, Wc, 65)``, descriptor fields ``(Hc, Wc, D)``, labels ``(Hc, Wc)`` int.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..features import normalize_rows

log = logging.getLogger(__name__)

DUSTBIN = 64


@dataclass(frozen=True)
class LossWeights:
    w_i: float = 1.0
    w_i_warped: float = 1.0
    w_pk: float = 0.25
    w_d: float = 0.5

    def __post_init__(self):
        vals = (self.w_i, self.w_i_warped, self.w_pk, self.w_d)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be non-negative and not all zero")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.w_i * k, self.w_i_warped * k, self.w_pk * k, self.w_d * k)


@dataclass
class LossReport:
    l_i: float
    l_i_warped: float
    l_pk: float
    l_d: float
    total: float

    def as_row(self):
        return [self.l_i, self.l_i_warped, self.l_pk, self.l_d, self.total]


def detector_loss(x: torch.Tensor, y: torch.Tensor, valid: torch.Tensor | None = None):
    """Mean 65-way cross-entropy over supervised cells.

    Returns ``(loss, empty)``; with no supervised cell the loss is 0 and
    ``empty`` is True.
    """
    mask = torch.ones(y.shape, dtype=torch.bool) if valid is None else valid.bool()
    n = int(mask.sum())
    if n == 0:
        log.warning("detector loss has no valid cells")
        return x.sum() * 0.0, True
    logp = F.log_softmax(x, dim=-1)
    nll = -logp.gather(-1, y.long().clamp(0, DUSTBIN).unsqueeze(-1)).squeeze(-1)
    return nll[mask].sum() / n, False


def peaky_loss(x: torch.Tensor, y: torch.Tensor, valid: torch.Tensor | None = None):
    """Mean of ``1 - max spatial probability`` over keypoint-labelled cells (0 if none)."""
    mask = y < DUSTBIN
    if valid is not None:
        mask = mask & valid.bool()
    n = int(mask.sum())
    if n == 0:
        return x.sum() * 0.0
    p = F.softmax(x, dim=-1)[..., :DUSTBIN]
    pmax = p.max(dim=-1).values
    return (1.0 - pmax)[mask].sum() / n


def descriptor_hinge_loss(d, d_warped, s, valid_a=None, valid_b=None, m_p: float = 1.0, m_n: float = 0.2, lambda_d: float = 250.0):
    """Similarity-space hinge over all cell pairs of an image and its warp.

    With unit cell descriptors ``a_c``, ``b_c'`` and ``sim = a_c . b_c'``::

        lambda_d * s * max(0, m_p - sim) + (1 - s) * max(0, sim - m_n)

    averaged over pairs whose cells are both valid. Returns ``(loss, zero_flag)``
    where the flag reports zero-norm descriptors replaced by ``e0``.
    """
    a, za = normalize_rows(d.reshape(-1, d.shape[-1]))
    b, zb = normalize_rows(d_warped.reshape(-1, d_warped.shape[-1]))
    flag = bool(za.any() or zb.any())
    if valid_a is not None:
        keep = valid_a.reshape(-1).bool()
        a, s = a[keep], s[keep]
    if valid_b is not None:
        keep = valid_b.reshape(-1).bool()
        b, s = b[keep], s[:, keep]
    if a.shape[0] == 0 or b.shape[0] == 0:
        return d.sum() * 0.0 + d_warped.sum() * 0.0, flag
    s = s.to(a.dtype)
    sim = a @ b.T
    terms = lambda_d * s * torch.clamp(m_p - sim, min=0.0) + (1.0 - s) * torch.clamp(sim - m_n, min=0.0)
    return terms.mean(), flag


def total_loss(x, x_warped, y, y_warped, d, d_warped, s, w: LossWeights, valid=None, valid_warped=None, valid_a=None, valid_b=None, m_p=1.0, m_n=0.2, lambda_d=250.0):
    """Weighted sum of the four terms; returns ``(total tensor, LossReport)``.

    The peaky term is evaluated on the unwarped pair only.
    """
    l_i, _ = detector_loss(x, y, valid)
    l_iw, _ = detector_loss(x_warped, y_warped, valid_warped)
    l_pk = peaky_loss(x, y, valid)
    l_d, _ = descriptor_hinge_loss(d, d_warped, s, valid_a, valid_b, m_p, m_n, lambda_d)
    total = w.w_i * l_i + w.w_i_warped * l_iw + w.w_pk * l_pk + w.w_d * l_d
    rep = LossReport(*(float(v.detach()) for v in (l_i, l_iw, l_pk, l_d)), 0.0)
    rep.total = w.w_i * rep.l_i + w.w_i_warped * rep.l_i_warped + w.w_pk * rep.l_pk + w.w_d * rep.l_d
    return total, rep
