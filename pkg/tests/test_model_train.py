import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from reference import brute_hinge
from trackfeat.features import decode_scores
from trackfeat.geometry import Homography
from trackfeat.model_train import (
    LearnedExtractor,
    LossWeights,
    NoGoodTracksError,
    Optimizer,
    TinyPoint,
    TrainConfig,
    descriptor_hinge_loss,
    detector_loss,
    forward,
    load_checkpoint,
    peaky_loss,
    prepare_sample,
    save_checkpoint,
    self_supervised_round,
    total_loss,
    train,
    train_step,
    write_train_log,
)
from trackfeat.supervision import DUSTBIN, build_label_grid
from trackfeat.synthscene import default_rig

LN65 = 4.174387269895637  # ln 65
UNIFORM_PEAK = 0.9846153846153847  # 1 - 1/65


def labels(rng, hc=3, wc=4):
    return torch.from_numpy(np.where(rng.random((hc, wc)) < 0.5, rng.integers(0, 64, (hc, wc)), DUSTBIN))


class TestDetectorLoss:
    def test_uniform(self, rng):
        loss, empty = detector_loss(torch.zeros(3, 4, 65, dtype=torch.float64), labels(rng))
        assert float(loss) == pytest.approx(LN65, abs=1e-12) and not empty
        assert math.log(65) == pytest.approx(LN65, abs=1e-15)

    def test_saturated(self, rng):
        y = labels(rng)
        x = torch.zeros(3, 4, 65, dtype=torch.float64)
        x.scatter_(-1, y.unsqueeze(-1), 20.0)
        assert float(detector_loss(x, y)[0]) < 1e-6  # 64 e^-20 ~ 1.3e-7

    def test_masked_cells_ignored(self, rng):
        y = labels(rng)
        x = torch.from_numpy(rng.normal(size=(3, 4, 65)))
        valid = torch.zeros(3, 4, dtype=torch.bool)
        valid[0, 0] = True
        want = -torch.log_softmax(x[0, 0], -1)[y[0, 0]]
        assert float(detector_loss(x, y, valid)[0]) == pytest.approx(float(want))

    def test_no_valid_cells(self, rng):
        loss, empty = detector_loss(torch.zeros(3, 4, 65), labels(rng), torch.zeros(3, 4, dtype=torch.bool))
        assert float(loss) == 0.0 and empty


class TestPeakyLoss:
    def test_uniform(self):
        y = torch.full((3, 4), DUSTBIN)
        y[1, 1] = 5
        assert float(peaky_loss(torch.zeros(3, 4, 65, dtype=torch.float64), y)) == pytest.approx(UNIFORM_PEAK, abs=1e-12)
        assert 1 - 1 / 65 == pytest.approx(UNIFORM_PEAK, abs=1e-15)

    def test_peaked(self):
        y = torch.full((3, 4), DUSTBIN)
        y[1, 1] = 5
        x = torch.zeros(3, 4, 65, dtype=torch.float64)
        x[1, 1, 17] = 20.0
        assert float(peaky_loss(x, y)) < 1e-6  # 64 e^-20 / (1 + 64 e^-20)

    def test_no_labelled_cells(self):
        assert float(peaky_loss(torch.randn(3, 4, 65), torch.full((3, 4), DUSTBIN))) == 0.0


class TestHinge:
    def test_identical_fields_positive_zero(self, rng):
        d = torch.from_numpy(rng.normal(size=(3, 4, 8)))
        s = torch.eye(12)
        loss, _ = descriptor_hinge_loss(d, d, s, m_p=1.0, m_n=1.0, lambda_d=5.0)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_negatives_zero(self):
        e = torch.eye(12, dtype=torch.float64).reshape(3, 4, 12)
        loss, _ = descriptor_hinge_loss(e, e, torch.eye(12), m_p=1.0, m_n=0.2)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_zero_descriptor_flag(self):
        d = torch.zeros(2, 2, 4, dtype=torch.float64)
        loss, flag = descriptor_hinge_loss(d, d, torch.zeros(4, 4))
        assert flag
        # every pair uses e0, so sim = 1 and each negative pays 1 - m_n
        assert float(loss) == pytest.approx(0.8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        d, dw = rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 4, 6))
        s = (rng.random((12, 12)) < 0.1).astype(np.uint8)
        va, vb = rng.random(12) < 0.8, rng.random(12) < 0.8
        got, _ = descriptor_hinge_loss(torch.from_numpy(d), torch.from_numpy(dw), torch.from_numpy(s),
                                       torch.from_numpy(va), torch.from_numpy(vb), 0.9, 0.2, 5.0)
        assert float(got) == pytest.approx(brute_hinge(d, dw, s, va, vb, 0.9, 0.2, 5.0), abs=1e-9)


class TestTotal:
    def test_only_detector_weight(self, rng):
        x, xw = (torch.from_numpy(rng.normal(size=(3, 4, 65))) for _ in range(2))
        d, dw = (torch.from_numpy(rng.normal(size=(3, 4, 8))) for _ in range(2))
        y, yw = labels(rng), labels(rng)
        w = LossWeights(1.0, 0.0, 0.0, 0.0)
        total, rep = total_loss(x, xw, y, yw, d, dw, torch.eye(12), w)
        assert float(total) == pytest.approx(float(detector_loss(x, y)[0]))
        assert rep.total == pytest.approx(rep.l_i)

    def test_weighted_sum(self, rng):
        x, xw = (torch.from_numpy(rng.normal(size=(3, 4, 65))) for _ in range(2))
        d, dw = (torch.from_numpy(rng.normal(size=(3, 4, 8))) for _ in range(2))
        w = LossWeights()
        total, rep = total_loss(x, xw, labels(rng), labels(rng), d, dw, torch.eye(12), w)
        want = w.w_i * rep.l_i + w.w_i_warped * rep.l_i_warped + w.w_pk * rep.l_pk + w.w_d * rep.l_d
        assert float(total) == pytest.approx(want, rel=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0, 0, 0, 0)
        with pytest.raises(ValueError):
            LossWeights(-1, 1, 1, 1)


class TestNetwork:
    def test_shapes(self):
        logits, desc = forward(TinyPoint(), np.zeros((192, 256), np.uint8))
        assert logits.shape == (24, 32, 65) and desc.shape == (24, 32, 64)

    def test_zero_heads_uniform(self):
        net = TinyPoint(desc_dim=16)
        with torch.no_grad():
            net.det.weight.zero_()
            net.det.bias.zero_()
        logits, _ = forward(net, np.zeros((64, 64), np.uint8))
        assert not logits.any()
        assert np.allclose(decode_scores(logits), 1 / 65)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            forward(TinyPoint(), np.zeros((30, 32)))
        with pytest.raises(ValueError):
            TinyPoint()(torch.zeros(1, 3, 32, 32))

    def test_seeded_init(self):
        a, b, c = TinyPoint(seed=1), TinyPoint(seed=1), TinyPoint(seed=2)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert not torch.equal(a.conv1.weight, c.conv1.weight)

    def test_extractor(self, rng):
        img = rng.integers(0, 256, (64, 96)).astype(np.uint8)
        kps = LearnedExtractor(TinyPoint(), max_n=30)(img)
        assert 0 < len(kps) <= 30
        assert np.allclose(np.linalg.norm(kps.desc, axis=1), 1, atol=1e-6)
        assert (kps.xy >= 4).all() and (kps.xy[:, 0] < 92).all() and (kps.xy[:, 1] < 60).all()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = TinyPoint(desc_dim=32, seed=5)
        save_checkpoint(net, tmp_path / "w.bin")
        back = load_checkpoint(tmp_path / "w.bin")
        assert back.desc_dim == 32
        for (n, p), (m, q) in zip(net.named_parameters(), back.named_parameters()):
            assert n == m and torch.equal(p.float(), q)

    def test_layout(self, tmp_path):
        net = TinyPoint(desc_dim=8)
        save_checkpoint(net, tmp_path / "w.bin")
        raw = (tmp_path / "w.bin").read_bytes()
        assert raw[:8] == b"TFNET\x00\x00\x00"
        assert raw[8:20] == bytes([1, 0, 0, 0, 8, 0, 0, 0, 10, 0, 0, 0])
        n_params = sum(p.numel() for p in net.parameters())
        header = 20 + sum(4 + 4 * p.dim() for p in net.parameters())
        assert len(raw) == header + 4 * n_params

    def test_bad_files(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.bin")
        save_checkpoint(TinyPoint(desc_dim=8), tmp_path / "w.bin")
        raw = bytearray((tmp_path / "w.bin").read_bytes())
        raw[8] = 9
        (tmp_path / "v.bin").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "v.bin")
        raw[8] = 1
        for name, data in (("t.bin", raw[:-4]), ("p.bin", raw + b"\0" * 4)):
            (tmp_path / name).write_bytes(bytes(data))
            with pytest.raises(ValueError, match="bytes"):
                load_checkpoint(tmp_path / name)


def tiny_batch(rng, n=2):
    out = []
    for _ in range(n):
        img = rng.integers(0, 256, (32, 48)).astype(np.uint8)
        pts = [(int(x), int(y)) for x, y in zip(rng.integers(0, 48, 5), rng.integers(0, 32, 5))]
        out.append((img, build_label_grid(pts, 48, 32), Homography.translation(2.0, -1.0)))
    return out


class TestTraining:
    def test_zero_step_size(self, rng):
        net = TinyPoint(desc_dim=8)
        before = [p.clone() for p in net.parameters()]
        _, ok = train_step(net, Optimizer(), tiny_batch(rng), TrainConfig(step_size=0.0), LossWeights())
        assert ok
        assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))

    def test_step_changes_parameters(self, rng):
        net = TinyPoint(desc_dim=8)
        before = [p.clone() for p in net.parameters()]
        opt = Optimizer()
        train_step(net, opt, tiny_batch(rng), TrainConfig(), LossWeights())
        assert any(not torch.equal(a, b) for a, b in zip(before, net.parameters()))
        assert set(opt.velocity) == {n for n, _ in net.named_parameters()}

    def test_non_finite_rejected(self, rng):
        net = TinyPoint(desc_dim=8)
        batch = tiny_batch(rng, 1)
        sample = prepare_sample(*batch[0])
        sample.img[0, 0, 0] = float("nan")
        before = [p.clone() for p in net.parameters()]
        opt = Optimizer()
        _, ok = train_step(net, opt, [sample], TrainConfig(), LossWeights())
        assert not ok and opt.rejected == 1 and not opt.velocity
        assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(TinyPoint(), Optimizer(), [], TrainConfig())

    def test_seeded_runs_identical(self, rng):
        batch = tiny_batch(rng, 3)
        imgs, labs = [b[0] for b in batch], [b[1] for b in batch]
        cfg = TrainConfig(steps=4, batch=2)
        a, b = TinyPoint(desc_dim=8), TinyPoint(desc_dim=8)
        _, ra = train(a, imgs, labs, cfg)
        _, rb = train(b, imgs, labs, cfg)
        assert [r.total for _, r in ra] == [r.total for _, r in rb]
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError):
            TrainConfig(step_size=-1)

    def test_log_file(self, tmp_path, rng):
        rows = []
        net = TinyPoint(desc_dim=8)
        batch = tiny_batch(rng, 2)
        train(net, [b[0] for b in batch], [b[1] for b in batch], TrainConfig(steps=2, batch=1), log_rows=rows)
        write_train_log(tmp_path / "log.csv", rows)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,l_i,l_i_warped,l_pk,l_d,total"
        assert len(lines) == 3


class TestRound:
    def test_one_frame(self):
        frame = (np.zeros((192, 256), np.uint8),) * 2
        with pytest.raises(ValueError):
            self_supervised_round([frame], TinyPoint(), default_rig())

    def test_no_good_tracks(self):
        frame = (np.full((192, 256), 128, np.uint8),) * 2
        with pytest.raises(NoGoodTracksError):
            self_supervised_round([frame] * 3, TinyPoint(), default_rig())
