"""Command-line pipeline: synth, vo, label, train, eval, compare.

Every command reads an optional flat ``key = value`` config (unknown keys are
rejected), writes into ``--out`` and exits non-zero with a single
``error: ...`` line on failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evalkit import ArmReport, COMPARE_COLUMNS, evaluate_arm, format_compare_table, write_report_csv
from .features import ClassicalExtractor, write_keypoints
from .geometry import HomographyConfig, read_trajectory, relative_poses, write_trajectory
from .matcher_vo import RansacConfig, VOConfig, VOResult, read_tracks, run_vo, write_summary, write_tracks
from .supervision import SupervisionConfig, frame_labels, score_tracks, write_labels
from .synthscene import canal_scene, default_rig, forward_trajectory, load_dataset, render_sequence, write_dataset

log = logging.getLogger("trackfeat")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "frames": 20,
    "width": 256,
    "height": 192,
    "focal": 200.0,
    "baseline": 0.25,
    "landmark_count": 2400,
    "step": 0.2,
    "weave": 0.3,
    "yaw_deg": 3.0,
    "data": "",
    "heldout_seed": 1000,
    "vo.ratio": 0.8,
    "vo.mutual": True,
    "vo.band": 1.0,
    "vo.max_disparity": 64.0,
    "vo.temporal_radius": 40.0,
    "ransac.inlier_px": 2.0,
    "ransac.min_inliers": 12,
    "ransac.iterations": 200,
    "sup.tau_px": 1.0,
    "sup.min_length": 3,
    "sup.stereo_tau": 1.0,
    "sup.eps_cell": 8.0,
    "extractor.threshold": 0.001,
    "extractor.max_keypoints": 200,
    "classical.threshold": 0.01,
    "classical.max_keypoints": 500,
    "train.rounds": 3,
    "train.steps": 100,
    "train.batch": 8,
    "train.step_size": 1e-3,
    "train.momentum": 0.9,
    "train.m_p": 1.0,
    "train.m_n": 0.2,
    "train.lambda_d": 250.0,
    "loss.w_i": 1.0,
    "loss.w_i_warped": 1.0,
    "loss.w_pk": 0.25,
    "loss.w_d": 0.5,
    "hom.scale": 0.2,
    "hom.rotation_deg": 15.0,
    "hom.translation": 0.1,
    "hom.perspective": 0.05,
    "eval.grid": 8,
    "eval.rep_eps": 3.0,
}


def _parse_value(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not np.isfinite(v):
                raise ValueError
            return v
        return raw
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


class RunConfig(dict):
    """Defaults overlaid by a config file; unknown keys are errors."""

    @classmethod
    def load(cls, path=None, seed=None) -> "RunConfig":
        cfg = cls(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise CliError(f"config file not found: {p}")
            try:
                raw = io.read_kv(p)
            except ValueError as e:
                raise CliError(str(e)) from None
            for k, v in raw.items():
                if k not in DEFAULTS:
                    raise CliError(f"unknown config key {k!r} in {p}")
                cfg[k] = _parse_value(k, v, DEFAULTS[k])
        if seed is not None:
            cfg["seed"] = seed
        cfg.validate()
        return cfg

    def validate(self):
        positive = ["frames", "width", "height", "focal", "baseline", "landmark_count", "train.batch",
                    "ransac.min_inliers", "ransac.iterations", "extractor.max_keypoints", "classical.max_keypoints",
                    "eval.rep_eps", "sup.tau_px", "sup.min_length", "sup.stereo_tau", "sup.eps_cell"]
        for k in positive:
            if not self[k] > 0:
                raise CliError(f"config key {k!r} must be positive, got {self[k]}")
        if self["width"] % 8 or self["height"] % 8:
            raise CliError("config keys 'width' and 'height' must be multiples of 8")
        if self["frames"] < 2:
            raise CliError("config key 'frames' must be at least 2")
        if not 0 <= self["train.momentum"] < 1:
            raise CliError("config key 'train.momentum' must lie in [0, 1)")
        if self["eval.grid"] < 2:
            raise CliError("config key 'eval.grid' must be at least 2")
        if self["data"] and not Path(self["data"]).is_dir():
            raise CliError(f"config key 'data': directory not found: {self['data']}")

    # typed views
    def vo(self) -> VOConfig:
        return VOConfig(
            self["vo.ratio"], self["vo.mutual"], self["vo.band"], self["vo.max_disparity"], self["vo.temporal_radius"],
            RansacConfig(self["ransac.inlier_px"], self["ransac.min_inliers"], self["ransac.iterations"], self["seed"]),
        )

    def supervision(self) -> SupervisionConfig:
        return SupervisionConfig(self["sup.tau_px"], self["sup.min_length"], self["sup.stereo_tau"], self["sup.eps_cell"])

    def homography(self) -> HomographyConfig:
        return HomographyConfig(self["width"], self["height"], self["hom.scale"], self["hom.rotation_deg"], self["hom.translation"], self["hom.perspective"])

    def round_config(self):
        from .model_train import LossWeights, RoundConfig, TrainConfig

        tc = TrainConfig(self["train.step_size"], self["train.momentum"], self["train.steps"], self["train.batch"],
                         self["seed"], self["train.m_p"], self["train.m_n"], self["train.lambda_d"], self["sup.eps_cell"])
        w = LossWeights(self["loss.w_i"], self["loss.w_i_warped"], self["loss.w_pk"], self["loss.w_d"])
        return RoundConfig(self.vo(), self.supervision(), tc, w, self.homography(), self["extractor.threshold"], self["extractor.max_keypoints"])

    def classical(self) -> ClassicalExtractor:
        return ClassicalExtractor(threshold=self["classical.threshold"], max_n=self["classical.max_keypoints"])


# ---------------------------------------------------------------- helpers


def _prepare_out(out, force: bool) -> Path:
    if out is None:
        raise CliError("--out DIR is required")
    p = Path(out)
    if p.exists() and not p.is_dir():
        raise CliError(f"output path exists and is not a directory: {p}")
    if p.is_dir() and any(p.iterdir()) and not force:
        raise CliError(f"output directory {p} is not empty (use --force)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _data_dir(args, cfg) -> Path:
    d = args.data or cfg["data"]
    if not d:
        raise CliError("no dataset given (use --data DIR or the 'data' config key)")
    p = Path(d)
    if not (p / "scene.cfg").is_file():
        raise CliError(f"{p} is not a dataset directory (missing scene.cfg; run `synth` first)")
    return p


def _synthesize(cfg, seed: int):
    rig = default_rig(cfg["width"], cfg["height"], cfg["focal"], cfg["baseline"])
    spec = canal_scene(seed, cfg["landmark_count"], cfg["width"], cfg["height"])
    traj = forward_trajectory(cfg["frames"], cfg["step"], seed, cfg["weave"], cfg["yaw_deg"])
    return render_sequence(spec, traj, rig)


def _check_weights(arg):
    if arg is None:
        raise CliError("--weights is required (a checkpoint path or 'classical')")
    if arg != "classical" and not Path(arg).is_file():
        raise CliError(f"checkpoint not found: {arg}")


def _extractor(arg, cfg):
    if arg == "classical":
        return cfg.classical()
    from .model_train import LearnedExtractor, load_checkpoint

    try:
        model = load_checkpoint(arg)
    except (ValueError, OSError) as e:
        raise CliError(str(e)) from None
    return LearnedExtractor(model, threshold=cfg["extractor.threshold"], max_n=cfg["extractor.max_keypoints"])


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    out = _prepare_out(args.out, args.force)
    ds = _synthesize(cfg, cfg["seed"])
    write_dataset(ds, out)
    dyn = float(np.mean([m.mean() for m in ds.gt_region_mask]))
    print(f"synth: {len(ds)} frames {cfg['width']}x{cfg['height']} seed={cfg['seed']} dynamic_area={dyn:.3f} -> {out}")


def cmd_vo(args, cfg):
    _check_weights(args.weights)
    data = _data_dir(args, cfg)
    extractor = _extractor(args.weights, cfg)
    out = _prepare_out(args.out, args.force)
    ds = load_dataset(data)
    vo = run_vo(ds.frames, extractor, ds.rig, cfg.vo())
    write_trajectory(out / "trajectory.csv", vo.trajectory(ds.gt_poses[0]))
    write_tracks(out / "tracks.csv", vo.tracks)
    write_summary(out / "summary.txt", vo)
    write_keypoints(out / "keypoints.csv", out / "keypoints.bin", vo.keypoints)
    print(f"vo: {len(ds)} frames, {vo.failure_count} failures, {len(vo.tracks)} tracks -> {out}")


def _load_vo(vo_dir: Path) -> VOResult:
    for name in ("trajectory.csv", "tracks.csv"):
        if not (vo_dir / name).is_file():
            raise CliError(f"{vo_dir}: missing {name} (run `vo` first)")
    _, poses = read_trajectory(vo_dir / "trajectory.csv")
    return VOResult(relative_poses(poses), read_tracks(vo_dir / "tracks.csv"), [], [], [])


def cmd_label(args, cfg):
    data = _data_dir(args, cfg)
    if args.vo is None:
        raise CliError("--vo DIR (output of `vo`) is required")
    vo = _load_vo(Path(args.vo))
    out = _prepare_out(args.out, args.force)
    ds = load_dataset(data)
    verdicts = score_tracks(vo, ds.rig, cfg.supervision())
    grids = frame_labels(vo, verdicts, len(ds), cfg["width"], cfg["height"])
    write_labels(out, grids, verdicts)
    n_good = sum(v.verdict == "good" for v in verdicts)
    print(f"label: {len(verdicts)} tracks, {n_good} good, {sum(int((g.labels < 64).sum()) for g in grids)} labelled cells -> {out}")


def cmd_train(args, cfg):
    from .model_train import NoGoodTracksError, Optimizer, TinyPoint, load_checkpoint, save_checkpoint, self_supervised_round, write_train_log

    data = _data_dir(args, cfg)
    if args.weights not in (None, "random") and not Path(args.weights).is_file():
        raise CliError(f"checkpoint not found: {args.weights}")
    out = _prepare_out(args.out, args.force)
    ds = load_dataset(data)
    model = TinyPoint(seed=cfg["seed"]) if args.weights in (None, "random") else load_checkpoint(args.weights)
    rc = cfg.round_config()
    opt = Optimizer()
    rows, log_rows = [], []
    for r in range(cfg["train.rounds"]):
        try:
            rep = self_supervised_round(ds.frames, model, ds.rig, rc, round_index=r, opt=opt)
        except NoGoodTracksError as e:
            raise CliError(str(e)) from None
        log_rows.extend((len(log_rows), x) for _, x in rep.log)
        rows.append({"round": r, "vo_failures": rep.vo_failures, "good_tracks": rep.good_tracks,
                     "bad_tracks": rep.bad_tracks, "mean_loss": rep.mean_loss, "rejected_steps": rep.rejected_steps})
        print(f"train: round {r}: {rep.good_tracks} good tracks, {rep.vo_failures} VO failures, mean loss {rep.mean_loss:.4f}")
    save_checkpoint(model, out / "checkpoint.bin")
    write_train_log(out / "train_log.csv", log_rows)
    write_report_csv(out / "rounds.csv", rows, ["round", "vo_failures", "good_tracks", "bad_tracks", "mean_loss", "rejected_steps"])
    print(f"train: checkpoint -> {out / 'checkpoint.bin'}")


def _arm(method, extractor, ds, cfg) -> ArmReport:
    return evaluate_arm(method, extractor, ds, cfg.vo(), cfg["eval.grid"], cfg.homography(), cfg["eval.rep_eps"], cfg["seed"])


def cmd_eval(args, cfg):
    _check_weights(args.weights)
    data = _data_dir(args, cfg)
    extractor = _extractor(args.weights, cfg)
    out = _prepare_out(args.out, args.force)
    ds = load_dataset(data)
    name = "classical" if args.weights == "classical" else "learned"
    rep = _arm(name, extractor, ds, cfg)
    write_report_csv(out / "report.csv", [rep.row()], COMPARE_COLUMNS)
    print(format_compare_table([rep.row()]), end="")


def cmd_compare(args, cfg):
    from .model_train import LearnedExtractor, TinyPoint

    if args.weights is None or args.weights == "classical":
        raise CliError("--weights CHECKPOINT (the fine-tuned network) is required")
    _check_weights(args.weights)
    fine = _extractor(args.weights, cfg)
    out = _prepare_out(args.out, args.force)
    if args.data or cfg["data"]:
        ds = load_dataset(_data_dir(args, cfg))
    else:
        ds = _synthesize(cfg, cfg["heldout_seed"])
    untrained = LearnedExtractor(TinyPoint(seed=cfg["seed"]), threshold=cfg["extractor.threshold"], max_n=cfg["extractor.max_keypoints"])
    rows = [
        _arm("classical", cfg.classical(), ds, cfg).row(),
        _arm("untrained", untrained, ds, cfg).row(),
        _arm("fine-tuned", fine, ds, cfg).row(),
    ]
    table = format_compare_table(rows)
    (out / "compare.txt").write_text(table)
    write_report_csv(out / "compare.csv", rows, COMPARE_COLUMNS)
    print(table, end="")


COMMANDS = {"synth": cmd_synth, "vo": cmd_vo, "label": cmd_label, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def _global_flags(parser, suppress: bool):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="flat key = value config file", **kw)
    parser.add_argument("--out", help="output directory", **kw)
    parser.add_argument("--force", action="store_true", help="write into a non-empty output directory", **kw)
    parser.add_argument("--seed", type=int, help="override the config seed", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser() -> argparse.ArgumentParser:
    # global flags may appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    ap = argparse.ArgumentParser(prog="trackfeat", description=__doc__.splitlines()[0])
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render a synthetic stereo sequence")
    p = sub.add_parser("vo", parents=[common], help="run stereo VO on a dataset")
    p.add_argument("--data")
    p.add_argument("--weights", help="checkpoint path or 'classical'")
    p = sub.add_parser("label", parents=[common], help="turn VO tracks into label grids")
    p.add_argument("--data")
    p.add_argument("--vo", help="directory written by `vo`")
    p = sub.add_parser("train", parents=[common], help="self-supervised training rounds")
    p.add_argument("--data")
    p.add_argument("--weights", help="initial checkpoint (default: random init from --seed)")
    p = sub.add_parser("eval", parents=[common], help="coverage, repeatability and VO error for one extractor")
    p.add_argument("--data")
    p.add_argument("--weights", help="checkpoint path or 'classical'")
    p = sub.add_parser("compare", parents=[common], help="classical vs untrained vs fine-tuned on a held-out scene")
    p.add_argument("--data", help="held-out dataset (default: synthesize one from heldout_seed)")
    p.add_argument("--weights", help="fine-tuned checkpoint")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
