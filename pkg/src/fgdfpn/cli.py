"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(I/O, malformed inputs, divergence).
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- data directories -----------------------------------------------------------


def write_clips(out: Path, clips) -> None:
    from .metrics import to_uint8
    from .video_io import save_pgm

    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clip", "motion", "dx", "dy", "speed", "angle", "zoom"])
    for i, clip in enumerate(clips):
        d = out / f"clip_{i:05d}"
        d.mkdir(exist_ok=True)
        for t, frame in enumerate(clip.frames):
            save_pgm(to_uint8(frame), d / f"frame_{t}.pgm")
        m = clip.motion
        speed = float(np.hypot(m["dx"], m["dy"]))
        writer.writerow([d.name, m["motion"], repr(m["dx"]), repr(m["dy"]), repr(speed),
                         repr(m.get("angle", 0.0)), repr(m.get("zoom", 1.0))])
    (out / "manifest.csv").write_text(buf.getvalue())


def read_clips(data: Path):
    """Every subdirectory holding exactly five PGM frames is one clip."""
    from .synth import Clip
    from .video_io import load_pgm_sequence

    clips = []
    for d in sorted(p for p in data.iterdir() if p.is_dir()):
        seq = load_pgm_sequence(d)
        if len(seq) == 0:
            continue
        if len(seq) != 5:
            raise ValueError(f"clip directory {d} holds {len(seq)} frames, expected 5")
        clips.append(Clip(seq.frames.astype(np.float64) / 255.0, {"source": str(d)}))
    return clips


# -- commands -------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .synth import synth_set

    if args.clips < 0:
        raise UsageError("--clips must be >= 0")
    if not 0 <= args.max_speed <= 8:
        raise UsageError("--max-speed must lie in [0, 8]")
    clips = synth_set(args.seed, args.clips, size=(args.size, args.size), max_speed=args.max_speed,
                      motion=args.motion, integer=args.integer)
    write_clips(Path(args.out), clips)
    print(f"wrote {len(clips)} clips to {args.out}")
    return EXIT_OK


def _run_config(args):
    from . import config

    overrides = list(args.set or [])
    if getattr(args, "iters", None) is not None:
        overrides.append(f"train.total_iters = {args.iters}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed = {args.seed}")
    return config.load(args.config, overrides)


def cmd_train(args) -> int:
    from . import checkpoint
    from .model import FGDFPN
    from .training import Adam, train_loop

    run = _run_config(args)
    data, out = Path(args.data), Path(args.out)
    if not data.is_dir():
        raise UsageError(f"--data {data} is not a directory")
    if not out.parent.is_dir():
        raise UsageError(f"output directory {out.parent} does not exist")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"--resume {args.resume} does not exist")
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    clips = read_clips(data)
    tc = run.train
    model = FGDFPN(run.model, seed=tc.seed)
    opt = Adam(model.parameters(), (tc.beta1, tc.beta2), tc.adam_eps)
    start = 0
    if args.resume:
        ckpt = checkpoint.read(args.resume)
        saved = ckpt.meta(checkpoint.META_CONFIG)
        if saved != run.model.to_dict():
            raise UsageError("--resume checkpoint was trained with a different model configuration")
        checkpoint.load_into(model, ckpt, opt)
        state = ckpt.meta(checkpoint.META_TRAIN) or {}
        start = int(state.get("iteration", 0))
        opt.step_count = int(state.get("adam_step", 0))
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log:
        if not args.resume:
            for line in run.lines():
                log.write(f"# {line}\n")
            log.write("iter,lr,loss,seconds\n")
        print(f"lr0 = {tc.lr0}; iterations {start}..{tc.total_iters}; {len(clips)} clips", file=sys.stderr)

        def emit(line):
            log.write(line + "\n")
            log.flush()

        train_loop(model, tc, clips, opt, start=start, log=emit, checkpoint_path=out)
    print(f"wrote {out}")
    return EXIT_OK


def _load_model(path):
    from .checkpoint import load_model

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_model(path)[0]


def cmd_predict(args) -> int:
    from .evaluate import error_map, model_predictor, windows
    from .metrics import psnr, to_uint8
    from .video_io import load_sequence, save_pgm

    model = _load_model(args.ckpt)
    seq = load_sequence(args.input)
    if not 4 <= args.t < len(seq):
        raise UsageError(f"--t must lie in [4, {len(seq) - 1}] for a {len(seq)}-frame input")
    window = (seq.frames[args.t - 4 : args.t].astype(np.float64) / 255.0)[None]
    pred = to_uint8(model_predictor(model)(window)[0, 0])
    save_pgm(pred, args.out)
    gt = seq.frames[args.t]
    print(f"frame {args.t}: psnr {psnr(pred, gt):.4f} dB")
    if args.error_map:
        _, scale = error_map(pred, gt, args.error_map)
        print(f"error map scale {scale:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_sequence, model_predictor
    from .video_io import load_sequence

    run = _run_config(args)
    model = _load_model(args.ckpt)
    seq = load_sequence(args.input)
    baseline = args.baseline == "copy-last" or run.eval.baseline
    report = evaluate_sequence(model_predictor(model), seq, args.report, args.error_maps, baseline, run.eval.batch)
    print(f"mean psnr {report.mean_psnr:.4f} dB, mean ssim {report.mean_ssim:.6f} over {len(report.rows)} frames")
    if baseline:
        print(f"copy-last psnr {report.baseline_mean_psnr:.4f} dB, ssim {report.baseline_mean_ssim:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    ops = [args.op] if args.op else None
    try:
        results = gradcheck.run(seed=args.seed, ops=ops)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    for r in results:
        print(f"{r.name:18s} {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing ops: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgdfpn", description="Flow-guided deformable next-frame prediction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="render synthetic training clips as PGM frames")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--motion", choices=("translate", "affine"), default="translate")
    s.add_argument("--max-speed", type=float, default=3.0)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--integer", action="store_true", help="round velocities to whole pixels")
    s.set_defaults(fn=cmd_synth_data)

    def config_args(q):
        q.add_argument("--config", help="key = value configuration file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="train a model on a directory of clips")
    config_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("predict", help="predict frame t from frames t-4..t-1")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help=".y4m file or directory of PGM frames")
    r.add_argument("--t", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--error-map")
    r.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="sliding-window PSNR/SSIM report")
    config_args(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--baseline", choices=("copy-last",))
    e.add_argument("--error-maps", help="directory for per-frame error maps")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--op")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .training import TrainingDiverged
    from .video_io import FormatError

    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"fgdfpn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, FormatError, TrainingDiverged, ValueError) as exc:
        print(f"fgdfpn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
