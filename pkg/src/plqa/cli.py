"""Command-line entry point: ``plqa <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 numeric failure (zero embedding, zero variance).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import experiments as ex
from . import facemodel as fm
from . import fiq, imageio, plq, synthetic
from .errors import FormatError, InputError, NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".png")

# model metadata keys that stand in for flags the user did not pass
_CALIBRATION_KEYS = ("alpha", "r", "gamma", "normalize_embeddings")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {v}")
    return v


def _box(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected TOP,LEFT,HEIGHT,WIDTH, got {text!r}")
    return parts


def _size(text: str):
    v = float(text)
    return int(v) if v >= 1 and v == int(v) else v


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--model", type=Path, help="PLQM weight file")
    g.add_argument("--seed", type=_u64, default=0, help="master seed (u64)")
    g.add_argument("--m", type=int, default=100, help="stochastic passes per quality estimate")
    g.add_argument("--dropout", type=float, default=None, help="dropout probability (default: the model's)")
    g.add_argument("--alpha", type=float, default=None, help="quality scaling slope")
    g.add_argument("--r", type=float, default=None, help="quality scaling offset")
    g.add_argument("--gamma", type=float, default=None, help="visualization exponent")
    g.add_argument("--clip-norm", type=float, default=1.0, help="backward-step gradient clip (inf disables)")
    g.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    g.add_argument("--weight-mode", choices=("paper-literal", "sign-corrected"), default="paper-literal")
    g.add_argument("--normalize-embeddings", action="store_true", default=None,
                   help="unit-normalize stochastic embeddings before measuring distances")
    g.add_argument("--out", type=Path, help="output file or directory")
    g.add_argument("--jobs", type=int, default=1, help="worker threads for batch subcommands")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="plqa", description="Pixel-level face image quality maps.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quality", parents=[common], help="image quality of one image")
    p.add_argument("image", type=Path)
    p.add_argument("--repeats", type=int, default=0, help="also report mean and std over this many seeds")

    p = sub.add_parser("map", parents=[common], help="pixel-quality CSV and heatmap for one image")
    p.add_argument("image", type=Path)

    p = sub.add_parser("calibrate-scale", parents=[common], help="alpha and r from a development set")
    p.add_argument("corpus", type=Path)

    p = sub.add_parser("calibrate-gamma", parents=[common], help="gamma from reference images")
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("--face-box", type=_box, required=True, metavar="TOP,LEFT,HEIGHT,WIDTH")

    p = sub.add_parser("mask-exp", parents=[common], help="random-mask degradation experiment")
    p.add_argument("corpus", type=Path)
    p.add_argument("--sizes", type=_size, nargs="+", help="absolute sizes in px or fractions of the shorter side")
    p.add_argument("--per-size", type=int, default=1)
    p.add_argument("--fill-value", type=float, default=0.0)

    p = sub.add_parser("restore-exp", parents=[common], help="mask-then-fill restoration experiment")
    p.add_argument("corpus", type=Path)
    p.add_argument("--region", type=_box, action="append", required=True, metavar="TOP,LEFT,HEIGHT,WIDTH")
    p.add_argument("--fill", choices=("mean_fill", "blur_fill"), default="mean_fill")
    p.add_argument("--repeats", type=int, default=10)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy-16 model on synthetic faces")
    p.add_argument("--identities", type=int, default=50)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--schedule", choices=("constant", "cosine"), default="cosine", help="step-size schedule")
    p.add_argument("--calibrate", action="store_true",
                   help="store alpha, r and gamma calibrated on held-out samples in the weight file")

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic PPM corpus")
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--canvas", type=int, default=32)
    p.add_argument("--jitter", type=float, default=1.0)

    p = sub.add_parser("render", parents=[common], help="heatmap from a pixel-quality CSV")
    p.add_argument("csv", type=Path)
    return parser


# ---------------------------------------------------------------- helpers


def _need(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"plqa {args.command}: error: --{name.replace('_', '-')} is required")
    return getattr(args, name)


def _load_model(args) -> fm.EmbeddingModel:
    return fm.load(_need(args, "model"))


def _setting(args, model, key, default):
    flag = getattr(args, key)
    if flag is not None:
        return flag
    return model.metadata.get(key, default)


def _fiq_config(args, model) -> fiq.FiqConfig:
    try:
        return fiq.FiqConfig(
            m=args.m,
            p_d=args.dropout if args.dropout is not None else model.dropout_p,
            alpha=float(_setting(args, model, "alpha", fiq.ARCFACE_SCALING[0])),
            r=float(_setting(args, model, "r", fiq.ARCFACE_SCALING[1])),
            normalize_embeddings=bool(_setting(args, model, "normalize_embeddings", False)),
            seed=args.seed,
        )
    except ValueError as err:
        raise UsageError(f"plqa {args.command}: error: {err}") from None


def _gamma(args, model) -> float:
    return float(_setting(args, model, "gamma", plq.GAMMA_ARCFACE))


def _clip(args) -> Optional[float]:
    if args.no_clip or math.isinf(args.clip_norm):
        return None
    if not args.clip_norm > 0:
        raise UsageError(f"plqa {args.command}: error: --clip-norm must be positive")
    return args.clip_norm


def _mode(args) -> str:
    return args.weight_mode.replace("-", "_")


def _corpus(path: Path):
    if not path.is_dir():
        raise InputError(f"{path} is not a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no .ppm or .png images in {path}")
    return [(p.stem, imageio.read_image(p)) for p in files]


def _out_dir(args) -> Path:
    out = _need(args, "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


# ---------------------------------------------------------------- subcommands


def cmd_quality(args) -> int:
    model = _load_model(args)
    cfg = _fiq_config(args, model)
    res = fiq.quality(model, imageio.read_image(args.image), cfg)
    lines = [f"q_raw={_fmt(res.q_raw)} q_scaled={_fmt(res.q_scaled)}"]
    if args.repeats:
        mean, std = fiq.quality_stats(model, imageio.read_image(args.image), cfg, args.repeats)
        lines.append(f"repeats={args.repeats} mean={_fmt(mean)} std={_fmt(std)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        args.out.write_text(text)
    return EXIT_OK


def cmd_map(args) -> int:
    model = _load_model(args)
    res, pmap = plq.plq_map(
        model, imageio.read_image(args.image), _fiq_config(args, model), _gamma(args, model), _mode(args), _clip(args)
    )
    out = _out_dir(args)
    csv_path = out / f"{args.image.stem}.plq.csv"
    png_path = out / f"{args.image.stem}.heatmap.ppm"
    imageio.write_plq_csv(pmap, csv_path)
    imageio.write_heatmap(imageio.render_heatmap(pmap), png_path)
    print(f"q_raw={_fmt(res.q_raw)} q_scaled={_fmt(res.q_scaled)}")
    print(f"wrote {csv_path} {png_path}")
    return EXIT_OK


def cmd_calibrate_scale(args) -> int:
    model = _load_model(args)
    cfg = _fiq_config(args, model)
    qs = [fiq.quality(model, img, cfg).q_raw for _, img in _corpus(args.corpus)]
    alpha, r = fiq.calibrate_scaling(qs)
    print(f"alpha={_fmt(alpha)} r={_fmt(r)}")
    return EXIT_OK


def cmd_calibrate_gamma(args) -> int:
    model = _load_model(args)
    cfg = _fiq_config(args, model)
    s_hats = []
    for path in args.images:
        img = model.check_image(imageio.read_image(path))
        q = fiq.quality(model, img, cfg)
        head = plq.build_head(fm.embed(model, img), q.q_scaled, _mode(args))
        s_hats.append(plq.merge_channels(plq.saliency(model, img, head, _clip(args))))
    print(f"gamma={_fmt(plq.calibrate_gamma(s_hats, args.face_box))}")
    return EXIT_OK


def cmd_mask_exp(args) -> int:
    model = _load_model(args)
    records = ex.run_mask_experiment(
        model, _corpus(args.corpus), args.sizes, args.per_size, _fiq_config(args, model),
        _gamma(args, model), args.seed, _mode(args), _clip(args), args.fill_value, args.jobs,
    )
    out = _out_dir(args)
    ex.write_records_csv(records, out / "records.csv")
    summary = ex.summarize(records)
    ex.write_summary_csv(summary, out / "summary.csv")
    for row in summary:
        print(f"size={row.size} n={row.n} frac_dq>0={_fmt(row.frac_positive_dq)} frac_dp>0={_fmt(row.frac_positive_dp)}")
    return EXIT_OK


def cmd_restore_exp(args) -> int:
    model = _load_model(args)
    pairs = [
        ex.mask_and_fill(f"{image_id}@{','.join(map(str, region))}", img, region, args.fill)
        for image_id, img in _corpus(args.corpus)
        for region in args.region
    ]
    report = ex.run_restoration_experiment(
        model, pairs, _fiq_config(args, model), _gamma(args, model), _mode(args), _clip(args), args.repeats, args.jobs
    )
    out = _out_dir(args)
    fields = list(ex.RECORD_FIELDS) + ["degraded_mean", "degraded_std", "restored_mean", "restored_std"]
    with open(out / "restoration.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for rec, dstat, rstat in zip(report.records, report.degraded_stats, report.restored_stats):
            writer.writerow(rec.row() + [_fmt(v) for v in (*dstat, *rstat)])
    inc, dec, same = report.outcome_fractions()
    print(f"median_delta_q={_fmt(report.median_delta_q)} median_degraded_std={_fmt(report.median_degraded_std)}")
    print(f"increased={_fmt(inc)} decreased={_fmt(dec)} within_std={_fmt(same)}")
    return EXIT_OK


def calibrate_model(model: fm.EmbeddingModel, images: Sequence[np.ndarray], seed: int = 0, m: int = 100,
                    normalize: bool = True, mode: str = plq.PAPER_LITERAL) -> dict:
    """Fit alpha and r on ``images``, then gamma on their maps over the synthetic face box."""
    cfg = fiq.FiqConfig(m=m, p_d=model.dropout_p, alpha=1.0, r=0.0, normalize_embeddings=normalize, seed=seed)
    qs = [fiq.quality(model, img, cfg).q_raw for img in images]
    alpha, r = fiq.calibrate_scaling(qs)
    s_hats = []
    for img, q in zip(images, qs):
        head = plq.build_head(fm.embed(model, img), fiq.scale_quality(q, alpha, r), mode)
        s_hats.append(plq.merge_channels(plq.saliency(model, img, head)))
    gamma = plq.calibrate_gamma(s_hats, synthetic.face_box(model.input_shape))
    return {"alpha": alpha, "r": r, "gamma": gamma, "normalize_embeddings": normalize}


def cmd_train_toy(args) -> int:
    data = synthetic.make_dataset(args.identities, args.samples, args.seed)
    log = print if args.verbose else None
    model = fm.train_toy(
        [(img, lab) for img, lab, _ in data], epochs=args.epochs, lr=args.lr, seed=args.seed,
        batch_size=args.batch_size, schedule=args.schedule, dropout_p=0.5 if args.dropout is None else args.dropout, log=log,
    )
    if args.calibrate:
        # held-out sample index: one past the training samples
        held = [synthetic.identity_spec(args.seed, i).render(args.samples) for i in range(args.identities)]
        model.metadata.update(calibrate_model(model, held, args.seed, args.m))
    out = _need(args, "out")
    fm.save(model, out)
    print(f"train_accuracy={_fmt(model.metadata['train_accuracy'])} wrote {out}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    out = _out_dir(args)
    canvas = (args.canvas, args.canvas, 3)
    for img, _, image_id in synthetic.make_dataset(args.identities, args.samples, args.seed, canvas, args.jitter):
        imageio.write_image(img, out / f"{image_id}.ppm")
    print(f"wrote {args.identities * args.samples} images to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    out = _need(args, "out")
    imageio.write_heatmap(imageio.render_heatmap(imageio.read_plq_csv(args.csv)), out)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "quality": cmd_quality,
    "map": cmd_map,
    "calibrate-scale": cmd_calibrate_scale,
    "calibrate-gamma": cmd_calibrate_gamma,
    "mask-exp": cmd_mask_exp,
    "restore-exp": cmd_restore_exp,
    "train-toy": cmd_train_toy,
    "gen-synthetic": cmd_gen_synthetic,
    "render": cmd_render,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.jobs < 1:
            raise UsageError("plqa: error: --jobs must be at least 1")
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, InputError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
