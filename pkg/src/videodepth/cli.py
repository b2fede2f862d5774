"""``videodepth`` command line: gen-data, train, infer, eval, ablate-stitch.

Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import Config, ConfigError
from .edm import ConditioningError, DomainError
from .experiments import heldout_set, stitch_ablation
from .longvid import VARIANTS, InferenceError, PlanError, StitchError, infer_long
from .metrics import (
    DegenerateAlignmentError,
    EvalConfigError,
    InsufficientDataError,
    evaluate_sequence,
    profile_image,
    temporal_profile,
    write_pgm,
)
from .net import ParamsError, TrainingError, init_params, load_checkpoint
from .synth import DegenerateSequenceError, SpecError, STYLES, build_corpus, iter_corpus, load_corpus, read_manifest, write_sequences
from .tensor import Rng, ShapeError, TensorFileError, derive_seed, load_tensor, save_tensor
from .train import CorpusError, LatentCache, StageConfigError, run_pipeline

log = logging.getLogger("videodepth")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _seed_streams(seed: int) -> tuple[Rng, Rng]:
    """Initialisation stream and training stream of a run."""
    root = Rng(seed)
    return root.child(0), root.child(1)


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in r) + "\n")


def _parse_stages(text: str) -> list[int]:
    try:
        ids = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError:
        raise ConfigError(f"--stages expects a comma list of 1, 2, 3, got {text!r}") from None
    if not ids or any(i not in (1, 2, 3) for i in ids):
        raise ConfigError(f"--stages expects a comma list of 1, 2, 3, got {text!r}")
    return ids


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: Config, args) -> int:
    out = Path(args.out or cfg["paths.data"])
    seed = cfg["run.seed"]
    d = cfg.values["data"]
    H, W = d["height"], d["width"]
    styles = [args.style] if args.style else list(STYLES)
    for style in styles:
        if style == "realistic":
            n, lengths = d["realistic_count"], (d["realistic_min_length"], d["realistic_max_length"])
        else:
            n, lengths = d["synthetic_count"], (d["synthetic_length"], d["synthetic_length"])
        entries = build_corpus(style, n, lengths, seed, out, H=H, W=W, strength=d["label_noise"])
        log.info("wrote %d %s sequences to %s", len(entries), style, out / style)
    if not args.style:
        held = heldout_set(derive_seed(seed, 100), d["eval_count"], d["eval_length"], H, W)
        write_sequences(out / "eval", held)
        longs = heldout_set(derive_seed(seed, 200), d["long_count"], d["long_length"], H, W)
        for s in longs:
            s.seq_id = s.seq_id.replace("eval", "long")
        write_sequences(out / "long", longs)
        log.info("wrote %d eval and %d long sequences", len(held), len(longs))
    cfg.echo(out)
    return 0


def cmd_train(cfg: Config, args) -> int:
    data = Path(args.data or cfg["paths.data"])
    out = Path(args.out or cfg["paths.runs"])
    only = _parse_stages(args.stages) if args.stages else None
    corpora = {}
    for style in STYLES:
        if not (data / style / "manifest.tsv").exists():
            raise DataError(f"missing corpus {data / style} (run gen-data first)")
        corpora[style] = load_corpus(data, style)
    init_rng, train_rng = _seed_streams(cfg["run.seed"])
    if args.resume:
        params = load_checkpoint(args.resume)
        if params.config != cfg.net():
            raise ConfigError(f"checkpoint {args.resume} was trained with {params.config}, config asks for {cfg.net()}")
    else:
        params = init_params(cfg.net(), init_rng)
    cache = LatentCache(cfg.codec(), cfg["net.embed_dim"], cfg["paths.cache"] or None)
    cfg.echo(out)
    _, traces = run_pipeline(params, cfg.stages(), corpora, train_rng, cache, out, only, cfg.noise_distribution())
    for sid, tr in traces.items():
        log.info("stage %d: %d iterations, final loss %.4f", sid, len(tr), tr[-1].loss if tr else math.nan)
        cfg.echo(out / f"stage{sid}")
    return 0


def _infer_one(cfg: Config, params, video: np.ndarray, rng: Rng, variant: str) -> np.ndarray:
    if video.ndim != 4 or video.shape[-1] != 3:
        raise DataError(f"expected a [T,H,W,3] video tensor, got shape {video.shape}")
    res = infer_long(params, video, cfg["infer.window"], cfg["infer.overlap"], cfg.schedule(), cfg.codec(), rng,
                     variant=variant, guidance=cfg.guidance())
    return res.depth


def cmd_infer(cfg: Config, args) -> int:
    ckpt = Path(args.checkpoint or Path(cfg["paths.runs"]) / "stage3")
    params = load_checkpoint(ckpt)
    src, dst = Path(args.input), Path(args.output)
    seed = cfg["run.seed"]
    variant = cfg["infer.variant"]
    if src.is_dir():
        if not (src / "manifest.tsv").exists():
            raise DataError(f"{src} has no manifest.tsv")
        for i, e in enumerate(read_manifest(src / "manifest.tsv")):
            video = load_tensor(src / e.seq_id / "video.dcrf")
            depth = _infer_one(cfg, params, video, Rng(derive_seed(seed, i)), variant)
            (dst / e.seq_id).mkdir(parents=True, exist_ok=True)
            save_tensor(dst / e.seq_id / "depth.dcrf", depth)
            log.info("%s: %d frames", e.seq_id, depth.shape[0])
        cfg.echo(dst)
    else:
        depth = _infer_one(cfg, params, load_tensor(src), Rng(derive_seed(seed, 0)), variant)
        dst.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(dst, depth)
        (dst.parent / f"{dst.stem}.config.ini").write_text(cfg.dump())
    return 0


def cmd_eval(cfg: Config, args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    report = Path(args.output) if args.output else pred / "report.tsv"
    if not (gt / "manifest.tsv").exists():
        raise DataError(f"{gt} has no manifest.tsv")
    ids = [e.seq_id for e in read_manifest(gt / "manifest.tsv")]
    missing = [i for i in ids if not (pred / i / "depth.dcrf").exists()]
    extra = sorted(d.parent.name for d in pred.glob("*/depth.dcrf") if d.parent.name not in set(ids))
    if missing or extra:
        raise DataError(f"sequence sets differ; missing predictions: {', '.join(missing) or '-'}; "
                        f"no ground truth: {', '.join(extra) or '-'}")
    ecfg = cfg.eval_config()
    rows = []
    for i in ids:
        p = load_tensor(pred / i / "depth.dcrf")
        g = load_tensor(gt / i / "metric.dcrf")
        r = evaluate_sequence(p, g, ecfg)
        rows.append([i, r.absrel, r.delta1, r.scale, r.shift, r.excluded])
        if args.profile_row is not None:
            (report.parent / "profiles").mkdir(parents=True, exist_ok=True)
            write_pgm(report.parent / "profiles" / f"{i}.pgm", profile_image(temporal_profile(p, args.profile_row)))
    summary = ["mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), "", "", sum(r[5] for r in rows)]
    _write_tsv(report, ["id", "absrel", "delta1", "scale", "shift", "excluded"], rows + [summary])
    cfg.echo(report.parent)
    log.info("AbsRel %.4f  delta1 %.4f over %d sequences", summary[1], summary[2], len(rows))
    return 0


def cmd_ablate_stitch(cfg: Config, args) -> int:
    ckpt = Path(args.checkpoint or Path(cfg["paths.runs"]) / "stage3")
    params = load_checkpoint(ckpt)
    suite = Path(args.data or Path(cfg["paths.data"]) / "long")
    seqs = list(iter_corpus(suite.parent, suite.name)) if (suite / "manifest.tsv").exists() else None
    if not seqs:
        raise DataError(f"no long-video suite at {suite}")
    variants = [args.variant] if args.variant else list(VARIANTS)
    rows = stitch_ablation(params, seqs, cfg.schedule(), cfg.codec(), cfg["infer.window"], cfg["infer.overlap"],
                           cfg["run.seed"], variants)
    out = Path(args.output) if args.output else Path(cfg["paths.runs"]) / "ablation" / "stitch.tsv"
    _write_tsv(out, ["variant", "discontinuity", "median_change"], [[r.variant, r.discontinuity, r.median_change] for r in rows])
    cfg.echo(out.parent)
    for r in rows:
        log.info("%-8s discontinuity %.5f  median change %.5f", r.variant, r.discontinuity, r.median_change)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads")
    common.add_argument("-v", "--verbose", action="store_true")

    infer_flags = argparse.ArgumentParser(add_help=False)
    infer_flags.add_argument("--window", type=int, help="overrides infer.window")
    infer_flags.add_argument("--overlap", type=int, help="overrides infer.overlap")
    infer_flags.add_argument("--steps", type=int, help="overrides edm.steps")
    infer_flags.add_argument("--checkpoint", help="checkpoint directory (default <runs>/stage3)")

    p = argparse.ArgumentParser(prog="videodepth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write training corpora and evaluation suites")
    g.add_argument("--out", help="output root (default paths.data)")
    g.add_argument("--style", choices=STYLES, help="only this corpus")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="three-stage training")
    t.add_argument("--data", help="corpus root (default paths.data)")
    t.add_argument("--out", help="run directory (default paths.runs)")
    t.add_argument("--stages", help="comma list of stage ids to run, e.g. 1 or 2,3")
    t.add_argument("--resume", help="start from this checkpoint directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common, infer_flags], help="depth for one video or a corpus directory")
    i.add_argument("--input", required=True, help="video DCRF file or directory with manifest.tsv")
    i.add_argument("--output", required=True, help="depth DCRF file, or directory for directory input")
    i.add_argument("--variant", choices=VARIANTS, help="overrides infer.variant")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="AbsRel / delta1 report")
    e.add_argument("--pred", required=True, help="directory of <id>/depth.dcrf")
    e.add_argument("--gt", required=True, help="directory with manifest.tsv and <id>/metric.dcrf")
    e.add_argument("--output", help="report TSV (default <pred>/report.tsv)")
    e.add_argument("--profile-row", type=int, help="also write temporal profiles of this row as PGM")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate-stitch", parents=[common, infer_flags], help="stitching ablation on the long-video suite")
    a.add_argument("--data", help="long-video suite directory (default <data>/long)")
    a.add_argument("--variant", choices=VARIANTS, help="run one variant only")
    a.add_argument("--output", help="report TSV (default <runs>/ablation/stitch.tsv)")
    a.set_defaults(func=cmd_ablate_stitch)
    return p


def _overrides(args) -> dict:
    o = {}
    for flag, key in (("seed", "run.seed"), ("threads", "run.threads"), ("window", "infer.window"),
                      ("overlap", "infer.overlap"), ("steps", "edm.steps")):
        v = getattr(args, flag, None)
        if v is not None:
            o[key] = v
    if args.command == "infer" and args.variant:
        o["infer.variant"] = args.variant
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = Config.load(args.config, _overrides(args))
        with threadpool_limits(limits=cfg["run.threads"]):
            return args.func(cfg, args)
    except (ConfigError, StageConfigError, PlanError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (DataError, TensorFileError, OSError, ParamsError, CorpusError, ShapeError, SpecError,
            DegenerateSequenceError, InsufficientDataError, DegenerateAlignmentError, EvalConfigError,
            ConditioningError, StitchError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (TrainingError, InferenceError, DomainError, FloatingPointError) as e:
        log.error("%s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
