"""``weakclick`` command-line front end.

Exit codes: 0 success, 2 bad arguments or configuration, 3 data error,
4 numeric failure (NaN/inf during training).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .audio import AudioFormatError
from .dataset import DurationClass, ManifestError
from .evaluate import EvaluationError
from .fileio import FormatError
from .pipeline import ConfigError, DataError, PipelineConfig
from .tcn import NumericError
from .vae import InputKind

log = logging.getLogger("weakclick")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value defaults (default: ./pipeline.cfg if present)")
    p.add_argument("--seed", type=int, help="global seed (fallback: config, then CKT_SEED, then 0)")
    p.add_argument("--jobs", type=int, help="worker processes for per-file stages")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="weakclick", description="Weak-label click-train classification pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    p = cmd("synth", "generate a labelled synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-pos", type=int)
    p.add_argument("--n-neg", type=int)
    p.add_argument("--duration", choices=[d.value for d in DurationClass])

    p = cmd("split", "balanced stratified train/test manifests next to the input manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--holdout", type=float, help="fraction held out for testing")

    p = cmd("prepare", "DC removal, resampling and band-pass of every recording")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("detect", "run the transient detector over prepared segments")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("clips", "cut transient and noise clips into a clip corpus")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clip-len", type=int, action="append", choices=[512, 2048, 32768])

    p = cmd("train-vae", "train a VAE on a clip corpus")
    p.add_argument("--clips", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint stem (writes .json, .mdl, .trace.json)")
    p.add_argument("--kind", choices=[k.value for k in InputKind])
    p.add_argument("--latent", type=int)
    p.add_argument("--epochs", type=int)

    p = cmd("embed", "per-window VAE embeddings of every recording")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=Path, help="clip corpus; also writes the standardiser's clip features")

    p = cmd("features", "per-window handcrafted features of every recording")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--combo")
    p.add_argument("--window", type=int, choices=[512, 2048])
    p.add_argument("--clips", type=Path, help="clip corpus; also writes the standardiser's clip features")

    p = cmd("train-tcn", "train the recording classifier")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--sequences", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint stem (writes .json, .mdl, .trace.json)")
    p.add_argument("--epochs", type=int)

    p = cmd("predict", "classify recordings with a trained TCN")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--sequences", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("evaluate", "recall/FPR report of predictions against a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model-id", default="")

    p = cmd("compare", "comparison CSV and SVG plots over report files")
    p.add_argument("--reports", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _pick(value, default):
    return default if value is None else value


def run(args: argparse.Namespace) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {cfg.jobs}")
    c = args.command
    if c == "synth":
        man = pipeline.run_synth(args.out, _pick(args.n_pos, cfg.synth_n_pos), _pick(args.n_neg, cfg.synth_n_neg),
                                 _pick(args.duration, cfg.synth_duration), cfg.seed, cfg.jobs)
        print(f"wrote {len(man.entries)} recordings and manifest.csv to {args.out}")
    elif c == "split":
        frac = _pick(args.holdout, cfg.holdout_fraction)
        train, test = pipeline.run_split(args.manifest, 1.0 - frac, cfg.seed)
        print(f"train.csv: {len(train.entries)} entries, test.csv: {len(test.entries)} entries")
    elif c == "prepare":
        print(f"prepared {pipeline.run_prepare(args.manifest, args.out, cfg)} recordings")
    elif c == "detect":
        print(f"{pipeline.run_detect(args.manifest, args.prepared, args.out, cfg)} detections")
    elif c == "clips":
        lengths = args.clip_len or [int(x) for x in cfg.clip_lengths.split(",") if x.strip()]
        sizes = pipeline.run_clips(args.manifest, args.prepared, args.detections, args.out, lengths, cfg)
        print(", ".join(f"{n}: {k} clips" for n, k in sizes.items()))
    elif c == "train-vae":
        res = pipeline.run_train_vae(args.clips, args.out, _pick(args.kind, cfg.vae_kind),
                                     _pick(args.latent, cfg.vae_latent), cfg, args.epochs,
                                     progress=lambda r: log.info("vae epoch %(epoch)d loss %(loss).6g", r))
        print(f"final loss {res.trace[-1]['loss']:.6g} after {len(res.trace)} epochs")
    elif c == "embed":
        print(f"embedded {pipeline.run_embed(args.manifest, args.prepared, args.model, args.out, cfg, args.clips)}"
              " recordings")
    elif c == "features":
        n = pipeline.run_features(args.manifest, args.prepared, args.out, _pick(args.combo, cfg.combo),
                                  _pick(args.window, cfg.window), cfg, args.clips)
        print(f"extracted {n} sequences")
    elif c == "train-tcn":
        res = pipeline.run_train_tcn(args.manifest, args.sequences, args.out, cfg, args.epochs,
                                     progress=lambda r: log.info("tcn %s", r))
        best = res.trace[res.best_epoch]
        print(f"best epoch {res.best_epoch}: val loss {best.val_loss:.4f}, recall {best.val_recall:.3f}, "
              f"fpr {best.val_fpr:.3f}")
    elif c == "predict":
        preds = pipeline.run_predict(args.manifest, args.sequences, args.model, args.out, cfg)
        print(f"{len(preds)} predictions, {sum(p.pred for p in preds)} positive")
    elif c == "evaluate":
        rep = pipeline.run_evaluate(args.manifest, args.predictions, args.out, args.model_id)
        o = rep.overall
        print(f"recall {o.recall:.3f} (TP {o.TP}/{o.P}), fpr {o.fpr:.3f} (FP {o.FP}/{o.N})")
    elif c == "compare":
        written = pipeline.run_compare(args.reports, args.out)
        print("wrote " + ", ".join(str(p) for p in written.values()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"weakclick: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"weakclick: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ManifestError, EvaluationError, FormatError, AudioFormatError, FileNotFoundError,
            ValueError) as e:
        print(f"weakclick: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
