"""Command-line interface.

Subcommands: ingest, train, generate, evaluate, features.  Every command
that samples or trains takes a seed and is byte-reproducible given the same
arguments.  DGFM_THREADS caps the worker pool (default: logical cores).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .audio import read_wav, stft_features
from .tensorfile import save_tensor


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgfm",
        description="Music- and genre-conditioned dance motion generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats-out", default=None,
                   help="where to persist normalization stats "
                        "(default: norm_stats.dgfm next to the manifest)")
    p.add_argument("--genre-dir", default=None,
                   help="directory of <genre>.dgfm text embeddings")
    p.add_argument("--stub-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("generate", help="generate motion for a music file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--genre", required=True)
    p.add_argument("--seconds", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stub-embeddings", type=int, default=None,
                   help="seed for the stub embedding provider")
    p.add_argument("--w2c", default=None,
                   help="precomputed (T, 512) audio embedding file")
    p.add_argument("--genre-emb", default=None,
                   help="precomputed 512-dim genre embedding file")
    p.add_argument("--guidance", type=float, default=2.7)
    p.add_argument("--bvh", action="store_true")
    p.add_argument("--skeleton", default=None)

    p = sub.add_parser("evaluate", help="score generated vs reference motion")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skeleton", default=None)

    p = sub.add_parser("features", help="extract STFT features from a WAV")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "ingest":
        from pathlib import Path
        stats_out = args.stats_out
        if stats_out is None:
            stats_out = Path(args.manifest).parent / "norm_stats.dgfm"
        dataset = pipeline.ingest(args.manifest, args.genre_dir,
                                  stub_seed=args.stub_seed,
                                  stats_out=stats_out)
        print(f"ok: {len(dataset.train_windows)} train / "
              f"{len(dataset.test_windows)} test windows, "
              f"genres: {', '.join(dataset.genres)}")
        print(f"normalization stats written to {stats_out}")
    elif args.command == "train":
        config = pipeline.TrainConfig.from_json(args.config)
        out = pipeline.train(config, args.out, log_path=args.log,
                             resume=args.resume)
        print(f"checkpoint written to {out}")
    elif args.command == "generate":
        request = pipeline.GenerationRequest(
            audio=args.audio, genre=args.genre, seconds=args.seconds,
            seed=args.seed, out=args.out, stub_embeddings=args.stub_embeddings,
            w2c=args.w2c, genre_embedding=args.genre_emb, bvh=args.bvh,
            skeleton=args.skeleton, guidance_w=args.guidance)
        out = pipeline.generate(request, args.ckpt)
        print(f"motion written to {out}")
    elif args.command == "evaluate":
        report = pipeline.evaluate(args.generated, args.reference, args.audio,
                                   skeleton=args.skeleton)
        pipeline.write_report(report, args.out)
        print(report.text_report(), end="")
    elif args.command == "features":
        feats = stft_features(read_wav(args.audio), allow_resample=True)
        save_tensor(args.out, feats.frames)
        print(f"{feats.frames.shape[0]}x{feats.frames.shape[1]} features "
              f"written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
