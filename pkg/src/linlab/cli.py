"""Command-line entry point: datagen, train, eval, separate, roundtrip.

Exit codes: 0 success, 2 usage or bad input, 3 numerical failure, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as C
from . import data as D
from . import dsp
from . import metrics as Mt
from . import trainer as T

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("linlab")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _env_seed(default: int = 0) -> int:
    env = os.environ.get("LINLAB_SEED")
    return int(env) if env not in (None, "") else default


def _make_codec(name: str, checkpoint, window=None, sample_rate=None, factor: int = 4):
    if name == "cae":
        if checkpoint is None:
            raise CliError(EXIT_USAGE, "--checkpoint is required for the cae codec")
        if not Path(checkpoint).exists():
            raise CliError(EXIT_MISSING, f"checkpoint not found: {checkpoint}")
        try:
            return C.cae_codec(checkpoint, sample_rate=sample_rate)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from exc
    kwargs = {"factor": factor}
    if window is not None:
        kwargs["window"] = window
    if sample_rate is not None:
        kwargs["sample_rate"] = sample_rate
    if name == "linear-ref":
        return C.linear_reference_codec(**kwargs)
    return C.nonlinear_control_codec(**kwargs)


def _load_corpus(path) -> D.Corpus:
    if not (Path(path) / "index.json").exists():
        raise CliError(EXIT_MISSING, f"no corpus at {path}")
    try:
        return D.load_corpus(path)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"corpus unreadable: {exc}") from exc


def _read_wav(path, rate=None):
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"file not found: {path}")
    try:
        return D.load_wav(path, rate)
    except D.WavError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------- commands

def cmd_datagen(args) -> int:
    if args.manifest:
        try:
            manifest = D.CorpusManifest.from_dict(json.loads(Path(args.manifest).read_text()))
        except FileNotFoundError as exc:
            raise CliError(EXIT_MISSING, f"manifest not found: {args.manifest}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_USAGE, f"invalid manifest: {exc}") from exc
    else:
        manifest = D.generate_manifest(args.n_tracks, args.n_sources, seed=_env_seed(args.seed))
    index = D.make_corpus(manifest, args.out)
    print(f"wrote {len(manifest.tracks)} tracks to {index.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = T.load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, f"config not found: {args.config}") from exc
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from exc
    if args.steps is not None:
        try:
            cfg = replace(cfg, schedule=replace(cfg.schedule, total_steps=args.steps))
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"--steps {args.steps}: {exc}") from exc
    corpus = _load_corpus(args.corpus)
    clips = corpus.clips(cfg.corpus.use_mixes, cfg.corpus.use_sources)
    if args.resume and not Path(args.resume).exists():
        raise CliError(EXIT_MISSING, f"resume checkpoint not found: {args.resume}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    latent_gain, latent_sum = T.VARIANTS[args.variant]
    _dump(out / "config.json", {"config": cfg.to_dict(), "variant": args.variant,
                                "augment_wiring": {"latent_gain": latent_gain, "latent_sum": latent_sum},
                                "corpus": str(args.corpus), "n_clips": int(len(clips))})
    try:
        ckpt = T.train(cfg, clips, out, args.variant, resume=args.resume, progress_every=args.progress)
    except T.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = _load_corpus(args.corpus)
    codec = _make_codec(args.codec, args.checkpoint, sample_rate=corpus.sample_rate, factor=args.factor)
    cfg = Mt.EvalConfig(overlap_seconds=args.overlap, seed=_env_seed(args.seed),
                        signed_gains=args.signed_gains, separation=not args.no_separation)
    report = Mt.evaluate_suite(codec, corpus, cfg, extra_meta={"command": "eval", "corpus_tracks": len(corpus.tracks)})
    path, csv_path = Mt.write_report(report, args.out)
    agg = report["aggregate"]
    for k in sorted(agg):
        if isinstance(agg[k], float):
            print(f"{k:16s} {agg[k]: .4f}")
    if args.compare:
        if not Path(args.compare).exists():
            raise CliError(EXIT_MISSING, f"comparison report not found: {args.compare}")
        other = json.loads(Path(args.compare).read_text())
        deltas = Mt.compare_reports(report, other)
        _dump(path.with_suffix(".compare.json"), {"a": str(path), "b": str(args.compare), "metrics": deltas})
        for k, d in sorted(deltas.items()):
            print(f"delta {k:16s} {d['delta']: .4f}")
    return EXIT_OK


def cmd_separate(args) -> int:
    mix, rate = _read_wav(args.mix)
    accs = [_read_wav(p, rate)[0] for p in args.accompaniments]
    if any(len(a) != len(mix) for a in accs):
        raise CliError(EXIT_USAGE, "accompaniments must match the mix length")
    sources = [_read_wav(p, rate)[0] for p in (args.sources or [])]
    if sources and len(sources) != len(accs):
        raise CliError(EXIT_USAGE, "give one ground-truth source per accompaniment")
    if any(len(s) != len(mix) for s in sources):
        raise CliError(EXIT_USAGE, "sources must match the mix length")
    codec = _make_codec(args.codec, args.checkpoint, sample_rate=rate, factor=args.factor)
    seed = _env_seed(args.seed)
    overlap = dsp.seconds_to_samples(args.overlap, rate)
    tc = Mt.TrackCoder(codec, overlap)
    estimates = Mt.separate(tc, mix, accs, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, est in enumerate(estimates):
        D.save_wav(out / f"estimate_{i}.wav", est, rate)
    if sources:
        scores = Mt.score_separation(tc, estimates, sources, seed)
        _dump(out / "scores.json", {"meta": {"codec": codec.descriptor(), "seed": seed,
                                             "overlap_samples": overlap,
                                             "mix": str(args.mix)},
                                    "scores": scores})
        for i, s in enumerate(scores):
            print(f"source {i}: si_sdr {s['si_sdr']:.3f} dB  mss {s['mss']:.4f}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    x, rate = _read_wav(args.inp)
    codec = _make_codec(args.codec, args.checkpoint, sample_rate=rate, factor=args.factor)
    overlap = dsp.seconds_to_samples(args.overlap, rate)
    tc = Mt.TrackCoder(codec, overlap)
    seed = _env_seed(args.seed)
    y = tc.decode(tc.encode(x), len(x), seed)
    D.save_wav(args.out, y, rate)
    print(f"snr_db {Mt.snr(x, y):.4f}")
    print(f"mss {Mt.mss(x, y, rate):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="synthesize a multi-source corpus")
    g.add_argument("--manifest", help="manifest JSON (default: generated)")
    g.add_argument("--out", required=True)
    g.add_argument("--n-tracks", type=int, default=64)
    g.add_argument("--n-sources", type=int, default=2, choices=[1, 2, 3, 4])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="consistency training of one variant")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--variant", choices=list(T.VARIANTS), default="lin")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--progress", type=int, default=0, help="log every N steps")
    t.set_defaults(func=cmd_train)

    def codec_args(q, checkpoint_required=False):
        q.add_argument("--checkpoint", required=checkpoint_required)
        q.add_argument("--codec", choices=["cae", "linear-ref", "nonlinear-ctl"], default="cae")
        q.add_argument("--factor", type=int, default=4, help="reference codec block size")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--overlap", type=float, default=0.03, help="chunk overlap in seconds")

    e = sub.add_parser("eval", help="run the metric suite")
    codec_args(e)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--compare")
    e.add_argument("--signed-gains", action="store_true")
    e.add_argument("--no-separation", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("separate", help="oracle separation by latent subtraction")
    codec_args(s)
    s.add_argument("--mix", required=True)
    s.add_argument("--accompaniments", nargs="+", required=True)
    s.add_argument("--sources", nargs="+", help="ground truth, one per accompaniment")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    r = sub.add_parser("roundtrip", help="encode and decode one file")
    codec_args(r)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roundtrip)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
