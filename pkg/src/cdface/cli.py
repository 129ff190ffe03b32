"""Command-line entry point: ``cdface <command> [flags]``.

Exit codes: 0 success, 1 contract violation, 2 I/O or configuration error.
The corpus location defaults to ``$CDFACE_DATA_ROOT``.
"""

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from cdface import metrics
from cdface.audio import align_to_motion, extract_features, providers
from cdface.container import read_container, read_manifest, write_container
from cdface.corpus import Corpus, generate_corpus, load_clip, dump_summary
from cdface.errors import ConfigError, ContainerError, ContractViolation
from cdface.geometry import split_regions
from cdface.trainer import (
    Checkpoint,
    TrainConfig,
    clip_metrics,
    evaluate,
    load_model,
    rollout,
    set_determinism,
    summarize,
    train_prior,
    train_query,
)

log = logging.getLogger("cdface")

DATA_ROOT_ENV = "CDFACE_DATA_ROOT"
EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
DEFAULT_STYLE = 0  # training style used for audio of unseen speakers


def _corpus_root(args) -> Path:
    root = args.corpus or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no corpus given: pass --corpus or set {DATA_ROOT_ENV}")
    return Path(root)


def _load_config(args, stage: str) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {"stage": stage}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return dataclasses.replace(cfg, **changes)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def save_motion(path, offsets, fps: float, **meta) -> Path:
    """One motion file: a container with ``offsets`` (T x 3V) plus optional tracks."""
    arrays = {"offsets": np.asarray(offsets)}
    for key in ("lip", "lip_codes", "upper_codes"):
        if meta.get(key) is not None:
            arrays[key] = np.asarray(meta.pop(key))
        meta.pop(key, None)
    return write_container(path, arrays, {"kind": "motion", "fps": float(fps), **meta})


# --------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    out = Path(args.out) if args.out else _corpus_root(args)
    corpus = generate_corpus(
        out,
        seed=args.seed,
        num_styles=args.styles,
        num_sentences=args.sentences,
        num_vertices=args.vertices,
        fps=args.fps,
        epsilon=args.epsilon,
        feature_dim=args.feature_dim,
        test_fraction=args.test_fraction,
    )
    print(dump_summary(corpus))
    return EXIT_OK


def cmd_train_prior(args) -> int:
    cfg = _load_config(args, "prior")
    set_determinism(cfg.seed)
    corpus = Corpus.load(_corpus_root(args))
    regions = ("lip", "upper") if args.region == "both" else (args.region,)
    out = Path(args.out)
    for region in regions:
        resume = Checkpoint.load(args.resume) if args.resume else None
        log_path = Path(args.log).with_suffix(f".{region}.jsonl") if args.log else None
        ck = train_prior(cfg, corpus, region, log_path=log_path, resume=resume, epochs=args.epochs)
        path = ck.save(out / f"prior_{region}")
        print(f"{region} prior: epoch {ck.epoch}, loss {ck.log_tail[-1]['total']:.6g}, "
              f"tokens used {ck.extra['tokens_used']} -> {path}")
    return EXIT_OK


def cmd_train_query(args) -> int:
    cfg = _load_config(args, "query")
    corpus = Corpus.load(_corpus_root(args))
    lip, upper = Checkpoint.load(args.lip_prior), Checkpoint.load(args.upper_prior)
    ck = train_query(cfg, corpus, lip, upper, log_path=args.log)
    path = ck.save(args.out)
    print(f"query checkpoint ({cfg.query_mode}, N^l={cfg.n_lip}, N^u={cfg.n_upper}) -> {path}")
    return EXIT_OK


def _audio_track(args, corpus: Corpus):
    """Aligned T x d_a features plus the frame rate and (if known) the clip."""
    if args.provider == "synthetic":
        clip = load_clip(args.audio) if Path(args.audio).is_dir() else corpus.clip(args.audio)
        seq = extract_features(clip, "synthetic", corpus.feature_dim)
        return align_to_motion(seq, clip.motion.fps, clip.num_frames), clip.motion.fps, clip
    seq = extract_features(args.audio, args.provider, corpus.feature_dim)
    fps = args.fps or corpus.fps
    frames = int(round(seq.duration * fps))
    return align_to_motion(seq, fps, frames), fps, None


def _style(args, clip) -> int:
    if args.style is not None:
        return args.style
    if clip is None:
        log.info("audio is not a corpus clip; using the default style %d", DEFAULT_STYLE)
        return DEFAULT_STYLE
    return clip.style


def _diversity_report(samples, corpus: Corpus, **extra) -> metrics.MetricReport:
    part = corpus.partition
    rep = metrics.MetricReport(sample_count=int(samples.shape[0]), partition=part.to_dict(), extra=extra)
    if samples.shape[0] >= 2:
        rep.add("APD", metrics.apd(samples))
        rep.add("UPD", metrics.upd(samples, part))
        rep.add("LPD", metrics.lpd(samples, part))
        rep.add("MPD", metrics.mpd(samples))
    else:
        for name in ("APD", "UPD", "LPD", "MPD"):
            rep.add(name, 0.0)
    return rep


def cmd_synthesize(args) -> int:
    set_determinism(args.seed)
    corpus = Corpus.load(_corpus_root(args))
    model = load_model(Checkpoint.load(args.checkpoint))
    audio, fps, clip = _audio_track(args, corpus)
    style = _style(args, clip)
    res = rollout(model, audio, style, args.nl, args.nu, partition=corpus.partition)
    out = Path(args.out)
    files = []
    for k, (i, j) in enumerate(res["lineage"]):
        path = save_motion(
            out / f"sample_{i}_{j}",
            res["full"][k],
            fps,
            style=style,
            lineage=[i, j],
            lip=res["lip"][i],
            lip_codes=res["lip_codes"][i],
            upper_codes=res["upper_codes"][i, j],
        )
        files.append(path.name)
    rep = _diversity_report(res["full"], corpus, style=style, files=files)
    _write_text(out / "metrics.json", rep.to_json() + "\n")
    print(f"wrote {len(files)} motion files to {out}")
    print(rep.to_table(), end="")
    return EXIT_OK


def _fixed_lip(args, model, audio, style, corpus: Corpus) -> np.ndarray:
    src = args.fix_lip_from
    if src.isdigit():
        idx = int(src)
        if idx >= model.cfg.n_lip:
            raise ContractViolation(f"lip sample {idx} requested, model has {model.cfg.n_lip} lip heads")
        return rollout(model, audio, style, idx + 1, 1)["lip"][idx]
    arrays, _ = read_container(src)
    if "lip" in arrays:
        return arrays["lip"]
    if "lip_codes" in arrays:
        codes = torch.from_numpy(arrays["lip_codes"])[None]
        with torch.no_grad():
            return model.priors["lip"].decode(codes)[0].numpy()
    if "offsets" in arrays:
        return split_regions(arrays["offsets"], corpus.partition)[0].offsets
    raise ContainerError(f"{src}: no lip track, lip codes or offsets inside")


def cmd_control(args) -> int:
    set_determinism(args.seed)
    corpus = Corpus.load(_corpus_root(args))
    model = load_model(Checkpoint.load(args.checkpoint))
    audio, fps, clip = _audio_track(args, corpus)
    style = _style(args, clip)
    lip = np.asarray(_fixed_lip(args, model, audio, style, corpus), dtype=np.float32)
    res = rollout(model, audio, style, n_upper=args.nu, fixed_lip=lip, partition=corpus.partition)
    samples = res["full"]
    rep = _diversity_report(samples, corpus, style=style, fixed_lip=args.fix_lip_from)
    if rep.values["LPD"] != 0.0:
        raise ContractViolation(f"control outputs do not share the lip track (LPD={rep.values['LPD']!r})")
    out = Path(args.out)
    for j in range(samples.shape[0]):
        save_motion(out / f"control_{j}", samples[j], fps, style=style, lineage=[0, j], lip=lip,
                    upper_codes=res["upper_codes"][0, j])
    _write_text(out / "metrics.json", rep.to_json() + "\n")
    print(f"wrote {samples.shape[0]} motion files sharing one lip track to {out} (LPD=0.0)")
    print(rep.to_table(), end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    set_determinism(args.seed)
    corpus = Corpus.load(_corpus_root(args))
    if args.ground_truth:
        clips = list(corpus.clips(args.split))
        if not clips:
            raise ContractViolation(f"split {args.split!r} has no clips")
        per_clip = {c.name: clip_metrics(c.motion.offsets[None], c, corpus) for c in clips}
        rep = summarize(per_clip, 1, corpus, split=args.split, control=False, ground_truth=True)
        curves = {c.name: metrics.aperture_curves(c.motion.offsets[None], corpus.template, corpus.partition)
                  for c in clips}
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --ground-truth)")
        model = load_model(Checkpoint.load(args.checkpoint))
        rep, curves = evaluate(model, corpus, args.split, args.nl, args.nu, control=args.control,
                               workers=args.workers)
    out = Path(args.out)
    _write_text(out / "metrics.json", rep.to_json() + "\n")
    _write_text(out / "metrics.csv", rep.to_table())
    write_container(out / "aperture_curves", curves, {"kind": "aperture-curves", "fps": corpus.fps})
    print(rep.to_table(), end="")
    return EXIT_OK


def _epoch_records(src: Path) -> list:
    if src.is_dir():
        return list(read_manifest(src)["meta"].get("log_tail", []))
    records = []
    for line in src.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec.get("kind", "epoch") == "epoch":
                records.append(rec)
    return records


def _records_table(records: list) -> str:
    keys = []
    for rec in records:
        keys.extend(k for k in rec if k not in keys and k != "kind")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for rec in records:
        w.writerow([rec.get(k, "") for k in keys])
    return buf.getvalue()


def cmd_report(args) -> int:
    out = Path(args.out)
    written = []
    if args.metrics:
        reports = {}
        for src in args.metrics:
            try:
                reports[src] = metrics.MetricReport.from_dict(json.loads(Path(src).read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"cannot read metric report {src}: {exc}") from exc
        names = sorted({k for r in reports.values() for k in r.values})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "unit", *reports])
        for name in names:
            unit = next(r.units[name] for r in reports.values() if name in r.units)
            w.writerow([name, unit, *(repr(r.values[name]) if name in r.values else "" for r in reports.values())])
        _write_text(out / "metrics.csv", buf.getvalue())
        written.append("metrics.csv")
    for src in args.curves or ():
        arrays, meta = read_container(src)
        # evaluate writes <run>/aperture_curves, so the run directory names the table
        tag = Path(src).resolve().parent.name
        for clip, curve in sorted(arrays.items()):
            name = f"aperture_{tag}_{clip}.csv"
            _write_text(out / name, metrics.curves_table(curve, meta.get("fps")))
            written.append(name)
    for src in args.logs or ():
        src = Path(src)
        name = f"loss_{src.name.split('.')[0]}.csv"
        _write_text(out / name, _records_table(_epoch_records(src)))
        written.append(name)
    if not written:
        raise ConfigError("report needs at least one of --metrics, --curves, --logs")
    for name in written:
        print(out / name)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdface", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def corpus_flag(sp):
        sp.add_argument("--corpus", help=f"corpus directory (default: ${DATA_ROOT_ENV})")

    def seed_flag(sp, default=0):
        sp.add_argument("--seed", type=int, default=default, help=f"random seed (default: {default})")

    g = sub.add_parser("gen-corpus", help="generate the synthetic phoneme corpus")
    g.add_argument("--out", help=f"output directory (default: ${DATA_ROOT_ENV})")
    corpus_flag(g)
    seed_flag(g)
    g.add_argument("--styles", type=int, default=2, help="number of speaking styles (default: 2)")
    g.add_argument("--sentences", type=int, default=20, help="number of sentences (default: 20)")
    g.add_argument("--vertices", type=int, default=30, help="mesh vertex count (default: 30)")
    g.add_argument("--fps", type=float, default=25.0, help="motion frame rate (default: 25)")
    g.add_argument("--epsilon", type=float, default=0.01, help="lip closure threshold (default: 0.01)")
    g.add_argument("--feature-dim", type=int, default=16, help="audio feature width (default: 16)")
    g.add_argument("--test-fraction", type=float, default=0.2, help="held-out sentence fraction (default: 0.2)")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-prior", help="train the lip and/or upper-face VQ priors")
    corpus_flag(t)
    t.add_argument("--config", help="training config JSON (default: built-in defaults)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--region", choices=("lip", "upper", "both"), default="both", help="region(s) to train")
    t.add_argument("--out", required=True, help="directory receiving prior_<region> checkpoints")
    t.add_argument("--log", help="JSONL log path stem; one file per region")
    t.add_argument("--resume", help="prior checkpoint to continue from (single region)")
    t.add_argument("--epochs", type=int, help="epochs to run (default: config prior_epochs, or all when resuming)")
    t.set_defaults(func=cmd_train_prior)

    q = sub.add_parser("train-query", help="train the lip and upper-face code queriers on frozen priors")
    corpus_flag(q)
    q.add_argument("--config", help="training config JSON (default: built-in defaults)")
    q.add_argument("--seed", type=int, help="override the config seed")
    q.add_argument("--lip-prior", required=True, help="lip prior checkpoint")
    q.add_argument("--upper-prior", required=True, help="upper-face prior checkpoint")
    q.add_argument("--out", required=True, help="output checkpoint directory")
    q.add_argument("--log", help="JSONL training log path")
    q.set_defaults(func=cmd_train_query)

    def synth_flags(sp):
        corpus_flag(sp)
        seed_flag(sp)
        sp.add_argument("--checkpoint", required=True, help="query checkpoint")
        sp.add_argument("--audio", required=True,
                        help="corpus clip name or clip directory (synthetic provider), or feature container")
        sp.add_argument("--provider", choices=providers(), default="synthetic", help="audio feature provider")
        sp.add_argument("--fps", type=float, help="output frame rate for non-clip audio (default: corpus fps)")
        sp.add_argument("--style", type=int, help=f"style id (default: the clip's own style, else {DEFAULT_STYLE})")
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synthesize", help="roll out N^l x N^u diverse full-face samples")
    synth_flags(s)
    s.add_argument("--nl", type=int, help="lip samples (default: all lip heads)")
    s.add_argument("--nu", type=int, help="upper-face samples per lip sample (default: all upper heads)")
    s.set_defaults(func=cmd_synthesize)

    c = sub.add_parser("control", help="fix one lip track and re-query the upper face")
    synth_flags(c)
    c.add_argument("--fix-lip-from", required=True,
                   help="lip sample index to roll out, or a container holding lip, lip_codes or offsets")
    c.add_argument("--nu", type=int, help="upper-face samples (default: all upper heads)")
    c.set_defaults(func=cmd_control)

    e = sub.add_parser("evaluate", help="full metric battery against corpus ground truth")
    corpus_flag(e)
    seed_flag(e)
    e.add_argument("--checkpoint", help="query checkpoint")
    e.add_argument("--split", choices=("train", "test", "all"), default="test", help="corpus split (default: test)")
    e.add_argument("--nl", type=int, help="lip samples (default: all lip heads)")
    e.add_argument("--nu", type=int, help="upper samples per lip sample (default: all upper heads)")
    e.add_argument("--control", action="store_true", help="share one lip track across the upper samples")
    e.add_argument("--ground-truth", action="store_true", help="score the ground truth against itself")
    e.add_argument("--workers", type=int, default=1, help="clips evaluated in parallel (default: 1)")
    e.add_argument("--out", required=True, help="output directory for metrics and aperture curves")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge metric tables and emit aperture and loss curve tables")
    r.add_argument("--metrics", nargs="*", help="metrics.json files to merge into one table")
    r.add_argument("--curves", nargs="*", help="aperture_curves containers written by evaluate")
    r.add_argument("--logs", nargs="*", help="JSONL training logs or checkpoints (their epoch log tail)")
    r.add_argument("--out", required=True, help="output directory for CSV tables")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"cdface: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConfigError, ContainerError, OSError) as exc:
        print(f"cdface: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
