"""Command-line interface.

Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics as met
from .model import AUX_MODES, PRESETS, ConfigError, ModelConfig
from .simulator import DialogueSpec, TuningError, gen_corpus, load_corpus, read_manifest
from .trainer import (CheckpointError, DivergenceError, TrainConfig, finetune, load_checkpoint,
                      train)

log = logging.getLogger("rxeend")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

EVAL_DEFAULTS = {"threshold": met.DEFAULT_THRESHOLD, "median_window": met.DEFAULT_MEDIAN,
                 "collar": met.DEFAULT_COLLAR}
PATH_DEFAULTS = {"corpus": "", "run_dir": ""}
OVERLAP_BUCKETS = ((0.0, 0.235, "rho_lt_0.235"), (0.235, 0.31, "rho_0.235_to_0.31"), (0.31, 1.01, "rho_ge_0.31"))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        return type(like)(value)
    except ValueError:
        raise UsageError(f"cannot read {value!r} as {type(like).__name__}") from None


def default_sections() -> dict:
    model = asdict(ModelConfig())
    model["lambda"] = model.pop("lam")
    return {"model": model, "train": asdict(TrainConfig()), "eval": dict(EVAL_DEFAULTS),
            "paths": dict(PATH_DEFAULTS)}


def load_run_config(path) -> dict:
    """Sections of ``key = value`` pairs merged over the defaults; unknown keys are rejected."""
    sections = default_sections()
    if path is None:
        return sections
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise OSError(f"{path}: {e.strerror}") from e
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}") from None
    for name in parser.sections():
        if name not in sections:
            raise UsageError(f"{path}: unknown section [{name}]")
        for key, value in parser.items(name):
            if key not in sections[name]:
                raise UsageError(f"{path}: unknown key {key!r} in [{name}]")
            sections[name][key] = _coerce(value, sections[name][key])
    return sections


def render_run_config(sections: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def model_config_from(section: dict) -> ModelConfig:
    d = dict(section)
    d["lam"] = d.pop("lambda")
    return ModelConfig(**d)


# ---------------------------------------------------------------- helpers


def _kv(key, value) -> str:
    if isinstance(value, float):
        return f"{key}={value:.6f}"
    return f"{key}={value}"


def _header(out, command, seed, **extra):
    print(f"# rxeend {command}", file=out)
    print(f"seed={seed}", file=out)
    for k, v in extra.items():
        print(_kv(k, v), file=out)


def _checkpoint_seed(ck) -> int:
    return int(ck.train_config.get("seed", 0))


def _eval_options(args, sections) -> dict:
    ev = dict(sections["eval"])
    for key, flag in (("threshold", "threshold"), ("median_window", "median"), ("collar", "collar")):
        v = getattr(args, flag, None)
        if v is not None:
            ev[key] = v
    if not 0 < ev["threshold"] < 1:
        raise UsageError(f"--threshold must lie in (0, 1), got {ev['threshold']}")
    if ev["median_window"] < 1 or ev["median_window"] % 2 == 0:
        raise UsageError(f"--median must be a positive odd integer, got {ev['median_window']}")
    if ev["collar"] < 0:
        raise UsageError(f"--collar must be >= 0, got {ev['collar']}")
    return ev


def _load_corpus(path):
    if not path:
        raise UsageError("no corpus given (--corpus or [paths] corpus)")
    if not (Path(path) / "manifest.txt").is_file():
        raise OSError(f"{path}: no manifest.txt")
    return load_corpus(path)


def bucket_of(rho: float) -> str:
    for lo, hi, name in OVERLAP_BUCKETS:
        if lo <= rho < hi:
            return name
    return OVERLAP_BUCKETS[-1][2]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, out) -> int:
    if not 0 <= args.overlap < 1:
        raise UsageError(f"--overlap must lie in [0, 1), got {args.overlap}")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    try:
        spec = DialogueSpec(num_speakers=args.speakers, total_frames=args.frames,
                            mean_utt_frames=args.mean_utt, target_overlap=args.overlap,
                            seed=args.seed, noise_std=args.noise, speaker_sig_std=args.sig_std)
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        gen_corpus(args.n, spec, args.out)
    except TuningError as e:
        raise UsageError(str(e)) from None
    _, rows = read_manifest(args.out)
    rhos = np.array([r[3] for r in rows])
    _header(out, "gen-data", args.seed)
    print(_kv("dialogues", len(rows)), file=out)
    print(_kv("frames", args.frames), file=out)
    print(_kv("target_overlap", args.overlap), file=out)
    print(_kv("mean_overlap", float(rhos.mean())), file=out)
    print(_kv("min_overlap", float(rhos.min())), file=out)
    print(_kv("max_overlap", float(rhos.max())), file=out)
    print(_kv("out", args.out), file=out)
    return EXIT_OK


def _apply_train_flags(args, sections):
    model, tr = sections["model"], sections["train"]
    if args.preset:
        model.update(PRESETS[args.preset])
    if args.residual:
        model["residual"] = args.residual == "on"
    if args.aux:
        model["aux_mode"] = args.aux
    for key in ("P", "D", "H", "S"):
        v = getattr(args, key, None)
        if v is not None:
            model[key] = v
    if args.ffn is not None:
        model["ffn_units"] = args.ffn
    if args.lam is not None:
        model["lambda"] = args.lam
    for key in ("epochs", "batch_size", "warmup_steps", "lr_scale", "chunk_frames", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            tr[key] = v
    if args.corpus:
        sections["paths"]["corpus"] = args.corpus
    if args.out:
        sections["paths"]["run_dir"] = args.out


def cmd_train(args, out) -> int:
    sections = load_run_config(args.config)
    _apply_train_flags(args, sections)
    try:
        mc = model_config_from(sections["model"])
        tc = TrainConfig(**sections["train"])
    except (ConfigError, ValueError, TypeError) as e:
        raise UsageError(str(e)) from None
    run_dir = sections["paths"]["run_dir"]
    if not run_dir:
        raise UsageError("no run directory given (--out or [paths] run_dir)")
    corpus = _load_corpus(sections["paths"]["corpus"])
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(f"# seed={tc.seed}\n" + render_run_config(sections), encoding="utf-8")
    _header(out, "train", tc.seed, residual=mc.residual, aux_mode=mc.aux_mode, P=mc.P, D=mc.D, H=mc.H)
    if args.init:
        ck = load_checkpoint(args.init)
        if ck.config != mc:
            raise UsageError("--init checkpoint has a different model config")
        result = finetune(ck, corpus, tc, run_dir=run_dir)
    else:
        result = train(mc, tc, corpus, run_dir=run_dir)
    for epoch, total, diar, aux, val in result.log:
        print(f"epoch={epoch} total={total:.6f} diar={diar:.6f} aux={aux:.6f} val_der={val:.6f}", file=out)
    print(_kv("run_dir", str(run_dir)), file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    sections = load_run_config(args.config)
    ev = _eval_options(args, sections)
    corpus = _load_corpus(args.corpus or sections["paths"]["corpus"])
    if args.oracle:
        seed = args.seed if args.seed is not None else 0
        posts = [d.labels.astype(np.float64) for d in corpus]
        mc = None
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        ck = load_checkpoint(args.checkpoint)
        mc = ck.config
        seed = args.seed if args.seed is not None else _checkpoint_seed(ck)
        posts = met._posteriors_by_block(mc, ck.tensors(), corpus, [mc.P])[mc.P]
    counts = met.score_dialogues(posts, corpus, ev["threshold"], ev["median_window"], ev["collar"])
    _header(out, "eval", seed, threshold=ev["threshold"], median=ev["median_window"], collar=ev["collar"])
    if mc is not None:
        print(_kv("residual", mc.residual), file=out)
        print(_kv("aux_mode", mc.aux_mode), file=out)
        print(_kv("P", mc.P), file=out)
    print(f"{'recording':<14}{'rho':>8}{'DER%':>9}{'MS%':>8}{'FA%':>8}{'CF%':>8}", file=out)
    buckets: dict[str, list] = {}
    for d, c in zip(corpus, counts):
        if c.ref_speech == 0:
            continue
        r = c.report()
        buckets.setdefault(bucket_of(d.measured_overlap), []).append(c)
        print(f"{d.id:<14}{d.measured_overlap:>8.3f}{100 * r.der:>9.2f}{100 * r.miss:>8.2f}"
              f"{100 * r.false_alarm:>8.2f}{100 * r.confusion:>8.2f}", file=out)
    total = met.aggregate(counts)
    for ln in total.as_lines():
        print(ln, file=out)
    for _, _, name in OVERLAP_BUCKETS:
        if name in buckets:
            b = met.aggregate(buckets[name])
            print(f"bucket[{name}].recordings={len(buckets[name])}", file=out)
            print(f"bucket[{name}].DER={b.der:.4f}", file=out)
    return EXIT_OK


def cmd_probe(args, out) -> int:
    sections = load_run_config(args.config)
    ev = _eval_options(args, sections)
    ck = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus or sections["paths"]["corpus"])
    ders = met.probe_blocks(ck.config, ck.tensors(), corpus, ev["threshold"], ev["median_window"], ev["collar"])
    _header(out, "probe", args.seed if args.seed is not None else _checkpoint_seed(ck),
            P=ck.config.P, residual=ck.config.residual, aux_mode=ck.config.aux_mode)
    print(f"{'block':>5} {'DER%':>8}", file=out)
    for p, d in enumerate(ders, 1):
        print(f"{p:>5} {100 * d:>8.2f}", file=out)
    for p, d in enumerate(ders, 1):
        print(f"block[{p}].DER={d:.4f}", file=out)
    return EXIT_OK


def cmd_score(args, out) -> int:
    if args.collar < 0 or args.resolution <= 0:
        raise UsageError("--collar must be >= 0 and --resolution > 0")
    try:
        ref = met.read_segments(args.ref)
        hyp = met.read_segments(args.hyp)
    except met.SegmentFormatError as e:
        raise UsageError(str(e)) from None
    try:
        rep = met.der(ref, hyp, args.collar, args.resolution)
    except met.UndefinedMetricError as e:
        raise UsageError(str(e)) from None
    _header(out, "score", args.seed if args.seed is not None else 0, collar=args.collar)
    for ln in rep.as_lines():
        print(ln, file=out)
    return EXIT_OK


def cmd_dump_embeddings(args, out) -> int:
    ck = load_checkpoint(args.checkpoint)
    if not 1 <= args.block <= ck.config.P:
        raise UsageError(f"--block must lie in 1..{ck.config.P}, got {args.block}")
    corpus = _load_corpus(args.corpus)
    match = [d for d in corpus if d.id == args.recording]
    if not match:
        raise UsageError(f"recording {args.recording!r} not in corpus")
    d = match[0]
    E = met.dump_embeddings(ck.config, ck.tensors(), d.features, args.block, args.out, d.labels)
    _header(out, "dump-embeddings", args.seed if args.seed is not None else _checkpoint_seed(ck),
            recording=d.id, block=args.block)
    print(_kv("rows", E.shape[0]), file=out)
    print(_kv("dim", E.shape[1]), file=out)
    print(_kv("out", args.out), file=out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rxeend", description="SA/RX-EEND toolkit on synthetic dialogues")
    ap.add_argument("--dump-defaults", action="store_true", help="print the default run config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="simulate a dialogue corpus")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--overlap", type=float, default=0.34)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--speakers", type=int, default=2)
    g.add_argument("--mean-utt", type=float, default=DialogueSpec.mean_utt_frames)
    g.add_argument("--noise", type=float, default=DialogueSpec.noise_std)
    g.add_argument("--sig-std", type=float, default=DialogueSpec.speaker_sig_std)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train SA/RX-EEND")
    t.add_argument("--config")
    t.add_argument("--corpus")
    t.add_argument("--out", help="run directory")
    t.add_argument("--init", help="checkpoint to finetune from")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--residual", choices=("on", "off"))
    t.add_argument("--aux", choices=AUX_MODES)
    t.add_argument("--lambda", dest="lam", type=float)
    for key in ("P", "D", "H", "S"):
        t.add_argument(f"--{key}", type=int)
    t.add_argument("--ffn", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--warmup", dest="warmup_steps", type=int)
    t.add_argument("--lr-scale", dest="lr_scale", type=float)
    t.add_argument("--chunk", dest="chunk_frames", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def eval_flags(p):
        p.add_argument("--config")
        p.add_argument("--corpus")
        p.add_argument("--threshold", type=float)
        p.add_argument("--median", type=int)
        p.add_argument("--collar", type=float)
        p.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="decode and score a corpus")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the reference labels as hypothesis")
    eval_flags(e)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="per-block DER")
    pr.add_argument("--checkpoint", required=True)
    eval_flags(pr)
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("score", help="DER between two segment files")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float, default=met.DEFAULT_COLLAR)
    s.add_argument("--resolution", type=float, default=met.DEFAULT_RESOLUTION)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_score)

    d = sub.add_parser("dump-embeddings", help="export block embeddings of one recording")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--recording", required=True)
    d.add_argument("--block", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_dump_embeddings)
    return ap


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        out.write(render_run_config(default_sections()))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, out)
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"rxeend {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"rxeend {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as e:
        print(f"rxeend {args.command}: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
