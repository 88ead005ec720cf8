"""Command-line entry points: gen, train, separate, eval, gradcheck.

Every flag can also be given in a ``key = value`` config file (``--config``),
keys being the flag names with dashes or underscores; flags on the command
line override the file.  Exit codes: 0 success, 1 usage error, 2 data or
format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# config files -----------------------------------------------------------------------------
def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys are normalized to underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], sub: argparse.ArgumentParser,
                  args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in read_config(args.config).items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r}")
        act = actions[key]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            flag = value.lower() in ("1", "true", "yes", "on")
            if value.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise UsageError(f"{args.config}: {key} expects a boolean, got {value!r}")
            defaults[key] = flag if isinstance(act, argparse._StoreTrueAction) else not flag
        else:
            try:
                defaults[key] = act.type(value) if act.type else value
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {value!r}") from exc
            if act.choices is not None and defaults[key] not in act.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(act.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# run configuration --------------------------------------------------------------------------
@dataclass
class RunConfig:
    preset: str
    train: "object"
    out_dir: Path
    manifest: Path | None = None
    synthetic: "object | None" = None
    film: bool = True

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise UsageError("exactly one data source: --manifest or --synthetic")


def _corpus_config(args):
    from .data import CorpusConfig

    return CorpusConfig(n_train_speakers=args.n_train_speakers, n_test_speakers=args.n_test_speakers,
                        n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test,
                        duration_s=args.duration, n_sources=args.n_sources, noisy=args.noisy,
                        seed=args.seed)


def _add_corpus_flags(p):
    p.add_argument("--n-sources", type=int, default=2)
    p.add_argument("--n-train-speakers", type=int, default=10)
    p.add_argument("--n-test-speakers", type=int, default=4)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--duration", type=float, default=4.0, help="seconds per example")
    p.add_argument("--noisy", action="store_true", help="add pink noise at 0-10 dB SNR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wavesplit", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = subs.add_parser("gen", help="write the synthetic corpus as WAVs plus manifest.tsv")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.add_argument("--config")
    _add_corpus_flags(g)

    t = subs.add_parser("train", help="train a model")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--manifest")
    src.add_argument("--synthetic", action="store_true", help="generate the corpus in memory")
    t.add_argument("--out")
    t.add_argument("--preset", choices=["desk", "paper"], default="desk")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--window", type=float, default=1.0, help="training window in seconds")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--loss", choices=["distance", "local", "global"], default="global")
    t.add_argument("--no-film", action="store_true", help="additive conditioning instead of FiLM")
    t.add_argument("--no-dropout", action="store_true")
    t.add_argument("--no-mixup", action="store_true")
    t.add_argument("--no-noise", action="store_true")
    t.add_argument("--no-embed-reg", action="store_true")
    t.add_argument("--dynamic-mixing", action="store_true")
    t.add_argument("--valid-every", type=int, default=500)
    t.add_argument("--valid-examples", type=int, default=None)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--grad-clip", type=float, default=None)
    t.add_argument("--config")
    _add_corpus_flags(t)

    s = subs.add_parser("separate", help="separate one mixture WAV")
    s.add_argument("--in", dest="input")
    s.add_argument("--ckpt")
    s.add_argument("--out")
    s.add_argument("--config")

    e = subs.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--manifest")
    e.add_argument("--ckpt")
    e.add_argument("--split", choices=["train", "valid", "test"], default="test")
    e.add_argument("--concat-factor", type=int, default=1)
    e.add_argument("--out", help="report file")
    e.add_argument("--config")

    c = subs.add_parser("gradcheck", help="finite-difference checks of every op and loss")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--seeds", type=int, default=20, help="number of seeds")
    c.add_argument("--checks", default="", help="comma-separated subset")
    c.add_argument("--config")
    return parser


# commands ----------------------------------------------------------------------------------
def cmd_gen(args) -> int:
    from .data import export_corpus, generate_corpus

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force)")
    corpus = generate_corpus(_corpus_config(args))
    manifest = export_corpus(corpus, out)
    print(f"wrote {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} train/valid/test examples to {manifest}")
    return EXIT_OK


def run_config(args) -> RunConfig:
    from .objective import LossWeights
    from .train import TrainConfig

    defaults = LossWeights()
    weights = LossWeights(
        loss_variant=args.loss,
        noise_std=0.0 if args.no_noise else defaults.noise_std,
        speaker_dropout_rate=0.0 if args.no_dropout else defaults.speaker_dropout_rate,
        speaker_mixup_rate=0.0 if args.no_mixup else defaults.speaker_mixup_rate,
        embed_reg_weight=0.0 if args.no_embed_reg else defaults.embed_reg_weight)
    tc = TrainConfig(batch_size=args.batch_size, window_len=int(round(args.window * 8000)), steps=args.steps,
                     lr=args.lr, weights=weights, dynamic_mixing=args.dynamic_mixing, seed=args.seed,
                     valid_every=args.valid_every, valid_examples=args.valid_examples,
                     log_every=args.log_every, grad_clip=args.grad_clip,
                     checkpoint=str(Path(args.out) / "model.ckpt"))
    return RunConfig(args.preset, tc, Path(args.out),
                     Path(args.manifest) if args.manifest else None,
                     _corpus_config(args) if args.synthetic else None, film=not args.no_film)


def cmd_train(args) -> int:
    from .data import generate_corpus, load_manifest_examples
    from .model import WavesplitModel, preset
    from .train import train

    rc = run_config(args)
    if rc.manifest is not None:
        splits = load_manifest_examples(rc.manifest)
    else:
        corpus = generate_corpus(rc.synthetic)
        splits = {"train": corpus.train, "valid": corpus.valid}
    train_set, valid_set = splits["train"], splits["valid"]
    if not train_set:
        raise FormatError("no training examples in the data source")
    sr = train_set[0].sample_rate
    tc = replace(rc.train, sample_rate=sr, window_len=int(round(args.window * sr)))
    ids = sorted({int(s) for ex in train_set for s in ex.speakers})
    speaker_index = {s: i for i, s in enumerate(ids)}
    cfg = preset(rc.preset, n_sources=train_set[0].n_sources, n_train_speakers=len(ids), film=rc.film)
    cfg.sample_rate = sr
    model = WavesplitModel(cfg, seed=tc.seed)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "train.log", "w", encoding="utf-8") as log:
        result = train(model, train_set, tc, speaker_index, valid_set, log)
    print(f"trained {tc.steps} steps in {result.seconds:.0f}s; best validation dSI-SDR "
          f"{result.best_valid:.2f} dB at step {result.best_step}; checkpoint {tc.checkpoint}")
    return EXIT_OK


def cmd_separate(args) -> int:
    from .model import load_checkpoint, separate
    from .wavio import wav_read, wav_write

    model = load_checkpoint(args.ckpt)
    x, sr = wav_read(args.input)
    if sr != model.cfg.sample_rate:
        warnings.warn(f"input sample rate {sr} Hz differs from the training rate {model.cfg.sample_rate} Hz")
    result = separate(x, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for i in range(result.estimates.shape[1]):
        wav_write(out / f"{stem}.src{i + 1}.wav", result.estimates[:, i], sr)
    c = result.centroids.values.astype(np.float64)
    dists = [float(np.linalg.norm(c[i] - c[j])) for i in range(len(c)) for j in range(i + 1, len(c))]
    print(f"centroid distances: {' '.join(f'{d:.4f}' for d in dists)}"
          + (" (degenerate clustering)" if result.degenerate else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest_split
    from .model import load_checkpoint
    from .train import concat_stress_eval

    model = load_checkpoint(args.ckpt)
    examples, missing = load_manifest_split(args.manifest, args.split, skip_missing=True)
    report = concat_stress_eval(model, examples, args.concat_factor)
    report.skipped += missing
    if missing:
        report.notes.append(f"{missing} examples skipped: missing reference files")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.write(args.out)
    print(f"{len(report.examples)} sequences, mean dSDR {report.mean_dsdr:.2f} dB, "
          f"mean dSI-SDR {report.mean_dsi_sdr:.2f} dB, skipped {report.skipped}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, format_table, run_gradchecks

    names = [n for n in args.checks.split(",") if n] or None
    unknown = [n for n in names or [] if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}")
    results = run_gradchecks(range(args.seed, args.seed + args.seeds), names)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


REQUIRED = {"gen": ["out"], "train": ["out"], "separate": ["input", "ckpt", "out"],
            "eval": ["manifest", "ckpt", "out"], "gradcheck": []}

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "separate": cmd_separate, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = _apply_config(parser, argv, sub, args)
        missing = [n for n in REQUIRED[args.command] if getattr(args, n) in (None, "")]
        if missing:
            flags = ", ".join("--" + ("in" if n == "input" else n.replace("_", "-")) for n in missing)
            raise UsageError(f"{args.command}: missing required {flags} (flag or config key)")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
