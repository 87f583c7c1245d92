"""``mmfx`` command line: gen-data, train, eval, verify.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 a verify
suite failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import CLASS_NAMES, DataError, SyntheticSpec, corpus, generate_synthetic, load_manifest, write_manifest
from .features import build_vocab
from .lora import LoraError
from .model import FUSIONS, ConfigError
from .runs import MAX_VOCAB, VOCAB_FILE, RunConfig, RunConfigError, execute_run
from .train import evaluate

log = logging.getLogger("mmfx")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
VALIDATION_ERRORS = (RunConfigError, ConfigError, LoraError, DataError, CheckpointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for runtime failures here
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmfx", description="Multimodal fusion classifier experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic image/report dataset")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=None,
                   help="train size; validation and test scale with it (default 400/12/48)")
    g.add_argument("--noise-rate", type=float, default=None)
    g.add_argument("--max-vocab", type=int, default=MAX_VOCAB)
    g.add_argument("--config", help="JSON object of synthetic-generator fields")

    t = sub.add_parser("train", help="train one fusion variant")
    t.add_argument("--config", help="JSON run config (flags below take precedence)")
    t.add_argument("--data", help="dataset directory with train/validation[/test].jsonl")
    t.add_argument("--out", help="output root; the run lands in <out>/<tag>/")
    t.add_argument("--arch", choices=FUSIONS)
    t.add_argument("--seed", type=int)
    t.add_argument("--lora-r", type=int)
    t.add_argument("--no-lora", action="store_true", help="train all weights (tag <arch>_full)")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="per-class AUC of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="manifest file, or dataset directory")
    e.add_argument("--split", default="test", help="manifest name inside --data when it is a directory")
    e.add_argument("--out", help="CSV path (default: <checkpoint dir>/auc_<split>.csv)")

    v = sub.add_parser("verify", help="run the invariant suites and print a JSON report")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.add_argument("--out", help="also write the JSON report here")
    return p


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    fields = {}
    if args.config:
        try:
            fields = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RunConfigError(f"cannot read generator config {args.config}: {exc}") from None
    fields["seed"] = args.seed
    if args.noise_rate is not None:
        fields["noise_rate"] = args.noise_rate
    try:
        spec = SyntheticSpec.scaled(args.n, **fields) if args.n is not None else SyntheticSpec(**fields)
    except TypeError as exc:
        raise RunConfigError(f"bad generator config: {exc}") from None
    spec.validate()
    if args.max_vocab < 4:
        raise RunConfigError("--max-vocab must be at least 4")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        splits = generate_synthetic(spec)
        for ds in splits:
            write_manifest(ds, scratch / f"{ds.split}.jsonl")
        train = splits[0]
        (scratch / "corpus.txt").write_text("".join(r + "\n" for r in corpus(train)), encoding="utf-8")
        if len(train):
            build_vocab(corpus(train), args.max_vocab).save(scratch / VOCAB_FILE)
        gen = {k: v for k, v in vars(spec).items()}
        gen["theme_words"] = {str(k): w for k, w in spec.theme_words.items()}
        (scratch / "generator.json").write_text(json.dumps(gen, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        scratch.rename(out)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    print(f"wrote {out}: " + ", ".join(f"{ds.split} {len(ds)}" for ds in splits))
    return EXIT_OK


def run_config_from_args(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.data is not None:
        rc.data = args.data
    if args.out is not None:
        rc.out = args.out
    if args.arch is not None:
        rc.model["fusion"] = args.arch
    if args.seed is not None:
        rc.train["seed"] = args.seed
    if args.epochs is not None:
        rc.train["epochs"] = args.epochs
    if args.no_lora and args.lora_r is not None:
        raise RunConfigError("--no-lora and --lora-r are mutually exclusive")
    if args.no_lora:
        rc.lora = None
    elif args.lora_r is not None:
        rc.lora = dict(rc.lora or {}, r=args.lora_r)
    return rc


def cmd_train(args) -> int:
    rc = run_config_from_args(args)
    outcome = execute_run(rc)
    best = outcome.result.best_auc
    print(f"{rc.tag}: {len(outcome.result.records)} epochs, best val mean AUC "
          f"{'n/a' if best is None else f'{best:.3f}'} -> {outcome.run_dir}")
    return EXIT_OK


def auc_table(aucs, mean_auc) -> list[tuple[str, str]]:
    def fmt(a):
        return "" if a is None else f"{a:.3f}"

    return [(name, fmt(a)) for name, a in zip(CLASS_NAMES, aucs)] + [("mean", fmt(mean_auc))]


def cmd_eval(args) -> int:
    data = Path(args.data)
    manifest = data / f"{args.split}.jsonl" if data.is_dir() else data
    if not manifest.is_file():
        raise RunConfigError(f"manifest not found: {manifest}")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise RunConfigError(f"checkpoint not found: {ckpt}")
    model, tok, _ = load_checkpoint(ckpt)
    if tok is None:
        raise CheckpointError(f"{ckpt} carries no vocabulary")
    if model.cfg.n_classes != len(CLASS_NAMES):
        raise CheckpointError(f"checkpoint predicts {model.cfg.n_classes} classes, data has {len(CLASS_NAMES)}")
    ds = load_manifest(manifest, args.split)
    res = evaluate(model, ds, tok)
    rows = auc_table(res.auc_per_class, res.mean_auc)
    width = max(len(n) for n, _ in rows)
    for name, val in rows:
        print(f"{name:<{width}}  {val or 'n/a'}")
    out = Path(args.out) if args.out else ckpt.parent / f"auc_{args.split}.csv"
    out.write_text("class,auc\n" + "".join(f"{n},{v}\n" for n, v in rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    try:
        report = run_suites(args.suite)
    except ValueError as exc:
        raise RunConfigError(str(exc)) from None
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmfx: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"mmfx: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything past validation is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"mmfx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
