"""Run configuration, the desk-scale experiment preset, and end-to-end training runs."""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .data import SPLITS, Dataset, DataError, corpus, load_manifest
from .features import Tokenizer, build_vocab
from .lora import LoraConfig, LoraError, wrap_model
from .model import ConfigError, ModelConfig, build_model, zero_cross_blocks
from .tensor import Rng
from .train import TrainConfig, TrainResult, metrics_csv, train_loop

log = logging.getLogger(__name__)

# model geometry used for the synthetic experiments; vocab_size is filled
# from the tokenizer at run time
EXPERIMENT_MODEL = dict(
    d_model=32,
    n_heads=2,
    n_levels=3,
    text_seq_len=12,
    image_side=16,
    patch_size=8,
    head_hidden=16384,
)
DEFAULT_LORA_R = 2
MAX_VOCAB = 256
VOCAB_FILE = "vocab.txt"
RUN_FILES = ("config.resolved", "metrics.csv", "best.mmfx")


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: dict(EXPERIMENT_MODEL, fusion="parallel"))
    train: dict = field(default_factory=dict)
    lora: dict | None = field(default_factory=lambda: {"r": DEFAULT_LORA_R})
    data: str | None = None
    out: str = "runs"
    max_vocab: int = MAX_VOCAB

    KEYS = ("model", "train", "lora", "data", "out", "max_vocab")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise RunConfigError(f"unknown config keys: {sorted(unknown)}")
        rc = cls()
        for key in ("model", "train"):
            if key in d:
                getattr(rc, key).update(d[key])
        if "lora" in d:
            rc.lora = None if d["lora"] is None else {"r": DEFAULT_LORA_R, **d["lora"]}
        for key in ("data", "out", "max_vocab"):
            if key in d:
                setattr(rc, key, d[key])
        return rc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise RunConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise RunConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(doc)

    @property
    def tag(self) -> str:
        arch = self.model.get("fusion", "parallel")
        return f"{arch}_r{self.lora['r']}" if self.lora is not None else f"{arch}_full"

    def resolve(self) -> tuple[ModelConfig, TrainConfig, LoraConfig | None]:
        """Typed sub-configs, with every problem reported in one error."""
        problems = []
        mcfg = tcfg = lcfg = None
        try:
            mcfg = ModelConfig.from_dict(self.model)
            problems += mcfg.problems()
        except (ConfigError, TypeError) as exc:
            problems.append(str(exc))
        try:
            tcfg = TrainConfig.from_dict(self.train)
            problems += tcfg.problems()
        except (ValueError, TypeError) as exc:
            problems.append(str(exc))
        if self.lora is not None:
            try:
                lcfg = LoraConfig.from_dict(self.lora)
            except (LoraError, TypeError) as exc:
                problems.append(str(exc))
        if not isinstance(self.max_vocab, int) or self.max_vocab < 4:
            problems.append(f"max_vocab must be an integer >= 4 (got {self.max_vocab!r})")
        if problems:
            raise RunConfigError("invalid run config: " + "; ".join(problems))
        return mcfg, tcfg, lcfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}


def load_splits(data_dir: str | Path) -> dict[str, Dataset]:
    """Read ``<split>.jsonl`` manifests; train and validation are required."""
    data_dir = Path(data_dir)
    out = {}
    for split in SPLITS:
        path = data_dir / f"{split}.jsonl"
        if path.is_file():
            out[split] = load_manifest(path, split)
        elif split != "test":
            raise FileNotFoundError(f"missing manifest {path}")
    return out


def load_tokenizer(data_dir: str | Path, train: Dataset, max_vocab: int) -> Tokenizer:
    vocab = Path(data_dir) / VOCAB_FILE
    if vocab.is_file():
        return Tokenizer.load(vocab)
    return build_vocab(corpus(train), max_vocab)


def build_run_model(mcfg: ModelConfig, lcfg: LoraConfig | None, seed: int, unimodal: str | None = None):
    """Model init from ``seed``, adapters from ``seed + 1``.

    ``unimodal`` ("text" or "vision") builds the ablation that keeps only that
    modality: the other input is blanked and the cross blocks are zeroed and frozen.
    """
    if unimodal is not None:
        other = {"text": "vision", "vision": "text"}[unimodal]
        mcfg = ModelConfig.from_dict(dict(mcfg.to_dict(), blank_modality=other))
    m = build_model(mcfg, Rng(seed))
    if lcfg is not None:
        wrap_model(m, lcfg, Rng(seed + 1))
    if unimodal is not None:
        zero_cross_blocks(m)
    return m


@dataclass
class RunOutcome:
    run_dir: Path
    result: TrainResult
    model: object
    tokenizer: Tokenizer
    splits: dict


def execute_run(rc: RunConfig, unimodal: str | None = None) -> RunOutcome:
    """Validate, train, and publish ``<out>/<tag>/`` atomically.

    All files are written to a scratch directory first and moved into place
    only after training succeeds, so a failed run leaves nothing behind.
    """
    mcfg, tcfg, lcfg = rc.resolve()
    if rc.data is None:
        raise RunConfigError("no data directory given")
    try:
        splits = load_splits(rc.data)
    except FileNotFoundError as exc:
        raise RunConfigError(str(exc)) from None
    tok = load_tokenizer(rc.data, splits["train"], rc.max_vocab)
    model_dict = dict(mcfg.to_dict(), vocab_size=tok.vocab_size)
    mcfg = ModelConfig.from_dict(model_dict)
    sides = {ex.image.shape[0] for split in splits.values() for ex in split}
    if sides and sides != {mcfg.image_side}:
        raise DataError(f"images have side {sorted(sides)} but image_side={mcfg.image_side}")

    model = build_run_model(mcfg, lcfg, tcfg.seed, unimodal)
    tag = rc.tag if unimodal is None else f"{rc.tag}_{unimodal}_only"
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{tag}.", dir=out))
    try:
        resolved = dict(rc.to_dict(), model=model_dict, train=tcfg.to_dict(),
                        lora=lcfg.to_dict() if lcfg else None, tag=tag, unimodal=unimodal)
        (scratch / "config.resolved").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        result = train_loop(model, splits["train"], splits["validation"], tok, tcfg, out_dir=scratch)
        if result.best_path is None:
            # no validation AUC was ever defined; keep the final weights
            save_checkpoint(model, scratch / "best.mmfx", tok, {"epoch": tcfg.epochs - 1, "val_mean_auc": None})
        (scratch / "metrics.csv").write_text(metrics_csv(result.records))
        run_dir = out / tag
        if run_dir.exists():
            shutil.rmtree(run_dir)
        scratch.rename(run_dir)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    log.info("run %s written to %s", tag, run_dir)
    result.best_path = run_dir / "best.mmfx"
    return RunOutcome(run_dir, result, model, tok, splits)
