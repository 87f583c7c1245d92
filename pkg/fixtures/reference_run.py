"""Record the first epochs of the default parallel_r2 run as a regression fixture.

    python fixtures/reference_run.py     # rewrite reference_run.json
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from mmfusion.data import SyntheticSpec, corpus, generate_synthetic
from mmfusion.features import build_vocab
from mmfusion.lora import LoraConfig
from mmfusion.model import ModelConfig
from mmfusion.runs import DEFAULT_LORA_R, EXPERIMENT_MODEL, MAX_VOCAB, build_run_model
from mmfusion.train import TrainConfig, train_loop

HERE = Path(__file__).resolve().parent
FIXTURE = HERE / "reference_run.json"
EPOCHS = 5


def reference_losses(epochs: int = EPOCHS, seed: int = 0) -> list[float]:
    train, val, _ = generate_synthetic(SyntheticSpec(seed=seed))
    tok = build_vocab(corpus(train), MAX_VOCAB)
    mcfg = ModelConfig(**EXPERIMENT_MODEL, fusion="parallel", vocab_size=tok.vocab_size)
    model = build_run_model(mcfg, LoraConfig(r=DEFAULT_LORA_R), seed)
    result = train_loop(model, train, val, tok, TrainConfig(epochs=epochs, seed=seed))
    return [r.train_loss for r in result.records]


def main() -> int:
    losses = reference_losses()
    FIXTURE.write_text(json.dumps({"run": "parallel_r2", "seed": 0, "train_loss": losses}, indent=2) + "\n")
    print(f"wrote {FIXTURE.name}: {losses}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
