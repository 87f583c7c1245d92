"""Parallel (early), serial (late) and mixed fusion pipelines with the classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .features import PatchProjector, TextEmbedder, embed_text, patchify_project
from .nn import CrossBlock, Linear, Module, TransformerLayer, cross_block_forward, default_hidden_dim, layer_forward
from .tensor import Rng, Tensor, add, concat, dropout, mean, rms_norm, scale, sigmoid, tanh

FUSIONS = ("parallel", "serial", "mixed")
MODALITIES = ("text", "vision")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_levels: int = 3
    hidden_dim: int | None = None
    vocab_size: int = 256
    text_seq_len: int = 32
    image_side: int = 32
    patch_size: int = 8
    n_classes: int = 14
    dropout_rate: float = 0.1
    fusion: str = "parallel"
    head_hidden: int | None = None
    ff_order: str = "product"
    # replace one modality's embedded input with zeros (unimodal ablations)
    blank_modality: str | None = None

    def __post_init__(self):
        if self.hidden_dim is None and isinstance(self.d_model, int) and self.d_model > 0:
            self.hidden_dim = default_hidden_dim(self.d_model)
        if self.head_hidden is None:
            self.head_hidden = self.d_model

    def problems(self) -> list[str]:
        out = []
        for name in ("d_model", "n_heads", "n_levels", "hidden_dim", "vocab_size",
                     "text_seq_len", "image_side", "patch_size", "n_classes", "head_hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                out.append(f"{name} must be a positive integer (got {value!r})")
        if not out:
            if self.d_model % self.n_heads:
                out.append(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
            if self.image_side % self.patch_size:
                out.append(f"patch_size={self.patch_size} does not divide image_side={self.image_side}")
        if self.vocab_size < 3 and not any(m.startswith("vocab_size") for m in out):
            out.append("vocab_size must cover the 3 reserved tokens")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if self.fusion not in FUSIONS:
            out.append(f"fusion must be one of {FUSIONS} (got {self.fusion!r})")
        if self.ff_order not in ("product", "swiglu"):
            out.append(f"ff_order must be 'product' or 'swiglu' (got {self.ff_order!r})")
        if self.blank_modality not in (None,) + MODALITIES:
            out.append(f"blank_modality must be None or one of {MODALITIES} (got {self.blank_modality!r})")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ClassifierHead(Module):
    def __init__(self, d_model: int, hidden: int, n_classes: int, dropout_rate: float, rng: Rng):
        # final per-stream norms, as at the output of the backbone's layer stack
        self.norm_text = Tensor(np.ones(d_model), requires_grad=True)
        self.norm_vision = Tensor(np.ones(d_model), requires_grad=True)
        in_dim = 2 * d_model
        self.dense_linear = Linear(in_dim, hidden, rng, bias=True)
        self.dense_cls = Linear(hidden, n_classes, rng, bias=True)
        self._dropout_rate = dropout_rate

    def pool(self, t: Tensor, v: Tensor) -> Tensor:
        """RMS-normalize each stream, mean-pool over positions, concatenate."""
        return concat([mean(rms_norm(t, self.norm_text), axis=-2),
                       mean(rms_norm(v, self.norm_vision), axis=-2)], axis=-1)

    def __call__(self, pooled: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        """Dense Linear -> tanh -> dropout -> Dense CLS; returns logits."""
        h = tanh(self.dense_linear(pooled))
        h = dropout(h, self._dropout_rate, rng, training)
        return self.dense_cls(h)


class FusionModel(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self._cfg = cfg
        d, h, hid = cfg.d_model, cfg.n_heads, cfg.hidden_dim
        # draw order is fixed and independent of cfg.fusion
        self.embedder = TextEmbedder(cfg.vocab_size, cfg.text_seq_len, d, rng)
        self.projector = PatchProjector(cfg.image_side, cfg.patch_size, d, rng)
        self.text_stack = [TransformerLayer(d, h, hid, rng) for _ in range(cfg.n_levels)]
        self.vision_stack = [TransformerLayer(d, h, hid, rng) for _ in range(cfg.n_levels)]
        self.cross_blocks = [CrossBlock(d, h, hid, rng) for _ in range(cfg.n_levels)]
        self.head = ClassifierHead(d, cfg.head_hidden, cfg.n_classes, cfg.dropout_rate, rng)
        self._lora = None

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def fusion(self) -> str:
        return self._cfg.fusion

    @property
    def lora(self):
        return self._lora

    def logits(self, text_ids, images, training: bool = False, rng: Rng | None = None) -> Tensor:
        text_ids = np.asarray(text_ids, dtype=np.int64)
        images = np.asarray(images, dtype=np.float64)
        if text_ids.ndim != 2 or images.ndim != 3:
            raise ValueError(f"expected id batch (B, s) and image batch (B, side, side), "
                             f"got {text_ids.shape} and {images.shape}")
        if text_ids.shape[0] != images.shape[0]:
            raise ValueError(f"batch size mismatch: {text_ids.shape[0]} texts vs {images.shape[0]} images")
        if text_ids.min(initial=0) < 0 or text_ids.max(initial=0) >= self._cfg.vocab_size:
            raise IndexError(f"token id out of range for vocab_size={self._cfg.vocab_size}")
        t0 = embed_text(self.embedder, text_ids, training, rng)
        v0 = patchify_project(self.projector, images, training, rng)
        if self._cfg.blank_modality == "text":
            t0 = Tensor(np.zeros(t0.shape))
        elif self._cfg.blank_modality == "vision":
            v0 = Tensor(np.zeros(v0.shape))
        t, v = WIRINGS[self.fusion](self, t0, v0, training, rng)
        return self.head(self.head.pool(t, v), training, rng)

    def forward(self, text_ids, images, training: bool = False, rng: Rng | None = None) -> Tensor:
        return sigmoid(self.logits(text_ids, images, training, rng))

    __call__ = forward

    # stage helpers shared by the wirings
    def _run_stack(self, stack, x, training, rng):
        for layer in stack:
            x = layer_forward(x, None, layer, training, rng, self._cfg.ff_order)
        return x

    def _run_cross(self, blocks, t, v, training, rng):
        for block in blocks:
            t, v = cross_block_forward(t, v, block, training, rng, self._cfg.ff_order)
        return t, v


def _wire_parallel(m: FusionModel, t0, v0, training, rng):
    # the modality stacks exist for size parity but do not reach the head,
    # so they are not evaluated here
    return m._run_cross(m.cross_blocks, t0, v0, training, rng)


def _wire_serial(m: FusionModel, t0, v0, training, rng):
    t = m._run_stack(m.text_stack, t0, training, rng)
    v = m._run_stack(m.vision_stack, v0, training, rng)
    return m._run_cross(m.cross_blocks, t, v, training, rng)


def _wire_mixed(m: FusionModel, t0, v0, training, rng):
    tc, vc = m._run_cross(m.cross_blocks[:-1], t0, v0, training, rng)
    ts = m._run_stack(m.text_stack, t0, training, rng)
    vs = m._run_stack(m.vision_stack, v0, training, rng)
    t = scale(add(tc, ts), 0.5)
    v = scale(add(vc, vs), 0.5)
    return m._run_cross(m.cross_blocks[-1:], t, v, training, rng)


WIRINGS: dict[str, Callable] = {
    "parallel": _wire_parallel,
    "serial": _wire_serial,
    "mixed": _wire_mixed,
}


def build_model(cfg: ModelConfig, rng: Rng) -> FusionModel:
    return FusionModel(cfg, rng)


def forward(m: FusionModel, text_ids, images, training: bool = False,
            rng: Rng | None = None) -> Tensor:
    return m.forward(text_ids, images, training, rng)


def zero_cross_blocks(m: FusionModel) -> FusionModel:
    """Zero and freeze every cross-block tensor, adapters included.

    With zero attention and feed-forward weights each cross block is the
    identity, so the two streams reach the head without exchanging anything.
    """
    for name, p in m.named_parameters():
        if param_group(name) == "cross":
            p.data = np.zeros_like(p.data)
            p.requires_grad = False
            p.grad = None
    return m


def _is_adapter(name: str) -> bool:
    return name.endswith(".lora_a") or name.endswith(".lora_b")


PARAM_GROUPS = ("text", "vision", "cross", "head", "embeddings")


def param_group(name: str) -> str:
    root = name.split(".", 1)[0]
    return {
        "text_stack": "text",
        "vision_stack": "vision",
        "cross_blocks": "cross",
        "head": "head",
        "embedder": "embeddings",
        "projector": "embeddings",
    }[root]


def count_parameters(m: FusionModel) -> dict[str, int]:
    """Base parameter counts per group (LoRA adapters excluded)."""
    counts = dict.fromkeys(PARAM_GROUPS, 0)
    for name, p in m.named_parameters():
        if not _is_adapter(name):
            counts[param_group(name)] += p.data.size
    counts["total"] = sum(counts[g] for g in PARAM_GROUPS)
    return counts
