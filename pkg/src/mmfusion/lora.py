"""Low-rank adapters over frozen base weights.

An adapter adds ``(alpha / r) * B @ A`` to a frozen matrix W0 of shape
(d, k), with A (r, k) Gaussian and B (d, r) zero at init, so a freshly
wrapped model computes exactly what the base model computed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import FusionModel, PARAM_GROUPS, _is_adapter, count_parameters, param_group
from .nn import INIT_STD, Linear, TransformerLayer, _swap_last
from .tensor import Rng, Tensor, add, dropout, matmul, scale

LAYER_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2", "w3")
ALL_TARGETS = LAYER_TARGETS + ("embeddings", "vision_proj")
# W1 and W3 are left unwrapped, as are the dense head layers
DEFAULT_TARGETS = frozenset({"wq", "wk", "wv", "wo", "w2", "embeddings", "vision_proj"})


class LoraError(ValueError):
    pass


@dataclass
class LoraConfig:
    r: int = 2
    alpha: float = 32
    dropout_rate: float = 0.1
    targets: frozenset[str] = field(default_factory=lambda: DEFAULT_TARGETS)

    def __post_init__(self):
        self.targets = frozenset(self.targets)
        if not isinstance(self.r, int) or self.r < 1:
            raise LoraError(f"LoRA rank must be a positive integer, got {self.r!r}")
        if self.alpha <= 0:
            raise LoraError(f"LoRA alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise LoraError(f"LoRA dropout must lie in [0, 1), got {self.dropout_rate}")
        unknown = self.targets - set(ALL_TARGETS)
        if unknown:
            raise LoraError(f"unknown LoRA target(s): {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = sorted(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(**d)


class LoraAdapter:
    """Adapter for one base matrix.

    ``transposed`` marks a base stored as (k, d), like an embedding table
    whose lookup is the product of W0 = table^T with a one-hot column.
    """

    def __init__(self, base: Tensor, r: int, alpha: float, dropout_rate: float, rng: Rng,
                 transposed: bool = False):
        d, k = base.shape[::-1] if transposed else base.shape
        if r > min(d, k):
            raise LoraError(f"rank {r} exceeds min(d={d}, k={k})")
        self.base = base
        self.transposed = transposed
        self.r = r
        self.alpha = alpha
        self.dropout_rate = dropout_rate
        self.a = Tensor(rng.normal((r, k), INIT_STD), requires_grad=True)
        self.b = Tensor(np.zeros((d, r)), requires_grad=True)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def dk(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        return lora_forward(self, x, training, rng)


def lora_forward(ad: LoraAdapter, x: Tensor, training: bool = False,
                 rng: Rng | None = None) -> Tensor:
    """W0 x + (alpha/r) B A dropout(x), with x as row vectors (..., k)."""
    if ad.transposed:
        raise LoraError("embedding adapters are applied by lookup, not by lora_forward")
    d, k = ad.dk
    if x.shape[-1] != k:
        raise LoraError(f"adapter expects input width {k}, got shape {x.shape}")
    base = matmul(x, _swap_last(ad.base))
    xd = dropout(x, ad.dropout_rate, rng, training)
    delta = matmul(matmul(xd, _swap_last(ad.a)), _swap_last(ad.b))
    return add(base, scale(delta, ad.scale))


def merge_weights(ad: LoraAdapter) -> Tensor:
    w0 = ad.base.data.T if ad.transposed else ad.base.data
    return Tensor(w0 + ad.scale * (ad.b.data @ ad.a.data))


def reduction_factor(d: int, k: int, r: int) -> float:
    if r < 1 or r > min(d, k):
        raise LoraError(f"rank {r} must lie in [1, min(d={d}, k={k})]")
    # r(1/d + 1/k) as one rounded division of exact integers, so it agrees
    # bit for bit with an adapter/base size ratio
    return r * (d + k) / (d * k)


def _layer_linears(layer: TransformerLayer) -> dict[str, Linear]:
    return {
        "wq": layer.attn.wq, "wk": layer.attn.wk, "wv": layer.attn.wv, "wo": layer.attn.wo,
        "w1": layer.ff.w1, "w2": layer.ff.w2, "w3": layer.ff.w3,
    }


def model_layers(m: FusionModel) -> list[TransformerLayer]:
    layers = list(m.text_stack) + list(m.vision_stack)
    for block in m.cross_blocks:
        layers += [block.dir_tv, block.dir_vt]
    return layers


def wrap_model(m: FusionModel, cfg: LoraConfig, rng: Rng) -> FusionModel:
    """Freeze every non-head base tensor and attach adapters in place."""
    if m.lora is not None:
        raise LoraError("model is already LoRA-wrapped")
    unknown = cfg.targets - set(ALL_TARGETS)
    if unknown:
        raise LoraError(f"unknown LoRA target(s): {sorted(unknown)}")
    for name, p in m.named_parameters():
        if param_group(name) != "head":
            p.requires_grad = False

    def attach(lin: Linear):
        lin._adapter = LoraAdapter(lin.weight, cfg.r, cfg.alpha, cfg.dropout_rate, rng)

    for layer in model_layers(m):
        linears = _layer_linears(layer)
        for target in LAYER_TARGETS:
            if target in cfg.targets:
                attach(linears[target])
    if "embeddings" in cfg.targets:
        m.embedder._adapter = LoraAdapter(m.embedder.token_table, cfg.r, cfg.alpha,
                                          cfg.dropout_rate, rng, transposed=True)
    if "vision_proj" in cfg.targets:
        attach(m.projector.proj)
    m._lora = cfg
    return m


def adapters(m: FusionModel) -> list[LoraAdapter]:
    out = []
    for layer in model_layers(m):
        out += [lin.adapter for lin in _layer_linears(layer).values() if lin.adapter is not None]
    if m.embedder._adapter is not None:
        out.append(m.embedder._adapter)
    if m.projector.proj.adapter is not None:
        out.append(m.projector.proj.adapter)
    return out


def trainable_param_report(m: FusionModel) -> dict:
    groups = {g: {"frozen": 0, "trainable": 0} for g in PARAM_GROUPS}
    adapter_params = 0
    for name, p in m.named_parameters():
        kind = "trainable" if p.requires_grad else "frozen"
        groups[param_group(name)][kind] += p.data.size
        if _is_adapter(name):
            adapter_params += p.data.size
    frozen = sum(g["frozen"] for g in groups.values())
    trainable = sum(g["trainable"] for g in groups.values())
    return {
        "groups": groups,
        "frozen": frozen,
        "trainable": trainable,
        "adapter": adapter_params,
        "total": frozen + trainable,
        "base_total": count_parameters(m)["total"],
        "frozen_fraction": frozen / (frozen + trainable),
    }
