"""Invariant suites behind ``mmfx verify``.

Each suite returns a :class:`SuiteResult`. Setting ``MMFX_VERIFY_FAULT`` to a
suite name makes that suite run against a deliberately broken variant of the
code it checks, which is how the negative controls are exercised.
"""

from __future__ import annotations

import itertools
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable
from unittest import mock

import numpy as np

from . import nn as nn_mod
from . import train as train_mod
from .lora import LoraConfig, adapters, reduction_factor, wrap_model
from .model import FUSIONS, ClassifierHead, ModelConfig, build_model, count_parameters
from .nn import (
    AttentionBlock,
    CrossBlock,
    FeedForward,
    TransformerLayer,
    attention,
    cross_block_forward,
    feed_forward,
    layer_forward,
    multi_head_attention,
)
from .tensor import (Rng, Tensor, add, backward, grad_check, make_node, mul, sigmoid, total, _push,
                     _sigmoid, _topo)
from .train import AdamState, TrainConfig, adam_step, bce_loss, roc_auc

FAULT_ENV = "MMFX_VERIFY_FAULT"
GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
EXACT_TOL = 1e-12


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    checks: int
    seconds: float = 0.0
    details: dict = field(default_factory=dict)


# -- gradient checks --------------------------------------------------------

def _silu_bad_backward(a: Tensor) -> Tensor:
    # forward is right, derivative drops the x*s*(1-s) term
    s = _sigmoid(a.data)
    return make_node(a.data * s, (a,), lambda g: _push(a, g * s))


def _scramble(module, rng: Rng, std: float = 0.5):
    """Move every parameter off its init so small gradients do not hide errors."""
    for name, p in module.named_parameters():
        if name.split(".")[-1].startswith("norm"):
            p.data = 1.0 + rng.normal(p.shape, 0.1)
        else:
            p.data = rng.normal(p.shape, std)


def _probe(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape, 1.0), requires_grad=True)


def tiny_model_config(fusion: str, **kw) -> ModelConfig:
    base = dict(d_model=8, n_heads=2, n_levels=2, vocab_size=20, text_seq_len=5,
                image_side=8, patch_size=4, head_hidden=8, fusion=fusion)
    base.update(kw)
    return ModelConfig(**base)


def gradcheck_cases(seed: int = 0, samples: int = 6) -> list[tuple[str, float]]:
    """(case name, max relative error) for every block and the full model variants."""
    rng = Rng(seed)
    d, h, hid, s_t, s_v, batch = 8, 2, 16, 3, 4, 2
    out: list[tuple[str, float]] = []

    def run(name: str, loss_fn: Callable[[], Tensor], wrt: list[Tensor]):
        worst = 0.0
        for x in wrt:
            rep = grad_check(loss_fn, x, GRAD_STEP, GRAD_TOL, n_samples=samples, rng=rng)
            worst = max(worst, rep.max_rel_error)
        out.append((name, worst))

    q, k, v = _probe(rng, (batch, s_t, 4)), _probe(rng, (batch, s_v, 4)), _probe(rng, (batch, s_v, 4))
    w_att = _probe(rng, (batch, s_t, 4))
    run("attention", lambda: total(mul(attention(q, k, v), w_att)), [q, k, v])

    xt, xv = _probe(rng, (batch, s_t, d)), _probe(rng, (batch, s_v, d))
    w_t, w_v = _probe(rng, (batch, s_t, d)), _probe(rng, (batch, s_v, d))

    blk = AttentionBlock(d, h, rng)
    _scramble(blk, rng)
    run("multi_head_attention", lambda: total(mul(multi_head_attention(xt, xv, blk), w_t)),
        [xt, xv, blk.wq.weight, blk.wk.weight, blk.wv.weight, blk.wo.weight])

    ff = FeedForward(d, hid, rng)
    _scramble(ff, rng)
    for order in ("product", "swiglu"):
        run(f"feed_forward[{order}]", lambda o=order: total(mul(feed_forward(xt, ff, order=o), w_t)),
            [xt, ff.w1.weight, ff.w2.weight, ff.w3.weight])

    layer = TransformerLayer(d, h, hid, rng)
    _scramble(layer, rng)
    run("layer[self]", lambda: total(mul(layer_forward(xt, None, layer), w_t)),
        [xt, layer.norm1, layer.norm2, layer.attn.wq.weight, layer.ff.w2.weight])
    run("layer[cross]", lambda: total(mul(layer_forward(xt, xv, layer), w_t)),
        [xt, xv, layer.norm1, layer.attn.wk.weight])

    cb = CrossBlock(d, h, hid, rng)
    _scramble(cb, rng)

    def cross_loss():
        t2, v2 = cross_block_forward(xt, xv, cb)
        return add(total(mul(t2, w_t)), total(mul(v2, w_v)))

    run("cross_block", cross_loss, [xt, xv, cb.dir_tv.attn.wq.weight, cb.dir_vt.ff.w1.weight])

    head = ClassifierHead(d, 6, 5, 0.1, rng)
    _scramble(head, rng)
    y = (rng.uniform((batch, 5)) < 0.5).astype(np.float64)
    # dropout masks are re-drawn from the same seed at every evaluation
    run("head", lambda: bce_loss(sigmoid(head(head.pool(xt, xv), True, Rng(3))), y),
        [xt, xv, head.norm_text, head.dense_linear.weight, head.dense_linear.bias,
         head.dense_cls.weight, head.dense_cls.bias])

    logits = _probe(rng, (batch, 5))
    run("bce", lambda: bce_loss(sigmoid(logits), y), [logits])

    for fusion in FUSIONS:
        m = build_model(tiny_model_config(fusion), rng)
        _scramble(m, rng)
        ids = rng.integers(0, 20, size=(batch, 5))
        imgs = rng.uniform((batch, 8, 8))
        yy = (rng.uniform((batch, 14)) < 0.3).astype(np.float64)
        # the parallel wiring never reads the modality stacks, so their grads are zero
        live = [p for n, p in m.named_parameters()
                if not (fusion == "parallel" and n.split(".")[0] in ("text_stack", "vision_stack"))]
        run(f"model[{fusion}]", lambda: bce_loss(m.forward(ids, imgs, True, Rng(11)), yy), live)
    return out


def suite_gradcheck(fault: bool = False) -> SuiteResult:
    patch = mock.patch.object(nn_mod, "silu", _silu_bad_backward) if fault else _null()
    with patch:
        cases = gradcheck_cases()
    worst = float(max(e for _, e in cases))
    return SuiteResult("gradcheck", worst < GRAD_TOL, worst, len(cases),
                       details={name: float(err) for name, err in cases})


@contextmanager
def _null():
    yield


# -- LoRA -------------------------------------------------------------------

def _inputs(cfg: ModelConfig, rng: Rng, batch: int = 3):
    ids = rng.integers(0, cfg.vocab_size, size=(batch, cfg.text_seq_len))
    imgs = rng.uniform((batch, cfg.image_side, cfg.image_side))
    return ids, imgs


def suite_lora_init(fault: bool = False, seeds: int = 20) -> SuiteResult:
    """Freshly wrapped models reproduce the base model's eval outputs."""
    worst, n = 0.0, 0
    for seed, fusion in itertools.product(range(seeds), FUSIONS):
        cfg = tiny_model_config(fusion)
        m = build_model(cfg, Rng(seed))
        ids, imgs = _inputs(cfg, Rng(seed + 1000))
        before = m.forward(ids, imgs).data
        wrap_model(m, LoraConfig(r=2), Rng(seed + 2000))
        if fault:
            for ad in adapters(m):
                ad.b.data[...] = 0.01
        after = m.forward(ids, imgs).data
        worst = max(worst, float(np.abs(after - before).max()))
        n += 1
    return SuiteResult("lora_init", worst <= EXACT_TOL, worst, n)


def _lora_step_fixture(fusion: str, seed: int):
    from .data import N_CLASSES
    cfg = tiny_model_config(fusion)
    m = wrap_model(build_model(cfg, Rng(seed)), LoraConfig(r=2), Rng(seed + 1))
    ids, imgs = _inputs(cfg, Rng(seed + 2), batch=4)
    y = (Rng(seed + 3).uniform((4, N_CLASSES)) < 0.3).astype(np.float64)
    return m, ids, imgs, y


def lora_training_steps(m, ids, imgs, y, steps: int = 10, seed: int = 0):
    """Run ``steps`` Adam updates at a raised learning rate on the tensors the loss reaches."""
    tcfg = TrainConfig(learning_rate=1e-2)
    state, rng = AdamState(), Rng(seed)
    params = None
    for _ in range(steps):
        loss = bce_loss(m.forward(ids, imgs, True, rng), y)
        if params is None:
            reach = {id(t) for t in _topo(loss)}
            params = [p for p in m.parameters() if p.requires_grad and id(p) in reach]
        backward(loss)
        adam_step(params, state, tcfg)


def suite_frozen_base(fault: bool = False, steps: int = 10) -> SuiteResult:
    """Frozen bases stay bitwise identical; adapters move."""
    changed_frozen, adapters_moved, n = 0, 0, 0
    for fusion in FUSIONS:
        m, ids, imgs, y = _lora_step_fixture(fusion, seed=FUSIONS.index(fusion))
        frozen = {n_: p.data.copy() for n_, p in m.named_parameters() if not p.requires_grad}
        if fault:  # a base weight that was never frozen
            m.cross_blocks[0].dir_tv.attn.wq.weight.requires_grad = True
        ads = {id(a): (a.a.data.copy(), a.b.data.copy()) for a in adapters(m)}
        lora_training_steps(m, ids, imgs, y, steps)
        params = dict(m.named_parameters())
        changed_frozen += sum(not np.array_equal(params[k].data, v) for k, v in frozen.items())
        adapters_moved += sum(not (np.array_equal(a.a.data, ads[id(a)][0]) and np.array_equal(a.b.data, ads[id(a)][1]))
                              for a in adapters(m))
        n += len(frozen)
    ok = changed_frozen == 0 and adapters_moved > 0
    return SuiteResult("frozen_base", ok, float(changed_frozen), n,
                       details={"frozen_changed": changed_frozen, "adapters_changed": adapters_moved})


def random_valid_config(rng: Rng) -> dict:
    heads = int(rng.integers(1, 4))
    patch = int(rng.integers(2, 5))
    return dict(
        d_model=heads * int(rng.integers(2, 6)),
        n_heads=heads,
        n_levels=int(rng.integers(1, 4)),
        hidden_dim=int(rng.integers(4, 24)),
        vocab_size=int(rng.integers(5, 40)),
        text_seq_len=int(rng.integers(2, 9)),
        image_side=patch * int(rng.integers(1, 4)),
        patch_size=patch,
        n_classes=int(rng.integers(1, 15)),
        head_hidden=int(rng.integers(2, 20)),
    )


def suite_param_parity(fault: bool = False, n_configs: int = 5) -> SuiteResult:
    rng = Rng(0)
    mismatches, details = 0, {}
    for i in range(n_configs):
        kw = random_valid_config(rng)
        totals = {}
        for fusion in FUSIONS:
            m = build_model(ModelConfig(fusion=fusion, **kw), Rng(i))
            if fault and fusion == "mixed":
                m.head.merge_gate = Tensor(np.ones(kw["d_model"]), requires_grad=True)
            totals[fusion] = count_parameters(m)["total"]
        details[f"config{i}"] = totals
        mismatches += len(set(totals.values())) != 1
    return SuiteResult("param_parity", mismatches == 0, float(mismatches), n_configs, details=details)


def suite_reduction_factor(fault: bool = False) -> SuiteResult:
    """Per wrapped matrix: (|A| + |B|) / |W0| == r(1/d + 1/k) exactly."""
    bad, n = 0, 0
    for r in (1, 2, 4):
        m = wrap_model(build_model(tiny_model_config("serial"), Rng(r)), LoraConfig(r=r), Rng(r + 1))
        for j, ad in enumerate(adapters(m)):
            a_size = ad.a.data.size + (ad.dk[1] if fault and j == 0 else 0)
            measured = (a_size + ad.b.data.size) / ad.base.data.size
            d, k = ad.dk
            bad += measured != reduction_factor(d, k, r)
            n += 1
    spot = reduction_factor(4096, 4096, 2)
    bad += spot != 1 / 1024
    return SuiteResult("reduction_factor", bad == 0, float(bad), n + 1,
                       details={"spot_4096_4096_r2": spot})


# -- AUC --------------------------------------------------------------------

def pair_count_auc(scores, labels) -> float | None:
    """Brute-force Mann-Whitney: fraction of (pos, neg) pairs ranked right, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def random_auc_instance(rng: Rng):
    """Length 2..100; a quarter with heavy ties, about one in ten with a single class."""
    n = int(rng.integers(2, 101))
    ties, rate = rng.uniform(2)
    scores = rng.integers(0, 4, size=n) / 4.0 if ties < 0.25 else rng.uniform(n)
    if rate < 0.05:
        rate = 0.0
    elif rate > 0.95:
        rate = 1.0
    labels = (rng.uniform(n) < rate).astype(int)
    return scores, labels


def suite_auc_oracle(fault: bool = False, instances: int = 200) -> SuiteResult:
    from scipy.stats import rankdata

    patch = (mock.patch.object(train_mod, "rankdata", lambda x: rankdata(x, method="ordinal"))
             if fault else _null())
    rng = Rng(0)
    worst, policy_errors = 0.0, 0
    with patch:
        for _ in range(instances):
            scores, labels = random_auc_instance(rng)
            got, want = roc_auc(scores, labels), pair_count_auc(scores, labels)
            if (got is None) != (want is None):
                policy_errors += 1
            elif got is not None:
                worst = max(worst, abs(got - want))
    return SuiteResult("auc_oracle", worst <= EXACT_TOL and policy_errors == 0, worst, instances,
                       details={"undefined_policy_errors": policy_errors})


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "gradcheck": suite_gradcheck,
    "lora_init": suite_lora_init,
    "frozen_base": suite_frozen_base,
    "param_parity": suite_param_parity,
    "reduction_factor": suite_reduction_factor,
    "auc_oracle": suite_auc_oracle,
}


def run_suites(names=None, fault: str | None = None) -> dict:
    """Run the named suites (all by default) and return a JSON-ready report."""
    fault = os.environ.get(FAULT_ENV) if fault is None else fault
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name](fault=(fault == name))
        res.seconds = round(time.perf_counter() - t0, 3)
        results.append(asdict(res))
    return {"passed": all(r["passed"] for r in results), "fault": fault or None, "suites": results}
