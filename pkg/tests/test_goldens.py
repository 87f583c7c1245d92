import json

import numpy as np
import pytest

import regenerate
from mmfusion.checkpoint import read_table
from mmfusion.lora import LoraAdapter, lora_forward
from mmfusion.nn import (
    AttentionBlock,
    FeedForward,
    TransformerLayer,
    attention,
    feed_forward,
    layer_forward,
    multi_head_attention,
)
from mmfusion.tensor import Rng, Tensor, rms_norm

INDEX = json.loads((regenerate.HERE / "index.json").read_text())
# one golden family per block formula, from single-head attention up to the adapter
BLOCK_OPS = {"attention", "multi_head_attention", "feed_forward", "attention_residual", "layer_output", "lora"}


def _set(linear, w):
    linear.weight.data = np.array(w)


def _layer(t, heads, zero_ff=False):
    d = t["in.wq"].shape[0]
    layer = TransformerLayer(d, heads, t["in.w1"].shape[0], Rng(0))
    for name in ("wq", "wk", "wv", "wo"):
        _set(getattr(layer.attn, name), t[f"in.{name}"])
    for name in ("w1", "w2", "w3"):
        _set(getattr(layer.ff, name), 0 * t[f"in.{name}"] if zero_ff else t[f"in.{name}"])
    layer.norm1.data = t["in.norm1"][0]
    layer.norm2.data = t["in.norm2"][0]
    return layer


def run_case(op, t, attrs):
    x_kv = Tensor(t["in.x_kv"]) if "in.x_kv" in t else None
    if op == "attention":
        return attention(Tensor(t["in.q"]), Tensor(t["in.k"]), Tensor(t["in.v"]))
    if op == "multi_head_attention":
        d = t["in.wq"].shape[0]
        block = AttentionBlock(d, attrs["heads"], Rng(0))
        for name in ("wq", "wk", "wv", "wo"):
            _set(getattr(block, name), t[f"in.{name}"])
        return multi_head_attention(Tensor(t["in.x_q"]), Tensor(t["in.x_kv"]), block)
    if op == "feed_forward":
        ff = FeedForward(t["in.w1"].shape[1], t["in.w1"].shape[0], Rng(0))
        for name in ("w1", "w2", "w3"):
            _set(getattr(ff, name), t[f"in.{name}"])
        return feed_forward(Tensor(t["in.x"]), ff)
    if op == "rms_norm":
        return rms_norm(Tensor(t["in.x"]), Tensor(t["in.gain"][0]))
    if op == "attention_residual":
        # zero feed-forward weights leave only the attention residual
        return layer_forward(Tensor(t["in.x_q"]), x_kv, _layer(t, attrs["heads"], zero_ff=True))
    if op == "layer_output":
        return layer_forward(Tensor(t["in.x_q"]), x_kv, _layer(t, attrs["heads"]))
    if op == "lora":
        ad = LoraAdapter(Tensor(t["in.w0"]), attrs["r"], attrs["alpha"], 0.0, Rng(0))
        ad.a.data, ad.b.data = t["in.a"], t["in.b"]
        return lora_forward(ad, Tensor(t["in.x"]))
    raise AssertionError(f"no runner for op {op}")


def test_regeneration_has_zero_diffs():
    assert regenerate.diff_goldens() == []


def test_check_mode_exit_code(capsys):
    assert regenerate.main(["--check"]) == 0
    assert "0 differing file(s)" in capsys.readouterr().out


def test_fixture_set_covers_every_block_formula():
    assert BLOCK_OPS <= {e["op"] for e in INDEX}


def test_index_matches_files():
    files = {p.name for p in regenerate.HERE.glob("*.mmfx")}
    assert files == {e["file"] for e in INDEX}


@pytest.mark.parametrize("entry", INDEX, ids=[e["name"] for e in INDEX])
def test_implementation_matches_golden(entry):
    doc, t = read_table(regenerate.HERE / entry["file"])
    assert doc["op"] == entry["op"] and doc["name"] == entry["name"]
    got = run_case(entry["op"], t, entry["attrs"]).data
    np.testing.assert_allclose(got, t["expected"], rtol=0, atol=entry["tolerance"])


def test_attention_hand_golden_value():
    _, t = read_table(regenerate.HERE / "attention_hand.mmfx")
    w = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1)
    np.testing.assert_allclose(t["expected"], [[w, 1 - w]], atol=1e-7)


def test_lora_hand_golden_value():
    _, t = read_table(regenerate.HERE / "lora_hand.mmfx")
    np.testing.assert_array_equal(t["expected"], [[1.0, 1.0], [0.0, 1.0], [0.5, -1.5]])


def test_diff_detects_a_tampered_file(tmp_path):
    regenerate.regenerate_goldens(tmp_path)
    path = tmp_path / "lora_hand.mmfx"
    buf = bytearray(path.read_bytes())
    buf[-1] ^= 0x01
    path.write_bytes(bytes(buf))
    assert regenerate.diff_goldens(tmp_path) == ["lora_hand.mmfx"]
