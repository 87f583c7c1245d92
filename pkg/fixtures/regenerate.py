"""Rebuild the golden fixtures from the plain-Python oracles.

    python fixtures/regenerate.py            # rewrite fixtures in place
    python fixtures/regenerate.py --check    # report cases that differ, exit 1 if any

Inputs are multiples of 1/64, so they survive the float32 tensor tables
exactly; expected outputs are computed in float64 and then stored as
float32, which is why every case carries a 1e-6 tolerance.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import tempfile
from pathlib import Path

import oracles

from mmfusion.checkpoint import encode_table

HERE = Path(__file__).resolve().parent
F32_TOL = 1e-6


def _grid(rnd: random.Random, rows: int, cols: int, span: int = 64):
    return [[rnd.randint(-span, span) / 64 for _ in range(cols)] for _ in range(rows)]


def _gain(rnd: random.Random, d: int):
    return [1 + rnd.randint(-16, 16) / 64 for _ in range(d)]


def _layer_params(rnd: random.Random, d: int, hidden: int):
    p = {name: _grid(rnd, d, d, 32) for name in ("wq", "wk", "wv", "wo")}
    p["w1"] = _grid(rnd, hidden, d, 32)
    p["w3"] = _grid(rnd, hidden, d, 32)
    p["w2"] = _grid(rnd, d, hidden, 32)
    p["norm1"] = _gain(rnd, d)
    p["norm2"] = _gain(rnd, d)
    return p


def build_cases() -> list[dict]:
    """Every case: name, op, oracle description, tolerance, attrs, inputs, expected."""
    rnd = random.Random(20240917)
    cases = []

    def case(name, op, oracle, inputs, expected, **attrs):
        cases.append({"name": name, "op": op, "oracle": oracle, "tolerance": F32_TOL,
                      "attrs": attrs, "inputs": inputs, "expected": expected})

    q, k, v = [[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]
    case("attention_hand", "attention", "hand exp/sum: softmax([1/sqrt2, 0]) rows of V",
         {"q": q, "k": k, "v": v}, oracles.attention(q, k, v))
    q, k, v = _grid(rnd, 3, 4), _grid(rnd, 5, 4), _grid(rnd, 5, 3)
    case("attention_random", "attention", "exp/sum softmax then weighted value rows",
         {"q": q, "k": k, "v": v}, oracles.attention(q, k, v))

    for name, s_kv in (("multi_head_attention_self", 3), ("multi_head_attention_cross", 2)):
        xq = _grid(rnd, 3, 4)
        xkv = xq if s_kv == 3 else _grid(rnd, s_kv, 4)
        w = {n: _grid(rnd, 4, 4, 32) for n in ("wq", "wk", "wv", "wo")}
        case(name, "multi_head_attention", "explicit per-head column slicing, concat, output projection",
             {"x_q": xq, "x_kv": xkv, **w},
             oracles.multi_head_attention(xq, xkv, w["wq"], w["wk"], w["wv"], w["wo"], 2), heads=2)

    x, one = [[2.0]], [[1.0]]
    case("feed_forward_scalar", "feed_forward", "silu(2*2) = 4/(1+exp(-4))",
         {"x": x, "w1": one, "w2": one, "w3": one}, oracles.feed_forward(x, one, one, one))
    x = _grid(rnd, 3, 4)
    w1, w3, w2 = _grid(rnd, 6, 4), _grid(rnd, 6, 4), _grid(rnd, 4, 6)
    case("feed_forward_random", "feed_forward", "W2 silu(W1x * W3x) row by row",
         {"x": x, "w1": w1, "w2": w2, "w3": w3}, oracles.feed_forward(x, w1, w2, w3))

    x = [[3.0, 4.0]]
    case("rms_norm_hand", "rms_norm", "x / sqrt(mean(x^2) + 1e-5)",
         {"x": x, "gain": [[1.0, 1.0]]}, oracles.rms_norm(x, [1.0, 1.0]))

    xq, xkv = _grid(rnd, 2, 4), _grid(rnd, 3, 4)
    p = _layer_params(rnd, 4, 8)
    case("attention_residual_cross", "attention_residual",
         "x + MHA(rmsnorm(x), rmsnorm(x_kv)) composed from the oracles above",
         {"x_q": xq, "x_kv": xkv, **{n: (t if n[:4] != "norm" else [t]) for n, t in p.items()}},
         oracles.attention_residual(xq, xkv, p, 2), heads=2)
    xq = _grid(rnd, 2, 4)
    p = _layer_params(rnd, 4, 8)
    case("layer_output_self", "layer_output", "y + FF(rmsnorm(y)) after the attention residual",
         {"x_q": xq, **{n: (t if n[:4] != "norm" else [t]) for n, t in p.items()}},
         oracles.layer_output(xq, xq, p, 2), heads=2)
    xq, xkv = _grid(rnd, 3, 4), _grid(rnd, 2, 4)
    p = _layer_params(rnd, 4, 8)
    case("layer_output_cross", "layer_output", "y + FF(rmsnorm(y)) with text/vision-style cross input",
         {"x_q": xq, "x_kv": xkv, **{n: (t if n[:4] != "norm" else [t]) for n, t in p.items()}},
         oracles.layer_output(xq, xkv, p, 2), heads=2)

    x, w0 = [[1.0, 0.0], [0.0, 1.0], [0.5, -2.0]], [[1.0, 0.0], [0.0, 1.0]]
    a, b = [[1.0, 0.0]], [[0.0], [1.0]]
    case("lora_hand", "lora", "W0=I, A=[[1,0]], B=[[0],[1]], alpha=r=1 gives [x0, x1 + x0]",
         {"x": x, "w0": w0, "a": a, "b": b}, oracles.lora(x, w0, a, b, 1, 1), alpha=1, r=1)
    x, w0 = _grid(rnd, 3, 4), _grid(rnd, 5, 4)
    a, b = _grid(rnd, 2, 4, 16), _grid(rnd, 5, 2, 16)
    case("lora_random", "lora", "x W0^T + (alpha/r) x A^T B^T",
         {"x": x, "w0": w0, "a": a, "b": b}, oracles.lora(x, w0, a, b, 32, 2), alpha=32, r=2)
    return cases


def _table(c: dict) -> bytes:
    import numpy as np
    tensors = {f"in.{n}": np.array(t, dtype=np.float64) for n, t in c["inputs"].items()}
    tensors["expected"] = np.array(c["expected"], dtype=np.float64)
    return encode_table(tensors, {"kind": "golden", "name": c["name"], "op": c["op"]})


def render() -> dict[str, bytes]:
    """File name -> bytes for the whole fixture set."""
    cases = build_cases()
    files = {f"{c['name']}.mmfx": _table(c) for c in cases}
    index = [{k: c[k] for k in ("name", "op", "oracle", "tolerance", "attrs")} | {"file": f"{c['name']}.mmfx"}
             for c in cases]
    files["index.json"] = (json.dumps(index, indent=2, sort_keys=True) + "\n").encode("utf-8")
    return files


def regenerate_goldens(out_dir: str | Path = HERE) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = render()
    for name, data in files.items():
        (out_dir / name).write_bytes(data)
    return sorted(files)


def diff_goldens(committed: str | Path = HERE) -> list[str]:
    """Names of fixture files whose regenerated bytes differ from ``committed``."""
    committed = Path(committed)
    with tempfile.TemporaryDirectory() as tmp:
        regenerate_goldens(tmp)
        fresh = {p.name: p.read_bytes() for p in Path(tmp).iterdir()}
    old = {p.name: p.read_bytes() for p in committed.iterdir()
           if p.suffix == ".mmfx" or p.name == "index.json"}
    return sorted(n for n in set(fresh) | set(old) if fresh.get(n) != old.get(n))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true", help="compare against the committed files only")
    ap.add_argument("--out", default=str(HERE))
    args = ap.parse_args(argv)
    if args.check:
        diffs = diff_goldens(args.out)
        for name in diffs:
            print(f"differs: {name}")
        print(f"{len(diffs)} differing file(s)")
        return 1 if diffs else 0
    for name in regenerate_goldens(args.out):
        print(f"wrote {name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
