"""Plain-Python reference computations for the golden fixtures.

Nothing here imports numpy or the package: matrices are lists of rows and
every sum goes through math.fsum, so the goldens do not share code with the
implementation they check. Weights follow the (out, in) layout, so a layer
maps a row vector x to x W^T.
"""

import math

RMS_EPS = 1e-5


def matvec_rows(x, w):
    """Rows of x times w^T."""
    return [[math.fsum(wj[i] * row[i] for i in range(len(row))) for wj in w] for row in x]


def matmul(a, b):
    return [[math.fsum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
            for i in range(len(a))]


def transpose(a):
    return [list(col) for col in zip(*a)]


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def attention(q, k, v):
    dk = len(q[0])
    scores = matmul(q, transpose(k))
    weights = [softmax([s / math.sqrt(dk) for s in row]) for row in scores]
    return matmul(weights, v)


def multi_head_attention(xq, xkv, wq, wk, wv, wo, heads):
    q, k, v = matvec_rows(xq, wq), matvec_rows(xkv, wk), matvec_rows(xkv, wv)
    dk = len(q[0]) // heads
    outs = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        outs.append(attention([r[cols] for r in q], [r[cols] for r in k], [r[cols] for r in v]))
    merged = [sum((o[i] for o in outs), []) for i in range(len(xq))]
    return matvec_rows(merged, wo)


def silu(x):
    return x / (1.0 + math.exp(-x))


def feed_forward(x, w1, w2, w3):
    a, b = matvec_rows(x, w1), matvec_rows(x, w3)
    inner = [[silu(ai * bi) for ai, bi in zip(ra, rb)] for ra, rb in zip(a, b)]
    return matvec_rows(inner, w2)


def rms_norm(x, gain, eps=RMS_EPS):
    out = []
    for row in x:
        rms = math.sqrt(math.fsum(v * v for v in row) / len(row) + eps)
        out.append([g * v / rms for g, v in zip(gain, row)])
    return out


def add(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def attention_residual(xq, xkv, p, heads):
    """y = x + MHA(norm(x), norm(x_kv)) with the first norm gain on both streams."""
    nq = rms_norm(xq, p["norm1"])
    nkv = rms_norm(xkv, p["norm1"])
    return add(xq, multi_head_attention(nq, nkv, p["wq"], p["wk"], p["wv"], p["wo"], heads))


def layer_output(xq, xkv, p, heads):
    """out = y + FF(norm(y)) on top of the attention residual."""
    y = attention_residual(xq, xkv, p, heads)
    return add(y, feed_forward(rms_norm(y, p["norm2"]), p["w1"], p["w2"], p["w3"]))


def lora(x, w0, a, b, alpha, r):
    """x W0^T + (alpha / r) x A^T B^T, no dropout."""
    base = matvec_rows(x, w0)
    delta = matvec_rows(matvec_rows(x, a), b)
    return [[u + alpha / r * d for u, d in zip(ru, rd)] for ru, rd in zip(base, delta)]
