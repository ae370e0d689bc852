"""Straight-line reference implementations that share no code with the package.

Everything here works on plain Python lists of floats, one scalar at a time.
"""
import math


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def matvec(m, v):
    return [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]


def gru_step(p, x, h):
    """p: dict of nested lists W_z, W_r, W_h (d x in), U_z, U_r, U_h (d x d)."""
    wz, wr, wh = matvec(p["W_z"], x), matvec(p["W_r"], x), matvec(p["W_h"], x)
    uz, ur = matvec(p["U_z"], h), matvec(p["U_r"], h)
    z = [sig(a + b) for a, b in zip(wz, uz)]
    r = [sig(a + b) for a, b in zip(wr, ur)]
    rh = [ri * hi for ri, hi in zip(r, h)]
    uh = matvec(p["U_h"], rh)
    c = [math.tanh(a + b) for a, b in zip(wh, uh)]
    return [(1 - zi) * hi + zi * ci for zi, hi, ci in zip(z, h, c)]


def encode(p, xs, d):
    h = [0.0] * d
    for x in xs:
        h = gru_step(p, x, h)
    return h


def decode(p, bridge, head, h_prime, x_last, steps):
    s = matvec(bridge, h_prime)
    u = x_last
    out = []
    for _ in range(steps):
        s = gru_step(p, u, s)
        u = matvec(head, s)
        out.append(u)
    return out


def leaky(x, slope=0.2):
    return x if x >= 0 else slope * x


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    tot = sum(e)
    return [v / tot for v in e]


def attention_for(a, h_all, nbrs, n, slope=0.2):
    """(alphas over nbrs, h') for client n with projection list a."""
    d = len(h_all[n])
    scores = [sum(a[i] * h_all[n][i] for i in range(d)) + sum(a[d + i] * h_all[m][i] for i in range(d))
              for m in nbrs]
    alpha = softmax([leaky(s, slope) for s in scores])
    mix = [sum(al * h_all[m][i] for al, m in zip(alpha, nbrs)) for i in range(d)]
    return alpha, [sig(v) for v in mix]


def to_lists(arr):
    return [[float(v) for v in row] for row in arr]
