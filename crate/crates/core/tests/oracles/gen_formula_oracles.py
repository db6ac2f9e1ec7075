#!/usr/bin/env python3
"""Regenerates formula_oracles.json with 50-digit mpmath reference values.

Inputs are drawn from a fixed seed and written with repr() so the Rust side
reads back the exact same doubles.
"""
import json
import random
from pathlib import Path

import mpmath as mp

mp.mp.dps = 50
N = 1000
rng = random.Random(20240611)


def ucb1(q, n, total, c):
    return mp.mpf(q) + mp.mpf(c) * mp.sqrt(mp.log(mp.mpf(total)) / mp.mpf(n))


def mixed(values, lam, alpha):
    vs = [mp.mpf(v) for v in values]
    mean = mp.fsum(vs) / len(vs)
    w = [mp.e ** (mp.mpf(alpha) * (v - mean)) for v in vs]
    z = mp.fsum(w)
    lam = mp.mpf(lam)
    return [lam / len(vs) + (1 - lam) * x / z for x in w]


def lcb(deltas, t):
    ds = [mp.mpf(d) for d in deltas]
    k = len(ds)
    mean = mp.fsum(ds) / k
    if k == 1:
        return mean
    s = mp.sqrt(mp.fsum((d - mean) ** 2 for d in ds) / (k - 1))
    return mean - mp.mpf(t) * s / mp.sqrt(k)


def num(x):
    return repr(float(x))


cases = {"ucb1": [], "mixed": [], "lcb": []}
for _ in range(N):
    total = rng.randint(1, 10000)
    n = rng.randint(1, total)
    q, c = rng.random(), rng.uniform(0.0, 3.0)
    cases["ucb1"].append({"q": q, "n": n, "total": total, "c": c, "expected": num(ucb1(q, n, total, c))})

    m = rng.randint(1, 12)
    values = [rng.random() for _ in range(m)]
    lam, alpha = rng.random(), rng.uniform(0.01, 20.0)
    cases["mixed"].append(
        {"values": values, "lambda": lam, "alpha": alpha, "expected": [num(p) for p in mixed(values, lam, alpha)]}
    )

    k = rng.randint(1, 30)
    deltas = [rng.uniform(-0.2, 0.2) for _ in range(k)]
    t = rng.uniform(0.0, 3.0)
    cases["lcb"].append({"deltas": deltas, "t": t, "expected": num(lcb(deltas, t))})

out = Path(__file__).with_name("formula_oracles.json")
out.write_text(json.dumps(cases) + "\n")
print(f"wrote {out}")
