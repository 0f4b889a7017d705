"""Slow, obviously-correct reference implementations shared by the test modules."""

import numpy as np


def scan_loop(u, delta, A, B, C, D):
    """Scalar step-by-step selective-scan recurrence written straight from the definition."""
    L, d = u.shape
    n = A.shape[1]
    h = [[0.0] * n for _ in range(d)]
    y = np.zeros((L, d))
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for j in range(n):
                h[i][j] = np.exp(delta[t, i] * A[i, j]) * h[i][j] + delta[t, i] * B[t, j] * u[t, i]
                acc += C[t, j] * h[i][j]
            y[t, i] = acc + D[i] * u[t, i]
    return y


def scan_case(rng, L, d, n):
    return (rng.normal(size=(L, d)), np.log1p(np.exp(rng.normal(size=(L, d)))),
            -np.exp(rng.normal(size=(d, n))), rng.normal(size=(L, n)), rng.normal(size=(L, n)),
            rng.normal(size=d))


def knn(q, b, k):
    out = []
    for x in q:
        d = [(float(np.sum((x - y) ** 2)), j) for j, y in enumerate(b)]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def chamfer(a, b):
    da = [min(float(np.sum((x - y) ** 2)) for y in b) for x in a]
    db = [min(float(np.sum((x - y) ** 2)) for x in a) for y in b]
    return sum(da) / len(da) + sum(db) / len(db)


def fps(p, n, start):
    chosen = [start]
    while len(chosen) < n:
        best, arg = -1.0, None
        for i in range(len(p)):
            if i in chosen:
                continue
            d = min(float(np.sum((p[i] - p[j]) ** 2)) for j in chosen)
            if d > best:
                best, arg = d, i
        chosen.append(arg)
    return chosen


def aabb_iou(t1, s1, t2, s2):
    """Exact IoU of two axis-aligned boxes from per-axis interval overlaps."""
    inter = 1.0
    for a in range(3):
        lo = max(t1[a] - s1[a] / 2, t2[a] - s2[a] / 2)
        hi = min(t1[a] + s1[a] / 2, t2[a] + s2[a] / 2)
        inter *= max(hi - lo, 0.0)
    return inter / (np.prod(s1) + np.prod(s2) - inter)
