"""Independent reference computations used as test oracles.

Everything here is written with plain Python loops or dense numpy algebra and
never calls into the library's numerical code paths.
"""

from __future__ import annotations

import math

import numpy as np

KINDS = ("AST", "CFG", "DDG", "CDG")


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def matvec(M, v):
    return [sum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]


def dense_aggregate(H, n, edges, A, b):
    """Messages via one (n*z x n*z) block matrix.

    ``edges`` is a list of (src, dst, kind); ``A[(kind, dir)]`` are z x z arrays.
    """
    H = np.asarray(H, dtype=np.float64)
    z = H.shape[1]
    big = np.zeros((n * z, n * z))
    for src, dst, kind in edges:
        big[dst * z:(dst + 1) * z, src * z:(src + 1) * z] += A[(kind, "fwd")]
        big[src * z:(src + 1) * z, dst * z:(dst + 1) * z] += A[(kind, "rev")]
    return (big @ H.reshape(-1)).reshape(n, z) + np.asarray(b)[None, :]


def loop_aggregate(H, n, edges, A, b):
    out = [list(b) for _ in range(n)]
    for src, dst, kind in edges:
        m = matvec(A[(kind, "fwd")], H[src])
        out[dst] = [x + y for x, y in zip(out[dst], m)]
        m = matvec(A[(kind, "rev")], H[dst])
        out[src] = [x + y for x, y in zip(out[src], m)]
    return out


def scalar_gru(a_rows, h_rows, W):
    """Per node, per coordinate GRU update; W maps names Wz..U to nested lists."""
    out = []
    for a, h in zip(a_rows, h_rows):
        z_pre = [x + y for x, y in zip(matvec(W["Wz"], a), matvec(W["Uz"], h))]
        r_pre = [x + y for x, y in zip(matvec(W["Wr"], a), matvec(W["Ur"], h))]
        zg = [sigmoid(x) for x in z_pre]
        rg = [sigmoid(x) for x in r_pre]
        rh = [r * x for r, x in zip(rg, h)]
        cand = [math.tanh(x + y) for x, y in zip(matvec(W["W"], a), matvec(W["U"], rh))]
        out.append([(1 - zi) * hi + zi * ci for zi, hi, ci in zip(zg, h, cand)])
    return out


def unrolled_propagation(H1, n, edges, A, b, W, steps):
    states = [[list(r) for r in H1]]
    for _ in range(steps - 1):
        h = states[-1]
        states.append(scalar_gru(loop_aggregate(h, n, edges, A, b), h, W))
    return states


def kernel(zi, zj, kind, c=1.0, degree=2, sigma=1.0):
    sq = sum((x - y) ** 2 for x, y in zip(zi, zj))
    dot = sum(x * y for x, y in zip(zi, zj))
    if kind == "euclidean":
        return sq
    if kind == "linear":
        return dot
    if kind == "poly":
        return (dot + c) ** degree
    return math.exp(-sq / (2 * sigma))


def neighbor_lists(n, edges):
    nbrs = {v: set() for v in range(n)}
    for src, dst, _ in edges:
        if src != dst:
            nbrs[src].add(dst)
            nbrs[dst].add(src)
    return {v: sorted(s) for v, s in nbrs.items()}


def local_structures(states, n, edges, kind="rbf", **kw):
    """{node: [probs over ascending neighbors]} for nodes with neighbors, by direct exp/normalize."""
    out = {}
    for v, nb in neighbor_lists(n, edges).items():
        if not nb:
            continue
        w = [math.exp(kernel(states[v], states[u], kind, **kw)) for u in nb]
        s = sum(w)
        out[v] = [x / s for x in w]
    return out


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def cross_layer_oracle(traces, k, n, edges, kind="rbf", **kw):
    """Nested loops over (layer i, peer p, node j) for student ``k``.

    ``traces[s][i]`` is the node-state list of student s at layer i.
    """
    M = len(traces)
    H = len(traces[k])
    structs = [[local_structures(traces[s][i], n, edges, kind, **kw) for i in range(H)] for s in range(M)]
    counted = len(structs[k][0])
    if counted == 0:
        return 0.0
    total = 0.0
    for i in range(H):
        nxt = (i + 1) % H
        for p in range(M):
            if p == k:
                continue
            for j, learner in structs[k][i].items():
                total += kl(structs[p][nxt][j], learner)
    return total / ((M - 1) * counted)


def two_student_loss(traces_s1, traces_s2, n, edges, kind="rbf", **kw):
    """Per-student losses when exactly two students align, each against the other's next layer."""
    H = len(traces_s1)
    l1 = l2 = 0.0
    for i in range(H):
        nxt = (i + 1) % H
        a1 = local_structures(traces_s1[i], n, edges, kind, **kw)
        a2 = local_structures(traces_s2[i], n, edges, kind, **kw)
        b1 = local_structures(traces_s1[nxt], n, edges, kind, **kw)
        b2 = local_structures(traces_s2[nxt], n, edges, kind, **kw)
        N = len(a1)
        if N == 0:
            continue
        l1 += sum(kl(b2[j], a1[j]) for j in a1) / N
        l2 += sum(kl(b1[j], a2[j]) for j in a2) / N
    return l1, l2


def confusion_counts(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
    return tp, fp, tn, fn


def central_difference(f, theta, eps=1e-4):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (f(up) - f(down)) / (2 * eps)
    return grad
