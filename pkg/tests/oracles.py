"""Brute-force loop oracles for the loss and metric family.

Plain Python loops over lists of floats; nothing here shares code with the
package, so agreement is evidence rather than tautology.
"""

import math


def _norm(vec):
    return math.sqrt(sum(v * v for v in vec))


def _sub(a, b):
    return [x - y for x, y in zip(a, b)]


def _flat(seq):
    return [v for frame in seq for v in frame]


def diversity(samples):
    # samples: N x T x F nested lists
    n, t_len = len(samples), len(samples[0])
    total = 0.0
    for t in range(t_len):
        best = math.inf
        for i in range(n):
            for j in range(n):
                if i != j:
                    best = min(best, _norm(_sub(samples[i][t], samples[j][t])))
        total += best
    return -total


def min_reconstruction(samples, gt, per_frame=True):
    if per_frame:
        return sum(min(_norm(_sub(s[t], gt[t])) for s in samples) for t in range(len(gt)))
    return min(sum(_norm(_sub(s[t], gt[t])) for t in range(len(gt))) for s in samples)


def lip_reconstruction(samples, gt, mask):
    closed = 0.0
    for s in samples:
        for t in range(len(gt)):
            if mask[t] == 0:
                closed += _norm(_sub(gt[t], s[t]))
    return min_reconstruction(samples, gt) + closed / len(samples)


def vertex_error(pred_frame, gt_frame, v):
    return _norm(_sub(pred_frame[3 * v: 3 * v + 3], gt_frame[3 * v: 3 * v + 3]))


def lve(pred, gt, lip):
    return sum(max(vertex_error(p, g, v) for v in lip) for p, g in zip(pred, gt)) / len(gt)


def mve(pred, gt):
    n_v = len(gt[0]) // 3
    return sum(vertex_error(p, g, v) for p, g in zip(pred, gt) for v in range(n_v)) / (len(gt) * n_v)


def _std(xs):
    mean = sum(xs) / len(xs)
    return math.sqrt(sum((x - mean) ** 2 for x in xs) / len(xs))


def fdd(pred, gt, upper):
    total = 0.0
    for v in upper:
        mp = [_norm(frame[3 * v: 3 * v + 3]) for frame in pred]
        mg = [_norm(frame[3 * v: 3 * v + 3]) for frame in gt]
        total += _std(mp) - _std(mg)
    return total / len(upper)


def apd(samples):
    s = len(samples)
    flat = [_flat(x) for x in samples]
    total = 0.0
    for i in range(s):
        for j in range(s):
            if j != i:
                total += _norm(_sub(flat[i], flat[j]))
    return total / (s * (s - 1))


def mpd(samples):
    flat = [_flat(x) for x in samples]
    return min(_norm(_sub(flat[i], flat[j])) for i in range(len(flat)) for j in range(len(flat)) if i != j)


def region(samples, vertices):
    return [[[frame[3 * v + c] for v in vertices for c in range(3)] for frame in x] for x in samples]


def alve(samples, gt, lip):
    return sum(lve(x, gt, lip) for x in samples) / len(samples)


def nearest_token(row, tokens):
    best, arg = math.inf, -1
    for k, tok in enumerate(tokens):
        d = sum((a - b) ** 2 for a, b in zip(row, tok))
        if d < best:
            best, arg = d, k
    return arg
