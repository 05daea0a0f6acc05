"""Slow, loop-based reference implementations used as independent test oracles.

Nothing here imports from the package under test.
"""

import itertools
import math

import numpy as np


def supcon(z, labels, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(float(np.dot(z[i], z[a])) / tau) for a in range(n) if a != i)
        acc = 0.0
        for p in pos:
            acc += math.log(math.exp(float(np.dot(z[i], z[p])) / tau) / denom)
        total -= acc / len(pos)
    return total


def cross_entropy(logits, labels):
    out = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        out += lse - row[y]
    return out / len(labels)


def _softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [x / s for x in e]


def response_kd(student, teacher, t):
    out = 0.0
    for s_row, t_row in zip(student, teacher):
        p = _softmax([v / t for v in t_row])
        q = _softmax([v / t for v in s_row])
        out += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
    return t * t * out / len(student)


def cosine_at(zi, zj, zk):
    a = np.asarray(zi) - np.asarray(zj)
    b = np.asarray(zk) - np.asarray(zj)
    return float(np.dot(a, b) / (math.sqrt(np.dot(a, a)) * math.sqrt(np.dot(b, b))))


def rkd_angle(teacher, student, triplets=None):
    n = len(teacher)
    if triplets is None:
        triplets = itertools.permutations(range(n), 3)
    return sum(abs(cosine_at(*teacher[list(t)]) - cosine_at(*student[list(t)])) for t in triplets)


def rkd_distance(teacher, student):
    n = len(teacher)
    pairs = list(itertools.combinations(range(n), 2))
    mu = sum(np.linalg.norm(teacher[i] - teacher[j]) for i, j in pairs) / len(pairs)
    return sum(abs(np.linalg.norm(teacher[i] - teacher[j]) - np.linalg.norm(student[i] - student[j])) for i, j in pairs) / mu


def mann_whitney(inliers, outliers):
    """Pair-count AUROC: fraction of (inlier, outlier) pairs ranked correctly, ties half."""
    wins = 0.0
    for a in inliers:
        for b in outliers:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(inliers) * len(outliers))


def min_pair_sqdist(centers):
    best = math.inf
    for a, b in itertools.combinations(list(centers), 2):
        best = min(best, math.fsum((x - y) ** 2 for x, y in zip(a, b)))
    return best


def knn_mean_cosine(z, class_feats, k):
    """Per class: sort every cosine similarity descending and average the first k."""
    out = []
    zn = math.sqrt(sum(v * v for v in z))
    for feats in class_feats:
        sims = []
        for f in feats:
            fn = math.sqrt(sum(v * v for v in f))
            sims.append(sum(a * b for a, b in zip(z, f)) / (zn * fn))
        sims.sort(reverse=True)
        top = sims[: min(k, len(sims))]
        out.append(sum(top) / len(top))
    return out


def distance_ranks(features, chosen):
    """Rank (0 = closest to the mean) of each chosen row, ties broken by index."""
    center = np.mean(features, axis=0)
    d = [(float(np.sum((f - center) ** 2)), i) for i, f in enumerate(features)]
    order = [i for _, i in sorted(d)]
    return [order.index(c) for c in chosen]


def rs(features, labels):
    classes = sorted(set(int(c) for c in labels))
    centers = {c: np.mean([f for f, y in zip(features, labels) if y == c], axis=0) for c in classes}
    intra = sum(float(np.sum((centers[int(y)] - f) ** 2)) for f, y in zip(features, labels)) / len(labels)
    return intra / min_pair_sqdist([centers[c] for c in classes])


def spearman(x, y):
    """Spearman rho via average ranks and the Pearson formula."""

    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        return float("nan")
    return sxy / math.sqrt(sxx * syy)


def fd_relative_error(analytic, f, x, h=1e-5):
    """Max over coordinates of |g - g_fd| / max(1, |g_fd|), central differences."""
    x = np.array(x, dtype=np.float64)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        g = (up - down) / (2 * h)
        worst = max(worst, abs(analytic[idx] - g) / max(1.0, abs(g)))
    return worst


def random_rotation(dim, rng):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))
