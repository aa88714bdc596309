"""Independent brute-force reference implementations used by the tests.

Everything here is written with plain loops and the textbook definitions, and
never calls into the package's numeric code.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _pad_value(img, y, x, mode):
    H, W = img.shape
    if mode == "zero":
        if 0 <= y < H and 0 <= x < W:
            return img[y, x]
        return 0.0
    # reflect without repeating the edge: -1 -> 1, H -> H-2
    while y < 0 or y >= H:
        y = -y if y < 0 else 2 * (H - 1) - y
    while x < 0 or x >= W:
        x = -x if x < 0 else 2 * (W - 1) - x
    return img[y, x]


def conv2d_loops(image, kernel, mode="reflect"):
    """Per-channel same-size cross-correlation of (C, H, W) with (kh, kw)."""
    C, H, W = image.shape
    kh, kw = kernel.shape
    out = np.zeros((C, H, W))
    for c in range(C):
        for y in range(H):
            for x in range(W):
                s = 0.0
                for i in range(kh):
                    for j in range(kw):
                        s += kernel[i, j] * _pad_value(image[c], y + i - kh // 2,
                                                       x + j - kw // 2, mode)
                out[c, y, x] = s
    return out


def contained_loops(target_rows, source_rows, intersecting=False):
    """Double loop over (target, source) rows of (id, lo, hi)."""
    out = []
    for tid, tlo, thi in target_rows:
        ids = []
        for sid, slo, shi in source_rows:
            if intersecting:
                hit = slo < thi and shi > tlo
            else:
                hit = slo >= tlo and shi <= thi
            if hit:
                ids.append(sid)
        out.append((tid, ids))
    return out


def align_loops(cube, source_ids, subsets):
    """Per-pixel mean over each subset; ``source_ids`` maps row -> band id."""
    C, H, W = cube.shape
    row_of = {b: r for r, b in enumerate(source_ids)}
    out = np.zeros((len(subsets), H, W))
    for i, subset in enumerate(subsets):
        for y in range(H):
            for x in range(W):
                s = 0.0
                for b in subset:
                    s += cube[row_of[b], y, x]
                out[i, y, x] = s / len(subset)
    return out


def variance_scores(gray, p):
    """Patch variance saliency oracle, row-major patch order."""
    H, W = gray.shape
    scores = []
    for r in range(H // p):
        for c in range(W // p):
            scores.append(float(np.var(gray[r * p:(r + 1) * p, c * p:(c + 1) * p])))
    return np.array(scores)


def topk_by_sort(scores, k):
    """Indices of the k largest scores; ties go to the lower index."""
    pairs = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return set(pairs[:k])


def confusion_loops(pred, truth, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        cm[int(t), int(p)] += 1
    return cm


def metrics_from_confusion(cm):
    """(top1, per-class IoU list, mIoU over present classes) from explicit sums."""
    k = cm.shape[0]
    total = 0
    correct = 0
    ious = []
    for c in range(k):
        tp = cm[c, c]
        fn = sum(cm[c, j] for j in range(k) if j != c)
        fp = sum(cm[i, c] for i in range(k) if i != c)
        correct += tp
        total += sum(cm[c, j] for j in range(k))
        if tp + fn > 0:
            ious.append(tp / (tp + fp + fn))
    return correct / total, ious, sum(ious) / len(ious)


def ssim_global(x, y, c1, c2):
    """Global-statistics SSIM of two flat arrays, population moments."""
    x, y = np.ravel(x).astype(float), np.ravel(y).astype(float)
    n = x.size
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def kl_loops(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def softmax_list(v):
    m = max(v)
    e = [math.exp(a - m) for a in v]
    s = sum(e)
    return [a / s for a in e]


def haar_matrix(n):
    """Orthonormal one-level Haar analysis matrix for length-n signals (n even)."""
    h = np.zeros((n, n))
    r = 1 / math.sqrt(2)
    for i in range(n // 2):
        h[i, 2 * i] = h[i, 2 * i + 1] = r
        h[n // 2 + i, 2 * i] = r
        h[n // 2 + i, 2 * i + 1] = -r
    return h
