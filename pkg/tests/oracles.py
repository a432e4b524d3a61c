"""Slow, independent reference implementations used as test oracles.

Nothing here imports the code under test except plain data containers.
"""
import math

import numpy as np


def clamped_knots(g, k, lo, hi):
    # end knots are exactly lo and hi; lo + (hi - lo) * g / g can miss hi by an ulp
    inner = [lo + (hi - lo) * j / g for j in range(1, g)]
    return [lo] * (k + 1) + inner + [hi] * (k + 1)


def de_boor(i, k, t, x):
    """B_{i,k}(x) by direct recursion, 64-bit, 0/0 := 0.

    The last non-empty interval is treated as closed so x == hi is covered.
    """
    if k == 0:
        last = max(j for j in range(len(t) - 1) if t[j] < t[j + 1])
        if t[i] <= x < t[i + 1] or (i == last and x == t[i + 1]):
            return 1.0
        return 0.0
    left = right = 0.0
    if t[i + k] != t[i]:
        left = (x - t[i]) / (t[i + k] - t[i]) * de_boor(i, k - 1, t, x)
    if t[i + k + 1] != t[i + 1]:
        right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * de_boor(i + 1, k - 1, t, x)
    return left + right


def basis_row(g, k, lo, hi, x):
    t = clamped_knots(g, k, lo, hi)
    x = min(max(x, lo), hi)
    return np.array([de_boor(i, k, t, x) for i in range(g + k)])


def gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def silu(x):
    return x / (1.0 + math.exp(-x))


def conv2d(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for q in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, q, u, v] * xp[s, q, i * stride + u, j * stride + v]
                    out[s, o, i, j] = acc
    return out


def kan_linear(x, w, c, g, k, lo, hi):
    """y[n, q] = sum_p w[q, p] * (silu(x_p) + sum_i c[q, p, i] B_i(x_p))."""
    n, p_dim = x.shape
    q_dim = w.shape[0]
    y = np.zeros((n, q_dim))
    for s in range(n):
        for q in range(q_dim):
            total = 0.0
            for p in range(p_dim):
                b = basis_row(g, k, lo, hi, float(x[s, p]))
                spline = sum(c[q, p, i] * b[i] for i in range(len(b)))
                total += w[q, p] * (silu(float(x[s, p])) + spline)
            y[s, q] = total
    return y


def kan_mini(x, w_groups, bias, w_spline, g, k, groups, shared, literal, in_lo=0.0, in_hi=1.0):
    """Grouped linear + bias + spline term on u(x) = clamp((x-lo)/(hi-lo), 0, 1)."""
    n, n_in = x.shape
    m = bias.shape[0]
    gin, gout = n_in // groups, m // groups
    y = np.zeros((n, m))
    for s in range(n):
        for q in range(m):
            c = q // gout
            acc = float(bias[q])
            for jj in range(gin):
                acc += w_groups[c, q % gout, jj] * x[s, c * gin + jj]
            for j in range(n_in):
                u = min(max((float(x[s, j]) - in_lo) / (in_hi - in_lo), 0.0), 1.0)
                b = basis_row(g, k, 0.0, 1.0, u)
                row = w_spline[q] if shared else w_spline[q, j]
                term = sum(row[i] * b[i] for i in range(len(b)))
                if not shared and literal:
                    term *= x[s, j]
                acc += term
            y[s, q] = acc
    return y


def metrics(labels, preds, num_classes):
    """Macro precision/recall/F1 and accuracy with explicit loops."""
    precisions, recalls, f1s = [], [], []
    for c in range(num_classes):
        tp = fp = fn = 0
        for t, p in zip(labels, preds):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    correct = sum(1 for t, p in zip(labels, preds) if t == p)
    return {"accuracy": correct / len(labels),
            "precision": sum(precisions) / num_classes,
            "recall": sum(recalls) / num_classes,
            "f1": sum(f1s) / num_classes}
