"""Naive, loop-based reimplementations of every loss and metric.

These stay deliberately dumb (explicit Python loops, no vectorization, no
shared helpers with the package) so the fast implementations can be checked
against an independent path.
"""

import math

import numpy as np


def cm_loss_naive(y_hat, conf, y, lam):
    """Per-sample sum of c*|err| - lam*log(c), averaged over the batch."""
    y_hat, conf, y = (np.asarray(a, dtype=np.float64) for a in (y_hat, conf, y))
    batch = y_hat.reshape((-1,) + y_hat.shape[-3:]) if y_hat.ndim >= 4 else y_hat[None]
    conf_b = conf.reshape(batch.shape)
    y_b = y.reshape(batch.shape)
    totals = []
    for b in range(batch.shape[0]):
        acc = 0.0
        for c in range(batch.shape[1]):
            for i in range(batch.shape[2]):
                for j in range(batch.shape[3]):
                    cc = conf_b[b, c, i, j]
                    acc += cc * abs(batch[b, c, i, j] - y_b[b, c, i, j])
                    acc -= lam * math.log(cc)
        totals.append(acc)
    return sum(totals) / len(totals)


def l1_sum_naive(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    per_sample = []
    for s in range(a.shape[0]):
        acc = 0.0
        for v, w in zip(a[s].ravel(), b[s].ravel()):
            acc += abs(v - w)
        per_sample.append(acc)
    return sum(per_sample) / len(per_sample)


def gdl_naive(r, s):
    r, s = np.asarray(r, np.float64).ravel(), np.asarray(s, np.float64).ravel()
    inter = 0.0
    total = 0.0
    for a, b in zip(r, s):
        inter += a * b
        total += a + b
    if total == 0.0:
        return 0.0
    return 1.0 - 2.0 * inter / total


def multiclass_gdl_naive(r, s, class_dim=0):
    r, s = np.asarray(r, np.float64), np.asarray(s, np.float64)
    r = np.moveaxis(r, class_dim, 0)
    s = np.moveaxis(s, class_dim, 0)
    vals = [gdl_naive(r[c], s[c]) for c in range(r.shape[0])]
    return sum(vals) / len(vals)


def fm_naive(real_features, fake_features):
    """Sum over members and layers of mean squared feature differences."""
    total = 0.0
    for rf, ff in zip(real_features, fake_features):
        for fr, fk in zip(rf, ff):
            fr = np.asarray(fr, np.float64).ravel()
            fk = np.asarray(fk, np.float64).ravel()
            acc = 0.0
            for a, b in zip(fr, fk):
                acc += (a - b) ** 2
            total += acc / fr.size
    return total


def _bce_terms(z, target):
    # -log sigmoid(z) if target else -log(1 - sigmoid(z)), stable
    if target:
        return math.log1p(math.exp(-z)) if z > -30 else -z
    return math.log1p(math.exp(z)) if z < 30 else z


def adversarial_naive(real_logits, fake_logits):
    """(g_term, d_term) from per-member patch logit maps [B,1,h,w]."""
    g_total = 0.0
    d_total = 0.0
    for rl, fl in zip(real_logits, fake_logits):
        rl = np.asarray(rl, np.float64)
        fl = np.asarray(fl, np.float64)
        g_member = 0.0
        d_member = 0.0
        for b in range(rl.shape[0]):
            zr = rl[b].ravel().sum() / rl[b].size
            zf = fl[b].ravel().sum() / fl[b].size
            d_member += _bce_terms(zr, True) + _bce_terms(zf, False)
            g_member += _bce_terms(zf, True)
        g_total += g_member / rl.shape[0]
        d_total += d_member / rl.shape[0]
    return g_total, d_total


def pixel_accuracy_naive(y_hat, y, region, tau):
    hits = 0
    total = 0
    y_hat, y, region = (np.asarray(a) for a in (y_hat, y, region))
    for p, t, m in zip(y_hat.ravel(), y.ravel(), region.ravel()):
        if m > 0:
            total += 1
            if abs(float(p) - float(t)) <= tau:
                hits += 1
    if total == 0:
        raise ZeroDivisionError("empty region")
    return 100.0 * hits / total


def dice_naive(pred, gt, label):
    inter = 0
    np_, ng = 0, 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        pp, gg = p == label, g == label
        np_ += pp
        ng += gg
        inter += pp and gg
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def _boundary_naive(mask):
    mask = np.asarray(mask).astype(bool)
    pts = []
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            on_edge = i == 0 or i == h - 1 or j == 0 or j == w - 1
            if on_edge:
                pts.append((i, j))
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if not mask[i + di, j + dj]:
                    pts.append((i, j))
                    break
    return pts


def hd95_naive(pred, gt, label, spacing=(1.0, 1.0)):
    pb = _boundary_naive(np.asarray(pred) == label)
    gb = _boundary_naive(np.asarray(gt) == label)
    if not pb and not gb:
        return 0.0
    if not pb or not gb:
        h, w = np.asarray(pred).shape
        return math.sqrt((h * spacing[0]) ** 2 + (w * spacing[1]) ** 2)
    dists = []
    for (ai, aj) in pb:
        best = min(math.sqrt(((ai - bi) * spacing[0]) ** 2
                             + ((aj - bj) * spacing[1]) ** 2)
                   for (bi, bj) in gb)
        dists.append(best)
    for (bi, bj) in gb:
        best = min(math.sqrt(((ai - bi) * spacing[0]) ** 2
                             + ((aj - bj) * spacing[1]) ** 2)
                   for (ai, aj) in pb)
        dists.append(best)
    return float(np.percentile(dists, 95))
