"""Slow scalar-loop references used to pin the vectorized implementations."""

import math

import numpy as np
import torch


def keys(x, a=-0.5):
    x = abs(float(x))
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def feats_np(phi, img):
    """Features of a single 3xHxW image as float64 numpy arrays."""
    with torch.no_grad():
        return [f[0].double().numpy() for f in phi(img.unsqueeze(0))]


def mean_abs_loop(a, b):
    total = 0.0
    n = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += abs(x - y)
        n += 1
    return total / n


def contrastive_loop(anchor, positive, negatives, phi, weights, eps=1e-8):
    b = anchor.shape[0]
    out = 0.0
    for i in range(b):
        fa = feats_np(phi, anchor[i])
        fp = feats_np(phi, positive[i])
        fns = [feats_np(phi, negatives[k, i]) for k in range(negatives.shape[0])]
        for j, w in enumerate(weights):
            num = mean_abs_loop(fa[j], fp[j])
            den = sum(mean_abs_loop(fa[j], fn[j]) for fn in fns)
            out += w * num / (den + eps)
    return out / b


def perceptual_loop(o, gt, phi, weights):
    b = o.shape[0]
    out = 0.0
    for i in range(b):
        fo, fg = feats_np(phi, o[i]), feats_np(phi, gt[i])
        for j, w in enumerate(weights):
            out += w * mean_abs_loop(fo[j], fg[j])
    return out / b


def infonce_loop(anchor, positive, negatives, phi, temperature):
    def emb(img):
        v = feats_np(phi, img)[-1].ravel()
        return v / math.sqrt(sum(x * x for x in v))

    total = 0.0
    for i in range(anchor.shape[0]):
        a = emb(anchor[i])
        sims = [float(np.dot(a, emb(positive[i])))]
        sims += [float(np.dot(a, emb(negatives[k, i]))) for k in range(negatives.shape[0])]
        logits = [s / temperature for s in sims]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        total += lse - logits[0]
    return total / anchor.shape[0]


def l1_loop(a, b):
    a, b = a.double().numpy(), b.double().numpy()
    return mean_abs_loop(a, b)


def resize_loop(img, out_h, out_w, antialias=True):
    """Direct kernel-sum resampler, one output pixel at a time (2-D numpy plane)."""
    in_h, in_w = img.shape

    def taps(in_len, out_len, o):
        s = out_len / in_len
        shrink = s < 1 and antialias
        k = (lambda x: s * keys(s * x)) if shrink else keys
        support = 2.0 / s if shrink else 2.0
        u = (o + 1) / s + 0.5 * (1 - 1 / s)  # 1-based source coordinate
        out = []
        j = math.floor(u - support) - 1
        while j <= math.ceil(u + support) + 1:
            w = k(u - j)
            if w != 0.0:
                out.append((min(max(j, 1), in_len) - 1, w))
            j += 1
        total = sum(w for _, w in out)
        return [(i, w / total) for i, w in out]

    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        ty = taps(in_h, out_h, y)
        for x in range(out_w):
            tx = taps(in_w, out_w, x)
            acc = 0.0
            for iy, wy in ty:
                for ix, wx in tx:
                    acc += wy * wx * img[iy, ix]
            out[y, x] = acc
    return out


def psnr_loop(a, b, shave=0):
    h, w = a.shape
    se, n = 0.0, 0
    for y in range(shave, h - shave):
        for x in range(shave, w - shave):
            se += (float(a[y, x]) - float(b[y, x])) ** 2
            n += 1
    mse = se / n
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


def ssim_loop(a, b, size=11, sigma=1.5):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = [[math.exp(-((i - size // 2) ** 2 + (j - size // 2) ** 2) / (2 * sigma ** 2))
          for j in range(size)] for i in range(size)]
    gs = sum(map(sum, g))
    g = [[v / gs for v in row] for row in g]
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(size):
                for j in range(size):
                    p, q, wt = a[y + i, x + j], b[y + i, x + j], g[i][j]
                    ma += wt * p
                    mb += wt * q
                    saa += wt * p * p
                    sbb += wt * q * q
                    sab += wt * p * q
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
