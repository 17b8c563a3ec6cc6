"""Scalar-loop reference implementations used as independent test oracles.

Everything here works on single samples as float64 numpy arrays laid out
``(C, H, W)`` and never calls torch ops, so it shares no code path with the
library.  Weights are read out of the torch modules once.
"""
import math

import numpy as np


def w(param):
    return param.detach().cpu().double().numpy()


def conv2d(x, weight, bias, stride=1, pad=None):
    c_in, h, wd = x.shape
    c_out, _, k, _ = weight.shape
    pad = k // 2 if pad is None else pad
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                xp[c, i + pad, j + pad] = x[c, i, j]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += weight[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def prelu(x, slope):
    out = np.empty_like(x)
    for idx, v in np.ndenumerate(x):
        out[idx] = v if v >= 0 else slope * v
    return out


def leaky(x, slope):
    return prelu(x, slope)


def sigmoid(x):
    out = np.empty_like(x)
    for idx, v in np.ndenumerate(x):
        out[idx] = 1.0 / (1.0 + math.exp(-v))
    return out


def softmax_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    oa, ob = np.empty_like(a), np.empty_like(b)
    for idx in np.ndindex(a.shape):
        m = max(a[idx], b[idx])
        ea, eb = math.exp(a[idx] - m), math.exp(b[idx] - m)
        oa[idx], ob[idx] = ea / (ea + eb), eb / (ea + eb)
    return oa, ob


def _seq_conv_prelu_conv(vec, seq):
    conv1, act, conv2 = seq[0], seq[1], seq[2]
    x = vec.reshape(-1, 1, 1)
    x = conv2d(x, w(conv1.weight), w(conv1.bias), pad=0)
    x = prelu(x, float(act.weight.item()))
    x = conv2d(x, w(conv2.weight), w(conv2.bias), pad=0)
    return x.reshape(-1)


def channel_gate(x, gate):
    c, h, wd = x.shape
    avg = np.zeros(c)
    mx = np.full(c, -np.inf)
    for ch in range(c):
        s = 0.0
        for i in range(h):
            for j in range(wd):
                s += x[ch, i, j]
                mx[ch] = max(mx[ch], x[ch, i, j])
        avg[ch] = s / (h * wd)
    a = _seq_conv_prelu_conv(avg, gate.avg_branch)
    m = _seq_conv_prelu_conv(mx, gate.max_branch)
    merged = conv2d(np.concatenate([a, m]).reshape(-1, 1, 1), w(gate.merge.weight), w(gate.merge.bias), pad=0)
    return sigmoid(merged.reshape(-1))


def spatial_gate(x, gate):
    c, h, wd = x.shape
    pooled = np.zeros((2, h, wd))
    for i in range(h):
        for j in range(wd):
            vals = [x[ch, i, j] for ch in range(c)]
            pooled[0, i, j] = sum(vals) / c
            pooled[1, i, j] = max(vals)
    return sigmoid(conv2d(pooled, w(gate.merge.weight), w(gate.merge.bias)))[0]


def scale_channels(x, coeffs):
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        out[ch] = x[ch] * coeffs[ch]
    return out


def scale_pixels(x, coeffs):
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                out[ch, i, j] = x[ch, i, j] * coeffs[i, j]
    return out


def interactive(phi_m, phi_n, module):
    if module.channel_m is not None:
        bm, bn = softmax_pair(channel_gate(phi_m, module.channel_m), channel_gate(phi_n, module.channel_n))
        m_ca, n_ca = scale_channels(phi_m, bm), scale_channels(phi_n, bn)
    else:
        m_ca, n_ca = phi_m, phi_n
    if module.spatial_m is not None:
        sm, sn = softmax_pair(spatial_gate(m_ca, module.spatial_m), spatial_gate(n_ca, module.spatial_n))
        m_sa = scale_pixels(m_ca, sm)
        n_sa = scale_pixels(m_ca if module.literal_eq12 else n_ca, sn)
    else:
        m_sa, n_sa = m_ca, n_ca
    return np.concatenate([m_sa, n_sa], axis=0)


def compensatory(x, module):
    if module.channel is not None:
        x = scale_channels(x, channel_gate(x, module.channel))
    if module.spatial is not None:
        x = scale_pixels(x, spatial_gate(x, module.spatial))
    return x


def conv_prelu(x, block):
    conv, act = block[0], block[1]
    return prelu(conv2d(x, w(conv.weight), w(conv.bias), stride=conv.stride[0]), float(act.weight.item()))


def upsample2(x):
    c, h, wd = x.shape
    out = np.zeros((c, 2 * h, 2 * wd))
    for ch in range(c):
        for i in range(2 * h):
            for j in range(2 * wd):
                out[ch, i, j] = x[ch, i // 2, j // 2]
    return out


def generator(ir, vis, net):
    """Hand-unrolled forward of a Generator for one (H, W) pair."""
    f_ir, f_vis, x_cat = ir[None], vis[None], np.stack([ir, vis])
    feats_ir, feats_vis, feats_cat = [], [], []
    for level in range(4):
        f_ir = conv_prelu(f_ir, net.ir_convs[level])
        f_vis = conv_prelu(f_vis, net.vis_convs[level])
        f_cat = conv_prelu(x_cat, net.cat_convs[level])
        feats_ir.append(f_ir)
        feats_vis.append(f_vis)
        feats_cat.append(f_cat)
        if level < 3:
            phi_m = np.concatenate([f_ir, f_cat])
            phi_n = np.concatenate([f_vis, f_cat])
            if net.interact is not None:
                x_cat = interactive(phi_m, phi_n, net.interact[level])
            else:
                x_cat = np.concatenate([phi_m, phi_n])

    def comp(level):
        a, b = feats_ir[level - 1], feats_vis[level - 1]
        if net.comp_ir is not None:
            a = compensatory(a, net.comp_ir[str(level)])
        if net.comp_vis is not None:
            b = compensatory(b, net.comp_vis[str(level)])
        return a, b

    a, b = comp(4)
    x = np.concatenate([feats_cat[3], a, b])
    x = upsample2(conv_prelu(x, net.dec1))
    a, b = comp(3)
    x = np.concatenate([x, a, b])
    x = upsample2(conv_prelu(x, net.dec2))
    a, b = comp(2)
    x = np.concatenate([x, a, b])
    x = conv_prelu(x, net.dec3)
    x = conv2d(x, w(net.dec4.weight), w(net.dec4.bias))
    out = np.empty_like(x[0])
    for idx, v in np.ndenumerate(x[0]):
        out[idx] = math.tanh(v)
    return out


def critic(img, net):
    x = img[None]
    slope = net.spec.leaky_slope
    for conv in net.convs:
        x = leaky(conv2d(x, w(conv.weight), w(conv.bias), stride=conv.stride[0]), slope)
    flat = x.reshape(-1)
    weight, bias = w(net.fc.weight)[0], w(net.fc.bias)[0]
    acc = bias
    for k in range(flat.size):
        acc += weight[k] * flat[k]
    return acc


# ---------------------------------------------------------------- losses


def forward_gradient(img):
    h, wd = img.shape
    dx = np.zeros((h, wd))
    dy = np.zeros((h, wd))
    for i in range(h):
        for j in range(wd):
            if j + 1 < wd:
                dx[i, j] = img[i, j + 1] - img[i, j]
            if i + 1 < h:
                dy[i, j] = img[i + 1, j] - img[i, j]
    return dx, dy


# ---------------------------------------------------------------- metrics


def ag(f):
    h, wd = f.shape
    total = 0.0
    for i in range(h - 1):
        for j in range(wd - 1):
            dx = float(f[i, j + 1]) - float(f[i, j])
            dy = float(f[i + 1, j]) - float(f[i, j])
            total += math.sqrt((dx * dx + dy * dy) / 2)
    return total / ((h - 1) * (wd - 1))


def entropy_of_counts(counts, n, base=2.0):
    e = 0.0
    for c in counts:
        if c:
            p = c / n
            e -= p * math.log(p, base)
    return e


def en(f):
    counts = [0] * 256
    for v in np.asarray(f).ravel():
        counts[int(v)] += 1
    return entropy_of_counts(counts, f.size)


def sd(f):
    vals = [float(v) for v in np.asarray(f).ravel()]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def mi_pair(x, y):
    n = x.size
    joint, px, py = {}, {}, {}
    for a, b in zip(np.asarray(x).ravel(), np.asarray(y).ravel()):
        a, b = int(a), int(b)
        joint[(a, b)] = joint.get((a, b), 0) + 1
        px[a] = px.get(a, 0) + 1
        py[b] = py.get(b, 0) + 1
    total = 0.0
    for (a, b), c in joint.items():
        p = c / n
        total += p * math.log2(p / ((px[a] / n) * (py[b] / n)))
    return total


def mi(f, a, b):
    return mi_pair(f, a) + mi_pair(f, b)


def sf(f):
    h, wd = f.shape
    rf = sum((float(f[i, j]) - float(f[i, j - 1])) ** 2 for i in range(h) for j in range(1, wd)) / (h * (wd - 1))
    cf = sum((float(f[i, j]) - float(f[i - 1, j])) ** 2 for i in range(1, h) for j in range(wd)) / ((h - 1) * wd)
    return math.sqrt(rf + cf)


def rank_bins(x, bins=256):
    flat = [float(v) for v in np.asarray(x).ravel()]
    n = len(flat)
    order = sorted(range(n), key=lambda k: (flat[k], k))
    out = [0] * n
    for rank, k in enumerate(order):
        out[k] = rank * bins // n
    return out


def ncc(x, y, bins=256):
    rx, ry = rank_bins(x, bins), rank_bins(y, bins)
    n = len(rx)
    cx, cy, cj = {}, {}, {}
    for a, b in zip(rx, ry):
        cx[a] = cx.get(a, 0) + 1
        cy[b] = cy.get(b, 0) + 1
        cj[(a, b)] = cj.get((a, b), 0) + 1
    return (entropy_of_counts(cx.values(), n, bins) + entropy_of_counts(cy.values(), n, bins)
            - entropy_of_counts(cj.values(), n, bins))


def ncie(f, a, b):
    imgs = [f, a, b]
    r = np.eye(3)
    for i in range(3):
        for j in range(3):
            if i != j:
                r[i, j] = ncc(imgs[i], imgs[j])
    total = 1.0
    for lam in np.linalg.eigvals(r).real:
        p = max(lam, 0.0) / 3
        if p > 0:
            total += p * math.log(p, 256)
    return total


def _reflect(k, n):
    # scipy "reflect": (d c b a | a b c d | d c b a)
    period = 2 * n
    k %= period
    return k if k < n else period - 1 - k


def correlate_reflect(img, kernel):
    h, wd = img.shape
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros((h, wd))
    for i in range(h):
        for j in range(wd):
            acc = 0.0
            for di in range(kh):
                for dj in range(kw):
                    acc += kernel[di, dj] * img[_reflect(i + di - ch, h), _reflect(j + dj - cw, wd)]
            out[i, j] = acc
    return out


def qabf(f, a, b):
    """Per-pixel transcription of the Xydeas-Petrovic score."""
    sx_k = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    sy_k = sx_k.T
    Tg, kg, Dg, Ta, ka, Da = 0.9994, -15.0, 0.5, 0.9879, -22.0, 0.8

    def edges(img):
        img = np.asarray(img, dtype=np.float64)
        return correlate_reflect(img, sx_k), correlate_reflect(img, sy_k)

    fx, fy = edges(f)
    num = den = 0.0
    for src in (a, b):
        sx, sy = edges(src)
        h, wd = sx.shape
        for i in range(h):
            for j in range(wd):
                g_s = math.sqrt(sx[i, j] ** 2 + sy[i, j] ** 2)
                g_f = math.sqrt(fx[i, j] ** 2 + fy[i, j] ** 2)
                den += g_s
                if g_f == 0 or g_s == 0:
                    continue
                al_s = math.pi / 2 if sx[i, j] == 0 else math.atan(sy[i, j] / sx[i, j])
                al_f = math.pi / 2 if fx[i, j] == 0 else math.atan(fy[i, j] / fx[i, j])
                g_rel = g_f / g_s if g_s > g_f else g_s / g_f
                d = abs(al_s - al_f)
                if d > math.pi / 2:
                    d = math.pi - d
                a_rel = 1 - d / (math.pi / 2)
                q = Tg / (1 + math.exp(kg * (g_rel - Dg))) * Ta / (1 + math.exp(ka * (a_rel - Da)))
                num += q * g_s
    return num / den if den else 0.0


def gaussian(size):
    sigma = size / 5.0
    half = (size - 1) / 2.0
    k = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            y, x = i - half, j - half
            k[i, j] = math.exp(-(x * x + y * y) / (2 * sigma * sigma))
    peak = k.max()
    k[k < np.finfo(float).eps * peak] = 0
    return k / k.sum()


def _vif_scale(ref, dist, win, eps=1e-10, noise=2.0):
    mu1 = correlate_reflect(ref, win)
    mu2 = correlate_reflect(dist, win)
    e11 = correlate_reflect(ref * ref, win)
    e22 = correlate_reflect(dist * dist, win)
    e12 = correlate_reflect(ref * dist, win)
    num = den = 0.0
    h, wd = ref.shape
    for i in range(h):
        for j in range(wd):
            s1 = max(e11[i, j] - mu1[i, j] ** 2, 0.0)
            s2 = max(e22[i, j] - mu2[i, j] ** 2, 0.0)
            s12 = e12[i, j] - mu1[i, j] * mu2[i, j]
            g = s12 / (s1 + eps)
            sv = s2 - g * s12
            if s1 < eps:
                g, sv, s1 = 0.0, s2, 0.0
            if s2 < eps:
                g, sv = 0.0, 0.0
            if g < 0:
                sv, g = s2, 0.0
            if sv <= eps:
                sv = eps
            num += math.log10(1 + g * g * s1 / (sv + noise))
            den += math.log10(1 + s1 / noise)
    return num, den


def vif(f, a, b):
    f, a, b = (np.asarray(z, dtype=np.float64) for z in (f, a, b))
    ratios = []
    for scale in range(1, 5):
        win = gaussian(2 ** (5 - scale) + 1)
        if scale > 1:
            f, a, b = (correlate_reflect(z, win)[::2, ::2] for z in (f, a, b))
        na, da = _vif_scale(a, f, win)
        nb, db = _vif_scale(b, f, win)
        if da + db > 0:
            ratios.append((na + nb) / (da + db))
    return sum(ratios) / len(ratios) if ratios else 0.0
