"""Fusion quality metrics on 8-bit rasters.

``F`` is the fused image, ``A`` the infrared source, ``B`` the visible
source.  Every metric takes 2-D arrays of integer grey levels in [0, 255]
and computes in float64.  Definitions:

AG
    Mean over the (H-1) x (W-1) forward-difference grid of
    ``sqrt((dx^2 + dy^2) / 2)`` (``sqrt(dx^2 + dy^2)`` with ``root2=False``).
EN
    Shannon entropy in bits of the 256-bin grey-level histogram.
SD
    Population standard deviation.
MI
    ``MI(F, A) + MI(F, B)``, each from the 256 x 256 joint grey-level
    histogram, in bits.
SF
    ``sqrt(RF^2 + CF^2)``; RF / CF are the RMS of horizontal / vertical
    first differences over their own grids.
NCIE
    Each image is rank-equalised into 256 equally populated bins (stable
    sort, ties broken in raster order).  ``NCC(X, Y) = H(X) + H(Y) - H(X, Y)``
    with base-256 logarithms.  ``R`` is the 3 x 3 matrix with unit diagonal
    and NCC off-diagonals; with eigenvalues ``l_i``,
    ``NCIE = 1 + sum (l_i / 3) log_256 (l_i / 3)``.  The result is exactly 1
    for ``F = A = B`` when the pixel count is a multiple of 256.
Qabf
    Xydeas-Petrovic edge preservation.  Sobel responses (reflect borders)
    give strength ``g`` and orientation ``alpha = atan(sy / sx)``
    (``pi / 2`` where ``sx = 0``).  Relative strength is ``min/max`` of the
    two strengths; orientation agreement is ``1 - d / (pi / 2)`` with ``d``
    the angular distance modulo pi.  Preservation is the product of the
    sigmoids ``Gamma / (1 + exp(kappa (x - sigma)))`` and is 0 wherever the
    fused image has no edge.  The score is the strength-weighted mean over
    both sources; no edges at all gives 0.
VIF
    Pixel-domain visual information fidelity over four dyadic scales with
    Gaussian windows of size 17, 9, 5, 3 (sigma = size / 5, reflect
    borders, 2x decimation between scales) and noise variance 2.  At each
    scale the information of both sources is pooled,
    ``(num_A + num_B) / (den_A + den_B)``; scales with no source
    information are dropped and the rest averaged.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError

METRIC_NAMES = ("ag", "en", "sd", "mi", "sf", "ncie", "qabf", "vif")

QABF_CONSTANTS = dict(gamma_g=0.9994, kappa_g=-15.0, sigma_g=0.5, gamma_a=0.9879, kappa_a=-22.0, sigma_a=0.8)
VIF_NOISE_VAR = 2.0
VIF_EPS = 1e-10
NCIE_BINS = 256

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass
class MetricReport:
    ag: float
    en: float
    sd: float
    mi: float
    sf: float
    ncie: float
    qabf: float
    vif: float

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_NAMES]


def _image(img, name: str = "image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D grey raster, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"{name} values must lie in [0, 255]")
    return arr.astype(np.float64)


def _triple(f, a, b):
    f, a, b = _image(f, "fused"), _image(a, "infrared"), _image(b, "visible")
    if not f.shape == a.shape == b.shape:
        raise DimensionError(f"shapes differ: fused {f.shape}, infrared {a.shape}, visible {b.shape}")
    return f, a, b


def _entropy(p: np.ndarray, base: float = 2.0) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(base))


def _levels(x: np.ndarray) -> np.ndarray:
    return np.rint(x).astype(np.int64).ravel()


def ag(f, root2: bool = True) -> float:
    f = _image(f)
    if min(f.shape) < 2:
        return 0.0
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    sq = dx ** 2 + dy ** 2
    return float(np.sqrt(sq / 2 if root2 else sq).mean())


def en(f) -> float:
    levels = _levels(_image(f))
    return _entropy(np.bincount(levels, minlength=256) / levels.size)


def sd(f) -> float:
    return float(np.std(_image(f)))


def _joint_hist(x: np.ndarray, y: np.ndarray, bins: int = 256) -> np.ndarray:
    joint = np.bincount(x * bins + y, minlength=bins * bins).reshape(bins, bins)
    return joint / x.size


def mutual_information(x, y) -> float:
    """MI in bits between two rasters from their 256-bin joint histogram."""
    p = _joint_hist(_levels(_image(x)), _levels(_image(y)))
    return _entropy(p.sum(axis=1)) + _entropy(p.sum(axis=0)) - _entropy(p.ravel())


def mi(f, a, b) -> float:
    f, a, b = _triple(f, a, b)
    return mutual_information(f, a) + mutual_information(f, b)


def sf(f) -> float:
    f = _image(f)
    rf2 = np.mean((f[:, 1:] - f[:, :-1]) ** 2) if f.shape[1] > 1 else 0.0
    cf2 = np.mean((f[1:, :] - f[:-1, :]) ** 2) if f.shape[0] > 1 else 0.0
    return float(np.sqrt(rf2 + cf2))


def rank_bins(x: np.ndarray, bins: int = NCIE_BINS) -> np.ndarray:
    """Equal-population bin index of every pixel (stable rank order)."""
    flat = x.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.int64)
    ranks[order] = np.arange(flat.size)
    return ranks * bins // flat.size


def ncc(x, y, bins: int = NCIE_BINS) -> float:
    """Nonlinear correlation coefficient of two rasters."""
    rx, ry = rank_bins(np.asarray(x, dtype=np.float64), bins), rank_bins(np.asarray(y, dtype=np.float64), bins)
    p = _joint_hist(rx, ry, bins)
    return _entropy(p.sum(axis=1), bins) + _entropy(p.sum(axis=0), bins) - _entropy(p.ravel(), bins)


def ncie_from_matrix(r: np.ndarray) -> float:
    lam = np.clip(np.linalg.eigvalsh(np.asarray(r, dtype=np.float64)), 0.0, None)
    return 1.0 - _entropy(lam / lam.sum(), NCIE_BINS)


def ncie(f, a, b) -> float:
    f, a, b = _triple(f, a, b)
    imgs = (f, a, b)
    r = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            r[i, j] = r[j, i] = ncc(imgs[i], imgs[j])
    return ncie_from_matrix(r)


def _sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sx = ndimage.correlate(x, _SOBEL_X, mode="reflect")
    sy = ndimage.correlate(x, _SOBEL_Y, mode="reflect")
    strength = np.hypot(sx, sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(sx == 0, np.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return strength, angle


def _preservation(g_src, a_src, g_f, a_f, c=QABF_CONSTANTS) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    rel_g = np.divide(np.minimum(g_src, g_f), hi, out=np.zeros_like(hi), where=hi > 0)
    d = np.abs(a_src - a_f) % np.pi
    d = np.minimum(d, np.pi - d)
    rel_a = 1.0 - d / (np.pi / 2)
    q_g = c["gamma_g"] / (1.0 + np.exp(c["kappa_g"] * (rel_g - c["sigma_g"])))
    q_a = c["gamma_a"] / (1.0 + np.exp(c["kappa_a"] * (rel_a - c["sigma_a"])))
    return np.where(g_f > 0, q_g * q_a, 0.0)


def qabf(f, a, b) -> float:
    f, a, b = _triple(f, a, b)
    g_f, a_f = _sobel(f)
    g_a, a_a = _sobel(a)
    g_b, a_b = _sobel(b)
    weight = g_a.sum() + g_b.sum()
    if weight == 0:
        return 0.0
    num = (_preservation(g_a, a_a, g_f, a_f) * g_a).sum() + (_preservation(g_b, a_b, g_f, a_f) * g_b).sum()
    return float(num / weight)


def gaussian_window(size: int) -> np.ndarray:
    sigma = size / 5.0
    half = (size - 1) / 2.0
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(float).eps * h.max()] = 0
    return h / h.sum()


def _vif_terms(ref: np.ndarray, dist: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    blur = lambda z: ndimage.correlate(z, win, mode="reflect")  # noqa: E731
    mu1, mu2 = blur(ref), blur(dist)
    s1 = blur(ref * ref) - mu1 * mu1
    s2 = blur(dist * dist) - mu2 * mu2
    s12 = blur(ref * dist) - mu1 * mu2
    s1[s1 < 0] = 0
    s2[s2 < 0] = 0

    g = s12 / (s1 + VIF_EPS)
    sv = s2 - g * s12
    flat_ref = s1 < VIF_EPS
    g[flat_ref] = 0
    sv[flat_ref] = s2[flat_ref]
    s1[flat_ref] = 0
    flat_dist = s2 < VIF_EPS
    g[flat_dist] = 0
    sv[flat_dist] = 0
    neg = g < 0
    sv[neg] = s2[neg]
    g[neg] = 0
    sv[sv <= VIF_EPS] = VIF_EPS

    num = np.log10(1 + g * g * s1 / (sv + VIF_NOISE_VAR)).sum()
    den = np.log10(1 + s1 / VIF_NOISE_VAR).sum()
    return float(num), float(den)


def vif(f, a, b) -> float:
    f, a, b = _triple(f, a, b)
    ratios = []
    for scale in range(1, 5):
        win = gaussian_window(2 ** (5 - scale) + 1)
        if scale > 1:
            f, a, b = (ndimage.correlate(z, win, mode="reflect")[::2, ::2] for z in (f, a, b))
        num_a, den_a = _vif_terms(a, f, win)
        num_b, den_b = _vif_terms(b, f, win)
        if den_a + den_b > 0:
            ratios.append((num_a + num_b) / (den_a + den_b))
    return float(np.mean(ratios)) if ratios else 0.0


def evaluate(f, a, b) -> MetricReport:
    f, a, b = _triple(f, a, b)
    return MetricReport(
        ag=ag(f), en=en(f), sd=sd(f), mi=mi(f, a, b), sf=sf(f),
        ncie=ncie(f, a, b), qabf=qabf(f, a, b), vif=vif(f, a, b),
    )


def mean_report(reports) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("cannot average an empty set of metric reports")
    # fsum makes the mean independent of dataset order.
    n = len(reports)
    return MetricReport(*(math.fsum(getattr(r, k) for r in reports) / n for k in METRIC_NAMES))


def evaluate_batch(triples) -> tuple[list[MetricReport], MetricReport]:
    """Per-image reports and their dataset mean for ``(F, A, B)`` triples."""
    reports = [evaluate(f, a, b) for f, a, b in triples]
    return reports, mean_report(reports)
