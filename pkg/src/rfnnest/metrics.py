"""Objective fusion-quality metrics: En, SD, MI, Nabf, SCD and MS-SSIM.

Images are 2D float arrays in [0, 1]. Histogram-based metrics quantise to
256 bins with ``floor(v * 255.999)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import convolve

from .autograd import gaussian_window
from .errors import InputError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRIC_COLUMNS = ("En", "SD", "MI", "Nabf", "SCD", "MS-SSIM")


def _image(x, name: str = "image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise InputError(f"{name} must be a single-channel 2D image, got shape {np.shape(x)}")
    if arr.size == 0:
        raise InputError(f"{name} is empty")
    return arr


def _same_dims(*imgs: np.ndarray) -> None:
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise InputError(f"image dimensions differ: {sorted(shapes)}")


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img * 255.999), 0, 255).astype(np.int64)


def entropy(img) -> float:
    img = _image(img)
    p = np.bincount(quantize(img).ravel(), minlength=256) / img.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def sd(img) -> float:
    """Population standard deviation on the 0-255 scale."""
    img = _image(img)
    return float(img.std() * 255.0)


def mutual_information(x, y) -> float:
    """MI in bits from the 256x256 joint histogram."""
    x, y = _image(x), _image(y)
    _same_dims(x, y)
    joint = np.bincount((quantize(x) * 256 + quantize(y)).ravel(), minlength=256 * 256).reshape(256, 256)
    pxy = joint / x.size
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float((pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])).sum()) + 0.0


def mi(fused, ir, vi) -> float:
    return mutual_information(fused, ir) + mutual_information(fused, vi)


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation, or None when either input is constant."""
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return None
    return float((a * b).sum() / den)


def scd(fused, ir, vi, return_flag: bool = False):
    """Sum of correlations of differences. A constant difference image contributes 0 and sets the flag."""
    fused, ir, vi = _image(fused, "fused"), _image(ir, "ir"), _image(vi, "vi")
    _same_dims(fused, ir, vi)
    r1 = pearson(fused - vi, ir)
    r2 = pearson(fused - ir, vi)
    flagged = r1 is None or r2 is None
    value = (r1 or 0.0) + (r2 or 0.0)
    return (value, flagged) if return_flag else value


# ---------------------------------------------------------------------------
# Nabf
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NabfParams:
    """Constants of Kumar's modified artifact measure (Petrovic edge-preservation model)."""

    td: float = 2.0
    lg: float = 1.5
    nrg: float = 0.9999
    kg: float = 19.0
    sigmag: float = 0.5
    nra: float = 0.9995
    ka: float = 22.0
    sigmaa: float = 0.5
    scale: float = 255.0


SOBEL_V = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8
SOBEL_H = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64) / 8


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edge strength and orientation in [-pi/2, pi/2], mirror-extended borders."""
    gv = convolve(img, SOBEL_V, mode="mirror")
    gh = convolve(img, SOBEL_H, mode="mirror")
    g = np.sqrt(gh**2 + gv**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gh == 0, np.sign(gv) * (np.pi / 2), np.arctan(gv / np.where(gh == 0, 1.0, gh)))
    return g, alpha


def _preservation(g_src, a_src, g_f, a_f, p: NabfParams) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f, g_f / g_src, g_src / g_f)
    ratio = np.where((g_src == 0) | (g_f == 0), 0.0, ratio)
    orient = np.abs(np.abs(a_src - a_f) - np.pi / 2) * 2 / np.pi
    qg = p.nrg / (1 + np.exp(-p.kg * (ratio - p.sigmag)))
    qa = p.nra / (1 + np.exp(-p.ka * (orient - p.sigmaa)))
    return np.sqrt(qg * qa)


def nabf(fused, ir, vi, params: NabfParams = NabfParams()) -> float:
    """Fusion artifacts: edge mass in the fused image stronger than in both sources (lower is better)."""
    fused, ir, vi = _image(fused, "fused"), _image(ir, "ir"), _image(vi, "vi")
    _same_dims(fused, ir, vi)
    ga, aa = sobel(ir * params.scale)
    gb, ab = sobel(vi * params.scale)
    gf, af = sobel(fused * params.scale)
    qaf = _preservation(ga, aa, gf, af, params)
    qbf = _preservation(gb, ab, gf, af, params)
    wa = np.where(ga >= params.td, ga**params.lg, 0.0)
    wb = np.where(gb >= params.td, gb**params.lg, 0.0)
    total = float((wa + wb).sum())
    if total == 0.0:
        return 0.0
    artifact = (gf > ga) & (gf > gb)
    return float((artifact * ((1 - qaf) * wa + (1 - qbf) * wb)).sum() / total)


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM (numpy, non-differentiable)
# ---------------------------------------------------------------------------
def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = len(win)
    return sliding_window_view(sliding_window_view(x, k, axis=0) @ win, k, axis=1) @ win


def ssim_cs(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> tuple[float, float]:
    """(mean SSIM, mean contrast-structure term) over valid 11x11 Gaussian windows."""
    win = gaussian_window(11, 1.5)
    if min(x.shape) < len(win):
        raise InputError(f"image {x.shape} is smaller than the 11x11 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mx * my + c1) / (mx * mx + my * my + c1) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def ssim_index(x, y, data_range: float = 1.0) -> float:
    x, y = _image(x), _image(y)
    _same_dims(x, y)
    return ssim_cs(x, y, data_range)[0]


def ms_ssim_levels(shape: Sequence[int], max_levels: int = len(MS_SSIM_WEIGHTS)) -> int:
    side = min(shape)
    if side < 11:
        raise InputError(f"image {tuple(shape)} too small for MS-SSIM (needs at least 11 pixels per side)")
    levels = 1
    while levels < max_levels and side // 2**levels >= 11:
        levels += 1
    return levels


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(fused, ref, data_range: float = 1.0, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM. Small images use fewer levels with the leading weights renormalised."""
    x, y = _image(fused, "fused"), _image(ref, "ref")
    _same_dims(x, y)
    levels = ms_ssim_levels(x.shape, len(weights))
    w = np.asarray(weights[:levels], dtype=np.float64)
    w = w / w.sum()
    value = 1.0
    for lvl in range(levels):
        s, cs = ssim_cs(x, y, data_range)
        if lvl < levels - 1:
            value *= max(cs, 0.0) ** w[lvl]
            x, y = _halve(x), _halve(y)
        else:
            value *= max(s, 0.0) ** w[lvl]
    return float(value)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    name: str
    en: float
    sd: float
    mi: float
    nabf: float
    scd: float
    ms_ssim: float
    flags: list[str] = field(default_factory=list)

    def values(self) -> tuple[float, ...]:
        return (self.en, self.sd, self.mi, self.nabf, self.scd, self.ms_ssim)


def evaluate_all(fused, ir, vi, name: str = "", ms_ssim_reference: str = "mean",
                 nabf_params: NabfParams = NabfParams()) -> MetricReport:
    fused, ir, vi = _image(fused, "fused"), _image(ir, "ir"), _image(vi, "vi")
    _same_dims(fused, ir, vi)
    scd_value, scd_flag = scd(fused, ir, vi, return_flag=True)
    if ms_ssim_reference == "mean":
        mss = 0.5 * (ms_ssim(fused, ir) + ms_ssim(fused, vi))
    elif ms_ssim_reference == "vi":
        mss = ms_ssim(fused, vi)
    elif ms_ssim_reference == "ir":
        mss = ms_ssim(fused, ir)
    else:
        raise InputError(f"ms_ssim_reference must be 'mean', 'vi' or 'ir', got {ms_ssim_reference!r}")
    return MetricReport(
        name=name,
        en=entropy(fused),
        sd=sd(fused),
        mi=mi(fused, ir, vi),
        nabf=nabf(fused, ir, vi, nabf_params),
        scd=scd_value,
        ms_ssim=mss,
        flags=["scd_degenerate"] if scd_flag else [],
    )


def mean_report(reports: Sequence[MetricReport], name: str = "MEAN") -> MetricReport:
    if not reports:
        raise InputError("cannot average an empty list of reports")
    ordered = sorted(reports, key=lambda r: r.name)
    cols = np.array([r.values() for r in ordered], dtype=np.float64)
    means = [math.fsum(cols[:, j]) / len(ordered) for j in range(cols.shape[1])]
    flags = sorted({f for r in ordered for f in r.flags})
    return MetricReport(name, *means, flags=flags)


def format_csv(reports: Sequence[MetricReport], mean: MetricReport | None = None, label: str = "image") -> str:
    lines = [",".join((label,) + METRIC_COLUMNS)]
    rows = list(reports) + ([mean] if mean is not None else [])
    for r in rows:
        lines.append(",".join([r.name] + [f"{v:.6f}" for v in r.values()]))
    return "\n".join(lines) + "\n"


def report_dict(r: MetricReport) -> dict:
    return dataclasses.asdict(r)
