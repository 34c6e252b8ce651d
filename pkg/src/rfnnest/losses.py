"""Training objectives for both stages.

Squared Frobenius terms are normalised by element count by default so that
the trade-off weights mean the same thing at any resolution; set
``normalize=False`` on the configs for the raw-norm variant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class Stage1LossConfig:
    lam: float = 100.0
    normalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")


@dataclass
class Stage2LossConfig:
    alpha: float = 700.0
    w1: list[float] = field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    w_vi: float = 3.0
    w_ir: float = 6.0
    normalize: bool = True

    def __post_init__(self):
        self.w1 = [float(v) for v in self.w1]
        if len(self.w1) != 4:
            raise ConfigError(f"w1 needs exactly 4 entries, got {len(self.w1)}")
        if self.alpha < 0 or self.w_ir < 0 or min(self.w1) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.w_vi <= 0:
            raise ConfigError("w_vi must be positive; with w_vi = 0 the detail and feature terms conflict")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_image(x) -> Tensor:
    x = _as_tensor(x)
    return x[None, None] if x.ndim == 2 else x


def ssim(x, y, data_range: float = 1.0) -> Tensor:
    """Mean SSIM index over all 11x11 Gaussian windows (valid positions only), differentiable in both inputs."""
    x, y = _as_image(x), _as_image(y)
    if x.shape != y.shape:
        raise InputError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    win = ag.gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = ag.gaussian_filter(x, win)
    mu_y = ag.gaussian_filter(y, win)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = ag.gaussian_filter(x * x, win) - mu_xx
    s_yy = ag.gaussian_filter(y * y, win) - mu_yy
    s_xy = ag.gaussian_filter(x * y, win) - mu_xy
    num = (2 * mu_xy + c1) * (2 * s_xy + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return (num / den).mean()


def _sq_norm(diff: Tensor, normalize: bool) -> Tensor:
    """Squared Frobenius norm per sample, averaged over the batch (or mean squared error when normalised)."""
    sq = diff * diff
    if normalize:
        return sq.mean()
    return sq.sum() * (1.0 / diff.shape[0])


def l_pixel(out, inp, normalize: bool = True) -> Tensor:
    out, inp = _as_tensor(out), _as_tensor(inp)
    if out.shape != inp.shape:
        raise InputError(f"l_pixel shape mismatch: {out.shape} vs {inp.shape}")
    return _sq_norm(out - inp, normalize)


def l_auto(out, inp, cfg: Stage1LossConfig | None = None) -> Tensor:
    cfg = cfg or Stage1LossConfig()
    return l_auto_terms(out, inp, cfg)[0]


def l_auto_terms(out, inp, cfg: Stage1LossConfig) -> tuple[Tensor, float, float]:
    """(total, pixel term, ssim term) so the training loop can log components."""
    pix = l_pixel(out, inp, cfg.normalize)
    if cfg.lam == 0:
        return pix, pix.item(), 0.0
    s = 1.0 - ssim(out, inp)
    return pix + cfg.lam * s, pix.item(), s.item()


def l_detail(fused, vi) -> Tensor:
    return 1.0 - ssim(fused, vi)


def l_feature(phi_f, phi_vi, phi_ir, cfg: Stage2LossConfig | None = None) -> Tensor:
    cfg = cfg or Stage2LossConfig()
    if not (len(phi_f) == len(phi_vi) == len(phi_ir) == len(cfg.w1)):
        raise InputError("feature sets must all have 4 scales")
    total = None
    for m, (f, v, i) in enumerate(zip(phi_f, phi_vi, phi_ir)):
        f, v, i = _as_tensor(f), _as_tensor(v), _as_tensor(i)
        if not (f.shape == v.shape == i.shape):
            raise InputError(f"scale {m + 1} shape mismatch: {f.shape}, {v.shape}, {i.shape}")
        term = cfg.w1[m] * _sq_norm(f - (cfg.w_vi * v + cfg.w_ir * i), cfg.normalize)
        total = term if total is None else total + term
    return total


def l_rfn(fused, vi, phi_f, phi_vi, phi_ir, cfg: Stage2LossConfig | None = None) -> Tensor:
    cfg = cfg or Stage2LossConfig()
    return l_rfn_terms(fused, vi, phi_f, phi_vi, phi_ir, cfg)[0]


def l_rfn_terms(fused, vi, phi_f, phi_vi, phi_ir, cfg: Stage2LossConfig) -> tuple[Tensor, float, float]:
    """(total, detail term, feature term)."""
    feat = l_feature(phi_f, phi_vi, phi_ir, cfg)
    if cfg.alpha == 0:
        with ag.no_grad():
            det = l_detail(fused, vi)
        return feat, det.item(), feat.item()
    det = l_detail(fused, vi)
    return cfg.alpha * det + feat, det.item(), feat.item()
