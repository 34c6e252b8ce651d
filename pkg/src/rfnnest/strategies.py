"""Handcrafted fusion rules that can stand in for the RFN blocks.

All strategies take two same-shape ``(N, C, H, W)`` numpy feature arrays
and return an array of that shape. Where a weight denominator vanishes the
two inputs are weighted 0.5/0.5.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InputError, NumericError


class StrategyKind(str, enum.Enum):
    ADD = "add"
    MAX = "max"
    L1_NORM = "l1_norm"
    NUCLEAR_NORM = "nuclear_norm"
    SCA = "sca"


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InputError(f"strategy inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise InputError(f"strategy inputs must be (N,C,H,W), got {a.shape}")


def ratio_weights(act_a: np.ndarray, act_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    total = act_a + act_b
    safe = np.where(total > 0, total, 1.0)
    wa = np.where(total > 0, act_a / safe, 0.5)
    return wa, 1.0 - wa


def fuse_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a, b)
    return a + b


def fuse_max(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a, b)
    return np.maximum(a, b)


def l1_activity(x: np.ndarray, radius: int = 1) -> np.ndarray:
    """Channel l1-norm per pixel, box-averaged over a (2r+1)^2 neighbourhood -> (N, 1, H, W)."""
    act = np.abs(x).sum(axis=1, keepdims=True)
    if radius > 0:
        act = uniform_filter(act, size=(1, 1, 2 * radius + 1, 2 * radius + 1), mode="nearest")
    return act


def fuse_l1norm(a: np.ndarray, b: np.ndarray, radius: int = 1) -> np.ndarray:
    _check(a, b)
    wa, wb = ratio_weights(l1_activity(a, radius), l1_activity(b, radius))
    return wa * a + wb * b


def nuclear_norms(x: np.ndarray) -> np.ndarray:
    """Sum of singular values of every H x W map -> (N, C)."""
    try:
        return np.linalg.svd(x, compute_uv=False).sum(axis=-1)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc


def fuse_nuclear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a, b)
    wa, wb = ratio_weights(nuclear_norms(a), nuclear_norms(b))
    return wa[..., None, None] * a + wb[..., None, None] * b


def fuse_sca(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Average of a spatial branch (per-pixel l1 weights) and a channel branch (global-average-pool weights)."""
    _check(a, b)
    sa, sb = ratio_weights(l1_activity(a, 0), l1_activity(b, 0))
    spatial = sa * a + sb * b
    ca, cb = ratio_weights(np.abs(a).mean(axis=(2, 3), keepdims=True), np.abs(b).mean(axis=(2, 3), keepdims=True))
    channel = ca * a + cb * b
    return 0.5 * (spatial + channel)


STRATEGIES = {
    StrategyKind.ADD: fuse_add,
    StrategyKind.MAX: fuse_max,
    StrategyKind.L1_NORM: fuse_l1norm,
    StrategyKind.NUCLEAR_NORM: fuse_nuclear,
    StrategyKind.SCA: fuse_sca,
}

# short names accepted on the command line
ALIASES = {"l1": StrategyKind.L1_NORM, "nuclear": StrategyKind.NUCLEAR_NORM}


def get_strategy(name: str):
    key = ALIASES.get(name)
    if key is None:
        try:
            key = StrategyKind(name)
        except ValueError:
            raise InputError(f"unknown fusion strategy {name!r}") from None
    return STRATEGIES[key]
