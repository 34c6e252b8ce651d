"""Finite-difference self-check of every differentiable op, every loss, the RFN block and the decoder.

Each entry is checked at float64 on three input shapes. Ops must agree with
central differences to 1e-4 relative error, the windowed SSIM-family losses
to 1e-3. The scalar objective for non-scalar ops is a fixed random projection
``sum(op(x) * r)`` so every output element contributes.

Ops are looked up on the :mod:`autograd` module at call time, so a patched op
is what gets checked.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import losses as L
from . import networks as nw
from .autograd import Tensor, grad_check

OP_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    kind: str  # "op" or "loss"
    worst: float
    tolerance: float
    shapes: list[tuple[int, ...]]

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tolerance


def _projected(op: Callable[[Tensor], Tensor], rng: np.random.Generator, out_shape) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out_shape))
    return lambda t: (op(t) * r).sum()


def _check_op(name, op, shapes, rng, eps=1e-6, sample=None) -> CheckResult:
    sample = sample or (lambda s: rng.normal(size=s))
    worst = 0.0
    for s in shapes:
        x = sample(s)
        with ag.no_grad():
            out_shape = op(Tensor(x)).shape
        worst = max(worst, grad_check(_projected(op, rng, out_shape), x, eps))
    return CheckResult(name, "op", worst, OP_TOL, list(shapes))


def _away_from(values: np.ndarray, points, margin: float = 1e-3) -> np.ndarray:
    """Nudge samples off non-differentiable points (ReLU/clamp kinks)."""
    out = values.copy()
    for p in points:
        near = np.abs(out - p) < margin
        out[near] = p + np.where(out[near] >= p, 2 * margin, -2 * margin)
    return out


def _op_checks(rng: np.random.Generator) -> list[CheckResult]:
    shapes4 = [(1, 2, 5, 6), (2, 3, 4, 4), (1, 1, 7, 5)]
    even4 = [(1, 2, 4, 6), (2, 3, 4, 4), (1, 1, 8, 2)]
    res = []
    other = {s: rng.normal(size=s) for s in shapes4}
    res.append(_check_op("add", lambda t: ag.add(t, Tensor(other[t.shape])), shapes4, rng))
    res.append(_check_op("neg", ag.neg, shapes4, rng))
    res.append(_check_op("mul", lambda t: ag.mul(t, Tensor(other[t.shape])), shapes4, rng))
    res.append(_check_op("div", lambda t: ag.div(Tensor(other[t.shape]), t), shapes4, rng,
                         sample=lambda s: rng.uniform(0.5, 2.0, size=s)))
    # relative error is ill-conditioned where 3x^2 vanishes, so keep |x| away from 0
    res.append(_check_op("power", lambda t: ag.power(t, 3.0), shapes4, rng,
                         sample=lambda s: rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.5, 2.0, size=s)))
    res.append(_check_op("sum", lambda t: ag.tsum(t * t), shapes4, rng))
    res.append(_check_op("mean", lambda t: ag.tmean(t * t), shapes4, rng))
    res.append(_check_op("getitem", lambda t: ag.getitem(t, (slice(None), slice(0, 1), slice(1, None))),
                         shapes4, rng))
    res.append(_check_op("clamp", lambda t: ag.clamp(t, -0.5, 0.5), shapes4, rng,
                         sample=lambda s: _away_from(rng.normal(size=s), (-0.5, 0.5))))
    res.append(_check_op("relu", ag.relu, shapes4, rng, sample=lambda s: _away_from(rng.normal(size=s), (0.0,))))

    for mode in ag.PAD_MODES:
        for k in (1, 3):
            ws = {s: Tensor(rng.normal(size=(2, s[1], k, k))) for s in shapes4}
            bs = Tensor(rng.normal(size=2))
            res.append(_check_op(f"conv2d[{mode}/k={k}/input]",
                                 lambda t, ws=ws, k=k, mode=mode: ag.conv2d(t, ws[t.shape], bs, k // 2, mode),
                                 shapes4, rng))
        xs = {s: Tensor(rng.normal(size=(1, s[1], 5, 6))) for s in [(2, 1, 3, 3), (3, 2, 3, 3), (2, 3, 1, 1)]}
        res.append(_check_op(f"conv2d[{mode}/weight]",
                             lambda t, xs=xs, mode=mode: ag.conv2d(xs[t.shape], t, None, t.shape[2] // 2, mode),
                             list(xs), rng))
    xb = Tensor(rng.normal(size=(2, 3, 4, 5)))
    wb = Tensor(rng.normal(size=(4, 3, 3, 3)))
    res.append(_check_op("conv2d[bias]", lambda t: ag.conv2d(xb, wb, t, 1, "reflect"), [(4,), (4,), (4,)], rng))

    res.append(_check_op("maxpool2", ag.maxpool2, even4, rng))
    res.append(_check_op("upsample2", ag.upsample2, shapes4, rng))
    res.append(_check_op("concat_channels",
                         lambda t: ag.concat_channels([t, Tensor(other[t.shape]) if t.shape in other else t, t]),
                         shapes4, rng))
    res.append(_check_op("crop", lambda t: ag.crop(t, t.shape[2] - 1, t.shape[3] - 1), shapes4, rng))
    res.append(_check_op("reflect_pad_to", lambda t: ag.reflect_pad_to(t, t.shape[2] + 3, t.shape[3] + 2),
                         shapes4, rng))
    win = ag.gaussian_window(11, 1.5)
    # linear op: a large step has no truncation error and avoids round-off on tiny border gradients
    res.append(_check_op("gaussian_filter", lambda t: ag.gaussian_filter(t, win),
                         [(1, 1, 12, 11), (2, 1, 13, 14), (1, 2, 11, 16)], rng, eps=1e-3))
    return res


def _loss_checks(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    img_shapes = [(1, 1, 16, 16), (2, 1, 12, 13), (1, 1, 17, 12)]

    def run(name, kind, make, shapes, eps, order=2):
        worst = 0.0
        for s in shapes:
            worst = max(worst, grad_check(make(s), rng.uniform(size=s), eps, order))
        return CheckResult(name, kind, worst, OP_TOL if kind == "op" else LOSS_TOL, list(shapes))

    # SSIM-family losses have O(1e-9) gradients at window borders: a central difference
    # has no step that is both above round-off and below truncation error there, so
    # these use the fourth-order stencil with a large step.
    res.append(run("ssim", "loss", lambda s: (lambda t, y=Tensor(rng.uniform(size=s)): L.ssim(t, y)),
                   img_shapes, 1e-2, 4))
    res.append(run("l_pixel", "op", lambda s: (lambda t, y=Tensor(rng.uniform(size=s)): L.l_pixel(t, y)),
                   img_shapes, 1e-6))
    res.append(run("l_auto", "loss", lambda s: (lambda t, y=Tensor(rng.uniform(size=s)): L.l_auto(t, y)),
                   img_shapes, 1e-2, 4))
    res.append(run("l_detail", "loss", lambda s: (lambda t, y=Tensor(rng.uniform(size=s)): L.l_detail(t, y)),
                   img_shapes, 1e-2, 4))

    feat_sets = [
        [(1, 2, 8, 8), (1, 3, 4, 4), (1, 4, 2, 2), (1, 5, 1, 1)],
        [(2, 3, 8, 6), (2, 3, 4, 3), (2, 4, 2, 2), (2, 2, 1, 1)],
        [(1, 4, 6, 6), (1, 2, 3, 3), (1, 2, 2, 2), (1, 3, 1, 1)],
    ]
    for m in range(nw.NUM_SCALES):
        worst = 0.0
        for shapes in feat_sets:
            vi = [rng.normal(size=s) for s in shapes]
            ir = [rng.normal(size=s) for s in shapes]
            f = [rng.normal(size=s) for s in shapes]

            def fn(t, f=f, vi=vi, ir=ir):
                feats = [Tensor(x) for x in f]
                feats[m] = t
                return L.l_feature(feats, vi, ir)

            # quadratic: central differences are exact at any step, and a large step
            # keeps round-off (the loss is O(1e4) with w1 up to 1000) negligible
            worst = max(worst, grad_check(fn, f[m], 1e-3))
        res.append(CheckResult(f"l_feature[scale{m + 1}]", "op", worst, OP_TOL, [s[m] for s in feat_sets]))

    worst = 0.0
    for s, shapes in zip(img_shapes, feat_sets):
        n = s[0]
        shapes = [(n,) + fs[1:] for fs in shapes]
        vi_img = Tensor(rng.uniform(size=s))
        vi, ir = ([rng.normal(size=fs) for fs in shapes] for _ in range(2))
        cfg = L.Stage2LossConfig()
        # w.r.t. the output: features near their target (as during training) keep the
        # loss O(alpha), so round-off stays small next to the detail-term gradients
        f = [cfg.w_vi * v + cfg.w_ir * i + 0.1 * rng.normal(size=v.shape) for v, i in zip(vi, ir)]
        worst = max(worst, grad_check(lambda t: L.l_rfn(t, vi_img, f, vi, ir, cfg), rng.uniform(size=s), 1e-2, 4))
        # w.r.t. the features: generic residuals keep every gradient entry well away
        # from zero; the loss is quadratic in them, so a 1e-3 step is exact
        f = [rng.normal(size=v.shape) for v in vi]
        out = Tensor(rng.uniform(size=s))
        for m in range(nw.NUM_SCALES):
            def fn(t, m=m, f=f, vi=vi, ir=ir, out=out, vi_img=vi_img):
                feats = [Tensor(x) for x in f]
                feats[m] = t
                return L.l_rfn(out, vi_img, feats, vi, ir, cfg)

            worst = max(worst, grad_check(fn, f[m], 1e-3))
    res.append(CheckResult("l_rfn", "loss", worst, LOSS_TOL, list(img_shapes)))
    return res


def _network_checks(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    cfg = nw.ArchitectureConfig(stem_channels=2, scale_channels=[3, 4, 5, 6])
    w = nw.init_weights(cfg, seed=11)
    # Zero-initialised biases put some pre-activations exactly on the ReLU kink,
    # where finite differences are meaningless; move off it.
    for name, p in w.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)

    def swap(name, t):
        w2 = nw.ModelWeights(dict(w.params))
        w2.params[name] = t
        return w2

    worst, shapes = 0.0, []
    for side in (4, 6, 8):
        a, b = rng.uniform(size=(2, 1, 3, side, side))
        for name in [n for n in w.params if n.startswith("rfn1.")]:
            fn = lambda t, name=name: nw.rfn_fuse(Tensor(a), Tensor(b), 1, swap(name, t), cfg).mean()
            worst = max(worst, grad_check(fn, w[name].data))
        shapes.append(a.shape)
    res.append(CheckResult("rfn_block", "op", worst, OP_TOL, shapes))

    worst, shapes = 0.0, []
    # Small maps keep the number of ReLU units (and so the odds of a finite
    # difference straddling a kink) low; rectangular shapes exercise H != W.
    for h, wd in ((16, 16), (16, 32), (32, 16)):
        phi = [Tensor(rng.uniform(size=(1, c, h >> (m + 1), wd >> (m + 1))))
               for m, c in enumerate(cfg.scale_channels)]
        for name in ("decoder.head.weight", "decoder.node1_3.conv1.weight", "decoder.node2_2.conv2.bias"):
            fn = lambda t, name=name: (nw.decode(phi, swap(name, t), cfg) ** 2).mean()
            worst = max(worst, grad_check(fn, w[name].data))
        shapes.append((1, 1, h, wd))
    res.append(CheckResult("decoder", "op", worst, OP_TOL, shapes))
    return res


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    """All checks, in a fixed order; returns the results and wall time in seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = _op_checks(rng) + _loss_checks(rng) + _network_checks(rng)
    return results, time.perf_counter() - start


def format_report(results: list[CheckResult]) -> str:
    lines = ["check,kind,worst_rel_error,tolerance,status"]
    for r in results:
        lines.append(f"{r.name},{r.kind},{r.worst:.3e},{r.tolerance:.0e},{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
