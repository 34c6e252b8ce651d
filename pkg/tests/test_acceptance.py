"""Acceptance suite: one verdict line per criterion, echoed in the terminal summary.

The training-based criteria (6 and 7) share one set of runs, built once per
module: the timed command-line pipeline (seed 0) plus library runs for the
ablation comparisons on seeds 0 and 1. Expect roughly ten minutes on one core.

Protocol for the training runs:
desk architecture (stem 8, widths 16/24/32/40), 64x64 images, batch 4,
Adam at the desk learning rate 1e-3, 200 steps per stage. (The full-scale
1e-4 is tuned for tens of thousands of steps; at 200 steps stage 2 does not
reach the required halving of its loss.) Stage 1 uses the
32-image fixture corpus, stage 2 and one-stage use the 16-pair fixture corpus.
One-stage gets the same 200 fusion-loss steps as stage 2.
"""
import math
import time

import numpy as np
import pytest

from rfnnest import cli, data, gradsuite, metrics
from rfnnest import losses as L
from rfnnest import networks as nw
from rfnnest import strategies as S
from rfnnest import training as tr
from rfnnest.autograd import Tensor, no_grad
from rfnnest.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from rfnnest.errors import FormatError

from conftest import ACCEPTANCE_LINES, DESK_ARCH, TINY_ARCH
from test_metrics import oracle_entropy, oracle_mi_pair, oracle_scd, oracle_sd
from test_strategies import jacobi_singular_values, naive_l1norm, naive_nuclear, naive_sca

# tolerances
GRAD_OP_TOL = 1e-4
GRAD_LOSS_TOL = 1e-3
GRAD_SUITE_SECONDS = 120
ALPHA0_TOL = 1e-12
STRATEGY_TOL = 1e-8
SSIM_IDENTITY_TOL = 1e-9
ENTROPY_MI_SCD_TOL = 1e-12
SD_TOL = 1e-9
CONVERGENCE_RATIO = 0.5
PIPELINE_SECONDS = 600

STEPS = 200
LR = cli.DESK_LR
SEEDS = (0, 1)


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
def test_criterion_1_gradient_suite():
    results, seconds = gradsuite.run_suite(0)
    worst_op = max((r for r in results if r.kind == "op"), key=lambda r: r.worst / r.tolerance)
    worst_loss = max((r for r in results if r.kind == "loss"), key=lambda r: r.worst / r.tolerance)
    tol_ok = all(r.tolerance == (GRAD_OP_TOL if r.kind == "op" else GRAD_LOSS_TOL) for r in results)
    shapes_ok = all(len(r.shapes) >= 3 for r in results)
    ok = all(r.passed for r in results) and tol_ok and shapes_ok and seconds < GRAD_SUITE_SECONDS
    verdict("1", ok, f"{len(results)} checks, worst op {worst_op.name} {worst_op.worst:.2e}, "
                     f"worst loss {worst_loss.name} {worst_loss.worst:.2e}, {seconds:.0f}s")


def test_criterion_2_loss_identities():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(size=(2, 1, 24, 24)))
    cfg = L.Stage2LossConfig()
    shapes = [(1, 4, 16, 16), (1, 5, 8, 8), (1, 6, 4, 4), (1, 7, 2, 2)]
    vi = [rng.normal(size=s) for s in shapes]
    ir = [rng.normal(size=s) for s in shapes]
    f = [cfg.w_vi * v + cfg.w_ir * i for v, i in zip(vi, ir)]
    zeros = {
        "l_auto": L.l_auto(x, x).item(),
        "l_detail": L.l_detail(x, x).item(),
        "l_feature": L.l_feature(f, vi, ir, cfg).item(),
        "l_rfn": L.l_rfn(x, x, f, vi, ir, cfg).item(),
    }
    out = Tensor(rng.uniform(size=(2, 1, 24, 24)))
    f_rand = [rng.normal(size=s) for s in shapes]
    a0 = L.Stage2LossConfig(alpha=0.0)
    gap = abs(L.l_rfn(out, x, f_rand, vi, ir, a0).item() - L.l_feature(f_rand, vi, ir, a0).item())
    ok = all(v == 0.0 for v in zeros.values()) and gap <= ALPHA0_TOL
    verdict("2", ok, f"perfect-input values {zeros}, |l_rfn(alpha=0) - l_feature| = {gap:.1e}")


def test_criterion_3_architecture():
    arch = nw.ArchitectureConfig(**TINY_ARCH)
    w = nw.init_weights(arch, seed=0)
    notes = []
    ladder_ok = True
    for n in (64, 128, 250):
        img = Tensor(np.random.default_rng(n).uniform(size=(1, 1, n, n)))
        padded, _ = nw.pad_input(img)
        phi = nw.encode(padded, w, arch)
        side = padded.shape[2]
        want = [(1, c, side >> (m + 1), side >> (m + 1)) for m, c in enumerate(arch.scale_channels)]
        ladder_ok &= [p.shape for p in phi] == want and side % 16 == 0
        with no_grad():
            out = nw.fuse_forward(img, img, w, arch)
        ladder_ok &= out.shape == img.shape
        notes.append(f"{n}->{side}")
    cfg = tr.TrainConfig(arch=dict(TINY_ARCH), image_size=32, steps=100, lr=1e-3, log_every=0)
    start = nw.init_weights(cfg.arch, 0, cfg.dtype)
    res = tr.train_stage2(cfg, data.synthetic_pairs(8, 32, seed=1), start.copy())
    frozen_ok = res.weights.digest(("encoder", "decoder")) == start.digest(("encoder", "decoder"))
    moved = res.weights.digest(("rfn1", "rfn2", "rfn3", "rfn4")) != start.digest(("rfn1", "rfn2", "rfn3", "rfn4"))
    verdict("3", ladder_ok and frozen_ok and moved,
            f"ladder {'ok' if ladder_ok else 'broken'} ({', '.join(notes)}); 100 stage-2 steps: "
            f"encoder/decoder {'bit-identical' if frozen_ok else 'CHANGED'}, rfn {'updated' if moved else 'static'}")


def test_criterion_4_strategy_oracles():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))
    errs = {
        "l1": np.abs(S.fuse_l1norm(a, b) - naive_l1norm(a, b)).max(),
        "nuclear": np.abs(S.fuse_nuclear(a, b) - naive_nuclear(a, b)).max(),
        "sca": np.abs(S.fuse_sca(a, b) - naive_sca(a, b)).max(),
    }
    norms = S.nuclear_norms(a)
    errs["nuclear_norm_vs_jacobi"] = max(abs(norms[i, c] - jacobi_singular_values(a[i, c]).sum())
                                         for i in range(2) for c in range(3))
    verdict("4", all(e < STRATEGY_TOL for e in errs.values()),
            ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    f, ir, vi = rng.uniform(size=(3, 8, 8))
    errs = {
        "entropy": abs(metrics.entropy(f) - oracle_entropy(f)),
        "mi": abs(metrics.mi(f, ir, vi) - oracle_mi_pair(f, ir) - oracle_mi_pair(f, vi)),
        "scd": abs(metrics.scd(f, ir, vi) - oracle_scd(f, ir, vi)),
    }
    sd_err = abs(metrics.sd(f) - oracle_sd(f))
    x = data.synthetic_image(np.random.default_rng(6), 64)
    ssim_err = abs(metrics.ssim_index(x, x) - 1.0)
    ms_err = abs(metrics.ms_ssim(x, x) - 1.0)
    nabf_same = metrics.nabf(x, x, x)
    noisy = x.copy()
    idx = np.random.default_rng(7).choice(x.size, 200, replace=False)
    noisy.flat[idx] = np.random.default_rng(8).integers(0, 2, size=200)
    nabf_noisy = metrics.nabf(noisy, x, x)
    ok = (all(e <= ENTROPY_MI_SCD_TOL for e in errs.values()) and sd_err <= SD_TOL
          and ssim_err < SSIM_IDENTITY_TOL and ms_err < SSIM_IDENTITY_TOL and nabf_same == 0.0 and nabf_noisy > 0)
    verdict("5", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
            + f", sd {sd_err:.1e}, 1-ssim {ssim_err:.1e}, 1-ms_ssim {ms_err:.1e}, "
              f"nabf(x,x,x)={nabf_same}, nabf(noisy)={nabf_noisy:.4f}")


# ---------------------------------------------------------------------------
# training-based criteria
# ---------------------------------------------------------------------------
def _smoothed_ratio(csv_path) -> float:
    losses = np.array([float(r.split(",")[2]) for r in csv_path.read_text().splitlines()[1:]])
    sm = tr.smoothed(losses)
    return float(sm[-1] / sm[0])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """The command-line desk pipeline, timed: train-auto, train-rfn, fuse."""
    root = tmp_path_factory.mktemp("pipeline")
    held = data.write_corpus(data.synthetic_pairs(2, 64, seed=2), root / "held")
    common = ["--seed", "0", "--steps", str(STEPS), "--lr", str(LR)]
    start = time.perf_counter()
    codes = [
        cli.main(["train-auto", "--corpus", "synthetic:32", "--out", str(root / "auto"), *common]),
        cli.main(["train-rfn", "--corpus", "synthetic:16", "--checkpoint", str(root / "auto" / "weights.rfnn"),
                  "--out", str(root / "rfn"), *common]),
        cli.main(["fuse", "--checkpoint", str(root / "rfn" / "weights.rfnn"), "--ir", str(held / "ir" / "pair0000.png"),
                  "--vi", str(held / "vi" / "pair0000.png"), "--out", str(root / "fused.png")]),
    ]
    return {"root": root, "codes": codes, "seconds": time.perf_counter() - start}


def test_criterion_6_desk_convergence(pipeline):
    root = pipeline["root"]
    r1 = _smoothed_ratio(root / "auto" / "loss.csv")
    r2 = _smoothed_ratio(root / "rfn" / "loss.csv")
    ok = (pipeline["codes"] == [0, 0, 0] and r1 < CONVERGENCE_RATIO and r2 < CONVERGENCE_RATIO
          and pipeline["seconds"] < PIPELINE_SECONDS and (root / "fused.png").is_file())
    verdict("6", ok, f"smoothed L_auto ratio {r1:.3f}, smoothed L_RFN ratio {r2:.3f} after {STEPS} steps; "
                     f"train-auto -> train-rfn -> fuse {pipeline['seconds']:.0f}s")


def _recon_loss(w: nw.ModelWeights, arch: nw.ArchitectureConfig, ds: data.Dataset) -> float:
    with no_grad():
        x = Tensor(ds.batch(range(len(ds)), np.float32))
        return L.l_auto(nw.reconstruct(x, w, arch), x).item()


def _mean_metric(w, corpus: data.Dataset, fn) -> float:
    arch = nw.infer_architecture(w)
    vals = []
    with no_grad():
        for p in corpus.pairs:
            out = nw.fuse_forward(Tensor(p.ir[None, None]), Tensor(p.vi[None, None]), w, arch).data[0, 0]
            vals.append(fn(out, p))
    return math.fsum(vals) / len(vals)


@pytest.fixture(scope="module")
def ablation(pipeline):
    images = data.synthetic_images(32, 64, seed=cli.FIXTURE_SEEDS["single"])
    pairs = data.synthetic_pairs(16, 64, seed=cli.FIXTURE_SEEDS["paired"])
    held = data.synthetic_pairs(8, 64, seed=2)

    def cfg(seed, **kw):
        return tr.TrainConfig(arch=dict(DESK_ARCH), steps=STEPS, lr=LR, seed=seed, log_every=0, **kw)

    out = {}
    for seed in SEEDS:
        if seed == 0:
            # identical to the library runs: same corpus, seed, config and float32 storage
            s1 = load_checkpoint(pipeline["root"] / "auto" / "weights.rfnn")
            two = load_checkpoint(pipeline["root"] / "rfn" / "weights.rfnn")
        else:
            s1 = tr.train_stage1(cfg(seed), images).weights
            two = tr.train_stage2(cfg(seed), pairs, s1.copy()).weights
        no_nest_cfg = cfg(seed)
        no_nest_cfg.arch.nest_connections = False
        s1n = tr.train_stage1(no_nest_cfg, images)
        a10 = tr.train_stage2(cfg(seed, stage2={"alpha": 10.0}), pairs, s1.copy()).weights
        one = tr.train_one_stage(cfg(seed), pairs).weights
        ssim_vi = lambda o, p: metrics.ssim_index(o, p.vi)
        scd = lambda o, p: metrics.scd(o, p.ir, p.vi)
        out[seed] = {
            "recon_nest": _recon_loss(s1, nw.infer_architecture(s1), images),
            "recon_no_nest": _recon_loss(s1n.weights, no_nest_cfg.arch, images),
            "ssim_vi_a700": _mean_metric(two, held, ssim_vi),
            "ssim_vi_a10": _mean_metric(a10, held, ssim_vi),
            "scd_two_stage": _mean_metric(two, pairs, scd),
            "scd_one_stage": _mean_metric(one, pairs, scd),
        }
    return out


def _directional(ablation, better: str, worse: str, strict: bool):
    holds = {s: (r[better] > r[worse] if strict else r[better] >= r[worse]) for s, r in ablation.items()}
    detail = "; ".join(f"seed {s}: {r[better]:.4f} vs {r[worse]:.4f}" for s, r in ablation.items())
    return all(holds.values()), detail


def test_criterion_7a_alpha(ablation):
    ok, detail = _directional(ablation, "ssim_vi_a700", "ssim_vi_a10", strict=True)
    verdict("7a", ok, f"held-out SSIM(O, vi), alpha 700 vs 10: {detail}")


def test_criterion_7b_two_stage(ablation):
    ok, detail = _directional(ablation, "scd_two_stage", "scd_one_stage", strict=False)
    verdict("7b", ok, f"fixture-corpus mean SCD, two-stage vs one-stage: {detail}")


def test_criterion_7c_nest(ablation):
    holds = {s: r["recon_nest"] <= r["recon_no_nest"] for s, r in ablation.items()}
    detail = "; ".join(f"seed {s}: {r['recon_nest']:.4f} vs {r['recon_no_nest']:.4f}" for s, r in ablation.items())
    verdict("7c", all(holds.values()), f"stage-1 reconstruction L_auto, nest vs no nest: {detail}")


# ---------------------------------------------------------------------------
def test_criterion_8_serialization(tmp_path):
    arch = nw.ArchitectureConfig(**DESK_ARCH)
    w = nw.init_weights(arch, seed=8, dtype=np.float32)
    back = load_checkpoint(save_checkpoint(w, tmp_path / "w.rfnn"))
    rng = np.random.default_rng(8)
    ir, vi = (Tensor(rng.uniform(size=(1, 1, 48, 40)).astype(np.float32)) for _ in range(2))
    with no_grad():
        same = np.array_equal(nw.fuse_forward(ir, vi, w, arch).data,
                              nw.fuse_forward(ir, vi, back, nw.infer_architecture(back)).data)
    buf = encode_checkpoint(w)
    rejected = 0
    corruptions = [b"XFNN" + buf[4:], buf[:4] + (7).to_bytes(4, "little") + buf[8:], buf[:-1], buf[:20], buf + b"\0"]
    for bad in corruptions:
        try:
            decode_checkpoint(bad)
        except FormatError:
            rejected += 1
    verdict("8", same and rejected == len(corruptions),
            f"fuse_forward bit-exact after reload: {same}; corrupted files rejected {rejected}/{len(corruptions)}")
