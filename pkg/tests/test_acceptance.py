"""Whole-pipeline acceptance checks.

The numeric checks (warp oracle, finite differences, budget postconditions,
metric invariances, l2 closed forms, file round-trips) finish in well under a
minute combined. The behavioral checks train real classifiers and attacks on
the synthetic dataset and together take roughly 25 minutes on one CPU core;
every expensive artifact lives in a module-scoped fixture so it is built
exactly once. Each test prints a single PASS/FAIL line (visible with -s or
-rA) so a log scan reads as a checklist.
"""

import hashlib
import struct
import time

import numpy as np
import pytest
import torch

from oracles import warp_oracle
from uapkit.backbone import (
    ClassifierHyper,
    LabeledDataset,
    accuracy,
    build_small_cnn,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train_classifier,
)
from uapkit.errors import (
    DigestMismatchError,
    FileFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from uapkit.evaluation import (
    ablation_grid,
    attack_success_rate,
    l2_report,
    sample_size_study,
    transfer_matrix,
    write_transfer_csv,
)
from uapkit.flowwarp import bilinear_warp, flow_budget, flow_tv_loss, scale_flow
from uapkit.generator import GeneratorArch, init_generator, make_seed_pattern
from uapkit.objective import scaled_cross_entropy
from uapkit.perturb import AttackBudget, compose_adversarial, scale_noise
from uapkit.trainer import (
    TrainConfig,
    UniversalPerturbation,
    freeze_perturbation,
    load_generator,
    load_perturbation,
    random_perturbation,
    save_generator,
    save_perturbation,
    train,
)

# Shared settings for the trained checks. base_width 16 keeps generator
# training tractable on one CPU core; the library default of 64 is sized for
# real hardware. The small-batch config exists so that 500-image subsets
# still get a useful number of optimizer steps per epoch.
DATA = dict(n_train=10_000, n_heldout=2_000, resolution=32, seed=7)
ARCH = GeneratorArch(3, 32, 32, base_width=16, num_resnet_blocks=2)
FULL = dict(epochs=6, batch_size=128, learning_rate=1e-3, seed=0)
SMALL = dict(epochs=6, batch_size=32, learning_rate=1e-3, seed=0, asr_probe_limit=256)

TIMINGS: dict[str, float] = {}


def _report(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"[{num:02d}] {label}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="module")
def splits():
    tic = time.monotonic()
    train_ds, heldout = make_synthetic_dataset(**DATA)
    TIMINGS["data"] = time.monotonic() - tic
    return train_ds, heldout


@pytest.fixture(scope="module")
def target(splits):
    train_ds, _ = splits
    tic = time.monotonic()
    model = build_small_cnn("convnet4", seed=0)
    train_classifier(model, train_ds, ClassifierHyper(**FULL))
    TIMINGS["classifier"] = time.monotonic() - tic
    return model


@pytest.fixture(scope="module")
def second_target(splits):
    train_ds, _ = splits
    model = build_small_cnn("convnet6", seed=1)
    train_classifier(model, train_ds, ClassifierHyper(**{**FULL, "seed": 1}))
    return model


def _attack(train_ds, model, heldout, **overrides):
    cfg = TrainConfig(**{**FULL, **overrides})
    gen, log = train(train_ds, model, cfg, arch=ARCH, heldout=heldout)
    pert = freeze_perturbation(gen, make_seed_pattern(ARCH, cfg.seed), cfg.budget, model.identifier)
    return pert, log


@pytest.fixture(scope="module")
def v1_run(splits, target):
    train_ds, heldout = splits
    tic = time.monotonic()
    out = _attack(train_ds, target, heldout, epsilon=0.04, tau=0.0)
    TIMINGS["v1"] = time.monotonic() - tic
    return out


@pytest.fixture(scope="module")
def v3_run(splits, target):
    train_ds, heldout = splits
    return _attack(train_ds, target, heldout, epsilon=0.04, tau=0.1)


@pytest.fixture(scope="module")
def plain_ce_run(splits, target):
    train_ds, heldout = splits
    return _attack(train_ds, target, heldout, epsilon=0.04, tau=0.0, loss_variant="plain_ce")


def test_01_warp_matches_scalar_oracle():
    tic = time.monotonic()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        img = rng.random((3, 16, 16))
        flow = rng.normal(0.0, 1.5, (2, 16, 16))  # routinely crosses the border
        got = bilinear_warp(torch.from_numpy(img)[None], torch.from_numpy(flow))[0].numpy()
        worst = max(worst, float(np.abs(got - warp_oracle(img, flow)).max()))
    elapsed = time.monotonic() - tic
    ok = worst <= 1e-6 and elapsed < 10.0
    _report(1, "warp equals scalar oracle on 100 random pairs", ok,
            f"max|diff|={worst:.2e}, {elapsed:.1f}s")
    assert ok, f"worst={worst} elapsed={elapsed}"


def _fd_worst(loss_fn, tensor, grad, step, limit=None):
    """Worst relative error between autograd and central differences over the
    elements of one tensor. The tensor is edited through a flat view, so it
    must share storage with whatever loss_fn reads."""
    flat = tensor.flatten()
    gflat = grad.flatten()
    if limit is None:
        indices = range(flat.numel())
    else:
        # restrict to the strongest entries; near-dead coordinates compare
        # finite-difference roundoff against zero and say nothing useful
        indices = torch.argsort(gflat.abs(), descending=True)[:limit].tolist()
    worst = 0.0
    for idx in indices:
        orig = flat[idx].item()
        flat[idx] = orig + step
        hi = loss_fn()
        flat[idx] = orig - step
        lo = loss_fn()
        flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        an = gflat[idx].item()
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst


def test_02_gradients_match_finite_differences():
    tic = time.monotonic()

    # warp with respect to image and flow. Integer base offsets plus
    # fractional parts in [0.15, 0.45] keep every sampling coordinate well
    # clear of pixel boundaries, so a 1e-3 step never leaves its bilinear cell.
    torch.manual_seed(201)
    x = torch.rand(1, 2, 6, 5, dtype=torch.float64, requires_grad=True)
    base = torch.randint(-2, 3, (2, 6, 5)).double()
    flow = (base + 0.15 + 0.3 * torch.rand(2, 6, 5, dtype=torch.float64)).requires_grad_(True)
    weights = 0.1 + torch.rand(1, 2, 6, 5, dtype=torch.float64)

    def warp_loss(xv, fv):
        return (bilinear_warp(xv, fv) * weights).sum()

    gx, gf = torch.autograd.grad(warp_loss(x, flow), [x, flow])
    xd, fwd = x.detach(), flow.detach()
    warp_err = max(
        _fd_worst(lambda: warp_loss(xd, fwd).item(), xd, gx, 1e-3),
        _fd_worst(lambda: warp_loss(xd, fwd).item(), fwd, gf, 1e-3),
    )

    torch.manual_seed(202)
    logits = torch.randn(6, 7, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 7, (6,))
    (gl,) = torch.autograd.grad(scaled_cross_entropy(logits, labels), logits)
    ld = logits.detach()
    sce_err = _fd_worst(lambda: scaled_cross_entropy(ld, labels).item(), ld, gl, 1e-5)

    arch = GeneratorArch(3, 8, 8, base_width=8, num_resnet_blocks=1)
    gen = init_generator(arch, seed=0).double().eval()
    g = torch.Generator().manual_seed(203)
    z = torch.randn(3, 8, 8, dtype=torch.float64, generator=g)
    wn = torch.rand(3, 8, 8, dtype=torch.float64, generator=g)
    wf = torch.rand(2, 8, 8, dtype=torch.float64, generator=g)

    def gen_loss():
        raw_noise, raw_flow = gen(z)
        return (raw_noise * wn).sum() + (raw_flow * wf).sum()

    params = dict(gen.named_parameters())
    chosen = [
        "encoder.0.weight",
        next(n for n in params if n.startswith("bottleneck") and params[n].ndim == 4),
        next(n for n in params if n.startswith("flow_decoder") and params[n].ndim == 4),
    ]
    grads = torch.autograd.grad(gen_loss(), [params[n] for n in chosen])
    gen_err = 0.0
    # step small enough that no downstream ReLU changes sign; larger steps
    # measure the kink, not the derivative
    with torch.no_grad():
        for name, grad in zip(chosen, grads):
            gen_err = max(
                gen_err,
                _fd_worst(lambda: gen_loss().item(), params[name].data, grad, 1e-6, limit=4),
            )

    elapsed = time.monotonic() - tic
    ok = warp_err <= 1e-4 and sce_err <= 1e-4 and gen_err <= 1e-3 and elapsed < 120.0
    _report(2, "analytic gradients match central differences", ok,
            f"warp={warp_err:.2e} sce={sce_err:.2e} generator={gen_err:.2e}, {elapsed:.1f}s")
    assert ok, f"warp={warp_err} sce={sce_err} gen={gen_err} elapsed={elapsed}"


def test_03_scaling_postconditions_and_exact_identity():
    tic = time.monotonic()
    worst_noise = worst_flow = 0.0
    for k in range(50):
        g = torch.Generator().manual_seed(300 + k)
        eps = 0.005 + 0.075 * float(torch.rand((), generator=g))
        tau = 0.01 + 0.29 * float(torch.rand((), generator=g))
        scaled = scale_noise(torch.randn(3, 16, 16, generator=g), eps)
        worst_noise = max(worst_noise, abs(scaled.abs().max().item() - eps))
        flow, degenerate = scale_flow(torch.randn(2, 16, 16, generator=g), tau)
        assert not degenerate
        worst_flow = max(worst_flow, abs(flow_budget(flow).item() - tau))
    g = torch.Generator().manual_seed(399)
    x = torch.rand(4, 3, 16, 16, generator=g)
    zero_flow, _ = scale_flow(torch.randn(2, 16, 16, generator=g), 0.0)
    zero_noise = scale_noise(torch.randn(3, 16, 16, generator=g), 0.0)
    identical = torch.equal(compose_adversarial(x, zero_flow, zero_noise), x.clamp(0.0, 1.0))
    elapsed = time.monotonic() - tic
    ok = worst_noise <= 1e-7 and worst_flow <= 1e-5 and identical and elapsed < 30.0
    _report(3, "budget scaling postconditions and exact identity", ok,
            f"|noise err|={worst_noise:.2e} |flow err|={worst_flow:.2e} "
            f"identity={identical}, {elapsed:.1f}s")
    assert ok, f"noise={worst_noise} flow={worst_flow} identity={identical}"


def test_04_flow_budget_invariances_and_hand_cases():
    worst_shift = worst_scale = 0.0
    for k in range(100):
        g = torch.Generator().manual_seed(400 + k)
        flow = torch.randn(2, 7, 9, dtype=torch.float64, generator=g)
        ref = flow_budget(flow).item()
        shift = 5.0 * torch.randn(2, 1, 1, dtype=torch.float64, generator=g)
        worst_shift = max(worst_shift, abs(flow_budget(flow + shift).item() - ref))
        for scale in (0.31, 2.7):
            worst_scale = max(worst_scale, abs(flow_budget(scale * flow).item() - scale * ref))
    # 2x2 flow with one unit row-displacement in a corner: the attaining
    # direction averages a single squared unit over four pixels, sqrt(1/4)
    hand = torch.zeros(2, 2, 2)
    hand[0, 1, 1] = 1.0
    budget_exact = flow_budget(hand).item() == 0.5
    # two pixels whose flows differ by (3, 4): each end of the pair sees the
    # other across one in-bounds direction at distance 5, total 10
    pair = torch.zeros(2, 1, 2)
    pair[0, 0, 1] = 3.0
    pair[1, 0, 1] = 4.0
    tv_exact = flow_tv_loss(pair).item() == 10.0
    ok = worst_shift <= 1e-6 and worst_scale <= 1e-6 and budget_exact and tv_exact
    _report(4, "budget metric invariances and hand-computed cases", ok,
            f"shift={worst_shift:.2e} scale={worst_scale:.2e} "
            f"hand=({budget_exact}, {tv_exact})")
    assert ok, f"shift={worst_shift} scale={worst_scale} hand={budget_exact},{tv_exact}"


def test_05_trained_attack_beats_random_and_floor(splits, target, v1_run):
    _, heldout = splits
    acc = accuracy(target, heldout)
    pert, log = v1_run
    asr = log.final_heldout_asr
    rand_asr = float(np.mean([
        attack_success_rate(random_perturbation((3, 32, 32), pert.budget, seed), heldout, target)
        for seed in range(3)
    ]))
    spent = TIMINGS["data"] + TIMINGS["classifier"] + TIMINGS["v1"]
    ok = acc >= 0.75 and asr > 0.40 and asr > 10 * rand_asr and spent <= 3 * 3600
    _report(5, "noise attack beats the floor and the random baseline", ok,
            f"acc={acc:.4f} asr={asr:.4f} random={rand_asr:.4f} train+attack={spent:.0f}s")
    assert ok, f"acc={acc} asr={asr} random={rand_asr} spent={spent}"


def test_06_larger_budgets_do_not_hurt(splits, target, v1_run, v3_run):
    train_ds, heldout = splits
    v1_asr = v1_run[1].final_heldout_asr
    v3_asr = v3_run[1].final_heldout_asr
    cfg = TrainConfig(epsilon=0.04, tau=0.0, **SMALL)
    grid = ablation_grid(train_ds.take(2000), target, cfg, heldout,
                         epsilons=[0.0, 0.01, 0.02, 0.03, 0.04],
                         taus=[0.0, 0.05, 0.1, 0.15], arch=ARCH)
    tol = 0.03
    rows_ok = all(grid.asr[t, e + 1] >= grid.asr[t, e] - tol
                  for t in range(len(grid.taus)) for e in range(len(grid.epsilons) - 1))
    cols_ok = all(grid.asr[t + 1, e] >= grid.asr[t, e] - tol
                  for t in range(len(grid.taus) - 1) for e in range(len(grid.epsilons)))
    ok = v3_asr >= v1_asr - 0.01 and rows_ok and cols_ok and not grid.errors
    _report(6, "combined budget dominates and sweep grid is monotone", ok,
            f"v1={v1_asr:.4f} v3={v3_asr:.4f} rows={rows_ok} cols={cols_ok}")
    assert ok, f"v1={v1_asr} v3={v3_asr} rows={rows_ok} cols={cols_ok} grid=\n{grid.asr}"


def test_07_few_training_images_still_attack(splits, target):
    train_ds, heldout = splits
    cfg = TrainConfig(epsilon=0.04, tau=0.0, **SMALL)
    points = sample_size_study(train_ds, target, cfg, heldout,
                               sizes=[500, 2000, 10000], arch=ARCH)
    asrs = [asr for _, asr in points]
    half_ok = asrs[0] >= 0.5 * asrs[-1]
    trend_ok = all(b >= a - 0.05 for a, b in zip(asrs, asrs[1:]))
    ok = half_ok and trend_ok
    _report(7, "attack stays effective with few training images", ok,
            " ".join(f"{n}:{asr:.4f}" for n, asr in points))
    assert ok, f"points={points}"


def test_08_self_attack_beats_transferred_attack(splits, target, second_target, tmp_path):
    train_ds, heldout = splits
    cfg = TrainConfig(epsilon=0.04, tau=0.0, **SMALL)
    subset = train_ds.take(2000)
    perts = []
    for model in (target, second_target):
        gen, _ = train(subset, model, cfg, arch=ARCH)
        perts.append(freeze_perturbation(
            gen, make_seed_pattern(ARCH, cfg.seed), cfg.budget, model.identifier))
    matrix = transfer_matrix(perts, [target, second_target], heldout)
    diag_ok = all(matrix.asr[c, c] >= matrix.asr[r, c]
                  for c in range(2) for r in range(2) if r != c)
    path = tmp_path / "transfer.csv"
    write_transfer_csv(matrix, path)
    text = path.read_text()
    csv_ok = "Average" in text and all(mid in text for mid in matrix.model_ids)
    ok = diag_ok and csv_ok and not matrix.errors
    _report(8, "transfer matrix diagonal dominance and CSV emission", ok,
            f"matrix={matrix.asr.round(4).tolist()} csv={csv_ok}")
    assert ok, f"matrix=\n{matrix.asr}\ncsv_ok={csv_ok} errors={matrix.errors}"


def _epochs_to_90(log):
    final = log.epochs[-1].train_asr
    for stat in log.epochs:
        if stat.train_asr >= 0.9 * final:
            return stat.epoch
    return log.epochs[-1].epoch


def test_09_bounded_loss_at_least_matches_plain_ce(v1_run, plain_ce_run):
    sce_log, ce_log = v1_run[1], plain_ce_run[1]
    final_ok = sce_log.final_heldout_asr >= ce_log.final_heldout_asr - 0.02
    sce_e, ce_e = _epochs_to_90(sce_log), _epochs_to_90(ce_log)
    speed_ok = sce_e <= ce_e + 1
    ok = final_ok and speed_ok
    _report(9, "log-bounded loss matches plain CE in quality and speed", ok,
            f"final sce={sce_log.final_heldout_asr:.4f} ce={ce_log.final_heldout_asr:.4f} "
            f"epochs-to-90% sce={sce_e} ce={ce_e}")
    assert ok, (f"sce_final={sce_log.final_heldout_asr} ce_final={ce_log.final_heldout_asr} "
                f"sce_e={sce_e} ce_e={ce_e}")


def test_10_l2_distances_match_closed_forms():
    # one gray pixel shifted by +10/255: quantized values 102 and 112
    single_ds = LabeledDataset(torch.full((1, 1, 1, 1), 0.4), torch.zeros(1, dtype=torch.long))
    single_pert = UniversalPerturbation(
        flow=torch.zeros(2, 1, 1),
        noise=torch.full((1, 1, 1), 10.0 / 255.0),
        budget=AttackBudget(10.0 / 255.0, 0.0),
        seed_digest=bytes(32),
    )
    single = l2_report(single_pert, single_ds)
    single_ok = single.values.tolist() == [10.0]

    # |noise| = eps at every pixel with integer 255*eps: each pixel moves by
    # exactly ten quantization steps, independent of the base image
    g = torch.Generator().manual_seed(1000)
    c, h, w = 3, 8, 8
    x = 0.15 + 0.7 * torch.rand(5, c, h, w, generator=g)  # clear of clipping
    signs = torch.where(torch.rand(c, h, w, generator=g) < 0.5, -1.0, 1.0)
    eps = 10.0 / 255.0
    full_pert = UniversalPerturbation(
        flow=torch.zeros(2, h, w),
        noise=eps * signs,
        budget=AttackBudget(eps, 0.0),
        seed_digest=bytes(32),
    )
    report = l2_report(full_pert, LabeledDataset(x, torch.zeros(5, dtype=torch.long)))
    closed = 255.0 * eps * float(np.sqrt(c * h * w))
    full_err = float(np.max(np.abs(report.values - closed)))
    ok = single_ok and full_err <= 0.5
    _report(10, "l2 report reproduces closed forms", ok,
            f"single={single.values.tolist()} closed-form err={full_err:.2e}")
    assert ok, f"single={single.values} err={full_err}"


def _rejects(path, blob, err_cls, loader) -> bool:
    path.write_bytes(blob)
    try:
        loader(path)
    except err_cls:
        return True
    except Exception:
        return False
    return False


def test_11_files_round_trip_and_reject_corruption(tmp_path):
    g = torch.Generator().manual_seed(1100)
    flow, _ = scale_flow(torch.randn(2, 8, 8, generator=g), 0.1)
    noise = scale_noise(torch.randn(3, 8, 8, generator=g), 0.03)
    pert = UniversalPerturbation(
        flow=flow,
        noise=noise,
        budget=AttackBudget(0.03, 0.1),
        seed_digest=hashlib.sha256(b"roundtrip").digest(),
        target_id="convnet4-s0",
    )
    p1, p2 = tmp_path / "pert.guap", tmp_path / "pert2.guap"
    save_perturbation(pert, p1)
    back = load_perturbation(p1)
    save_perturbation(back, p2)
    pert_ok = (torch.equal(back.flow, pert.flow) and torch.equal(back.noise, pert.noise)
               and back.budget == pert.budget and back.target_id == pert.target_id
               and back.seed_digest == pert.seed_digest
               and p1.read_bytes() == p2.read_bytes())

    model = build_small_cnn("convnet4", seed=3)
    c1, c2 = tmp_path / "clf.ntc", tmp_path / "clf2.ntc"
    save_checkpoint(model, c1)
    reloaded = load_checkpoint(c1)
    save_checkpoint(reloaded, c2)
    clf_ok = (reloaded.param_digest() == model.param_digest()
              and c1.read_bytes() == c2.read_bytes())

    gen = init_generator(GeneratorArch(3, 8, 8, base_width=8, num_resnet_blocks=1), seed=2)
    g1, g2 = tmp_path / "gen.ntc", tmp_path / "gen2.ntc"
    save_generator(gen, g1)
    gen_back = load_generator(g1)
    save_generator(gen_back, g2)
    s1, s2 = gen.state_dict(), gen_back.state_dict()
    gen_ok = (s1.keys() == s2.keys()
              and all(torch.equal(s1[k], s2[k]) for k in s1)
              and g1.read_bytes() == g2.read_bytes())

    blob = p1.read_bytes()
    mid = len(blob) // 2  # lands inside the flow payload
    rejected = [
        _rejects(tmp_path / "v.guap", blob[:4] + struct.pack("<I", 99) + blob[8:],
                 VersionMismatchError, load_perturbation),
        _rejects(tmp_path / "flip.guap",
                 blob[:mid] + bytes([blob[mid] ^ 0xFF]) + blob[mid + 1:],
                 DigestMismatchError, load_perturbation),
        _rejects(tmp_path / "trunc.guap", blob[:-9], TruncatedFileError, load_perturbation),
        _rejects(tmp_path / "magic.guap", b"XXXX" + blob[4:], FileFormatError, load_perturbation),
    ]
    cblob = c1.read_bytes()
    cmid = len(cblob) // 2
    rejected += [
        _rejects(tmp_path / "flip.ntc",
                 cblob[:cmid] + bytes([cblob[cmid] ^ 0xFF]) + cblob[cmid + 1:],
                 DigestMismatchError, load_checkpoint),
        _rejects(tmp_path / "trunc.ntc", cblob[:-5], TruncatedFileError, load_checkpoint),
    ]
    ok = pert_ok and clf_ok and gen_ok and all(rejected)
    _report(11, "artifacts round-trip bit-exactly and corruption is rejected", ok,
            f"pert={pert_ok} classifier={clf_ok} generator={gen_ok} rejected={rejected}")
    assert ok, f"pert={pert_ok} clf={clf_ok} gen={gen_ok} rejected={rejected}"
