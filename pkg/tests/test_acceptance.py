"""Acceptance gate: the twelve build criteria at their stated tolerances.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the pytest terminal summary.
"""

import dataclasses
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch
from scipy import ndimage
from torch import nn

from oracles import (
    boundary_loop,
    ce_loop,
    confusion_loop,
    cosine_loop,
    dice_loop,
    metrics_fractions,
    mse_loop,
    surface_error_brute,
)
from vesselseg.ablation import AblationSettings, run_ablation
from vesselseg.backbone import NetworkConfig
from vesselseg.losses import (
    CosineForm,
    consistency_cosine_loss,
    consistency_mse,
    cross_entropy_loss,
    dice_loss,
    fourier_boundary_loss,
    make_spectral_mask,
)
from vesselseg.metrics import SurfaceMesh, confusion, extract_surface, pixel_metrics, surface_error
from vesselseg.phantom import PhantomSpec, generate_phantom
from vesselseg.preprocess import (
    AhaParams,
    Patch,
    PatchGroup,
    adaptive_histogram_attention,
    compute_histogram,
    find_background_cutoff,
    standardize,
)
from vesselseg.trainer import TrainerConfig, ema_decay, make_state, patch_dice, train_step

MASK4 = make_spectral_mask((4, 4, 4), 0.5)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def two_channel(p1):
    return torch.as_tensor(np.stack([1 - p1, p1]))


# 1 --------------------------------------------------------------------------

def test_criterion_01_loss_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = dict.fromkeys(("ce", "dice", "boundary", "mse", "cosine"), 0.0)
    for _ in range(100):
        p1 = rng.uniform(0.01, 0.99, size=(4, 4, 4))
        y = (rng.random((4, 4, 4)) < 0.4).astype(np.float64)
        pred, target = two_channel(p1), torch.as_tensor(y)
        worst["ce"] = max(worst["ce"], rel_err(cross_entropy_loss(pred, target).item(), ce_loop(p1, y)))
        worst["dice"] = max(worst["dice"], rel_err(dice_loss(pred, target).item(), dice_loop(p1, y)))
        worst["boundary"] = max(worst["boundary"],
                                rel_err(fourier_boundary_loss(pred, target, MASK4).item(), boundary_loop(p1, y, MASK4)))
        a, b = rng.random((2, 4, 4, 4)), rng.random((2, 4, 4, 4))
        ta, tb = torch.as_tensor(a), torch.as_tensor(b)
        worst["mse"] = max(worst["mse"], rel_err(consistency_mse(ta, tb).item(), mse_loop(a, b)))
        worst["cosine"] = max(worst["cosine"],
                              rel_err(consistency_cosine_loss(ta, tb).item(), math.exp(-cosine_loop(a, b))))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(1, ok, f"max relative error {detail}; {elapsed:.1f}s"), worst


# 2 --------------------------------------------------------------------------

def _numeric_grad(fn, x, h=1e-4):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _grad_rel_err(fn, x):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = _numeric_grad(fn, x.detach().clone())
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def test_criterion_02_gradient_checks(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst: dict[str, float] = {}
    for _ in range(20):
        p = torch.as_tensor(rng.uniform(0.05, 0.95, size=(2, 4, 4, 4)))
        y = torch.as_tensor((rng.random((4, 4, 4)) < 0.4).astype(np.float64))
        other = torch.as_tensor(rng.uniform(0.05, 0.95, size=(2, 4, 4, 4)))
        checks = {
            "ce": lambda x: cross_entropy_loss(x, y),
            "dice": lambda x: dice_loss(x, y),
            "boundary": lambda x: fourier_boundary_loss(x, y, MASK4),
            "mse": lambda x: consistency_mse(x, other),
            **{f"cosine/{f.value}": (lambda x, f=f: consistency_cosine_loss(x, other, f)) for f in CosineForm},
        }
        for name, fn in checks.items():
            worst[name] = max(worst.get(name, 0.0), _grad_rel_err(fn, p))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(2, ok, f"max relative gradient error {detail}; {elapsed:.1f}s"), worst


# 3 --------------------------------------------------------------------------

def test_criterion_03_ema_schedule(criterion):
    t0 = time.perf_counter()
    checks = [
        ema_decay(0) == 0,
        # 100/101 has no exact binary form: equal to the correctly rounded double
        Fraction(ema_decay(10)) == Fraction(100 / 101),
        all(ema_decay(i) == 0.999 for i in range(100, 5000)),
        all(ema_decay(i) < 0.999 for i in range(0, 100)),
        all(ema_decay(i) == min(1 - 1 / (10 * i + 1), 0.999) for i in range(0, 200)),
    ]
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 1
    assert criterion(3, ok, f"d(0)=0, d(10)=100/101, cap 0.999 from iteration 100; {elapsed * 1e3:.1f}ms"), checks


# 4 --------------------------------------------------------------------------

class TwoLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Conv3d(1, 3, 3, padding=1)
        self.b = nn.Conv3d(3, 2, 1)

    def forward(self, x):
        return self.b(torch.relu(self.a(x)))


def _toy_patch(rng, labeled=True):
    img = rng.normal(size=(8, 8, 8)).astype(np.float32)
    vl = rng.random((8, 8, 8)).astype(np.float32)
    if labeled:
        return Patch(img, vl, (0, 0, 0), PatchGroup.LABELED, (img > 0.5).astype(np.uint8))
    return Patch(img, vl, (0, 0, 0), PatchGroup.UNLABELED)


def test_criterion_04_ema_replay(criterion):
    torch.manual_seed(4)
    cfg = TrainerConfig(patch_size=8, network=NetworkConfig(patch_size=8))
    state = make_state(cfg, teacher=TwoLayer())
    initial = {k: v.detach().numpy().copy() for k, v in state.student.state_dict().items()}
    rng = np.random.default_rng(4)
    teacher_snaps = []
    for _ in range(5):
        train_step(state, [_toy_patch(rng)], [_toy_patch(rng, False)], cfg)
        teacher_snaps.append({k: v.detach().numpy().copy() for k, v in state.teacher.state_dict().items()})

    replay = {k: v.copy() for k, v in initial.items()}
    for i, snap in enumerate(teacher_snaps):
        d = min(1 - 1 / (10 * i + 1), 0.999)
        for k in replay:
            replay[k] = np.float32(d) * replay[k] + np.float32(1 - d) * snap[k]
    final = {k: v.numpy() for k, v in state.student.state_dict().items()}
    mismatched = [k for k in final if not np.array_equal(final[k], replay[k])]
    moved = any(not np.array_equal(final[k], initial[k]) for k in final)
    ok = not mismatched and moved and state.iteration == 5
    assert criterion(4, ok, f"5-step replay over {len(final)} tensors, bit-exact mismatches: {mismatched or 'none'}")


# 5 --------------------------------------------------------------------------

def test_criterion_05_boundary_dc_invariance(criterion):
    rng = np.random.default_rng(505)
    mask = make_spectral_mask((8, 8, 8), 0.5)
    worst = 0.0
    for _ in range(10):
        y = torch.as_tensor((rng.random((8, 8, 8)) < 0.3).astype(np.float64))
        p1 = rng.uniform(0, 0.9, size=(8, 8, 8))
        base = fourier_boundary_loss(two_channel(p1), y, mask).item()
        shifted = torch.as_tensor(np.stack([1 - p1, p1 + 0.1]))
        worst = max(worst, abs(fourier_boundary_loss(shifted, y, mask).item() - base))
    assert criterion(5, worst < 1e-10, f"max change {worst:.2e} over 10 random 8^3 targets"), worst


# 6 --------------------------------------------------------------------------

def test_criterion_06_metric_oracles(criterion):
    rng = np.random.default_rng(606)
    bad_counts = bad_metrics = bad_identity = 0
    for _ in range(1000):
        p, g = rng.random((3, 3, 3)) < rng.random(), rng.random((3, 3, 3)) < rng.random()
        c = confusion(p, g)
        counts = confusion_loop(p, g)
        bad_counts += (c.tp, c.fp, c.tn, c.fn) != counts
        exact = pixel_metrics(c, exact=True)
        bad_metrics += exact.as_dict() != metrics_fractions(*counts)
        # float mode: 1 - x for VS may sit one rounding step from the exact value
        floats = pixel_metrics(c)
        bad_metrics += any(abs(float(v) - getattr(floats, k)) > 1e-15 for k, v in metrics_fractions(*counts).items())
        bad_identity += exact.dsc != 2 * exact.jaccard / (1 + exact.jaccard)
    ok = bad_counts == bad_metrics == bad_identity == 0
    assert criterion(6, ok, f"1000 random 3^3 pairs: {bad_counts} count, {bad_metrics} metric, "
                            f"{bad_identity} DSC-Jaccard mismatches")


# 7 --------------------------------------------------------------------------

def _random_mesh(rng):
    n_vert = int(rng.integers(4, 100))
    n_tri = int(rng.integers(1, 201))
    verts = rng.uniform(-2, 2, size=(n_vert, 3))
    tris = np.array([rng.choice(n_vert, 3, replace=False) for _ in range(n_tri)])
    return SurfaceMesh(verts, tris)


def test_criterion_07_surface_error_analytic(criterion):
    t0 = time.perf_counter()
    sphere = np.indices((24, 24, 24)) - 11.5
    mesh = extract_surface((sphere ** 2).sum(0) <= 64, 0.35)
    same = surface_error(mesh, mesh)

    # unit-square plates, each split into a fine triangle grid, 0.35 mm apart
    g = np.linspace(0, 1, 11)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    idx = np.arange(121).reshape(11, 11)
    tris = np.concatenate([np.stack([idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()], 1),
                           np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()], 1)])
    plates = surface_error(SurfaceMesh(verts, tris), SurfaceMesh(verts + [0, 0, 0.35], tris))

    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(100):
        gt, pred = _random_mesh(rng), _random_mesh(rng)
        brute = surface_error_brute(gt.vertices, pred.vertices, pred.triangles)
        worst = max(worst, abs(surface_error(gt, pred) - brute))
    elapsed = time.perf_counter() - t0
    ok = same == 0 and abs(plates - 0.35) <= 1e-6 and worst <= 1e-9 and elapsed < 120
    assert criterion(7, ok, f"identical {same:.1e}, plates {plates:.9f} mm, "
                            f"max |fast - brute| {worst:.1e} on 100 pairs; {elapsed:.1f}s")


# 8 --------------------------------------------------------------------------

def test_criterion_08_dilated_sphere(criterion):
    r = 10
    d2 = ((np.indices((32, 32, 32)) - 15.5) ** 2).sum(0)
    sphere = d2 <= r * r
    # the sphere grown by one voxel in every direction: radius r + 1
    dilated = d2 <= (r + 1) ** 2
    err = surface_error(extract_surface(sphere, 0.35), extract_surface(dilated, 0.35))
    # the 6-connected binary dilation is a subset of the one-voxel grown sphere
    assert (ndimage.binary_dilation(sphere) <= dilated).all()
    ok = 0.28 <= err <= 0.42
    assert criterion(8, ok, f"surface error {err:.4f} mm (window [0.28, 0.42])"), err


# 9 --------------------------------------------------------------------------

def test_criterion_09_aha_trimodal(criterion):
    hits = 0
    range_ok = True
    for seed in range(20):
        spec = PhantomSpec(seed=seed)
        vol = generate_phantom(spec).volume
        cut = find_background_cutoff(compute_histogram(vol, AhaParams().bins))
        hits += spec.background[0] < cut < spec.tissue[0]
        out = adaptive_histogram_attention(vol).data
        range_ok &= out.min() >= 0 and out.max() <= 1 and out.min() == 0 and out.max() == 1
    ok = hits >= 18 and range_ok
    assert criterion(9, ok, f"cutoff between background and tissue modes in {hits}/20 cases; "
                            f"output range [0, 1]: {range_ok}")


# 10 -------------------------------------------------------------------------

def test_criterion_10_overfit(criterion):
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    ph = generate_phantom(PhantomSpec(seed=10))
    full = ph.full_mask.data.astype(bool)
    # the 32^3 window holding the most vessel voxels
    counts = ndimage.uniform_filter(full.astype(np.float64), 32, mode="constant")
    c = np.clip(np.array(np.unravel_index(np.argmax(counts), counts.shape)) - 16, 0, 32)
    sl = tuple(slice(o, o + 32) for o in c)
    image = standardize(ph.volume.data)[sl]
    patch = Patch(image, image, tuple(int(o) for o in c), PatchGroup.LABELED, full[sl].astype(np.uint8))
    # a fitting-capacity check, so a step size of 1e-2: at 1e-3 fifty Adam steps leave the soft
    # Dice near 0.67 even though the argmax already overlaps well
    cfg = TrainerConfig(patch_size=32, augment=False, learning_rate=1e-2,
                        loss={"sup_weight": 1.0, "semi_weight": 0.0},
                        network=NetworkConfig(base_channels=8, depth=2), seed=0)
    state = make_state(cfg)
    for _ in range(50):
        rep = train_step(state, [patch], [], cfg)
    dsc = patch_dice(state.teacher, [patch], use_vessel_like=False)
    elapsed = time.perf_counter() - t0
    ok = rep.sup < 0.1 and dsc > 0.95 and elapsed < 180
    assert criterion(10, ok, f"supervised loss {rep.sup:.4f}, train DSC {dsc:.4f}, "
                             f"{int(patch.mask.sum())} vessel voxels; {elapsed:.0f}s")


# 11 / 12 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    result = run_ablation(AblationSettings(), out)
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_11_phantom_trend(criterion, ablation):
    result, elapsed = ablation
    sens = {v: result.median_fine_sensitivity(v) for v in ("supervised", "boundary", "semi")}
    seeds = sorted({r.seed for r in result.runs})
    order = {s: result.surface_order_holds(s) for s in seeds}
    se = {s: tuple(round(result.get(v, s).surface_error, 4) for v in ("supervised", "boundary", "semi"))
          for s in seeds}
    sens_ok = sens["semi"] > sens["supervised"]
    order_ok = sum(order.values()) >= 2
    ok = sens_ok and order_ok and elapsed < 45 * 60
    detail = (f"median fine sensitivity sup {sens['supervised']:.4f} / bnd {sens['boundary']:.4f} / "
              f"semi {sens['semi']:.4f} (semi > sup: {sens_ok}); surface error (a, b, c) per seed {se}, "
              f"c <= b <= a in {sum(order.values())}/3 seeds; {elapsed / 60:.1f} min")
    assert criterion(11, ok, detail), detail


@pytest.mark.slow
def test_criterion_12_determinism(criterion, ablation, tmp_path):
    result, _ = ablation
    settings = dataclasses.replace(AblationSettings(), seeds=(0,))
    again = run_ablation(settings, tmp_path)
    diffs = []
    for run in again.runs:
        ref = result.get(run.variant, run.seed)
        if run.log != ref.log:
            diffs.append(f"{run.variant} log")
        if run.per_case != ref.per_case:
            diffs.append(f"{run.variant} metrics")
    ok = not diffs
    assert criterion(12, ok, f"seed 0 rerun of all three variants: differences {diffs or 'none'}"), diffs
