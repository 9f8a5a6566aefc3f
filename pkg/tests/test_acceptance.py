from __future__ import annotations

import math
import time
import warnings

import numpy as np
import pytest
import torch

from cpga import dataset as D
from cpga import interpret as I
from cpga import lattice as L
from cpga import models as M
from cpga import optics as O
from cpga import training as T
from cpga.cli import main as cli_main
from conftest import verdict
from test_models import late_film_identity_gap
from test_training import wmse_grad_error

SLOPES = {"primitive": -0.567, "diamond": -0.8255, "gyroid": -0.6475, "neovius": -0.1815}
ABLATION_ARCHS = ("late_film", "image_only", "numeric_only")
ABLATION_SEEDS = (0, 1, 2)
ABLATION_BUDGET_S = 30 * 60


def _build_full(root):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return D.build_dataset(root, D.BuildSettings(), config_hash="acceptance")


@pytest.fixture(scope="module")
def full_dataset(tmp_path_factory):
    return _build_full(tmp_path_factory.mktemp("full") / "a")


@pytest.fixture(scope="module")
def ablation(full_dataset):
    t0 = time.perf_counter()
    table = T.ablate(full_dataset, ABLATION_ARCHS, ABLATION_SEEDS, T.TrainConfig(), keep_checkpoints=True)
    return table, time.perf_counter() - t0


def test_criterion_1_porosity_slopes():
    t0 = time.perf_counter()
    parts, ok = [], True
    for g, target in SLOPES.items():
        lo, hi = min(D.DEFAULT_OFFSETS[g]), max(D.DEFAULT_OFFSETS[g])
        fit = L.sweep_and_fit(g, 2, np.linspace(lo, hi, 7), "porosity", grid_resolution=100)
        good = abs(fit.slope - target) <= 0.15 * abs(target) and fit.r2 >= 0.99
        ok &= good
        parts.append(f"{g} {fit.slope:.4f} (R2 {fit.r2:.4f})")
    secs = time.perf_counter() - t0
    ok &= secs <= 120
    verdict(1, "porosity-offset slopes", ok, ", ".join(parts) + f"; {secs:.1f} s")
    assert ok


def _sphere_errors(n, size=10.0):
    r = 0.3 * size
    h = size / n
    x = (np.arange(n) + 0.5) * h - size / 2
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    f = r - np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    area = L.surface_area(L.isosurface(f, h))
    vol = np.count_nonzero(f >= 0) * h ** 3
    return abs(area / (4 * math.pi * r ** 2) - 1), abs(vol / (4 / 3 * math.pi * r ** 3) - 1)


def test_criterion_2_sphere_oracle():
    a50, v50 = _sphere_errors(50)
    a100, v100 = _sphere_errors(100)
    ok = a100 < 0.02 and v100 < 0.02 and a100 < a50 and v100 < v50
    verdict(2, "sphere area/volume", ok,
            f"area err {a50:.4%} -> {a100:.4%}, volume err {v50:.4%} -> {v100:.4%} (res 50 -> 100)")
    assert ok


@pytest.mark.slow
def test_criterion_3_design_grid(full_dataset, tmp_path):
    m = full_dataset.manifest
    sizes = (len(m.train), len(m.val), len(m.test))
    again = tmp_path / "b"
    _build_full(again)
    a_files = sorted(p.relative_to(full_dataset.root) for p in full_dataset.root.rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    identical = a_files == b_files and all(
        (full_dataset.root / f).read_bytes() == (again / f).read_bytes() for f in a_files)
    ok = len(D.build_design_grid()) == 648 and len(full_dataset.ids) == 648 and sizes == (414, 104, 130) \
        and identical
    verdict(3, "design grid and splits", ok,
            f"{len(full_dataset.ids)} records, splits {sizes}, rebuild byte-identical: {identical} "
            f"({len(a_files)} files)")
    assert ok


def test_criterion_4_kernel_transform_suite():
    worst_sum = 0.0
    for name, params in O.PRESETS.items():
        for pitch in (0.02, 0.05, 0.1, 0.3125):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for k in (O.gaussian_kernel(params.sigma_x, params.sigma_y, pitch),
                          O.gaussian_kernel(params.sigma_diffusion, params.sigma_diffusion, pitch)):
                    worst_sum = max(worst_sum, abs(k.taps.sum() - 1.0))
    ident = True
    for params in O.PRESETS.values():
        for v in (0.0, 1.0):
            s = O.ProjectionStack(np.full((4, 24, 24), v), 0.1, 0.05)
            ident &= np.array_equal(O.forward_transform(s, params, alpha=1.5).layers, s.layers)
    rng = np.random.default_rng(0)
    params = O.preset("paper-methods")
    mono = 0
    for _ in range(100):
        s = O.ProjectionStack(rng.uniform(size=(3, 20, 20)), 0.1, 0.05)
        lo, hi = np.sort(rng.uniform(0, 2, size=2))
        mono += bool(np.all(O.apply_diffusion(s, params, hi).layers <= O.apply_diffusion(s, params, lo).layers))
    ok = worst_sum <= 1e-9 and ident and mono == 100
    verdict(4, "kernel/transform suite", ok,
            f"max |sum-1| {worst_sum:.1e}, identity on uniform 0/1: {ident}, monotone {mono}/100")
    assert ok


def test_criterion_5_loss_suite():
    t = torch.tensor([0.55, 0.65, 0.75, 0.85, 0.95], dtype=torch.float64)
    p = t + torch.tensor([0.1, 0.1, 0.1, 0.1, -0.1], dtype=torch.float64)
    got = [T.wmse(p[i:i + 1], t[i:i + 1]).item() for i in range(5)]
    expected = [0.07, 0.06, 0.05, 0.04, 0.01]
    bands = all(abs(g - e) < 1e-12 for g, e in zip(got, expected))
    rng = np.random.default_rng(0)
    grad = max(wmse_grad_error(rng.uniform(0.4, 1.0, 16), rng.uniform(0.5, 0.95, 16)) for _ in range(20))
    ok = bands and grad < 1e-4
    verdict(5, "wMSE bands and gradient", ok,
            f"band losses {[round(g, 12) for g in got]}, worst gradient rel. error {grad:.1e}")
    assert ok


def _saliency_fd(n_voxels=10, eps=1e-6, seed=5):
    shape = (32, 32, 32)
    model = M.build_model(M.ModelSpec("late_film", M.DESK_CHANNELS, shape), seed=0).eval().double()
    g = torch.Generator().manual_seed(seed)
    n = torch.randn(1, 6, generator=g, dtype=torch.float64)
    o = torch.rand(1, 1, *shape, generator=g, dtype=torch.float64)
    c = torch.rand(1, 1, *shape, generator=g, dtype=torch.float64)
    sal = I.saliency(model, n, o, c)
    grad = sal.values * sal.raw_max
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_voxels):
            idx = tuple(int(rng.integers(s)) for s in shape)
            up, dn = o.clone(), o.clone()
            up[(0, 0) + idx] += eps
            dn[(0, 0) + idx] -= eps
            fd = abs((model(n, up, c) - model(n, dn, c)).item() / (2 * eps))
            worst = max(worst, abs(fd - grad[idx]) / max(grad[idx], fd, 1e-12))
    return worst


def test_criterion_6_film_identity_and_saliency():
    gap = late_film_identity_gap(20, (32, 32, 32), M.DESK_CHANNELS)
    fd = _saliency_fd()
    ok = gap <= 1e-6 and fd < 1e-3
    verdict(6, "FiLM identity and saliency gradients", ok,
            f"max |gated - ungated| {gap:.1e} over 20 samples, saliency FD rel. error {fd:.1e} at 10 voxels")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation_ordering(ablation):
    table, secs = ablation
    r2 = {a: table.mean_r2(a) for a in ABLATION_ARCHS}
    ordered = r2["late_film"] > r2["image_only"] > r2["numeric_only"]
    ok = ordered and r2["numeric_only"] < 0.2 and r2["late_film"] > 0.6 and secs <= ABLATION_BUDGET_S
    detail = ", ".join(f"{a} {v:.4f}" for a, v in r2.items())
    verdict(7, "ablation ordering (mean test R2, 3 seeds)", ok, f"{detail}; {secs:.0f} s for 9 runs")
    assert ok


class _Constant(torch.nn.Module):
    def forward(self, numeric, orig, conv):
        return torch.full((orig.shape[0],), 0.81)


@pytest.mark.slow
def test_criterion_8_interpretability(ablation, full_dataset):
    table, _ = ablation
    const = I.occlusion_map(_Constant(), np.zeros(6, np.float32),
                            full_dataset.original[0], full_dataset.transformed[0])
    zero = bool(np.all(const.values == 0.0))

    ckpt = table.checkpoints[("late_film", 0)]
    model = ckpt.to_model()
    test_idx = full_dataset.split_index("test")
    order = test_idx[np.argsort(full_dataset.target[test_idx], kind="stable")]
    i = int(order[len(order) // 2])  # test record with the median target
    z = full_dataset.standardized()[i].astype(np.float32)
    occ = I.occlusion_map(model, z, full_dataset.original[i], full_dataset.transformed[i],
                          sample_id=full_dataset.ids[i])
    contrast = I.solid_void_contrast(occ, full_dataset.original[i])

    zs = full_dataset.standardized()[test_idx].astype(np.float32)
    planted = []
    for arch in ("late_film", "hier_film"):
        for k in range(len(D.FEATURE_NAMES)):
            for sign in (1.0, -1.0):
                m = M.build_model(M.ModelSpec(arch, M.DESK_CHANNELS), seed=0)
                rep = I.gamma_analysis(I.plant_feature_projector(m, k, sign=sign), zs)
                planted.append(abs(rep.correlations[D.FEATURE_NAMES[k]] - sign))
    ok = zero and contrast > 1 and max(planted) < 1e-9
    verdict(8, "interpretability properties", ok,
            f"constant-model occlusion all zero: {zero}, solid/void contrast {contrast:.3f} "
            f"({full_dataset.ids[i]}), planted gamma max |R - sign| {max(planted):.1e}")
    assert ok


def test_criterion_9_ablate_determinism(small_dataset, tmp_path, capsys):
    args = ["ablate", "--data", str(small_dataset.root), "--archs", "numeric_only,late_film", "--seeds", "2",
            "--epochs", "2", "--channels", "2,2,4,4"]
    codes = [cli_main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    capsys.readouterr()
    a, b = ((tmp_path / d / "ablation.json").read_bytes() for d in ("a", "b"))
    ok = codes == [0, 0] and a == b
    verdict(9, "ablate determinism", ok, f"exit codes {codes}, identical JSON: {a == b} ({len(a)} bytes)")
    assert ok
