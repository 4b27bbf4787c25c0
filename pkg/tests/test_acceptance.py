"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 (overfit run) and 11 (latency scaling) train or time real
models and take several minutes on one CPU core.
"""
import csv
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from deepcap import metrics
from deepcap.capsules import conv_capsule, primary_capsules, route, squash, upsample_capsule
from deepcap.cli import bench_inference, run
from deepcap.errors import CheckpointError
from deepcap.model import (DEFAULT_CONFIG, REDUCED_CONFIG, DeepCap, build_model, count_parameters,
                           load_checkpoint, save_checkpoint)
from deepcap.numerics import conv2d, conv2d_transpose, gaussian_blur, grad_check, softmax_axis
from deepcap.synth import generate_dataset
from deepcap.training import TrainConfig, evaluate, train
from oracles import (confusion, conv2d_loops, conv2d_transpose_loops, dice_counts, hausdorff_pairs,
                     route_trace)

f64 = torch.float64


def _t(a):
    return torch.tensor(np.asarray(a), dtype=f64)


def test_criterion_01_kernel_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    conv_exact = trans_exact = adjoint_ok = 0
    worst_adjoint = 0.0
    n = 0
    while n < 100:
        c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
        k = int(rng.choice([1, 2, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k))
        h = w = int(rng.integers(1, 9))
        if h + 2 * pad < k:
            continue
        n += 1
        x, wt, b = rng.normal(size=(c_in, h, w)), rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)
        y = conv2d(_t(x), _t(wt), _t(b), stride, pad).numpy()
        conv_exact += np.array_equal(y, conv2d_loops(x, wt, b, stride, pad))
        # output padding chosen so the transpose restores the input side
        op = (h + 2 * pad - k) % stride
        g, bt = rng.normal(size=y.shape), rng.normal(size=c_in)
        xt = conv2d_transpose(_t(g), _t(wt), _t(bt), stride, pad, op).numpy()
        trans_exact += np.array_equal(xt, conv2d_transpose_loops(g, wt, bt, stride, pad, op))
        xt0 = conv2d_transpose(_t(g), _t(wt), None, stride, pad, op).numpy()
        y0 = conv2d(_t(x), _t(wt), None, stride, pad).numpy()
        lhs, rhs = float((y0 * g).sum()), float((x * xt0).sum())
        err = abs(lhs - rhs) / max(1.0, abs(lhs))
        worst_adjoint = max(worst_adjoint, err)
        adjoint_ok += xt0.shape == x.shape and err <= 1e-10
    elapsed = time.perf_counter() - t0
    ok = conv_exact == 100 and trans_exact == 100 and adjoint_ok == 100 and elapsed < 60
    criterion(1, "numeric-kernel oracles", ok,
              f"conv exact {conv_exact}/100, transpose exact {trans_exact}/100, "
              f"adjoint max rel {worst_adjoint:.1e}, {elapsed:.1f}s")


def test_criterion_02_gradient_suite(criterion):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(202)

    def r(*shape, scale=1.0):
        return (torch.rand(*shape, generator=gen, dtype=f64) * 2 - 1) * scale

    u4 = squash(r(1, 2, 3, 4, 4), dim=2)
    u3 = squash(r(1, 2, 3, 3, 3), dim=2)
    w_conv = r(2, 3, 3, 2, 3, 3, scale=0.6)
    p = torch.rand(2, 6, 6, generator=gen, dtype=f64) * 0.6 + 0.2
    y = (torch.rand(2, 6, 6, generator=gen, dtype=f64) > 0.5).to(f64)
    checks = {
        "primary capsule": (lambda x, w, b, we, be: (primary_capsules(x, w, b, 2, 3, 4, 2, we, be) ** 2).sum(),
                            [r(1, 2, 8, 8), r(4, 2, 5, 5, scale=0.3), r(4), r(6, 4, 1, 1), r(6)]),
        "conv capsule (3 routing iterations)": (
            lambda u, w: (conv_capsule(u, w, 1, 1, 3) ** 2).sum(), [u4, w_conv]),
        "conv capsule stride 2": (lambda u, w: (conv_capsule(u, w, 2, 1, 3) ** 2).sum(), [u4, w_conv]),
        "upsample transposed": (lambda u, w: (upsample_capsule(u, w, "transposed") ** 2).sum(), [u3, w_conv]),
        "upsample bilinear": (lambda u, w: (upsample_capsule(u, w, "bilinear") ** 2).sum(), [u3, w_conv]),
        "blur + softmax head": (lambda z, t: (softmax_axis(gaussian_blur(z, 3, 2.0), dim=1) * t).sum(),
                                [r(2, 2, 6, 6, scale=2.0), r(2, 2, 6, 6)]),
        "combined loss": (lambda q: metrics.combined_loss(q, y), [p]),
    }
    worst = {}
    for name, (fn, inputs) in checks.items():
        worst[name] = grad_check(fn, inputs, max_coords=80).max_rel_error
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 300
    criterion(2, "gradient suite", ok,
              f"max rel error {max(worst.values()):.1e} over {len(worst)} layer types, {elapsed:.1f}s")


def test_criterion_03_routing_oracles(criterion):
    a = [0.5, -0.25, 1.0, 0.75]
    cases = {
        "single child": [[[0.3, -1.2, 2.0]]],
        "opposing pair": [[a, a], [[-x for x in a], [-x for x in a]]],
        "agreeing pair": [[[0.6, 0.0, -0.8, 0.0]] * 2] * 2,
    }
    exact = 0
    for u in cases.values():
        v, state = route(_t(u), 3, record=True)
        ref_v, ref_trace = route_trace(u, 3)
        exact += v.tolist() == ref_v and [h.tolist() for h in state.history] == ref_trace
    gen = torch.Generator().manual_seed(303)
    windows = torch.randn(1000, 9 * 2, 4, 8, generator=gen, dtype=f64)   # 3x3 window, 2 maps, 4 parents
    _, state = route(windows, 3, record=True)
    worst = max(float((h.sum(dim=-1) - 1).abs().max()) for h in state.history)
    ok = exact == 3 and worst <= 1e-10 and len(state.history) == 3
    criterion(3, "routing oracles", ok, f"hand traces exact {exact}/3, weight-sum error {worst:.1e}")


def test_criterion_04_squash_law(criterion):
    gen = torch.Generator().manual_seed(404)
    p = torch.randn(100_000, 16, generator=gen, dtype=f64) * torch.rand(100_000, 1, generator=gen, dtype=f64) * 10
    v = squash(p)
    norms = v.norm(dim=-1)
    cos = (v * p).sum(-1) / (norms * p.norm(dim=-1))
    unit = torch.zeros(1, 16, dtype=f64)
    unit[0, 3] = 1.0
    one, three = float(squash(unit).norm()), float(squash(3 * unit).norm())
    ok = bool((norms < 1).all()) and float((cos - 1).abs().max()) < 1e-12 and one == 0.5 and three == 0.9
    criterion(4, "squash law", ok, f"max norm {float(norms.max()):.6f}, |p|=1 -> {one}, |p|=3 -> {three}")


def test_criterion_05_metric_oracles(criterion):
    rng = np.random.default_rng(505)
    exact = 0
    for _ in range(50):
        a, b = (rng.random((2, 16, 16)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        ok = float(metrics.soft_dice(a.astype(float), b.astype(float))) == dice_counts(a, b)
        tp, fn, tn, fp = confusion(a, b)
        ok &= metrics.sensitivity_specificity(a, b) == (tp / (tp + fn) if tp + fn else 1.0,
                                                         tn / (tn + fp) if tn + fp else 1.0)
        if a.any() and b.any():
            ok &= metrics.hausdorff(a, b) == hausdorff_pairs(a, b)
        exact += bool(ok)
    sq = np.zeros((16, 16), np.uint8)
    sq[4:10, 3:9] = 1
    shifted = np.roll(sq, 3, axis=0)
    dot_a, dot_b = np.zeros((16, 16)), np.zeros((16, 16))
    dot_a[2, 2], dot_b[2, 7] = 1, 1
    worked = (metrics.hausdorff(sq, sq), metrics.hausdorff(dot_a, dot_b), metrics.hausdorff(sq, shifted))
    criterion(5, "metric oracles", exact == 50 and worked == (0.0, 5.0, 3.0),
              f"exact {exact}/50, worked examples {worked}")


def test_criterion_06_shape_contract(criterion):
    model = build_model(DEFAULT_CONFIG, 0)
    x = torch.rand(1, 3, 256, 256, generator=torch.Generator().manual_seed(6))
    with torch.no_grad():
        probs = model(x)
        prim = model.primary(x)
    grid = tuple(prim[0].permute(0, 2, 3, 1).shape)         # (maps, H, W, dim)
    sums = float((probs.sum(dim=1) - 1).abs().max())
    ok = tuple(probs.shape[1:]) == (2, 256, 256) and sums <= 1e-6 and grid == (4, 64, 64, 16)
    criterion(6, "shape contract", ok, f"output {tuple(probs.shape[1:])}, primary {grid}, sum error {sums:.1e}")


def test_criterion_07_parameter_budget(criterion):
    n = count_parameters(DEFAULT_CONFIG)
    base = count_parameters(DEFAULT_CONFIG.with_variant("IM"))
    d2 = count_parameters(DEFAULT_CONFIG.with_variant("2DG")) - base
    da = count_parameters(DEFAULT_CONFIG.with_variant("ADM")) - base
    built = build_model(DEFAULT_CONFIG, 0).parameter_count
    ok = 4_500_000 <= n <= 5_500_000 and d2 == da > 0 and built == n
    criterion(7, "parameter budget", ok, f"{n:,} parameters, 2DG delta {d2}, ADM delta {da}")


# --- overfit run -------------------------------------------------------------

OVERFIT_PEAK_LR = 1e-3
OVERFIT_EPOCHS = 30


def _moving_average(values, width=5):
    return np.convolve(values, np.ones(width) / width, mode="valid")


@pytest.mark.slow
def test_criterion_08_overfit_run(criterion):
    torch.set_num_threads(1)
    train_set = [pb.to_pullback() for pb in generate_dataset(64, seed=1)]
    held_out = [pb.to_pullback() for pb in generate_dataset(16, seed=2)]
    model = build_model(REDUCED_CONFIG, 0)
    cfg = TrainConfig(batch=8, epochs=OVERFIT_EPOCHS, seed=0, variant="ALL", peak_lr=OVERFIT_PEAK_LR,
                      patience=OVERFIT_EPOCHS, precision="float32", augment=False)
    t0 = time.perf_counter()
    model, report = train(model, train_set, held_out, cfg)
    _, train_summary = evaluate(model, train_set, 10.0)
    _, held_summary = evaluate(model, held_out, 10.0)
    elapsed = time.perf_counter() - t0
    losses = [e.train_loss for e in report.epochs]
    avg = _moving_average(losses)
    monotone = bool(np.all(np.diff(avg) < 0))
    train_sds, held_sds = train_summary["sds"].mean, held_summary["sds"].mean
    ok = (len(report.epochs) == OVERFIT_EPOCHS and train_sds >= 0.95 and held_sds >= 0.90
          and elapsed < 1800 and monotone and model.config.upsample == "transposed")
    criterion(8, "overfit run", ok,
              f"train SDS {train_sds:.4f}, held-out SDS {held_sds:.4f}, {elapsed / 60:.1f} min, "
              f"{model.parameter_count:,} params, 5-epoch average monotone {monotone}")


# --- CLI-driven criteria -------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert run(["synth", "--seed", "9", "--frames", "12", "--frames-per-pullback", "3",
                "--out", str(root / "data")]) == 0
    return root, root / "data" / "manifest.tsv"


@pytest.mark.slow
def test_criterion_09_ablation_harness(criterion, synthetic_manifest, capsys):
    root, manifest = synthetic_manifest
    done = []
    for upsample in ("transposed", "bilinear"):
        for variant in ("IM", "2DG", "ADM", "ALL"):
            out = root / f"{variant}_{upsample}"
            code = run(["train", "--manifest", str(manifest), "--variant", variant, "--upsample", upsample,
                        "--epochs", "1", "--seed", "1", "--batch", "4", "--out", str(out), "--quiet"])
            capsys.readouterr()
            code = code or run(["eval", "--ckpt", str(out / "model.dcap"), "--manifest", str(manifest),
                                "--subset", "test", "--csv", str(out / "metrics.csv")])
            text = capsys.readouterr().out
            header = text.splitlines()[1].split() if len(text.splitlines()) > 1 else []
            block = code == 0 and header[:2] == ["metric", "mean"] and "min - max" in text and \
                any(line.startswith("sds") for line in text.splitlines())
            if block:
                done.append(f"{variant}/{upsample}")
    criterion(9, "ablation harness", len(done) == 8, f"{len(done)}/8 runs emitted summary blocks")


def _train_csv(root, manifest, name, precision):
    out = root / name
    assert run(["train", "--manifest", str(manifest), "--variant", "ALL", "--epochs", "2", "--seed", "5",
                "--batch", "4", "--precision", precision, "--out", str(out), "--quiet"]) == 0
    with open(out / "train_report.csv") as fh:
        return list(csv.reader(fh))


@pytest.mark.slow
def test_criterion_10_determinism(criterion, synthetic_manifest):
    root, manifest = synthetic_manifest
    a64 = _train_csv(root, manifest, "det64a", "float64")
    b64 = _train_csv(root, manifest, "det64b", "float64")
    a32 = _train_csv(root, manifest, "det32a", "float32")
    b32 = _train_csv(root, manifest, "det32b", "float32")
    worst32 = 0.0
    for ra, rb in zip(a32[1:], b32[1:]):
        for x, y in zip(ra, rb):
            x, y = float(x), float(y)
            worst32 = max(worst32, abs(x - y) / max(abs(x), 1e-30) if x != y else 0.0)
    ok = a64 == b64 and len(a32) == len(b32) == 3 and worst32 <= 1e-5
    criterion(10, "determinism", ok, f"64-bit identical {a64 == b64}, 32-bit max rel diff {worst32:.1e}")


@pytest.mark.slow
def test_criterion_11_benchmark_methodology(criterion):
    model = build_model(REDUCED_CONFIG, 0)
    small = DeepCap(replace(REDUCED_CONFIG, input_side=128))
    small.load_state_dict(model.state_dict())
    big_report, _ = bench_inference(model, batch_size=48, reps=5, warmup=1, threads=1)
    small_report, _ = bench_inference(small, batch_size=48, reps=5, warmup=1, threads=1)
    ratio = big_report.ms_per_image / small_report.ms_per_image
    definition = all(math.isclose(r.ms_per_image, sum(r.batch_ms) / len(r.batch_ms) / 48, rel_tol=1e-12)
                     for r in (big_report, small_report))
    ok = definition and big_report.threads == 1 and big_report.repetitions >= 5 and 2 <= ratio <= 8
    criterion(11, "benchmark methodology", ok,
              f"256px {big_report.ms_per_image:.1f} ms/image, 128px {small_report.ms_per_image:.1f} ms/image, "
              f"ratio {ratio:.2f}")


def test_criterion_12_checkpoint(criterion, tmp_path):
    model = build_model(DEFAULT_CONFIG, 12)
    path = tmp_path / "default.dcap"
    size = save_checkpoint(model, path, {"variant": "ALL"})
    loaded = load_checkpoint(path)
    exact = all(torch.equal(p, q) for (_, p), (_, q) in zip(model.named_weights(), loaded.named_weights()))
    blob = path.read_bytes()
    header_len = int.from_bytes(blob[8:12], "little")
    size_ok = size == os.path.getsize(path) == 12 + header_len + 4 * model.parameter_count + 4
    rejected = 0
    corrupted = bytearray(blob)
    corrupted[len(blob) // 2] ^= 0x10
    for bad_bytes, message in ((bytes(corrupted), "corrupt payload"), (blob[:-100], "corrupt payload"),
                               (b"\0" * 4 + blob[4:], "not a checkpoint")):
        bad = tmp_path / "bad.dcap"
        bad.write_bytes(bad_bytes)
        try:
            load_checkpoint(bad)
        except CheckpointError as exc:
            rejected += message in str(exc)
    ok = exact and size_ok and rejected == 3
    criterion(12, "checkpoint", ok,
              f"round trip exact {exact}, {size:,} bytes = 4*{model.parameter_count:,} + {size - 4 * model.parameter_count}"
              f" overhead, rejected {rejected}/3")
