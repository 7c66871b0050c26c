"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through ``record``; ``conftest.py`` prints
the collected lines at the end of the run. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from treatnet import bench, cli
from treatnet.autodiff import TrainConfig, backward, cross_entropy, evaluate, train
from treatnet.controller import (
    Behavior,
    ControllerConfig,
    InferenceEvent,
    servo_frames,
    simulate,
)
from treatnet.data import augment_image
from treatnet.errors import TreatNetError
from treatnet.graph import (
    ActivationCache,
    build_convnet,
    build_reduced_convnet,
    flop_count,
    fold_batchnorm,
    forward,
    predict,
)
from treatnet.interpret import default_gradcam_layer, gradcam, integrated_gradients
from treatnet.quantize import (
    QuantScheme,
    deserialize,
    from_bytes,
    quantize,
    quantized_predict,
    serialize,
    to_bytes,
)
from treatnet.synthetic import synthetic_splits

from conftest import record
from test_controller import recount_oracle
from test_graph import randomize_bn

DESK_EPOCHS = 12


@pytest.fixture(scope="module")
def desk():
    """The 64 px ConvNet trained on the generated bar/blob set."""
    splits = synthetic_splits(size=64, seed=0, n_train=600, n_val=80, n_test=120)
    model = build_convnet(64, seed=0)
    start = time.perf_counter()
    report = train(model, splits["train"][0], splits["val"][0],
                   TrainConfig(epochs=DESK_EPOCHS, batch_size=32, lr=1e-4, augment=True, seed=0),
                   augment_fn=augment_image())
    elapsed = time.perf_counter() - start
    test, masks = splits["test"]
    return {"model": model, "report": report, "seconds": elapsed, "test": test, "masks": masks,
            "pred": predict(model, test.images).argmax(axis=1)}


def test_1_gradient_fidelity():
    start = time.perf_counter()
    model = build_reduced_convnet(8, 2, (8, 16), dense_units=32, seed=0, dtype=np.float64).train()
    rng = np.random.default_rng(100)
    x = rng.random((4, 8, 8, 3))
    y = rng.integers(0, 3, 4)

    def loss():
        return cross_entropy(forward(model, x, rng=np.random.default_rng(7)), y)

    cache = ActivationCache()
    forward(model, x, cache=cache, rng=np.random.default_rng(7))
    grads = backward(model, cache, y)
    h = 1e-5
    worst, checked = 0.0, 0
    for i, name, arr in model.trainable():
        flat = arr.reshape(-1)
        analytic = grads.params[i][name].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss()
            flat[j] = old - h
            down = loss()
            flat[j] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(analytic[j] - num) / max(abs(analytic[j]), abs(num), 1e-6))
            checked += 1
    seconds = time.perf_counter() - start
    ok = worst <= 1e-4 and seconds < 60
    record(1, "gradient fidelity", ok,
           f"{checked} params, max rel err {worst:.2e} (<= 1e-4), {seconds:.1f}s (< 60s)")
    assert ok


@pytest.mark.slow
def test_2_fusion_equivalence():
    start = time.perf_counter()
    worst = 0.0
    flops_down = True
    for seed in range(20):
        model = randomize_bn(build_convnet(64, seed=seed), seed)
        folded = fold_batchnorm(model)
        x = np.random.default_rng(1000 + seed).random((100, 64, 64, 3), dtype=np.float32)
        worst = max(worst, float(np.abs(forward(folded, x) - forward(model, x)).max()))
        flops_down &= flop_count(folded) < flop_count(model)
    seconds = time.perf_counter() - start
    ok = worst <= 1e-5 and flops_down and seconds < 120
    record(2, "fusion equivalence", ok,
           f"20 seeds x 100 inputs, max abs diff {worst:.2e} (<= 1e-5), "
           f"FLOPs reduced: {flops_down}, {seconds:.1f}s (< 120s)")
    assert ok


def test_3_quantization_bounds():
    model = build_convnet(256, seed=0)
    folded = fold_batchnorm(model)
    sizes, int8 = {}, None
    for scheme in QuantScheme:
        qm = quantize(model, scheme)
        sizes[scheme] = len(to_bytes(qm))
        if scheme is QuantScheme.DYNAMIC_INT8:
            int8 = qm
    r16 = sizes[QuantScheme.FLOAT16] / sizes[QuantScheme.STANDARD32]
    r8 = sizes[QuantScheme.DYNAMIC_INT8] / sizes[QuantScheme.STANDARD32]
    within = True
    for group, ref in zip(int8.tensors, folded.params):
        for name, t in group.items():
            if t.scales is None:
                continue
            w = ref[name].astype(np.float32).astype(np.float64)
            s = t.scales.astype(np.float64)
            within &= bool(np.all(np.abs(t.data.astype(np.float64) * s - w) <= s / 2))
    ok = r16 <= 0.52 and r8 <= 0.27 and within
    record(3, "quantization bounds", ok,
           f"float16 {r16:.4f}x (<= 0.52), int8 {r8:.4f}x (<= 0.27), int8 error <= scale/2: {within}")
    assert ok


@pytest.mark.slow
def test_4_desk_learning(desk):
    report = desk["report"]
    model = desk["model"]
    test = desk["test"]
    acc = evaluate(model, test).accuracy
    f32 = desk["pred"]
    agree = {}
    for scheme in (QuantScheme.FLOAT16, QuantScheme.DYNAMIC_INT8):
        pred = quantized_predict(quantize(model, scheme), test.images).argmax(axis=1)
        agree[scheme] = float((pred == f32).mean())
    epochs = len(report.epochs)
    ok = (acc >= 0.95 and epochs <= 30 and desk["seconds"] < 600
          and agree[QuantScheme.FLOAT16] >= 0.99 and agree[QuantScheme.DYNAMIC_INT8] >= 0.95)
    record(4, "desk-scale learning", ok,
           f"test acc {acc:.4f} (>= 0.95) after {epochs} epochs (<= 30), "
           f"final val acc {report.epochs[-1].val_acc:.4f}, train time {desk['seconds']:.0f}s (< 600s), "
           f"float16 agreement {agree[QuantScheme.FLOAT16]:.3f} (>= 0.99), "
           f"int8 agreement {agree[QuantScheme.DYNAMIC_INT8]:.3f} (>= 0.95)")
    assert ok


@pytest.mark.slow
def test_5_ig_completeness(desk):
    model, test = desk["model"], desk["test"]
    worst_rel = 0.0
    strict, tolerant = 0, 0
    for i in range(10):
        target = int(test.labels[i])
        gaps = {}
        for steps in (8, 64, 512):
            amap = integrated_gradients(model, test.images[i], target, steps=steps)
            gaps[steps] = amap.completeness_gap
            delta = abs(amap.score_delta)
        worst_rel = max(worst_rel, gaps[512] / delta)
        strict += gaps[8] >= gaps[64] >= gaps[512]
        # an increase smaller than the 1% completeness budget counts as noise
        noise = 0.01 * delta
        tolerant += gaps[64] <= gaps[8] + noise and gaps[512] <= gaps[64] + noise
    ok = worst_rel <= 0.01 and tolerant == 10
    record(5, "integrated gradients completeness", ok,
           f"max gap at 512 steps {100 * worst_rel:.3f}% of |F(x)-F(0)| (<= 1%), "
           f"gap non-increasing over 8/64/512 within noise for {tolerant}/10 images "
           f"(strictly for {strict}/10)")
    assert ok


@pytest.mark.slow
def test_6_gradcam_sanity(desk):
    model, test, masks, pred = desk["model"], desk["test"], desk["masks"], desk["pred"]
    hits, total, earlier = 0, 0, 0
    per_class = np.zeros((3, 2), int)
    # for reference only: the ReLU of the previous conv block (a block is five layers)
    reference_layer = default_gradcam_layer(model) - 5
    for i in np.flatnonzero(pred == test.labels):
        label = int(test.labels[i])
        heat = gradcam(model, test.images[i], label).values
        hit = heat[masks[i]].mean() > heat[~masks[i]].mean()
        hits += hit
        total += 1
        per_class[label] += (hit, 1)
        ref = gradcam(model, test.images[i], label, reference_layer).values
        earlier += ref[masks[i]].mean() > ref[~masks[i]].mean()
    frac = hits / total
    ok = frac >= 0.8
    by_class = ", ".join(f"{name} {h}/{n}" for name, (h, n) in
                         zip(("lying", "sitting", "standing"), per_class))
    record(6, "GradCAM sanity", ok,
           f"default layer: inside > outside for {hits}/{total} correctly classified images = "
           f"{frac:.3f} (>= 0.80); by class: {by_class}; "
           f"not scored, layer {reference_layer}: {earlier}/{total}")
    assert ok


def _random_stream(rng):
    n = int(rng.integers(1, 10))
    k = n // 2 + 1 + int(rng.integers(0, n - n // 2))
    reward = frozenset(b for b in Behavior if rng.random() < 0.6)
    cfg = ControllerConfig(n, k, reward, int(rng.integers(1, 3000)), float(rng.choice([0.0, 0.5])))
    length = int(rng.integers(0, 200))
    sticky = rng.random()
    t, label, events = 0, int(rng.integers(0, 3)), []
    for _ in range(length):
        t += int(rng.integers(0, 250))
        if rng.random() > sticky:
            label = int(rng.integers(0, 3))
        events.append(InferenceEvent(t, Behavior(label), float(rng.random())))
    return cfg, events


@pytest.mark.slow
def test_7_controller_safety():
    rng = np.random.default_rng(2024)
    mismatches, violations, dispenses = 0, 0, 0
    for _ in range(10_000):
        cfg, events = _random_stream(rng)
        got = [str(d) for d in simulate(events, cfg).decisions]
        mismatches += got != recount_oracle(events, cfg)
        count = sum(d.startswith("Dispense") for d in got)
        dispenses += count
        if events:
            span = events[-1].timestamp_ms - events[0].timestamp_ms
            violations += count > 1 + span // cfg.refractory_ms
    ok = mismatches == 0 and violations == 0
    record(7, "controller safety", ok,
           f"10000 streams, {mismatches} oracle mismatches, {violations} rate-limit violations, "
           f"{dispenses} dispenses exercised")
    assert ok


def _datasheet_counts(angle):
    exact = (1 + Fraction(angle) / 180) / 20 * 4096
    return math.floor(exact + Fraction(1, 2))


def test_8_servo_bit_exactness():
    prescale_oracle = round(Fraction(25_000_000, 4096 * 50)) - 1
    results = {}
    for angle, want in ((0, 205), (60, 273), (180, 410)):
        writes = dict(servo_frames(angle).writes[4:])
        counts = writes[0x08] | (writes[0x09] << 8)
        results[angle] = counts
        assert counts == want == _datasheet_counts(angle)
    prescale = servo_frames(60).writes[1]
    ok = prescale == (0xFE, 121) and prescale_oracle == 121
    record(8, "servo bit-exactness", ok,
           f"counts 0/60/180 deg = {results[0]}/{results[60]}/{results[180]} (205/273/410), "
           f"prescale {prescale[1]} (121)")
    assert ok


def test_9_benchmark_methodology(tmp_path, monkeypatch):
    path = tmp_path / "m.cnm"
    serialize(quantize(build_reduced_convnet(8, 2, (4, 8), dense_units=8), QuantScheme.STANDARD32), path)
    seen = []

    def stub(qm, image):
        seen.append(image)
        time.sleep(0.01)

    monkeypatch.setattr(cli, "quantized_forward", stub)
    res = cli.cmd_bench(path)
    same_image = all(x is seen[0] for x in seen)
    calls = len(seen)
    ok = 90 <= res.fps <= 110 and same_image and calls == bench.WARMUP_ITERATIONS + 64
    record(9, "benchmark methodology", ok,
           f"sleep stub FPS {res.fps:.3f} (in [90, 110]), {calls} calls = 3 warmup + 64 timed, "
           f"single cached image: {same_image}")
    assert ok


def _random_model(rng):
    res = int(rng.choice([4, 8, 16]))
    blocks = int(rng.integers(1, 3))
    filters = tuple(int(f) for f in rng.integers(1, 9, blocks))
    model = build_reduced_convnet(res, blocks, filters, dense_units=int(rng.integers(1, 17)),
                                  seed=int(rng.integers(0, 2**31)))
    return randomize_bn(model, int(rng.integers(0, 2**31)))


@pytest.mark.slow
def test_10_format_robustness(tmp_path):
    rng = np.random.default_rng(10)
    mismatches, crashes, prefixes = 0, 0, 0
    for m in range(50):
        model = _random_model(rng)
        for scheme in QuantScheme:
            path = tmp_path / f"m{m}_{scheme.label}.cnm"
            serialize(quantize(model, scheme), path)
            data = path.read_bytes()
            mismatches += to_bytes(deserialize(path)) != data
            for n in range(len(data)):
                prefixes += 1
                try:
                    from_bytes(data[:n])
                    crashes += 1  # a truncated file must not load
                except TreatNetError:
                    pass
                except Exception:  # noqa: BLE001 - anything unstructured is a failure
                    crashes += 1
    ok = mismatches == 0 and crashes == 0
    record(10, "format robustness", ok,
           f"150 files round-trip mismatches {mismatches}, {prefixes} truncations, "
           f"{crashes} unstructured failures")
    assert ok
