"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run.

Criteria 6 and 7 share one training session (two 10-epoch runs, about 20-25 minutes on one core).
"""

import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from diffguide import tensor as T
from diffguide.backbone import InvertedResidual
from diffguide.config import ModelConfig, preset
from diffguide.data import perturb, split, synth_generate
from diffguide.decoder import DecoderLevel, refined_diff
from diffguide.encoder import DGM, DifferenceAdapter, SpatialChannelAttention, dgm_fuse
from diffguide.losses import ConfusionCounts, f1_iou_from_pre_rec, lovasz_softmax, metrics, total_loss
from diffguide.model import build_model
from diffguide.nn import functional as F
from diffguide.nn.module import init_parameters
from diffguide.profiler import profile, reference_comparison, sweep
from diffguide.tensor import Tensor
from diffguide.train import TrainSettings, evaluate, train
from diffguide.vssm import VSSBlock, scan_forward, scan_reference, selective_scan, ss2d_scan

from conftest import check_directional, check_op_grad

TOY_SETTINGS = TrainSettings(epochs=10, batch_size=16, lr=1e-3, weight_decay=5e-4, seed=0)
TOY_TIME_LIMIT = 15 * 60


def probe_sum(out, probe):
    return T.reduce("sum", out * Tensor(probe))


# ---------------------------------------------------------------- 1


def _op_cases(rng):
    pos = rng.uniform(0.5, 2.0, (3, 4))
    x = rng.uniform(-2.5, 2.5, (3, 4))
    x[np.abs(x) < 0.05] += 0.2  # keep clear of kinks
    img = rng.standard_normal((2, 3, 5, 5))
    scan = (rng.standard_normal((1, 2, 6)), rng.uniform(0.05, 0.5, (1, 2, 6)), -rng.uniform(0.5, 2, (2, 3)),
            rng.standard_normal((1, 3, 6)), rng.standard_normal((1, 3, 6)), rng.standard_normal(2))
    cases = [(f"unary {k}", lambda a, k=k: T.elementwise(k, a), (x,))
             for k in ("neg", "exp", "sigmoid", "silu", "relu", "hardsigmoid", "hardswish", "softplus", "abs")]
    cases += [(f"binary {k}", lambda a, b, k=k: T.elementwise(k, a, b), (pos, rng.uniform(0.5, 2, (1, 4))))
              for k in ("add", "sub", "mul", "div")]
    cases += [
        ("log", T.log, (pos,)),
        ("sqrt", T.sqrt, (pos,)),
        ("power", lambda a: T.power(a, 2.5), (pos,)),
        ("matmul", T.matmul, (rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2)))),
        ("reduce sum", lambda a: T.reduce("sum", a, axis=1), (x,)),
        ("reduce mean", lambda a: T.reduce("mean", a, axis=0, keepdims=True), (x,)),
        ("reduce max", lambda a: T.reduce("max", a, axis=1), (x,)),
        ("reshape/transpose/flip", lambda a: T.flip(T.transpose(T.reshape(a, (4, 3)), (1, 0)), 0), (x,)),
        ("getitem", lambda a: T.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), (x,)),
        ("concat/stack/split", lambda a, b: T.split(T.stack([T.concat([a, b], 1), T.concat([b, a], 1)], 0), [1, 5], 2)[1],
         (x, rng.standard_normal((3, 2)))),
        ("where", lambda a, b: T.where(x > 0, a, b), (x, pos)),
        ("conv2d dense", lambda a, w, b: F.conv2d(a, w, b, 2, 1, 1, 1),
         (img, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))),
        ("conv2d dilated depthwise", lambda a, w: F.conv2d(a, w, None, 1, 2, 2, 3),
         (img, rng.standard_normal((3, 1, 3, 3)))),
        ("linear", F.linear, (rng.standard_normal((3, 5)), rng.standard_normal((2, 5)), rng.standard_normal(2))),
        ("max pool", lambda a: F.pool("max", a, 3, 2, 1), (img,)),
        ("avg pool", lambda a: F.pool("avg", a, 3, 2, 1), (img,)),
        ("global pools", lambda a: F.pool("global_avg", a) + F.pool("global_max", a), (img,)),
        ("channel pools", lambda a: F.channel_pool("mean", a) + F.channel_pool("max", a), (img,)),
        ("batch norm train", lambda a, g, b: F.batch_norm(a, g, b, np.zeros(3), np.ones(3), True),
         (img, rng.standard_normal(3), rng.standard_normal(3))),
        ("batch norm eval", lambda a, g, b: F.batch_norm(a, g, b, np.full(3, 0.2), np.full(3, 1.5), False),
         (img, rng.standard_normal(3), rng.standard_normal(3))),
        ("channel layer norm", F.channel_layer_norm, (img, rng.standard_normal(3), rng.standard_normal(3))),
        ("log softmax", F.log_softmax, (img,)),
        ("bilinear upsample", lambda a: F.upsample_bilinear(a, 2), (img,)),
        ("selective scan", selective_scan, scan),
        ("2d scan", ss2d_scan, (rng.standard_normal((1, 2, 2, 3)), rng.uniform(0.05, 0.5, (1, 4, 2, 2, 3)),
                                -rng.uniform(0.5, 2, (2, 3)), rng.standard_normal((1, 4, 3, 2, 3)),
                                rng.standard_normal((1, 4, 3, 2, 3)), rng.standard_normal(2))),
        ("dgm fuse", dgm_fuse, (img, rng.standard_normal(img.shape))),
        ("cross entropy + lovasz", lambda a: total_loss(a, (img[:, 0] > img[:, 1]).astype(np.int64)),
         (rng.standard_normal((2, 2, 5, 5)),)),
    ]
    return cases


def _block_cases(rng):
    def block(module, *shapes, seed=0, setup=None):
        init_parameters(module, seed)
        if setup:
            setup(module)
        inputs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
        out_shape = module(*inputs).shape
        probe = rng.standard_normal(out_shape)
        return lambda: probe_sum(module(*inputs), probe), module.parameters() + inputs

    def nonzero_alpha(m):
        for name, p in m.named_parameters():
            if name.endswith("alpha"):
                p.data[:] = 0.6

    f64 = np.float64
    return [
        ("difference adapter", *block(DifferenceAdapter(3, 5, dtype=f64), (2, 3, 6, 6))),
        ("spatial/channel attention", *block(SpatialChannelAttention(6, dtype=f64), (2, 6, 5, 5), setup=nonzero_alpha)),
        ("dgm", *block(DGM(6, 6, dtype=f64), (2, 6, 5, 5), setup=nonzero_alpha)),
        ("inverted residual", *block(InvertedResidual(8, 8, 4.0, 1, "hardswish", se=True, dtype=f64), (2, 8, 5, 5))),
        ("vss block", *block(VSSBlock(4, state_dim=3, expand=2, dtype=f64), (2, 4, 3, 4))),
        ("decoder level", *block(DecoderLevel(6, 8, state_dim=3, expand=2, dtype=f64), (2, 6, 4, 4), (2, 6, 4, 4))),
    ]


def test_criterion_1_gradient_integrity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for name, op, arrays in _op_cases(rng):
        errs = check_op_grad(op, *arrays)
        worst = max(worst, max(errs))
    for name, loss_fn, params in _block_cases(rng):
        worst = max(worst, max(check_directional(loss_fn, params, n_dirs=4)))

    # full network at 1x3x64x64 in float64, with the attention gates switched on
    net = build_model(ModelConfig(dtype="float64"))
    for name, p in net.named_parameters():
        if name.endswith("alpha"):
            p.data[:] = 0.5
    pre = Tensor(rng.random((1, 3, 64, 64)), requires_grad=True)
    post = Tensor(rng.random((1, 3, 64, 64)), requires_grad=True)
    target = (rng.random((1, 64, 64)) > 0.85).astype(np.int64)

    def loss():
        return total_loss(net(pre, post), target)

    groups = {
        "inputs": [pre, post],
        "shared encoder": net.encoder.original.parameters(),
        "difference encoder": net.encoder.difference.parameters(),
        "guidance modules": net.encoder.dgm.parameters(),
        "decoder levels": net.decoder.levels.parameters(),
        "head": net.decoder.head.parameters(),
    }
    for name, params in groups.items():
        worst = max(worst, max(check_directional(loss, params, n_dirs=2)))
    seconds = time.perf_counter() - start
    record_property("detail", f"max relative error {worst:.2e}, {seconds:.0f}s")
    assert worst < 1e-4
    assert seconds < 300


# ---------------------------------------------------------------- 2


def test_criterion_2_scan_oracle(record_property):
    rng = np.random.default_rng(22)
    worst, instances = 0.0, 0
    for _ in range(240):
        nb = int(rng.integers(1, 3))
        nd = int(rng.integers(1, 33))
        length = int(rng.integers(1, 257))
        nstate = int(rng.integers(1, 17))
        args = (
            rng.standard_normal((nb, nd, length)),
            rng.uniform(1e-3, 1.0, (nb, nd, length)),
            -np.exp(rng.uniform(-2, 2, (nd, nstate))),
            rng.standard_normal((nb, nstate, length)),
            rng.standard_normal((nb, nstate, length)),
            rng.standard_normal(nd),
        )
        worst = max(worst, float(np.max(np.abs(scan_forward(*args) - scan_reference(*args)))))
        instances += 1
    record_property("detail", f"{instances} instances, max abs difference {worst:.2e}")
    assert instances >= 200
    assert worst <= 1e-10


# ---------------------------------------------------------------- 3


def _hard_logits(pred):
    return np.stack([np.where(pred == 0, 800.0, -800.0), np.where(pred == 1, 800.0, -800.0)], axis=1)


def test_criterion_3_lovasz_exactness(record_property):
    worst, pairs = 0.0, 0
    with T.no_grad():
        for n in range(1, 9):
            masks = [np.array(bits).reshape(1, 1, n) for bits in itertools.product((0, 1), repeat=n)]
            for target in masks:
                present = [c for c in (0, 1) if np.any(target == c)]
                for pred in masks:
                    loss = float(lovasz_softmax(Tensor(_hard_logits(pred)), target).data)
                    ious = []
                    for c in present:
                        inter = np.sum((pred == c) & (target == c))
                        union = np.sum((pred == c) | (target == c))
                        ious.append(inter / union)
                    worst = max(worst, abs(loss - (1 - np.mean(ious))))
                    pairs += 1
    rng = np.random.default_rng(3)
    target = rng.integers(0, 2, (2, 8, 8))
    perfect = float(total_loss(Tensor(_hard_logits(target)), target).data)
    record_property("detail", f"{pairs} mask pairs, max |loss - (1 - IoU)| {worst:.1e}, perfect total loss {perfect}")
    assert worst <= 1e-12
    assert perfect == 0.0


# ---------------------------------------------------------------- 4


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 10**7), st.integers(0, 10**7), st.integers(0, 10**7), st.integers(0, 10**7))
def _f1_iou_identity(tp, fp, fn, tn):
    m = metrics(ConfusionCounts(tp, fp, fn, tn))
    assert abs(m["F1"] - 2 * m["IoU"] / (1 + m["IoU"])) <= 1e-12


def test_criterion_4_metric_algebra(record_property):
    _f1_iou_identity()
    f1, iou = f1_iou_from_pre_rec(96.02, 90.56, scale=100)
    record_property("detail", f"F1 {f1:.4f} (93.21), IoU {iou:.4f} (87.28)")
    assert abs(f1 - 93.21) <= 0.03
    assert abs(iou - 87.28) <= 0.03


# ---------------------------------------------------------------- 5


def test_criterion_5_ablation_exactness(record_property):
    base_cfg = preset("tiny")
    rng = np.random.default_rng(5)
    pre, post = rng.random((2, 3, 64, 64)), rng.random((2, 3, 64, 64))
    guided = build_model(base_cfg.replace(dgm=True, dadf=False))
    plain = build_model(base_cfg.replace(dgm=False, dadf=False))
    assert all(np.all(p.data == 0) for n, p in guided.named_parameters() if n.endswith("alpha"))
    for mode in ("train", "eval"):
        guided.train(mode == "train")
        plain.train(mode == "train")
        with T.no_grad():
            np.testing.assert_array_equal(guided(pre, post).data, plain(pre, post).data)

    data = split(synth_generate(20, 64, seed=9))
    counts = {}
    for dgm, dadf in itertools.product((False, True), repeat=2):
        cfg = base_cfg.replace(dgm=dgm, dadf=dadf)
        result = train(cfg, *data, TrainSettings(epochs=1, batch_size=8, lr=1e-3))
        assert np.isfinite(result.history[0]["loss"])
        counts[(dgm, dadf)] = result.model.num_parameters()
    baseline, dadf_only, dgm_only, full = counts[(False, False)], counts[(False, True)], counts[(True, False)], counts[(True, True)]
    record_property("detail", f"params baseline {baseline}, +DADF {dadf_only}, +DGM {dgm_only}, both {full}")
    assert baseline < dgm_only < full
    assert baseline < dadf_only < full


# ---------------------------------------------------------------- 6 and 7


@pytest.fixture(scope="module")
def toy_runs():
    with threadpool_limits(limits=1):
        start = time.perf_counter()
        ds = synth_generate(400, 128, seed=0)
        train_ds, val_ds = split(ds, 0.2)
        full = train(preset("tiny"), train_ds, val_ds, TOY_SETTINGS)
        elapsed = time.perf_counter() - start
        replay = train(preset("tiny"), train_ds, val_ds, TrainSettings(**{**TOY_SETTINGS.__dict__, "epochs": 1}))
        no_dadf = train(preset("tiny").replace(dadf=False), train_ds, val_ds, TOY_SETTINGS)
    return {"full": full, "elapsed": elapsed, "replay": replay, "no_dadf": no_dadf, "val": val_ds}


def test_criterion_6_toy_training(toy_runs, record_property):
    full = toy_runs["full"]
    score = evaluate(full.model, toy_runs["val"])["F1"]
    record_property("detail", f"held-out F1 {score:.4f} (best of {len(full.history)} epochs), "
                              f"{toy_runs['elapsed']:.0f}s including data generation")
    assert score >= 0.85
    assert len(full.history) <= 30
    assert toy_runs["elapsed"] < TOY_TIME_LIMIT
    assert toy_runs["replay"].history[0] == full.history[0]


def test_criterion_7_blur_robustness(toy_runs, record_property):
    val = toy_runs["val"]
    blurred = perturb(val, "gauss_blur", 5.0)
    drops = {}
    for name in ("full", "no_dadf"):
        model = toy_runs[name].model
        drops[name] = (evaluate(model, val)["F1"], evaluate(model, blurred)["F1"])
    d_full = drops["full"][0] - drops["full"][1]
    d_abl = drops["no_dadf"][0] - drops["no_dadf"][1]
    record_property("detail", f"F1 clean/blurred: full {drops['full'][0]:.4f}/{drops['full'][1]:.4f} "
                              f"(drop {d_full:.4f}), no-DADF {drops['no_dadf'][0]:.4f}/{drops['no_dadf'][1]:.4f} "
                              f"(drop {d_abl:.4f})")
    assert d_full < d_abl


# ---------------------------------------------------------------- 8


def test_criterion_8_profiler(record_property):
    x = Tensor(np.zeros((1, 64, 16, 16)))
    w = Tensor(np.zeros((64, 64, 3, 3)))
    with T.flop_counter() as box:
        F.conv2d(x, w, padding=1)
    assert box[0] == 2 * 16 * 16 * 9 * 64 * 64

    cfg = preset("reference")
    report = profile(cfg)
    text = reference_comparison(report)
    print(text)
    assert 2e6 <= report.params <= 6e6
    assert 0.5e9 <= report.flops <= 3e9
    assert "3.43M" in text and "1.12G" in text and "exact match is not expected" in text

    peaks = [r.peak_bytes for r in sweep(cfg)]
    record_property("detail", f"params {report.params / 1e6:.2f}M, FLOPs {report.flops / 1e9:.2f}G, "
                              f"peak MB over 256..1024: {[round(p / 2**20) for p in peaks]}")
    assert all(a < b for a, b in zip(peaks, peaks[1:]))


# ---------------------------------------------------------------- 9


def test_criterion_9_shapes_and_ranges(monkeypatch, record_property):
    maps = []

    def recording(fn):
        def wrapper(self, *args):
            out = fn(self, *args)
            maps.append(out.data)
            return out
        return wrapper

    monkeypatch.setattr(SpatialChannelAttention, "spatial_map", recording(SpatialChannelAttention.spatial_map))
    monkeypatch.setattr(DecoderLevel, "attention", recording(DecoderLevel.attention))

    rng = np.random.default_rng(9)
    net = build_model(ModelConfig(channel_gate="sigmoid"))
    for name, p in net.named_parameters():
        if name.endswith("alpha"):
            p.data[:] = 1.0
    sca_vectors = []
    original_vector = SpatialChannelAttention.channel_vector

    def recording_vector(self, x):
        sca_vectors.append(original_vector(self, x))
        return sca_vectors[-1]

    monkeypatch.setattr(SpatialChannelAttention, "channel_vector", recording_vector)
    pre, post = rng.random((2, 3, 256, 256)).astype(np.float32), rng.random((2, 3, 256, 256)).astype(np.float32)
    with T.no_grad():
        logits = net(pre, post)
    assert logits.shape == (2, 2, 256, 256)
    assert np.all(np.isfinite(logits.data))
    assert len(maps) == 3 + 4 and len(sca_vectors) == 3
    for m in maps + [v.data for v in sca_vectors]:
        assert np.all((m > 0) & (m < 1))

    net.eval()
    with T.no_grad():
        enc = net.encode(pre, pre.copy())
    zeros = [bool(np.all(refined_diff(a, b).data == 0)) for a, b in zip(enc.pre, enc.post)]
    record_property("detail", f"logits {logits.shape}, {len(maps) + len(sca_vectors)} attention maps in (0,1), "
                              f"zero difference at levels {zeros}")
    assert all(zeros)
