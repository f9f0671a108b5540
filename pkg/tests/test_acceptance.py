"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import itertools
import json
import time

import numpy as np

from tame.attention import AttentionModule, VariantFlags
from tame.autodiff import Tensor, backward, batchnorm2d, bilinear_upsample, conv2d, maxpool2d, softmax
from tame.autodiff.gradcheck import check_gradients
from tame.backbone import BackboneConfig, train_backbone
from tame.cli import main
from tame.data import SyntheticDatasetSpec, generate_in_memory
from tame.evaluator import BaselineSource, TameSource, average_drop, evaluate, increase_confidence
from tame.objective import LossWeights, area_loss, cross_entropy, variation_loss
from tame.optim import OneCycle, one_cycle_lr
from tame.trainer import TrainConfig, fit

from acceptance_log import report
from oracles import (
    area_loops,
    batchnorm_two_pass,
    bilinear_pixel,
    conv2d_loops,
    cross_entropy_naive,
    maxpool_loops,
    softmax_naive,
    variation_loops,
)
from test_trainer import full_loss, toy_attention, toy_backbone, toy_set


# ----------------------------------------------------------------------- 1
def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    backbone = toy_backbone(np.float64, seed=1)
    attention = toy_attention(backbone, seed=2)
    assert attention.channels == (3, 4)
    x = np.random.default_rng(3).normal(size=(2, 3, 8, 8))
    _, feats = backbone.forward_with_taps(Tensor(x))
    assert [f.shape[2:] for f in feats.tensors] == [(4, 4), (2, 2)]
    errors = check_gradients(full_loss(x, backbone, attention), attention.parameters(), eps=1e-3)
    worst = max(errors.values())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    report(1, "gradient suite", ok, f"max rel err {worst:.2e} over {len(errors)} tensors in {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------------- 2
def _oracle_cases(rng, cases=100):
    worst = {}

    def note(name, got, want):
        worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    for _ in range(cases):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        note("conv", conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data, conv2d_loops(x, w, b, stride, pad))
        p = rng.normal(size=(2, 2, 4, 6))
        note("maxpool", maxpool2d(Tensor(p), 2).data, maxpool_loops(p)[0])
        g, be = rng.uniform(0.5, 1.5, 2), rng.normal(size=2)
        note("batchnorm", batchnorm2d(Tensor(p), Tensor(g), Tensor(be), np.zeros(2), np.ones(2), True).data,
             batchnorm_two_pass(p, g, be, 1e-5))
        img = rng.normal(size=(3, 4))
        oh, ow = int(rng.integers(3, 9)), int(rng.integers(4, 10))
        note("bilinear", bilinear_upsample(Tensor(img[None, None]), oh, ow).data[0, 0], bilinear_pixel(img, oh, ow))
        z = rng.normal(0, 3, 5)
        note("softmax", softmax(Tensor(z)).data, softmax_naive(list(z)))
        label = int(rng.integers(5))
        note("cross_entropy", cross_entropy(Tensor(z), label).item(), cross_entropy_naive(list(z), label))
        psi = rng.uniform(size=(int(rng.integers(2, 7)), int(rng.integers(2, 7))))
        note("area", area_loss(Tensor(psi), 0.3).item(), area_loops(psi, 0.3))
        note("variation", variation_loss(Tensor(psi)).item(), variation_loops(psi))
    return worst


def test_criterion_2_oracle_suite():
    worst = _oracle_cases(np.random.default_rng(2024))
    fixtures = (
        average_drop([0.8, 0.5], [0.4, 0.6]) == 25.0
        and increase_confidence([0.8, 0.5], [0.4, 0.6]) == 50.0
        and average_drop([0.5, 0.25], [0.5, 0.25]) == 0.0
        and increase_confidence([0.2, 0.4, 0.6, 0.8], [0.3, 0.3, 0.7, 0.8]) == 50.0
    )
    ok = max(worst.values()) <= 1e-10 and fixtures
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; AD/IC fixtures {'exact' if fixtures else 'WRONG'}"
    report(2, "oracle suite (100 cases per op)", ok, detail)
    assert ok


# ----------------------------------------------------------------------- 3
def test_criterion_3_shape_range_suite():
    rng = np.random.default_rng(5)
    channels, sizes, classes = (2, 3, 4), ((8, 6), (4, 3), (2, 2)), 3
    feats = [Tensor(rng.normal(size=(2, c, h, w))) for c, (h, w) in zip(channels, sizes)]
    failures = []
    combos = list(itertools.product([True, False], [True, False], ["relu", "sigmoid"], [1, 2, 3]))
    for skip, bn, act, k in combos:
        flags = VariantFlags(skip, bn, act, k)
        m = AttentionModule(channels, classes, flags, seed=k, dtype=np.float64)
        used = sizes[len(sizes) - k:]
        want = (2, classes, max(h for h, _ in used), max(w for _, w in used))
        train = m.explanation_map(feats, "train").data
        inf = m.explanation_map(feats, "inference").data
        flat = inf.reshape(2 * classes, -1)
        ok = (
            train.shape == want and inf.shape == want
            and np.all((train > 0) & (train < 1))
            and np.all((inf >= 0) & (inf <= 1))
            and np.all(flat.min(axis=1) == 0) and np.all(flat.max(axis=1) == 1)
        )
        if not ok:
            failures.append(str(flags))
    ok = not failures
    report(3, "shape/range suite", ok, f"{len(combos) - len(failures)}/{len(combos)} flag x layer-subset settings")
    assert ok, failures


# ----------------------------------------------------------------------- 4
def test_criterion_4_frozen_backbone_suite():
    backbone = toy_backbone()
    before = {k: v.tobytes() for k, v in backbone.state_dict().items()}
    cfg = TrainConfig(epochs=2, batch_size=4, eval_batch_size=4, flags=VariantFlags(layer_subset=2))
    fit(toy_set(12), toy_set(6, seed=1), backbone, cfg)
    unchanged = all(backbone.state_dict()[k].tobytes() == v for k, v in before.items())

    b64 = toy_backbone(np.float64)
    attention = toy_attention(b64)
    x = np.random.default_rng(4).normal(size=(3, 3, 8, 8))
    backward(full_loss(x, b64, attention, LossWeights(lambda2=0, lambda3=0))())
    live = {n: bool(p.grad is not None and np.any(p.grad != 0)) for n, p in attention.named_parameters().items()}
    ok = unchanged and all(live.values())
    report(4, "frozen-backbone suite", ok,
           f"backbone bitwise unchanged: {unchanged}; nonzero grads with l2=l3=0: {sum(live.values())}/{len(live)}")
    assert ok


# ----------------------------------------------------------------------- 5
def test_criterion_5_schedule_suite():
    errs = []
    for total, frac in [(160, 0.3), (57, 0.25), (8, 0.5), (1000, 0.1)]:
        sch = OneCycle(25.0, 1e4, frac)
        errs.append(abs(one_cycle_lr(0, total, 0.05, sch) - 0.05 / 25))
        errs.append(abs(one_cycle_lr(round(frac * total), total, 0.05, sch) - 0.05))
        errs.append(abs(one_cycle_lr(total - 1, total, 0.05, sch) - 0.05 / 1e4))
    cfg = TrainConfig(epochs=3, batch_size=4, eval_batch_size=4, flags=VariantFlags(layer_subset=2))
    res = fit(toy_set(10), toy_set(4, seed=1), toy_backbone(), cfg)
    steps = 3 * 3
    consumed = len(res.lr_history)
    ok = max(errs) <= 1e-9 and consumed == steps and res.lr_history == [one_cycle_lr(s, steps, 0.05) for s in range(steps)]
    report(5, "schedule suite", ok, f"max endpoint/peak err {max(errs):.1e}; lr values consumed {consumed}/{steps}")
    assert ok


# ----------------------------------------------------------------------- 6
SEEDS = (0, 1, 2)


def test_criterion_6_end_to_end_desk_scale():
    spec = SyntheticDatasetSpec(train=600, val=200, test=200, image_size=64)
    data = generate_in_memory(spec)
    start = time.perf_counter()
    backbone, bb_report = train_backbone(BackboneConfig(), data["train"], data["val"])
    bb_time = time.perf_counter() - start
    x_test = data["test"].normalized()
    tame, rand, fit_times = [], [], []
    for seed in SEEDS:
        start = time.perf_counter()
        result = fit(data["train"], data["val"], backbone, TrainConfig(seed=seed))
        fit_times.append(time.perf_counter() - start)
        tame.append(evaluate(TameSource(result.attention), backbone, x_test))
        rand.append(evaluate(BaselineSource("random", seed=seed), backbone, x_test))

    def mean(reports, field, v):
        return float(np.mean([getattr(r, field)[v] for r in reports]))

    ad = {v: mean(tame, "ad", v) for v in (100, 50, 15)}
    ic50, rand_ad50, rand_ic50 = mean(tame, "ic", 50), mean(rand, "ad", 50), mean(rand, "ic", 50)
    checks = {
        "backbone val acc >= 0.9": bb_report.val_accuracy >= 0.9,
        "backbone < 10 min": bb_time < 600,
        "TAME fits < 15 min": max(fit_times) < 900,
        "AD50 below random": ad[50] < rand_ad50,
        "IC50 above random": ic50 > rand_ic50,
        "AD non-decreasing as v shrinks": ad[100] <= ad[50] <= ad[15] and ad[15] > ad[100],
    }
    ok = all(checks.values())
    detail = (
        f"val acc {bb_report.val_accuracy:.3f} in {bb_time:.0f}s; TAME fits {max(fit_times):.0f}s max; "
        f"TAME AD {ad[100]:.2f}/{ad[50]:.2f}/{ad[15]:.2f} IC50 {ic50:.1f}; "
        f"random AD50 {rand_ad50:.2f} IC50 {rand_ic50:.1f}"
    )
    failed = [k for k, v in checks.items() if not v]
    report(6, "end-to-end desk-scale run", ok, detail + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# ----------------------------------------------------------------------- 7
TINY = {
    "dataset": {"train": 12, "val": 6, "test": 6, "image_size": 32, "radius_range": [5.0, 9.0]},
    "backbone": {"blocks": [[1, 4, True], [1, 8, True]], "head_width": 8},
    "backbone_training": {"epochs": 1, "batch_size": 6},
    "variant": {"layer_subset": 2},
    "train": {"epochs": 2, "batch_size": 6, "eval_batch_size": 2},
    "evaluation": {"batch_size": 2},
}


def _run(tmp, name, threads=1):
    cfg = dict(TINY, output=str(tmp / name), dataset=dict(TINY["dataset"], root=str(tmp / name / "data")))
    path = tmp / f"{name}.json"
    path.write_text(json.dumps(cfg))
    for cmd in ("generate", "train-backbone", "train-tame"):
        assert main([cmd, "--config", str(path), "--seed", "3"]) == 0
    assert main(["evaluate", "--config", str(path), "--seed", "3", "--threads", str(threads)]) == 0
    out = tmp / name
    files = sorted(p.relative_to(out) for p in out.rglob("*.tamew"))
    return {str(f): (out / f).read_bytes() for f in files}, (out / "metrics.csv").read_bytes()


def test_criterion_7_determinism(tmp_path):
    w1, m1 = _run(tmp_path, "a")
    w2, m2 = _run(tmp_path, "b")
    _, m3 = _run(tmp_path, "c", threads=4)
    weights_same = w1.keys() == w2.keys() and all(w1[k] == w2[k] for k in w1)
    ok = weights_same and m1 == m2 and m1 == m3
    report(7, "determinism", ok,
           f"{len(w1)} weight files identical: {weights_same}; metrics identical: {m1 == m2}; "
           f"4-thread metrics identical: {m1 == m3}")
    assert ok
