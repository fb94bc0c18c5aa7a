"""Acceptance gate: twelve numbered criteria, one pass/fail line each.

The two training criteria (8 and 9) run real optimization and dominate the
suite's wall clock; everything else finishes in seconds.
"""

import math
import sys
import time

import numpy as np
import pytest

from poselab.config import LossWeights, ModelConfig, OptimConfig, RunConfig
from poselab.denoising import (
    DEFAULT_LAMBDA_BOX,
    NEGATIVE_KS_BAND,
    POSITIVE_KS_BAND,
    Polarity,
    alpha_from_ks,
    build_dn_layout,
    gen_box_queries,
    gen_pose_queries,
)
from poselab.evaluation import eval_ap
from poselab.geometry import Keypoint, KsParams, PersonInstance, instance_oks, keypoint_similarity
from poselab.losses import brute_force_match, hungarian_match, ksvf_loss, ksvf_loss_scalar
from poselab.model import PoseModel
from poselab.scenes import SceneSpec, gen_dataset
from poselab.serialization import (
    load_checkpoint,
    read_annotations,
    save_checkpoint,
    write_annotations,
)
from poselab.tensor import Tensor
from poselab.training import evaluate_model, train_loop
from poselab.verify import end_to_end_grad_check

TINY = ModelConfig()  # D=32, 3 layers, N=8, 5 keypoints


# one line per criterion; printed immediately (visible with -s) and echoed
# in the terminal summary by conftest.py (visible under default capture)
CRITERION_LINES: list[str] = []


def _report(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"criterion {criterion}: {status} ({detail})"
    CRITERION_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)


def _checked(criterion: int, condition: bool, detail: str) -> None:
    _report(criterion, condition, detail)
    assert condition, f"criterion {criterion}: {detail}"


# ----------------------------------------------------------------------
# 1. similarity inversion roundtrip


def test_criterion_1_ks_inversion_roundtrip():
    start = time.process_time()
    rng = np.random.default_rng(1001)
    worst = 0.0
    for _ in range(10_000):
        ks = float(rng.uniform(1e-6, 1.0))
        s = float(rng.uniform(1e-3, 1.0))
        kappa = float(rng.uniform(1e-3, 0.3))
        back = keypoint_similarity(alpha_from_ks(ks, s, kappa), s, kappa)
        worst = max(worst, abs(back - ks))
    elapsed = time.process_time() - start
    _checked(
        1,
        worst < 1e-6 and elapsed < 1.0,
        f"max roundtrip error {worst:.2e} over 1e4 samples, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 2. pose denoising band membership


def _band_instance():
    # keypoints away from the border and s small enough that the largest
    # possible displacement (at KS=0.1) never triggers the [0,1] clamp
    pts = [(0.35, 0.35), (0.65, 0.35), (0.65, 0.65), (0.35, 0.65), (0.5, 0.5)]
    kps = tuple(Keypoint(x, y, True) for x, y in pts)
    return PersonInstance(kps, (0.35, 0.35, 0.65, 0.65), 0.09)


def test_criterion_2_pose_band_membership():
    start = time.process_time()
    gt = _band_instance()
    params = KsParams.uniform(5)
    rng = np.random.default_rng(1002)
    counts = {"positive": 0, "negative": 0}
    for polarity, band in ((Polarity.POSITIVE, POSITIVE_KS_BAND), (Polarity.NEGATIVE, NEGATIVE_KS_BAND)):
        for _ in range(20_000):  # 5 keypoints each -> 1e5 keypoint samples
            sample = gen_pose_queries(gt, polarity, params, rng)
            for kp, noisy in zip(gt.keypoints, sample.instance.keypoints):
                d = math.hypot(noisy.x - kp.x, noisy.y - kp.y)
                ks = keypoint_similarity(d, gt.scale, 0.1)
                assert band[0] <= ks < band[1] + 1e-12, (polarity, ks)
                counts[polarity.value] += 1
    elapsed = time.process_time() - start
    _checked(
        2,
        counts["positive"] == 100_000 and counts["negative"] == 100_000 and elapsed < 5.0,
        f"1e5 positive and 1e5 negative recomputed KS all in band, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 3. box denoising bands


def test_criterion_3_box_bands():
    start = time.process_time()
    rng = np.random.default_rng(1003)
    lam = DEFAULT_LAMBDA_BOX
    box = (0.25, 0.2, 0.65, 0.8)
    w, h = box[2] - box[0], box[3] - box[1]
    n = 0
    for polarity in (Polarity.POSITIVE, Polarity.NEGATIVE):
        for _ in range(12_500):  # 2 corners x 2 components each -> 5e4 per polarity
            sample = gen_box_queries(box, polarity, rng, lambda_box=lam)
            for a1, a2 in sample.sampled_ks:
                for a, dim in ((a1, h), (a2, w)):
                    shift = abs(a) * dim
                    if polarity == Polarity.POSITIVE:
                        assert shift <= lam * dim + 1e-12
                    else:
                        assert lam * dim - 1e-12 <= shift <= 2 * lam * dim + 1e-12
                    n += 1
    elapsed = time.process_time() - start
    _checked(3, n == 100_000 and elapsed < 5.0, f"1e5 component shifts in band, {elapsed:.2f}s")


# ----------------------------------------------------------------------
# 4. denoising isolation is bit-exact


def _perturbed(samples, polarity):
    out = []
    for s in samples:
        if s.polarity != polarity:
            out.append(s)
            continue
        kps = tuple(
            Keypoint(min(kp.x + 0.07, 1.0), min(kp.y + 0.07, 1.0), kp.visible)
            for kp in s.instance.keypoints
        )
        inst = PersonInstance(kps, s.instance.bbox, s.instance.area)
        out.append(type(s)(inst, s.polarity, s.sampled_ks, s.source_gt))
    return out


def test_criterion_4_dn_isolation_bit_exact():
    start = time.process_time()
    rng = np.random.default_rng(1004)
    model = PoseModel(TINY, seed=0)
    image = Tensor(rng.uniform(0, 1, size=(64, 64)).astype(np.float32))
    gts = [_band_instance()]
    layout, samples = build_dn_layout(gts, 2, KsParams.uniform(5), rng)
    base = model.forward(image, samples, layout)
    off = layout.matching_query_offset
    ok = True
    for polarity in (Polarity.NEGATIVE, Polarity.POSITIVE):
        alt = model.forward(image, _perturbed(samples, polarity), layout)
        for b, a in zip(base, alt):
            ok &= bool((b.keypoints.data[off:] == a.keypoints.data[off:]).all())
            ok &= bool((b.logits.data[off:] == a.logits.data[off:]).all())
            ok &= bool((b.refined_logits.data[off:] == a.refined_logits.data[off:]).all())
    elapsed = time.process_time() - start
    _checked(
        4,
        ok and elapsed < 10.0,
        f"matching outputs bit-equal under positive and negative perturbation, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 5. Hungarian vs exhaustive oracle


def test_criterion_5_hungarian_vs_brute_force():
    start = time.process_time()
    rng = np.random.default_rng(1005)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 7))
        cost = rng.uniform(0.0, 10.0, size=(n, m))
        result = hungarian_match(cost)
        _, oracle_pairs = brute_force_match(cost)
        # fsum makes both totals independent of summation order, so equal
        # assignments compare exactly
        total = math.fsum(cost[i, j] for i, j in result.pairs)
        best = math.fsum(cost[i, j] for i, j in oracle_pairs)
        worst = max(worst, abs(total - best))
        assert len(result.pairs) == min(n, m)
    elapsed = time.process_time() - start
    _checked(
        5,
        worst == 0.0 and elapsed < 10.0,
        f"1000 matrices up to 6x6, max total-cost deviation {worst:.1e}, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 6. classification loss values and gradient


def test_criterion_6_ksvf_values_and_gradient():
    start = time.process_time()
    w = LossWeights()
    v1 = ksvf_loss_scalar(0.8, 0.5)
    v2 = ksvf_loss_scalar(0.0, 0.5)
    values_ok = abs(v1 - 0.554518) < 1e-6 and abs(v2 - 0.129965) < 1e-6
    t1 = float(ksvf_loss(0.8, Tensor(np.float64(0.5), dtype=np.float64), w).data)
    t2 = float(ksvf_loss(0.0, Tensor(np.float64(0.5), dtype=np.float64), w).data)
    values_ok &= abs(t1 - v1) < 1e-9 and abs(t2 - v2) < 1e-9

    rng = np.random.default_rng(1006)
    worst = 0.0
    for _ in range(1000):
        q = float(rng.choice([0.0, rng.uniform(0.05, 1.0)]))
        c = float(rng.uniform(0.02, 0.98))
        t = Tensor(np.float64(c), requires_grad=True, dtype=np.float64)
        ksvf_loss(q, t, w).backward()
        eps = 1e-6
        fd = (ksvf_loss_scalar(q, c + eps) - ksvf_loss_scalar(q, c - eps)) / (2 * eps)
        rel = abs(float(t.grad) - fd) / max(abs(fd), 1e-6)
        worst = max(worst, rel)
    elapsed = time.process_time() - start
    _checked(
        6,
        values_ok and worst < 1e-5 and elapsed < 5.0,
        f"oracle values match, worst FD gradient rel error {worst:.1e} over 1e3 points, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 7. end-to-end gradient check


def test_criterion_7_end_to_end_grad_check():
    # budgets for the minutes-scale criteria are checked against this
    # process's own single-threaded CPU time: the machine is shared, so
    # wall clock measures other tenants' load, not this computation
    start, start_cpu = time.perf_counter(), time.process_time()
    report = end_to_end_grad_check(TINY, seed=0, samples_per_block=2, img_size=64)
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    wall = time.perf_counter() - start
    cpu = time.process_time() - start_cpu
    _checked(
        7,
        worst <= 1e-3 and cpu < 300.0,
        f"worst block '{worst_name}' rel error {worst:.2e}, {cpu:.0f}s CPU ({wall:.0f}s wall)",
    )


# ----------------------------------------------------------------------
# 8. overfit 8 scenes (shared with criterion 10)

OVERFIT_SEEDS = (0, 1, 2)
OVERFIT_MAX_ITERS = 1000
OVERFIT_CHUNK = 50


@pytest.fixture(scope="module")
def overfit_runs():
    """Train the tiny preset on 8 scenes for each seed, early-stopping on
    the AP50 target; returns per-seed models and scores plus wall time."""
    start, start_cpu = time.perf_counter(), time.process_time()
    spec = SceneSpec(img_size=64, max_persons=2, num_keypoints=5, seed=100)
    images, anns = gen_dataset(spec, 8)
    params = KsParams.uniform(5)
    runs = []
    for seed in OVERFIT_SEEDS:
        model = PoseModel(TINY, seed=seed)
        best_ap50 = 0.0
        iters = 0
        while iters < OVERFIT_MAX_ITERS:
            # a fresh optimizer per chunk converges faster here than carrying
            # Adam state across chunks (the periodic moment reset acts as a
            # restart kick on this tiny overfit problem)
            lr = 1.5e-3 * (0.5 ** (iters // 200))
            run = RunConfig(
                seed=seed * 1000 + iters,
                iterations=OVERFIT_CHUNK,
                batch_size=8,
                optim=OptimConfig(lr=lr),
            )
            train_loop(model, images, anns, run, log_every=0)
            iters += OVERFIT_CHUNK
            report = evaluate_model(model, images, anns, params)
            best_ap50 = max(best_ap50, report.ap50)
            if report.ap50 >= 0.9:
                break
        runs.append({"seed": seed, "model": model, "ap50": best_ap50, "iters": iters})
    return {
        "runs": runs,
        "images": images,
        "annotations": anns,
        "params": params,
        "elapsed": time.perf_counter() - start,
        "cpu": time.process_time() - start_cpu,
    }


def test_criterion_8_overfit(overfit_runs):
    scores = sorted(r["ap50"] for r in overfit_runs["runs"])
    median = scores[1]
    iters = [r["iters"] for r in overfit_runs["runs"]]
    cpu, wall = overfit_runs["cpu"], overfit_runs["elapsed"]
    _checked(
        8,
        median >= 0.9 and max(iters) <= OVERFIT_MAX_ITERS and cpu < 900.0,
        f"median AP50 {median:.3f} (all {[f'{s:.3f}' for s in scores]}), "
        f"iterations {iters}, {cpu:.0f}s CPU ({wall:.0f}s wall)",
    )


# ----------------------------------------------------------------------
# 9. denoising ablation direction


def _ablation_run(images, anns, val_images, val_anns, seed, denoising, params):
    model = PoseModel(TINY, seed=seed)
    run = RunConfig(
        seed=seed, iterations=300, batch_size=4, optim=OptimConfig(lr=2e-3)
    )
    train_loop(model, images, anns, run, denoising=denoising, log_every=0)
    return evaluate_model(model, val_images, val_anns, params).ap


def test_criterion_9_dn_ablation_direction():
    start, start_cpu = time.perf_counter(), time.process_time()
    spec = SceneSpec(img_size=64, max_persons=2, num_keypoints=5, seed=200)
    images, anns = gen_dataset(spec, 64)
    val_spec = SceneSpec(img_size=64, max_persons=2, num_keypoints=5, seed=201)
    val_images, val_anns = gen_dataset(val_spec, 16)
    params = KsParams.uniform(5)
    with_dn, without_dn = [], []
    for seed in (0, 1, 2):
        with_dn.append(_ablation_run(images, anns, val_images, val_anns, seed, True, params))
        without_dn.append(_ablation_run(images, anns, val_images, val_anns, seed, False, params))
    med_dn = sorted(with_dn)[1]
    med_no = sorted(without_dn)[1]
    wall = time.perf_counter() - start
    cpu = time.process_time() - start_cpu
    _checked(
        9,
        med_dn > med_no and cpu < 2700.0,
        f"median val AP with DN {med_dn:.3f} vs without {med_no:.3f} "
        f"(per-seed {[f'{a:.3f}' for a in with_dn]} vs {[f'{a:.3f}' for a in without_dn]}), "
        f"{cpu:.0f}s CPU ({wall:.0f}s wall)",
    )


# ----------------------------------------------------------------------
# 10. quality-estimation head: neutrality and learned effect


def test_criterion_10_lqe_neutrality_and_effect(overfit_runs):
    start = time.process_time()
    # neutrality: a freshly built model has a zero-initialized head, so the
    # refined logits equal the base logits exactly
    fresh = PoseModel(TINY, seed=0)
    rng = np.random.default_rng(1010)
    image = Tensor(rng.uniform(0, 1, size=(64, 64)).astype(np.float32))
    preds = fresh.forward(image)
    neutral = all((p.logits.data == p.refined_logits.data).all() for p in preds)

    # learned effect: after the overfit run, zeroing the head changes the
    # refined logits for at least one instance
    trained = max(overfit_runs["runs"], key=lambda r: r["ap50"])["model"]
    img0 = Tensor(overfit_runs["images"][0])
    before = trained.forward(img0)[-1].refined_logits.data.copy()
    saved_w = trained.params["lqe.w"].data.copy()
    saved_b = trained.params["lqe.b"].data.copy()
    trained.params["lqe.w"].data[:] = 0.0
    trained.params["lqe.b"].data[:] = 0.0
    after = trained.forward(img0)[-1].refined_logits.data
    trained.params["lqe.w"].data[:] = saved_w
    trained.params["lqe.b"].data[:] = saved_b
    changed = int((before != after).sum())
    elapsed = time.process_time() - start
    _checked(
        10,
        neutral and changed >= 1 and elapsed < 60.0,
        f"zero-init exact for all layers, ablation changes {changed} logits, {elapsed:.1f}s CPU",
    )


# ----------------------------------------------------------------------
# 11. serialization roundtrips


def test_criterion_11_serialization_roundtrips(tmp_path):
    start = time.process_time()
    rng = np.random.default_rng(1011)
    from poselab.scenes import Annotation, RawInstance

    ann_ok = True
    for i in range(100):
        n_inst = int(rng.integers(0, 4))
        ann = Annotation(
            scene_id=i,
            width=int(rng.integers(64, 256)),
            height=int(rng.integers(64, 256)),
            instances=[
                RawInstance(
                    keypoints=[
                        [float(rng.uniform(0, 200)), float(rng.uniform(0, 200)), int(rng.integers(0, 2))]
                        for _ in range(5)
                    ],
                    bbox=sorted(float(rng.uniform(0, 200)) for _ in range(2))
                    + sorted(float(rng.uniform(200, 256)) for _ in range(2)),
                    area=float(rng.uniform(1, 1e4)),
                )
                for _ in range(n_inst)
            ],
        )
        path = tmp_path / f"a{i}.jsonl"
        write_annotations(path, [ann])
        back = read_annotations(path)[0]
        ann_ok &= back.scene_id == ann.scene_id and back.instances == ann.instances
        ann_ok &= back.width == ann.width and back.height == ann.height

    ck_ok = True
    for i in range(100):
        tensors = {
            f"t{j}": rng.normal(size=tuple(rng.integers(1, 8, size=rng.integers(1, 4)))).astype(np.float32)
            for j in range(int(rng.integers(1, 6)))
        }
        path = tmp_path / f"c{i}.ntc"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        ck_ok &= set(back) == set(tensors)
        ck_ok &= all((back[k] == tensors[k]).all() for k in tensors)
    elapsed = time.process_time() - start
    _checked(
        11,
        ann_ok and ck_ok and elapsed < 10.0,
        f"100 annotation and 100 checkpoint roundtrips bit-exact, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------
# 12. evaluator sanity


def test_criterion_12_evaluator_sanity():
    start = time.process_time()
    params = KsParams.uniform(3)

    def inst(points):
        kps = tuple(Keypoint(float(x), float(y), True) for x, y in points)
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        return PersonInstance(kps, (min(xs), min(ys), max(xs), max(ys)), 0.04)

    gt0 = inst([(0.2, 0.2), (0.3, 0.3), (0.4, 0.25)])
    gt1 = inst([(0.7, 0.7), (0.8, 0.8), (0.75, 0.6)])
    perfect = eval_ap([[(gt0, 0.9), (gt1, 0.8)]], [[gt0, gt1]], params)
    empty = eval_ap([[]], [[gt0, gt1]], params)

    # hand-built 3-pred/2-gt case: exact hit, false positive, exact hit by
    # descending score; PR points (1, 1/2), (1/2, 1/2), (2/3, 1), so the
    # 101-point interpolated AP is (51*1 + 50*(2/3)) / 101 = 253/303
    junk = inst([(0.05, 0.95), (0.06, 0.94), (0.07, 0.93)])
    manual = eval_ap([[(gt0, 0.9), (junk, 0.8), (gt1, 0.7)]], [[gt0, gt1]], params)
    expected = 253.0 / 303.0
    manual_ok = (
        abs(manual.ap - expected) < 1e-9
        and abs(manual.ap50 - expected) < 1e-9
        and abs(manual.ap75 - expected) < 1e-9
        and abs(manual.ar - 1.0) < 1e-9
    )
    elapsed = time.process_time() - start
    _checked(
        12,
        perfect.ap == 1.0 and empty.ap == 0.0 and manual_ok and elapsed < 1.0,
        f"perfect AP {perfect.ap:.3f}, empty AP {empty.ap:.3f}, "
        f"manual case AP {manual.ap:.9f} vs oracle {expected:.9f}, {elapsed:.2f}s",
    )
