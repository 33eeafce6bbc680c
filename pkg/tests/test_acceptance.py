"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 9 and 10 share one trained toy-16 model (module fixture); its
training time is charged to criterion 9.
"""
import math
import time

import numpy as np
import pytest

from plqa import experiments as ex
from plqa import facemodel as fm
from plqa import fiq, plq, synthetic
from plqa.cli import calibrate_model, main
from oracles import batched_central_diff, pairwise_sum_bruteforce, quality_raw_bruteforce, rel_err

# training recipe for the shared model
N_IDENTITIES = 50
SAMPLES = 32
EPOCHS = 150
LR = 0.001
BATCH = 16
SCHEDULE = "cosine"
TRAIN_SEED = 0

# held-out render indices (training uses 0 .. SAMPLES-1)
CALIBRATION_SAMPLE = SAMPLES
EVALUATION_SAMPLE = SAMPLES + 1


def _random_model(seed):
    rng = np.random.default_rng(seed)
    model = fm.toy16(seed=seed)
    layers = [
        layer.with_params(layer.params[0], rng.normal(0, 0.05, layer.params[1].shape)) if layer.params else layer
        for layer in model.layers
    ]
    return fm.EmbeddingModel(layers)


# ---------------------------------------------------------------- 1


def test_c01_gradient_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    one_sided = 0
    full_checked = False
    for k in range(20):
        model = _random_model(100 + k)
        image = np.random.default_rng(200 + k).random((32, 32, 3))
        e = fm.embed(model, image)
        if not e.any():
            continue
        head = plq.build_head(e, float(np.random.default_rng(k).uniform(0.05, 0.95)))
        grads = plq.saliency(model, image, head).grads.ravel()
        f = lambda xs: model.run(xs) @ head.weights  # noqa: E731
        if k == 0:
            # one full central-difference sweep so the top 100 are chosen by the oracle alone
            fd_full = batched_central_diff(f, image, h=1e-5).ravel()
            top = np.argsort(np.abs(fd_full))[-100:]
        else:
            cand = np.argsort(np.abs(grads))[-300:]
            fd_cand, _ = _fd_at(model, f, image, cand)
            top = cand[np.argsort(np.abs(fd_cand))[-100:]]
        fd_top, n = _fd_at(model, f, image, top)
        one_sided += n
        full_checked |= k == 0
        worst = max(worst, float(rel_err(grads[top], fd_top).max()))
    elapsed = time.perf_counter() - t0
    ok = full_checked and worst < 1e-5 and elapsed < 60
    report(1, ok, f"saliency vs central differences: max rel err {worst:.2e} (< 1e-5; {one_sided} kink-straddling entries one-sided), {elapsed:.1f}s (< 60s)")
    assert ok


def _gates(model, x):
    acts = model.trace(x)
    return np.concatenate(
        [(acts[i] > 0).reshape(len(x), -1) for i, layer in enumerate(model.layers) if layer.kind == "ReLU"], axis=1
    )


def _fd_at(model, f, image, flat_idx, h=1e-5):
    """Central differences at ``flat_idx``, kink-aware.

    Every toy-16 layer is piecewise linear, so when one side of the stencil
    flips a ReLU gate the central difference is not a derivative estimate;
    the one-sided difference on the side that keeps the gates of ``image`` is
    exact up to rounding and is used instead. Returns (fd, n_one_sided).
    """
    base = np.repeat(image.reshape(1, -1), len(flat_idx), axis=0)
    plus, minus = base.copy(), base.copy()
    rows = np.arange(len(flat_idx))
    plus[rows, flat_idx] += h
    minus[rows, flat_idx] -= h
    shape = (-1,) + image.shape
    plus, minus = plus.reshape(shape), minus.reshape(shape)
    f0, fp, fm_ = f(image[None])[0], f(plus), f(minus)
    g0 = _gates(model, image[None])
    keep_p = np.all(_gates(model, plus) == g0, axis=1)
    keep_m = np.all(_gates(model, minus) == g0, axis=1)
    fd = (fp - fm_) / (2 * h)
    fd = np.where(keep_p & ~keep_m, (fp - f0) / h, fd)
    fd = np.where(keep_m & ~keep_p, (f0 - fm_) / h, fd)
    return fd, int(np.sum(keep_p != keep_m))


# ---------------------------------------------------------------- 2


def test_c02_head_reproduction(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_lit = worst_sign = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 64))
        q = float(rng.uniform(1e-6, 1 - 1e-6))
        e_pos = rng.random(d) * rng.uniform(0.01, 100)
        e_pos[rng.random(d) < 0.3] = 0.0
        if not e_pos.any():
            e_pos[0] = 1.0
        e_sig = rng.normal(size=d) * rng.uniform(0.01, 100)
        worst_lit = max(worst_lit, abs(plq.build_head(e_pos, q, plq.PAPER_LITERAL)(e_pos) - q))
        worst_sign = max(worst_sign, abs(plq.build_head(e_sig, q, plq.SIGN_CORRECTED)(e_sig) - q))
    elapsed = time.perf_counter() - t0
    ok = worst_lit < 1e-12 and worst_sign < 1e-12 and elapsed < 1
    report(2, ok, f"head reproduces q_scaled: literal {worst_lit:.1e}, sign-corrected {worst_sign:.1e} (< 1e-12), {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_quality_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(2, 11)), int(rng.integers(1, 9)))) * rng.uniform(0.01, 2)
        worst = max(worst, abs(fiq.quality_raw(x) - quality_raw_bruteforce(x)))
        worst = max(worst, abs(fiq.pairwise_distance_sum(x) - pairwise_sum_bruteforce(x)))
    same = fiq.quality_raw(np.tile(rng.normal(size=5), (6, 1)))
    closed = abs(fiq.quality_raw(np.array([[0.0, 0.0], [0.0, 2.0]])) - 2 / (1 + math.e))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and same == 1.0 and closed < 1e-12 and elapsed < 1
    report(3, ok, f"quality_raw vs double loop {worst:.1e}, identical rows -> {same!r}, 2*sigmoid(-1) err {closed:.1e}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_scaling_and_visualization(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    scale_ok = True
    for k in range(1000):
        # published ArcFace and FaceNet constants for a third of the lists each; random slopes keep |alpha*(q-r)| <= 30
        # so the sigmoid never rounds to exactly 1.0
        alpha, r = (fiq.ARCFACE_SCALING, fiq.FACENET_SCALING, (rng.uniform(1, 30), rng.uniform(0, 1)))[k % 3]
        qs = r + rng.uniform(-0.05, 0.05, size=int(rng.integers(2, 20))) if k % 3 < 2 else rng.random(int(rng.integers(2, 20)))
        scaled = fiq.scale_quality(qs, alpha, r)
        order = np.argsort(qs)
        scale_ok &= bool(np.all(np.diff(scaled[order]) > 0))
        scale_ok &= bool(np.array_equal(np.argsort(scaled), order))
    v_ok = plq.pixel_quality(0.0, 7.5) == 0.0
    for _ in range(1000):
        a, b = np.sort(rng.random(2) * 10.0 ** rng.uniform(-8, 0))
        gamma = rng.uniform(0, 12)
        va, vb = plq.pixel_quality(a, gamma), plq.pixel_quality(b, gamma)
        v_ok &= bool(0 <= va < 1 and 0 <= vb < 1 and (va < vb or a == b))
    g = plq.calibrate_gamma([np.random.default_rng(5).random((20, 20)) * 1e-3], (3, 4, 12, 10))
    q95 = np.percentile(np.random.default_rng(5).random((20, 20))[3:15, 4:14] * 1e-3, 95)
    inv = abs(plq.pixel_quality(q95, g) - 0.9)
    elapsed = time.perf_counter() - t0
    ok = scale_ok and v_ok and inv < 1e-12 and elapsed < 1
    report(4, ok, f"scaling monotone/argsort-invariant {scale_ok}, v in [0,1) and strictly increasing {v_ok}, v(q95)-0.9 = {inv:.1e}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_no_per_image_scaling(report):
    t0 = time.perf_counter()
    s = np.random.default_rng(6).random((32, 32)) * 1e-4
    gamma = 7.5
    a = plq.visualize(s, gamma)
    b = plq.visualize(3 * s, gamma)
    v = lambda x: (10.0**gamma * np.square(x)) / (1 + 10.0**gamma * np.square(x))  # noqa: E731
    exact = np.array_equal(a.values, v(s)) and np.array_equal(b.values, v(3 * s))
    # each pixel on its own gives the same value as inside the map
    exact &= all(plq.pixel_quality(x, gamma) == y for x, y in zip((3 * s).ravel(), b.values.ravel()))
    differ = not np.array_equal(a.values, b.values)
    elapsed = time.perf_counter() - t0
    ok = exact and differ and elapsed < 1
    report(5, ok, f"visualize(S) and visualize(3S) equal v pointwise: {exact}, maps differ: {differ}, {elapsed:.3f}s")
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_cli_determinism(report, tmp_path):
    t0 = time.perf_counter()
    model = _random_model(7)
    model.metadata.update({"alpha": 20.0, "r": 0.7, "gamma": 6.0, "normalize_embeddings": True})
    fm.save(model, tmp_path / "m.plqm")
    corpus = tmp_path / "corpus"
    assert main(["gen-synthetic", "--identities", "3", "--seed", "9", "--out", str(corpus)]) == 0
    img = str(corpus / "id001_s00.ppm")

    def outputs(tag, jobs):
        out = tmp_path / tag
        out.mkdir()
        common = ["--model", str(tmp_path / "m.plqm"), "--seed", "42", "--jobs", str(jobs)]
        assert main(["quality", *common, "--out", str(out / "quality.txt"), img]) == 0
        assert main(["map", *common, "--out", str(out), img]) == 0
        assert main(["mask-exp", *common, "--out", str(out / "mx"), str(corpus)]) == 0
        return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    first, second, threaded = outputs("a", 1), outputs("b", 1), outputs("c", 4)
    same = first == second == threaded and len(first) == 5
    elapsed = time.perf_counter() - t0
    ok = same and elapsed < 60
    report(6, ok, f"quality/map/mask-exp byte-identical across 2 runs and 1 vs 4 threads ({len(first)} files): {same}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_protocol_fidelity(report):
    t0 = time.perf_counter()
    img = np.zeros((100, 100, 3))
    tops, lefts, inside = [], [], True
    for k in range(10_000):
        _, spec = ex.place_random_mask(img, 10, k)
        tops.append(spec.top)
        lefts.append(spec.left)
        inside &= 5 <= spec.top and spec.top + 10 <= 95 and 5 <= spec.left and spec.left + 10 <= 95
    big_ok = True
    for k in range(2000):
        _, spec = ex.place_random_mask(img, 50, k)
        big_ok &= 5 <= spec.top <= 45 and 5 <= spec.left <= 45
    extremes = (min(tops), max(tops), min(lefts), max(lefts))
    elapsed = time.perf_counter() - t0
    ok = inside and extremes == (5, 85, 5, 85) and big_ok and elapsed < 10
    report(7, ok, f"s=10 squares inside [5,95): {inside}, top/left extremes {extremes}, s=50 within [5,45]: {big_ok}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_delta_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(4, 40, size=2))
        a, b = rng.random((h, w)), rng.random((h, w))
        qa, qb = rng.random(2)
        top, left = int(rng.integers(0, h)), int(rng.integers(0, w))
        rh, rw = int(rng.integers(1, h - top + 1)), int(rng.integers(1, w - left + 1))
        total, count = 0.0, 0
        for i in range(top, top + rh):
            for j in range(left, left + rw):
                total += a[i, j] - b[i, j]
                count += 1
        worst = max(worst, abs(ex.delta_p(a, b, (top, left, rh, rw)) - total / count))
        worst = max(worst, abs(ex.delta_q(qa, qb) - (qa - qb)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 1
    report(8, ok, f"delta_q/delta_p vs brute force: max err {worst:.1e} (< 1e-12), {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 9 and 10


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    data = synthetic.make_dataset(N_IDENTITIES, SAMPLES, seed=TRAIN_SEED)
    model = fm.train_toy([(img, lab) for img, lab, _ in data], epochs=EPOCHS, lr=LR, seed=TRAIN_SEED,
                          batch_size=BATCH, schedule=SCHEDULE)
    specs = [synthetic.identity_spec(TRAIN_SEED, i) for i in range(N_IDENTITIES)]
    cal = calibrate_model(model, [s.render(CALIBRATION_SAMPLE) for s in specs], seed=TRAIN_SEED)
    config = fiq.FiqConfig(alpha=cal["alpha"], r=cal["r"], normalize_embeddings=True, seed=TRAIN_SEED)
    return {
        "model": model,
        "config": config,
        "gamma": cal["gamma"],
        "specs": specs,
        "seconds": time.perf_counter() - t0,
    }


def test_c09_mask_direction(report, trained):
    t0 = time.perf_counter()
    model, config, gamma = trained["model"], trained["config"], trained["gamma"]
    images = [(f"id{i:03d}", s.render(EVALUATION_SAMPLE)) for i, s in enumerate(trained["specs"])]
    records = ex.run_mask_experiment(model, images, fiq_config=config, gamma=gamma, seed=TRAIN_SEED)
    summary = {row.size: row for row in ex.summarize(records)}
    largest = summary[max(summary)]
    acc = model.metadata["train_accuracy"]
    elapsed = trained["seconds"] + time.perf_counter() - t0
    ok = acc > 0.9 and largest.frac_positive_dq > 0.5 and largest.frac_positive_dp > 0.5 and elapsed < 600
    report(9, ok, (
        f"train acc {acc:.3f} (> 0.9); size {largest.size}px: frac dQ>0 {largest.frac_positive_dq:.2f}, "
        f"frac dp>0 {largest.frac_positive_dp:.2f} (both > 0.5, n={largest.n}), {elapsed:.0f}s incl. training"
    ))
    assert ok


def test_c10_restoration_direction(report, trained):
    t0 = time.perf_counter()
    model, config, gamma = trained["model"], trained["config"], trained["gamma"]
    # degrade with the largest protocol mask (as in criterion 9), then restore with the fill proxy
    pairs = []
    for i, spec in enumerate(trained["specs"]):
        img = spec.render(EVALUATION_SAMPLE)
        size = ex.mask_sizes(*img.shape[:2])[-1]
        _, mask = ex.place_random_mask(img, size, 1000 + i)
        pairs.append(ex.mask_and_fill(f"id{i:03d}", img, mask.box, "mean_fill"))
    rep = ex.run_restoration_experiment(model, pairs, config, gamma, repeats=10)
    med, std = rep.median_delta_q, rep.median_degraded_std
    stds_positive = all(s > 0 for _, s in rep.degraded_stats)
    elapsed = time.perf_counter() - t0
    ok = med > 0 and stds_positive and med > std and elapsed < 300
    report(10, ok, (
        f"mask->fill median dQ {med:.4f} (> 0) vs median repeat std {std:.4f}; all stds > 0: {stds_positive}; "
        f"increased {rep.frac_increased:.2f} of {len(pairs)}, {elapsed:.0f}s"
    ))
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_clipping(report):
    t0 = time.perf_counter()
    model = _random_model(11)
    image = np.random.default_rng(11).random((32, 32, 3))
    head = plq.build_head(fm.embed(model, image), 0.8)
    plain = plq.saliency(model, image, head)
    limit = 0.5 * max(plain.step_norms)
    clipped = plq.saliency(model, image, head, clip_norm=limit)
    inf = plq.saliency(model, image, head, clip_norm=math.inf)
    finite = bool(np.all(np.isfinite(clipped.grads)))
    differs = not np.array_equal(clipped.grads, plain.grads)
    identical = inf.grads.tobytes() == plain.grads.tobytes()
    elapsed = time.perf_counter() - t0
    ok = finite and differs and identical and elapsed < 10
    report(11, ok, f"clip below observed norm: finite {finite}, differs {differs}; clip=inf bit-identical {identical}, {elapsed:.2f}s")
    assert ok
