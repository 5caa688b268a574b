"""End-to-end acceptance checks, one test per criterion at its stated tolerance."""
import io
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from driu import cli, evaluation as ev, net, ops, trainer
from driu.dataio import (decode_pnm, encode_pnm, load_dataset, load_weights, save_weights,
                         synth_fundus, write_mask, write_rgb)
from driu.dataio.datasets import format_split
from driu.loss import balanced_bce_loss
from oracles import (all_pairs_boundary_error, brute_counts, direct_bce_sum, prf, random_case)


def test_criterion_1_gradient_correctness(acceptance_report):
    buf = io.StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = cli.main(["gradcheck", "--seed", "0", "--width-scale", "8"])
    elapsed = time.perf_counter() - t0
    rows = [line.split() for line in buf.getvalue().splitlines()]
    errors = {r[0]: float(r[2]) for r in rows}
    cases = {r[0]: int(r[6]) for r in rows}
    op_names = [n for n in errors if n != "end_to_end"]
    ok = (code == 0 and elapsed < 60
          and all(errors[n] < 1e-4 and cases[n] >= 20 for n in op_names)
          and errors["end_to_end"] < 1e-3 and cases["end_to_end"] == 20)
    worst_op = max(op_names, key=errors.get)
    acceptance_report(1, "gradient correctness", ok,
                      f"worst op {worst_op} {errors[worst_op]:.1e} (<1e-4), end-to-end "
                      f"{errors['end_to_end']:.1e} (<1e-3), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_2_loss_fidelity(acceptance_report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for case in range(200):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        prob = rng.uniform(1e-4, 1 - 1e-4, size=(1, h, w))
        if case == 0:
            mask = np.ones((1, h, w), np.uint8)
        elif case == 1:
            mask = np.zeros((1, h, w), np.uint8)
        else:
            mask = (rng.random((1, h, w)) < rng.uniform(0, 1)).astype(np.uint8)
        expect = direct_bce_sum(prob, mask)
        got = balanced_bce_loss(prob, mask).total
        worst = max(worst, abs(got - expect) / max(abs(expect), 1e-300))
    ten_percent = np.zeros((1, 10, 10), np.uint8)
    ten_percent.flat[:10] = 1
    uniform = balanced_bce_loss(np.full((1, 10, 10), 0.5), ten_percent).total
    sig6 = f"{uniform:.6g}" == f"{18 * math.log(2):.6g}" == "12.4766"
    ok = worst < 1e-9 and sig6
    acceptance_report(2, "loss fidelity", ok,
                      f"max rel err {worst:.1e} on 200 cases (<1e-9); uniform case {uniform:.6g}")
    assert ok


def test_criterion_3_architecture_shapes(acceptance_report, monkeypatch):
    params = net.build_network(net.NetConfig(width_scale=8), seed=0)
    rng = np.random.default_rng(3)
    shapes_ok = True
    for h in (16, 17, 33, 64):
        for w in (16, 17, 33, 64):
            probs, trace = net.forward(params, rng.standard_normal((3, h, w)).astype(np.float32))
            for s, out in enumerate(trace.stage_outputs, 1):
                shapes_ok &= out.shape[1:] == (math.ceil(h / 2 ** (s - 1)), math.ceil(w / 2 ** (s - 1)))
            shapes_ok &= all(p.shape == (1, h, w) for p in probs.values())
            for task, stages in (("vessel", (1, 2, 3, 4)), ("disc", (2, 3, 4, 5))):
                side_caches = trace.head_caches[task][0]
                shapes_ok &= tuple(s for s, _, _ in side_caches) == stages

    calls = []
    real = ops.conv2d_forward
    monkeypatch.setattr(ops, "conv2d_forward",
                        lambda x, w, b, *a, **k: calls.append(w.shape) or real(x, w, b, *a, **k))
    net.forward(params, rng.standard_normal((3, 32, 32)).astype(np.float32), net.TASKS)
    n_base = sum(params.config.convs_per_stage)
    base_calls = sum(1 for name in params if name.startswith("stage") and name.endswith("weight"))
    calls_ok = len(calls) == n_base + 2 * 5 and base_calls == n_base
    ok = shapes_ok and calls_ok
    acceptance_report(3, "architecture shape suite", ok,
                      f"16 input sizes checked; both-heads forward made {len(calls)} conv calls "
                      f"= {n_base} base + 10 head")
    assert ok


def _overfit(task):
    samples = [synth_fundus(seed, 64, task) for seed in (0, 1)]
    params = net.build_network(net.NetConfig(width_scale=8), seed=0)
    config = trainer.TrainConfig(iterations=500, augment=False, log_every=0)
    result = trainer.train(params, samples, config, task=task)
    losses = [loss for _, _, loss in result.log]
    preds, golds = [], []
    for s in samples:
        probs, _ = net.forward(params, trainer.preprocess(s.image, result.means), (task,))
        preds.append(ev.binarize(probs[task][0], 0.5))
        golds.append(s.gold.astype(bool))
    pooled = ev.dice(np.concatenate(preds), np.concatenate(golds))
    per_image = [ev.dice(p, g) for p, g in zip(preds, golds)]
    return losses, pooled, per_image


@pytest.mark.slow
def test_criterion_4_desk_overfit(acceptance_report):
    t0 = time.perf_counter()
    outcome = {task: _overfit(task) for task in net.TASKS}
    elapsed = time.perf_counter() - t0
    targets = {"vessel": 0.95, "disc": 0.98}
    ok = elapsed < 600
    parts = []
    for task, (losses, pooled, per_image) in outcome.items():
        ratio = losses[-1] / losses[0]
        ok &= all(math.isfinite(v) for v in losses) and ratio < 0.1 and pooled >= targets[task]
        parts.append(f"{task} loss ratio {ratio:.4f} dice {pooled:.4f} (>={targets[task]}; "
                     f"per image {', '.join(f'{d:.4f}' for d in per_image)})")
    acceptance_report(4, "desk-scale overfit", ok, "; ".join(parts) + f"; {elapsed:.0f}s (<600s)")
    assert ok


def test_criterion_5_metric_oracles(acceptance_report):
    rng = np.random.default_rng(5)
    thresholds = ev.DEFAULT_THRESHOLDS[::16]
    pr_ok = dice_ok = human_ok = True
    for _ in range(100):
        probs, golds, fovs = random_case(rng)
        curve = ev.pr_curve(probs, golds, fovs, thresholds=thresholds)
        pr_ok &= np.array_equal(np.stack([curve.tp, curve.fp, curve.fn], 1),
                                brute_counts(probs, golds, fovs, thresholds))
        a, b = probs[0] > 0.5, golds[0].astype(bool)
        dice_ok &= ev.dice(a, b) == (2 * sum(int(x and y) for x, y in zip(a.ravel(), b.ravel()))
                                     / (a.sum() + b.sum()) if a.sum() + b.sum() else 1.0)
        seconds = [(rng.random(g.shape) < 0.4).astype(np.uint8) for g in golds]
        hp = ev.human_points(seconds, golds, fovs)
        for (_, p, r, f), s, g, fv in zip(hp.points, seconds, golds, fovs):
            human_ok &= (p, r, f) == prf(*map(int, brute_counts([s.astype(float)], [g], [fv], [0.5])[0]))

    worst_boundary, n = 0.0, 0
    while n < 100:
        a = rng.random((16, 16)) < rng.uniform(0.02, 0.7)
        b = rng.random((16, 16)) < rng.uniform(0.02, 0.7)
        if a.any() and b.any():
            worst_boundary = max(worst_boundary,
                                 abs(ev.boundary_error(a, b) - all_pairs_boundary_error(a, b)))
            n += 1

    ods_ok = True
    for _ in range(50):
        k = int(rng.integers(1, 40))
        t = np.sort(rng.choice(np.arange(1, 256), k, replace=False)) / 256
        tp, fp, fn = (rng.integers(0, 5, k) for _ in range(3))
        scores = [prf(*map(int, row))[2] for row in zip(tp, fp, fn)]
        best = max(range(k), key=lambda i: (scores[i], -i))
        ods_ok &= ev.ods(ev.PRCurve(t, tp, fp, fn))[0] == t[best]

    ok = pr_ok and dice_ok and human_ok and worst_boundary < 1e-9 and ods_ok
    acceptance_report(5, "metric oracles", ok,
                      f"pr/dice/human exact on 100 cases: {pr_ok}/{dice_ok}/{human_ok}; "
                      f"boundary max diff {worst_boundary:.1e} (<1e-9); ods on 50 curves: {ods_ok}")
    assert ok


def test_criterion_6_metric_identities(acceptance_report):
    rng = np.random.default_rng(6)
    golds = [(rng.random((20, 20)) < 0.3).astype(np.uint8) for _ in range(3)]
    curve = ev.pr_curve([g.astype(float) for g in golds], golds)
    perfect_f = ev.ods(curve)[1]
    perfect_b = max(ev.boundary_error(g, g) for g in golds)
    identity_ok = monotone_ok = True
    for _ in range(100):
        a = rng.random((12, 12)) < rng.uniform(0.05, 0.9)
        b = (rng.random((12, 12)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
        f = ev.pr_curve([a.astype(float)], [b], thresholds=[0.5]).f[0]
        identity_ok &= abs(ev.dice(a, b) - f) < 1e-12
        probs, gs, fovs = random_case(rng)
        monotone_ok &= bool(np.all(np.diff(ev.pr_curve(probs, gs, fovs).recall) <= 0))
    ok = perfect_f == 1.0 and perfect_b == 0.0 and identity_ok and monotone_ok
    acceptance_report(6, "metric identities", ok,
                      f"perfect ODS F {perfect_f}, boundary {perfect_b}; dice==F on 100 pairs: "
                      f"{identity_ok}; recall monotone on 100 curves: {monotone_ok}")
    assert ok


def test_criterion_7_reproducibility(acceptance_report, tmp_path):
    data = tmp_path / "data"
    with redirect_stdout(io.StringIO()):
        assert cli.main(["synth", "--count", "4", "--out", str(data)]) == 0
        for run in ("a", "b"):
            assert cli.main(["train", "--data", str(data), "--width-scale", "8", "--iterations", "30",
                             "--log-every", "0", "--out", str(tmp_path / f"{run}.driu"),
                             "--log", str(tmp_path / f"{run}.csv")]) == 0
    same_log = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    same_weights = (tmp_path / "a.driu").read_bytes() == (tmp_path / "b.driu").read_bytes()

    rng = np.random.default_rng(7)
    params = net.build_network(net.NetConfig(width_scale=8), seed=1)
    back = load_weights(save_weights(params))
    weights_rt = list(back) == list(params) and all(
        back[k].tobytes() == params[k].tobytes() and back[k].shape == params[k].shape for k in params)
    images_rt = True
    for maxval, dtype in ((255, np.uint8), (65535, np.uint16)):
        for shape in ((5, 7), (3, 4, 6)):
            arr = rng.integers(0, maxval + 1, shape).astype(dtype)
            out, mv = decode_pnm(encode_pnm(arr, maxval))
            images_rt &= mv == maxval and out.dtype == arr.dtype and out.tobytes() == arr.tobytes()
    ok = same_log and same_weights and weights_rt and images_rt
    acceptance_report(7, "reproducibility", ok,
                      f"identical loss logs {same_log}, weight files {same_weights}; "
                      f"weight codec {weights_rt}, image codec {images_rt}")
    assert ok


def test_criterion_8_split_fidelity(acceptance_report, tmp_path):
    expected = {"drive": (20, 20), "stare": (10, 10), "drions": (60, 50), "rimone": (99, 60)}
    got = {}
    for layout, (n_train, n_test) in expected.items():
        root = tmp_path / layout
        (root / "images").mkdir(parents=True)
        (root / "gt").mkdir()
        ids = [f"{layout}{i:03d}" for i in range(n_train + n_test)]
        for sid in ids:
            write_rgb(root / "images" / f"{sid}.ppm", np.zeros((3, 2, 2)))
            write_mask(root / "gt" / f"{sid}.pgm", np.zeros((2, 2)))
        (root / "split.txt").write_text(format_split(ids[:n_train], ids[n_train:]))
        split = load_dataset(root, layout)
        got[layout] = (len(split.train), len(split.test))
    ok = got == expected
    acceptance_report(8, "split fidelity", ok,
                      ", ".join(f"{k} {a}/{b}" for k, (a, b) in got.items()))
    assert ok
