"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Set CGDRCN_FULL_ACCEPTANCE=1 to repeat the ablation comparison over three seeds.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES, SMOKE_LR, SMOKE_STEPS
from cgdrcn.annotations import Category, HeadAnnotation, ImageRecord, categorize
from cgdrcn.autodiff import bilinear_upsample2x
from cgdrcn.autodiff import ops
from cgdrcn.checkpoint import load_checkpoint, save_checkpoint
from cgdrcn.checks import model_gradcheck, threshold_for
from cgdrcn.density import GaussianSpec, rasterize, target_pyramid
from cgdrcn.evaluation import mae_mse
from cgdrcn.loss import LossConfig, loss_c, loss_d, loss_f
from cgdrcn.model import ModelConfig, forward, infer_count, init_model
from cgdrcn.synthcrowd import generate_corpus
from cgdrcn.training import TrainConfig, ablation_suite, ablation_table, load_corpus, train

TINY = ModelConfig.preset("tiny")
FULL_ACCEPTANCE = os.environ.get("CGDRCN_FULL_ACCEPTANCE") == "1"


def verdict(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def info(name, detail):
    ACCEPTANCE_LINES.append(f"INFO  {name}: {detail}")


def test_gradient_correctness():
    t0 = time.perf_counter()
    report = model_gradcheck("tiny", seed=0, bits=64, probe_count=256, lambda_c=1.0, size=32)
    elapsed = time.perf_counter() - t0
    n = len(report.probes)
    ok = n >= 200 and report.max_rel_err < 1e-5 and elapsed < 300
    worst = report.worst()
    verdict("gradient correctness", ok,
            f"{n} probes, max rel err {report.max_rel_err:.2e} (< 1e-05) at {worst.name}, {elapsed:.0f} s (< 300 s)")


def test_gradient_32bit_informational():
    report = model_gradcheck("tiny", seed=0, bits=32, probe_count=256)
    thr = threshold_for(32)
    above = sum(p.rel_err >= thr for p in report.probes)
    info("32-bit gradcheck (not a criterion)",
         f"max rel err {report.max_rel_err:.2e}, {above}/{len(report.probes)} probes at or above {thr:.0e}")
    # the bulk of probes agree; stragglers are coordinates with near-zero gradient
    assert above <= 0.05 * len(report.probes)


def test_density_mass_conservation():
    rng = np.random.default_rng(2024)
    worst_mass, worst_pyr = 0.0, 0.0
    ok = True
    for k in range(100):
        w, h = int(rng.integers(32, 160)), int(rng.integers(32, 160))
        n = int(rng.integers(0, 60))
        pts = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        # force some heads onto the border band
        for j in range(min(n, 5)):
            pts[j] = (rng.choice([0.0, w - 1e-3, rng.uniform(0, 2)]), rng.choice([0.0, h - 1e-3, rng.uniform(0, h)]))
        sigma = float(rng.uniform(0.5, 8.0))
        full = rasterize(pts, (w, h), GaussianSpec(sigma))
        err = abs(full.count() - n)
        ok &= err <= 1e-4 * n + 1e-6
        worst_mass = max(worst_mass, err / max(n, 1))
        # pyramid on the 32-aligned crop
        cw, ch = w - w % 32, h - h % 32
        crop = rasterize(pts[(pts[:, 0] < cw) & (pts[:, 1] < ch)], (cw, ch), GaussianSpec(sigma))
        counts = [m.count() for m in target_pyramid(crop).values()]
        ref = crop.count()
        rel = max(abs(c - ref) for c in counts) / max(abs(ref), 1e-12) if ref else max(abs(c) for c in counts)
        ok &= rel <= 1e-6
        worst_pyr = max(worst_pyr, rel)
    verdict("density mass conservation", bool(ok),
            f"100 head sets, worst |count-|S||/|S| {worst_mass:.1e}, worst pyramid rel diff {worst_pyr:.1e}")


def test_shape_contract():
    state = init_model(TINY, 0)
    out = forward(state, np.random.default_rng(0).random((3, 224, 224)).astype(np.float32))
    got = {i: out.predictions[i].shape[1:] for i in (6, 5, 4, 3)}
    ok = got == {6: (7, 7), 5: (14, 14), 4: (28, 28), 3: (56, 56)}
    rng = np.random.default_rng(5)
    sizes = [(32 * int(a), 32 * int(b)) for a, b in rng.integers(2, 17, size=(12, 2))]
    for h, w in sizes:
        o = forward(state, rng.random((3, h, w)).astype(np.float32))
        for i, div in ((6, 32), (5, 16), (4, 8), (3, 4)):
            ok &= o.predictions[i].shape == (1, h // div, w // div)
    verdict("shape contract", ok, f"224 -> {got[6][0]}/{got[5][0]}/{got[4][0]}/{got[3][0]}; {len(sizes)} random sizes")


def test_gating_semantics():
    state = init_model(TINY, 2)
    img = np.random.default_rng(3).random((3, 96, 96)).astype(np.float32)
    probe = forward(state, img)
    zero = forward(state, img, overrides={i: np.zeros(probe.residuals[i].shape) for i in (5, 4, 3)})
    up = zero.y6
    for _ in range(3):
        up = bilinear_upsample2x(up, TINY.preserve_integral_upsample)
    slack = TINY.cm_epsilon * sum(float(np.abs(zero.residuals[i].data).sum()) for i in (5, 4, 3))
    err0 = float(np.max(np.abs(zero.y3.data - up.data)))
    ok0 = err0 <= 1e-5 + slack
    one = forward(state, img, overrides={i: np.ones(probe.residuals[i].shape) for i in (5, 4, 3)})
    ok1 = all(
        np.array_equal(one.predictions[i].data,
                       ops.add(one.residuals[i], bilinear_upsample2x(one.predictions[i + 1], True)).data)
        for i in (5, 4, 3))
    verdict("gating semantics", ok0 and ok1,
            f"CM=0: max |Y3 - up^3(Y6)| {err0:.1e} (<= {1e-5 + slack:.1e}); CM=1: exact {ok1}")


def _flat_d(p, t, c):
    total = 0.0
    for i in p:
        cm = c[i].ravel() if i in c else np.ones(p[i].size)
        total += math.sqrt(sum((ci * ti - ci * pi) ** 2 for pi, ti, ci in zip(p[i].ravel(), t[i].ravel(), cm)))
    return total


def test_loss_identities():
    sizes = {3: (8, 8), 4: (4, 4), 5: (2, 2), 6: (1, 1)}
    ok, worst = True, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = {i: rng.standard_normal((1, *s)) for i, s in sizes.items()}
        t = {i: rng.random((1, *s)) for i, s in sizes.items()}
        c = {i: rng.uniform(1e-3, 1.0, (1, *sizes[i])) for i in (3, 4, 5)}
        terms = loss_f(p, t, c, LossConfig(lambda_c=0.0))
        ok &= terms.l_f.data.tobytes() == terms.l_d.data.tobytes()
        lc = float(loss_c(c).data)
        ok &= lc <= 0
        ref_c = sum(math.log(v) for i in c for v in c[i].ravel())
        ref_d = _flat_d(p, t, c)
        worst = max(worst, abs(lc - ref_c) / abs(ref_c), abs(float(loss_d(p, t, c).data) - ref_d) / ref_d)
        ok &= float(loss_c({i: np.ones_like(c[i]) for i in c}).data) == 0.0
    ok &= worst <= 1e-6
    verdict("loss identities", bool(ok),
            f"lambda_c=0 gives L_f == L_d bitwise, CM=1 gives L_c=0, L_c<=0, oracle rel err {worst:.1e} (<= 1e-06)")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    recs = generate_corpus({"Low": 12, "Medium": 10, "Distractors": 4, "Weather": 4}, out, seed=11)
    corpus = load_corpus(recs, out / "images")
    seeds = (0, 1, 2) if FULL_ACCEPTANCE else (0,)
    runs = {}
    for seed in seeds:
        cfg = TrainConfig(steps=500, lr=SMOKE_LR, batch_size=4, seed=seed, checkpoint_every=100)
        t0 = time.perf_counter()
        rows = ablation_suite(corpus, cfg)
        runs[seed] = (rows, time.perf_counter() - t0)
    return corpus, runs


@pytest.mark.slow
def test_learning_smoke(smoke_run, ablation):
    cfg, samples, result, before, after = smoke_run
    finite = all(math.isfinite(r["l_f"]) for r in result.log_rows)
    smoke_ok = len(samples) == 10 and cfg.steps == SMOKE_STEPS and finite and after[0] <= 0.5 * before[0]

    _, runs = ablation
    rows, elapsed = runs[0]
    table = ablation_table(rows)
    layout_ok = [r.label for r in rows] == [
        "Base network", "Base network + R", "Base network + R + UCEB (λ_c=0)", "Base network + R + UCEB (λ_c=1)"
    ] and table.splitlines()[0].split() == ["Method", "MAE", "MSE"]
    budget_ok = all(len(r.train.log_rows) == 500 for r in rows) and elapsed < 1800
    verdict("learning smoke test", smoke_ok and layout_ok and budget_ok,
            f"probe L_f {before[0]:.4g} -> {after[0]:.4g} ({after[0] / before[0]:.1%} of start, <= 50%) "
            f"after {cfg.steps} steps; ablation 4x500 steps in {elapsed / 60:.1f} min (< 30)")
    info("smoke probe terms", f"L_d {before[1]:.4g} -> {after[1]:.4g}, L_c {before[2]:.4g} -> {after[2]:.4g}")
    for line in table.rstrip().splitlines():
        info("ablation table (seed 0)", line)

    wins = []
    for seed, (rs, _) in sorted(runs.items()):
        base, gated = rs[0].train.best_val_mae, rs[3].train.best_val_mae
        wins.append(gated <= base)
        info("lambda_c=1 vs Base validation MAE", f"seed {seed}: {gated:.2f} vs {base:.2f}")
    info("lambda_c=1 validation MAE <= Base (informational)",
         f"{sum(wins)}/{len(wins)} seeds" + ("" if FULL_ACCEPTANCE else "; set CGDRCN_FULL_ACCEPTANCE=1 for 3 seeds"))


@pytest.mark.slow
def test_padding_invariance_soft(ablation):
    corpus, runs = ablation
    state = runs[0][0][3].train.best_state
    rel = []
    for s in corpus[:8]:
        img = s.image[:, :224, :224]
        canvas = np.zeros((3, 256, 256), dtype=np.float32)
        canvas[:, :224, :224] = img
        a, _ = infer_count(state, img)
        b, dens = infer_count(state, canvas)
        assert dens.shape == (64, 64) and math.isfinite(b)
        rel.append(abs(a - b) / max(abs(a), 1e-9))
    detail = f"max rel diff {max(rel):.1%}, median {float(np.median(rel)):.1%} over {len(rel)} images (soft target 5%)"
    info("padding invariance (soft)", detail)
    if max(rel) > 0.05:
        pytest.xfail(f"soft padding check above 5%: {detail}")


def test_metrics_oracle():
    mae, mse = mae_mse([10, 20], [12, 16])
    ok = abs(mae - 3) <= 1e-9 and abs(mse - math.sqrt(10)) <= 1e-9
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        m, s = mae_mse(rng.uniform(0, 1000, n), rng.uniform(-100, 1100, n))
        ok &= m <= s * (1 + 1e-12)

    def bucket(n, distractor=False):
        rec = ImageRecord("r", 8, 8, tuple(HeadAnnotation(1.0, 1.0) for _ in range(n)), is_distractor=distractor)
        cats = categorize(rec) - {Category.OVERALL, Category.WEATHER}
        return next(iter(cats)).value

    got = {n: bucket(n) for n in (50, 51, 500, 501)}
    got["distractor"] = bucket(0, True)
    ok &= got == {50: "Low", 51: "Medium", 500: "Medium", 501: "High", "distractor": "Distractors"}
    verdict("metrics oracle", bool(ok), f"(3, sqrt 10) to 1e-9, MAE <= MSE on 1000 instances, buckets {got}")


def test_determinism_and_persistence(small_corpus, tmp_path):
    out, recs = small_corpus
    corpus = load_corpus(recs, out / "images")
    cfg = TrainConfig(steps=6, crop_size=64, batch_size=2, lr=SMOKE_LR, seed=1, checkpoint_every=3)
    blobs = []
    with threadpool_limits(limits=1):
        for name in ("a", "b"):
            res = train(corpus, cfg)
            save_checkpoint(res.state, tmp_path / f"{name}.ckpt", cfg.steps, cfg.digest())
            res.write_log(tmp_path / f"{name}.jsonl")
            blobs.append(((tmp_path / f"{name}.ckpt").read_bytes(), (tmp_path / f"{name}.jsonl").read_bytes()))
    same = blobs[0] == blobs[1]
    back = load_checkpoint(tmp_path / "a.ckpt")
    bitwise = all(back.params[k].tobytes() == v.tobytes() for k, v in res.state.params.items())
    save_checkpoint(back, tmp_path / "c.ckpt", cfg.steps, cfg.digest())
    resave = (tmp_path / "c.ckpt").read_bytes() == blobs[0][0]
    verdict("determinism and persistence", same and bitwise and resave,
            f"reruns byte-identical {same}, load bitwise {bitwise}, re-save identical {resave}")
