"""Acceptance criteria 1-8.

Each test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run. Criteria 5 and 6 need
the default-recipe model, which is trained once and cached under pytest's
cache directory (keyed by the recipe and the training sources). Set
``SATLAB_RETRAIN=1`` to force a fresh run.
"""

import hashlib
import json
import math
import os
import time

import numpy as np
import pytest
from helpers import finite_difference_errors, perturbed_weights, rand

import satlab
from satlab import data
from satlab import evaluation as ev
from satlab import experiment as ex
from satlab import tensor as tc
from satlab import train as tr
from satlab.attention import (
    AttentionLayerWeights, ShareConfig, ShareContext, adain, multi_head_block, scaled_dot_attention,
    shared_attention_reference,
)
from satlab.denoiser import DenoiserWeights, GmmDenoiser, ModelConfig
from satlab.diffusion import NoiseSchedule, ddim_invert, ddim_invert_step, ddim_sample, ddim_step, sample_set
from satlab.tensor import Rng

FIXTURES = 100
N_SETS = 50
N_RESTYLES = 50
CHANCE = 1.0 / data.N_STYLE


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


def _layer(rng, d, heads):
    ws = [rand(rng, d, d, scale=1 / math.sqrt(d)) for _ in range(4)]
    return AttentionLayerWeights(*ws, heads=heads)


# ---------------------------------------------------------------------------
# 1-2: mechanism identities, AdaIN and lambda
# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "mechanism identities")
def test_criterion_1_mechanism_identities(request):
    start = time.perf_counter()
    r = Rng(101, 1)
    worst_collapse = 0.0
    for _ in range(FIXTURES):
        m, dk, dv = 2 + r.randint(15), 1 + r.randint(8), 1 + r.randint(8)
        q, k, v = rand(r, m, dk), rand(r, m, dk), rand(r, m, dv)
        shared, _ = shared_attention_reference(q, k, v, (q, k, v), use_adain=True, lam=1.0)
        plain, _ = scaled_dot_attention(q, k, v)
        worst_collapse = max(worst_collapse, float(np.abs(shared - plain).max()))

        n = 1 + r.randint(12)
        kk = rand(r, n, dk)
        vv = rand(r, n, dv)
        a = scaled_dot_attention(q, kk, vv, np.ones(n))
        b = scaled_dot_attention(q, kk, vv)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        lam1, _ = shared_attention_reference(q, k, v, (q + 1, k - 1, v), use_adain=True, lam=1.0)
        manual = scaled_dot_attention(adain(q, q + 1), np.vstack([k - 1, adain(k, k - 1)]), np.vstack([v, v]))[0]
        assert lam1.tobytes() == manual.tobytes()

        layers, heads = 1 + r.randint(4), 1 + r.randint(2)
        d = heads * (2 + r.randint(3))
        w = _layer(r, d, heads)
        phi = rand(r, 1 + r.randint(4), 4 + r.randint(6), d)
        off = ShareConfig(["reference", "full"][r.randint(2)], layer_mask=(False,) * layers)
        layer = r.randint(layers)
        masked = multi_head_block(phi, w, off, ShareContext(), layer)
        assert masked.tobytes() == multi_head_block(phi, w, None, None, layer).tobytes()

        cfg = ShareConfig("reference", use_adain=bool(r.randint(2)), lam=[1.0, 0.5, 0.1][r.randint(3)])
        batch = multi_head_block(phi, w, cfg, ShareContext(), 0)
        alone = multi_head_block(phi[:1], w, cfg, ShareContext(), 0)
        assert batch[0].tobytes() == alone[0].tobytes()

    # the same invariance through a whole sampling run of a random network
    net = DenoiserWeights.init(ModelConfig(image_size=8, patch=4, d_model=16, heads=2, layers=2, n_steps=8), seed=9)
    sched = NoiseSchedule.cosine(8)
    for i in range(10):
        ref = sample_set(net, [i % 6], [i], sched, None, (8, 8, 3)).images[0]
        got = sample_set(net, [i % 6, 1, 2, 3][: 2 + i % 3], [i, 50, 51, 52][: 2 + i % 3], sched,
                         ShareConfig("reference", lam=0.5 + 0.05 * i), (8, 8, 3)).images[0]
        assert got.tobytes() == ref.tobytes()
    elapsed = time.perf_counter() - start
    _detail(request, f"{FIXTURES} fixtures each; collapse max err {worst_collapse:.1e}; {elapsed:.1f}s")
    assert worst_collapse <= 1e-5
    assert elapsed < 60


def _reference_mass(q, k_t, k_r, lam):
    _, p = shared_attention_reference(q, k_t, k_t[:, :1], (q, k_r, k_r[:, :1]), use_adain=False, lam=lam)
    return p[:, : k_r.shape[0]].sum(-1)


@pytest.mark.criterion(2, "AdaIN moments and lambda monotonicity")
def test_criterion_2_adain_and_lambda(request):
    start = time.perf_counter()
    r = Rng(202, 2)
    worst = 0.0
    for _ in range(FIXTURES):
        m, m2, c = 2 + r.randint(20), 2 + r.randint(20), 1 + r.randint(8)
        x = rand(r, m, c, scale=0.1 + 3 * r.uniform()) + (r.uniform() - 0.5) * 4
        y = rand(r, m2, c, scale=0.1 + 3 * r.uniform()) + (r.uniform() - 0.5) * 4
        if tc.column_stats(x)[1].min() <= 1e-3:
            continue
        out = adain(x, y)
        (mo, so), (my, sy) = tc.column_stats(out), tc.column_stats(y)
        worst = max(worst, float(np.abs(mo - my).max()), float(np.abs(so - sy).max()))

    # reference-block mass must not increase while lambda decreases
    lams = np.geomspace(1.0, 1e-3, 25)

    def violations(nonneg):
        count = 0
        for _ in range(FIXTURES):
            m, dk = 2 + r.randint(12), 1 + r.randint(8)
            q, k_t, k_r = rand(r, m, dk), rand(r, m, dk), rand(r, m, dk)
            if nonneg:
                q, k_r = np.abs(q), np.abs(k_r)
            masses = np.stack([_reference_mass(q, k_t, k_r, lam) for lam in lams])
            count += bool(np.any(np.diff(masses, axis=0) > 1e-12))
        return count

    violating = violations(nonneg=False)
    # diagnostic only: the regime where every reference logit is >= 0
    violating_nonneg = violations(nonneg=True)
    elapsed = time.perf_counter() - start
    _detail(request, f"adain max err {worst:.1e}; lambda monotone on {FIXTURES - violating}/{FIXTURES} "
                     f"gaussian fixtures ({FIXTURES - violating_nonneg}/{FIXTURES} with non-negative "
                     f"reference logits); {elapsed:.1f}s")
    assert worst <= 1e-5
    assert violating == 0, "reference mass rose as lambda fell (negative reference logits)"
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 3: sampler and inversion oracle
# ---------------------------------------------------------------------------


def _roundtrip_errors(model, fixtures, T):
    sched = NoiseSchedule.cosine(T)
    errs = []
    for x0, c in fixtures:
        traj = ddim_invert(x0, c, model, sched)
        recon = ddim_sample(model, traj.at(T)[None], [c], sched).images[0]
        errs.append(np.linalg.norm(recon - x0) / np.linalg.norm(x0))
    return np.array(errs)


@pytest.mark.criterion(3, "DDIM inversion round trip with the analytic GMM")
def test_criterion_3_inversion_oracle(request):
    start = time.perf_counter()
    spec = data.gmm_from_dataset()
    model = GmmDenoiser(spec)
    # fixtures are draws from the oracle's own prior
    r = Rng(303, 3)
    fixtures = []
    for _ in range(50):
        k = r.randint(spec.n_components)
        x0 = spec.means[k] + math.sqrt(spec.variances[k]) * tc.randn(r, spec.means[k].shape, np.float64)
        fixtures.append((x0, int(spec.labels[k, 0])))
    means = {T: float(_roundtrip_errors(model, fixtures, T).mean()) for T in (25, 50, 100)}

    sched = NoiseSchedule.cosine(100)
    worst_identity = 0.0
    for _ in range(FIXTURES):
        t = r.randint(100)
        x, eps = tc.randn(r, (16,), np.float64) * 3, tc.randn(r, (16,), np.float64)
        back = ddim_step(ddim_invert_step(x, eps, t, sched), eps, t + 1, sched)
        worst_identity = max(worst_identity, float(np.abs(back - x).max()))
    elapsed = time.perf_counter() - start
    _detail(request, "mean rel L2 " + ", ".join(f"T={T}: {e:.4f}" for T, e in means.items())
            + f"; invert/step identity {worst_identity:.1e}; {elapsed:.1f}s")
    assert means[100] <= 0.05
    assert means[25] > means[50] > means[100]
    assert worst_identity <= 1e-5
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4: gradients
# ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "finite-difference gradient check on the default architecture")
def test_criterion_4_gradients(request):
    start = time.perf_counter()
    config = ModelConfig()
    w = perturbed_weights(config)
    ds = data.make_dataset(4, seed=5)
    x0 = np.stack([s.image for s in ds]).astype(np.float64)
    ids = [s.content_id for s in ds]
    eps = tc.randn(Rng(404, 4), x0.shape, np.float64)
    worst = finite_difference_errors(w, x0, ids, np.array([3, 17, 31, 50]), eps,
                                     NoiseSchedule.cosine(config.n_steps), per_tensor=20)
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    _detail(request, f"{len(worst)} tensors x 20 coords; worst rel err {worst[name]:.1e} ({name}); {elapsed:.1f}s")
    assert worst[name] < 1e-2
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 5-6: the trained toy model
# ---------------------------------------------------------------------------


def _recipe_key():
    src = os.path.dirname(satlab.__file__)
    h = hashlib.sha1()
    for name in ("train.py", "denoiser.py", "attention.py", "data.py", "diffusion.py", "tensor.py"):
        with open(os.path.join(src, name), "rb") as fh:
            h.update(fh.read())
    h.update(repr((tr.DEFAULT_DATASET_SIZE, tr.DEFAULT_BATCH_SIZE, tr.DEFAULT_LR, tr.DEFAULT_EPOCHS)).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def default_model(request):
    cache = request.config.cache.mkdir("satlab-default-model")
    stem = os.path.join(str(cache), _recipe_key())
    if os.environ.get("SATLAB_RETRAIN") != "1" and os.path.exists(stem + ".json"):
        with open(stem + ".json") as fh:
            info = json.load(fh)
        return DenoiserWeights.load(stem + ".sawt"), info
    start = time.perf_counter()
    weights, losses = tr.train_default(seed=0)
    info = {"seconds": time.perf_counter() - start, "losses": losses}
    weights.save(stem + ".sawt")
    with open(stem + ".json", "w") as fh:
        json.dump(info, fh)
    return weights, info


@pytest.fixture(scope="session")
def ablation(default_model):
    weights, _ = default_model
    sched = NoiseSchedule.cosine(weights.config.n_steps)
    plans = ex.plan_sets(N_SETS, 4, seed=0)
    start = time.perf_counter()
    out = {}
    for mode in ("none", "reference", "full"):
        out[mode], _ = ex.run_sets(weights, sched, ShareConfig(mode), plans)
    return out, time.perf_counter() - start


def _means(metrics, field):
    return float(np.mean([getattr(m, field) for m in metrics]))


@pytest.mark.slow
@pytest.mark.criterion(5, "consistency/alignment ordering on the trained toy model")
def test_criterion_5_ordering(request, default_model, ablation):
    _, info = default_model
    runs, eval_seconds = ablation
    cons = {m: _means(runs[m], "consistency") for m in runs}
    align = {m: _means(runs[m], "mean_content_alignment") for m in runs}
    wins, losses, p = ex.paired_sign_test([m.consistency for m in runs["reference"]],
                                          [m.consistency for m in runs["none"]])
    _detail(request, "consistency N/R/F {none:.3f}/{reference:.3f}/{full:.3f}; ".format(**cons)
            + "alignment N/R/F {none:.3f}/{reference:.3f}/{full:.3f}; ".format(**align)
            + f"sign test {wins}-{losses} p={p:.2g}; train {info['seconds']:.0f}s, eval {eval_seconds:.0f}s")
    assert info["seconds"] <= 15 * 60 and eval_seconds <= 5 * 60
    assert cons["full"] >= cons["reference"] > cons["none"]
    assert p < 0.05
    assert align["none"] >= align["reference"] >= align["full"]


@pytest.mark.slow
@pytest.mark.criterion(6, "style match effect size on the trained toy model")
def test_criterion_6_style_match(request, ablation):
    runs, _ = ablation
    rate = {m: _means(runs[m], "style_match_rate") for m in runs}
    _detail(request, f"style match none {rate['none']:.3f}, reference {rate['reference']:.3f} "
                     f"over {N_SETS} sets (need +0.15)")
    assert rate["reference"] - rate["none"] >= 0.15


# Mean loss over the last tenth of the default run divided by the mean over
# the first tenth. Measured 0.3598 for the default recipe; the bound leaves
# room for last-ulp differences in libm between machines.
LOSS_RATIO_BOUND = 0.37


@pytest.mark.slow
def test_default_recipe_loss_regression(default_model):
    _, info = default_model
    losses = np.array(info["losses"])
    k = len(losses) // 10
    assert losses[-k:].mean() / losses[:k].mean() <= LOSS_RATIO_BOUND


# ---------------------------------------------------------------------------
# 7: restyle from image with the oracle
# ---------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(7, "restyle-from-image with the GMM oracle")
def test_criterion_7_restyle(request):
    start = time.perf_counter()
    model = GmmDenoiser(data.oracle_gmm())
    sched = NoiseSchedule.cosine(50)
    shared = ex.run_restyles(model, sched, ShareConfig("reference"), N_RESTYLES)
    plain = ex.run_restyles(model, sched, ShareConfig("none"), N_RESTYLES)
    rate, base = float(np.mean(shared)), float(np.mean(plain))
    _detail(request, f"input-style match {rate:.3f} with sharing vs {base:.3f} without over {N_RESTYLES} runs "
                     f"(need > {CHANCE + 0.15:.2f}); {time.perf_counter() - start:.0f}s")
    assert rate > CHANCE + 0.15


# ---------------------------------------------------------------------------
# 8: visualizations
# ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "attention PCA and probability-map correctness")
def test_criterion_8_visualization(request):
    r = Rng(808, 8)
    worst, checked = 0.0, 0
    while checked < FIXTURES:
        keys = 2 + r.randint(3)
        x = rand(r, 4 + r.randint(12), keys) * np.linspace(1.0, 0.2, keys)
        xc = x - x.mean(axis=0)
        vals, vecs = np.linalg.eigh(xc.T @ xc / x.shape[0])
        order = np.argsort(vals)[::-1][: min(3, keys)]
        if np.min(-np.diff(vals[order])) < 1e-2 * vals[order][0] if len(order) > 1 else False:
            continue  # near-degenerate spectra have no unique principal axes
        want = xc @ vecs[:, order]
        got = ev.pca_projections(x, k=len(order), iterations=500)
        for c in range(len(order)):
            sign = 1.0 if got[:, c] @ want[:, c] >= 0 else -1.0
            worst = max(worst, float(np.abs(sign * got[:, c] - want[:, c]).max()))
        checked += 1

    p = np.zeros((2, 16, 16))
    p[1, 7, 10] = 1.0
    img = ev.attention_prob_map({0: [p, p]}, 7, 0, 1, scale=1)
    expected = np.zeros((4, 4))
    expected[2, 2] = 1.0
    bit_exact = img.tobytes() == expected.tobytes()
    _detail(request, f"PCA max err {worst:.1e} on {FIXTURES} fixtures; single-key map bit-exact: {bit_exact}")
    assert worst <= 1e-4 and bit_exact
