"""Matched-seed set protocol shared by the CLI and the acceptance suite.

A *set* is ``set_size`` images: a reference (index 0) and targets, each with a
content id and an initial-noise seed. Every sharing mode sees the same
contents and seeds for a given set id, so per-set metrics can be compared
pairwise across modes.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import data
from . import evaluation as ev
from .diffusion import restyle_from_image, sample_set
from .tensor import Rng

_CONTENT_STREAM = 0x5E7


@dataclass(frozen=True)
class SetPlan:
    set_id: int
    contents: tuple
    seeds: tuple


def plan_sets(n_sets, set_size=4, seed=0):
    """Deterministic contents and noise seeds for ``n_sets`` sets."""
    if n_sets < 1 or set_size < 1:
        raise ValueError("need at least one set of at least one image")
    plans = []
    for k in range(n_sets):
        rng = Rng(seed + k, stream=_CONTENT_STREAM)
        contents = tuple(rng.randint(data.N_CONTENT) for _ in range(set_size))
        seeds = tuple(1_000_003 * (seed + 1) + 1000 * k + i for i in range(set_size))
        plans.append(SetPlan(k, contents, seeds))
    return plans


@dataclass(frozen=True)
class SetMetrics:
    set_id: int
    consistency: float
    mean_content_alignment: float
    style_match_rate: float

    def row(self):
        return (self.set_id, self.consistency, self.mean_content_alignment, self.style_match_rate)


def score_set(set_id, images, contents):
    """Metrics for one set; style match is measured for targets against image 0."""
    images = list(images)
    consistency = ev.set_consistency(images) if len(images) > 1 else 1.0
    alignment = float(np.mean([ev.content_alignment(im, c) for im, c in zip(images, contents)]))
    match = ev.style_match_rate(images[1:], images[0]) if len(images) > 1 else 1.0
    return SetMetrics(set_id, consistency, alignment, match)


def run_sets(model, sched, cfg, plans, image_shape=(data.SIZE, data.SIZE, 3)):
    """Generate and score every planned set under one share config.

    Returns ``(metrics, images)`` with one entry per plan.
    """
    metrics, images = [], []
    for plan in plans:
        imgs = sample_set(model, plan.contents, plan.seeds, sched, cfg, image_shape).images
        metrics.append(score_set(plan.set_id, imgs, plan.contents))
        images.append(imgs)
    return metrics, images


def run_restyles(model, sched, cfg, n_runs, n_targets=3, seed=0):
    """Restyle-from-image runs on jittered dataset renders.

    Returns the per-run fraction of targets whose classified style matches
    the *input* image's style.
    """
    rates = []
    for k in range(n_runs):
        rng = Rng(seed + k, stream=_CONTENT_STREAM + 1)
        ref_c, ref_s = rng.randint(data.N_CONTENT), rng.randint(data.N_STYLE)
        source = data.render(ref_c, ref_s, rng).image.astype(np.float64)
        targets = [rng.randint(data.N_CONTENT) for _ in range(n_targets)]
        seeds = [7919 * (seed + 1) + 100 * k + i for i in range(n_targets)]
        images, _ = restyle_from_image(model, source, ref_c, targets, seeds, sched, cfg)
        rates.append(ev.style_match_rate(images[1:], source))
    return rates


def sign_test_p(wins, losses):
    """One-sided exact sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).

    Ties are dropped before calling.
    """
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def paired_sign_test(a, b):
    """``(wins, losses, p)`` for the claim a > b over paired samples."""
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, losses = int((diffs > 0).sum()), int((diffs < 0).sum())
    return wins, losses, sign_test_p(wins, losses)


def summarize(metrics):
    arr = np.array([[m.consistency, m.mean_content_alignment, m.style_match_rate] for m in metrics])
    return dict(zip(("consistency", "mean_content_alignment", "style_match_rate"), arr.mean(axis=0)))
