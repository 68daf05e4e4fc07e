"""Procedural content x style images.

Content is one of six shapes; style is a palette plus a background texture.
Renders are 16x16 RGB in [-1, 1] and a pure function of (content, style,
jitter seed).
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .denoiser import GmmSpec
from .tensor import Rng

CONTENTS = ("circle", "square", "triangle", "cross", "star", "bar")
STYLES = ("warm/stripes", "cool/dots", "mono/gradient", "pastel/plain")
N_CONTENT = len(CONTENTS)
N_STYLE = len(STYLES)
SIZE = 16
PROTOTYPE_VARIANCE = 0.01  # s = 0.1

# (background A, background B, foreground) in [-1, 1] RGB
_PALETTES = {
    0: ((0.80, -0.70, -0.80), (0.95, 0.35, -0.75), (0.95, 0.95, 0.30)),
    1: ((-0.85, -0.55, 0.55), (-0.30, 0.75, 0.85), (-0.70, 0.85, -0.45)),
    2: ((-0.95, -0.95, -0.95), (0.10, 0.10, 0.10), (0.95, 0.95, 0.95)),
    3: ((0.90, 0.55, 0.70), (0.90, 0.55, 0.70), (0.35, 0.30, 0.95)),
}


@dataclass
class StyledSample:
    image: np.ndarray
    content_id: int
    style_id: int


def _background(style):
    a, b, _ = (np.array(c) for c in _PALETTES[style])
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    if style == 0:  # horizontal stripes, 2 px
        w = ((yy // 2) % 2).astype(float)
    elif style == 1:  # dot lattice
        w = ((yy % 4 == 1) & (xx % 4 == 1)).astype(float)
    elif style == 2:  # left-to-right ramp
        w = xx / (SIZE - 1.0)
    else:
        w = np.zeros((SIZE, SIZE))
    return a * (1.0 - w[..., None]) + b * w[..., None]


def _shape_mask(content, cx, cy, scale):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] + 0.5
    u = (xx - cx) / scale
    v = (yy - cy) / scale
    r = 5.0
    if content == 0:
        return u * u + v * v <= r * r
    if content == 1:
        return (np.abs(u) <= 4.2) & (np.abs(v) <= 4.2)
    if content == 2:
        # apex up, base at v = +4.5
        return (v <= 4.5) & (v >= -5.0) & (np.abs(u) <= (v + 5.0) * 0.55)
    if content == 3:
        return ((np.abs(u) <= 1.2) & (np.abs(v) <= 7.0)) | ((np.abs(v) <= 1.2) & (np.abs(u) <= 7.0))
    if content == 4:
        ang = np.arctan2(v, u)
        rad = np.hypot(u, v)
        edge = 2.5 + 4.0 * (0.5 + 0.5 * np.cos(5 * (ang + math.pi / 2)))
        return rad <= edge
    return (np.abs(u) <= 6.5) & (np.abs(v) <= 1.8)


def render(content_id, style_id, rng=None):
    """Render one sample; ``rng=None`` gives the jitter-free prototype."""
    if not 0 <= content_id < N_CONTENT:
        raise ValueError(f"content id {content_id} out of range [0, {N_CONTENT})")
    if not 0 <= style_id < N_STYLE:
        raise ValueError(f"style id {style_id} out of range [0, {N_STYLE})")
    cx = cy = SIZE / 2.0
    scale = 1.0
    if rng is not None:
        cx += (rng.uniform() - 0.5) * 2.0
        cy += (rng.uniform() - 0.5) * 2.0
        scale = 0.9 + 0.2 * rng.uniform()
    img = _background(style_id)
    mask = _shape_mask(content_id, cx, cy, scale)
    img[mask] = _PALETTES[style_id][2]
    return StyledSample(img.astype(np.float32), content_id, style_id)


def prototypes():
    """Jitter-free renders as an array ``(content, style, H, W, 3)``."""
    return np.stack([np.stack([render(c, s).image for s in range(N_STYLE)])
                     for c in range(N_CONTENT)])


def make_dataset(n, seed=0):
    """``n`` jittered samples cycling over every (content, style) pair.

    Pairs are visited in a fixed order so every pair appears (for n >= 24)
    and styles are uniform given content.
    """
    if n <= 0:
        raise ValueError("dataset size must be positive")
    samples = []
    for i in range(n):
        pair = i % (N_CONTENT * N_STYLE)
        c, s = divmod(pair, N_STYLE)
        samples.append(render(c, s, Rng(seed, stream=i)))
    return samples


def gmm_from_samples(samples, variance=PROTOTYPE_VARIANCE):
    """One isotropic component per sample, uniform weights, labelled (content, style)."""
    if not samples:
        raise ValueError("need at least one sample")
    k = len(samples)
    means = np.stack([smp.image for smp in samples]).astype(np.float64)
    labels = np.array([(smp.content_id, smp.style_id) for smp in samples])
    return GmmSpec(np.full(k, 1.0 / k), means, np.full(k, variance), labels)


def oracle_gmm(per_pair=8, seed=777, variance=PROTOTYPE_VARIANCE):
    """Mixture over ``per_pair`` jittered renders of every pair.

    Covering the jitter matters when inverting images that are not
    prototypes: their trajectories then stay near the prior's support.
    """
    return gmm_from_samples(make_dataset(per_pair * N_CONTENT * N_STYLE, seed=seed), variance)


def gmm_from_dataset(variance=PROTOTYPE_VARIANCE):
    """One mixture component per (content, style) prototype, uniform weights."""
    protos = prototypes()
    k = N_CONTENT * N_STYLE
    labels = np.array([(c, s) for c in range(N_CONTENT) for s in range(N_STYLE)])
    return GmmSpec(np.full(k, 1.0 / k), protos.reshape(k, SIZE, SIZE, 3).astype(np.float64),
                   np.full(k, variance), labels)


def export_dataset(samples, out_dir):
    """Write ``content{c}_style{s}_{i}.ppm`` files plus ``manifest.csv``."""
    from .imageio import write_ppm

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "content_id", "style_id", "content", "style"])
        for i, smp in enumerate(samples):
            name = f"content{smp.content_id}_style{smp.style_id}_{i}.ppm"
            write_ppm(os.path.join(out_dir, name), smp.image)
            writer.writerow([name, smp.content_id, smp.style_id,
                             CONTENTS[smp.content_id], STYLES[smp.style_id]])
