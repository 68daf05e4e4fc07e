"""Set-level metrics and attention visualizations.

The embedder is a handcrafted stand-in for a learned image encoder:
per-quadrant colour and gradient-orientation histograms, passed through a
fixed random projection and L2-normalized. It is gated on separating styles
(see the tests) before any metric built on it is trusted.
"""

import math
from functools import lru_cache

import numpy as np

from . import data
from .tensor import Rng, randn

EMBED_DIM = 64
_BINS = 8
_PROJECTION_SEED = 1234
_TEXTURE_PERIOD = 4


def _box_blur(x, width):
    # circular box filter; flattens any texture whose period divides ``width``
    out = np.zeros_like(x)
    for dy in range(width):
        for dx in range(width):
            out += np.roll(x, (dy - width // 2, dx - width // 2), axis=(0, 1))
    return out / (width * width)


def _features(image):
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (data.SIZE, data.SIZE, 3):
        raise ValueError(f"embed expects a {data.SIZE}x{data.SIZE}x3 image, got {img.shape}")
    bits = (img > 0).astype(np.int64)
    colour = bits[..., 0] * 4 + bits[..., 1] * 2 + bits[..., 2]
    lum = _box_blur(img.mean(axis=-1), _TEXTURE_PERIOD)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * math.pi)
    obin = np.minimum((ang / (2 * math.pi / _BINS)).astype(np.int64), _BINS - 1)
    half = data.SIZE // 2
    feats = []
    for qy in (0, 1):
        for qx in (0, 1):
            sl = (slice(qy * half, (qy + 1) * half), slice(qx * half, (qx + 1) * half))
            ch = np.bincount(colour[sl].ravel(), minlength=_BINS) / float(half * half)
            oh = np.bincount(obin[sl].ravel(), weights=mag[sl].ravel(), minlength=_BINS)
            total = oh.sum()
            if total > 0:
                oh = oh / total
            feats.append(ch)
            feats.append(oh)
    return np.concatenate(feats)


@lru_cache(maxsize=1)
def _projection():
    n_feat = 4 * 2 * _BINS
    return randn(Rng(_PROJECTION_SEED, stream=7), (EMBED_DIM, n_feat), np.float64) / math.sqrt(n_feat)


def embed(image):
    """64-d unit-norm embedding of a 16x16x3 image in [-1, 1]."""
    e = _projection() @ _features(image)
    return e / np.linalg.norm(e)


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def mean_pairwise_cosine(embeddings):
    e = np.asarray(embeddings, dtype=np.float64)
    if e.shape[0] < 2:
        raise ValueError("need at least two items")
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    sims = e @ e.T
    iu = np.triu_indices(e.shape[0], k=1)
    return float(sims[iu].mean())


def set_consistency(images):
    """Mean cosine similarity over all unordered pairs of image embeddings."""
    if len(images) < 2:
        raise ValueError("set_consistency needs at least two images")
    return mean_pairwise_cosine([embed(im) for im in images])


@lru_cache(maxsize=1)
def prototype_embeddings():
    """(content, style, 64) embeddings of the jitter-free renders."""
    protos = data.prototypes()
    return np.stack([[embed(protos[c, s]) for s in range(data.N_STYLE)]
                     for c in range(data.N_CONTENT)])


def content_scores(image):
    """Alignment with every content class: max cosine over that class's style prototypes."""
    e = embed(image)
    return (prototype_embeddings() @ e).max(axis=1)


def content_alignment(image, content_id):
    if not 0 <= content_id < data.N_CONTENT:
        raise ValueError(f"content id {content_id} out of range")
    return float(content_scores(image)[content_id])


def classify_style(image):
    """Style of the nearest jitter-free prototype (any content)."""
    sims = prototype_embeddings() @ embed(image)
    return int(np.unravel_index(np.argmax(sims), sims.shape)[1])


def classify_content(image):
    return int(np.argmax(content_scores(image)))


def style_match_rate(images, reference):
    """Fraction of ``images`` classified with the same style as ``reference``."""
    if len(images) == 0:
        raise ValueError("style_match_rate needs at least one image")
    target = classify_style(reference)
    return float(np.mean([classify_style(im) == target for im in images]))


# ---------------------------------------------------------------------------
# attention visualizations
# ---------------------------------------------------------------------------


def _minmax(x):
    lo, hi = x.min(), x.max()
    if hi - lo > 0:
        return (x - lo) / (hi - lo)
    # constant map: white where there is mass, black otherwise
    return (x > 0).astype(np.float64)


def _upsample(grid, scale):
    return np.kron(grid, np.ones((scale, scale)))


def attention_prob_map(probs, query, layer, head, stream=1, ref_keys=None, scale=None):
    """Grayscale [0, 1] map of one query's attention over the reference tokens.

    ``probs`` is the per-layer record from a sampling run (layer -> one
    ``(heads, m, keys)`` array per image). For a target image the reference
    block is the first ``ref_keys`` columns (default: ``m``, as recorded in
    reference mode); for the reference image itself the whole row is used.
    """
    if layer not in probs:
        raise IndexError(f"no probabilities recorded for layer {layer}")
    per_stream = probs[layer]
    if not 0 <= stream < len(per_stream):
        raise IndexError(f"stream {stream} out of range")
    p = np.asarray(per_stream[stream], dtype=np.float64)
    heads, m, keys = p.shape
    if not 0 <= head < heads:
        raise IndexError(f"head {head} out of range")
    if not 0 <= query < m:
        raise IndexError(f"query position {query} out of range")
    n_ref = min(keys, m if ref_keys is None else ref_keys)
    block = p[head, query, :n_ref]
    side = math.isqrt(n_ref)
    if side * side != n_ref:
        raise ValueError(f"{n_ref} reference keys do not form a square grid")
    if scale is None:
        scale = data.SIZE // side if data.SIZE % side == 0 else 1
    return _upsample(_minmax(block.reshape(side, side)), scale)


def mean_head_probs(probs, layer, stream=1):
    """Head-averaged ``(m, keys)`` attention matrix of one image at one layer."""
    return np.asarray(probs[layer][stream], dtype=np.float64).mean(axis=0)


def top_components(matrix, k=3, iterations=100, seed=0, rank_tol=1e-9):
    """Top-``k`` principal directions of the rows of ``matrix`` by power iteration.

    Returns ``(directions (k, d), variances (k,))``; directions beyond the
    matrix rank are zero vectors with zero variance.
    """
    x = np.asarray(matrix, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / x.shape[0]
    d = cov.shape[0]
    rng = Rng(seed, stream=11)
    dirs = np.zeros((k, d))
    vals = np.zeros(k)
    top = None
    for i in range(k):
        v = randn(rng, (d,), np.float64)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
        lam = float(v @ cov @ v)
        if top is None:
            top = lam
        if top <= 0 or lam <= rank_tol * top:
            break
        dirs[i], vals[i] = v, lam
        cov = cov - lam * np.outer(v, v)
    return dirs, vals


def pca_projections(matrix, k=3, iterations=100, seed=0):
    """Centered rows projected on the top-``k`` directions, ``(rows, k)``."""
    x = np.asarray(matrix, dtype=np.float64)
    dirs, _ = top_components(x, k, iterations, seed)
    return (x - x.mean(axis=0, keepdims=True)) @ dirs.T


def attention_pca_rgb(matrix, iterations=100, seed=0, scale=None):
    """Encode the top-3 principal components of attention rows as RGB.

    ``matrix`` has one row per target position (``m`` = a square grid) and
    one column per key. Each component is min-max scaled to [0, 1]; channels
    beyond the rank stay 0. Returns an ``(side*scale, side*scale, 3)`` image.
    """
    x = np.asarray(matrix, dtype=np.float64)
    proj = pca_projections(x, 3, iterations, seed)
    rgb = np.zeros_like(proj)
    for c in range(3):
        col = proj[:, c]
        lo, hi = col.min(), col.max()
        if hi - lo > 1e-12:
            rgb[:, c] = (col - lo) / (hi - lo)
    side = math.isqrt(x.shape[0])
    if side * side != x.shape[0]:
        raise ValueError("attention rows do not form a square grid")
    if scale is None:
        scale = data.SIZE // side if data.SIZE % side == 0 else 1
    grid = rgb.reshape(side, side, 3)
    return np.kron(grid, np.ones((scale, scale, 1)))


def write_metrics_csv(path, rows):
    """``rows``: iterable of (set_id, consistency, mean_content_alignment, style_match_rate)."""
    with open(path, "w") as fh:
        fh.write("set_id,consistency,mean_content_alignment,style_match_rate\n")
        for set_id, cons, align, match in rows:
            fh.write(f"{set_id},{cons:.6f},{align:.6f},{match:.6f}\n")
