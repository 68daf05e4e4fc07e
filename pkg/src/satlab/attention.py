"""Multi-head self-attention with cross-image sharing.

Three sharing modes are supported:

* ``none``: every image attends only to itself.
* ``full``: every image attends to the keys/values of the whole set.
* ``reference``: the first image of the set (the reference) runs plain
  self-attention; every other image (a target) attends to the reference's
  keys/values plus its own, after AdaIN-normalizing its queries and keys to
  the reference's statistics. Reference-key logits can be damped by a
  factor ``lam`` in (0, 1].

Arrays follow a ``(..., positions, channels)`` layout throughout; head-split
tensors are ``(streams, heads, positions, d_k)``.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import column_stats, matmul, softmax_rows

ADAIN_EPS = 1e-5


class ShareMode(str, enum.Enum):
    NONE = "none"
    FULL = "full"
    REFERENCE = "reference"


@dataclass(frozen=True)
class ShareConfig:
    mode: ShareMode = ShareMode.NONE
    use_adain: bool = True
    lam: float = 1.0
    # None shares every layer; otherwise one flag per layer
    layer_mask: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ShareMode(self.mode))
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"lam must lie in (0, 1], got {self.lam}")
        if self.layer_mask is not None:
            object.__setattr__(self, "layer_mask", tuple(bool(b) for b in self.layer_mask))

    def validate(self, n_layers):
        if self.layer_mask is not None and len(self.layer_mask) != n_layers:
            raise ValueError(
                f"layer_mask has {len(self.layer_mask)} entries for {n_layers} layers"
            )
        return self

    def shares(self, layer):
        if self.mode is ShareMode.NONE:
            return False
        return self.layer_mask is None or self.layer_mask[layer]


def layer_mask_from_spec(spec, n_layers):
    """Parse a share-layers spec: a fraction (prefix of layers) or a bitmask string.

    >>> layer_mask_from_spec("0.5", 4)
    (True, True, False, False)
    >>> layer_mask_from_spec("1001", 4)
    (True, False, False, True)
    """
    text = str(spec).strip()
    if len(text) == n_layers and set(text) <= {"0", "1"} and not (n_layers == 1 and text == "1"):
        return tuple(c == "1" for c in text)
    frac = float(text)
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"share fraction must be in [0, 1], got {frac}")
    count = int(round(frac * n_layers))
    return tuple(i < count for i in range(n_layers))


@dataclass
class AttentionLayerWeights:
    """Per-layer projections. Head ``h`` owns columns ``h*d_k:(h+1)*d_k`` of
    ``wq``, ``wk`` and ``wv``; ``wo`` maps the concatenated heads back."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    @property
    def d_model(self):
        return self.wq.shape[0]

    @property
    def d_k(self):
        return self.wq.shape[1] // self.heads


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def adain(x, y, eps=ADAIN_EPS):
    """Re-standardize ``x`` to the per-channel mean/std of ``y`` (stats over positions)."""
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"adain channel mismatch: {x.shape} vs {y.shape}")
    mean_x, std_x = column_stats(x)
    mean_y, std_y = column_stats(y)
    scale = std_y / np.maximum(std_x, x.dtype.type(eps))
    return (x - mean_x[..., None, :]) * scale[..., None, :] + mean_y[..., None, :]


def _transpose(x):
    return np.swapaxes(x, -1, -2)


def scaled_dot_attention(q, k, v, key_scale=None):
    """softmax(q k^T / sqrt(d_k), optionally times a per-key scale) @ v.

    Returns ``(out, probs)``. ``key_scale`` has one entry per key in (0, 1].
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention dims disagree: q{q.shape} k{k.shape} v{v.shape}")
    logits = matmul(q, _transpose(k)) / q.dtype.type(math.sqrt(q.shape[-1]))
    if key_scale is not None:
        key_scale = np.asarray(key_scale, dtype=q.dtype)
        if key_scale.shape[-1] != k.shape[-2]:
            raise ValueError("key_scale needs one entry per key")
        logits = logits * key_scale
    probs = softmax_rows(logits)
    return matmul(probs, v), probs


def shared_attention_reference(q_t, k_t, v_t, ref, use_adain=True, lam=1.0):
    """Target attention over ``[reference keys ; own keys]``.

    ``ref`` is the reference's ``(q, k, v)`` for the same layer and head(s).
    Probabilities are returned with the reference block first.
    """
    q_r, k_r, v_r = ref
    if q_r.shape[-1] != q_t.shape[-1] or v_r.shape[-1] != v_t.shape[-1]:
        raise ValueError("reference and target head dims disagree")
    if use_adain:
        q_t = adain(q_t, q_r)
        k_t = adain(k_t, k_r)
    keys = np.concatenate([np.broadcast_to(k_r, k_t.shape[:-2] + k_r.shape[-2:]), k_t], axis=-2)
    values = np.concatenate([np.broadcast_to(v_r, v_t.shape[:-2] + v_r.shape[-2:]), v_t], axis=-2)
    scale = None
    if lam != 1.0:
        n_ref = k_r.shape[-2]
        scale = np.ones(keys.shape[-2], dtype=q_t.dtype)
        scale[:n_ref] = lam
    return scaled_dot_attention(q_t, keys, values, scale)


def shared_attention_full(streams):
    """Every stream attends to all streams' keys and values, in batch order."""
    if not streams:
        raise ValueError("shared_attention_full needs at least one stream")
    keys = np.concatenate([k for _, k, _ in streams], axis=-2)
    values = np.concatenate([v for _, _, v in streams], axis=-2)
    return [scaled_dot_attention(q, keys, values) for q, _, _ in streams]


# ---------------------------------------------------------------------------
# reference publication and the multi-head block
# ---------------------------------------------------------------------------


class ReferenceKV:
    """Reference-stream ``(q, k, v)`` per layer, each ``(heads, m, d_k)``.

    Entries are write-once and stored read-only; targets only read them.
    """

    def __init__(self):
        self._layers = {}

    def publish(self, layer, q, k, v):
        if layer in self._layers:
            raise RuntimeError(f"reference K/V for layer {layer} already published")
        frozen = []
        for a in (q, k, v):
            a = np.array(a, copy=True)
            a.setflags(write=False)
            frozen.append(a)
        self._layers[layer] = tuple(frozen)

    def __getitem__(self, layer):
        return self._layers[layer]

    def __contains__(self, layer):
        return layer in self._layers

    def __len__(self):
        return len(self._layers)


@dataclass
class ShareContext:
    """Per-denoiser-call sharing state.

    ``reference`` holds the published reference K/V. When ``external`` is
    set, every stream in the batch is a target and ``reference`` must already
    be filled; otherwise stream 0 is the reference and publishes into it.
    ``probs`` collects attention probabilities per layer when ``record`` is on.
    """

    reference: ReferenceKV = field(default_factory=ReferenceKV)
    external: bool = False
    record: bool = False
    probs: dict = field(default_factory=dict)


def split_heads(x, heads):
    """(n, m, d) -> (n, heads, m, d/heads)."""
    n, m, d = x.shape
    return np.ascontiguousarray(x.reshape(n, m, heads, d // heads).transpose(0, 2, 1, 3))


def merge_heads(x):
    """(n, heads, m, d_k) -> (n, m, heads*d_k)."""
    n, h, m, dk = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(n, m, h * dk))


def attend(q, k, v, cfg=None, ctx=None, layer=0):
    """Dispatch head-split ``(n, heads, m, d_k)`` projections to a sharing mode.

    Returns ``(out, probs)``; ``probs`` is a list (one array per stream)
    because the key count differs between the reference and target streams.
    """
    n = q.shape[0]
    if cfg is None or not cfg.shares(layer):
        out, probs = scaled_dot_attention(q, k, v)
        return out, list(probs)

    if cfg.mode is ShareMode.FULL:
        results = shared_attention_full([(q[i], k[i], v[i]) for i in range(n)])
        return np.stack([o for o, _ in results]), [p for _, p in results]

    if ctx is None:
        raise ValueError("reference sharing needs a ShareContext")
    outs, probs = [], []
    first_target = 0
    if not ctx.external:
        o0, p0 = scaled_dot_attention(q[:1], k[:1], v[:1])
        ctx.reference.publish(layer, q[0], k[0], v[0])
        outs.append(o0)
        probs.append(p0[0])
        first_target = 1
    if first_target < n:
        ref = ctx.reference[layer]
        ot, pt = shared_attention_reference(
            q[first_target:], k[first_target:], v[first_target:], ref,
            use_adain=cfg.use_adain, lam=cfg.lam,
        )
        outs.append(ot)
        probs.extend(pt)
    return np.concatenate(outs, axis=0), probs


def attention_update(phi, weights, cfg=None, ctx=None, layer=0, cache=None):
    """The multi-head attention term (without the residual) for ``(n, m, d_h)`` inputs."""
    if phi.shape[-1] != weights.d_model:
        raise ValueError(f"feature dim {phi.shape[-1]} != layer width {weights.d_model}")
    h = weights.heads
    q = split_heads(matmul(phi, weights.wq), h)
    k = split_heads(matmul(phi, weights.wk), h)
    v = split_heads(matmul(phi, weights.wv), h)
    out, probs = attend(q, k, v, cfg, ctx, layer)
    merged = merge_heads(out)
    if cache is not None:
        # backward is only defined for unshared attention
        cache.update(q=q, k=k, v=v, probs=np.stack(probs), merged=merged)
    if ctx is not None and ctx.record:
        ctx.probs[layer] = probs
    return matmul(merged, weights.wo)


def multi_head_block(phi, weights, cfg=None, ctx=None, layer=0):
    """Residual multi-head attention: ``phi + MHA(phi)``.

    ``phi`` is ``(m, d_h)`` for one image or ``(n, m, d_h)`` for a set.
    """
    single = phi.ndim == 2
    x = phi[None] if single else phi
    out = x + attention_update(x, weights, cfg, ctx, layer)
    return out[0] if single else out
