"""Hand-written backpropagation and plain-SGD training for the toy denoiser.

Training always runs the unshared network; sharing is an inference-time
behaviour only.
"""

import math

import numpy as np

from . import tensor as tc
from .attention import merge_heads, split_heads
from .denoiser import FROZEN, DenoiserWeights, ModelConfig, forward, patchify
from .diffusion import NoiseSchedule


# The default recipe. The learning rate is far above the usual 1e-3 because
# plain SGD at 1e-3 barely moves this network within a CPU-minutes budget.
DEFAULT_DATASET_SIZE = 4096
DEFAULT_BATCH_SIZE = 32
DEFAULT_LR = 0.25
DEFAULT_EPOCHS = 100


class TrainingDiverged(tc.NumericError):
    def __init__(self, step):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


def _t(x):
    return np.swapaxes(x, -1, -2)


def _wgrad(x, dy):
    """sum over rows of x^T dy, for (..., k) and (..., n) activations."""
    k, n = x.shape[-1], dy.shape[-1]
    return tc.matmul(np.ascontiguousarray(x.reshape(-1, k).T), dy.reshape(-1, n))


def _ln_back(dy, y, inv):
    d = dy.shape[-1]
    mean_dy = dy.sum(axis=-1, keepdims=True) / d
    mean_dyy = (dy * y).sum(axis=-1, keepdims=True) / d
    return inv * (dy - mean_dy - y * mean_dyy)


def noisy_inputs(x0, t, eps, sched):
    """Per-sample forward noising for a batch with per-sample timesteps."""
    a = sched.alpha_bar[np.asarray(t)].reshape(-1, 1, 1, 1)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def loss_and_grad(weights, x0, content_ids, t, eps, sched, want_grad=True):
    """MSE between predicted and true noise for fixed ``(t, eps)``; optional gradients.

    ``t`` holds one schedule timestep per sample (in [1, T]).
    """
    dtype = weights.dtype
    x_t = noisy_inputs(np.asarray(x0, np.float64), t, np.asarray(eps, np.float64), sched).astype(dtype)
    t_idx = np.array([weights.time_index(int(ti), sched) for ti in np.atleast_1d(t)])
    cache = {} if want_grad else None
    pred = forward(x_t, content_ids, t_idx, weights, cache=cache)
    diff = pred - np.asarray(eps, dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not want_grad:
        return loss, None
    dpred = (2.0 / diff.size) * diff
    return loss, backward(weights, cache, dpred)


def backward(weights, cache, dout):
    """Reverse-mode gradients of ``sum(dout * forward(...))`` w.r.t. every weight.

    ``cache`` must come from :func:`satlab.denoiser.forward` with ``cfg=None``.
    """
    if not cache or "layers" not in cache:
        raise ValueError("backward needs a cache recorded by forward(..., cache={})")
    mc = weights.config
    p = weights.params
    dtype = weights.dtype
    grads = {}
    dout = np.asarray(dout, dtype)
    t_idx = cache["t_idx"]
    for name, other in (("skip", cache["x_t"]), ("gain", cache["f_out"])):
        g = np.zeros_like(p[name])
        np.add.at(g, t_idx, (dout * other).sum(axis=(1, 2, 3)))
        grads[name] = g
    dtok = patchify(dout * p["gain"][t_idx][:, None, None, None], mc.patch)

    grads["out_w"] = _wgrad(cache["uf"], dtok)
    grads["out_b"] = dtok.sum(axis=(0, 1))
    dh = _ln_back(tc.matmul(dtok, np.ascontiguousarray(p["out_w"].T)), cache["uf"], cache["invf"])

    for l in reversed(range(mc.layers)):
        lc = cache["layers"][l]
        # feed-forward
        grads[f"l{l}.ff2_w"] = _wgrad(lc["act"], dh)
        grads[f"l{l}.ff2_b"] = dh.sum(axis=(0, 1))
        dact = tc.matmul(dh, np.ascontiguousarray(p[f"l{l}.ff2_w"].T))
        sig, z1 = lc["sig"], lc["z1"]
        dz1 = dact * (sig * (1.0 + z1 * (1.0 - sig)))
        grads[f"l{l}.ff1_w"] = _wgrad(lc["u2"], dz1)
        grads[f"l{l}.ff1_b"] = dz1.sum(axis=(0, 1))
        du2 = tc.matmul(dz1, np.ascontiguousarray(p[f"l{l}.ff1_w"].T))
        dh = dh + _ln_back(du2, lc["u2"], lc["inv2"])

        # attention
        ac = lc["attn"]
        grads[f"l{l}.wo"] = _wgrad(ac["merged"], dh)
        dmerged = tc.matmul(dh, np.ascontiguousarray(p[f"l{l}.wo"].T))
        dho = split_heads(dmerged, mc.heads)
        probs, q, k, v = ac["probs"], ac["q"], ac["k"], ac["v"]
        dprobs = tc.matmul(dho, np.ascontiguousarray(_t(v)))
        dv = tc.matmul(np.ascontiguousarray(_t(probs)), dho)
        dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dlogits = dlogits / dtype.type(math.sqrt(q.shape[-1]))
        dq = tc.matmul(dlogits, k)
        dk = tc.matmul(np.ascontiguousarray(_t(dlogits)), q)
        u = lc["u"]
        du = np.zeros_like(u)
        for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
            dm = merge_heads(dproj)
            grads[f"l{l}.{name}"] = _wgrad(u, dm)
            du += tc.matmul(dm, np.ascontiguousarray(p[f"l{l}.{name}"].T))
        dh = dh + _ln_back(du, u, lc["inv1"])

    grads["patch_w"] = _wgrad(cache["patches"], dh)
    grads["patch_b"] = dh.sum(axis=(0, 1))
    grads["pos"] = dh.sum(axis=0)
    per_image = dh.sum(axis=1)
    g_content = np.zeros_like(p["content"])
    np.add.at(g_content, cache["ids"], per_image)
    grads["content"] = g_content
    g_time = np.zeros_like(p["time"])
    np.add.at(g_time, cache["t_idx"], per_image)
    grads["time"] = g_time
    return grads


def sample_loss(weights, x0, content_ids, rng, sched):
    """Training objective for a batch: draws t ~ U[1, T] and eps ~ N(0, I) from ``rng``."""
    x0 = np.asarray(x0)
    if x0.ndim == 3:
        x0 = x0[None]
    t = np.array([1 + rng.randint(sched.T) for _ in range(x0.shape[0])])
    eps = tc.randn(rng, x0.shape, np.float64)
    return loss_and_grad(weights, x0, content_ids, t, eps, sched, want_grad=False)[0]


def train(dataset, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LR, rng=None, batch_size=DEFAULT_BATCH_SIZE, weights=None,
          config=ModelConfig(), sched=None, init_seed=0, log_every=0, callback=None):
    """Plain SGD on the noise-prediction MSE.

    Returns ``(weights, losses)`` with one loss per step. Deterministic for
    a given ``rng`` seed, dataset and hyperparameters.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else tc.Rng(0, stream=1)
    sched = sched if sched is not None else NoiseSchedule.cosine(config.n_steps)
    weights = weights.copy() if weights is not None else DenoiserWeights.init(config, seed=init_seed)
    images = np.stack([s.image for s in dataset]).astype(np.float64)
    ids = np.array([s.content_id for s in dataset])
    n = len(dataset)
    lr = weights.dtype.type(lr)
    losses = []
    step = 0
    for _ in range(epochs):
        order = np.arange(n)
        for i in range(n - 1, 0, -1):  # Fisher-Yates
            j = rng.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            t = np.array([1 + rng.randint(sched.T) for _ in idx])
            eps = tc.randn(rng, images[idx].shape, np.float64)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = loss_and_grad(weights, images[idx], ids[idx], t, eps, sched)
            except tc.NumericError as exc:  # overflow caught inside a kernel
                raise TrainingDiverged(step) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(step)
            if lr != 0:
                for name, g in grads.items():
                    if name not in FROZEN:
                        weights.params[name] -= lr * g
            losses.append(loss)
            step += 1
            if callback is not None:
                callback(step, loss)
    return weights, losses


def write_loss_csv(path, losses):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i},{loss:.8g}\n")


def train_default(seed=0, **overrides):
    """Train on the default recipe: ``DEFAULT_DATASET_SIZE`` samples from dataset seed ``seed``."""
    from .data import make_dataset

    return train(make_dataset(DEFAULT_DATASET_SIZE, seed=seed), rng=tc.Rng(seed, stream=1), **overrides)
